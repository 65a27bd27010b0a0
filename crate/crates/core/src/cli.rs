//! The `avedit` command-line harness.
//!
//! Every command writes its artifacts and a `manifest.json` into `--out-dir`.
//! The manifest holds the fully resolved arguments, so `avedit replay
//! <manifest>` regenerates the same artifacts bit for bit.
//!
//! CSV schemas (headers always written, floats in shortest round-trip decimal):
//!
//! ```text
//! convergence.csv  solver,n_steps,endpoint_error,ratio_to_previous
//! roundtrip.csv    row,k_iters,combine,seed,rel_l2,mean_reduction_vs_first
//! metrics.csv      abs_l2,rel_l2,max_abs,edit_l2
//! steps.csv        step,point,t,self_injected,cross_injected,reconstruction_norm,edited_norm
//! attention.csv    step,point,t,layer,head,kind,branch,rows,cols,file
//! ```
//!
//! Exit codes: 0 success, 1 usage, input or configuration error, 2 numeric failure.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::control::AttentionMaps;
use crate::attention::TauDirection;
use crate::config::{check_config, parse_field_spec, read_edit_config, ResolvedConfig};
use crate::error::{Error, Result};
use crate::grid::{read_grid, write_grid};
use crate::latent::{gaussian_noise, Latent, NoiseSeed, Shape};
use crate::oracles::{reference_integrate, AnalyticField};
use crate::pipeline::{
    default_config, paired_summary, reconstruction_report, run_edit_observed, Backend, EditConfig,
    EvaluationAttention, Modality, TaskKind,
};
use crate::scheduler::{
    invert_trajectory, make_time_grid, sample_trajectory, Combine, InversionMode, SolverKind,
};

pub const THREADS_ENV: &str = "OAVE_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "avedit", version, about = "Flow-matching inversion and attention-controlled latent editing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Endpoint error of Euler and midpoint sampling against an RK4 reference.
    Convergence(ConvergenceArgs),
    /// Inversion round-trip error for several fixed-point iteration counts.
    Roundtrip(RoundtripArgs),
    /// Invert a latent and regenerate it under a target prompt.
    Edit(EditArgs),
    /// Run an edit on the toy backend and dump attention maps as grid files.
    Attention(AttentionArgs),
    /// Draw a latent from an analytic field's data law and write it as a grid.
    Sample(SampleArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolverArg {
    Euler,
    Midpoint,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CombineArg {
    Average,
    Last,
}

impl From<CombineArg> for Combine {
    fn from(c: CombineArg) -> Self {
        match c {
            CombineArg::Average => Combine::Average,
            CombineArg::Last => Combine::Last,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Literal,
    Strength,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Analytic,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Addition,
    Replacement,
    Removal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    Audio,
    Video,
}

#[derive(Debug, Args)]
pub struct ConvergenceArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub solver: SolverArg,
    /// Preset name, inline JSON, or a JSON file.
    #[arg(long, default_value = "gaussian")]
    pub field: String,
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    pub steps: Vec<usize>,
    /// Latent shape such as `1x8x8`.
    #[arg(long, default_value = "1x8x8")]
    pub shape: String,
    /// Seed of the starting noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100_000)]
    pub reference_substeps: usize,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RoundtripArgs {
    #[arg(long, default_value = "mixture")]
    pub field: String,
    #[arg(long, default_value_t = 32)]
    pub steps: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3])]
    pub k_iters: Vec<usize>,
    #[arg(long, value_enum, default_value = "last")]
    pub combine: CombineArg,
    /// Number of seeds.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "8x16x16")]
    pub shape: String,
    /// Solver used for regeneration.
    #[arg(long, value_enum, default_value = "midpoint")]
    pub solver: SolverArg,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// JSON edit configuration. Without it, defaults for --task and the modality are used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input latent in `OAVG` format.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// Defaults to the one matching the input rank.
    #[arg(long, value_enum)]
    pub modality: Option<ModalityArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub k_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub combine: Option<CombineArg>,
    #[arg(long)]
    pub tau_s: Option<f64>,
    #[arg(long)]
    pub tau_c: Option<f64>,
    #[arg(long, value_enum)]
    pub tau_direction: Option<DirectionArg>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Field for the analytic backend.
    #[arg(long)]
    pub field: Option<String>,
    /// Vocabulary seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttentionArgs {
    #[command(flatten)]
    pub edit: EditArgs,
    /// Regeneration steps to dump (grid index of the step start). Defaults to the first and last.
    #[arg(long, value_delimiter = ',')]
    pub dump_steps: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long, default_value = "gaussian")]
    pub field: String,
    #[arg(long, default_value = "1x16x16")]
    pub shape: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Defaults to the directory holding the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceRun {
    pub solvers: Vec<SolverKind>,
    pub field: AnalyticField,
    pub steps: Vec<usize>,
    pub shape: Shape,
    pub seed: u64,
    pub reference_substeps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundtripRun {
    pub field: AnalyticField,
    pub n_steps: usize,
    pub k_iters: Vec<usize>,
    pub combine: Combine,
    pub seeds: Vec<u64>,
    pub shape: Shape,
    pub solver: SolverKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRun {
    pub config: EditConfig,
    /// Config keys filled from the defaults.
    pub defaulted: Vec<String>,
    pub input: PathBuf,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionRun {
    pub edit: EditRun,
    pub dump_steps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRun {
    pub field: AnalyticField,
    pub shape: Shape,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum ResolvedRun {
    Sample(SampleRun),
    Convergence(ConvergenceRun),
    Roundtrip(RoundtripRun),
    Edit(EditRun),
    Attention(AttentionRun),
}

impl ResolvedRun {
    pub fn name(&self) -> &'static str {
        match self {
            ResolvedRun::Sample(_) => "sample",
            ResolvedRun::Convergence(_) => "convergence",
            ResolvedRun::Roundtrip(_) => "roundtrip",
            ResolvedRun::Edit(_) => "edit",
            ResolvedRun::Attention(_) => "attention",
        }
    }

    fn seeds(&self) -> Vec<u64> {
        match self {
            ResolvedRun::Sample(r) => vec![r.seed],
            ResolvedRun::Convergence(r) => vec![r.seed],
            ResolvedRun::Roundtrip(r) => r.seeds.clone(),
            ResolvedRun::Edit(r) => vec![r.config.seed],
            ResolvedRun::Attention(r) => vec![r.edit.config.seed],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub run: ResolvedRun,
    pub seeds: Vec<u64>,
    /// Artifact file names, relative to the output directory.
    pub artifacts: Vec<String>,
    pub timings: Timings,
}

pub fn parse_shape(text: &str) -> Result<Shape> {
    let dims = text
        .split(['x', 'X', ','])
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config("shape", format!("`{text}` is not like 8x16x16")))
        })
        .collect::<Result<Vec<_>>>()?;
    Shape::new(dims).map_err(|e| Error::config("shape", e.to_string()))
}

fn solvers(arg: SolverArg) -> Vec<SolverKind> {
    match arg {
        SolverArg::Euler => vec![SolverKind::Euler],
        SolverArg::Midpoint => vec![SolverKind::Midpoint],
        SolverArg::Both => vec![SolverKind::Euler, SolverKind::Midpoint],
    }
}

fn resolve_convergence(a: &ConvergenceArgs) -> Result<ConvergenceRun> {
    Ok(ConvergenceRun {
        solvers: solvers(a.solver),
        field: parse_field_spec(&a.field)?,
        steps: a.steps.clone(),
        shape: parse_shape(&a.shape)?,
        seed: a.seed,
        reference_substeps: a.reference_substeps,
    })
}

fn resolve_roundtrip(a: &RoundtripArgs) -> Result<RoundtripRun> {
    let solver = match a.solver {
        SolverArg::Euler => SolverKind::Euler,
        SolverArg::Midpoint => SolverKind::Midpoint,
        SolverArg::Both => {
            return Err(Error::config("solver", "roundtrip takes a single solver"));
        }
    };
    let end = a
        .seed
        .checked_add(a.seeds)
        .ok_or_else(|| Error::config("seeds", "seed range overflows"))?;
    Ok(RoundtripRun {
        field: parse_field_spec(&a.field)?,
        n_steps: a.steps,
        k_iters: a.k_iters.clone(),
        combine: a.combine.into(),
        seeds: (a.seed..end).collect(),
        shape: parse_shape(&a.shape)?,
        solver,
    })
}

fn resolve_edit(a: &EditArgs) -> Result<EditRun> {
    let input = fs::canonicalize(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let (mut config, mut defaulted) = match &a.config {
        Some(path) => {
            let ResolvedConfig { config, defaulted } = read_edit_config(path)?;
            (config, defaulted)
        }
        None => {
            let task = match a.task.unwrap_or(TaskArg::Replacement) {
                TaskArg::Addition => TaskKind::Addition,
                TaskArg::Replacement => TaskKind::Replacement,
                TaskArg::Removal => TaskKind::Removal,
            };
            let modality = match a.modality {
                Some(ModalityArg::Audio) => Modality::Audio,
                Some(ModalityArg::Video) => Modality::Video,
                None => {
                    let latent = read_grid(&input)?;
                    if latent.shape().rank() == 4 {
                        Modality::Video
                    } else {
                        Modality::Audio
                    }
                }
            };
            (default_config(task, modality), vec!["<all>".to_string()])
        }
    };
    if a.config.is_some() && (a.task.is_some() || a.modality.is_some()) {
        return Err(Error::config(
            "task",
            "--task and --modality cannot override a config file",
        ));
    }
    if let Some(n) = a.steps {
        config.n_steps = n;
    }
    if let Some(k) = a.k_iters {
        config.inversion.iterations = k;
    }
    if let Some(c) = a.combine {
        config.inversion.combine = c.into();
    }
    if let Some(t) = a.tau_s {
        config.schedule.tau_s = t;
    }
    if let Some(t) = a.tau_c {
        config.schedule.tau_c = t;
    }
    if let Some(d) = a.tau_direction {
        config.schedule.direction = match d {
            DirectionArg::Literal => TauDirection::Literal,
            DirectionArg::Strength => TauDirection::Strength,
        };
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let field = a.field.as_deref().map(parse_field_spec).transpose()?;
    match (a.backend, field) {
        (Some(BackendArg::Toy), Some(_)) => {
            return Err(Error::config("field", "--field needs the analytic backend"));
        }
        (Some(BackendArg::Toy), None) => {
            if !matches!(config.backend, Backend::Toy { .. }) {
                config.backend = Backend::Toy {
                    model: Default::default(),
                };
            }
        }
        (Some(BackendArg::Analytic) | None, Some(field)) => {
            config.backend = Backend::Analytic { field };
        }
        (Some(BackendArg::Analytic), None) => {
            if !matches!(config.backend, Backend::Analytic { .. }) {
                config.backend = Backend::Analytic {
                    field: crate::config::field_preset("gaussian").expect("preset exists"),
                };
            }
        }
        (None, None) => {}
    }
    // Overridden keys are no longer defaults.
    let overridden: Vec<&str> = [
        (a.steps.is_some(), "n_steps"),
        (a.k_iters.is_some(), "inversion.iterations"),
        (a.combine.is_some(), "inversion.combine"),
        (a.tau_s.is_some(), "schedule.tau_s"),
        (a.tau_c.is_some(), "schedule.tau_c"),
        (a.tau_direction.is_some(), "schedule.direction"),
        (a.seed.is_some(), "seed"),
        (a.backend.is_some() || a.field.is_some(), "backend"),
    ]
    .into_iter()
    .filter_map(|(set, key)| set.then_some(key))
    .collect();
    defaulted.retain(|k| !overridden.contains(&k.as_str()));
    check_config(&config)?;
    Ok(EditRun {
        config,
        defaulted,
        input,
        source: a.source.clone(),
        target: a.target.clone(),
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(Error::from)
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn num(x: f64) -> String {
    x.to_string()
}

/// Endpoint errors and successive ratios for one solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub solver: SolverKind,
    pub n_steps: usize,
    pub endpoint_error: f64,
    /// Error at the previous (coarser) step count over this one.
    pub ratio_to_previous: Option<f64>,
}

pub fn convergence_table(run: &ConvergenceRun) -> Result<Vec<ConvergenceRow>> {
    if run.steps.len() < 2 {
        return Err(Error::Precondition("convergence needs at least two step counts".into()));
    }
    run.field.validate()?;
    let z1 = gaussian_noise(&run.shape, NoiseSeed(run.seed));
    let reference = reference_integrate(&z1, 1.0, 0.0, &run.field, run.reference_substeps)?;
    let mut rows = Vec::new();
    for &solver in &run.solvers {
        let errors = run
            .steps
            .par_iter()
            .map(|&n| {
                let grid = make_time_grid(n)?;
                let z0 = sample_trajectory(&z1, &grid, &run.field, &(), solver)?;
                z0.distance(&reference)
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, (&n, &err)) in run.steps.iter().zip(&errors).enumerate() {
            rows.push(ConvergenceRow {
                solver,
                n_steps: n,
                endpoint_error: err,
                ratio_to_previous: (i > 0).then(|| errors[i - 1] / err),
            });
        }
    }
    Ok(rows)
}

fn cmd_convergence(run: &ConvergenceRun, out_dir: &Path) -> Result<Vec<String>> {
    let rows = convergence_table(run)?;
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.solver.name().to_string(),
                r.n_steps.to_string(),
                num(r.endpoint_error),
                r.ratio_to_previous.map(num).unwrap_or_default(),
            ]
        })
        .collect();
    write_rows(
        &out_dir.join("convergence.csv"),
        &["solver", "n_steps", "endpoint_error", "ratio_to_previous"],
        &rows,
    )?;
    Ok(vec!["convergence.csv".into()])
}

/// Relative round-trip error `‖z0 − sample(invert(z0))‖ / ‖z0‖`.
pub fn roundtrip_error(
    z0: &Latent,
    field: &AnalyticField,
    n_steps: usize,
    mode: &InversionMode,
    solver: SolverKind,
) -> Result<f64> {
    let grid = make_time_grid(n_steps)?;
    let (noise, _) = invert_trajectory(z0, &grid, field, &(), mode)?;
    let back = sample_trajectory(&noise, &grid, field, &(), solver)?;
    let err = back.distance(z0)?;
    let norm = z0.norm();
    Ok(if norm > 0.0 { err / norm } else { err })
}

/// `errors[k][s]` for every iteration count `k` and seed `s`.
pub fn roundtrip_errors(run: &RoundtripRun) -> Result<Vec<Vec<f64>>> {
    if run.seeds.len() < 2 {
        return Err(Error::Precondition("roundtrip needs at least two seeds".into()));
    }
    if run.k_iters.is_empty() {
        return Err(Error::Precondition("roundtrip needs at least one iteration count".into()));
    }
    run.field.validate()?;
    let data = run
        .seeds
        .par_iter()
        .map(|&s| run.field.sample_data(&run.shape, NoiseSeed(s)))
        .collect::<Result<Vec<_>>>()?;
    run.k_iters
        .iter()
        .map(|&k| {
            let mode = InversionMode::new(k, run.combine);
            data.par_iter()
                .map(|z0| roundtrip_error(z0, &run.field, run.n_steps, &mode, run.solver))
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

fn cmd_roundtrip(run: &RoundtripRun, out_dir: &Path) -> Result<Vec<String>> {
    let errors = roundtrip_errors(run)?;
    let combine = match run.combine {
        Combine::Average => "average",
        Combine::Last => "last",
    };
    let mut rows = Vec::new();
    for (k, errs) in run.k_iters.iter().zip(&errors) {
        for (seed, e) in run.seeds.iter().zip(errs) {
            rows.push(vec![
                "seed".into(),
                k.to_string(),
                combine.into(),
                seed.to_string(),
                num(*e),
                String::new(),
            ]);
        }
    }
    for (k, errs) in run.k_iters.iter().zip(&errors) {
        let s = paired_summary(&errors[0], errs)?;
        rows.push(vec![
            "mean".into(),
            k.to_string(),
            combine.into(),
            String::new(),
            num(s.candidate_mean),
            num(s.mean_reduction),
        ]);
    }
    write_rows(
        &out_dir.join("roundtrip.csv"),
        &["row", "k_iters", "combine", "seed", "rel_l2", "mean_reduction_vs_first"],
        &rows,
    )?;
    Ok(vec!["roundtrip.csv".into()])
}

fn edit_inputs(run: &EditRun) -> Result<(Latent, crate::attention::Prompt, crate::attention::Prompt)> {
    let z0 = read_grid(&run.input)?;
    let tok = run.config.tokenizer();
    Ok((z0, tok.tokenize(&run.source)?, tok.tokenize(&run.target)?))
}

fn cmd_edit(run: &EditRun, out_dir: &Path) -> Result<Vec<String>> {
    let (z0, source, target) = edit_inputs(run)?;
    let outcome = run_edit_observed(&z0, &source, &target, &run.config, &mut |_: &EvaluationAttention<'_>| {})?;
    write_edit_outputs(&z0, &outcome, out_dir)
}

fn write_edit_outputs(
    z0: &Latent,
    outcome: &crate::pipeline::EditOutcome,
    out_dir: &Path,
) -> Result<Vec<String>> {
    write_grid(out_dir.join("reconstruction.oavg"), &outcome.reconstruction)?;
    write_grid(out_dir.join("edited.oavg"), &outcome.edited)?;
    write_grid(out_dir.join("noise.oavg"), &outcome.noise)?;
    let report = reconstruction_report(z0, outcome)?;
    let edit_l2 = outcome.edited.distance(&outcome.reconstruction)?;
    write_rows(
        &out_dir.join("metrics.csv"),
        &["abs_l2", "rel_l2", "max_abs", "edit_l2"],
        &[vec![
            num(report.abs_l2),
            num(report.rel_l2),
            num(report.max_abs),
            num(edit_l2),
        ]],
    )?;
    let d = &outcome.diagnostics;
    let rows: Vec<Vec<String>> = d
        .evaluations
        .iter()
        .map(|ev| {
            let norms = d.norms.iter().find(|n| n.step == ev.step);
            vec![
                ev.step.to_string(),
                ev.point.name().into(),
                num(ev.t),
                ev.self_injected.to_string(),
                ev.cross_injected.to_string(),
                norms.map(|n| num(n.reconstruction)).unwrap_or_default(),
                norms.map(|n| num(n.edited)).unwrap_or_default(),
            ]
        })
        .collect();
    write_rows(
        &out_dir.join("steps.csv"),
        &[
            "step",
            "point",
            "t",
            "self_injected",
            "cross_injected",
            "reconstruction_norm",
            "edited_norm",
        ],
        &rows,
    )?;
    Ok(vec![
        "reconstruction.oavg".into(),
        "edited.oavg".into(),
        "noise.oavg".into(),
        "metrics.csv".into(),
        "steps.csv".into(),
    ])
}

fn map_as_grid(map: &ndarray::Array2<f64>) -> Result<Latent> {
    let (rows, cols) = map.dim();
    Latent::new(Shape::new([1, rows, cols])?, map.iter().copied().collect())
}

fn cmd_attention(run: &AttentionRun, out_dir: &Path) -> Result<Vec<String>> {
    if !matches!(run.edit.config.backend, Backend::Toy { .. }) {
        return Err(Error::config("backend", "attention maps need the toy backend"));
    }
    let (z0, source, target) = edit_inputs(&run.edit)?;
    let n = run.edit.config.n_steps;
    let wanted: BTreeSet<usize> = if run.dump_steps.is_empty() {
        [n, 1].into_iter().collect()
    } else {
        run.dump_steps.iter().copied().collect()
    };
    if let Some(bad) = wanted.iter().find(|&&s| s == 0 || s > n) {
        return Err(Error::config("dump_steps", format!("step {bad} is outside 1..={n}")));
    }
    let maps_dir = out_dir.join("attention");
    fs::create_dir_all(&maps_dir).map_err(|e| Error::io(&maps_dir, e))?;
    let mut index = Vec::new();
    let mut artifacts = Vec::new();
    let mut failure = None;
    let mut observer = |a: &EvaluationAttention<'_>| {
        if failure.is_some() || !wanted.contains(&a.key.step) {
            return;
        }
        let branches: [(&str, &AttentionMaps); 3] =
            [("source", a.source), ("own", a.own), ("consumed", a.consumed)];
        for (branch, maps) in branches {
            for (l, layer) in maps.layers.iter().enumerate() {
                let kinds = [("self", &layer.self_maps), ("cross", &layer.cross_maps)];
                for (kind, heads) in kinds {
                    for (h, m) in heads.iter().enumerate() {
                        let name = format!(
                            "step{:05}_{}_layer{l}_head{h}_{kind}_{branch}.oavg",
                            a.key.step,
                            a.key.point.name()
                        );
                        let written = map_as_grid(m)
                            .and_then(|g| write_grid(maps_dir.join(&name), &g));
                        if let Err(e) = written {
                            failure = Some(e);
                            return;
                        }
                        index.push(vec![
                            a.key.step.to_string(),
                            a.key.point.name().into(),
                            num(a.t),
                            l.to_string(),
                            h.to_string(),
                            kind.into(),
                            branch.into(),
                            m.nrows().to_string(),
                            m.ncols().to_string(),
                            format!("attention/{name}"),
                        ]);
                        artifacts.push(format!("attention/{name}"));
                    }
                }
            }
        }
    };
    let outcome = run_edit_observed(&z0, &source, &target, &run.edit.config, &mut observer)?;
    if let Some(e) = failure {
        return Err(e);
    }
    write_rows(
        &out_dir.join("attention.csv"),
        &["step", "point", "t", "layer", "head", "kind", "branch", "rows", "cols", "file"],
        &index,
    )?;
    let mut all = write_edit_outputs(&z0, &outcome, out_dir)?;
    all.push("attention.csv".into());
    all.extend(artifacts);
    Ok(all)
}

/// Executes a resolved run, writing artifacts and the manifest into `out_dir`.
pub fn execute(run: &ResolvedRun, out_dir: &Path) -> Result<RunManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let start = Instant::now();
    let artifacts = match run {
        ResolvedRun::Sample(r) => {
            let z = r.field.sample_data(&r.shape, NoiseSeed(r.seed))?;
            write_grid(out_dir.join("sample.oavg"), &z)?;
            vec!["sample.oavg".into()]
        }
        ResolvedRun::Convergence(r) => cmd_convergence(r, out_dir)?,
        ResolvedRun::Roundtrip(r) => cmd_roundtrip(r, out_dir)?,
        ResolvedRun::Edit(r) => cmd_edit(r, out_dir)?,
        ResolvedRun::Attention(r) => cmd_attention(r, out_dir)?,
    };
    let manifest = RunManifest {
        command: run.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        run: run.clone(),
        seeds: run.seeds(),
        artifacts,
        timings: Timings {
            total_seconds: start.elapsed().as_secs_f64(),
        },
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    crate::config::from_json_str(&text)
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("`{value}` is not a positive integer")))?;
    // A second call in the same process (tests) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run_command(command: Command) -> Result<RunManifest> {
    configure_threads()?;
    match command {
        Command::Sample(a) => {
            let run = SampleRun {
                field: parse_field_spec(&a.field)?,
                shape: parse_shape(&a.shape)?,
                seed: a.seed,
            };
            execute(&ResolvedRun::Sample(run), &a.out_dir)
        }
        Command::Convergence(a) => execute(&ResolvedRun::Convergence(resolve_convergence(&a)?), &a.out_dir),
        Command::Roundtrip(a) => execute(&ResolvedRun::Roundtrip(resolve_roundtrip(&a)?), &a.out_dir),
        Command::Edit(a) => execute(&ResolvedRun::Edit(resolve_edit(&a)?), &a.out_dir),
        Command::Attention(a) => {
            let run = AttentionRun {
                edit: resolve_edit(&a.edit)?,
                dump_steps: a.dump_steps.clone(),
            };
            execute(&ResolvedRun::Attention(run), &a.edit.out_dir)
        }
        Command::Replay(a) => {
            let manifest = read_manifest(&a.manifest)?;
            let out_dir = match a.out_dir {
                Some(d) => d,
                None => a
                    .manifest
                    .parent()
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| PathBuf::from(".")),
            };
            execute(&manifest.run, &out_dir)
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_command(cli.command) {
        Ok(m) => {
            println!("{}: wrote {} artifacts", m.command, m.artifacts.len());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
