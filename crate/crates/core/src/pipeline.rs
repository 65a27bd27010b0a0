//! The two-phase edit.
//!
//! Phase 1 inverts the input latent to noise under the source prompt with
//! fixed-point inversion. Phase 2 regenerates twice from that noise with
//! midpoint steps: a reconstruction branch under the source prompt, and an
//! edited branch under the target prompt whose attention maps are replaced by
//! the reconstruction branch's maps from the same evaluation while the control
//! schedule is active.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attention::control::{edit_cross_map, edit_self_map, AttentionMaps, ControlSchedule};
use crate::attention::prompt::{compute_alignment, AlignmentMap, Prompt};
use crate::attention::toy::{AttentionHook, AttentionKind, AttentionSite, ToyDenoiser, ToyDenoiserConfig};
use crate::attention::TauDirection;
use crate::error::{Error, Result};
use crate::latent::Latent;
use crate::oracles::AnalyticField;
use crate::scheduler::{evaluate, invert_trajectory, make_time_grid, InversionLog, InversionMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Addition,
    Replacement,
    Removal,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Addition, TaskKind::Replacement, TaskKind::Removal];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Addition => "addition",
            TaskKind::Replacement => "replacement",
            TaskKind::Removal => "removal",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    /// Rank-3 latents `(channels, frequency, time)`.
    Audio,
    /// Rank-4 latents `(channels, frames, height, width)`.
    Video,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Audio, Modality::Video];

    pub fn rank(self) -> usize {
        match self {
            Modality::Audio => 3,
            Modality::Video => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Backend {
    /// A closed-form field. Prompts do not affect the velocity and no attention exists.
    Analytic { field: AnalyticField },
    Toy {
        #[serde(default)]
        model: ToyDenoiserConfig,
    },
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Analytic { .. } => "analytic",
            Backend::Toy { .. } => "toy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub task: TaskKind,
    pub modality: Modality,
    pub schedule: ControlSchedule,
    pub n_steps: usize,
    pub inversion: InversionMode,
    /// Vocabulary seed for prompt embeddings.
    pub seed: u64,
    pub backend: Backend,
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidSteps);
        }
        self.schedule.validate()?;
        self.inversion.validate()?;
        match &self.backend {
            Backend::Analytic { field } => field.validate(),
            Backend::Toy { model } => model.validate(),
        }
    }

    /// Text width the backend expects prompts to be embedded with.
    pub fn text_width(&self) -> usize {
        match &self.backend {
            Backend::Toy { model } => model.text_width,
            Backend::Analytic { .. } => crate::attention::prompt::DEFAULT_TEXT_WIDTH,
        }
    }

    pub fn tokenizer(&self) -> crate::attention::Tokenizer {
        crate::attention::Tokenizer::new(self.text_width(), self.seed)
    }
}

/// `(τ_s, τ_c)` per modality and task.
pub fn default_taus(task: TaskKind, modality: Modality) -> (f64, f64) {
    match (modality, task) {
        (Modality::Video, TaskKind::Addition | TaskKind::Replacement) => (0.42, 0.42),
        (Modality::Video, TaskKind::Removal) => (1.00, 0.42),
        (Modality::Audio, TaskKind::Addition | TaskKind::Replacement) => (0.75, 0.75),
        (Modality::Audio, TaskKind::Removal) => (1.00, 0.75),
    }
}

pub fn default_steps(modality: Modality) -> usize {
    match modality {
        Modality::Video => 64,
        Modality::Audio => 100,
    }
}

pub const DEFAULT_SEED: u64 = crate::attention::prompt::DEFAULT_VOCAB_SEED;

pub fn default_config(task: TaskKind, modality: Modality) -> EditConfig {
    let (tau_s, tau_c) = default_taus(task, modality);
    EditConfig {
        task,
        modality,
        schedule: ControlSchedule {
            tau_s,
            tau_c,
            direction: TauDirection::Literal,
            renormalize_cross: true,
        },
        n_steps: default_steps(modality),
        inversion: InversionMode::default(),
        seed: DEFAULT_SEED,
        backend: Backend::Toy {
            model: ToyDenoiserConfig::default(),
        },
    }
}

/// Which of the two midpoint evaluations of a regeneration step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalPoint {
    /// At `(z_i, t_i)`.
    Start,
    /// At the half-step state, `t_mid = (t_i + t_{i−1}) / 2`.
    Mid,
}

impl EvalPoint {
    pub fn name(self) -> &'static str {
        match self {
            EvalPoint::Start => "start",
            EvalPoint::Mid => "mid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EvalKey {
    /// Grid index `i` of the step `t_i → t_{i−1}`.
    pub step: usize,
    pub point: EvalPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluationDiagnostics {
    pub step: usize,
    pub point: EvalPoint,
    pub t: f64,
    pub self_injected: bool,
    pub cross_injected: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepNorms {
    pub step: usize,
    /// Time reached by the step.
    pub t: f64,
    pub reconstruction: f64,
    pub edited: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EditDiagnostics {
    /// Two entries per regeneration step, in evaluation order.
    pub evaluations: Vec<EvaluationDiagnostics>,
    pub norms: Vec<StepNorms>,
    pub inversion: InversionLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub reconstruction: Latent,
    pub edited: Latent,
    pub noise: Latent,
    pub diagnostics: EditDiagnostics,
}

/// Attention of one edited-branch evaluation, as seen by an observer.
pub struct EvaluationAttention<'a> {
    pub key: EvalKey,
    pub t: f64,
    /// Maps recorded by the reconstruction branch at the same key.
    pub source: &'a AttentionMaps,
    /// Maps the edited branch computed itself, before editing.
    pub own: &'a AttentionMaps,
    /// Maps the edited branch actually used.
    pub consumed: &'a AttentionMaps,
}

pub trait EditObserver {
    fn observe(&mut self, attention: &EvaluationAttention<'_>);
}

impl<F: FnMut(&EvaluationAttention<'_>)> EditObserver for F {
    fn observe(&mut self, attention: &EvaluationAttention<'_>) {
        self(attention)
    }
}

struct NoObserver;

impl EditObserver for NoObserver {
    fn observe(&mut self, _: &EvaluationAttention<'_>) {}
}

/// Replaces edited-branch maps with recorded source maps per the schedule, and
/// keeps a copy of the maps it was given.
struct InjectionHook<'a> {
    source: &'a AttentionMaps,
    alignment: &'a AlignmentMap,
    schedule: &'a ControlSchedule,
    own: AttentionMaps,
}

impl AttentionHook for InjectionHook<'_> {
    fn on_attention(&mut self, site: &AttentionSite, map: Array2<f64>) -> Result<Array2<f64>> {
        let layer = self.source.layers.get(site.layer).ok_or_else(|| {
            Error::ShapeMismatch(format!("no recorded source attention for layer {}", site.layer))
        })?;
        let maps = match site.kind {
            AttentionKind::SelfAttention => &layer.self_maps,
            AttentionKind::CrossAttention => &layer.cross_maps,
        };
        let source = maps.get(site.head).ok_or_else(|| {
            Error::ShapeMismatch(format!(
                "no recorded source {} attention for layer {} head {}",
                site.kind.name(),
                site.layer,
                site.head
            ))
        })?;
        let edited = match site.kind {
            AttentionKind::SelfAttention => edit_self_map(&map, source, site.t, self.schedule)?,
            AttentionKind::CrossAttention => {
                edit_cross_map(&map, source, self.alignment, site.t, self.schedule)?
            }
        };
        while self.own.layers.len() <= site.layer {
            self.own.layers.push(Default::default());
        }
        let own = &mut self.own.layers[site.layer];
        match site.kind {
            AttentionKind::SelfAttention => own.self_maps.push(map),
            AttentionKind::CrossAttention => own.cross_maps.push(map),
        }
        Ok(edited)
    }
}

enum Model<'a> {
    Analytic(&'a AnalyticField),
    Toy(ToyDenoiser),
}

impl Model<'_> {
    fn invert(
        &self,
        z0: &Latent,
        n_steps: usize,
        prompt: &Prompt,
        mode: &InversionMode,
    ) -> Result<(Latent, InversionLog)> {
        let grid = make_time_grid(n_steps)?;
        match self {
            Model::Analytic(field) => invert_trajectory(z0, &grid, *field, &(), mode),
            Model::Toy(toy) => invert_trajectory(z0, &grid, toy, prompt, mode),
        }
    }

    fn source_eval(&self, z: &Latent, t: f64, prompt: &Prompt) -> Result<(Latent, AttentionMaps)> {
        match self {
            Model::Analytic(field) => Ok((evaluate(*field, z, t, &())?, AttentionMaps::default())),
            Model::Toy(toy) => toy.forward(z, t, prompt, None),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn edited_eval(
        &self,
        z: &Latent,
        t: f64,
        prompt: &Prompt,
        key: EvalKey,
        source: &AttentionMaps,
        alignment: &AlignmentMap,
        schedule: &ControlSchedule,
        observer: &mut dyn EditObserver,
    ) -> Result<Latent> {
        match self {
            Model::Analytic(field) => evaluate(*field, z, t, &()),
            Model::Toy(toy) => {
                let mut hook = InjectionHook {
                    source,
                    alignment,
                    schedule,
                    own: AttentionMaps::default(),
                };
                let (v, consumed) = toy.forward(z, t, prompt, Some(&mut hook))?;
                observer.observe(&EvaluationAttention {
                    key,
                    t,
                    source,
                    own: &hook.own,
                    consumed: &consumed,
                });
                Ok(v)
            }
        }
    }
}

pub fn run_edit(z0: &Latent, source: &Prompt, target: &Prompt, cfg: &EditConfig) -> Result<EditOutcome> {
    run_edit_observed(z0, source, target, cfg, &mut NoObserver)
}

/// [`run_edit`], reporting the attention of every edited-branch evaluation to `observer`.
pub fn run_edit_observed(
    z0: &Latent,
    source: &Prompt,
    target: &Prompt,
    cfg: &EditConfig,
    observer: &mut dyn EditObserver,
) -> Result<EditOutcome> {
    cfg.validate()?;
    if z0.shape().rank() != cfg.modality.rank() {
        return Err(Error::ShapeMismatch(format!(
            "{} edits need rank-{} latents, got {}",
            cfg.modality.name(),
            cfg.modality.rank(),
            z0.shape()
        )));
    }
    if source.is_empty() || target.is_empty() {
        return Err(Error::PromptMismatch("prompts must have at least one token".into()));
    }
    let alignment = compute_alignment(source, target);
    let model = match &cfg.backend {
        Backend::Analytic { field } => Model::Analytic(field),
        Backend::Toy { model } => {
            if source.embeddings().ncols() != model.text_width
                || target.embeddings().ncols() != model.text_width
            {
                return Err(Error::PromptMismatch(format!(
                    "prompt embeddings must be {} wide for this model",
                    model.text_width
                )));
            }
            Model::Toy(ToyDenoiser::new(*model)?)
        }
    };
    let schedule = &cfg.schedule;

    let (noise, inversion) = model.invert(z0, cfg.n_steps, source, &cfg.inversion)?;

    let grid = make_time_grid(cfg.n_steps)?;
    let mut diagnostics = EditDiagnostics {
        inversion,
        ..Default::default()
    };
    let mut store: HashMap<EvalKey, AttentionMaps> = HashMap::new();
    let mut r = noise.clone();
    let mut e = noise.clone();
    for step in (1..=cfg.n_steps).rev() {
        let (t_i, t_prev) = (grid.t(step), grid.t(step - 1));
        let t_mid = 0.5 * (t_i + t_prev);

        let mut eval_pair = |point: EvalPoint, t: f64, r_at: &Latent, e_at: &Latent| {
            let key = EvalKey { step, point };
            let (v_r, maps) = model.source_eval(r_at, t, source)?;
            let maps = store.entry(key).or_insert(maps);
            let v_e = model.edited_eval(e_at, t, target, key, maps, &alignment, schedule, observer)?;
            diagnostics.evaluations.push(EvaluationDiagnostics {
                step,
                point,
                t,
                self_injected: schedule.self_active(t),
                cross_injected: schedule.cross_active(t),
            });
            Ok::<_, Error>((v_r, v_e))
        };

        let (v_r, v_e) = eval_pair(EvalPoint::Start, t_i, &r, &e)?;
        let r_mid = r.add_scaled(t_mid - t_i, &v_r)?;
        let e_mid = e.add_scaled(t_mid - t_i, &v_e)?;
        let (v_r, v_e) = eval_pair(EvalPoint::Mid, t_mid, &r_mid, &e_mid)?;
        r = r.add_scaled(t_prev - t_i, &v_r)?;
        e = e.add_scaled(t_prev - t_i, &v_e)?;
        // Maps of a finished step are never read again.
        store.retain(|k, _| k.step != step);

        diagnostics.norms.push(StepNorms {
            step,
            t: t_prev,
            reconstruction: r.norm(),
            edited: e.norm(),
        });
    }

    Ok(EditOutcome {
        reconstruction: r,
        edited: e,
        noise,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconstructionReport {
    pub abs_l2: f64,
    pub rel_l2: f64,
    pub max_abs: f64,
    /// Reconstruction-branch norm after each regeneration step.
    pub norm_trace: Vec<f64>,
}

pub fn reconstruction_report(z0: &Latent, outcome: &EditOutcome) -> Result<ReconstructionReport> {
    let diff = outcome.reconstruction.sub(z0)?;
    let abs_l2 = diff.norm();
    let norm = z0.norm();
    let rel_l2 = if norm > 0.0 {
        abs_l2 / norm
    } else if abs_l2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ReconstructionReport {
        abs_l2,
        rel_l2,
        max_abs: diff.max_abs(),
        norm_trace: outcome.diagnostics.norms.iter().map(|n| n.reconstruction).collect(),
    })
}

/// Paired comparison of per-seed errors from a baseline and a candidate run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedSummary {
    pub pairs: usize,
    pub baseline_mean: f64,
    pub candidate_mean: f64,
    /// `1 − candidate_mean / baseline_mean`.
    pub mean_reduction: f64,
    /// Pairs where the candidate error is strictly lower.
    pub candidate_wins: usize,
}

pub fn paired_summary(baseline: &[f64], candidate: &[f64]) -> Result<PairedSummary> {
    if baseline.len() != candidate.len() || baseline.is_empty() {
        return Err(Error::Precondition(format!(
            "paired summary needs equal, non-empty samples, got {} and {}",
            baseline.len(),
            candidate.len()
        )));
    }
    let n = baseline.len() as f64;
    let baseline_mean = baseline.iter().sum::<f64>() / n;
    let candidate_mean = candidate.iter().sum::<f64>() / n;
    let mean_reduction = if baseline_mean > 0.0 {
        1.0 - candidate_mean / baseline_mean
    } else {
        0.0
    };
    Ok(PairedSummary {
        pairs: baseline.len(),
        baseline_mean,
        candidate_mean,
        mean_reduction,
        candidate_wins: baseline.iter().zip(candidate).filter(|(b, c)| c < b).count(),
    })
}

/// Cosine similarity.
pub fn alignment_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "embeddings of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na2: f64 = a.iter().map(|x| x * x).sum();
    let nb2: f64 = b.iter().map(|x| x * x).sum();
    if na2 == 0.0 || nb2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na2 * nb2).sqrt()).clamp(-1.0, 1.0))
}
