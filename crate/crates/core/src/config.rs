//! JSON edit configuration and analytic field specs.
//!
//! Keys mirror [`EditConfig`]. Only `task` and `modality` are required; any
//! other missing key takes its value from [`default_config`] and is reported in
//! [`ResolvedConfig::defaulted`]. Unknown keys are rejected.
//!
//! ```json
//! {
//!   "task": "replacement",
//!   "modality": "audio",
//!   "schedule": { "tau_s": 0.75, "tau_c": 0.75, "direction": "literal" },
//!   "n_steps": 100,
//!   "inversion": { "iterations": 3, "combine": "average" },
//!   "seed": 7,
//!   "backend": { "kind": "toy", "model": { "layers": 2, "heads": 4 } }
//! }
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use crate::attention::TauDirection;
use crate::error::{Error, Result};
use crate::oracles::{AnalyticField, MixtureComponent};
use crate::pipeline::{default_config, Backend, EditConfig, Modality, TaskKind};
use crate::scheduler::Combine;

/// Deserializes JSON, naming the offending key on failure.
pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let value = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." || path == "?" { "<root>".to_string() } else { path };
        Error::config(key, e.into_inner().to_string())
    })?;
    Ok(value)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    tau_s: Option<f64>,
    tau_c: Option<f64>,
    direction: Option<TauDirection>,
    renormalize_cross: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInversion {
    iterations: Option<usize>,
    combine: Option<Combine>,
    divergence_factor: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    task: TaskKind,
    modality: Modality,
    #[serde(default)]
    schedule: RawSchedule,
    n_steps: Option<usize>,
    #[serde(default)]
    inversion: RawInversion,
    seed: Option<u64>,
    backend: Option<Backend>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    pub config: EditConfig,
    /// Dotted keys that were absent and filled from the defaults.
    pub defaulted: Vec<String>,
}

fn take<T>(value: Option<T>, default: T, key: &str, defaulted: &mut Vec<String>) -> T {
    value.unwrap_or_else(|| {
        defaulted.push(key.to_string());
        default
    })
}

pub fn parse_edit_config(text: &str) -> Result<ResolvedConfig> {
    let raw: RawConfig = from_json_str(text)?;
    let d = default_config(raw.task, raw.modality);
    let mut defaulted = Vec::new();
    let mut cfg = d.clone();
    cfg.schedule.tau_s = take(raw.schedule.tau_s, d.schedule.tau_s, "schedule.tau_s", &mut defaulted);
    cfg.schedule.tau_c = take(raw.schedule.tau_c, d.schedule.tau_c, "schedule.tau_c", &mut defaulted);
    cfg.schedule.direction = take(
        raw.schedule.direction,
        d.schedule.direction,
        "schedule.direction",
        &mut defaulted,
    );
    cfg.schedule.renormalize_cross = take(
        raw.schedule.renormalize_cross,
        d.schedule.renormalize_cross,
        "schedule.renormalize_cross",
        &mut defaulted,
    );
    cfg.n_steps = take(raw.n_steps, d.n_steps, "n_steps", &mut defaulted);
    cfg.inversion.iterations = take(
        raw.inversion.iterations,
        d.inversion.iterations,
        "inversion.iterations",
        &mut defaulted,
    );
    cfg.inversion.combine = take(
        raw.inversion.combine,
        d.inversion.combine,
        "inversion.combine",
        &mut defaulted,
    );
    cfg.inversion.divergence_factor = take(
        raw.inversion.divergence_factor,
        d.inversion.divergence_factor,
        "inversion.divergence_factor",
        &mut defaulted,
    );
    cfg.seed = take(raw.seed, d.seed, "seed", &mut defaulted);
    cfg.backend = take(raw.backend, d.backend, "backend", &mut defaulted);
    check_config(&cfg)?;
    Ok(ResolvedConfig {
        config: cfg,
        defaulted,
    })
}

/// Validates a config, reporting failures against the JSON key responsible.
pub fn check_config(cfg: &EditConfig) -> Result<()> {
    for (key, tau) in [("schedule.tau_s", cfg.schedule.tau_s), ("schedule.tau_c", cfg.schedule.tau_c)] {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config(key, format!("{tau} is outside [0, 1]")));
        }
    }
    if cfg.n_steps == 0 {
        return Err(Error::config("n_steps", "must be at least 1"));
    }
    if cfg.n_steps > 100_000 {
        return Err(Error::config("n_steps", "must be at most 100000"));
    }
    if cfg.inversion.iterations == 0 {
        return Err(Error::config("inversion.iterations", "must be at least 1"));
    }
    if cfg.inversion.iterations > 1000 {
        return Err(Error::config("inversion.iterations", "must be at most 1000"));
    }
    if !(cfg.inversion.divergence_factor > 0.0) {
        return Err(Error::config("inversion.divergence_factor", "must be positive"));
    }
    match &cfg.backend {
        Backend::Analytic { field } => field
            .validate()
            .map_err(|e| Error::config("backend.field", e.to_string())),
        Backend::Toy { model } => model
            .validate()
            .map_err(|e| Error::config("backend.model", e.to_string())),
    }
}

pub fn read_edit_config(path: impl AsRef<Path>) -> Result<ResolvedConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_edit_config(&text)
}

pub const FIELD_PRESETS: [&str; 5] = ["zero", "gaussian", "point-mass", "mixture", "wide-mixture"];

/// Named fields used by the command-line experiments.
///
/// `mixture` has narrow, well-separated components; `wide-mixture` has
/// overlapping ones.
pub fn field_preset(name: &str) -> Option<AnalyticField> {
    let two = |m: f64, s: f64| AnalyticField::Mixture {
        components: vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![m],
                spread: s,
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![-m],
                spread: s,
            },
        ],
    };
    Some(match name {
        "zero" => AnalyticField::Constant { value: 0.0 },
        "gaussian" => AnalyticField::Gaussian {
            mean: vec![0.0],
            spread: 1.0,
        },
        "point-mass" => AnalyticField::PointMass { mean: vec![0.0] },
        "mixture" => two(1.0, 0.02),
        "wide-mixture" => two(1.0, 0.5),
        _ => return None,
    })
}

/// Parses and validates a field from JSON text.
pub fn parse_field_json(text: &str) -> Result<AnalyticField> {
    let field: AnalyticField = from_json_str(text)?;
    field
        .validate()
        .map_err(|e| Error::config("<root>", e.to_string()))?;
    Ok(field)
}

/// A preset name, inline JSON, or a path to a JSON file.
pub fn parse_field_spec(spec: &str) -> Result<AnalyticField> {
    if let Some(field) = field_preset(spec) {
        return Ok(field);
    }
    if spec.trim_start().starts_with('{') {
        return parse_field_json(spec);
    }
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return parse_field_json(&text);
    }
    Err(Error::config(
        "field",
        format!(
            "`{spec}` is not a preset ({}), inline JSON, or a readable file",
            FIELD_PRESETS.join(", ")
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let r = parse_edit_config(r#"{"task":"removal","modality":"video"}"#).unwrap();
        assert_eq!(r.config, default_config(TaskKind::Removal, Modality::Video));
        assert!(r.defaulted.contains(&"schedule.tau_s".to_string()));
        assert!(r.defaulted.contains(&"backend".to_string()));
    }

    #[test]
    fn missing_tau_s_is_recorded() {
        let r = parse_edit_config(
            r#"{"task":"replacement","modality":"audio","schedule":{"tau_c":0.5}}"#,
        )
        .unwrap();
        assert_eq!(r.config.schedule.tau_s, 0.75);
        assert_eq!(r.config.schedule.tau_c, 0.5);
        assert!(r.defaulted.contains(&"schedule.tau_s".to_string()));
        assert!(!r.defaulted.contains(&"schedule.tau_c".to_string()));
    }

    #[test]
    fn full_config_round_trips() {
        let cfg = default_config(TaskKind::Addition, Modality::Audio);
        let text = serde_json::to_string(&cfg).unwrap();
        let r = parse_edit_config(&text).unwrap();
        assert_eq!(r.config, cfg);
        assert!(r.defaulted.is_empty());
    }

    fn key_of(text: &str) -> String {
        match parse_edit_config(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(
            key_of(r#"{"task":"replacement","modality":"audio","schedule":{"tau_z":1}}"#),
            "schedule.tau_z"
        );
        assert_eq!(
            key_of(r#"{"task":"replacement","modality":"audio","schedule":{"tau_s":"x"}}"#),
            "schedule.tau_s"
        );
        assert_eq!(key_of(r#"{"task":"swap","modality":"audio"}"#), "task");
        assert_eq!(
            key_of(r#"{"task":"replacement","modality":"audio","schedule":{"tau_s":1.5}}"#),
            "schedule.tau_s"
        );
        assert_eq!(
            key_of(r#"{"task":"replacement","modality":"audio","inversion":{"iterations":0}}"#),
            "inversion.iterations"
        );
        assert_eq!(key_of(r#"{"task":"replacement","modality":"audio","extra":1}"#), "extra");
        assert_eq!(
            key_of(r#"{"task":"replacement","modality":"audio","backend":{"kind":"toy","model":{"heads":3}}}"#),
            "backend.model"
        );
        assert_eq!(key_of("{"), "<root>");
    }

    #[test]
    fn field_specs() {
        for name in FIELD_PRESETS {
            field_preset(name).unwrap().validate().unwrap();
            assert_eq!(parse_field_spec(name).unwrap(), field_preset(name).unwrap());
        }
        let f = parse_field_spec(r#"{"kind":"gaussian","mean":[0.5],"spread":0.5}"#).unwrap();
        assert_eq!(
            f,
            AnalyticField::Gaussian {
                mean: vec![0.5],
                spread: 0.5
            }
        );
        assert!(parse_field_spec("no-such-field").is_err());
        assert!(parse_field_spec(r#"{"kind":"gaussian","mean":[0.5],"spread":-1}"#).is_err());
    }
}
