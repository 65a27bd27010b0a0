//! Attention-map containers and the injection rules used during regeneration.
//!
//! The edited branch borrows attention from the reconstruction branch during
//! the early (large `t`) part of denoising:
//!
//! ```text
//! self:  M̄ˢ = own map            if t < τ_s,   source map otherwise
//! cross: M̄ᶜ = own map            if t < τ_c,   otherwise column j ← source column A(j)
//! ```
//!
//! `TauDirection::Strength` flips the comparison to `t ≥ 1 − τ`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::prompt::AlignmentMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerAttention {
    /// Per head, latent positions × latent positions.
    pub self_maps: Vec<Array2<f64>>,
    /// Per head, latent positions × prompt tokens.
    pub cross_maps: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionMaps {
    pub layers: Vec<LayerAttention>,
}

impl AttentionMaps {
    pub fn iter_maps(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.layers
            .iter()
            .flat_map(|l| l.self_maps.iter().chain(l.cross_maps.iter()))
    }

    /// Largest deviation of any row sum from 1, and whether any entry is negative.
    pub fn stochasticity_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut negative = false;
        for m in self.iter_maps() {
            negative |= m.iter().any(|&v| v < 0.0);
            for row in m.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
        }
        (worst, negative)
    }

    fn same_layout(&self, other: &AttentionMaps) -> Result<()> {
        let heads = |m: &AttentionMaps| {
            m.layers
                .iter()
                .map(|l| (l.self_maps.len(), l.cross_maps.len()))
                .collect::<Vec<_>>()
        };
        if heads(self) != heads(other) {
            return Err(Error::ShapeMismatch(
                "attention records have different layer/head layouts".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TauDirection {
    /// Inject while `t ≥ τ`.
    #[default]
    Literal,
    /// Inject while `t ≥ 1 − τ`.
    Strength,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSchedule {
    pub tau_s: f64,
    pub tau_c: f64,
    #[serde(default)]
    pub direction: TauDirection,
    /// Re-normalize rows of the cross map after column injection.
    #[serde(default = "yes")]
    pub renormalize_cross: bool,
}

fn yes() -> bool {
    true
}

impl ControlSchedule {
    pub fn new(tau_s: f64, tau_c: f64, direction: TauDirection) -> Result<Self> {
        let s = ControlSchedule {
            tau_s,
            tau_c,
            direction,
            renormalize_cross: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_s", self.tau_s), ("tau_c", self.tau_c)] {
            if !(0.0..=1.0).contains(&tau) {
                return Err(Error::Precondition(format!("{name} = {tau} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn active(&self, t: f64, tau: f64) -> bool {
        match self.direction {
            TauDirection::Literal => t >= tau,
            TauDirection::Strength => t >= 1.0 - tau,
        }
    }

    pub fn self_active(&self, t: f64) -> bool {
        self.active(t, self.tau_s)
    }

    pub fn cross_active(&self, t: f64) -> bool {
        self.active(t, self.tau_c)
    }
}

fn check_same_dim(kind: &str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{kind} maps {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Replaces column `j` of `target` with column `A(j)` of `source` for every mapped `j`.
pub fn inject_cross_columns(
    target: &Array2<f64>,
    source: &Array2<f64>,
    alignment: &AlignmentMap,
) -> Result<Array2<f64>> {
    if target.nrows() != source.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "cross maps have {} and {} rows",
            target.nrows(),
            source.nrows()
        )));
    }
    if target.ncols() != alignment.target_len() {
        return Err(Error::ShapeMismatch(format!(
            "cross map has {} token columns, alignment covers {}",
            target.ncols(),
            alignment.target_len()
        )));
    }
    let mut out = target.clone();
    for (j, m) in alignment.mapping().iter().enumerate() {
        if let Some(src) = *m {
            if src >= source.ncols() {
                return Err(Error::AlignmentOutOfRange {
                    target: j,
                    source_index: src,
                    source_len: source.ncols(),
                });
            }
            out.column_mut(j).assign(&source.column(src));
        }
    }
    Ok(out)
}

/// Cross-attention edit for one head.
///
/// Rows are re-normalized after injection unless the alignment is a bijection,
/// in which case each row is a permutation of a source row and already sums to 1.
pub fn edit_cross_map(
    target: &Array2<f64>,
    source: &Array2<f64>,
    alignment: &AlignmentMap,
    t: f64,
    sched: &ControlSchedule,
) -> Result<Array2<f64>> {
    if !sched.cross_active(t) {
        if target.ncols() != alignment.target_len() {
            return Err(Error::ShapeMismatch(format!(
                "cross map has {} token columns, alignment covers {}",
                target.ncols(),
                alignment.target_len()
            )));
        }
        return Ok(target.clone());
    }
    let mut out = inject_cross_columns(target, source, alignment)?;
    if sched.renormalize_cross && !alignment.is_bijection() {
        for mut row in out.rows_mut() {
            let sum = row.sum();
            if sum > 0.0 {
                row.mapv_inplace(|v| v / sum);
            }
        }
    }
    Ok(out)
}

/// Self-attention edit for one head: the source map wholesale while active.
pub fn edit_self_map(
    target: &Array2<f64>,
    source: &Array2<f64>,
    t: f64,
    sched: &ControlSchedule,
) -> Result<Array2<f64>> {
    check_same_dim("self", target, source)?;
    Ok(if sched.self_active(t) {
        source.clone()
    } else {
        target.clone()
    })
}

/// Applies [`edit_cross_map`] to every layer and head; self maps pass through.
pub fn edit_cross_attention(
    target: &AttentionMaps,
    source: &AttentionMaps,
    alignment: &AlignmentMap,
    t: f64,
    sched: &ControlSchedule,
) -> Result<AttentionMaps> {
    target.same_layout(source)?;
    let layers = target
        .layers
        .iter()
        .zip(&source.layers)
        .map(|(tl, sl)| {
            Ok(LayerAttention {
                self_maps: tl.self_maps.clone(),
                cross_maps: tl
                    .cross_maps
                    .iter()
                    .zip(&sl.cross_maps)
                    .map(|(tm, sm)| edit_cross_map(tm, sm, alignment, t, sched))
                    .collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AttentionMaps { layers })
}

/// Applies [`edit_self_map`] to every layer and head; cross maps pass through.
pub fn edit_self_attention(
    target: &AttentionMaps,
    source: &AttentionMaps,
    t: f64,
    sched: &ControlSchedule,
) -> Result<AttentionMaps> {
    target.same_layout(source)?;
    let layers = target
        .layers
        .iter()
        .zip(&source.layers)
        .map(|(tl, sl)| {
            Ok(LayerAttention {
                self_maps: tl
                    .self_maps
                    .iter()
                    .zip(&sl.self_maps)
                    .map(|(tm, sm)| edit_self_map(tm, sm, t, sched))
                    .collect::<Result<_>>()?,
                cross_maps: tl.cross_maps.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AttentionMaps { layers })
}
