//! Closed-form marginal velocity fields for linear-path flow matching.
//!
//! Data `z0` and noise `z1 ~ N(0, I)` are joined by `z_t = (1 − t) z0 + t z1`.
//! For a known data law the marginal velocity `E[z1 − z0 | z_t = z]` has a
//! closed form; these fields stand in for a trained denoiser and give the
//! ground truth for solver and inversion tests.
//!
//! Gaussian component `z0 ~ N(m, s² I)`, with `a = 1 − t`, `b = t`,
//! `D = a² s² + b²`:
//!
//! ```text
//! E[z0 | z] = m + (a s² / D) (z − a m)
//! E[z1 | z] = (b / D) (z − a m)
//! ```
//!
//! Means are given per element, or as a single value broadcast to every element.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{gaussian_noise, Latent, NoiseSeed, Shape};
use crate::scheduler::Denoiser;

pub const MIN_MC_SAMPLES: usize = 10_000;
pub const MIN_EFFECTIVE_SAMPLES: f64 = 100.0;
pub const MIN_REFERENCE_SUBSTEPS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnalyticField {
    /// `ε̂ ≡ value`, independent of `z` and `t`. Has no data law; its samples are pure noise.
    Constant { value: f64 },
    PointMass { mean: Vec<f64> },
    Gaussian { mean: Vec<f64>, spread: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

fn check_mean(mean: &[f64]) -> Result<()> {
    if mean.is_empty() {
        return Err(Error::InvalidField("mean must have at least one value".into()));
    }
    if mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::InvalidField("mean values must be finite".into()));
    }
    Ok(())
}

fn check_spread(s: f64) -> Result<()> {
    if !(s.is_finite() && s >= 0.0) {
        return Err(Error::InvalidField(format!("spread {s} must be finite and >= 0")));
    }
    Ok(())
}

fn mean_for(mean: &[f64], n: usize) -> Result<impl Fn(usize) -> f64 + '_> {
    if mean.len() != 1 && mean.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "field mean has {} values, latent has {n} elements",
            mean.len()
        )));
    }
    let broadcast = mean.len() == 1;
    Ok(move |i: usize| if broadcast { mean[0] } else { mean[i] })
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTime(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

impl AnalyticField {
    pub fn validate(&self) -> Result<()> {
        match self {
            AnalyticField::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::InvalidField("constant velocity must be finite".into()));
                }
            }
            AnalyticField::PointMass { mean } => check_mean(mean)?,
            AnalyticField::Gaussian { mean, spread } => {
                check_mean(mean)?;
                check_spread(*spread)?;
            }
            AnalyticField::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidField("mixture has no components".into()));
                }
                for c in components {
                    check_mean(&c.mean)?;
                    check_spread(c.spread)?;
                    if !(c.weight.is_finite() && c.weight > 0.0) {
                        return Err(Error::InvalidField(format!(
                            "weight {} must be positive",
                            c.weight
                        )));
                    }
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidField(format!(
                        "weights sum to {total}, not 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn velocity_at(&self, z: &Latent, t: f64) -> Result<Latent> {
        self.validate()?;
        match self {
            AnalyticField::Constant { value } => {
                check_time(t)?;
                Latent::new(z.shape().clone(), vec![*value; z.len()])
            }
            AnalyticField::PointMass { mean } => point_mass_velocity(z, t, mean),
            AnalyticField::Gaussian { mean, spread } => gaussian_velocity(z, t, mean, *spread),
            AnalyticField::Mixture { components } => mixture_velocity(z, t, components),
        }
    }

    /// Draws one `z0` from the field's data law.
    pub fn sample_data(&self, shape: &Shape, seed: NoiseSeed) -> Result<Latent> {
        self.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed.0);
        let n = shape.len();
        let (mean, spread) = match self {
            AnalyticField::Constant { .. } => return Ok(gaussian_noise(shape, seed)),
            AnalyticField::PointMass { mean } => (mean, 0.0),
            AnalyticField::Gaussian { mean, spread } => (mean, *spread),
            AnalyticField::Mixture { components } => {
                let c = &components[pick_component(components, rng.random::<f64>())];
                (&c.mean, c.spread)
            }
        };
        let m = mean_for(mean, n)?;
        let values = (0..n)
            .map(|i| m(i) + spread * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Latent::new(shape.clone(), values)
    }
}

impl<C: ?Sized> Denoiser<C> for AnalyticField {
    fn velocity(&self, z: &Latent, t: f64, _cond: &C) -> Result<Latent> {
        self.velocity_at(z, t)
    }
}

fn pick_component(components: &[MixtureComponent], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, c) in components.iter().enumerate() {
        acc += c.weight;
        if u < acc {
            return k;
        }
    }
    components.len() - 1
}

/// `(z − μ) / t`.
pub fn point_mass_velocity(z: &Latent, t: f64, mean: &[f64]) -> Result<Latent> {
    check_mean(mean)?;
    check_time(t)?;
    if t == 0.0 {
        return Err(Error::SingularTime { t });
    }
    let m = mean_for(mean, z.len())?;
    let values = z
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - m(i)) / t)
        .collect();
    Latent::new(z.shape().clone(), values)
}

pub fn gaussian_velocity(z: &Latent, t: f64, mean: &[f64], spread: f64) -> Result<Latent> {
    check_mean(mean)?;
    check_spread(spread)?;
    check_time(t)?;
    let (a, b) = (1.0 - t, t);
    let s2 = spread * spread;
    let d = a * a * s2 + b * b;
    if d == 0.0 {
        return Err(Error::SingularTime { t });
    }
    let m = mean_for(mean, z.len())?;
    let values = z
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let centered = v - a * m(i);
            let e1 = b / d * centered;
            let e0 = m(i) + a * s2 / d * centered;
            e1 - e0
        })
        .collect();
    Latent::new(z.shape().clone(), values)
}

/// Responsibility-weighted sum of per-component Gaussian velocities.
pub fn mixture_velocity(z: &Latent, t: f64, components: &[MixtureComponent]) -> Result<Latent> {
    check_time(t)?;
    if components.is_empty() {
        return Err(Error::InvalidField("mixture has no components".into()));
    }
    let (a, b) = (1.0 - t, t);
    let n = z.len();
    let dim = n as f64;
    let mut log_r = Vec::with_capacity(components.len());
    let mut velocities = Vec::with_capacity(components.len());
    for c in components {
        let var = a * a * c.spread * c.spread + b * b;
        if var == 0.0 {
            return Err(Error::SingularTime { t });
        }
        let m = mean_for(&c.mean, n)?;
        let sq: f64 = z
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - a * m(i)).powi(2))
            .sum();
        log_r.push(
            c.weight.ln() - 0.5 * dim * (2.0 * std::f64::consts::PI * var).ln() - sq / (2.0 * var),
        );
        velocities.push(gaussian_velocity(z, t, &c.mean, c.spread)?);
    }
    let max = log_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateField { t });
    }
    let weights: Vec<f64> = log_r.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateField { t });
    }
    let mut out = vec![0.0; n];
    for (w, v) in weights.iter().zip(&velocities) {
        let r = w / total;
        for (o, x) in out.iter_mut().zip(v.values()) {
            *o += r * x;
        }
    }
    Latent::new(z.shape().clone(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub estimate: Latent,
    /// Largest per-element standard error of the estimate.
    pub standard_error: f64,
    pub effective_samples: f64,
}

/// Kernel-weighted local-linear estimate of `E[z1 − z0 | z_t = z]` from simulated pairs.
///
/// Draws `(z0, z1)` from the field's generative law, forms `z_t`, and fits
/// `z1 − z0 ≈ β0 + β1 · (z_t − z)` by least squares with Gaussian kernel
/// weights of width `bandwidth`; `β0` is the estimate. Makes no use of the
/// closed forms. The local-linear fit is unbiased for conditional means that
/// are affine in `z_t`; otherwise the smoothing bias is `O(bandwidth²)`.
///
/// The standard error is the heteroskedasticity-robust (sandwich) error of the
/// intercept, combined in quadrature with a bound on accumulated rounding
/// (`n_samples · ε · max |z1 − z0|`).
pub fn monte_carlo_velocity(
    z: &Latent,
    t: f64,
    field: &AnalyticField,
    n_samples: usize,
    bandwidth: f64,
    seed: NoiseSeed,
) -> Result<MonteCarloEstimate> {
    if n_samples < MIN_MC_SAMPLES {
        return Err(Error::Precondition(format!(
            "monte carlo needs at least {MIN_MC_SAMPLES} samples, got {n_samples}"
        )));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Precondition(format!("bandwidth {bandwidth} must be positive")));
    }
    check_time(t)?;
    field.validate()?;
    let n = z.len();
    if n_samples.saturating_mul(n) > 20_000_000 {
        return Err(Error::Precondition("sample budget times latent size is too large".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed.0);
    let (a, b) = (1.0 - t, t);
    // Offsets (z_t − z) / bandwidth and targets z1 − z0, row per sample.
    let mut offsets = Vec::with_capacity(n_samples * n);
    let mut targets = Vec::with_capacity(n_samples * n);
    let mut log_w = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (mean, spread): (&[f64], f64) = match field {
            AnalyticField::Constant { value } => {
                // No data law: every pair has the constant as its target.
                for &q in z.values() {
                    let zt: f64 = rng.sample(StandardNormal);
                    offsets.push((zt - q) / bandwidth);
                    targets.push(*value);
                }
                let sq: f64 = offsets[offsets.len() - n..].iter().map(|o| o * o).sum();
                log_w.push(-0.5 * sq);
                continue;
            }
            AnalyticField::PointMass { mean } => (mean, 0.0),
            AnalyticField::Gaussian { mean, spread } => (mean, *spread),
            AnalyticField::Mixture { components } => {
                let c = &components[pick_component(components, rng.random::<f64>())];
                (&c.mean, c.spread)
            }
        };
        let m = mean_for(mean, n)?;
        let mut sq = 0.0;
        for (i, &q) in z.values().iter().enumerate() {
            let z0 = m(i) + spread * rng.sample::<f64, _>(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let u = (a * z0 + b * z1 - q) / bandwidth;
            sq += u * u;
            offsets.push(u);
            targets.push(z1 - z0);
        }
        log_w.push(-0.5 * sq);
    }

    let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    let total_sq: f64 = w.iter().map(|x| x * x).sum();
    let ess = if total_sq > 0.0 { total * total / total_sq } else { 0.0 };
    if ess < MIN_EFFECTIVE_SAMPLES {
        return Err(Error::InsufficientEffectiveSamples {
            ess,
            min: MIN_EFFECTIVE_SAMPLES,
        });
    }

    // Weighted normal equations on the design [1, offsets].
    let p = n + 1;
    let design = |s: usize, j: usize| if j == 0 { 1.0 } else { offsets[s * n + j - 1] };
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, n);
    for (s, &ws) in w.iter().enumerate() {
        if ws == 0.0 {
            continue;
        }
        for j in 0..p {
            let xj = ws * design(s, j);
            for k in j..p {
                gram[(j, k)] += xj * design(s, k);
            }
            for i in 0..n {
                rhs[(j, i)] += xj * targets[s * n + i];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            gram[(j, k)] = gram[(k, j)];
        }
    }
    let lu = gram.lu();
    let coef = lu
        .solve(&rhs)
        .ok_or(Error::InsufficientEffectiveSamples { ess, min: MIN_EFFECTIVE_SAMPLES })?;
    let mut e1 = DMatrix::<f64>::zeros(p, 1);
    e1[(0, 0)] = 1.0;
    let g = lu
        .solve(&e1)
        .ok_or(Error::InsufficientEffectiveSamples { ess, min: MIN_EFFECTIVE_SAMPLES })?;

    let mut var = vec![0.0; n];
    let mut max_target = 0.0f64;
    for (s, &ws) in w.iter().enumerate() {
        if ws == 0.0 {
            continue;
        }
        let ell = ws * (0..p).map(|j| g[(j, 0)] * design(s, j)).sum::<f64>();
        for (i, v) in var.iter_mut().enumerate() {
            let y = targets[s * n + i];
            max_target = max_target.max(y.abs());
            let fitted: f64 = (0..p).map(|j| coef[(j, i)] * design(s, j)).sum();
            let r = y - fitted;
            *v += ell * ell * r * r;
        }
    }
    let rounding = n_samples as f64 * f64::EPSILON * max_target;
    let standard_error = var
        .iter()
        .fold(0.0f64, |m, v| m.max((v + rounding * rounding).sqrt()));
    let estimate = (0..n).map(|i| coef[(0, i)]).collect();
    Ok(MonteCarloEstimate {
        estimate: Latent::new(z.shape().clone(), estimate)?,
        standard_error,
        effective_samples: ess,
    })
}

/// Classical fourth-order Runge-Kutta over `n_substeps` uniform substeps from
/// `t_start` to `t_end` (either direction).
pub fn reference_integrate(
    z_start: &Latent,
    t_start: f64,
    t_end: f64,
    field: &AnalyticField,
    n_substeps: usize,
) -> Result<Latent> {
    if n_substeps < MIN_REFERENCE_SUBSTEPS {
        return Err(Error::Precondition(format!(
            "reference integration needs at least {MIN_REFERENCE_SUBSTEPS} substeps"
        )));
    }
    check_time(t_start)?;
    check_time(t_end)?;
    let span = t_end - t_start;
    let at = |k: usize| {
        if k == n_substeps {
            t_end
        } else {
            t_start + span * (k as f64 / n_substeps as f64)
        }
    };
    let mut z = z_start.clone();
    for k in 0..n_substeps {
        let (t, t_next) = (at(k), at(k + 1));
        let h = t_next - t;
        let t_half = 0.5 * (t + t_next);
        let k1 = field.velocity_at(&z, t)?;
        let k2 = field.velocity_at(&z.add_scaled(0.5 * h, &k1)?, t_half)?;
        let k3 = field.velocity_at(&z.add_scaled(0.5 * h, &k2)?, t_half)?;
        let k4 = field.velocity_at(&z.add_scaled(h, &k3)?, t_next)?;
        let values = z
            .values()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                v + h / 6.0
                    * (k1.values()[i] + 2.0 * k2.values()[i] + 2.0 * k3.values()[i] + k4.values()[i])
            })
            .collect();
        z = Latent::new(z.shape().clone(), values)?;
    }
    Ok(z)
}
