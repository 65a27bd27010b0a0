//! Flow-matching sampling and inversion numerics.
//!
//! Time runs from `t = 1` (noise) to `t = 0` (data). Sampling steps move from a
//! grid time `t_i` to `t_prev < t_i`; inversion steps move the other way.
//! Trajectories never evaluate a velocity at `t = 0` except for the final
//! inversion step on a one-step grid, so fields singular at `t = 0` are usable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

/// A velocity predictor `ε̂(z, t, cond)`.
///
/// Implementations must return a latent of the input's shape and be pure given
/// their parameters; they may be evaluated concurrently through `&self`.
pub trait Denoiser<C: ?Sized> {
    fn velocity(&self, z: &Latent, t: f64, cond: &C) -> Result<Latent>;
}

impl<C: ?Sized, F> Denoiser<C> for F
where
    F: Fn(&Latent, f64) -> Result<Latent>,
{
    fn velocity(&self, z: &Latent, t: f64, _cond: &C) -> Result<Latent> {
        self(z, t)
    }
}

/// Evaluates a denoiser and enforces the output contract.
pub fn evaluate<C: ?Sized, D: Denoiser<C> + ?Sized>(
    d: &D,
    z: &Latent,
    t: f64,
    cond: &C,
) -> Result<Latent> {
    let v = match d.velocity(z, t, cond) {
        Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteVelocity { t }),
        other => other?,
    };
    if v.shape() != z.shape() {
        return Err(Error::ShapeMismatch(format!(
            "denoiser returned shape {} for input {}",
            v.shape(),
            z.shape()
        )));
    }
    if !v.is_finite() {
        return Err(Error::NonFiniteVelocity { t });
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    /// Ascending: `times[i] = t_i`, `times[0] = 0`, `times[n] = 1`.
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid `t_i = i / n_steps`.
    pub fn uniform(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidSteps);
        }
        let n = n_steps as f64;
        Ok(TimeGrid {
            times: (0..=n_steps).map(|i| i as f64 / n).collect(),
        })
    }

    /// Accepts any strictly increasing sequence from exactly 0 to exactly 1.
    pub fn from_ascending(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidSteps);
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(Error::InvalidTime("grid must start at 0 and end at 1".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidTime("grid times must be strictly increasing".into()));
        }
        Ok(TimeGrid { times })
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// `t_i`.
    pub fn t(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn ascending(&self) -> &[f64] {
        &self.times
    }

    /// `[t_N, …, t_0] = [1, …, 0]`.
    pub fn descending(&self) -> Vec<f64> {
        self.times.iter().rev().copied().collect()
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(times: Vec<f64>) -> Result<Self> {
        TimeGrid::from_ascending(times)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.times
    }
}

pub fn make_time_grid(n_steps: usize) -> Result<TimeGrid> {
    TimeGrid::uniform(n_steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Euler,
    Midpoint,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Euler => "euler",
            SolverKind::Midpoint => "midpoint",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    /// Mean of the iterates `z^1..z^K`.
    #[default]
    Average,
    /// The last iterate `z^K`.
    Last,
}

pub const DEFAULT_DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionMode {
    pub iterations: usize,
    #[serde(default)]
    pub combine: Combine,
    /// Iterates with norm above `factor * max(‖z_prev‖, 1)` abort the step.
    #[serde(default = "default_divergence_factor")]
    pub divergence_factor: f64,
}

fn default_divergence_factor() -> f64 {
    DEFAULT_DIVERGENCE_FACTOR
}

impl InversionMode {
    pub fn new(iterations: usize, combine: Combine) -> Self {
        InversionMode {
            iterations,
            combine,
            divergence_factor: DEFAULT_DIVERGENCE_FACTOR,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Precondition("inversion needs at least one iteration".into()));
        }
        if !(self.divergence_factor > 0.0) {
            return Err(Error::Precondition("divergence factor must be positive".into()));
        }
        Ok(())
    }
}

impl Default for InversionMode {
    fn default() -> Self {
        InversionMode::new(3, Combine::Average)
    }
}

fn check_interval(hi: f64, lo: f64) -> Result<()> {
    if !(hi.is_finite() && lo.is_finite() && 0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::InvalidTime(format!(
            "need 0 <= {lo} < {hi} <= 1"
        )));
    }
    Ok(())
}

/// `z + (t_prev − t_i) · ε̂(z, t_i)`.
pub fn euler_step<C: ?Sized, D: Denoiser<C> + ?Sized>(
    z: &Latent,
    t_i: f64,
    t_prev: f64,
    d: &D,
    cond: &C,
) -> Result<Latent> {
    check_interval(t_i, t_prev)?;
    let v = evaluate(d, z, t_i, cond)?;
    z.add_scaled(t_prev - t_i, &v)
}

/// Half an Euler step to `t_mid = (t_i + t_prev) / 2`, then the full step with
/// the velocity evaluated at the midpoint state.
pub fn midpoint_step<C: ?Sized, D: Denoiser<C> + ?Sized>(
    z: &Latent,
    t_i: f64,
    t_prev: f64,
    d: &D,
    cond: &C,
) -> Result<Latent> {
    check_interval(t_i, t_prev)?;
    let t_mid = 0.5 * (t_i + t_prev);
    let v = evaluate(d, z, t_i, cond)?;
    let z_mid = z.add_scaled(t_mid - t_i, &v)?;
    let v_mid = evaluate(d, &z_mid, t_mid, cond)?;
    z.add_scaled(t_prev - t_i, &v_mid)
}

/// Explicit inversion step: the velocity is taken at the old state but the new time.
pub fn naive_invert_step<C: ?Sized, D: Denoiser<C> + ?Sized>(
    z_prev: &Latent,
    t_i: f64,
    t_prev: f64,
    d: &D,
    cond: &C,
) -> Result<Latent> {
    check_interval(t_i, t_prev)?;
    let v = evaluate(d, z_prev, t_i, cond)?;
    z_prev.add_scaled(t_i - t_prev, &v)
}

/// The iterates `z^1..z^K` of `z^k = z_prev + (t_i − t_prev) · ε̂(z^{k−1}, t_i)`
/// starting from `z^0 = z_prev`. The base `z_prev` stays fixed across iterations.
pub fn fixed_point_iterates<C: ?Sized, D: Denoiser<C> + ?Sized>(
    z_prev: &Latent,
    t_i: f64,
    t_prev: f64,
    d: &D,
    cond: &C,
    mode: &InversionMode,
) -> Result<Vec<Latent>> {
    check_interval(t_i, t_prev)?;
    mode.validate()?;
    let dt = t_i - t_prev;
    let bound = mode.divergence_factor * z_prev.norm().max(1.0);
    let mut iterates: Vec<Latent> = Vec::with_capacity(mode.iterations);
    for k in 1..=mode.iterations {
        let from = iterates.last().unwrap_or(z_prev);
        let v = evaluate(d, from, t_i, cond)?;
        let next = z_prev.add_scaled(dt, &v)?;
        let norm = next.norm();
        if norm > bound {
            return Err(Error::DivergenceDetected {
                iteration: k,
                norm,
                bound,
            });
        }
        iterates.push(next);
    }
    Ok(iterates)
}

pub fn fixed_point_invert_step<C: ?Sized, D: Denoiser<C> + ?Sized>(
    z_prev: &Latent,
    t_i: f64,
    t_prev: f64,
    d: &D,
    cond: &C,
    mode: &InversionMode,
) -> Result<Latent> {
    let mut iterates = fixed_point_iterates(z_prev, t_i, t_prev, d, cond, mode)?;
    combine_iterates(&mut iterates, mode.combine)
}

fn combine_iterates(iterates: &mut Vec<Latent>, combine: Combine) -> Result<Latent> {
    match (combine, iterates.len()) {
        (_, 1) | (Combine::Last, _) => iterates
            .pop()
            .ok_or_else(|| Error::Precondition("no iterates".into())),
        (Combine::Average, _) => Latent::mean_of(iterates),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionStep {
    /// Grid index `i` of the state reached by this step.
    pub index: usize,
    pub t: f64,
    pub latent: Latent,
    /// `‖z^K − z^{K−1}‖` of the fixed-point iteration; 0 for the final explicit step.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InversionLog {
    pub steps: Vec<InversionStep>,
}

/// Inverts `z0` (at `t_0 = 0`) to noise at `t_N = 1`.
///
/// Steps `i = 1..N−1` use the fixed-point inversion step. The last step is an
/// explicit step whose velocity is evaluated at the previous grid time
/// `t_{N−1}`, not at `t_N`.
pub fn invert_trajectory<C: ?Sized, D: Denoiser<C> + ?Sized>(
    z0: &Latent,
    grid: &TimeGrid,
    d: &D,
    cond: &C,
    mode: &InversionMode,
) -> Result<(Latent, InversionLog)> {
    mode.validate()?;
    let n = grid.n_steps();
    let mut log = InversionLog::default();
    let mut z = z0.clone();
    for i in 1..n {
        let (t_prev, t_i) = (grid.t(i - 1), grid.t(i));
        let mut iterates = fixed_point_iterates(&z, t_i, t_prev, d, cond, mode)?;
        let residual = match iterates.len() {
            1 => iterates[0].distance(&z)?,
            k => iterates[k - 1].distance(&iterates[k - 2])?,
        };
        z = combine_iterates(&mut iterates, mode.combine)?;
        log.steps.push(InversionStep {
            index: i,
            t: t_i,
            latent: z.clone(),
            residual,
        });
    }
    let (t_prev, t_last) = (grid.t(n - 1), grid.t(n));
    let v = evaluate(d, &z, t_prev, cond)?;
    z = z.add_scaled(t_last - t_prev, &v)?;
    log.steps.push(InversionStep {
        index: n,
        t: t_last,
        latent: z.clone(),
        residual: 0.0,
    });
    Ok((z, log))
}

/// Integrates along a strictly decreasing list of times with the chosen solver.
pub fn solve_descending<C: ?Sized, D: Denoiser<C> + ?Sized>(
    z: &Latent,
    times: &[f64],
    d: &D,
    cond: &C,
    solver: SolverKind,
) -> Result<Latent> {
    if times.len() < 2 {
        return Err(Error::InvalidSteps);
    }
    let mut z = z.clone();
    for w in times.windows(2) {
        z = match solver {
            SolverKind::Euler => euler_step(&z, w[0], w[1], d, cond)?,
            SolverKind::Midpoint => midpoint_step(&z, w[0], w[1], d, cond)?,
        };
    }
    Ok(z)
}

/// Samples from `t = 1` to `t = 0` over the grid.
pub fn sample_trajectory<C: ?Sized, D: Denoiser<C> + ?Sized>(
    z1: &Latent,
    grid: &TimeGrid,
    d: &D,
    cond: &C,
    solver: SolverKind,
) -> Result<Latent> {
    solve_descending(z1, &grid.descending(), d, cond, solver)
}

/// Mean over elements of `(pred − (z1 − z0))²`.
pub fn flow_matching_loss(pred: &Latent, z0: &Latent, z1: &Latent) -> Result<f64> {
    pred.ensure_same_shape(z0)?;
    pred.ensure_same_shape(z1)?;
    let sum: f64 = pred
        .values()
        .iter()
        .zip(z0.values().iter().zip(z1.values()))
        .map(|(p, (a, b))| {
            let e = p - (b - a);
            e * e
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{alloc_latent, gaussian_noise, NoiseSeed, Shape};

    fn scalar(v: f64) -> Latent {
        Latent::new(Shape::new([1, 1, 1]).unwrap(), vec![v]).unwrap()
    }

    fn constant(c: f64) -> impl Fn(&Latent, f64) -> Result<Latent> {
        move |z: &Latent, _t: f64| alloc_latent(z.shape(), c)
    }

    /// Point mass at 0: `(z − 0) / t`.
    fn point_mass(z: &Latent, t: f64) -> Result<Latent> {
        if t == 0.0 {
            return Err(Error::SingularTime { t });
        }
        z.map(|v| v / t)
    }

    #[test]
    fn uniform_grid() {
        assert_eq!(make_time_grid(2).unwrap().descending(), vec![1.0, 0.5, 0.0]);
        assert_eq!(make_time_grid(1).unwrap().descending(), vec![1.0, 0.0]);
        assert!(matches!(make_time_grid(0), Err(Error::InvalidSteps)));
    }

    #[test]
    fn custom_grid_validation() {
        assert!(TimeGrid::from_ascending(vec![0.0, 0.3, 1.0]).is_ok());
        assert!(TimeGrid::from_ascending(vec![0.0, 0.3, 0.3, 1.0]).is_err());
        assert!(TimeGrid::from_ascending(vec![0.1, 1.0]).is_err());
        assert!(TimeGrid::from_ascending(vec![0.0]).is_err());
    }

    #[test]
    fn euler_constant_and_zero_fields() {
        let out = euler_step(&scalar(0.0), 1.0, 0.9, &constant(1.0), &()).unwrap();
        assert!((out.values()[0] + 0.1).abs() < 1e-15);
        let z = scalar(0.37);
        assert_eq!(euler_step(&z, 1.0, 0.9, &constant(0.0), &()).unwrap(), z);
    }

    #[test]
    fn midpoint_exact_on_time_linear_field() {
        let out = midpoint_step(&scalar(0.0), 1.0, 0.9, &constant(1.0), &()).unwrap();
        assert!((out.values()[0] + 0.1).abs() < 1e-15);
        let time_field = |z: &Latent, t: f64| alloc_latent(z.shape(), t);
        let out = midpoint_step(&scalar(0.0), 1.0, 0.0, &time_field, &()).unwrap();
        assert_eq!(out.values()[0], -0.5);
    }

    #[test]
    fn step_rejects_bad_interval() {
        let z = scalar(0.0);
        assert!(matches!(
            euler_step(&z, 0.5, 0.9, &constant(1.0), &()),
            Err(Error::InvalidTime(_))
        ));
        assert!(naive_invert_step(&z, 0.5, 0.5, &constant(1.0), &()).is_err());
    }

    #[test]
    fn non_finite_velocity_is_reported() {
        let bad = |z: &Latent, _t: f64| Latent::new(z.shape().clone(), vec![f64::NAN]);
        assert!(matches!(
            euler_step(&scalar(0.0), 1.0, 0.5, &bad, &()),
            Err(Error::NonFiniteVelocity { .. })
        ));
    }

    #[test]
    fn naive_inversion_examples() {
        let out = naive_invert_step(&scalar(1.0), 1.0, 0.5, &constant(2.0), &()).unwrap();
        assert_eq!(out.values()[0], 2.0);
        let z = scalar(-0.3);
        assert_eq!(naive_invert_step(&z, 1.0, 0.5, &constant(0.0), &()).unwrap(), z);
        // Velocity at (1.0, t=1) is 1.0; the implicit step's exact solution would be 2.0.
        let out = naive_invert_step(&scalar(1.0), 1.0, 0.5, &point_mass, &()).unwrap();
        assert_eq!(out.values()[0], 1.5);
    }

    #[test]
    fn fixed_point_hand_iterated_recurrence() {
        // z^k = 1 + 0.5 z^{k-1}
        let mode = InversionMode::new(3, Combine::Last);
        let it = fixed_point_iterates(&scalar(1.0), 1.0, 0.5, &point_mass, &(), &mode).unwrap();
        let v: Vec<f64> = it.iter().map(|z| z.values()[0]).collect();
        assert_eq!(v, vec![1.5, 1.75, 1.875]);
        let last = fixed_point_invert_step(&scalar(1.0), 1.0, 0.5, &point_mass, &(), &mode).unwrap();
        assert_eq!(last.values()[0], 1.875);
        let avg = fixed_point_invert_step(
            &scalar(1.0),
            1.0,
            0.5,
            &point_mass,
            &(),
            &InversionMode::new(3, Combine::Average),
        )
        .unwrap();
        assert!((avg.values()[0] - 41.0 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_error_ratio_is_contraction_factor() {
        let mode = InversionMode::new(12, Combine::Last);
        let it = fixed_point_iterates(&scalar(1.0), 1.0, 0.5, &point_mass, &(), &mode).unwrap();
        let errs: Vec<f64> = it.iter().map(|z| (z.values()[0] - 2.0).abs()).collect();
        for w in errs.windows(2) {
            assert!((w[1] / w[0] - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_point_agrees_with_naive_on_z_independent_fields() {
        let z = gaussian_noise(&Shape::new([1, 3, 3]).unwrap(), NoiseSeed(4));
        let field = |z: &Latent, t: f64| z.map(|_| t * t - 0.25);
        let naive = naive_invert_step(&z, 0.7, 0.4, &field, &()).unwrap();
        for k in 1..5 {
            for combine in [Combine::Average, Combine::Last] {
                let fp = fixed_point_invert_step(&z, 0.7, 0.4, &field, &(), &InversionMode::new(k, combine))
                    .unwrap();
                assert_eq!(fp, naive);
            }
        }
    }

    #[test]
    fn divergence_guard() {
        let explode = |z: &Latent, _t: f64| z.map(|v| 1e5 * v + 1.0);
        let err = fixed_point_invert_step(
            &scalar(1.0),
            1.0,
            0.0,
            &explode,
            &(),
            &InversionMode::new(5, Combine::Last),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DivergenceDetected { iteration: 2, .. }), "{err:?}");
    }

    #[test]
    fn zero_iterations_rejected() {
        let mode = InversionMode::new(0, Combine::Last);
        assert!(fixed_point_invert_step(&scalar(1.0), 1.0, 0.5, &constant(1.0), &(), &mode).is_err());
    }

    #[test]
    fn trajectories_on_constant_field() {
        let z0 = gaussian_noise(&Shape::new([1, 2, 2]).unwrap(), NoiseSeed(9));
        for n in [1, 2, 7, 16] {
            let grid = make_time_grid(n).unwrap();
            let (z1, log) = invert_trajectory(&z0, &grid, &constant(0.5), &(), &InversionMode::default()).unwrap();
            assert_eq!(log.steps.len(), n);
            for (a, b) in z1.values().iter().zip(z0.values()) {
                assert!((a - (b + 0.5)).abs() < 1e-14);
            }
            for solver in [SolverKind::Euler, SolverKind::Midpoint] {
                let back = sample_trajectory(&z1, &grid, &constant(0.5), &(), solver).unwrap();
                assert!(back.sub(&z0).unwrap().max_abs() < 1e-14);
            }
            let (same, _) = invert_trajectory(&z0, &grid, &constant(0.0), &(), &InversionMode::default()).unwrap();
            assert_eq!(same, z0);
        }
    }

    #[test]
    fn final_inversion_step_uses_previous_time() {
        // Field equal to t: the last step contributes (1 − t_{N−1}) · t_{N−1}.
        let time_field = |z: &Latent, t: f64| alloc_latent(z.shape(), t);
        let grid = make_time_grid(4).unwrap();
        let (z, _) = invert_trajectory(&scalar(0.0), &grid, &time_field, &(), &InversionMode::new(1, Combine::Last))
            .unwrap();
        let expected = 0.25 * 0.25 + 0.25 * 0.5 + 0.25 * 0.75 + 0.25 * 0.75;
        assert!((z.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn point_mass_line_is_followed() {
        // z_t = t · z_1 on the point-mass field; midpoint and Euler are exact on straight paths.
        let times: Vec<f64> = (0..=9).map(|i| 1.0 - 0.1 * i as f64).collect();
        for solver in [SolverKind::Euler, SolverKind::Midpoint] {
            let z = solve_descending(&scalar(2.0), &times, &point_mass, &(), solver).unwrap();
            assert!((z.values()[0] - 2.0 * times[9]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let z0 = scalar(0.25);
        let z1 = scalar(1.5);
        assert_eq!(flow_matching_loss(&scalar(1.25), &z0, &z1).unwrap(), 0.0);
        assert_eq!(flow_matching_loss(&scalar(3.25), &z0, &z1).unwrap(), 4.0);
        let shape = Shape::new([1, 1, 2]).unwrap();
        let zeros = Latent::new(shape.clone(), vec![0.0, 0.0]).unwrap();
        let pred = Latent::new(shape, vec![1.0, 3.0]).unwrap();
        assert_eq!(flow_matching_loss(&pred, &zeros, &zeros).unwrap(), 5.0);
        let other = Latent::new(Shape::new([1, 2, 1]).unwrap(), vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            flow_matching_loss(&pred, &other, &other),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
