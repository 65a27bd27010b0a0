//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line and then asserts it.
//!
//! Run with `cargo test -p avedit-core --test acceptance -- --nocapture --test-threads 1`
//! to see the lines in order.

use std::time::{Duration, Instant};

use avedit::attention::{compute_alignment, ControlSchedule, TauDirection};
use avedit::error::Error;
use avedit::grid::{decode, encode, read_grid, write_grid};
use avedit::latent::{gaussian_noise, Latent, NoiseSeed, Shape};
use avedit::oracles::{
    gaussian_velocity, mixture_velocity, monte_carlo_velocity, reference_integrate, AnalyticField,
    MixtureComponent,
};
use avedit::pipeline::{
    default_config, run_edit, run_edit_observed, Backend, EditConfig, EvaluationAttention, Modality,
    TaskKind,
};
use avedit::scheduler::{
    fixed_point_iterates, flow_matching_loss, invert_trajectory, make_time_grid, sample_trajectory,
    Combine, InversionMode, SolverKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn report(id: u32, name: &str, pass: bool, elapsed: Duration, limit: Duration, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!(
        "criterion {id} [{verdict}] {name}: {detail} ({:.2}s, limit {}s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
}

// 1. Solver order.
const C1_STEPS: [usize; 3] = [16, 32, 64];
const C1_REFERENCE_SUBSTEPS: usize = 100_000;
const C1_EULER_BAND: (f64, f64) = (1.7, 2.3);
const C1_MIDPOINT_BAND: (f64, f64) = (3.3, 4.7);
const C1_LIMIT: Duration = Duration::from_secs(5);

#[test]
fn criterion_1_solver_order() {
    let start = Instant::now();
    let field = AnalyticField::Gaussian {
        mean: vec![0.0],
        spread: 1.0,
    };
    let z1 = gaussian_noise(&Shape::new([1, 8, 8]).unwrap(), NoiseSeed(0));
    let reference = reference_integrate(&z1, 1.0, 0.0, &field, C1_REFERENCE_SUBSTEPS).unwrap();
    let ratios = |solver: SolverKind| -> Vec<f64> {
        let errors: Vec<f64> = C1_STEPS
            .iter()
            .map(|&n| {
                let grid = make_time_grid(n).unwrap();
                sample_trajectory(&z1, &grid, &field, &(), solver)
                    .unwrap()
                    .distance(&reference)
                    .unwrap()
            })
            .collect();
        errors.windows(2).map(|w| w[0] / w[1]).collect()
    };
    let euler = ratios(SolverKind::Euler);
    let midpoint = ratios(SolverKind::Midpoint);
    let elapsed = start.elapsed();
    let within = |r: &[f64], (lo, hi): (f64, f64)| r.iter().all(|&x| lo <= x && x <= hi);
    let euler_ok = within(&euler, C1_EULER_BAND);
    let midpoint_ok = within(&midpoint, C1_MIDPOINT_BAND);
    let pass = euler_ok && midpoint_ok && elapsed < C1_LIMIT;
    report(
        1,
        "solver order",
        pass,
        elapsed,
        C1_LIMIT,
        &format!(
            "euler ratios {euler:?} in {C1_EULER_BAND:?}: {euler_ok}; midpoint ratios {midpoint:?} in {C1_MIDPOINT_BAND:?}: {midpoint_ok}"
        ),
    );
    assert!(pass);
}

// 2. Repeated-inversion fidelity.
const C2_STEPS: usize = 32;
const C2_SEEDS: u64 = 20;
const C2_MIN_REDUCTION: f64 = 0.20;
const C2_LIMIT: Duration = Duration::from_secs(30);

#[test]
fn criterion_2_repeated_inversion_fidelity() {
    let start = Instant::now();
    let field = AnalyticField::Mixture {
        components: vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![1.0],
                spread: 0.02,
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![-1.0],
                spread: 0.02,
            },
        ],
    };
    let shape = Shape::new([8, 16, 16]).unwrap();
    let grid = make_time_grid(C2_STEPS).unwrap();
    let mean_error = |k: usize| -> f64 {
        let mode = InversionMode::new(k, Combine::Last);
        let total: f64 = (0..C2_SEEDS)
            .map(|s| {
                let z0 = field.sample_data(&shape, NoiseSeed(s)).unwrap();
                let (noise, _) = invert_trajectory(&z0, &grid, &field, &(), &mode).unwrap();
                let back = sample_trajectory(&noise, &grid, &field, &(), SolverKind::Midpoint).unwrap();
                back.distance(&z0).unwrap() / z0.norm()
            })
            .sum();
        total / C2_SEEDS as f64
    };
    let k1 = mean_error(1);
    let k3 = mean_error(3);
    let reduction = 1.0 - k3 / k1;
    let elapsed = start.elapsed();
    let pass = k3 < k1 && reduction >= C2_MIN_REDUCTION && elapsed < C2_LIMIT;
    report(
        2,
        "repeated-inversion fidelity",
        pass,
        elapsed,
        C2_LIMIT,
        &format!("mean rel L2 K=1 {k1:.6}, K=3 {k3:.6}, reduction {:.1}% (need >= 20%)", 100.0 * reduction),
    );
    assert!(pass);
}

// 3. Fixed-point contraction.
const C3_TOL: f64 = 1e-12;
const C3_LIMIT: Duration = Duration::from_secs(1);

#[test]
fn criterion_3_fixed_point_contraction() {
    let start = Instant::now();
    let field = AnalyticField::PointMass { mean: vec![0.0] };
    let z = Latent::new(Shape::new([1, 1, 1]).unwrap(), vec![1.0]).unwrap();
    let iterates: Vec<f64> = fixed_point_iterates(&z, 1.0, 0.5, &field, &(), &InversionMode::new(3, Combine::Last))
        .unwrap()
        .iter()
        .map(|l| l.values()[0])
        .collect();
    let expected = [1.5, 1.75, 1.875];
    let values_ok = iterates.len() == 3
        && iterates.iter().zip(expected).all(|(a, b)| (a - b).abs() <= C3_TOL);
    // Distances to the implicit solution z* = 1 + 0.5 z*, i.e. 2.
    let mut distances = vec![(1.0f64 - 2.0).abs()];
    distances.extend(iterates.iter().map(|v| (v - 2.0).abs()));
    let halving = distances.windows(2).all(|w| (w[1] / w[0] - 0.5).abs() <= C3_TOL);
    let elapsed = start.elapsed();
    let pass = values_ok && halving && elapsed < C3_LIMIT;
    report(
        3,
        "fixed-point contraction",
        pass,
        elapsed,
        C3_LIMIT,
        &format!("iterates {iterates:?}, distances to 2.0 {distances:?}"),
    );
    assert!(pass);
}

// 4. Attention-injection exactness.
const C4_LIMIT: Duration = Duration::from_secs(10);

#[test]
fn criterion_4_attention_injection_exactness() {
    let start = Instant::now();
    let cfg = default_config(TaskKind::Replacement, Modality::Audio);
    let tok = cfg.tokenizer();
    let source = tok.tokenize("dog bark").unwrap();
    let target = tok.tokenize("pig bark").unwrap();
    let alignment = compute_alignment(&source, &target);
    let z0 = gaussian_noise(&Shape::new([1, 16, 16]).unwrap(), NoiseSeed(4));

    let mut evaluations = 0usize;
    let mut injected_evaluations = 0usize;
    let mut violations = Vec::new();
    let tau = cfg.schedule;
    let mut observer = |a: &EvaluationAttention<'_>| {
        evaluations += 1;
        let self_on = a.t >= tau.tau_s;
        let cross_on = a.t >= tau.tau_c;
        injected_evaluations += usize::from(self_on || cross_on);
        for (l, layer) in a.consumed.layers.iter().enumerate() {
            for (h, consumed) in layer.self_maps.iter().enumerate() {
                let expect = if self_on {
                    &a.source.layers[l].self_maps[h]
                } else {
                    &a.own.layers[l].self_maps[h]
                };
                if !bitwise_eq(consumed, expect) {
                    violations.push(format!("self step {} {:?} l{l} h{h}", a.key.step, a.key.point));
                }
            }
            for (h, consumed) in layer.cross_maps.iter().enumerate() {
                let own = &a.own.layers[l].cross_maps[h];
                let src = &a.source.layers[l].cross_maps[h];
                let ok = if cross_on {
                    // A bijective alignment needs no re-normalization, so the
                    // consumed columns are the copied source columns.
                    alignment.mapping().iter().enumerate().all(|(j, m)| match m {
                        Some(s) => consumed
                            .column(j)
                            .iter()
                            .zip(src.column(*s).iter())
                            .all(|(a, b)| a.to_bits() == b.to_bits()),
                        None => true,
                    })
                } else {
                    bitwise_eq(consumed, own)
                };
                if !ok {
                    violations.push(format!("cross step {} {:?} l{l} h{h}", a.key.step, a.key.point));
                }
            }
        }
    };
    let out = run_edit_observed(&z0, &source, &target, &cfg, &mut observer).unwrap();
    let bookkeeping = out
        .diagnostics
        .evaluations
        .iter()
        .all(|e| e.self_injected == (e.t >= 0.75) && e.cross_injected == (e.t >= 0.75));
    let elapsed = start.elapsed();
    let pass = violations.is_empty()
        && bookkeeping
        && alignment.is_bijection()
        && evaluations == 2 * cfg.n_steps
        && injected_evaluations > 0
        && injected_evaluations < evaluations
        && elapsed < C4_LIMIT;
    report(
        4,
        "attention-injection exactness",
        pass,
        elapsed,
        C4_LIMIT,
        &format!(
            "{evaluations} evaluations, {injected_evaluations} with injection, {} violations, schedule bookkeeping {bookkeeping}",
            violations.len()
        ),
    );
    assert!(pass, "{violations:?}");
}

fn bitwise_eq(a: &ndarray::Array2<f64>, b: &ndarray::Array2<f64>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// 5. Branch symmetry.
const C5_CONFIGS: usize = 5;
const C5_LIMIT: Duration = Duration::from_secs(10);
const WORDS: [&str; 10] = ["dog", "bark", "cat", "rain", "a", "the", "piano", "lion", "roar", "wind"];

fn random_config(rng: &mut ChaCha20Rng) -> (EditConfig, Shape, String) {
    let task = TaskKind::ALL[rng.random_range(0..3)];
    let modality = Modality::ALL[rng.random_range(0..2)];
    let mut cfg = default_config(task, modality);
    cfg.schedule = ControlSchedule {
        tau_s: rng.random(),
        tau_c: rng.random(),
        direction: if rng.random() {
            TauDirection::Literal
        } else {
            TauDirection::Strength
        },
        renormalize_cross: rng.random(),
    };
    cfg.n_steps = rng.random_range(3..=12);
    cfg.inversion = InversionMode::new(
        rng.random_range(1..=4),
        if rng.random() { Combine::Average } else { Combine::Last },
    );
    cfg.seed = rng.random();
    if let Backend::Toy { model } = &mut cfg.backend {
        model.weight_seed = rng.random();
    }
    let shape = match modality {
        Modality::Audio => Shape::new([1, 8, 8]).unwrap(),
        Modality::Video => Shape::new([1, 2, 4, 4]).unwrap(),
    };
    let words: Vec<&str> = (0..rng.random_range(1..=5))
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect();
    (cfg, shape, words.join(" "))
}

#[test]
fn criterion_5_branch_symmetry() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let mut failures = Vec::new();
    for i in 0..C5_CONFIGS {
        let (cfg, shape, text) = random_config(&mut rng);
        let prompt = cfg.tokenizer().tokenize(&text).unwrap();
        let z0 = gaussian_noise(&shape, NoiseSeed(rng.random()));
        let out = run_edit(&z0, &prompt, &prompt, &cfg).unwrap();
        let identical = out
            .edited
            .values()
            .iter()
            .zip(out.reconstruction.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let traces = out
            .diagnostics
            .norms
            .iter()
            .all(|n| n.edited.to_bits() == n.reconstruction.to_bits());
        if !(identical && traces) {
            failures.push(format!("config {i}: {cfg:?} prompt {text:?}"));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < C5_LIMIT;
    report(
        5,
        "branch symmetry",
        pass,
        elapsed,
        C5_LIMIT,
        &format!("{C5_CONFIGS} random configs, {} asymmetric", failures.len()),
    );
    assert!(pass, "{failures:?}");
}

// 6. Configuration fidelity.
#[test]
fn criterion_6_configuration_fidelity() {
    let start = Instant::now();
    let expected = [
        (Modality::Video, TaskKind::Addition, 0.42, 0.42, 64),
        (Modality::Video, TaskKind::Replacement, 0.42, 0.42, 64),
        (Modality::Video, TaskKind::Removal, 1.00, 0.42, 64),
        (Modality::Audio, TaskKind::Addition, 0.75, 0.75, 100),
        (Modality::Audio, TaskKind::Replacement, 0.75, 0.75, 100),
        (Modality::Audio, TaskKind::Removal, 1.00, 0.75, 100),
    ];
    let mismatches: Vec<String> = expected
        .iter()
        .filter_map(|&(m, t, tau_s, tau_c, steps)| {
            let c = default_config(t, m);
            let ok = c.schedule.tau_s == tau_s && c.schedule.tau_c == tau_c && c.n_steps == steps;
            (!ok).then(|| format!("{m:?}/{t:?}: {} {} {}", c.schedule.tau_s, c.schedule.tau_c, c.n_steps))
        })
        .collect();
    let elapsed = start.elapsed();
    let pass = mismatches.is_empty();
    report(
        6,
        "configuration fidelity",
        pass,
        elapsed,
        Duration::from_secs(1),
        &format!("6 (modality, task) defaults, {} mismatches", mismatches.len()),
    );
    assert!(pass, "{mismatches:?}");
}

// 7. Oracle agreement.
const C7_POINTS: usize = 12;
const C7_SAMPLES: usize = 1_000_000;
const C7_BANDWIDTH: f64 = 0.05;
const C7_SIGMAS: f64 = 3.0;
const C7_LIMIT: Duration = Duration::from_secs(60);

#[test]
fn criterion_7_oracle_agreement() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let shape = Shape::new([1, 1, 1]).unwrap();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..C7_POINTS {
        let field = if i % 2 == 0 {
            AnalyticField::Gaussian {
                mean: vec![rng.random_range(-1.0..1.0)],
                spread: rng.random_range(0.2..1.5),
            }
        } else {
            let w: f64 = rng.random_range(0.2..0.8);
            AnalyticField::Mixture {
                components: vec![
                    MixtureComponent {
                        weight: w,
                        mean: vec![rng.random_range(-1.5..0.0)],
                        spread: rng.random_range(0.1..0.8),
                    },
                    MixtureComponent {
                        weight: 1.0 - w,
                        mean: vec![rng.random_range(0.0..1.5)],
                        spread: rng.random_range(0.1..0.8),
                    },
                ],
            }
        };
        let t: f64 = rng.random_range(0.05..0.95);
        // A point from the marginal at t, so the kernel sees enough samples.
        let x0 = field.sample_data(&shape, NoiseSeed(rng.random())).unwrap().values()[0];
        let x1 = gaussian_noise(&shape, NoiseSeed(rng.random())).values()[0];
        let z = Latent::new(shape.clone(), vec![(1.0 - t) * x0 + t * x1]).unwrap();
        let closed = match &field {
            AnalyticField::Gaussian { mean, spread } => gaussian_velocity(&z, t, mean, *spread),
            AnalyticField::Mixture { components } => mixture_velocity(&z, t, components),
            _ => unreachable!(),
        }
        .unwrap()
        .values()[0];
        let mc = monte_carlo_velocity(&z, t, &field, C7_SAMPLES, C7_BANDWIDTH, NoiseSeed(rng.random())).unwrap();
        let sigmas = (mc.estimate.values()[0] - closed).abs() / mc.standard_error;
        worst = worst.max(sigmas);
        if sigmas > C7_SIGMAS {
            failures.push(format!("point {i}: {field:?} t={t} z={} off by {sigmas:.2} SE", z.values()[0]));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < C7_LIMIT;
    report(
        7,
        "oracle agreement",
        pass,
        elapsed,
        C7_LIMIT,
        &format!("{C7_POINTS} points (gaussian and mixture), worst deviation {worst:.2} SE (limit {C7_SIGMAS})"),
    );
    assert!(pass, "{failures:?}");
}

// 8. Loss properties.
const C8_INSTANCES: usize = 100;
const C8_SCALING_TOL: f64 = 1e-9;
const C8_LIMIT: Duration = Duration::from_secs(1);

#[test]
fn criterion_8_loss_properties() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut zero_ok = true;
    let mut scaling_ok = true;
    let mut nonnegative = true;
    for _ in 0..C8_INSTANCES {
        let shape = Shape::new([1, rng.random_range(1..5), rng.random_range(1..5)]).unwrap();
        let z0 = gaussian_noise(&shape, NoiseSeed(rng.random()));
        let z1 = gaussian_noise(&shape, NoiseSeed(rng.random()));
        let target = z1.sub(&z0).unwrap();
        zero_ok &= flow_matching_loss(&target, &z0, &z1).unwrap() == 0.0;
        let err = gaussian_noise(&shape, NoiseSeed(rng.random()));
        let c: f64 = rng.random_range(-4.0..4.0);
        let base = flow_matching_loss(&target.add_scaled(1.0, &err).unwrap(), &z0, &z1).unwrap();
        let scaled = flow_matching_loss(&target.add_scaled(c, &err).unwrap(), &z0, &z1).unwrap();
        scaling_ok &= (scaled - c * c * base).abs() <= C8_SCALING_TOL * (c * c * base).max(1.0);
        let pred = gaussian_noise(&shape, NoiseSeed(rng.random()));
        nonnegative &= flow_matching_loss(&pred, &z0, &z1).unwrap() >= 0.0;
    }
    let elapsed = start.elapsed();
    let pass = zero_ok && scaling_ok && nonnegative && elapsed < C8_LIMIT;
    report(
        8,
        "loss properties",
        pass,
        elapsed,
        C8_LIMIT,
        &format!("{C8_INSTANCES} instances: zero at target {zero_ok}, c² scaling {scaling_ok}, nonnegative {nonnegative}"),
    );
    assert!(pass);
}

// 9. Format round trip.
const C9_LATENTS: usize = 50;
const C9_LIMIT: Duration = Duration::from_secs(5);

#[test]
fn criterion_9_format_round_trip() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let mut round_trips = 0;
    for i in 0..C9_LATENTS {
        let rank = rng.random_range(3..=4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=9)).collect();
        let shape = Shape::new(dims).unwrap();
        let scale = 10f64.powi(rng.random_range(-3..=3));
        let z = gaussian_noise(&shape, NoiseSeed(rng.random()))
            .map(|v| (v * scale) as f32 as f64)
            .unwrap();
        let path = dir.path().join(format!("latent{i}.oavg"));
        write_grid(&path, &z).unwrap();
        let back = read_grid(&path).unwrap();
        let exact = back.shape() == z.shape()
            && back
                .values()
                .iter()
                .zip(z.values())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        round_trips += usize::from(exact);
    }

    let good = encode(&gaussian_noise(&Shape::new([1, 2, 3]).unwrap(), NoiseSeed(0)).map(|v| v as f32 as f64).unwrap()).unwrap();
    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"OAVH");
    let mut bad_version = good.clone();
    bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
    let mut bad_rank = good.clone();
    bad_rank[8..12].copy_from_slice(&5u32.to_le_bytes());
    let checks = [
        matches!(decode(&bad_magic), Err(Error::BadMagic(m)) if &m == b"OAVH"),
        matches!(decode(&bad_version), Err(Error::UnsupportedVersion(2))),
        matches!(decode(&bad_rank), Err(Error::Parse { offset: 8, .. })),
        matches!(decode(&good[..10]), Err(Error::Parse { offset: 8, .. })),
        matches!(decode(&good[..good.len() - 1]), Err(Error::Parse { offset, .. }) if offset == good.len() - 1),
    ];
    let corrupt_ok = checks.iter().all(|&c| c);
    let elapsed = start.elapsed();
    let pass = round_trips == C9_LATENTS && corrupt_ok && elapsed < C9_LIMIT;
    report(
        9,
        "format round trip",
        pass,
        elapsed,
        C9_LIMIT,
        &format!("{round_trips}/{C9_LATENTS} bit-exact round trips, corrupted headers {checks:?}"),
    );
    assert!(pass);
}
