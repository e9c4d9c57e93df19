use std::f64::consts::PI;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{AdamHyper, AdamState};
use super::{Method, SolveReport};
use crate::error::{invalid, Result};
use crate::field::SliceRecord;
use crate::objective::{quadrature_weights, MaskedSystem, ObjectiveParams, ShimWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamOptions {
    pub steps: usize,
    /// Starting weights; quadrature mode when absent.
    pub init: Option<ShimWeights>,
    pub hyper: AdamHyper,
}

impl Default for AdamOptions {
    fn default() -> Self {
        Self {
            steps: 2000,
            init: None,
            hyper: AdamHyper::default(),
        }
    }
}

/// Runs Adam on the objective gradient and returns the best iterate seen.
pub fn adam_solve(
    record: &SliceRecord,
    params: &ObjectiveParams,
    opts: &AdamOptions,
) -> Result<SolveReport> {
    let start = Instant::now();
    params.validate()?;
    let sys = MaskedSystem::new(&record.field, &record.mask, &record.target)?;
    let init = opts
        .init
        .clone()
        .unwrap_or_else(|| quadrature_weights(record.n_coils()));
    sys.check_weights(&init)?;
    let mut report = run_adam(&sys, params, init, opts.steps, opts.hyper)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn run_adam(
    sys: &MaskedSystem,
    params: &ObjectiveParams,
    init: ShimWeights,
    steps: usize,
    hyper: AdamHyper,
) -> Result<SolveReport> {
    let mut theta = init.to_real();
    let mut state = AdamState::new(theta.len(), hyper);
    let mut best = init;
    let mut best_f = f64::INFINITY;
    let mut best_at = 0;
    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let w = ShimWeights::from_real(&theta)?;
        let (f, grad) = sys.objective_and_gradient(&w, params);
        trace.push(f);
        if f < best_f {
            best_f = f;
            best = w;
            best_at = step;
        }
        if step < steps {
            state.step(&mut theta, &grad)?;
        }
    }
    // plateau: no new best over the final tenth of the run
    let converged = best_at + steps / 10 <= steps;
    Ok(SolveReport {
        method: Method::Adam,
        final_rmse_percent: sys.rmse_percent(&best),
        final_objective: best_f,
        final_weights: best,
        objective_trace: trace,
        iterations: steps,
        wall_time_s: 0.0,
        converged,
        restarts_used: None,
        restart_rmse_percent: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartOptions {
    pub n_restarts: usize,
    pub steps: usize,
    pub seed: u64,
    pub hyper: AdamHyper,
}

impl Default for RestartOptions {
    fn default() -> Self {
        Self {
            n_restarts: 300,
            steps: 2000,
            seed: 0,
            hyper: AdamHyper::default(),
        }
    }
}

/// Starting point of restart `index`: magnitudes uniform in `[0.5, 1.5)`,
/// phases uniform in `[0, 2π)`. Depends only on `(seed, index, n_coils)`.
pub fn restart_init(seed: u64, index: usize, n_coils: usize) -> ShimWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let values = (0..n_coils)
        .map(|_| {
            let mag = rng.gen_range(0.5..1.5);
            let phase = rng.gen_range(0.0..2.0 * PI);
            Complex64::from_polar(mag, phase)
        })
        .collect();
    ShimWeights::new(values).expect("finite restart weights")
}

/// Best of `n_restarts` independent Adam runs, ranked by RMSE; ties go to
/// the lower restart index.
pub fn restart_search(
    record: &SliceRecord,
    params: &ObjectiveParams,
    opts: &RestartOptions,
) -> Result<SolveReport> {
    if opts.n_restarts == 0 {
        return invalid("n_restarts must be >= 1");
    }
    let start = Instant::now();
    params.validate()?;
    let sys = MaskedSystem::new(&record.field, &record.mask, &record.target)?;
    let c = sys.n_coils();
    let runs = (0..opts.n_restarts)
        .into_par_iter()
        .map(|r| run_adam(&sys, params, restart_init(opts.seed, r, c), opts.steps, opts.hyper))
        .collect::<Result<Vec<_>>>()?;
    let restart_rmse: Vec<f64> = runs.iter().map(|r| r.final_rmse_percent).collect();
    let mut best_idx = 0;
    for (i, &r) in restart_rmse.iter().enumerate() {
        if r < restart_rmse[best_idx] {
            best_idx = i;
        }
    }
    let mut best = runs.into_iter().nth(best_idx).expect("at least one restart");
    best.method = Method::AdamRestart;
    best.restarts_used = Some(opts.n_restarts);
    best.restart_rmse_percent = restart_rmse;
    best.wall_time_s = start.elapsed().as_secs_f64();
    Ok(best)
}

/// Upper bound on `phase_steps^(C−1)` for [`brute_force_phase_search`].
pub const BRUTE_FORCE_BUDGET: u64 = 10_000_000;

/// Exhaustive search over unit-magnitude weights with phases on a grid of
/// `phase_steps` values. The first coil's phase is pinned to zero.
pub fn brute_force_phase_search(
    record: &SliceRecord,
    params: &ObjectiveParams,
    phase_steps: usize,
) -> Result<SolveReport> {
    let start = Instant::now();
    params.validate()?;
    if phase_steps == 0 {
        return invalid("phase_steps must be >= 1");
    }
    let c = record.n_coils();
    let mut combos: u64 = 1;
    for _ in 1..c {
        combos = combos.saturating_mul(phase_steps as u64);
        if combos > BRUTE_FORCE_BUDGET {
            return invalid(format!(
                "{phase_steps}^{} phase combinations exceed the budget of {BRUTE_FORCE_BUDGET}",
                c - 1
            ));
        }
    }
    let sys = MaskedSystem::new(&record.field, &record.mask, &record.target)?;
    let phasors: Vec<Complex64> = (0..phase_steps)
        .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / phase_steps as f64))
        .collect();
    let mut digits = vec![0usize; c];
    let mut best_f = f64::INFINITY;
    let mut best = quadrature_weights(c);
    for _ in 0..combos {
        let w = ShimWeights::new(digits.iter().map(|&d| phasors[d]).collect())?;
        let f = sys.objective(&w, params);
        if f < best_f {
            best_f = f;
            best = w;
        }
        for d in digits.iter_mut().skip(1) {
            *d += 1;
            if *d < phase_steps {
                break;
            }
            *d = 0;
        }
    }
    Ok(SolveReport {
        method: Method::BruteForce,
        final_rmse_percent: sys.rmse_percent(&best),
        final_objective: best_f,
        final_weights: best,
        objective_trace: vec![best_f],
        iterations: combos as usize,
        wall_time_s: start.elapsed().as_secs_f64(),
        converged: true,
        restarts_used: None,
        restart_rmse_percent: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{generate_record, GenConfig};
    use crate::objective::mls_objective;

    fn record(coils: usize, grid: usize, seed: u64, index: usize) -> SliceRecord {
        let cfg = GenConfig {
            n_coils: coils,
            grid,
            seed,
            ..GenConfig::default()
        };
        generate_record(&cfg, index).unwrap()
    }

    #[test]
    fn restart_init_ranges_and_determinism() {
        for r in 0..20 {
            let w = restart_init(7, r, 8);
            assert_eq!(w, restart_init(7, r, 8));
            for v in w.values() {
                assert!((0.5..1.5).contains(&v.norm()) || (v.norm() - 1.5).abs() < 1e-12);
            }
        }
        assert_ne!(restart_init(7, 0, 8), restart_init(7, 1, 8));
    }

    #[test]
    fn stationary_init_keeps_constant_trace() {
        // single coil with target equal to its own magnitude: b = 1 is exact
        let mut rec = record(1, 8, 0, 0);
        let mags: Vec<f64> = rec.field.channel(0).iter().map(|s| s.norm()).collect();
        rec.target = crate::field::TargetMap::new(8, mags).unwrap();
        let opts = AdamOptions {
            steps: 50,
            ..AdamOptions::default()
        };
        let rep = adam_solve(&rec, &ObjectiveParams::default(), &opts).unwrap();
        let f0 = rep.objective_trace[0];
        assert!(f0 < 1e-20);
        assert!(rep.objective_trace.iter().all(|&f| f == f0));
    }

    #[test]
    fn adam_is_deterministic_and_keeps_best() {
        let p = ObjectiveParams::default();
        let opts = AdamOptions {
            steps: 200,
            ..AdamOptions::default()
        };
        for i in 0..20 {
            let rec = record(8, 12, 5, i);
            let a = adam_solve(&rec, &p, &opts).unwrap();
            assert!(a.final_objective <= a.objective_trace[0]);
            let min = a.objective_trace.iter().cloned().fold(f64::INFINITY, f64::min);
            assert_eq!(a.final_objective, min);
            if i < 3 {
                let b = adam_solve(&rec, &p, &opts).unwrap();
                assert!(a.same_result(&b));
            }
        }
    }

    #[test]
    fn single_restart_equals_adam_from_its_init() {
        let rec = record(8, 12, 1, 0);
        let p = ObjectiveParams::default();
        let ropts = RestartOptions {
            n_restarts: 1,
            steps: 100,
            seed: 42,
            ..RestartOptions::default()
        };
        let r = restart_search(&rec, &p, &ropts).unwrap();
        let aopts = AdamOptions {
            steps: 100,
            init: Some(restart_init(42, 0, 8)),
            ..AdamOptions::default()
        };
        let a = adam_solve(&rec, &p, &aopts).unwrap();
        assert_eq!(r.final_weights, a.final_weights);
        assert_eq!(r.objective_trace, a.objective_trace);
        assert_eq!(r.restarts_used, Some(1));
    }

    #[test]
    fn more_restarts_never_hurt() {
        let rec = record(8, 12, 3, 2);
        let p = ObjectiveParams::default();
        let run = |n| {
            restart_search(
                &rec,
                &p,
                &RestartOptions {
                    n_restarts: n,
                    steps: 150,
                    seed: 9,
                    ..RestartOptions::default()
                },
            )
            .unwrap()
        };
        let few = run(5);
        let many = run(20);
        assert!(many.final_rmse_percent <= few.final_rmse_percent);
        assert_eq!(&many.restart_rmse_percent[..5], &few.restart_rmse_percent[..]);
        let min = many
            .restart_rmse_percent
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(many.final_rmse_percent, min);
        assert!(run(20).same_result(&many));
    }

    #[test]
    fn brute_force_counts_and_budget() {
        let rec = record(2, 8, 0, 0);
        let rep = brute_force_phase_search(&rec, &ObjectiveParams::default(), 360).unwrap();
        assert_eq!(rep.iterations, 360);
        let rec8 = record(8, 8, 0, 0);
        assert!(brute_force_phase_search(&rec8, &ObjectiveParams::default(), 16).is_err());
    }

    #[test]
    fn brute_force_single_coil_is_phase_free() {
        let rec = record(1, 8, 0, 0);
        let p = ObjectiveParams::default();
        let rep = brute_force_phase_search(&rec, &p, 7).unwrap();
        assert_eq!(rep.iterations, 1);
        assert_eq!(rep.final_weights.values(), &[Complex64::new(1.0, 0.0)]);
        let rotated = rep.final_weights.scaled(Complex64::from_polar(1.0, 1.234));
        let f = mls_objective(&rec.field, &rotated, &rec.mask, &rec.target, &p).unwrap();
        assert!((f - rep.final_objective).abs() < 1e-12 * f);
    }

    #[test]
    fn brute_force_matches_nested_loop_oracle() {
        let rec = record(3, 8, 2, 1);
        let p = ObjectiveParams::default();
        let steps = 90;
        let rep = brute_force_phase_search(&rec, &p, steps).unwrap();

        let idx = rec.mask.indices();
        let mut best = f64::INFINITY;
        for j in 0..steps {
            for k in 0..steps {
                let pj = 2.0 * PI * j as f64 / steps as f64;
                let pk = 2.0 * PI * k as f64 / steps as f64;
                let mut f = 0.0;
                for &v in idx {
                    let a0 = rec.field.channel(0)[v];
                    let a1 = rec.field.channel(1)[v];
                    let a2 = rec.field.channel(2)[v];
                    let re = a0.re + a1.re * pj.cos() - a1.im * pj.sin() + a2.re * pk.cos()
                        - a2.im * pk.sin();
                    let im = a0.im + a1.re * pj.sin() + a1.im * pj.cos() + a2.re * pk.sin()
                        + a2.im * pk.cos();
                    let r = (re * re + im * im).sqrt() - rec.target.as_slice()[v];
                    f += r * r;
                }
                best = best.min(f);
            }
        }
        assert!((rep.final_objective - best).abs() <= 1e-10 * best);
    }
}
