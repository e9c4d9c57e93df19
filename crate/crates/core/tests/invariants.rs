use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfshim::dataset_io::{decode_dataset, encode_dataset};
use rfshim::field::{
    assign_splits, augment_rotate, generate_dataset, generate_record, rotate_grid, GenConfig, Mask,
    MultiChannelField, SliceRecord, SplitRatio, TargetMap,
};
use rfshim::nfd::{uniformity_stats, ConfusionMatrix, Label, UniformityCriterion};
use rfshim::objective::{
    combine, mls_objective, objective_gradient, rmse_percent, ObjectiveParams, ShimWeights,
};
use rfshim::predictor::{build_predictor, decode_model, encode_model, rmse_matching_loss, predict};
use rfshim::solvers::{adam_solve, mls_solve, restart_search, AdamOptions, MlsOptions, RestartOptions};

struct Problem {
    field: MultiChannelField,
    mask: Mask,
    target: TargetMap,
    weights: ShimWeights,
    params: ObjectiveParams,
}

fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..10);
    let c = rng.gen_range(1..6);
    let samples: Vec<Complex64> = (0..c * n * n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let mut inside: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.6)).collect();
    inside[rng.gen_range(0..n * n)] = true;
    let weights: Vec<Complex64> = (0..c)
        .map(|_| Complex64::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
        .collect();
    Problem {
        field: MultiChannelField::new(n, c, samples, 2.0).unwrap(),
        mask: Mask::new(n, inside).unwrap(),
        target: TargetMap::new(n, (0..n * n).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap(),
        weights: ShimWeights::new(weights).unwrap(),
        params: ObjectiveParams::with_lambda(if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..1.0) }),
    }
}

fn small_record(seed: u64, coils: usize, grid: usize) -> SliceRecord {
    let cfg = GenConfig {
        n_slices: 1,
        n_coils: coils,
        grid,
        seed,
        ..GenConfig::default()
    };
    generate_record(&cfg, 0).unwrap()
}

fn obj(p: &Problem, field: &MultiChannelField, w: &ShimWeights) -> (f64, f64, Vec<f64>) {
    (
        mls_objective(field, w, &p.mask, &p.target, &p.params).unwrap(),
        rmse_percent(field, w, &p.mask, &p.target).unwrap(),
        objective_gradient(field, w, &p.mask, &p.target, &p.params).unwrap(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn global_phase_quarter_turns_are_exact(seed in any::<u64>(), k in 0usize..4) {
        let p = problem(seed);
        let u = [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0), Complex64::new(-1.0, 0.0), Complex64::new(0.0, -1.0)][k];
        let (f0, r0, _) = obj(&p, &p.field, &p.weights);
        let (f1, r1, _) = obj(&p, &p.field, &p.weights.scaled(u));
        prop_assert_eq!(f0.to_bits(), f1.to_bits());
        prop_assert_eq!(r0.to_bits(), r1.to_bits());
    }

    #[test]
    fn global_phase_arbitrary_angle(seed in any::<u64>(), theta in 0.0f64..std::f64::consts::TAU) {
        let p = problem(seed);
        let u = Complex64::from_polar(1.0, theta);
        let (f0, r0, _) = obj(&p, &p.field, &p.weights);
        let (f1, r1, _) = obj(&p, &p.field, &p.weights.scaled(u));
        prop_assert!((f0 - f1).abs() <= 1e-12 * f0.max(1.0));
        prop_assert!((r0 - r1).abs() <= 1e-12 * r0.max(1.0));
    }

    #[test]
    fn magnitude_homogeneity(seed in any::<u64>(), re in -3.0f64..3.0, im in -3.0f64..3.0) {
        let p = problem(seed);
        let c = Complex64::new(re, im);
        let s0 = combine(&p.field, &p.weights).unwrap();
        let s1 = combine(&p.field, &p.weights.scaled(c)).unwrap();
        for (a, b) in s0.iter().zip(&s1) {
            prop_assert!((b.norm() - c.norm() * a.norm()).abs() <= 1e-12 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn mask_locality(seed in any::<u64>()) {
        let p = problem(seed);
        let mut changed = p.field.clone();
        let n = p.field.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for k in 0..p.field.n_channels() {
            for v in 0..n * n {
                if !p.mask.is_inside(v) {
                    changed.samples_mut()[k * n * n + v] = Complex64::new(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0));
                }
            }
        }
        let (f0, r0, g0) = obj(&p, &p.field, &p.weights);
        let (f1, r1, g1) = obj(&p, &changed, &p.weights);
        prop_assert_eq!(f0.to_bits(), f1.to_bits());
        prop_assert_eq!(r0.to_bits(), r1.to_bits());
        prop_assert_eq!(g0, g1);
    }

    #[test]
    fn four_quarter_turns_are_identity(seed in any::<u64>(), n in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<u32> = (0..n * n).map(|_| rng.gen()).collect();
        let mut g = grid.clone();
        for _ in 0..4 {
            g = rotate_grid(&g, n, 1);
        }
        prop_assert_eq!(&g, &grid);
        prop_assert_eq!(rotate_grid(&rotate_grid(&grid, n, 2), n, 2), grid.clone());
        prop_assert_eq!(rotate_grid(&grid, n, 0), grid);
    }

    #[test]
    fn rotated_record_keeps_objective(seed in any::<u64>(), q in 0u8..4) {
        let r = small_record(seed, 3, 10);
        let rot = augment_rotate(&r, q).unwrap();
        let w = ShimWeights::new(vec![Complex64::new(1.0, 0.5), Complex64::new(-0.3, 0.2), Complex64::new(0.1, -1.0)]).unwrap();
        let a = rmse_percent(&r.field, &w, &r.mask, &r.target).unwrap();
        let b = rmse_percent(&rot.field, &w, &rot.mask, &rot.target).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a);
        let back = (0..(4 - q) % 4).try_fold(rot, |acc, _| augment_rotate(&acc, 1)).unwrap();
        prop_assert_eq!(back.field, r.field);
        prop_assert_eq!(back.mask, r.mask);
    }

    #[test]
    fn dataset_round_trip_is_bit_exact(seed in any::<u64>(), slices in 1usize..4, with_ref in any::<bool>()) {
        let cfg = GenConfig { n_slices: slices, n_coils: 3, grid: 8, seed, ..GenConfig::default() };
        let mut ds = generate_dataset(&cfg).unwrap();
        if with_ref {
            let w = ShimWeights::new(vec![Complex64::new(0.5, 0.25); 3]).unwrap();
            ds.records[0].set_reference(&w).unwrap();
        }
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(encode_dataset(&back), bytes);
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn criterion_is_scale_invariant(seed in any::<u64>(), factor in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let mask = Mask::full(n);
        let map: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..2.0)).collect();
        let scaled: Vec<f64> = map.iter().map(|v| v * factor).collect();
        let crit = UniformityCriterion::default();
        let a = uniformity_stats(&map, &mask).unwrap();
        let b = uniformity_stats(&scaled, &mask).unwrap();
        prop_assert!((a.min_over_mean - b.min_over_mean).abs() < 1e-12);
        prop_assert!((a.cov - b.cov).abs() < 1e-12);
        prop_assert_eq!(crit.label(&map, &mask).unwrap(), crit.label(&scaled, &mask).unwrap());
    }

    #[test]
    fn confusion_counts_sum_to_set_size(labels in proptest::collection::vec((any::<bool>(), any::<bool>(), 0.0f64..1.0), 0..50)) {
        let items: Vec<(Label, Label, f64)> = labels
            .iter()
            .map(|&(t, p, c)| {
                let l = |b: bool| if b { Label::NonUniform } else { Label::Uniform };
                (l(t), l(p), c)
            })
            .collect();
        let cm = ConfusionMatrix::from_predictions(&items);
        prop_assert_eq!(cm.total(), items.len());
        if !items.is_empty() {
            prop_assert!((cm.accuracy() - (cm.tp + cm.tn) as f64 / items.len() as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn splits_are_reproducible(n in 1usize..200, seed in any::<u64>()) {
        let ratio = SplitRatio::default();
        prop_assert_eq!(assign_splits(n, ratio, seed).unwrap(), assign_splits(n, ratio, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mls_trace_is_monotone(seed in any::<u64>(), lambda in prop_oneof![Just(0.0), 0.0f64..1.0]) {
        let r = small_record(seed, 4, 12);
        let rep = mls_solve(&r, &ObjectiveParams::with_lambda(lambda), &MlsOptions::default()).unwrap();
        prop_assert!(rep.trace_is_monotone());
        let recomputed = mls_objective(&r.field, &rep.final_weights, &r.mask, &r.target, &ObjectiveParams::with_lambda(lambda)).unwrap();
        prop_assert!((recomputed - rep.final_objective).abs() <= 1e-9 * recomputed.max(1e-300));
    }

    #[test]
    fn restart_report_is_minimum_over_restarts(seed in any::<u64>()) {
        let r = small_record(seed, 3, 10);
        let opts = RestartOptions { n_restarts: 5, steps: 100, seed, ..RestartOptions::default() };
        let rep = restart_search(&r, &ObjectiveParams::default(), &opts).unwrap();
        let min = rep.restart_rmse_percent.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(rep.restart_rmse_percent.len(), 5);
        prop_assert_eq!(rep.final_rmse_percent.to_bits(), min.to_bits());
        let again = restart_search(&r, &ObjectiveParams::default(), &opts).unwrap();
        prop_assert!(rep.same_result(&again));
    }

    #[test]
    fn solvers_are_deterministic(seed in any::<u64>()) {
        let r = small_record(seed, 3, 10);
        let p = ObjectiveParams::default();
        let a = adam_solve(&r, &p, &AdamOptions { steps: 50, ..AdamOptions::default() }).unwrap();
        let b = adam_solve(&r, &p, &AdamOptions { steps: 50, ..AdamOptions::default() }).unwrap();
        prop_assert!(a.same_result(&b));
        let a = mls_solve(&r, &p, &MlsOptions::default()).unwrap();
        let b = mls_solve(&r, &p, &MlsOptions::default()).unwrap();
        prop_assert!(a.same_result(&b));
    }

    #[test]
    fn rmse_matching_loss_is_nonnegative(seed in any::<u64>()) {
        let mut r = small_record(seed, 2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = ShimWeights::from_real(&(0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap();
        r.set_reference(&w).unwrap();
        let model = build_predictor(4, 16, 2, seed).unwrap();
        let out = rmse_matching_loss(&model, &[&r]).unwrap();
        prop_assert!(out.loss >= 0.0);
        prop_assert!((out.loss - (out.predicted_rmse[0] - r.reference().unwrap().rmse_percent).abs()).abs() < 1e-12);
    }

    #[test]
    fn model_round_trip_is_bit_exact(seed in any::<u64>(), wb in 1usize..4) {
        let model = build_predictor(4, 16, wb, seed).unwrap();
        let bytes = encode_model(&model);
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(encode_model(&back), bytes);
        let r = small_record(seed, 2, 16);
        prop_assert_eq!(predict(&model, &r).unwrap().weights, predict(&back, &r).unwrap().weights);
        prop_assert_eq!(back, model);
    }
}
