mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{central_diff, objective_worst, primitive_worst, random_vec, rel_err, Primitive};
use rfshim::autodiff::Tape;
use rfshim::field::{generate_record, GenConfig};
use rfshim::objective::ObjectiveParams;
use rfshim::predictor::{build_predictor, rmse_matching_loss, PredictorModel};
use rfshim::solvers::{restart_search, RestartOptions};

const INSTANCES: usize = 100;

fn check(p: Primitive, seed: u64) {
    let worst = primitive_worst(p, seed, INSTANCES);
    assert!(worst < 1e-4, "{p:?}: max relative error {worst:e}");
}

#[test]
fn conv2d_matches_finite_differences() {
    check(Primitive::Conv2d, 1);
}

#[test]
fn relu_matches_finite_differences() {
    check(Primitive::Relu, 2);
}

#[test]
fn add_matches_finite_differences() {
    check(Primitive::Add, 3);
}

#[test]
fn affine_channel_matches_finite_differences() {
    check(Primitive::AffineChannel, 4);
}

#[test]
fn global_avg_pool_matches_finite_differences() {
    check(Primitive::GlobalAvgPool, 5);
}

#[test]
fn dense_matches_finite_differences() {
    check(Primitive::Dense, 6);
}

#[test]
fn composed_block_matches_finite_differences() {
    check(Primitive::ResidualBlock, 7);
}

/// The full Jacobian of a 3-input, 2-output dense layer, row by row.
#[test]
fn dense_jacobian_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..INSTANCES {
        let x = random_vec(&mut rng, 3);
        let w = random_vec(&mut rng, 6);
        let b = random_vec(&mut rng, 2);
        for row in 0..2 {
            let mut tape = Tape::new();
            let xv = tape.leaf(&[1, 3], x.clone()).unwrap();
            let wv = tape.leaf(&[2, 3], w.clone()).unwrap();
            let bv = tape.leaf(&[2], b.clone()).unwrap();
            let y = tape.dense(xv, wv, bv).unwrap();
            let mut seed = vec![0.0; 2];
            seed[row] = 1.0;
            tape.backward(y, &seed).unwrap();
            let numeric = central_diff(&x, 1e-6, |xp| {
                b[row] + (0..3).map(|j| w[row * 3 + j] * xp[j]).sum::<f64>()
            });
            assert!(rel_err(&tape.grad(xv), &numeric) < 1e-4);
            assert_eq!(tape.grad(xv), w[row * 3..row * 3 + 3].to_vec());
        }
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let worst = objective_worst(9, INSTANCES);
    assert!(worst < 1e-5, "objective gradient: max relative error {worst:e}");
}

/// Loss gradient through the whole network and RMSE head.
#[test]
fn rmse_matching_loss_gradient_matches_finite_differences() {
    let cfg = GenConfig {
        n_slices: 2,
        n_coils: 2,
        grid: 16,
        seed: 10,
        ..GenConfig::default()
    };
    let mut records: Vec<_> = (0..2).map(|i| generate_record(&cfg, i).unwrap()).collect();
    for r in &mut records {
        let opts = RestartOptions {
            n_restarts: 2,
            steps: 100,
            ..RestartOptions::default()
        };
        let rep = restart_search(r, &ObjectiveParams::default(), &opts).unwrap();
        r.set_reference(&rep.final_weights).unwrap();
    }
    let refs: Vec<_> = records.iter().collect();
    let base = build_predictor(4, 16, 4, 11).unwrap();
    let arch = base.architecture().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..3 {
        let params: Vec<f64> = base
            .params()
            .iter()
            .map(|p| p + rng.gen_range(-0.2..0.2))
            .collect();
        let model = PredictorModel::from_parts(arch.clone(), params.clone()).unwrap();
        let out = rmse_matching_loss(&model, &refs).unwrap();
        for (r, &p) in records.iter().zip(&out.predicted_rmse) {
            assert!((p - r.reference().unwrap().rmse_percent).abs() > 1e-3);
        }
        let loss_at = |x: &[f64]| {
            let m = PredictorModel::from_parts(arch.clone(), x.to_vec()).unwrap();
            rmse_matching_loss(&m, &refs).unwrap().loss
        };
        let n = params.len();
        let mut coords: Vec<usize> = (n - 4..n).collect();
        coords.extend((0..28).map(|_| rng.gen_range(0..n)));
        let h = 1e-5;
        let mut x = params.clone();
        let numeric: Vec<f64> = coords
            .iter()
            .map(|&i| {
                x[i] = params[i] + h;
                let up = loss_at(&x);
                x[i] = params[i] - h;
                let down = loss_at(&x);
                x[i] = params[i];
                (up - down) / (2.0 * h)
            })
            .collect();
        let analytic: Vec<f64> = coords.iter().map(|&i| out.grad[i]).collect();
        let mut err = rel_err(&analytic, &numeric);
        for _ in 0..4 {
            let v = random_vec(&mut rng, n);
            let shifted = |sign: f64| -> Vec<f64> { params.iter().zip(&v).map(|(p, d)| p + sign * h * d).collect() };
            let numeric = (loss_at(&shifted(1.0)) - loss_at(&shifted(-1.0))) / (2.0 * h);
            let analytic: f64 = out.grad.iter().zip(&v).map(|(g, d)| g * d).sum();
            err = err.max(rel_err(&[analytic], &[numeric]));
        }
        assert!(err < 1e-3, "rmse-matching loss gradient: relative error {err:e}");
    }
}
