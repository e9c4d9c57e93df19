//! Finite-difference oracles shared by the gradient and acceptance tests.
#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rfshim::autodiff::{Tape, Var};
use rfshim::field::{Mask, MultiChannelField, TargetMap};
use rfshim::objective::{mls_objective, objective_gradient, ObjectiveParams, ShimWeights};

/// Max absolute error over the largest reference component.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values kept away from zero so a finite-difference step never crosses a
/// relu kink.
pub fn random_nonzero(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Var;
pub type Case = (Vec<(Vec<usize>, Vec<f64>)>, Box<Build>);

/// Checks the gradient of `sum(out * probe)` with respect to every input.
pub fn check_case(inputs: &[(Vec<usize>, Vec<f64>)], build: &Build, rng: &mut ChaCha8Rng) -> f64 {
    let eval = |vals: &[Vec<f64>], probe: Option<&[f64]>| -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(vals)
            .map(|((shape, _), v)| tape.leaf(shape, v.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &vars);
        let y = tape.value(out).to_vec();
        let grads = match probe {
            Some(p) => {
                tape.backward(out, p).unwrap();
                vars.iter().map(|&v| tape.grad(v)).collect()
            }
            None => Vec::new(),
        };
        (y, grads)
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
    let out_len = eval(&base, None).0.len();
    let probe = random_vec(rng, out_len);
    let (_, grads) = eval(&base, Some(&probe));
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let numeric = central_diff(&base[i], 1e-6, |x| {
            let mut vals = base.clone();
            vals[i] = x.to_vec();
            eval(&vals, None)
                .0
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        });
        worst = worst.max(rel_err(g, &numeric));
    }
    worst
}

#[derive(Clone, Copy, Debug)]
pub enum Primitive {
    Conv2d,
    Relu,
    Add,
    AffineChannel,
    GlobalAvgPool,
    Dense,
    ResidualBlock,
}

pub const PRIMITIVES: [Primitive; 7] = [
    Primitive::Conv2d,
    Primitive::Relu,
    Primitive::Add,
    Primitive::AffineChannel,
    Primitive::GlobalAvgPool,
    Primitive::Dense,
    Primitive::ResidualBlock,
];

fn case(p: Primitive, rng: &mut ChaCha8Rng) -> Case {
    match p {
        Primitive::Conv2d => {
            let b = rng.gen_range(1..3);
            let cin = rng.gen_range(1..4);
            let cout = rng.gen_range(1..4);
            let h = rng.gen_range(3..7);
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..3);
            let x = random_vec(rng, b * cin * h * h);
            let w = random_vec(rng, cout * cin * k * k);
            (
                vec![(vec![b, cin, h, h], x), (vec![cout, cin, k, k], w)],
                Box::new(move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], stride).unwrap()),
            )
        }
        Primitive::Relu => {
            let n = rng.gen_range(1..20);
            (
                vec![(vec![1, n, 1, 1], random_nonzero(rng, n))],
                Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0])),
            )
        }
        Primitive::Add => {
            let n = rng.gen_range(1..20);
            (
                vec![(vec![1, n, 1, 1], random_vec(rng, n)), (vec![1, n, 1, 1], random_vec(rng, n))],
                Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap()),
            )
        }
        Primitive::AffineChannel => {
            let b = rng.gen_range(1..3);
            let c = rng.gen_range(1..4);
            let h = rng.gen_range(1..5);
            (
                vec![
                    (vec![b, c, h, h], random_vec(rng, b * c * h * h)),
                    (vec![c], random_vec(rng, c)),
                    (vec![c], random_vec(rng, c)),
                ],
                Box::new(|t: &mut Tape, v: &[Var]| t.affine_channel(v[0], v[1], v[2]).unwrap()),
            )
        }
        Primitive::GlobalAvgPool => {
            let b = rng.gen_range(1..3);
            let c = rng.gen_range(1..4);
            let h = rng.gen_range(1..5);
            (
                vec![(vec![b, c, h, h], random_vec(rng, b * c * h * h))],
                Box::new(|t: &mut Tape, v: &[Var]| t.global_avg_pool(v[0]).unwrap()),
            )
        }
        Primitive::Dense => {
            let b = rng.gen_range(1..3);
            let n_in = rng.gen_range(1..6);
            let n_out = rng.gen_range(1..6);
            (
                vec![
                    (vec![b, n_in, 1, 1], random_vec(rng, b * n_in)),
                    (vec![n_out, n_in], random_vec(rng, n_out * n_in)),
                    (vec![n_out], random_vec(rng, n_out)),
                ],
                Box::new(|t: &mut Tape, v: &[Var]| t.dense(v[0], v[1], v[2]).unwrap()),
            )
        }
        Primitive::ResidualBlock => {
            let c = rng.gen_range(1..4);
            let h = rng.gen_range(3..6);
            (
                vec![
                    (vec![2, c, h, h], random_vec(rng, 2 * c * h * h)),
                    (vec![c, c, 3, 3], random_vec(rng, c * c * 9)),
                    (vec![c, c, 3, 3], random_vec(rng, c * c * 9)),
                    (vec![c], random_vec(rng, c)),
                    (vec![c], random_vec(rng, c)),
                    (vec![2, c], random_vec(rng, 2 * c)),
                    (vec![2], random_vec(rng, 2)),
                ],
                Box::new(|t: &mut Tape, v: &[Var]| {
                    let y = t.conv2d(v[0], v[1], 1).unwrap();
                    let y = t.affine_channel(y, v[3], v[4]).unwrap();
                    let y = t.relu(y);
                    let y = t.conv2d(y, v[2], 1).unwrap();
                    let y = t.add(y, v[0]).unwrap();
                    let y = t.global_avg_pool(y).unwrap();
                    t.dense(y, v[5], v[6]).unwrap()
                }),
            )
        }
    }
}

/// Worst relative error of one primitive over `instances` random shapes.
pub fn primitive_worst(p: Primitive, seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (inputs, build) = case(p, &mut rng);
        worst = worst.max(check_case(&inputs, build.as_ref(), &mut rng));
    }
    worst
}

pub struct Problem {
    pub field: MultiChannelField,
    pub mask: Mask,
    pub target: TargetMap,
    pub weights: ShimWeights,
    pub params: ObjectiveParams,
}

pub fn random_problem(rng: &mut ChaCha8Rng) -> Problem {
    let n = rng.gen_range(3..9);
    let c = rng.gen_range(1..6);
    let samples: Vec<Complex64> = (0..c * n * n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let mut inside: Vec<bool> = (0..n * n).map(|_| rng.gen_bool(0.7)).collect();
    inside[0] = true;
    let lambda = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..2.0) };
    Problem {
        field: MultiChannelField::new(n, c, samples, 2.0).unwrap(),
        mask: Mask::new(n, inside).unwrap(),
        target: TargetMap::new(n, (0..n * n).map(|_| rng.gen_range(0.5..1.5)).collect()).unwrap(),
        weights: ShimWeights::from_real(&random_vec(rng, 2 * c)).unwrap(),
        params: ObjectiveParams::with_lambda(lambda),
    }
}

/// Worst relative error of the objective gradient over random problems.
pub fn objective_worst(seed: u64, instances: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let p = random_problem(&mut rng);
        let g = objective_gradient(&p.field, &p.weights, &p.mask, &p.target, &p.params).unwrap();
        let numeric = central_diff(&p.weights.to_real(), 1e-6, |x| {
            let w = ShimWeights::from_real(x).unwrap();
            mls_objective(&p.field, &w, &p.mask, &p.target, &p.params).unwrap()
        });
        worst = worst.max(rel_err(&g, &numeric));
    }
    worst
}
