//! Flat parameter vectors for tape-built networks.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Normal with standard deviation `gain·sqrt(2 / fan_in)`.
    He { fan_in: usize, gain: f64 },
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of parameter tensors. A network's forward pass consumes the
/// bound variables in the same order the layout was built.
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct ParamLayout {
    pub specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn push(&mut self, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec {
            shape: shape.to_vec(),
            init,
        });
    }

    pub fn conv(&mut self, out: usize, input: usize, k: usize, gain: f64) {
        self.push(
            &[out, input, k, k],
            Init::He {
                fan_in: input * k * k,
                gain,
            },
        );
    }

    pub fn affine(&mut self, channels: usize, scale: f64) {
        self.push(&[channels], Init::Const(scale));
        self.push(&[channels], Init::Const(0.0));
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(ParamSpec::len).sum()
    }

    pub fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total());
        for spec in &self.specs {
            match spec.init {
                Init::He { fan_in, gain } => {
                    let std = gain * (2.0 / fan_in.max(1) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("finite std");
                    out.extend((0..spec.len()).map(|_| normal.sample(rng)));
                }
                Init::Const(c) => out.extend(std::iter::repeat_n(c, spec.len())),
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, params: &[f64]) -> Result<Vec<Var>> {
        let mut at = 0;
        self.specs
            .iter()
            .map(|spec| {
                let n = spec.len();
                let v = tape.leaf(&spec.shape, params[at..at + n].to_vec());
                at += n;
                v
            })
            .collect()
    }

    pub fn gather_grads(&self, tape: &Tape, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total());
        for &v in vars {
            out.extend(tape.grad(v));
        }
        out
    }
}
