use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ShimError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub hyper: AdamHyper,
    step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            step_count: 0,
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second_moment
    }

    /// One update of `params` in place. A non-finite gradient leaves both
    /// the state and the parameters untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        let dim = self.first_moment.len();
        if params.len() != dim || grad.len() != dim {
            return invalid(format!(
                "adam dimension {dim}, params {}, grad {}",
                params.len(),
                grad.len()
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(ShimError::NonFinite("gradient"));
        }
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..dim {
            let g = grad[i];
            let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64]) -> Result<(AdamState, Vec<f64>)> {
    let mut next = state.clone();
    let mut p = params.to_vec();
    next.step(&mut p, grad)?;
    Ok((next, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let s = AdamState::new(3, AdamHyper::default());
        let (s1, p) = adam_step(&s, &[1.0, -2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s1.step_count(), 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let h = AdamHyper::default();
        let s = AdamState::new(4, h);
        let g = [1e-3, -2.0, 50.0, 1e-6];
        let (_, p) = adam_step(&s, &[0.0; 4], &g).unwrap();
        for (pi, gi) in p.iter().zip(&g) {
            // m̂ = g, v̂ = g² after bias correction
            let expected = h.lr * gi.abs() / (gi.abs() + h.eps);
            assert!((pi.abs() - expected).abs() < 1e-15);
            assert_eq!(pi.signum(), -gi.signum());
            assert!((pi.abs() - h.lr).abs() < h.lr * 0.011);
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut s = AdamState::new(2, AdamHyper::default());
        let mut p = vec![1.0, 1.0];
        s.step(&mut p, &[0.5, 0.5]).unwrap();
        let (s_before, p_before) = (s.clone(), p.clone());
        assert!(matches!(s.step(&mut p, &[f64::NAN, 0.0]), Err(ShimError::NonFinite(_))));
        assert_eq!(s, s_before);
        assert_eq!(p, p_before);
    }

    #[test]
    fn converges_on_quadratic() {
        let target = [0.3, -1.2, 0.75, 2.0];
        let mut s = AdamState::new(4, AdamHyper { lr: 0.05, ..AdamHyper::default() });
        let mut theta = vec![0.0; 4];
        for _ in 0..500 {
            let g: Vec<f64> = theta.iter().zip(&target).map(|(t, s)| 2.0 * (t - s)).collect();
            s.step(&mut theta, &g).unwrap();
        }
        let dist = theta
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "distance {dist}");
        assert!(s.second_moment().iter().all(|&v| v >= 0.0));
        assert_eq!(s.step_count(), 500);
    }
}
