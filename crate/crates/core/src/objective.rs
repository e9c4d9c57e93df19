//! Forward model and shimming metrics.
//!
//! The combined field is `s = A b`, where `A` holds one complex sample per
//! (voxel, coil) pair and `b` the coil weights. Everything here works on the
//! voxels inside the mask only; samples outside the mask never enter a sum.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, ShimError};
use crate::field::{Mask, MultiChannelField, TargetMap};

/// Complex coil weights.
///
/// The canonical real parameterization is `[Re b1..Re bC, Im b1..Im bC]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct ShimWeights {
    values: Vec<Complex64>,
}

impl ShimWeights {
    pub fn new(values: Vec<Complex64>) -> Result<Self> {
        if values.is_empty() {
            return invalid("weight vector must have at least one coil");
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(ShimError::NonFinite("shim weights"));
        }
        Ok(Self { values })
    }

    pub fn zeros(n_coils: usize) -> Self {
        Self {
            values: vec![Complex64::new(0.0, 0.0); n_coils.max(1)],
        }
    }

    /// Builds weights from the canonical `2C` real layout.
    pub fn from_real(params: &[f64]) -> Result<Self> {
        if params.is_empty() || !params.len().is_multiple_of(2) {
            return invalid(format!(
                "real parameter vector must have even nonzero length, got {}",
                params.len()
            ));
        }
        let c = params.len() / 2;
        Self::new(
            (0..c)
                .map(|k| Complex64::new(params[k], params[c + k]))
                .collect(),
        )
    }

    pub fn to_real(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.values.len());
        out.extend(self.values.iter().map(|v| v.re));
        out.extend(self.values.iter().map(|v| v.im));
        out
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn norm_sqr(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    /// Multiplies every weight by the same complex scalar.
    pub fn scaled(&self, factor: Complex64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Rounds every component to the nearest `f32`, the precision used on disk.
    pub fn quantized_f32(&self) -> Self {
        Self {
            values: self
                .values
                .iter()
                .map(|v| Complex64::new(v.re as f32 as f64, v.im as f32 as f64))
                .collect(),
        }
    }
}

impl From<ShimWeights> for Vec<f64> {
    fn from(w: ShimWeights) -> Self {
        w.to_real()
    }
}

impl TryFrom<Vec<f64>> for ShimWeights {
    type Error = ShimError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        ShimWeights::from_real(&v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    /// Tikhonov weight on `‖b‖²`.
    pub lambda: f64,
    /// Floor for `|s|` when forming the phase direction `s / |s|`.
    pub epsilon_mag: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            epsilon_mag: 1e-12,
        }
    }
}

impl ObjectiveParams {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.epsilon_mag > 0.0) {
            return invalid(format!("epsilon_mag must be > 0, got {}", self.epsilon_mag));
        }
        Ok(())
    }
}

/// Unit-magnitude weights with phases `2πk/C`.
pub fn quadrature_weights(n_coils: usize) -> ShimWeights {
    let n = n_coils.max(1);
    let values = (0..n)
        .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64))
        .collect();
    ShimWeights { values }
}

/// Combined field `s = A b` on the full grid.
pub fn combine(field: &MultiChannelField, weights: &ShimWeights) -> Result<Vec<Complex64>> {
    check_weights(field, weights)?;
    let nn = field.n() * field.n();
    let mut out = vec![Complex64::new(0.0, 0.0); nn];
    for (c, b) in weights.values.iter().enumerate() {
        for (acc, a) in out.iter_mut().zip(field.channel(c)) {
            *acc += a * b;
        }
    }
    Ok(out)
}

/// `|A b|` on the full grid with zeros outside the mask.
pub fn magnitude_map(
    field: &MultiChannelField,
    weights: &ShimWeights,
    mask: &Mask,
) -> Result<Vec<f64>> {
    check_mask(field, mask)?;
    let s = combine(field, weights)?;
    Ok(s.iter()
        .zip(mask.as_slice())
        .map(|(v, &inside)| if inside { v.norm() } else { 0.0 })
        .collect())
}

pub fn rmse_percent(
    field: &MultiChannelField,
    weights: &ShimWeights,
    mask: &Mask,
    target: &TargetMap,
) -> Result<f64> {
    let sys = MaskedSystem::new(field, mask, target)?;
    sys.check_weights(weights)?;
    Ok(sys.rmse_percent(weights))
}

pub fn mls_objective(
    field: &MultiChannelField,
    weights: &ShimWeights,
    mask: &Mask,
    target: &TargetMap,
    params: &ObjectiveParams,
) -> Result<f64> {
    params.validate()?;
    let sys = MaskedSystem::new(field, mask, target)?;
    sys.check_weights(weights)?;
    Ok(sys.objective(weights, params))
}

/// Gradient of [`mls_objective`] in the canonical `2C` real layout.
pub fn objective_gradient(
    field: &MultiChannelField,
    weights: &ShimWeights,
    mask: &Mask,
    target: &TargetMap,
    params: &ObjectiveParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let sys = MaskedSystem::new(field, mask, target)?;
    sys.check_weights(weights)?;
    Ok(sys.objective_and_gradient(weights, params).1)
}

/// The masked rows of `A` packed voxel-major, with their target values.
///
/// Solvers build this once per slice and evaluate it many times.
#[derive(Clone, Debug)]
pub struct MaskedSystem {
    n_coils: usize,
    rows: Vec<Complex64>,
    target: Vec<f64>,
}

impl MaskedSystem {
    pub fn new(field: &MultiChannelField, mask: &Mask, target: &TargetMap) -> Result<Self> {
        check_mask(field, mask)?;
        if target.n() != field.n() {
            return invalid(format!(
                "target grid {} does not match field grid {}",
                target.n(),
                field.n()
            ));
        }
        let idx = mask.indices();
        if idx.is_empty() {
            return invalid("mask is empty");
        }
        let n_coils = field.n_channels();
        let mut rows = Vec::with_capacity(idx.len() * n_coils);
        for &v in idx {
            for c in 0..n_coils {
                rows.push(field.channel(c)[v]);
            }
        }
        let target = idx.iter().map(|&v| target.as_slice()[v]).collect();
        Ok(Self {
            n_coils,
            rows,
            target,
        })
    }

    pub fn n_coils(&self) -> usize {
        self.n_coils
    }

    pub fn n_voxels(&self) -> usize {
        self.target.len()
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    /// Row `v` of the masked system (one sample per coil).
    pub fn row(&self, v: usize) -> &[Complex64] {
        &self.rows[v * self.n_coils..(v + 1) * self.n_coils]
    }

    pub fn check_weights(&self, weights: &ShimWeights) -> Result<()> {
        if weights.len() != self.n_coils {
            return invalid(format!(
                "weight count {} does not match channel count {}",
                weights.len(),
                self.n_coils
            ));
        }
        Ok(())
    }

    /// Combined field on the masked voxels, in mask order.
    pub fn combine(&self, weights: &ShimWeights) -> Vec<Complex64> {
        let b = weights.values();
        self.rows
            .chunks_exact(self.n_coils)
            .map(|row| dot(row, b))
            .collect()
    }

    /// `Σ (|s_v| − m_v)²` over the mask.
    pub fn residual_sum(&self, weights: &ShimWeights) -> f64 {
        let b = weights.values();
        self.rows
            .chunks_exact(self.n_coils)
            .zip(&self.target)
            .map(|(row, &m)| {
                let r = dot(row, b).norm() - m;
                r * r
            })
            .sum()
    }

    pub fn objective(&self, weights: &ShimWeights, params: &ObjectiveParams) -> f64 {
        self.residual_sum(weights) + params.lambda * weights.norm_sqr()
    }

    pub fn rmse_percent(&self, weights: &ShimWeights) -> f64 {
        rmse_from_residual_sum(self.residual_sum(weights), self.n_voxels())
    }

    /// Objective value and its real gradient `2·[Re g, Im g]`, where
    /// `g = Σ (r_v − m_v)·(s_v / max(r_v, ε))·conj(A_vc) + λ b_c`.
    pub fn objective_and_gradient(
        &self,
        weights: &ShimWeights,
        params: &ObjectiveParams,
    ) -> (f64, Vec<f64>) {
        let b = weights.values();
        let c = self.n_coils;
        let mut g = vec![Complex64::new(0.0, 0.0); c];
        let mut f = 0.0;
        for (row, &m) in self.rows.chunks_exact(c).zip(&self.target) {
            let s = dot(row, b);
            let r = s.norm();
            let resid = r - m;
            f += resid * resid;
            let coef = s * (resid / r.max(params.epsilon_mag));
            for (gk, a) in g.iter_mut().zip(row) {
                *gk += coef * a.conj();
            }
        }
        f += params.lambda * weights.norm_sqr();
        let mut grad = vec![0.0; 2 * c];
        for k in 0..c {
            let gk = g[k] + b[k] * params.lambda;
            grad[k] = 2.0 * gk.re;
            grad[c + k] = 2.0 * gk.im;
        }
        (f, grad)
    }
}

/// Converts a residual sum of squares into RMSE in percent of target.
pub fn rmse_from_residual_sum(residual_sum: f64, n_voxels: usize) -> f64 {
    100.0 * (residual_sum / n_voxels as f64).sqrt()
}

#[inline]
fn dot(row: &[Complex64], b: &[Complex64]) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for (a, w) in row.iter().zip(b) {
        acc += a * w;
    }
    acc
}

fn check_weights(field: &MultiChannelField, weights: &ShimWeights) -> Result<()> {
    if weights.len() != field.n_channels() {
        return invalid(format!(
            "weight count {} does not match channel count {}",
            weights.len(),
            field.n_channels()
        ));
    }
    Ok(())
}

fn check_mask(field: &MultiChannelField, mask: &Mask) -> Result<()> {
    if mask.n() != field.n() {
        return invalid(format!(
            "mask grid {} does not match field grid {}",
            mask.n(),
            field.n()
        ));
    }
    Ok(())
}
