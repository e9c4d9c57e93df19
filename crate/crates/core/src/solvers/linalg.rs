#![allow(clippy::needless_range_loop)]

//! Small dense Hermitian solves for the least-squares step.

use num_complex::Complex64;

use crate::error::{invalid, Result, ShimError};
use crate::field::{Mask, MultiChannelField, TargetMap};
use crate::objective::{MaskedSystem, ShimWeights};

/// Relative pivot floor below which the normal matrix is treated as singular.
const PIVOT_RTOL: f64 = 1e-12;

/// Cholesky factor `L` of a Hermitian positive-definite `n×n` matrix, row-major.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<Complex64>,
}

impl Cholesky {
    pub fn factor(a: &[Complex64], n: usize) -> Result<Self> {
        let max_diag = (0..n).map(|i| a[i * n + i].re.abs()).fold(0.0, f64::max);
        let floor = PIVOT_RTOL * max_diag.max(f64::MIN_POSITIVE);
        let mut l = vec![Complex64::new(0.0, 0.0); n * n];
        for j in 0..n {
            let mut d = a[j * n + j].re;
            for k in 0..j {
                d -= l[j * n + k].norm_sqr();
            }
            if !(d > floor) {
                return Err(ShimError::RankDeficient { column: j, pivot: d });
            }
            let djj = d.sqrt();
            l[j * n + j] = Complex64::new(djj, 0.0);
            for i in j + 1..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k].conj();
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, l })
    }

    /// Solves `L Lᴴ x = rhs`.
    pub fn solve(&self, rhs: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l[i * n + k] * y[k];
            }
            y[i] = s / self.l[i * n + i].re;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l[k * n + i].conj() * y[k];
            }
            y[i] = s / self.l[i * n + i].re;
        }
        y
    }
}

/// `AᴴWA + λI` over the masked rows, row-major `C×C`.
pub fn normal_matrix(sys: &MaskedSystem, lambda: f64) -> Vec<Complex64> {
    let c = sys.n_coils();
    let mut g = vec![Complex64::new(0.0, 0.0); c * c];
    for v in 0..sys.n_voxels() {
        let row = sys.row(v);
        for i in 0..c {
            let ai = row[i].conj();
            for j in i..c {
                g[i * c + j] += ai * row[j];
            }
        }
    }
    for i in 0..c {
        for j in 0..i {
            g[i * c + j] = g[j * c + i].conj();
        }
        g[i * c + i] = Complex64::new(g[i * c + i].re + lambda, 0.0);
    }
    g
}

/// `AᴴWz` for a phaseful target `z` given in mask order.
pub fn projected_rhs(sys: &MaskedSystem, z: &[Complex64]) -> Vec<Complex64> {
    let c = sys.n_coils();
    let mut rhs = vec![Complex64::new(0.0, 0.0); c];
    for (v, zv) in z.iter().enumerate() {
        for (r, a) in rhs.iter_mut().zip(sys.row(v)) {
            *r += a.conj() * zv;
        }
    }
    rhs
}

/// Solves `(AᴴWA + λI) b = AᴴWz` for a complex target grid `z` (full `N×N`).
pub fn solve_regularized_ls(
    field: &MultiChannelField,
    mask: &Mask,
    phaseful_target: &[Complex64],
    lambda: f64,
) -> Result<ShimWeights> {
    let n = field.n();
    if phaseful_target.len() != n * n {
        return invalid(format!(
            "phaseful target needs {} samples, got {}",
            n * n,
            phaseful_target.len()
        ));
    }
    if !(lambda >= 0.0) {
        return invalid(format!("lambda must be >= 0, got {lambda}"));
    }
    let sys = MaskedSystem::new(field, mask, &TargetMap::uniform(n, 0.0))?;
    let z: Vec<Complex64> = mask.indices().iter().map(|&v| phaseful_target[v]).collect();
    let chol = Cholesky::factor(&normal_matrix(&sys, lambda), sys.n_coils())?;
    ShimWeights::new(chol.solve(&projected_rhs(&sys, &z)))
}
