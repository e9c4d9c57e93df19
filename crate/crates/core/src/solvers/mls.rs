use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::linalg::{normal_matrix, projected_rhs, Cholesky};
use super::{Method, SolveReport};
use crate::error::Result;
use crate::field::SliceRecord;
use crate::objective::{quadrature_weights, MaskedSystem, ObjectiveParams, ShimWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlsOptions {
    pub max_iter: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
    /// Starting weights; quadrature mode when absent.
    pub init: Option<ShimWeights>,
}

impl Default for MlsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            init: None,
        }
    }
}

/// Variable exchange: alternate `z_v = m_v·exp(i·arg s_v)` with the regularized
/// least-squares fit of `A b` to `z`.
///
/// The objective after every phase update is non-increasing. An update that
/// would raise it (floating-point noise at the fixed point) ends the solve
/// with the previous weights.
pub fn mls_solve(
    record: &SliceRecord,
    params: &ObjectiveParams,
    opts: &MlsOptions,
) -> Result<SolveReport> {
    let start = Instant::now();
    params.validate()?;
    let sys = MaskedSystem::new(&record.field, &record.mask, &record.target)?;
    let mut b = opts
        .init
        .clone()
        .unwrap_or_else(|| quadrature_weights(record.n_coils()));
    sys.check_weights(&b)?;
    let chol = Cholesky::factor(&normal_matrix(&sys, params.lambda), sys.n_coils())?;

    let mut f = sys.objective(&b, params);
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut converged = false;
    let mut z = vec![Complex64::new(0.0, 0.0); sys.n_voxels()];
    while iterations < opts.max_iter {
        iterations += 1;
        for ((zv, s), &m) in z.iter_mut().zip(sys.combine(&b)).zip(sys.target()) {
            let r = s.norm();
            // arg(0) := 0
            *zv = if r > 0.0 { s * (m / r) } else { Complex64::new(m, 0.0) };
        }
        let next = ShimWeights::new(chol.solve(&projected_rhs(&sys, &z)))?;
        let f_next = sys.objective(&next, params);
        if f_next > f {
            converged = true;
            break;
        }
        let decrease = (f - f_next) / f.max(f64::MIN_POSITIVE);
        trace.push(f_next);
        b = next;
        f = f_next;
        if decrease < opts.tol {
            converged = true;
            break;
        }
    }

    Ok(SolveReport {
        method: Method::Mls,
        final_rmse_percent: sys.rmse_percent(&b),
        final_objective: f,
        final_weights: b,
        objective_trace: trace,
        iterations,
        wall_time_s: start.elapsed().as_secs_f64(),
        converged,
        restarts_used: None,
        restart_rmse_percent: Vec::new(),
    })
}
