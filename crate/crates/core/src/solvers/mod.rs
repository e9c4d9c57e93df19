//! Classical shimming solvers.
//!
//! * [`mls_solve`]: variable exchange for magnitude least squares.
//! * [`adam_solve`] / [`restart_search`]: Adam on the objective gradient,
//!   optionally from many random starts.
//! * [`brute_force_phase_search`]: exhaustive phase-only search used as a
//!   test oracle.

mod adam;
pub mod linalg;
mod mls;
mod search;

use serde::{Deserialize, Serialize};

use crate::objective::ShimWeights;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use linalg::solve_regularized_ls;
pub use mls::{mls_solve, MlsOptions};
pub use search::{
    adam_solve, brute_force_phase_search, restart_init, restart_search, AdamOptions,
    RestartOptions, BRUTE_FORCE_BUDGET,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mls,
    Adam,
    AdamRestart,
    BruteForce,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mls => "mls",
            Method::Adam => "adam",
            Method::AdamRestart => "adam_restart",
            Method::BruteForce => "brute_force",
        }
    }
}

/// Outcome of one solve. Serializes to flat JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: Method,
    pub final_weights: ShimWeights,
    pub final_rmse_percent: f64,
    pub final_objective: f64,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub converged: bool,
    pub restarts_used: Option<usize>,
    /// Best RMSE of each restart, in restart order (restart search only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub restart_rmse_percent: Vec<f64>,
}

impl SolveReport {
    pub fn trace_is_monotone(&self) -> bool {
        self.objective_trace.windows(2).all(|w| w[1] <= w[0])
    }

    /// Equality on everything except wall time.
    pub fn same_result(&self, other: &SolveReport) -> bool {
        let mut a = self.clone();
        a.wall_time_s = other.wall_time_s;
        &a == other
    }
}
