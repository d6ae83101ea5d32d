//! Lagrange multipliers that bind every constraint under the reweighted
//! average-drift measure.
//!
//! With base log weights `b_m = −Σ_i ς Δt` and per-path constraint values
//! `C_m` (running first, then terminal), the multipliers minimise the convex
//! potential `Φ(η) = log mean_m exp(b_m − C_m·η)`. Its negative gradient is the
//! vector of weighted constraint means and its Hessian is their weighted
//! covariance, so damped Newton with backtracking on `Φ` converges whenever
//! the constraints are jointly feasible on the batch.

use log::debug;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::constraints::{eval_constraints, ConstraintSet};
use crate::error::{Error, Result};
use crate::girsanov::{log_rn_barycentre_unnormalised, self_normalise_values};
use crate::sde::{ExpertEnsemble, PathBatch};
use crate::stats::{log_mean_exp, McEstimate};

pub const DEFAULT_TOL: f64 = 1e-3;
pub const INITIAL_ETA: f64 = 1e-3;
pub const MIN_ESS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSolution {
    pub eta0: Vec<f64>,
    pub eta1: Vec<f64>,
    /// Weighted constraint means at `η`, running first.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub ess: f64,
    pub tol: f64,
    /// Set when `η` was supplied rather than solved; residuals are then `NaN`.
    #[serde(default)]
    pub prescribed: bool,
}

impl EtaSolution {
    /// Multipliers given in closed form.
    pub fn prescribed(eta0: Vec<f64>, eta1: Vec<f64>) -> Self {
        let n = eta0.len() + eta1.len();
        Self {
            eta0,
            eta1,
            residuals: vec![f64::NAN; n],
            converged: true,
            iterations: 0,
            ess: f64::NAN,
            tol: f64::NAN,
            prescribed: true,
        }
    }

    pub fn empty() -> Self {
        Self::prescribed(vec![], vec![])
    }

    /// `(η₀, η₁)` concatenated.
    pub fn flat(&self) -> Vec<f64> {
        self.eta0.iter().chain(&self.eta1).copied().collect()
    }

    pub fn max_abs_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, r| a.max(r.abs()))
    }
}

/// Base log weights and constraint values of one batch.
#[derive(Debug, Clone)]
pub struct TiltProblem {
    pub base: Vec<f64>,
    pub values: Array2<f64>,
}

pub struct TiltState {
    pub potential: f64,
    pub residual: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub ess: f64,
    pub weights: Vec<f64>,
}

impl TiltProblem {
    pub fn from_batch(ensemble: &ExpertEnsemble, cs: &ConstraintSet, batch: &PathBatch) -> Result<Self> {
        let base = log_rn_barycentre_unnormalised(ensemble, batch)?.values;
        let values = eval_constraints(cs, batch)?;
        Ok(Self { base, values })
    }

    pub fn num_constraints(&self) -> usize {
        self.values.ncols()
    }

    fn log_weights(&self, eta: &[f64]) -> Vec<f64> {
        self.base
            .iter()
            .zip(self.values.rows())
            .map(|(b, c)| b - c.iter().zip(eta).map(|(ci, e)| ci * e).sum::<f64>())
            .collect()
    }

    pub fn potential(&self, eta: &[f64]) -> f64 {
        log_mean_exp(&self.log_weights(eta))
    }

    pub fn state(&self, eta: &[f64]) -> Result<TiltState> {
        let lw = self.log_weights(eta);
        let potential = log_mean_exp(&lw);
        let w = self_normalise_values(&lw)?;
        let m = self.base.len() as f64;
        let n = self.num_constraints();
        let mut residual = vec![0.0; n];
        for (wm, c) in w.weights.iter().zip(self.values.rows()) {
            for j in 0..n {
                residual[j] += wm * c[j];
            }
        }
        residual.iter_mut().for_each(|r| *r /= m);
        let mut covariance = DMatrix::zeros(n, n);
        for (wm, c) in w.weights.iter().zip(self.values.rows()) {
            for a in 0..n {
                let da = c[a] - residual[a];
                for b in 0..=a {
                    covariance[(a, b)] += wm * da * (c[b] - residual[b]);
                }
            }
        }
        for a in 0..n {
            for b in 0..=a {
                covariance[(a, b)] /= m;
                covariance[(b, a)] = covariance[(a, b)];
            }
        }
        Ok(TiltState {
            potential,
            residual,
            covariance,
            ess: w.ess,
            weights: w.weights,
        })
    }
}

/// Damped Newton for `η` with `|weighted mean of C| < tol` componentwise.
pub fn solve_eta(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    batch: &PathBatch,
    tol: f64,
    max_iter: usize,
) -> Result<EtaSolution> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tol must be positive, got {tol}")));
    }
    let problem = TiltProblem::from_batch(ensemble, cs, batch)?;
    solve_tilt(&problem, cs.num_running(), tol, max_iter)
}

pub fn solve_tilt(problem: &TiltProblem, num_running: usize, tol: f64, max_iter: usize) -> Result<EtaSolution> {
    let n = problem.num_constraints();
    let pack = |eta: &[f64], st: &TiltState, converged: bool, iterations: usize| EtaSolution {
        eta0: eta[..num_running].to_vec(),
        eta1: eta[num_running..].to_vec(),
        residuals: st.residual.clone(),
        converged,
        iterations,
        ess: st.ess,
        tol,
        prescribed: false,
    };
    if n == 0 {
        let st = problem.state(&[])?;
        return Ok(pack(&[], &st, true, 0));
    }
    let mut eta = vec![INITIAL_ETA; n];
    let mut st = problem.state(&eta)?;
    for iter in 0..max_iter {
        if st.ess < MIN_ESS {
            return Err(Error::IllConditioned(format!(
                "effective sample size {:.2} below {MIN_ESS} at iteration {iter}",
                st.ess
            )));
        }
        let worst = st.residual.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        debug!("eta iteration {iter}: eta={eta:?} max|r|={worst:.3e} ess={:.1}", st.ess);
        if worst < tol {
            return Ok(pack(&eta, &st, true, iter));
        }
        let chol = st.covariance.clone().cholesky().ok_or_else(|| {
            Error::IllConditioned("weighted constraint covariance is singular".into())
        })?;
        let step = chol.solve(&DVector::from_column_slice(&st.residual));
        let slope: f64 = step.iter().zip(&st.residual).map(|(d, r)| d * r).sum();
        let slack = 1e-13 * (1.0 + st.potential.abs());
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = eta.iter().zip(step.iter()).map(|(e, d)| e + alpha * d).collect();
            let phi = problem.potential(&trial);
            if phi.is_finite() && phi <= st.potential - 1e-4 * alpha * slope + slack {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some(next) => {
                eta = next;
                st = problem.state(&eta)?;
            }
            None => return Ok(pack(&eta, &st, false, iter + 1)),
        }
    }
    if st.ess < MIN_ESS {
        return Err(Error::IllConditioned(format!("effective sample size {:.2} below {MIN_ESS}", st.ess)));
    }
    let worst = st.residual.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    Ok(pack(&eta, &st, worst < tol, max_iter))
}

/// Self-normalised weighted constraint means at the given multipliers, with
/// delta-method standard errors.
pub fn weighted_constraint_means(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    batch: &PathBatch,
) -> Result<Vec<McEstimate>> {
    let problem = TiltProblem::from_batch(ensemble, cs, batch)?;
    let st = problem.state(&eta.flat())?;
    let m = problem.base.len() as f64;
    Ok((0..problem.num_constraints())
        .map(|j| {
            let mean = st.residual[j];
            let var: f64 = st
                .weights
                .iter()
                .zip(problem.values.column(j))
                .map(|(w, c)| (w / m).powi(2) * (c - mean).powi(2))
                .sum();
            McEstimate {
                mean,
                std_error: var.sqrt(),
            }
        })
        .collect())
}
