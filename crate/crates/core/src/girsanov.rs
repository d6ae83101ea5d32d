//! Per-path log Radon-Nikodym derivatives against the average-drift measure.
//!
//! All quantities live in log space. Batches must be simulated under the
//! ensemble's average drift, and the increments stored in the batch are the
//! ones the stochastic integrals run against.

use std::io::Write;

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::lagrange::EtaSolution;
use crate::linalg;
use crate::sde::{varsigma_along, DriftField, ExpertEnsemble, FactorCache, PathBatch};
use crate::stats::{effective_sample_size, fmt17, log_mean_exp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogRnKind {
    Candidate,
    TargetUnnormalised,
    BarycentreUnnormalised,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRnBatch {
    pub values: Vec<f64>,
    pub kind: LogRnKind,
    /// Log-mean-exp of `values` over the batch, for the self-normalised kinds.
    pub log_normaliser: Option<f64>,
}

impl LogRnBatch {
    fn self_normalised(values: Vec<f64>, kind: LogRnKind) -> Self {
        let log_normaliser = Some(log_mean_exp(&values));
        Self {
            values,
            kind,
            log_normaliser,
        }
    }

    /// `values − log_normaliser` (or the raw values when there is none).
    pub fn normalised_values(&self) -> Vec<f64> {
        let c = self.log_normaliser.unwrap_or(0.0);
        self.values.iter().map(|v| v - c).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV `path,log_rn` with normalised values.
    pub fn write_csv<W: Write>(&self, mut w: W, path_offset: usize) -> Result<()> {
        writeln!(w, "path,log_rn")?;
        for (m, v) in self.normalised_values().iter().enumerate() {
            writeln!(w, "{},{}", m + path_offset, fmt17(*v))?;
        }
        Ok(())
    }
}

/// Self-normalised importance weights with their effective sample size.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    pub weights: Vec<f64>,
    pub ess: f64,
}

fn require_average_drift(ensemble: &ExpertEnsemble, batch: &PathBatch) -> Result<()> {
    if !batch.generating_drift().same_as(ensemble.average_drift()) {
        return Err(Error::invalid(format!(
            "batch must be simulated under the average drift, found `{}`",
            batch.generating_drift().label()
        )));
    }
    if ensemble.dim() != batch.dim() {
        return Err(Error::invalid("ensemble and batch dimensions differ"));
    }
    Ok(())
}

/// `λ̄ = σ^{-1}(μ̄ − θ)` written into `lambda`; returns the node's log-RN term
/// `−½|λ̄|²Δt − λ̄ᵀΔW`.
#[inline]
pub(crate) fn candidate_node_term(
    l: &[f64],
    mubar: ArrayView1<f64>,
    theta: ArrayView1<f64>,
    dw: ArrayView1<f64>,
    dt: f64,
    lambda: &mut [f64],
) -> Result<f64> {
    let d = lambda.len();
    for j in 0..d {
        lambda[j] = mubar[j] - theta[j];
    }
    linalg::solve_lower_in_place(l, d, lambda)?;
    let mut sq = 0.0;
    let mut cross = 0.0;
    for j in 0..d {
        sq += lambda[j] * lambda[j];
        cross += lambda[j] * dw[j];
    }
    Ok(-0.5 * sq * dt - cross)
}

/// `log dQ[θ]/dQ[μ̄]` per path:
/// `−½ Σ_i |λ̄_{t_i}|² Δt − Σ_i λ̄_{t_i}ᵀ ΔW_{t_{i+1}}`.
pub fn log_rn_candidate(theta: &DriftField, ensemble: &ExpertEnsemble, batch: &PathBatch) -> Result<LogRnBatch> {
    require_average_drift(ensemble, batch)?;
    if theta.dim() != batch.dim() {
        return Err(Error::invalid("drift and batch dimensions differ"));
    }
    let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
    let dt = batch.grid().dt();
    let mut values = vec![0.0; m];
    let mut theta_vals = Array2::zeros((m, d));
    let mut factors = FactorCache::new(batch.vol());
    let mut lambda = vec![0.0; d];
    for i in 0..n {
        let t = batch.grid().t(i);
        let states = batch.states_at(i);
        theta.eval_batch(t, states, theta_vals.view_mut())?;
        factors.load(t, states)?;
        for (p, v) in values.iter_mut().enumerate() {
            let l = factors.row(p);
            *v += candidate_node_term(
                l,
                batch.drift_values().slice(s![p, i, ..]),
                theta_vals.row(p),
                batch.increments().slice(s![p, i, ..]),
                dt,
                &mut lambda,
            )?;
        }
    }
    Ok(LogRnBatch {
        values,
        kind: LogRnKind::Candidate,
        log_normaliser: None,
    })
}

/// Unnormalised log barycentre density `−Σ_i ς(t_i, X_{t_i}) Δt` per path.
pub fn log_rn_barycentre_unnormalised(ensemble: &ExpertEnsemble, batch: &PathBatch) -> Result<LogRnBatch> {
    require_average_drift(ensemble, batch)?;
    let dt = batch.grid().dt();
    let vs = varsigma_along(ensemble, batch)?;
    let values = vs.rows().into_iter().map(|r| -r.sum() * dt).collect();
    Ok(LogRnBatch::self_normalised(values, LogRnKind::BarycentreUnnormalised))
}

/// The constraint tilt `−Σ_i η₀·g(t_i, X_{t_i}) Δt − η₁·f(X_{t_N})` per path.
pub fn constraint_tilt(cs: &ConstraintSet, eta0: &[f64], eta1: &[f64], batch: &PathBatch) -> Result<Vec<f64>> {
    check_eta_shape(cs, eta0, eta1)?;
    let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
    let dt = batch.grid().dt();
    let rate = cs.running_rate_along(eta0, batch)?;
    let mut x = vec![0.0; d];
    (0..m)
        .map(|p| {
            for j in 0..d {
                x[j] = batch.paths()[[p, n, j]];
            }
            Ok(-rate.row(p).sum() * dt - cs.terminal_tilt(eta1, &x)?)
        })
        .collect()
}

fn check_eta_shape(cs: &ConstraintSet, eta0: &[f64], eta1: &[f64]) -> Result<()> {
    if eta0.len() != cs.num_running() || eta1.len() != cs.num_terminal() {
        return Err(Error::invalid(format!(
            "multipliers ({}, {}) do not match constraints ({}, {})",
            eta0.len(),
            eta1.len(),
            cs.num_running(),
            cs.num_terminal()
        )));
    }
    Ok(())
}

/// Unnormalised log optimal density
/// `−Σ_i (ς + η₀·g)(t_i, X_{t_i}) Δt − η₁·f(X_{t_N})`, with the batch
/// log-mean-exp as normaliser.
pub fn log_rn_target_unnormalised(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    batch: &PathBatch,
) -> Result<LogRnBatch> {
    log_rn_target_with(ensemble, cs, &eta.eta0, &eta.eta1, batch)
}

pub fn log_rn_target_with(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta0: &[f64],
    eta1: &[f64],
    batch: &PathBatch,
) -> Result<LogRnBatch> {
    let bary = log_rn_barycentre_unnormalised(ensemble, batch)?;
    let tilt = constraint_tilt(cs, eta0, eta1, batch)?;
    let values = bary.values.iter().zip(&tilt).map(|(b, c)| b + c).collect();
    Ok(LogRnBatch::self_normalised(values, LogRnKind::TargetUnnormalised))
}

/// `w_m = exp(v_m − log-mean-exp(v))`, so that `mean(w) = 1`.
pub fn self_normalised_weights(lrn: &LogRnBatch) -> Result<ImportanceWeights> {
    self_normalise_values(&lrn.values)
}

pub fn self_normalise_values(values: &[f64]) -> Result<ImportanceWeights> {
    if values.is_empty() {
        return Err(Error::DegenerateWeights("empty batch".into()));
    }
    if values.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::DegenerateWeights("non-finite log weight".into()));
    }
    let c = log_mean_exp(values);
    if c == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights("every log weight is -inf".into()));
    }
    let weights: Vec<f64> = values.iter().map(|v| (v - c).exp()).collect();
    let ess = effective_sample_size(&weights);
    Ok(ImportanceWeights { weights, ess })
}

/// CSV `path,log_rn_candidate,log_rn_target` for scatter plots.
pub fn write_scatter_csv<W: Write>(
    mut w: W,
    candidate: &LogRnBatch,
    target: &LogRnBatch,
    path_offset: usize,
) -> Result<()> {
    if candidate.len() != target.len() {
        return Err(Error::invalid("scatter series have different lengths"));
    }
    writeln!(w, "path,log_rn_candidate,log_rn_target")?;
    for (m, (a, b)) in candidate
        .normalised_values()
        .iter()
        .zip(target.normalised_values())
        .enumerate()
    {
        writeln!(w, "{},{},{}", m + path_offset, fmt17(*a), fmt17(b))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::TerminalConstraint;
    use crate::sde::{build_time_grid, simulate_paths, VolatilityField};

    fn one_expert() -> ExpertEnsemble {
        let zero = DriftField::constant(vec![0.0], "zero");
        ExpertEnsemble::new(vec![zero], VolatilityField::scalar(1.0).unwrap(), vec![1.0], vec![0.0]).unwrap()
    }

    #[test]
    fn average_drift_has_zero_log_rn() {
        let e = one_expert();
        let grid = build_time_grid(1.0, 20).unwrap();
        let b = simulate_paths(e.average_drift(), e.vol(), &grid, 50, &[0.0], 2).unwrap();
        let lrn = log_rn_candidate(e.average_drift(), &e, &b).unwrap();
        assert!(lrn.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_shift_closed_form() {
        let e = one_expert();
        let c = 0.7;
        let grid = build_time_grid(1.0, 40).unwrap();
        let b = simulate_paths(e.average_drift(), e.vol(), &grid, 30, &[0.0], 3).unwrap();
        let shifted = DriftField::constant(vec![c], "shift");
        let lrn = log_rn_candidate(&shifted, &e, &b).unwrap();
        for (m, v) in lrn.values.iter().enumerate() {
            let wt = b.paths()[[m, 40, 0]];
            // λ̄ = −c, so the density is exp(−½c²T + c W_T).
            assert!((v - (-0.5 * c * c + c * wt)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_batches_from_other_drifts() {
        let e = one_expert();
        let grid = build_time_grid(1.0, 5).unwrap();
        let other = DriftField::constant(vec![0.0], "other zero");
        let b = simulate_paths(&other, e.vol(), &grid, 5, &[0.0], 3).unwrap();
        assert!(log_rn_candidate(&other, &e, &b).is_err());
    }

    #[test]
    fn normalised_weights_examples() {
        let w = self_normalise_values(&[0.3; 5]).unwrap();
        assert!(w.weights.iter().all(|x| (x - 1.0).abs() < 1e-15));
        assert!((w.ess - 5.0).abs() < 1e-12);
        let w = self_normalise_values(&[0.2, 0.2 + 3f64.ln()]).unwrap();
        assert!((w.weights[0] - 0.5).abs() < 1e-14 && (w.weights[1] - 1.5).abs() < 1e-14);
        assert!(matches!(
            self_normalise_values(&[f64::NEG_INFINITY; 3]),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn target_with_identical_experts_and_no_tilt_is_flat() {
        let a = DriftField::constant(vec![0.4], "a");
        let e = ExpertEnsemble::new(
            vec![a.clone(), a],
            VolatilityField::scalar(1.0).unwrap(),
            vec![0.5, 0.5],
            vec![0.0],
        )
        .unwrap();
        let grid = build_time_grid(1.0, 10).unwrap();
        let b = simulate_paths(e.average_drift(), e.vol(), &grid, 20, &[0.0], 3).unwrap();
        let cs = ConstraintSet::new(vec![], vec![TerminalConstraint::new("x", |x| x[0])]);
        let lrn = log_rn_target_with(&e, &cs, &[], &[0.0], &b).unwrap();
        assert!(lrn.values.iter().all(|&v| v == 0.0));
        assert_eq!(lrn.log_normaliser, Some(0.0));
        assert!(log_rn_target_with(&e, &cs, &[1.0], &[0.0], &b).is_err());
    }
}
