//! Learning the optimal drift by matching Radon-Nikodym derivatives.
//!
//! Each iteration simulates a fresh batch under the average drift and
//! minimises the batch mean of `(log dQ[θ]/dQ[μ̄] − log dQ*/dQ[μ̄])²`, where
//! the target is normalised on the same batch.

use std::io::Write;
use std::sync::Arc;

use log::info;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::girsanov::{candidate_node_term, log_rn_target_unnormalised};
use crate::lagrange::EtaSolution;
use crate::linalg;
use crate::mlp::{adam_step, cosine_lr, AdamState, FeedforwardNet};
use crate::rng::derive_seed;
use crate::sde::{
    build_time_grid, simulate_paths, DriftField, DriftFn, DriftKind, ExpertEnsemble, FactorCache, PathBatch,
};
use crate::stats::fmt17;

/// How network outputs become a drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftParameterisation {
    /// `θ(t, x) = net(t, x)`.
    Direct,
    /// `θ(t, x) = μ̄(t, x) + net(t, x)`.
    AverageOffset,
}

/// A drift network evaluated on `(t, x)` rows, optionally on top of a base drift.
pub struct NeuralDrift {
    net: Arc<FeedforwardNet>,
    base: Option<DriftField>,
}

impl DriftFn for NeuralDrift {
    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn eval_batch(&self, t: f64, states: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) -> Result<()> {
        let inputs = time_state_inputs(t, states);
        let y = self.net.forward(inputs.view())?;
        match &self.base {
            Some(b) => {
                b.eval_batch(t, states, out.view_mut())?;
                out += &y;
            }
            None => out.assign(&y),
        }
        Ok(())
    }
}

pub(crate) fn time_state_inputs(t: f64, states: ArrayView2<f64>) -> Array2<f64> {
    let (m, d) = states.dim();
    let mut inputs = Array2::zeros((m, d + 1));
    inputs.column_mut(0).fill(t);
    inputs.slice_mut(s![.., 1..]).assign(&states);
    inputs
}

/// Wraps a drift-shaped network as a [`DriftField`].
pub fn neural_drift(
    net: FeedforwardNet,
    ensemble: &ExpertEnsemble,
    parameterisation: DriftParameterisation,
    label: impl Into<String>,
) -> Result<DriftField> {
    check_drift_net(&net, ensemble.dim())?;
    let base = match parameterisation {
        DriftParameterisation::Direct => None,
        DriftParameterisation::AverageOffset => Some(ensemble.average_drift().clone()),
    };
    Ok(DriftField::new(
        NeuralDrift {
            net: Arc::new(net),
            base,
        },
        DriftKind::Neural,
        label,
    ))
}

fn check_drift_net(net: &FeedforwardNet, d: usize) -> Result<()> {
    if net.input_dim() != d + 1 || net.output_dim() != d {
        return Err(Error::invalid(format!(
            "drift network must map {} inputs to {d} outputs, has widths {:?}",
            d + 1,
            net.widths()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftLearnerConfig {
    pub num_paths: usize,
    pub horizon: f64,
    pub steps: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Cosine schedule: the learning rate at the last iteration is
    /// `lr · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub parameterisation: DriftParameterisation,
    /// Paths per gradient work unit.
    pub chunk_paths: usize,
}

impl Default for DriftLearnerConfig {
    fn default() -> Self {
        Self {
            num_paths: 512,
            horizon: 1.0,
            steps: 100,
            iterations: 2000,
            lr: 1e-3,
            final_lr_fraction: 1.0,
            seed: 0,
            parameterisation: DriftParameterisation::AverageOffset,
            chunk_paths: 32,
        }
    }
}

pub struct TrainedDrift {
    pub net: FeedforwardNet,
    pub drift: DriftField,
    pub losses: Vec<f64>,
    pub parameterisation: DriftParameterisation,
}

struct ChunkGrad {
    grad: Vec<f64>,
    sq_err: f64,
}

/// Loss and its parameter gradient on one batch.
fn batch_loss_gradient(
    net: &FeedforwardNet,
    param: DriftParameterisation,
    batch: &PathBatch,
    target: &[f64],
    chunk: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
    let dt = batch.grid().dt();
    let starts: Vec<usize> = (0..m).step_by(chunk.max(1)).collect();
    let parts: Vec<Result<ChunkGrad>> = starts
        .par_iter()
        .map(|&p0| {
            let p1 = (p0 + chunk).min(m);
            let rows = (p1 - p0) * n;
            let mut inputs = Array2::zeros((rows, d + 1));
            for p in p0..p1 {
                for i in 0..n {
                    let r = (p - p0) * n + i;
                    inputs[[r, 0]] = batch.grid().t(i);
                    for j in 0..d {
                        inputs[[r, 1 + j]] = batch.paths()[[p, i, j]];
                    }
                }
            }
            let cache = net.forward_cached(inputs.view())?;
            let mut theta = cache.output().clone();
            if param == DriftParameterisation::AverageOffset {
                for p in p0..p1 {
                    for i in 0..n {
                        let r = (p - p0) * n + i;
                        for j in 0..d {
                            theta[[r, j]] += batch.drift_values()[[p, i, j]];
                        }
                    }
                }
            }
            let mut factors = FactorCache::new(batch.vol());
            factors.load_paths(batch, p0..p1)?;
            let mut lambda = vec![0.0; d];
            let mut upstream = Array2::zeros((rows, d));
            let mut sq_err = 0.0;
            for p in p0..p1 {
                let mut ell = 0.0;
                for i in 0..n {
                    let r = (p - p0) * n + i;
                    let l = factors.row(r);
                    ell += candidate_node_term(
                        l,
                        batch.drift_values().slice(s![p, i, ..]),
                        theta.row(r),
                        batch.increments().slice(s![p, i, ..]),
                        dt,
                        &mut lambda,
                    )?;
                    // ∂ℓ/∂θ = σ^{-T}(λ̄Δt + ΔW), stored before the residual is known.
                    for j in 0..d {
                        lambda[j] = lambda[j] * dt + batch.increments()[[p, i, j]];
                    }
                    linalg::solve_lower_transpose_in_place(l, d, &mut lambda)?;
                    for j in 0..d {
                        upstream[[r, j]] = lambda[j];
                    }
                }
                let e = ell - target[p];
                sq_err += e * e;
                let scale = 2.0 * e / m as f64;
                upstream.slice_mut(s![(p - p0) * n..(p - p0 + 1) * n, ..]).mapv_inplace(|u| u * scale);
            }
            let grad = if want_grad {
                net.param_gradient(&cache, upstream.view())?
            } else {
                Vec::new()
            };
            Ok(ChunkGrad { grad, sq_err })
        })
        .collect();
    let mut total = vec![0.0; if want_grad { net.num_params() } else { 0 }];
    let mut sq = 0.0;
    for part in parts {
        let part = part?;
        sq += part.sq_err;
        total.iter_mut().zip(&part.grad).for_each(|(a, b)| *a += b);
    }
    Ok((sq / m as f64, total))
}

/// Batch loss of a drift network against the normalised target log-RN.
pub fn drift_loss(
    net: &FeedforwardNet,
    parameterisation: DriftParameterisation,
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    batch: &PathBatch,
) -> Result<f64> {
    check_drift_net(net, ensemble.dim())?;
    let target = log_rn_target_unnormalised(ensemble, cs, eta, batch)?.normalised_values();
    Ok(batch_loss_gradient(net, parameterisation, batch, &target, 32, false)?.0)
}

pub fn train_drift(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    net: FeedforwardNet,
    cfg: &DriftLearnerConfig,
) -> Result<TrainedDrift> {
    train_drift_monitored(ensemble, cs, eta, net, cfg, &mut |_, _| Ok(()))
}

/// [`train_drift`] calling `monitor(iter, net)` after every update.
pub fn train_drift_monitored(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    mut net: FeedforwardNet,
    cfg: &DriftLearnerConfig,
    monitor: &mut dyn FnMut(usize, &FeedforwardNet) -> Result<()>,
) -> Result<TrainedDrift> {
    if !eta.converged {
        return Err(Error::invalid("multipliers did not converge; refusing to train"));
    }
    if cfg.num_paths == 0 || cfg.iterations == 0 {
        return Err(Error::invalid("training needs at least one path and one iteration"));
    }
    check_drift_net(&net, ensemble.dim())?;
    let grid = build_time_grid(cfg.horizon, cfg.steps)?;
    let mut adam = AdamState::for_net(&net, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        adam.lr = cosine_lr(cfg.lr, cfg.final_lr_fraction, iter, cfg.iterations);
        let batch = simulate_paths(
            ensemble.average_drift(),
            ensemble.vol(),
            &grid,
            cfg.num_paths,
            ensemble.x0(),
            derive_seed(cfg.seed, iter as u64),
        )?;
        let target = log_rn_target_unnormalised(ensemble, cs, eta, &batch)?.normalised_values();
        let (loss, grad) = batch_loss_gradient(&net, cfg.parameterisation, &batch, &target, cfg.chunk_paths, true)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: iter,
                reason: format!("loss is {loss}"),
            });
        }
        losses.push(loss);
        if iter % 100 == 0 || iter + 1 == cfg.iterations {
            info!("drift learner iteration {iter}: loss {loss:.6}");
        }
        adam_step(&mut net, &grad, &mut adam).map_err(|e| match e {
            Error::TrainingDiverged { reason, .. } => Error::TrainingDiverged { iteration: iter, reason },
            other => other,
        })?;
        monitor(iter, &net)?;
    }
    let drift = neural_drift(net.clone(), ensemble, cfg.parameterisation, "drift-learner")?;
    Ok(TrainedDrift {
        net,
        drift,
        losses,
        parameterisation: cfg.parameterisation,
    })
}

/// CSV `iter,loss`.
pub fn write_loss_csv<W: Write>(mut w: W, losses: &[f64]) -> Result<()> {
    writeln!(w, "iter,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{}", fmt17(*l))?;
    }
    Ok(())
}
