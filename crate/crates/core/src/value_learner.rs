//! Learning `ω(t, x) = E[exp(−∫_t^T (ς + η₀·g) du − η₁·f(X_T)) | X_t = x]`
//! under the average-drift measure by least-squares regression, and the
//! drift `θ = μ̄ + Σ ∇ω / ω` it implies.

use std::sync::Arc;

use log::info;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::drift_learner::time_state_inputs;
use crate::error::{Error, Result};
use crate::lagrange::EtaSolution;
use crate::mlp::{adam_step, cosine_lr, AdamState, FeedforwardNet, Head};
use crate::rng::derive_seed;
use crate::stats::log_mean_exp;
use crate::sde::{
    build_time_grid, simulate_path_range, varsigma_along, DriftField, DriftFn, DriftKind, ExpertEnsemble,
    InitialStates, PathBatch, VolatilityField,
};

/// Values of `ω` below this are treated as degenerate during drift recovery.
pub const OMEGA_FLOOR: f64 = 1e-12;

/// `log` of the regression targets, `(M, N)`: entry `(m, i)` is
/// `−Σ_{i' ≥ i} (ς + η₀·g)(t_{i'}, X_{t_{i'}}) Δt − η₁·f(X_{t_N})`.
pub fn log_omega_targets(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    batch: &PathBatch,
) -> Result<Array2<f64>> {
    if eta.eta0.len() != cs.num_running() || eta.eta1.len() != cs.num_terminal() {
        return Err(Error::invalid("multipliers do not match the constraint set"));
    }
    let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
    let dt = batch.grid().dt();
    let mut rate = varsigma_along(ensemble, batch)?;
    rate += &cs.running_rate_along(&eta.eta0, batch)?;
    let mut out = Array2::zeros((m, n));
    let mut x = vec![0.0; d];
    for p in 0..m {
        for j in 0..d {
            x[j] = batch.paths()[[p, n, j]];
        }
        let mut acc = -cs.terminal_tilt(&eta.eta1, &x)?;
        for i in (0..n).rev() {
            acc -= rate[[p, i]] * dt;
            out[[p, i]] = acc;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValueLearnerConfig {
    pub num_paths: usize,
    pub horizon: f64,
    pub steps: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Cosine schedule: the learning rate at the last iteration is
    /// `lr · final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub seed: u64,
    /// Optional box for dispersed starting states; `None` starts at `x0`.
    pub initial_box: Option<(Vec<f64>, Vec<f64>)>,
    /// Start each path at a uniformly drawn node as well as a uniform state
    /// in `initial_box`; regression terms before the start are dropped.
    pub staggered_starts: bool,
    pub chunk_paths: usize,
}

impl Default for ValueLearnerConfig {
    fn default() -> Self {
        Self {
            num_paths: 512,
            horizon: 1.0,
            steps: 100,
            iterations: 2000,
            lr: 1e-2,
            final_lr_fraction: 0.005,
            seed: 0,
            initial_box: None,
            staggered_starts: false,
            chunk_paths: 64,
        }
    }
}

/// `ω(t, x) = exp(log_scale) · net(t, x)`.
#[derive(Debug, Clone)]
pub struct OmegaModel {
    pub net: FeedforwardNet,
    pub log_scale: f64,
}

impl OmegaModel {
    pub fn new(net: FeedforwardNet, log_scale: f64) -> Result<Self> {
        if net.output_dim() != 1 || net.head() != Head::Softplus {
            return Err(Error::invalid("omega network needs a scalar softplus output"));
        }
        Ok(Self { net, log_scale })
    }

    pub fn eval_batch(&self, t: f64, states: ArrayView2<f64>) -> Result<Vec<f64>> {
        let inputs = time_state_inputs(t, states);
        let y = self.net.forward(inputs.view())?;
        let c = self.log_scale.exp();
        Ok(y.column(0).iter().map(|v| c * v).collect())
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64> {
        let states = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::invalid("state shape"))?;
        Ok(self.eval_batch(t, states)?[0])
    }
}

pub struct TrainedOmega {
    pub model: OmegaModel,
    pub losses: Vec<f64>,
}

fn batch_loss_gradient(
    net: &FeedforwardNet,
    batch: &PathBatch,
    targets: &Array2<f64>,
    first: &[usize],
    chunk: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
    let dt = batch.grid().dt();
    let starts: Vec<usize> = (0..m).step_by(chunk.max(1)).collect();
    let parts: Vec<Result<(f64, Vec<f64>)>> = starts
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
            let out = cache.output();
            let mut upstream = Array2::zeros((rows, 1));
            let mut loss = 0.0;
            for p in p0..p1 {
                for i in first[p]..n {
                    let r = (p - p0) * n + i;
                    let e = out[[r, 0]] - targets[[p, i]];
                    loss += e * e * dt;
                    upstream[[r, 0]] = 2.0 * e * dt / m as f64;
                }
            }
            let grad = if want_grad {
                net.param_gradient(&cache, upstream.view())?
            } else {
                Vec::new()
            };
            Ok((loss, grad))
        })
        .collect();
    let mut total = vec![0.0; if want_grad { net.num_params() } else { 0 }];
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss / m as f64, total))
}

/// Regression loss `mean_m Σ_i Δt (ω(t_i, X_i) − target)²` of an arbitrary
/// candidate `ω`, with targets expressed on the scale `exp(log_scale)`.
pub fn elicitability_loss(
    omega: impl Fn(f64, &[f64]) -> f64,
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    batch: &PathBatch,
) -> Result<f64> {
    let lt = log_omega_targets(ensemble, cs, eta, batch)?;
    let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
    let dt = batch.grid().dt();
    let mut x = vec![0.0; d];
    let mut loss = 0.0;
    for p in 0..m {
        for i in 0..n {
            for j in 0..d {
                x[j] = batch.paths()[[p, i, j]];
            }
            let e = omega(batch.grid().t(i), &x) - lt[[p, i]].exp();
            loss += e * e * dt;
        }
    }
    Ok(loss / m as f64)
}

/// A training batch and the first node of each path that enters the loss.
fn training_batch(ensemble: &ExpertEnsemble, cfg: &ValueLearnerConfig, iter: usize) -> Result<(PathBatch, Vec<usize>)> {
    let grid = build_time_grid(cfg.horizon, cfg.steps)?;
    let init = match (&cfg.initial_box, cfg.staggered_starts) {
        (None, _) => InitialStates::Fixed(ensemble.x0().to_vec()),
        (Some((lo, hi)), false) => InitialStates::UniformBox {
            lo: lo.clone(),
            hi: hi.clone(),
        },
        (Some((lo, hi)), true) => InitialStates::StaggeredBox {
            lo: lo.clone(),
            hi: hi.clone(),
        },
    };
    let seed = derive_seed(cfg.seed, iter as u64);
    let batch = simulate_path_range(ensemble.average_drift(), ensemble.vol(), &grid, 0..cfg.num_paths, &init, seed)?;
    let mut x = vec![0.0; ensemble.dim()];
    let first = (0..cfg.num_paths).map(|p| init.start_for(seed, p, cfg.steps, &mut x)).collect();
    Ok((batch, first))
}

pub fn train_omega(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    net: FeedforwardNet,
    cfg: &ValueLearnerConfig,
) -> Result<TrainedOmega> {
    train_omega_monitored(ensemble, cs, eta, net, cfg, &mut |_, _| Ok(()))
}

/// [`train_omega`] calling `monitor(iter, model)` after every update.
pub fn train_omega_monitored(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    mut net: FeedforwardNet,
    cfg: &ValueLearnerConfig,
    monitor: &mut dyn FnMut(usize, &OmegaModel) -> Result<()>,
) -> Result<TrainedOmega> {
    if !eta.converged {
        return Err(Error::invalid("multipliers did not converge; refusing to train"));
    }
    if cfg.num_paths == 0 || cfg.iterations == 0 {
        return Err(Error::invalid("training needs at least one path and one iteration"));
    }
    if net.input_dim() != ensemble.dim() + 1 || net.output_dim() != 1 || net.head() != Head::Softplus {
        return Err(Error::invalid(format!(
            "omega network must map {} inputs to one softplus output, has {:?} / {:?}",
            ensemble.dim() + 1,
            net.widths(),
            net.head()
        )));
    }
    if cfg.staggered_starts && cfg.initial_box.is_none() {
        return Err(Error::invalid("staggered starts need an initial box"));
    }
    if let Some((lo, hi)) = &cfg.initial_box {
        if lo.len() != ensemble.dim() || hi.len() != ensemble.dim() || lo.iter().zip(hi).any(|(a, b)| a > b) {
            return Err(Error::invalid("initial box must have lo <= hi in every component"));
        }
    }
    let mut adam = AdamState::for_net(&net, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut log_scale = None;
    for iter in 0..cfg.iterations {
        adam.lr = cosine_lr(cfg.lr, cfg.final_lr_fraction, iter, cfg.iterations);
        let (batch, first) = training_batch(ensemble, cfg, iter)?;
        let lt = log_omega_targets(ensemble, cs, eta, &batch)?;
        let c = *log_scale.get_or_insert_with(|| log_mean_exp(lt.as_slice().expect("standard layout")));
        let targets = lt.mapv(|v| (v - c).exp());
        let (loss, grad) = batch_loss_gradient(&net, &batch, &targets, &first, cfg.chunk_paths, true)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: iter,
                reason: format!("loss is {loss}"),
            });
        }
        losses.push(loss);
        if iter % 100 == 0 || iter + 1 == cfg.iterations {
            info!("value learner iteration {iter}: loss {loss:.6e}");
        }
        adam_step(&mut net, &grad, &mut adam).map_err(|e| match e {
            Error::TrainingDiverged { reason, .. } => Error::TrainingDiverged { iteration: iter, reason },
            other => other,
        })?;
        if let Some(c) = log_scale {
            monitor(iter, &OmegaModel::new(net.clone(), c)?)?;
        }
    }
    Ok(TrainedOmega {
        model: OmegaModel::new(net, log_scale.unwrap_or(0.0))?,
        losses,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    Analytic,
    /// Central differences with step `1e-4 (1 + |x|)`.
    CentralDifference,
}

struct OmegaDrift {
    model: Arc<OmegaModel>,
    average: DriftField,
    vol: VolatilityField,
    mode: GradientMode,
}

impl OmegaDrift {
    fn value_and_gradient(&self, t: f64, states: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let (m, d) = states.dim();
        match self.mode {
            GradientMode::Analytic => {
                let inputs = time_state_inputs(t, states);
                let (v, g) = self.model.net.value_and_input_gradient(inputs.view())?;
                Ok((v, g.slice(s![.., 1..]).to_owned()))
            }
            GradientMode::CentralDifference => {
                let inputs = time_state_inputs(t, states);
                let v = self.model.net.forward(inputs.view())?.column(0).to_vec();
                let mut g = Array2::zeros((m, d));
                for j in 0..d {
                    let mut up = inputs.clone();
                    let mut down = inputs.clone();
                    let mut h = vec![0.0; m];
                    for r in 0..m {
                        h[r] = 1e-4 * (1.0 + states[[r, j]].abs());
                        up[[r, 1 + j]] += h[r];
                        down[[r, 1 + j]] -= h[r];
                    }
                    let fu = self.model.net.forward(up.view())?;
                    let fd = self.model.net.forward(down.view())?;
                    for r in 0..m {
                        g[[r, j]] = (fu[[r, 0]] - fd[[r, 0]]) / (2.0 * h[r]);
                    }
                }
                Ok((v, g))
            }
        }
    }
}

impl DriftFn for OmegaDrift {
    fn dim(&self) -> usize {
        self.average.dim()
    }

    fn eval_batch(&self, t: f64, states: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) -> Result<()> {
        let d = self.dim();
        self.average.eval_batch(t, states, out.view_mut())?;
        let (v, g) = self.value_and_gradient(t, states)?;
        let scale = self.model.log_scale.exp();
        let mut x = vec![0.0; d];
        let mut cov = vec![0.0; d * d];
        for (r, &vr) in v.iter().enumerate() {
            if !(vr * scale >= OMEGA_FLOOR) {
                return Err(Error::DegenerateOmega { t, value: vr * scale });
            }
            x.iter_mut().zip(states.row(r).iter()).for_each(|(a, b)| *a = *b);
            let l = match self.vol.constant_factor() {
                Some(c) => c.to_vec(),
                None => self.vol.factor(t, &x)?,
            };
            crate::linalg::gram_lower(&l, d, &mut cov);
            for a in 0..d {
                let mut s = 0.0;
                for b in 0..d {
                    s += cov[a * d + b] * g[[r, b]];
                }
                out[[r, a]] += s / vr;
            }
        }
        Ok(())
    }
}

/// `θ(t, x) = μ̄(t, x) + Σ(t, x) ∇ₓω(t, x) / ω(t, x)`.
pub fn drift_from_omega(model: &OmegaModel, ensemble: &ExpertEnsemble) -> Result<DriftField> {
    drift_from_omega_with(model, ensemble, GradientMode::Analytic)
}

pub fn drift_from_omega_with(model: &OmegaModel, ensemble: &ExpertEnsemble, mode: GradientMode) -> Result<DriftField> {
    if model.net.input_dim() != ensemble.dim() + 1 {
        return Err(Error::invalid("omega network input does not match the ensemble dimension"));
    }
    Ok(DriftField::new(
        OmegaDrift {
            model: Arc::new(model.clone()),
            average: ensemble.average_drift().clone(),
            vol: ensemble.vol().clone(),
            mode,
        },
        DriftKind::Neural,
        "value-learner",
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::TerminalConstraint;
    use crate::mlp::Activation;
    use crate::sde::simulate_paths;

    fn zero_expert() -> ExpertEnsemble {
        ExpertEnsemble::new(
            vec![DriftField::constant(vec![0.0], "zero")],
            VolatilityField::scalar(1.0).unwrap(),
            vec![1.0],
            vec![0.0],
        )
        .unwrap()
    }

    #[test]
    fn targets_are_reverse_cumulative_sums() {
        let e = zero_expert();
        let cs = ConstraintSet::new(
            vec![crate::constraints::RunningConstraint::new("one", |_, _| 1.0)],
            vec![TerminalConstraint::new("x", |x| x[0])],
        );
        let eta = EtaSolution::prescribed(vec![2.0], vec![0.5]);
        let grid = build_time_grid(1.0, 4).unwrap();
        let batch = simulate_paths(e.average_drift(), e.vol(), &grid, 3, &[0.0], 1).unwrap();
        let lt = log_omega_targets(&e, &cs, &eta, &batch).unwrap();
        for p in 0..3 {
            let xt = batch.paths()[[p, 4, 0]];
            for i in 0..4 {
                let expect = -2.0 * (4 - i) as f64 * 0.25 - 0.5 * xt;
                assert!((lt[[p, i]] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn constant_omega_recovers_average_drift() {
        let e = ExpertEnsemble::new(
            vec![DriftField::scalar("lin", |t, x| t - x)],
            VolatilityField::scalar(1.3).unwrap(),
            vec![1.0],
            vec![0.0],
        )
        .unwrap();
        let mut net = FeedforwardNet::zeros(&[2, 4, 1], Activation::Silu, Head::Softplus).unwrap();
        net.shift_output_bias(&[1.0]).unwrap();
        let model = OmegaModel::new(net, 0.0).unwrap();
        let theta = drift_from_omega(&model, &e).unwrap();
        assert_eq!(theta.eval(0.3, &[0.7]).unwrap(), vec![0.3 - 0.7]);
    }

    #[test]
    fn recovered_drift_ignores_omega_scale() {
        let e = zero_expert();
        let net = FeedforwardNet::new(&[2, 6, 1], Activation::Tanh, Head::Softplus, 3).unwrap();
        let a = drift_from_omega(&OmegaModel::new(net.clone(), 0.0).unwrap(), &e).unwrap();
        let b = drift_from_omega(&OmegaModel::new(net, 3.0).unwrap(), &e).unwrap();
        let (va, vb) = (a.eval(0.2, &[0.4]).unwrap()[0], b.eval(0.2, &[0.4]).unwrap()[0]);
        assert!((va - vb).abs() < 1e-14);
    }

    #[test]
    fn analytic_and_central_difference_agree() {
        let e = zero_expert();
        let net = FeedforwardNet::new(&[2, 8, 8, 1], Activation::Silu, Head::Softplus, 12).unwrap();
        let model = OmegaModel::new(net, 0.0).unwrap();
        let a = drift_from_omega_with(&model, &e, GradientMode::Analytic).unwrap();
        let b = drift_from_omega_with(&model, &e, GradientMode::CentralDifference).unwrap();
        for x in [-1.0, 0.0, 0.5, 2.0] {
            let (va, vb) = (a.eval(0.5, &[x]).unwrap()[0], b.eval(0.5, &[x]).unwrap()[0]);
            assert!((va - vb).abs() < 1e-6 * (1.0 + va.abs()));
        }
    }

    #[test]
    fn staggered_loss_skips_nodes_before_the_start() {
        let e = zero_expert();
        let cfg = ValueLearnerConfig {
            num_paths: 20,
            steps: 10,
            initial_box: Some((vec![-1.0], vec![1.0])),
            staggered_starts: true,
            ..Default::default()
        };
        let (batch, first) = training_batch(&e, &cfg, 0).unwrap();
        assert!(first.iter().any(|&k| k > 0));
        let net = FeedforwardNet::zeros(&[2, 3, 1], Activation::Silu, Head::Softplus).unwrap();
        let mut targets = Array2::ones((20, 10));
        let (a, _) = batch_loss_gradient(&net, &batch, &targets, &first, 8, false).unwrap();
        for (p, &k) in first.iter().enumerate() {
            for i in 0..k {
                targets[[p, i]] = 1e6;
            }
        }
        let (b, _) = batch_loss_gradient(&net, &batch, &targets, &first, 8, false).unwrap();
        assert_eq!(a, b);
        let used: usize = first.iter().map(|k| 10 - k).sum();
        let expect = (2f64.ln() - 1.0).powi(2) * 0.1 * used as f64 / 20.0;
        assert!((a - expect).abs() < 1e-12);
    }

    #[test]
    fn staggered_starts_need_a_box() {
        let e = zero_expert();
        let cs = ConstraintSet::new(vec![], vec![TerminalConstraint::new("x", |x| x[0])]);
        let cfg = ValueLearnerConfig {
            staggered_starts: true,
            iterations: 1,
            ..Default::default()
        };
        let net = FeedforwardNet::new(&[2, 3, 1], Activation::Silu, Head::Softplus, 0).unwrap();
        let eta = EtaSolution::prescribed(vec![], vec![0.0]);
        assert!(matches!(train_omega(&e, &cs, &eta, net, &cfg), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn tiny_omega_is_degenerate() {
        let e = zero_expert();
        let net = FeedforwardNet::zeros(&[2, 3, 1], Activation::Silu, Head::Softplus).unwrap();
        let model = OmegaModel::new(net, -40.0).unwrap();
        let theta = drift_from_omega(&model, &e).unwrap();
        assert!(matches!(theta.eval(0.0, &[0.0]), Err(Error::DegenerateOmega { .. })));
    }
}
