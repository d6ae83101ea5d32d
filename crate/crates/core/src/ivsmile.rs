//! Implied-volatility smiles as diffusions of Legendre coefficients.
//!
//! A smile on a grid of option deltas is projected onto the first five
//! Legendre polynomials on `Δ ∈ [0, 1]`, normalised to unit `L²[0, 1]` norm.
//! The coefficient series is modelled by a neural SDE whose covariance comes
//! from a network producing a lower-triangular factor.

use std::io::Write;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::mlp::{adam_step, Activation, AdamState, FeedforwardNet, Head};
use crate::rng::{derive_seed, PathNormals};
use crate::sde::{DriftField, DriftFn, DriftKind, ExpertEnsemble, PathBatch, VolFn, VolatilityField};
use crate::stats::{fmt17, quantiles};

pub const NUM_COEFFS: usize = 5;
pub const TRADING_DAYS: f64 = 252.0;

/// `√(2j+1) P_j(2Δ − 1)` for `j = 0..=4`.
pub fn legendre_basis(delta: f64) -> [f64; NUM_COEFFS] {
    let y = 2.0 * delta - 1.0;
    let p = [
        1.0,
        y,
        0.5 * (3.0 * y * y - 1.0),
        0.5 * (5.0 * y.powi(3) - 3.0 * y),
        0.125 * (35.0 * y.powi(4) - 30.0 * y * y + 3.0),
    ];
    let mut out = [0.0; NUM_COEFFS];
    for j in 0..NUM_COEFFS {
        out[j] = ((2 * j + 1) as f64).sqrt() * p[j];
    }
    out
}

/// `∂/∂Δ` of the basis.
pub fn legendre_basis_derivative(delta: f64) -> [f64; NUM_COEFFS] {
    let y = 2.0 * delta - 1.0;
    let dp = [0.0, 1.0, 3.0 * y, 0.5 * (15.0 * y * y - 3.0), 0.125 * (140.0 * y.powi(3) - 60.0 * y)];
    let mut out = [0.0; NUM_COEFFS];
    for j in 0..NUM_COEFFS {
        out[j] = 2.0 * ((2 * j + 1) as f64).sqrt() * dp[j];
    }
    out
}

/// Slope `∂σ/∂Δ` of the reconstructed smile at `Δ = ½`.
pub fn atm_skew(coeffs: &[f64]) -> f64 {
    legendre_basis_derivative(0.5)
        .iter()
        .zip(coeffs)
        .map(|(b, c)| b * c)
        .sum()
}

/// Deltas `0.10, 0.15, …, 0.90` at one maturity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmileGrid {
    pub deltas: Vec<f64>,
    pub ttm_days: u32,
}

impl SmileGrid {
    pub fn standard(ttm_days: u32) -> Self {
        Self {
            deltas: (0..17).map(|i| (10 + 5 * i) as f64 / 100.0).collect(),
            ttm_days,
        }
    }
}

/// Least-squares Legendre coefficients of `(Δ, σ)` pairs, by QR.
pub fn project_smile(points: &[(f64, f64)]) -> Result<[f64; NUM_COEFFS]> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < NUM_COEFFS {
        return Err(Error::ProjectionFailed(format!(
            "need at least {NUM_COEFFS} distinct deltas, got {}",
            distinct.len()
        )));
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::ProjectionFailed("non-finite smile point".into()));
    }
    let n = points.len();
    let a = nalgebra::DMatrix::from_fn(n, NUM_COEFFS, |i, j| legendre_basis(points[i].0)[j]);
    let b = nalgebra::DVector::from_iterator(n, points.iter().map(|p| p.1));
    let qr = a.qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= 1e-12 * scale) {
        return Err(Error::ProjectionFailed("design matrix is rank deficient".into()));
    }
    let qtb = qr.q().transpose() * b;
    let x = r
        .solve_upper_triangular(&qtb)
        .ok_or_else(|| Error::ProjectionFailed("triangular solve failed".into()))?;
    let mut out = [0.0; NUM_COEFFS];
    out.copy_from_slice(x.as_slice());
    Ok(out)
}

pub fn reconstruct_smile(coeffs: &[f64], deltas: &[f64]) -> Vec<f64> {
    deltas
        .iter()
        .map(|&d| legendre_basis(d).iter().zip(coeffs).map(|(b, c)| b * c).sum())
        .collect()
}

/// `Σ(x) = U(x) U(x)ᵀ + floor · I` with `U` read row by row from the
/// `d(d+1)/2` outputs of a network on the lower triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactorNet {
    pub net: FeedforwardNet,
    pub floor: f64,
}

pub const SIGMA_FLOOR: f64 = 1e-3;

/// Kernel half-width in bandwidths; `Φ(−9)` is below 1e-18.
const KERNEL_REACH: f64 = 9.0;

impl CholeskyFactorNet {
    pub fn new(dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(dim * (dim + 1) / 2);
        Ok(Self {
            net: FeedforwardNet::new(&widths, activation, Head::Identity, seed)?,
            floor: SIGMA_FLOOR,
        })
    }

    pub fn from_net(net: FeedforwardNet) -> Result<Self> {
        let d = net.input_dim();
        if net.output_dim() != d * (d + 1) / 2 {
            return Err(Error::invalid("factor network must output d(d+1)/2 values"));
        }
        Ok(Self { net, floor: SIGMA_FLOOR })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    fn u_from_row(&self, row: &[f64], u: &mut [f64]) {
        let d = self.dim();
        u.iter_mut().for_each(|v| *v = 0.0);
        let mut k = 0;
        for i in 0..d {
            for j in 0..=i {
                u[i * d + j] = row[k];
                k += 1;
            }
        }
    }

    fn covariance_from_u(&self, u: &[f64], out: &mut [f64]) {
        let d = self.dim();
        linalg::gram_lower(u, d, out);
        for i in 0..d {
            out[i * d + i] += self.floor;
        }
    }

    /// Row-major `Σ(x)` for each row of `states`.
    pub fn covariances(&self, states: ArrayView2<f64>) -> Result<Vec<Vec<f64>>> {
        let d = self.dim();
        let out = self.net.forward(states)?;
        let mut u = vec![0.0; d * d];
        Ok(out
            .rows()
            .into_iter()
            .map(|r| {
                self.u_from_row(r.as_slice().expect("standard layout"), &mut u);
                let mut s = vec![0.0; d * d];
                self.covariance_from_u(&u, &mut s);
                s
            })
            .collect())
    }

    pub fn covariance(&self, x: &[f64]) -> Result<Vec<f64>> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|_| Error::invalid("state shape"))?;
        Ok(self.covariances(view)?.remove(0))
    }

    /// Hex SHA-256 of the parameter bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.net.params() {
            h.update(p.to_le_bytes());
        }
        h.update(self.floor.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct FactorVol {
    chol: CholeskyFactorNet,
}

impl VolFn for FactorVol {
    fn dim(&self) -> usize {
        self.chol.dim()
    }

    fn factor(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let s = self.chol.covariance(x)?;
        linalg::cholesky_into(&s, self.chol.dim(), out)
    }

    fn factor_batch(&self, _t: f64, states: ArrayView2<f64>, out: &mut [f64]) -> Result<()> {
        let d = self.chol.dim();
        let raw = self.chol.net.forward(states)?;
        let mut u = vec![0.0; d * d];
        let mut s = vec![0.0; d * d];
        for (row, chunk) in raw.rows().into_iter().zip(out.chunks_mut(d * d)) {
            self.chol.u_from_row(row.as_slice().expect("standard layout"), &mut u);
            self.chol.covariance_from_u(&u, &mut s);
            linalg::cholesky_into(&s, d, chunk)?;
        }
        Ok(())
    }
}

/// The volatility `chol(Σ(x))` of a factor network.
pub fn factor_volatility(chol: &CholeskyFactorNet) -> VolatilityField {
    VolatilityField::new(FactorVol { chol: chol.clone() }, "cholesky-factor-net")
}

struct StateDrift {
    net: FeedforwardNet,
}

impl DriftFn for StateDrift {
    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn eval_batch(&self, _t: f64, states: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) -> Result<()> {
        out.assign(&self.net.forward(states)?);
        Ok(())
    }
}

/// A time-homogeneous drift `μ(x)` from a network on the state alone.
pub fn state_drift(net: &FeedforwardNet, label: impl Into<String>) -> Result<DriftField> {
    if net.input_dim() != net.output_dim() {
        return Err(Error::invalid("state drift network must map R^d to R^d"));
    }
    Ok(DriftField::new(StateDrift { net: net.clone() }, DriftKind::Neural, label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralSdeTrainConfig {
    /// PIT penalty weight `ζ`.
    pub pit_weight: f64,
    pub bandwidth: f64,
    pub pit_points: usize,
    pub dt: f64,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for NeuralSdeTrainConfig {
    fn default() -> Self {
        Self {
            pit_weight: 1.0,
            bandwidth: 0.01,
            pit_points: 101,
            dt: 1.0 / TRADING_DAYS,
            lr: 1e-3,
            iterations: 1000,
        }
    }
}

impl NeuralSdeTrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.pit_weight >= 0.0) || !(self.bandwidth > 0.0) || self.pit_points < 2 || !(self.dt > 0.0) {
            return Err(Error::invalid("need ζ ≥ 0, h > 0, at least two PIT points and Δt > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NeuralSdeLoss {
    pub total: f64,
    /// Mean negative log-likelihood per transition.
    pub nll: f64,
    pub pit: Vec<f64>,
    /// `z_{t,j}`, `(T, d)`.
    pub z: Array2<f64>,
}

struct LossWithGradients {
    loss: NeuralSdeLoss,
    drift_grad: Vec<f64>,
    chol_grad: Vec<f64>,
}

fn trapezoid_weights(n: usize) -> Vec<f64> {
    let h = 1.0 / (n - 1) as f64;
    (0..n).map(|k| if k == 0 || k + 1 == n { 0.5 * h } else { h }).collect()
}

fn loss_and_gradients(
    series: ArrayView2<f64>,
    drift: &FeedforwardNet,
    chol: &CholeskyFactorNet,
    cfg: &NeuralSdeTrainConfig,
    want_grad: bool,
) -> Result<LossWithGradients> {
    cfg.validate()?;
    let (len, d) = series.dim();
    if len < 2 {
        return Err(Error::invalid("a series needs at least two observations"));
    }
    if drift.input_dim() != d || drift.output_dim() != d || chol.dim() != d {
        return Err(Error::invalid("network dimensions do not match the series"));
    }
    let nt = len - 1;
    let dt = cfg.dt;
    let states = series.slice(ndarray::s![..nt, ..]);
    let mu_cache = drift.forward_cached(states)?;
    let u_cache = chol.net.forward_cached(states)?;
    let mu = mu_cache.output();
    let uo = u_cache.output();
    let normal = Normal::standard();

    let mut g_mu = Array2::zeros((nt, d));
    let mut g_u = Array2::zeros((nt, uo.ncols()));
    let mut z = Array2::zeros((nt, d));
    // ∂z/∂μ_j and ∂z/∂Σ_jj for the PIT chain rule.
    let mut dz_dmu = Array2::zeros((nt, d));
    let mut dz_dsjj = Array2::zeros((nt, d));
    let mut u = vec![0.0; d * d];
    let mut sigma = vec![0.0; d * d];
    let mut l = vec![0.0; d * d];
    let mut r = vec![0.0; d];
    let mut sinv_r = vec![0.0; d];
    let mut sinv = vec![0.0; d * d];
    let mut g = vec![0.0; d * d];
    let mut nll = 0.0;
    for t in 0..nt {
        chol.u_from_row(uo.row(t).as_slice().expect("standard layout"), &mut u);
        chol.covariance_from_u(&u, &mut sigma);
        linalg::cholesky_into(&sigma, d, &mut l)?;
        for j in 0..d {
            r[j] = series[[t + 1, j]] - series[[t, j]] - mu[[t, j]] * dt;
        }
        sinv_r.copy_from_slice(&r);
        linalg::solve_lower_in_place(&l, d, &mut sinv_r)?;
        let quad: f64 = sinv_r.iter().map(|v| v * v).sum();
        linalg::solve_lower_transpose_in_place(&l, d, &mut sinv_r)?;
        let logdet: f64 = 2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>();
        nll += 0.5 * quad / dt + 0.5 * logdet;
        for j in 0..d {
            let s = sigma[j * d + j].sqrt();
            let a = (-r[j]) / (s * dt.sqrt());
            z[[t, j]] = normal.cdf(a);
            let phi = normal.pdf(a);
            dz_dmu[[t, j]] = phi * dt.sqrt() / s;
            dz_dsjj[[t, j]] = phi * (-a / s) / (2.0 * s);
        }
        if want_grad {
            for c in 0..d {
                let mut e = vec![0.0; d];
                e[c] = 1.0;
                linalg::solve_lower_in_place(&l, d, &mut e)?;
                linalg::solve_lower_transpose_in_place(&l, d, &mut e)?;
                for rr in 0..d {
                    sinv[rr * d + c] = e[rr];
                }
            }
            for j in 0..d {
                g_mu[[t, j]] = -sinv_r[j] / nt as f64;
            }
            for a in 0..d {
                for b in 0..d {
                    g[a * d + b] = (-0.5 * sinv_r[a] * sinv_r[b] / dt + 0.5 * sinv[a * d + b]) / nt as f64;
                }
            }
            write_u_gradient(&g, &u, d, g_u.row_mut(t).as_slice_mut().expect("standard layout"));
        }
    }
    nll /= nt as f64;

    let weights = trapezoid_weights(cfg.pit_points);
    let h = cfg.bandwidth;
    let mut pit = vec![0.0; d];
    let grid_step = 1.0 / (cfg.pit_points - 1) as f64;
    let reach = KERNEL_REACH * h;
    for j in 0..d {
        let mut sorted: Vec<f64> = z.column(j).to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut dev = vec![0.0; cfg.pit_points];
        for (k, dv) in dev.iter_mut().enumerate() {
            let uk = k as f64 * grid_step;
            // Points further than the reach contribute exactly 0 or 1 to double precision.
            let below = sorted.partition_point(|&v| v < uk - reach);
            let above = sorted.partition_point(|&v| v <= uk + reach);
            let near: f64 = sorted[below..above].iter().map(|&zt| normal.cdf((uk - zt) / h)).sum();
            *dv = (below as f64 + near) / nt as f64 - uk;
            pit[j] += weights[k] * dv.powi(2);
        }
        if want_grad && cfg.pit_weight > 0.0 {
            for t in 0..nt {
                let zt = z[[t, j]];
                let k_lo = (((zt - reach) / grid_step).ceil().max(0.0)) as usize;
                let k_hi = (((zt + reach) / grid_step).floor() as isize).min(cfg.pit_points as isize - 1);
                let mut dpit_dz = 0.0;
                for k in k_lo..((k_hi + 1).max(0) as usize) {
                    let uk = k as f64 * grid_step;
                    dpit_dz += weights[k] * 2.0 * dev[k] * (-normal.pdf((uk - zt) / h) / h) / nt as f64;
                }
                let w = cfg.pit_weight * dpit_dz;
                g_mu[[t, j]] += w * dz_dmu[[t, j]];
                // Σ_jj = Σ_k U_jk² + floor.
                let gs = w * dz_dsjj[[t, j]];
                chol.u_from_row(uo.row(t).as_slice().expect("standard layout"), &mut u);
                let base = j * (j + 1) / 2;
                for k in 0..=j {
                    g_u[[t, base + k]] += gs * 2.0 * u[j * d + k];
                }
            }
        }
    }
    let total = nll + cfg.pit_weight * pit.iter().sum::<f64>();
    let (drift_grad, chol_grad) = if want_grad {
        (
            drift.param_gradient(&mu_cache, g_mu.view())?,
            chol.net.param_gradient(&u_cache, g_u.view())?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(LossWithGradients {
        loss: NeuralSdeLoss { total, nll, pit, z },
        drift_grad,
        chol_grad,
    })
}

/// `∂/∂U` of a loss with symmetric gradient `G` in `Σ = UUᵀ + εI`: the lower
/// triangle of `2 G U`, packed row by row.
fn write_u_gradient(g: &[f64], u: &[f64], d: usize, out: &mut [f64]) {
    let mut k = 0;
    for i in 0..d {
        for j in 0..=i {
            let mut s = 0.0;
            for m in 0..d {
                s += g[i * d + m] * u[m * d + j];
            }
            out[k] = 2.0 * s;
            k += 1;
        }
    }
}

/// Mean Gaussian transition NLL with mean `μΔt` and covariance `ΣΔt`, plus
/// `ζ Σ_j PIT_j`.
pub fn neural_sde_loss(
    series: ArrayView2<f64>,
    drift: &FeedforwardNet,
    chol: &CholeskyFactorNet,
    cfg: &NeuralSdeTrainConfig,
) -> Result<NeuralSdeLoss> {
    Ok(loss_and_gradients(series, drift, chol, cfg, false)?.loss)
}

/// Parameter gradients of [`neural_sde_loss`], drift network first.
pub fn neural_sde_gradients(
    series: ArrayView2<f64>,
    drift: &FeedforwardNet,
    chol: &CholeskyFactorNet,
    cfg: &NeuralSdeTrainConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = loss_and_gradients(series, drift, chol, cfg, true)?;
    Ok((r.drift_grad, r.chol_grad))
}

/// Full-batch Adam on the series. With `train_factor = false` the factor
/// network is left untouched.
pub fn fit_neural_sde(
    series: ArrayView2<f64>,
    drift: &mut FeedforwardNet,
    chol: &mut CholeskyFactorNet,
    cfg: &NeuralSdeTrainConfig,
    train_factor: bool,
) -> Result<Vec<f64>> {
    let mut adam_mu = AdamState::for_net(drift, cfg.lr);
    let mut adam_u = AdamState::for_net(&chol.net, cfg.lr);
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let r = loss_and_gradients(series, drift, chol, cfg, true)?;
        if !r.loss.total.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: iter,
                reason: format!("neural SDE loss is {}", r.loss.total),
            });
        }
        losses.push(r.loss.total);
        adam_step(drift, &r.drift_grad, &mut adam_mu)?;
        if train_factor {
            adam_step(&mut chol.net, &r.chol_grad, &mut adam_u)?;
        }
    }
    Ok(losses)
}

/// Kolmogorov-Smirnov distance of a sample from `U(0, 1)`.
pub fn ks_uniform_statistic(sample: &[f64]) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter().enumerate().fold(0.0f64, |d, (i, &v)| {
        d.max((i as f64 + 1.0) / n - v).max(v - i as f64 / n)
    })
}

/// Asymptotic 1% critical value of the KS distance.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.628 / (n as f64).sqrt()
}

/// Ground truth for the synthetic coefficient series:
/// `dx = κ ⊙ (m − x) dt + L dW` with constant lower-triangular `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSmileConfig {
    pub length: usize,
    pub dt: f64,
    pub kappa: Vec<f64>,
    pub mean: Vec<f64>,
    /// Row-major lower-triangular diffusion factor.
    pub vol_factor: Vec<f64>,
    pub x0: Vec<f64>,
}

impl Default for SyntheticSmileConfig {
    fn default() -> Self {
        let mean = vec![0.25, 0.012, 0.01, 0.0, 0.0];
        let diag = [0.10, 0.06, 0.04, 0.035, 0.035];
        let mut vol_factor = vec![0.0; 25];
        for i in 0..5 {
            vol_factor[i * 5 + i] = diag[i];
        }
        // Level and slope move against each other.
        vol_factor[5] = -0.02;
        Self {
            length: 2900,
            dt: 1.0 / TRADING_DAYS,
            kappa: vec![3.0, 4.0, 6.0, 8.0, 10.0],
            x0: mean.clone(),
            mean,
            vol_factor,
        }
    }
}

impl SyntheticSmileConfig {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Ground-truth drift at `x`.
    pub fn drift(&self, x: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|j| self.kappa[j] * (self.mean[j] - x[j])).collect()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.kappa.len() != d || self.x0.len() != d || self.vol_factor.len() != d * d {
            return Err(Error::invalid("synthetic smile config has inconsistent dimensions"));
        }
        if self.length < 2 || !(self.dt > 0.0) {
            return Err(Error::invalid("synthetic series needs length ≥ 2 and Δt > 0"));
        }
        Ok(())
    }
}

/// Daily coefficient observations `x_0..x_{len−1}`, `(len, d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmileSeries {
    pub dt: f64,
    pub values: Array2<f64>,
}

impl SmileSeries {
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// CSV `t,x_1..x_d` with `t` in years.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let d = self.values.ncols();
        let mut header = String::from("t");
        (1..=d).for_each(|j| header.push_str(&format!(",x_{j}")));
        writeln!(w, "{header}")?;
        for (i, row) in self.values.rows().into_iter().enumerate() {
            let mut line = fmt17(i as f64 * self.dt);
            for v in row {
                line.push(',');
                line.push_str(&fmt17(*v));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

pub fn generate_synthetic_smile_series(cfg: &SyntheticSmileConfig, seed: u64) -> Result<SmileSeries> {
    cfg.validate()?;
    let d = cfg.dim();
    let mut values = Array2::zeros((cfg.length, d));
    let mut x = cfg.x0.clone();
    let mut normals = PathNormals::new(seed, 0, d, 0);
    let sq = cfg.dt.sqrt();
    let mut xi = vec![0.0; d];
    for i in 0..cfg.length {
        for j in 0..d {
            values[[i, j]] = x[j];
        }
        let mu = cfg.drift(&x);
        xi.iter_mut().for_each(|v| *v = normals.next_normal() * sq);
        for r in 0..d {
            let noise: f64 = (0..=r).map(|c| cfg.vol_factor[r * d + c] * xi[c]).sum();
            x[r] += mu[r] * cfg.dt + noise;
        }
    }
    Ok(SmileSeries { dt: cfg.dt, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertProtocolConfig {
    pub drift_hidden: Vec<usize>,
    pub factor_hidden: Vec<usize>,
    pub activation: Activation,
    /// Output bound of the drift networks.
    pub drift_bound: f64,
    pub full_fit: NeuralSdeTrainConfig,
    pub expert_fit: NeuralSdeTrainConfig,
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl Default for ExpertProtocolConfig {
    fn default() -> Self {
        Self {
            drift_hidden: vec![32, 32],
            factor_hidden: vec![32, 32],
            activation: Activation::Silu,
            drift_bound: 10.0,
            full_fit: NeuralSdeTrainConfig {
                iterations: 1500,
                ..Default::default()
            },
            expert_fit: NeuralSdeTrainConfig {
                iterations: 500,
                ..Default::default()
            },
            weights: vec![0.2, 0.2, 0.6],
            seed: 0,
        }
    }
}

pub struct SmileExperts {
    pub ensemble: ExpertEnsemble,
    pub drifts: Vec<FeedforwardNet>,
    pub factor: CholeskyFactorNet,
    /// Factor-network checksum observed after each expert's training.
    pub factor_checksums: Vec<String>,
    pub full_losses: Vec<f64>,
}

/// Fits drift and factor on the whole series, then refits one drift per
/// consecutive segment with the factor frozen. The ensemble starts at the
/// last observation.
pub fn build_smile_experts(series: &SmileSeries, cfg: &ExpertProtocolConfig) -> Result<SmileExperts> {
    let d = series.values.ncols();
    let k = cfg.weights.len();
    if series.len() < 2 * k {
        return Err(Error::invalid("series too short to split between experts"));
    }
    let mut widths = vec![d];
    widths.extend_from_slice(&cfg.drift_hidden);
    widths.push(d);
    let mut drift = FeedforwardNet::new(&widths, cfg.activation, Head::ScaledTanh(cfg.drift_bound), derive_seed(cfg.seed, 1))?;
    let mut factor = CholeskyFactorNet::new(d, &cfg.factor_hidden, cfg.activation, derive_seed(cfg.seed, 2))?;
    // Start near the scale of the observed increments.
    factor.net.scale_output_layer(0.1);
    let full_losses = fit_neural_sde(series.values.view(), &mut drift, &mut factor, &cfg.full_fit, true)?;
    let frozen = factor.checksum();
    let mut drifts = Vec::with_capacity(k);
    let mut checksums = Vec::with_capacity(k);
    let seg = series.len() / k;
    for e in 0..k {
        let lo = e * seg;
        let hi = if e + 1 == k { series.len() } else { (e + 1) * seg + 1 };
        let mut net = drift.clone();
        fit_neural_sde(series.values.slice(ndarray::s![lo..hi, ..]), &mut net, &mut factor, &cfg.expert_fit, false)?;
        drifts.push(net);
        checksums.push(factor.checksum());
    }
    if checksums.iter().any(|c| *c != frozen) {
        return Err(Error::InvalidState("factor network changed during expert training".into()));
    }
    let fields = drifts
        .iter()
        .enumerate()
        .map(|(e, n)| state_drift(n, format!("smile-expert-{}", e + 1)))
        .collect::<Result<Vec<_>>>()?;
    let x0 = series.values.row(series.len() - 1).to_vec();
    let ensemble = ExpertEnsemble::new(fields, factor_volatility(&factor), cfg.weights.clone(), x0)?;
    Ok(SmileExperts {
        ensemble,
        drifts,
        factor,
        factor_checksums: checksums,
        full_losses,
    })
}

/// CSV `t,delta,q10,q50,q90` of reconstructed smiles across the paths of a
/// coefficient batch, every `stride` time nodes.
pub fn write_smile_bands<W: Write>(mut w: W, batch: &PathBatch, grid: &SmileGrid, stride: usize) -> Result<()> {
    writeln!(w, "t,delta,q10,q50,q90")?;
    let n = batch.grid().steps();
    let mut nodes: Vec<usize> = (0..=n).step_by(stride.max(1)).collect();
    if nodes.last() != Some(&n) {
        nodes.push(n);
    }
    for i in nodes {
        let states = batch.states_at(i);
        let smiles: Vec<Vec<f64>> = states
            .rows()
            .into_iter()
            .map(|r| reconstruct_smile(r.as_slice().expect("standard layout"), &grid.deltas))
            .collect();
        for (k, delta) in grid.deltas.iter().enumerate() {
            let col: Vec<f64> = smiles.iter().map(|s| s[k]).collect();
            let q = quantiles(&col, &[0.1, 0.5, 0.9]);
            writeln!(
                w,
                "{},{},{},{},{}",
                fmt17(batch.grid().t(i)),
                fmt17(*delta),
                fmt17(q[0]),
                fmt17(q[1]),
                fmt17(q[2])
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_grid_has_seventeen_deltas() {
        let g = SmileGrid::standard(30);
        assert_eq!(g.deltas.len(), 17);
        assert_eq!(g.deltas[0], 0.1);
        assert_eq!(g.deltas[16], 0.9);
        assert!(g.deltas.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn skew_of_pure_linear_component() {
        // √3 (2Δ − 1) has slope 2√3.
        let a = 0.07;
        assert!((atm_skew(&[0.3, a, 0.0, 0.0, 0.0]) - a * 2.0 * 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(atm_skew(&[0.2, 0.0, 0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn constant_smile_projects_to_level() {
        let g = SmileGrid::standard(30);
        let pts: Vec<_> = g.deltas.iter().map(|&d| (d, 0.2)).collect();
        let c = project_smile(&pts).unwrap();
        assert!((c[0] - 0.2).abs() < 1e-12);
        assert!(c[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn too_few_deltas_fail() {
        let pts = [(0.1, 0.2), (0.2, 0.2), (0.3, 0.2), (0.3, 0.25), (0.4, 0.2)];
        assert!(matches!(project_smile(&pts), Err(Error::ProjectionFailed(_))));
    }

    #[test]
    fn basis_derivative_matches_finite_differences() {
        for &d in &[0.1, 0.37, 0.5, 0.83] {
            let h = 1e-6;
            let (up, dn) = (legendre_basis(d + h), legendre_basis(d - h));
            let der = legendre_basis_derivative(d);
            for j in 0..NUM_COEFFS {
                assert!(((up[j] - dn[j]) / (2.0 * h) - der[j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn ks_statistic_of_a_regular_grid_is_small() {
        let n = 1000;
        let s: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert!((ks_uniform_statistic(&s) - 0.5 / n as f64).abs() < 1e-12);
    }

    fn small_problem() -> (Array2<f64>, FeedforwardNet, CholeskyFactorNet) {
        let cfg = SyntheticSmileConfig {
            length: 60,
            kappa: vec![2.0, 3.0],
            mean: vec![0.2, 0.0],
            vol_factor: vec![0.1, 0.0, -0.03, 0.08],
            x0: vec![0.2, 0.01],
            ..Default::default()
        };
        let s = generate_synthetic_smile_series(&cfg, 3).unwrap();
        let drift = FeedforwardNet::new(&[2, 6, 2], Activation::Tanh, Head::ScaledTanh(10.0), 4).unwrap();
        let mut chol = CholeskyFactorNet::new(2, &[6], Activation::Tanh, 5).unwrap();
        chol.net.scale_output_layer(0.2);
        (s.values, drift, chol)
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let (series, drift, chol) = small_problem();
        let cfg = NeuralSdeTrainConfig {
            pit_weight: 2.0,
            bandwidth: 0.1,
            ..Default::default()
        };
        let (gd, gc) = neural_sde_gradients(series.view(), &drift, &chol, &cfg).unwrap();
        let h = 1e-6;
        let p = drift.params();
        for k in (0..p.len()).step_by(3) {
            let (mut up, mut dn) = (drift.clone(), drift.clone());
            let mut q = p.clone();
            q[k] += h;
            up.set_params(&q).unwrap();
            q[k] -= 2.0 * h;
            dn.set_params(&q).unwrap();
            let fd = (neural_sde_loss(series.view(), &up, &chol, &cfg).unwrap().total
                - neural_sde_loss(series.view(), &dn, &chol, &cfg).unwrap().total)
                / (2.0 * h);
            assert!((fd - gd[k]).abs() < 1e-5 * (1.0 + fd.abs()), "drift param {k}: {fd} vs {}", gd[k]);
        }
        let p = chol.net.params();
        for k in (0..p.len()).step_by(3) {
            let (mut up, mut dn) = (chol.clone(), chol.clone());
            let mut q = p.clone();
            q[k] += h;
            up.net.set_params(&q).unwrap();
            q[k] -= 2.0 * h;
            dn.net.set_params(&q).unwrap();
            let fd = (neural_sde_loss(series.view(), &drift, &up, &cfg).unwrap().total
                - neural_sde_loss(series.view(), &drift, &dn, &cfg).unwrap().total)
                / (2.0 * h);
            assert!((fd - gc[k]).abs() < 1e-5 * (1.0 + fd.abs()), "factor param {k}: {fd} vs {}", gc[k]);
        }
    }

    #[test]
    fn covariance_respects_floor() {
        let (_, _, chol) = small_problem();
        let s = chol.covariance(&[0.3, -0.1]).unwrap();
        assert!(linalg::min_eigenvalue(&s, 2) >= SIGMA_FLOOR * (1.0 - 1e-12));
        assert!((s[1] - s[2]).abs() < 1e-15);
    }

    #[test]
    fn frozen_factor_keeps_checksum() {
        let (series, mut drift, mut chol) = small_problem();
        let before = chol.checksum();
        let cfg = NeuralSdeTrainConfig {
            iterations: 5,
            ..Default::default()
        };
        fit_neural_sde(series.view(), &mut drift, &mut chol, &cfg, false).unwrap();
        assert_eq!(chol.checksum(), before);
        fit_neural_sde(series.view(), &mut drift, &mut chol, &cfg, true).unwrap();
        assert_ne!(chol.checksum(), before);
    }

    #[test]
    fn windowed_pit_matches_direct_quadrature() {
        let (series, drift, chol) = small_problem();
        let cfg = NeuralSdeTrainConfig::default();
        let loss = neural_sde_loss(series.view(), &drift, &chol, &cfg).unwrap();
        let normal = Normal::standard();
        let nt = loss.z.nrows() as f64;
        for j in 0..2 {
            let direct: f64 = (0..101)
                .map(|k| {
                    let u = k as f64 / 100.0;
                    let f = loss.z.column(j).iter().map(|&z| normal.cdf((u - z) / 0.01)).sum::<f64>() / nt;
                    let w = if k == 0 || k == 100 { 0.005 } else { 0.01 };
                    w * (f - u).powi(2)
                })
                .sum();
            assert!((direct - loss.pit[j]).abs() < 1e-14, "{direct} vs {}", loss.pit[j]);
        }
        let nll_only = NeuralSdeTrainConfig { pit_weight: 0.0, ..cfg };
        let bare = neural_sde_loss(series.view(), &drift, &chol, &nll_only).unwrap();
        assert!(bare.total < loss.total);
        assert_eq!(bare.total, loss.nll);
    }
}
