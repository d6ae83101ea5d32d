//! Diffusion models with a shared volatility, Euler-Maruyama path batches
//! under common random numbers, the average drift and its dispersion `ς`,
//! and Monte Carlo estimates of the weighted KL objective.

use std::io::Write;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView2, ArrayViewMut2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{PathNormals, Uniforms};
use crate::stats::{fmt17, McEstimate};

/// Any state component beyond this magnitude aborts the batch.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Paths per simulation work unit. Fixed so results do not depend on the
/// worker count.
const SIM_CHUNK: usize = 256;

/// Uniform time grid `t_i = i T / N` on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    nodes: Vec<f64>,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::invalid("time grid needs at least one step"));
        }
        let nodes = (0..=steps)
            .map(|i| {
                if i == steps {
                    horizon
                } else {
                    horizon * i as f64 / steps as f64
                }
            })
            .collect();
        Ok(Self {
            horizon,
            steps,
            nodes,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn t(&self, i: usize) -> f64 {
        self.nodes[i]
    }
}

pub fn build_time_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    TimeGrid::new(horizon, steps)
}

/// A drift `(t, x) -> R^d` evaluated over a batch of states sharing `t`.
pub trait DriftFn: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes the drift at each row of `states` into the matching row of `out`.
    fn eval_batch(&self, t: f64, states: ArrayView2<f64>, out: ArrayViewMut2<f64>) -> Result<()>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftKind {
    ClosedForm,
    Neural,
}

static NEXT_FIELD_ID: AtomicU64 = AtomicU64::new(1);

/// Shared handle to a drift. Clones keep the identity of the original, which
/// is how batches remember which drift generated them.
#[derive(Clone)]
pub struct DriftField {
    inner: Arc<dyn DriftFn>,
    kind: DriftKind,
    label: Arc<str>,
    id: u64,
}

impl std::fmt::Debug for DriftField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DriftField")
            .field("label", &self.label)
            .field("kind", &self.kind)
            .field("dim", &self.dim())
            .finish()
    }
}

struct PointwiseDrift<F> {
    dim: usize,
    f: F,
}

impl<F> DriftFn for PointwiseDrift<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch(&self, t: f64, states: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) -> Result<()> {
        let mut x = vec![0.0; self.dim];
        let mut y = vec![0.0; self.dim];
        for (row, mut o) in states.outer_iter().zip(out.outer_iter_mut()) {
            x.iter_mut().zip(row.iter()).for_each(|(a, b)| *a = *b);
            (self.f)(t, &x, &mut y);
            o.iter_mut().zip(y.iter()).for_each(|(a, b)| *a = *b);
        }
        Ok(())
    }
}

impl DriftField {
    pub fn new(inner: impl DriftFn + 'static, kind: DriftKind, label: impl Into<String>) -> Self {
        Self {
            inner: Arc::new(inner),
            kind,
            label: label.into().into(),
            id: NEXT_FIELD_ID.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Closed-form drift from a pointwise function writing into `out`.
    pub fn closed_form<F>(dim: usize, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self::new(PointwiseDrift { dim, f }, DriftKind::ClosedForm, label)
    }

    /// One-dimensional closed-form drift.
    pub fn scalar<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        Self::closed_form(1, label, move |t, x, out| out[0] = f(t, x[0]))
    }

    pub fn constant(values: Vec<f64>, label: impl Into<String>) -> Self {
        let dim = values.len();
        Self::closed_form(dim, label, move |_, _, out| out.copy_from_slice(&values))
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn kind(&self) -> DriftKind {
        self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// True when both handles refer to the same underlying drift.
    pub fn same_as(&self, other: &DriftField) -> bool {
        self.id == other.id
    }

    pub fn eval_batch(&self, t: f64, states: ArrayView2<f64>, out: ArrayViewMut2<f64>) -> Result<()> {
        if states.ncols() != self.dim() || out.ncols() != self.dim() || states.nrows() != out.nrows() {
            return Err(Error::invalid(format!(
                "drift `{}` expects {} columns, got states {:?} / out {:?}",
                self.label,
                self.dim(),
                states.dim(),
                out.dim()
            )));
        }
        self.inner.eval_batch(t, states, out)
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let states = ArrayView2::from_shape((1, d), x)
            .map_err(|_| Error::invalid(format!("state has {} entries, drift `{}` wants {d}", x.len(), self.label)))?;
        let mut out = Array2::zeros((1, d));
        self.eval_batch(t, states, out.view_mut())?;
        Ok(out.into_raw_vec_and_offset().0)
    }
}

/// A volatility `(t, x) -> σ(t, x)`, returned as a lower-triangular
/// row-major `d x d` factor with covariance `Σ = σ σ^T`.
pub trait VolFn: Send + Sync {
    fn dim(&self) -> usize;

    fn factor(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Factors for every row of `states`, concatenated.
    fn factor_batch(&self, t: f64, states: ArrayView2<f64>, out: &mut [f64]) -> Result<()> {
        let d = self.dim();
        let mut x = vec![0.0; d];
        for (row, chunk) in states.rows().into_iter().zip(out.chunks_mut(d * d)) {
            x.iter_mut().zip(row.iter()).for_each(|(a, b)| *a = *b);
            self.factor(t, &x, chunk)?;
        }
        Ok(())
    }

    /// The factor when it does not depend on `(t, x)`.
    fn constant_factor(&self) -> Option<&[f64]> {
        None
    }
}

struct ConstantVol {
    dim: usize,
    factor: Vec<f64>,
}

impl VolFn for ConstantVol {
    fn dim(&self) -> usize {
        self.dim
    }

    fn factor(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.factor);
        Ok(())
    }

    fn constant_factor(&self) -> Option<&[f64]> {
        Some(&self.factor)
    }
}

struct PointwiseVol<F> {
    dim: usize,
    f: F,
}

impl<F> VolFn for PointwiseVol<F>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn factor(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(t, x, out)
    }
}

#[derive(Clone)]
pub struct VolatilityField {
    inner: Arc<dyn VolFn>,
    label: Arc<str>,
}

impl std::fmt::Debug for VolatilityField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VolatilityField")
            .field("label", &self.label)
            .field("dim", &self.dim())
            .finish()
    }
}

impl VolatilityField {
    pub fn new(inner: impl VolFn + 'static, label: impl Into<String>) -> Self {
        Self {
            inner: Arc::new(inner),
            label: label.into().into(),
        }
    }

    /// Constant lower-triangular factor. The diagonal must be positive so
    /// that `Σ` is positive definite.
    pub fn constant(dim: usize, factor: Vec<f64>) -> Result<Self> {
        if factor.len() != dim * dim {
            return Err(Error::invalid(format!(
                "volatility factor needs {} entries, got {}",
                dim * dim,
                factor.len()
            )));
        }
        for i in 0..dim {
            if !(factor[i * dim + i] > 0.0) {
                return Err(Error::invalid("volatility factor needs a positive diagonal"));
            }
            if (i + 1..dim).any(|j| factor[i * dim + j] != 0.0) {
                return Err(Error::invalid("volatility factor must be lower triangular"));
            }
        }
        Ok(Self::new(ConstantVol { dim, factor }, "constant"))
    }

    pub fn scalar(sigma: f64) -> Result<Self> {
        Self::constant(1, vec![sigma])
    }

    pub fn identity(dim: usize) -> Self {
        let mut f = vec![0.0; dim * dim];
        (0..dim).for_each(|i| f[i * dim + i] = 1.0);
        Self::new(ConstantVol { dim, factor: f }, "identity")
    }

    pub fn from_fn<F>(dim: usize, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(f64, &[f64], &mut [f64]) -> Result<()> + Send + Sync + 'static,
    {
        Self::new(PointwiseVol { dim, f }, label)
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn constant_factor(&self) -> Option<&[f64]> {
        self.inner.constant_factor()
    }

    pub fn factor_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner.factor(t, x, out)
    }

    pub fn factor_batch(&self, t: f64, states: ArrayView2<f64>, out: &mut [f64]) -> Result<()> {
        self.inner.factor_batch(t, states, out)
    }

    pub fn factor(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut out = vec![0.0; d * d];
        self.inner.factor(t, x, &mut out)?;
        Ok(out)
    }

    /// `Σ(t, x) = σ σ^T`.
    pub fn covariance(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        let l = self.factor(t, x)?;
        let mut out = vec![0.0; d * d];
        linalg::gram_lower(&l, d, &mut out);
        Ok(out)
    }
}

/// Reusable per-node factor lookup that skips evaluation for constant `σ`.
pub(crate) struct FactorCache<'a> {
    vol: &'a VolatilityField,
    constant: Option<&'a [f64]>,
    buf: Vec<f64>,
    dd: usize,
}

impl<'a> FactorCache<'a> {
    pub(crate) fn new(vol: &'a VolatilityField) -> Self {
        let d = vol.dim();
        Self {
            vol,
            constant: vol.constant_factor(),
            buf: vec![0.0; d * d],
            dd: d * d,
        }
    }

    pub(crate) fn at(&mut self, t: f64, x: &[f64]) -> Result<&[f64]> {
        match self.constant {
            Some(c) => Ok(c),
            None => {
                self.vol.factor_into(t, x, &mut self.buf[..self.dd])?;
                Ok(&self.buf[..self.dd])
            }
        }
    }

    /// Evaluates the factor at every row of `states`; read back with [`Self::row`].
    pub(crate) fn load(&mut self, t: f64, states: ArrayView2<f64>) -> Result<()> {
        if self.constant.is_none() {
            self.buf.resize(states.nrows() * self.dd, 0.0);
            self.vol.factor_batch(t, states, &mut self.buf)?;
        }
        Ok(())
    }

    /// Evaluates the factor along paths `range` of a batch at every step
    /// but the last; row `(m − range.start) · N + i` holds node `i` of path `m`.
    pub(crate) fn load_paths(&mut self, batch: &PathBatch, range: std::ops::Range<usize>) -> Result<()> {
        if self.constant.is_some() {
            return Ok(());
        }
        let n = batch.grid().steps();
        let len = range.len();
        self.buf.resize(len * n * self.dd, 0.0);
        let mut slice = vec![0.0; len * self.dd];
        for i in 0..n {
            let states = batch.paths().slice(s![range.clone(), i, ..]);
            self.vol.factor_batch(batch.grid().t(i), states, &mut slice)?;
            for local in 0..len {
                let dst = (local * n + i) * self.dd;
                self.buf[dst..dst + self.dd].copy_from_slice(&slice[local * self.dd..(local + 1) * self.dd]);
            }
        }
        Ok(())
    }

    pub(crate) fn row(&self, r: usize) -> &[f64] {
        match self.constant {
            Some(c) => c,
            None => &self.buf[r * self.dd..(r + 1) * self.dd],
        }
    }
}

struct AverageDrift {
    experts: Vec<DriftField>,
    weights: Vec<f64>,
}

impl DriftFn for AverageDrift {
    fn dim(&self) -> usize {
        self.experts[0].dim()
    }

    fn eval_batch(&self, t: f64, states: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) -> Result<()> {
        let mut tmp = Array2::zeros(out.raw_dim());
        for (k, (expert, &w)) in self.experts.iter().zip(&self.weights).enumerate() {
            expert.eval_batch(t, states, tmp.view_mut())?;
            if k == 0 {
                out.zip_mut_with(&tmp, |o, &v| *o = w * v);
            } else {
                out.zip_mut_with(&tmp, |o, &v| *o += w * v);
            }
        }
        Ok(())
    }
}

/// `K` expert drifts sharing one volatility, with agent weights `π`.
#[derive(Clone, Debug)]
pub struct ExpertEnsemble {
    experts: Vec<DriftField>,
    vol: VolatilityField,
    weights: Vec<f64>,
    x0: Vec<f64>,
    average: DriftField,
}

/// Tolerance on `Σ π_k = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

impl ExpertEnsemble {
    pub fn new(
        experts: Vec<DriftField>,
        vol: VolatilityField,
        weights: Vec<f64>,
        x0: Vec<f64>,
    ) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::invalid("an ensemble needs at least one expert"));
        }
        if experts.len() != weights.len() {
            return Err(Error::invalid(format!(
                "{} experts but {} weights",
                experts.len(),
                weights.len()
            )));
        }
        let d = vol.dim();
        if let Some(e) = experts.iter().find(|e| e.dim() != d) {
            return Err(Error::invalid(format!(
                "expert `{}` has dimension {}, volatility has {d}",
                e.label(),
                e.dim()
            )));
        }
        if x0.len() != d {
            return Err(Error::invalid(format!("x0 has {} entries, state dimension is {d}", x0.len())));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::invalid("weights must lie in [0, 1]"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("weights sum to {total}, expected 1")));
        }
        let average = DriftField::new(
            AverageDrift {
                experts: experts.clone(),
                weights: weights.clone(),
            },
            if experts.iter().all(|e| e.kind() == DriftKind::ClosedForm) {
                DriftKind::ClosedForm
            } else {
                DriftKind::Neural
            },
            "average",
        );
        Ok(Self {
            experts,
            vol,
            weights,
            x0,
            average,
        })
    }

    pub fn experts(&self) -> &[DriftField] {
        &self.experts
    }

    pub fn vol(&self) -> &VolatilityField {
        &self.vol
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn dim(&self) -> usize {
        self.vol.dim()
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// The average drift `μ̄ = Σ_k π_k μ^(k)`. The same handle is returned on
    /// every call, so batches simulated under it are recognised downstream.
    pub fn average_drift(&self) -> &DriftField {
        &self.average
    }

    pub fn varsigma(&self) -> Varsigma {
        Varsigma {
            experts: self.experts.clone(),
            weights: self.weights.clone(),
            vol: self.vol.clone(),
        }
    }

    /// Same models with a new starting point.
    pub fn with_x0(&self, x0: Vec<f64>) -> Result<Self> {
        Self::new(self.experts.clone(), self.vol.clone(), self.weights.clone(), x0)
    }

    /// Expert drifts at time `t` over `states`, one `(rows, d)` array per expert.
    pub fn expert_values(&self, t: f64, states: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.experts
            .iter()
            .map(|e| {
                let mut out = Array2::zeros(states.raw_dim());
                e.eval_batch(t, states, out.view_mut())?;
                Ok(out)
            })
            .collect()
    }
}

pub fn average_drift(ensemble: &ExpertEnsemble) -> DriftField {
    ensemble.average_drift().clone()
}

pub fn varsigma(ensemble: &ExpertEnsemble) -> Varsigma {
    ensemble.varsigma()
}

/// `ς(t, x) = ½ Σ_k π_k (μ^(k) − μ̄)^T Σ^{-1} (μ^(k) − μ̄)`.
#[derive(Clone)]
pub struct Varsigma {
    experts: Vec<DriftField>,
    weights: Vec<f64>,
    vol: VolatilityField,
}

impl Varsigma {
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64> {
        let d = self.vol.dim();
        let states = ArrayView2::from_shape((1, d), x).map_err(|_| Error::invalid("state dimension mismatch"))?;
        let mut out = [0.0];
        self.eval_batch(t, states, &mut out)?;
        Ok(out[0])
    }

    pub fn eval_batch(&self, t: f64, states: ArrayView2<f64>, out: &mut [f64]) -> Result<()> {
        let values: Vec<Array2<f64>> = self
            .experts
            .iter()
            .map(|e| {
                let mut o = Array2::zeros(states.raw_dim());
                e.eval_batch(t, states, o.view_mut()).map(|_| o)
            })
            .collect::<Result<_>>()?;
        varsigma_from_values(&values, &self.weights, &self.vol, t, states, out)
    }
}

/// `ς` at each row given precomputed expert drift values at those rows.
pub fn varsigma_from_values(
    expert_values: &[Array2<f64>],
    weights: &[f64],
    vol: &VolatilityField,
    t: f64,
    states: ArrayView2<f64>,
    out: &mut [f64],
) -> Result<()> {
    let d = vol.dim();
    let mut factors = FactorCache::new(vol);
    let mut mean = vec![0.0; d];
    let mut dev = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    factors.load(t, states)?;
    for (r, o) in out.iter_mut().enumerate().take(states.nrows()) {
        mean.iter_mut().for_each(|m| *m = 0.0);
        for (vals, &w) in expert_values.iter().zip(weights) {
            for j in 0..d {
                mean[j] += w * vals[[r, j]];
            }
        }
        let l = factors.row(r);
        let mut acc = 0.0;
        for (vals, &w) in expert_values.iter().zip(weights) {
            for j in 0..d {
                dev[j] = vals[[r, j]] - mean[j];
            }
            acc += w * linalg::mahalanobis_sq(l, d, &dev, &mut scratch)?;
        }
        *o = 0.5 * acc;
    }
    Ok(())
}

/// How the starting state of each path is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialStates {
    /// Every path starts at the same point.
    Fixed(Vec<f64>),
    /// Each path starts uniformly inside the box, drawn from the
    /// `(seed, global path index)` uniform stream.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// Uniform in the box at a node drawn uniformly from `0..steps`; the
    /// path stays at its starting state, with zero increments, until then.
    StaggeredBox { lo: Vec<f64>, hi: Vec<f64> },
}

impl InitialStates {
    fn dim(&self) -> usize {
        match self {
            InitialStates::Fixed(x) => x.len(),
            InitialStates::UniformBox { lo, .. } | InitialStates::StaggeredBox { lo, .. } => lo.len(),
        }
    }

    /// Starting state and starting node of global path `path`.
    pub fn start_for(&self, seed: u64, path: usize, steps: usize, out: &mut [f64]) -> usize {
        match self {
            InitialStates::Fixed(x) => {
                out.copy_from_slice(x);
                0
            }
            InitialStates::UniformBox { lo, hi } | InitialStates::StaggeredBox { lo, hi } => {
                let mut u = Uniforms::new(seed, path as u64);
                for j in 0..lo.len() {
                    out[j] = lo[j] + (hi[j] - lo[j]) * u.next_unit();
                }
                match self {
                    InitialStates::StaggeredBox { .. } => ((u.next_unit() * steps as f64) as usize).min(steps - 1),
                    _ => 0,
                }
            }
        }
    }
}

/// `M` Euler-Maruyama paths under one drift, with the increments that
/// generated them and the drift values at every left endpoint.
#[derive(Clone, Debug)]
pub struct PathBatch {
    grid: TimeGrid,
    paths: Array3<f64>,
    increments: Array3<f64>,
    drift_values: Array3<f64>,
    generating_drift: DriftField,
    vol: VolatilityField,
    master_seed: u64,
    path_offset: usize,
}

impl PathBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// `(M, N + 1, d)` states.
    pub fn paths(&self) -> &Array3<f64> {
        &self.paths
    }

    /// `(M, N, d)` Brownian increments, entry `i` driving step `t_i -> t_{i+1}`.
    pub fn increments(&self) -> &Array3<f64> {
        &self.increments
    }

    /// `(M, N, d)` generating drift evaluated at `(t_i, X_{t_i})`.
    pub fn drift_values(&self) -> &Array3<f64> {
        &self.drift_values
    }

    pub fn generating_drift(&self) -> &DriftField {
        &self.generating_drift
    }

    pub fn vol(&self) -> &VolatilityField {
        &self.vol
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    /// Global index of the first path in this batch.
    pub fn path_offset(&self) -> usize {
        self.path_offset
    }

    pub fn num_paths(&self) -> usize {
        self.paths.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.paths.shape()[2]
    }

    /// States at node `i` of every path, `(M, d)`.
    pub fn states_at(&self, i: usize) -> ArrayView2<'_, f64> {
        self.paths.slice(s![.., i, ..])
    }

    pub fn terminal_states(&self) -> ArrayView2<'_, f64> {
        self.states_at(self.grid.steps())
    }

    /// The first `m` paths as their own batch.
    pub fn head(&self, m: usize) -> PathBatch {
        let m = m.min(self.num_paths());
        PathBatch {
            grid: self.grid.clone(),
            paths: self.paths.slice(s![..m, .., ..]).to_owned(),
            increments: self.increments.slice(s![..m, .., ..]).to_owned(),
            drift_values: self.drift_values.slice(s![..m, .., ..]).to_owned(),
            generating_drift: self.generating_drift.clone(),
            vol: self.vol.clone(),
            master_seed: self.master_seed,
            path_offset: self.path_offset,
        }
    }

    /// Largest `|X_{i+1} − (X_i + μ Δt + σ ΔW)|` over the batch, recomputed
    /// from the stored values with the same arithmetic as the simulator.
    pub fn recursion_residual(&self) -> Result<f64> {
        let d = self.dim();
        let dt = self.grid.dt();
        let mut factors = FactorCache::new(&self.vol);
        let mut worst: f64 = 0.0;
        let mut x = vec![0.0; d];
        let mut next = vec![0.0; d];
        for m in 0..self.num_paths() {
            for i in 0..self.grid.steps() {
                x.iter_mut()
                    .zip(self.paths.slice(s![m, i, ..]).iter())
                    .for_each(|(a, b)| *a = *b);
                let l = factors.at(self.grid.t(i), &x)?;
                euler_update(
                    &x,
                    self.drift_values.slice(s![m, i, ..]).as_slice().unwrap(),
                    l,
                    self.increments.slice(s![m, i, ..]).as_slice().unwrap(),
                    dt,
                    &mut next,
                );
                for j in 0..d {
                    worst = worst.max((next[j] - self.paths[[m, i + 1, j]]).abs());
                }
            }
        }
        Ok(worst)
    }

    /// CSV `path,step,t,x_1..x_d`, one row per `(m, i)`, 17 significant digits.
    /// `max_paths` limits the export to the leading paths.
    pub fn write_paths_csv<W: Write>(&self, mut w: W, max_paths: Option<usize>) -> Result<()> {
        let d = self.dim();
        let mut header = String::from("path,step,t");
        (1..=d).for_each(|j| header.push_str(&format!(",x_{j}")));
        writeln!(w, "{header}")?;
        let m_max = max_paths.unwrap_or(usize::MAX).min(self.num_paths());
        for m in 0..m_max {
            for i in 0..=self.grid.steps() {
                let mut line = format!("{},{},{}", m + self.path_offset, i, fmt17(self.grid.t(i)));
                for j in 0..d {
                    line.push(',');
                    line.push_str(&fmt17(self.paths[[m, i, j]]));
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }

    /// CSV `path,step,t,dw_1..dw_d`; row `(m, i)` holds the increment over
    /// `[t_i, t_{i+1}]`.
    pub fn write_increments_csv<W: Write>(&self, mut w: W, max_paths: Option<usize>) -> Result<()> {
        let d = self.dim();
        let mut header = String::from("path,step,t");
        (1..=d).for_each(|j| header.push_str(&format!(",dw_{j}")));
        writeln!(w, "{header}")?;
        let m_max = max_paths.unwrap_or(usize::MAX).min(self.num_paths());
        for m in 0..m_max {
            for i in 0..self.grid.steps() {
                let mut line = format!("{},{},{}", m + self.path_offset, i, fmt17(self.grid.t(i)));
                for j in 0..d {
                    line.push(',');
                    line.push_str(&fmt17(self.increments[[m, i, j]]));
                }
                writeln!(w, "{line}")?;
            }
        }
        Ok(())
    }
}

#[inline]
fn euler_update(x: &[f64], mu: &[f64], l: &[f64], dw: &[f64], dt: f64, out: &mut [f64]) {
    let d = x.len();
    for r in 0..d {
        let mut noise = 0.0;
        for c in 0..=r {
            noise += l[r * d + c] * dw[c];
        }
        out[r] = x[r] + mu[r] * dt + noise;
    }
}

struct ChunkOutput {
    paths: Array3<f64>,
    increments: Array3<f64>,
    drift_values: Array3<f64>,
}

fn simulate_chunk(
    drift: &DriftField,
    vol: &VolatilityField,
    grid: &TimeGrid,
    paths: Range<usize>,
    init: &InitialStates,
    seed: u64,
) -> Result<ChunkOutput> {
    let d = drift.dim();
    let n = grid.steps();
    let len = paths.len();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut out_paths = Array3::zeros((len, n + 1, d));
    let mut out_inc = Array3::zeros((len, n, d));
    let mut out_mu = Array3::zeros((len, n, d));
    let mut normals: Vec<PathNormals> = paths
        .clone()
        .map(|m| PathNormals::new(seed, m as u64, d, 0))
        .collect();
    let mut x0 = vec![0.0; d];
    let mut first = vec![0usize; len];
    for (local, m) in paths.clone().enumerate() {
        first[local] = init.start_for(seed, m, n, &mut x0);
        for j in 0..d {
            out_paths[[local, 0, j]] = x0[j];
        }
    }
    let mut factors = FactorCache::new(vol);
    let mut mu = Array2::zeros((len, d));
    let mut x = vec![0.0; d];
    let mut dw = vec![0.0; d];
    let mut next = vec![0.0; d];
    let mut mu_row = vec![0.0; d];
    for i in 0..n {
        let t = grid.t(i);
        drift.eval_batch(t, out_paths.slice(s![.., i, ..]), mu.view_mut())?;
        factors.load(t, out_paths.slice(s![.., i, ..]))?;
        for local in 0..len {
            if i < first[local] {
                for j in 0..d {
                    out_paths[[local, i + 1, j]] = out_paths[[local, i, j]];
                }
                continue;
            }
            for j in 0..d {
                x[j] = out_paths[[local, i, j]];
                mu_row[j] = mu[[local, j]];
                dw[j] = normals[local].next_normal() * sqrt_dt;
            }
            let l = factors.row(local);
            euler_update(&x, &mu_row, l, &dw, dt, &mut next);
            if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND) {
                return Err(Error::SimulationDiverged {
                    path: paths.start + local,
                    step: i + 1,
                });
            }
            for j in 0..d {
                out_paths[[local, i + 1, j]] = next[j];
                out_inc[[local, i, j]] = dw[j];
                out_mu[[local, i, j]] = mu_row[j];
            }
        }
    }
    Ok(ChunkOutput {
        paths: out_paths,
        increments: out_inc,
        drift_values: out_mu,
    })
}

/// Simulates global paths `range` (so that a sub-range reproduces the
/// matching rows of a larger batch exactly).
pub fn simulate_path_range(
    drift: &DriftField,
    vol: &VolatilityField,
    grid: &TimeGrid,
    range: Range<usize>,
    init: &InitialStates,
    seed: u64,
) -> Result<PathBatch> {
    let d = drift.dim();
    if range.is_empty() {
        return Err(Error::invalid("need at least one path"));
    }
    if vol.dim() != d || init.dim() != d {
        return Err(Error::invalid(format!(
            "dimension mismatch: drift {d}, volatility {}, initial state {}",
            vol.dim(),
            init.dim()
        )));
    }
    let starts: Vec<usize> = range.clone().step_by(SIM_CHUNK).collect();
    let chunks: Vec<Result<ChunkOutput>> = starts
        .par_iter()
        .map(|&s| simulate_chunk(drift, vol, grid, s..(s + SIM_CHUNK).min(range.end), init, seed))
        .collect();

    let m = range.len();
    let n = grid.steps();
    let mut paths = Array3::zeros((m, n + 1, d));
    let mut increments = Array3::zeros((m, n, d));
    let mut drift_values = Array3::zeros((m, n, d));
    let mut first_failure: Option<(usize, usize)> = None;
    let mut other_error = None;
    for (c, &s) in chunks.into_iter().zip(&starts) {
        match c {
            Ok(out) => {
                let lo = s - range.start;
                let hi = lo + out.paths.shape()[0];
                paths.slice_mut(s![lo..hi, .., ..]).assign(&out.paths);
                increments.slice_mut(s![lo..hi, .., ..]).assign(&out.increments);
                drift_values.slice_mut(s![lo..hi, .., ..]).assign(&out.drift_values);
            }
            Err(Error::SimulationDiverged { path, step }) => {
                let better = first_failure.is_none_or(|(p, st)| (step, path) < (st, p));
                if better {
                    first_failure = Some((path, step));
                }
            }
            Err(e) => {
                other_error.get_or_insert(e);
            }
        }
    }
    if let Some(e) = other_error {
        return Err(e);
    }
    if let Some((path, step)) = first_failure {
        return Err(Error::SimulationDiverged { path, step });
    }
    Ok(PathBatch {
        grid: grid.clone(),
        paths,
        increments,
        drift_values,
        generating_drift: drift.clone(),
        vol: vol.clone(),
        master_seed: seed,
        path_offset: range.start,
    })
}

/// `M` paths from a common start `x0`.
pub fn simulate_paths(
    drift: &DriftField,
    vol: &VolatilityField,
    grid: &TimeGrid,
    num_paths: usize,
    x0: &[f64],
    seed: u64,
) -> Result<PathBatch> {
    simulate_path_range(drift, vol, grid, 0..num_paths, &InitialStates::Fixed(x0.to_vec()), seed)
}

/// `ς(t_i, X_{t_i})` at every left endpoint, `(M, N)`.
pub fn varsigma_along(ensemble: &ExpertEnsemble, batch: &PathBatch) -> Result<Array2<f64>> {
    let (m, n) = (batch.num_paths(), batch.grid().steps());
    let mut out = Array2::zeros((m, n));
    let mut col = vec![0.0; m];
    for i in 0..n {
        let t = batch.grid().t(i);
        let states = batch.states_at(i);
        let vals = ensemble.expert_values(t, states)?;
        varsigma_from_values(&vals, ensemble.weights(), ensemble.vol(), t, states, &mut col)?;
        out.column_mut(i).iter_mut().zip(&col).for_each(|(o, v)| *o = *v);
    }
    Ok(out)
}

/// Per-path `½ Σ_k π_k Σ_i (θ − μ^(k))^T Σ^{-1} (θ − μ^(k)) Δt` at the left
/// endpoints, with `θ` the drift that generated the batch.
pub fn weighted_kl_per_path(ensemble: &ExpertEnsemble, theta: &DriftField, batch: &PathBatch) -> Result<Vec<f64>> {
    if !batch.generating_drift().same_as(theta) {
        return Err(Error::invalid(format!(
            "batch was generated under `{}`, not `{}`",
            batch.generating_drift().label(),
            theta.label()
        )));
    }
    if ensemble.dim() != batch.dim() {
        return Err(Error::invalid("ensemble and batch dimensions differ"));
    }
    let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
    let dt = batch.grid().dt();
    let mut per_path = vec![0.0; m];
    let mut factors = FactorCache::new(ensemble.vol());
    let mut dev = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    for i in 0..n {
        let t = batch.grid().t(i);
        let states = batch.states_at(i);
        let expert_vals = ensemble.expert_values(t, states)?;
        factors.load(t, states)?;
        for (r, acc) in per_path.iter_mut().enumerate() {
            let l = factors.row(r);
            let mut node = 0.0;
            for (vals, &w) in expert_vals.iter().zip(ensemble.weights()) {
                for j in 0..d {
                    dev[j] = batch.drift_values()[[r, i, j]] - vals[[r, j]];
                }
                node += w * linalg::mahalanobis_sq(l, d, &dev, &mut scratch)?;
            }
            *acc += 0.5 * node * dt;
        }
    }
    Ok(per_path)
}

/// Monte Carlo estimate of `Σ_k π_k E^{Q[θ]}[½ ∫ Δθ^T Σ^{-1} Δθ dt]` on a
/// batch simulated under `θ`.
pub fn estimate_weighted_kl(ensemble: &ExpertEnsemble, theta: &DriftField, batch: &PathBatch) -> Result<McEstimate> {
    Ok(McEstimate::from_samples(&weighted_kl_per_path(ensemble, theta, batch)?))
}

/// Per-path mean of a column-major scalar series, used by reports.
pub fn column_means(values: &Array2<f64>) -> Vec<f64> {
    values.mean_axis(Axis(0)).map(|a| a.to_vec()).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn trend_and_cycle_experts() -> (DriftField, DriftField) {
        let mu1 = DriftField::scalar("mu1", |t, x| 4.0 * t - 0.7 * x);
        let mu2 = DriftField::scalar("mu2", |t, x| {
            3.0 * (t + (4.0 * std::f64::consts::PI * t + std::f64::consts::PI / 12.0).sin() - x)
        });
        (mu1, mu2)
    }

    #[test]
    fn grid_nodes_and_spacing() {
        let g = build_time_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let g = build_time_grid(1.0, 1000).unwrap();
        assert_relative_eq!(g.dt(), 0.001, max_relative = 1e-15);
        assert_eq!(g.t(1000), 1.0);
        let g = build_time_grid(1.0 / 12.0, 28).unwrap();
        assert_relative_eq!(g.dt(), 1.0 / 336.0, max_relative = 1e-15);
        assert!(g.nodes().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(matches!(build_time_grid(0.0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_time_grid(-1.0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_time_grid(1.0, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn ensemble_validation() {
        let (mu1, mu2) = trend_and_cycle_experts();
        let vol = VolatilityField::scalar(1.0).unwrap();
        assert!(ExpertEnsemble::new(vec![mu1.clone(), mu2.clone()], vol.clone(), vec![0.5, 0.4], vec![0.0]).is_err());
        assert!(ExpertEnsemble::new(vec![mu1.clone()], vol.clone(), vec![1.2], vec![0.0]).is_err());
        assert!(ExpertEnsemble::new(vec![], vol.clone(), vec![], vec![0.0]).is_err());
        assert!(ExpertEnsemble::new(vec![mu1, mu2], vol, vec![0.5, 0.5], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn average_drift_examples() {
        let (mu1, mu2) = trend_and_cycle_experts();
        let vol = VolatilityField::scalar(1.0).unwrap();
        let e = ExpertEnsemble::new(vec![mu1.clone(), mu2.clone()], vol.clone(), vec![0.5, 0.5], vec![0.0]).unwrap();
        let v = average_drift(&e).eval(0.0, &[0.0]).unwrap()[0];
        // ½·3 sin(15°) with sin(15°) = (√6 − √2)/4.
        let oracle = 1.5 * (6f64.sqrt() - 2f64.sqrt()) / 4.0;
        assert_relative_eq!(v, oracle, max_relative = 1e-12);

        let single = ExpertEnsemble::new(vec![mu1.clone()], vol.clone(), vec![1.0], vec![0.0]).unwrap();
        for &(t, x) in &[(0.1, 0.3), (0.7, -2.0)] {
            assert_eq!(
                average_drift(&single).eval(t, &[x]).unwrap(),
                mu1.eval(t, &[x]).unwrap()
            );
        }

        let two = DriftField::constant(vec![2.0], "two");
        let zero = DriftField::constant(vec![0.0], "zero");
        let e = ExpertEnsemble::new(vec![two, zero], vol, vec![0.5, 0.5], vec![0.0]).unwrap();
        assert_eq!(average_drift(&e).eval(0.3, &[5.0]).unwrap(), vec![1.0]);
    }

    #[test]
    fn varsigma_examples() {
        let vol = VolatilityField::scalar(1.0).unwrap();
        let two = DriftField::constant(vec![2.0], "two");
        let zero = DriftField::constant(vec![0.0], "zero");
        let e = ExpertEnsemble::new(vec![two.clone(), zero], vol.clone(), vec![0.5, 0.5], vec![0.0]).unwrap();
        assert_relative_eq!(e.varsigma().eval(0.2, &[1.0]).unwrap(), 0.5, max_relative = 1e-15);

        let single = ExpertEnsemble::new(vec![two.clone()], vol.clone(), vec![1.0], vec![0.0]).unwrap();
        assert_eq!(single.varsigma().eval(0.2, &[1.0]).unwrap(), 0.0);

        let same = ExpertEnsemble::new(vec![two.clone(), two], vol, vec![0.3, 0.7], vec![0.0]).unwrap();
        assert_eq!(same.varsigma().eval(0.9, &[-3.0]).unwrap(), 0.0);
    }

    #[test]
    fn varsigma_uses_covariance_inverse() {
        // σ = 2 scales ς by 1/4.
        let vol = VolatilityField::scalar(2.0).unwrap();
        let two = DriftField::constant(vec![2.0], "two");
        let zero = DriftField::constant(vec![0.0], "zero");
        let e = ExpertEnsemble::new(vec![two, zero], vol, vec![0.5, 0.5], vec![0.0]).unwrap();
        assert_relative_eq!(e.varsigma().eval(0.0, &[0.0]).unwrap(), 0.125, max_relative = 1e-15);
    }

    #[test]
    fn singular_volatility_is_a_linear_algebra_error() {
        let vol = VolatilityField::from_fn(1, "vanishing", |_, _, out| {
            out[0] = 0.0;
            Ok(())
        });
        let two = DriftField::constant(vec![2.0], "two");
        let zero = DriftField::constant(vec![0.0], "zero");
        let e = ExpertEnsemble::new(vec![two, zero], vol, vec![0.5, 0.5], vec![0.0]).unwrap();
        assert!(matches!(e.varsigma().eval(0.0, &[0.0]), Err(Error::LinearAlgebra(_))));
    }

    #[test]
    fn simulation_is_deterministic_and_reconstructs() {
        let (mu1, _) = trend_and_cycle_experts();
        let vol = VolatilityField::scalar(1.0).unwrap();
        let grid = build_time_grid(1.0, 50).unwrap();
        let a = simulate_paths(&mu1, &vol, &grid, 300, &[0.0], 11).unwrap();
        let b = simulate_paths(&mu1, &vol, &grid, 300, &[0.0], 11).unwrap();
        assert_eq!(a.paths(), b.paths());
        assert_eq!(a.increments(), b.increments());
        assert_eq!(a.recursion_residual().unwrap(), 0.0);
        assert!(a.states_at(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn slicing_reproduces_rows() {
        let (mu1, _) = trend_and_cycle_experts();
        let vol = VolatilityField::scalar(1.0).unwrap();
        let grid = build_time_grid(1.0, 20).unwrap();
        let full = simulate_paths(&mu1, &vol, &grid, 600, &[0.0], 5).unwrap();
        let part = simulate_path_range(&mu1, &vol, &grid, 300..420, &InitialStates::Fixed(vec![0.0]), 5).unwrap();
        assert_eq!(part.paths(), &full.paths().slice(s![300..420, .., ..]).to_owned());
        assert_eq!(part.path_offset(), 300);
    }

    #[test]
    fn staggered_paths_hold_until_their_start() {
        let (mu1, _) = trend_and_cycle_experts();
        let vol = VolatilityField::scalar(1.0).unwrap();
        let grid = build_time_grid(1.0, 20).unwrap();
        let init = InitialStates::StaggeredBox {
            lo: vec![-1.0],
            hi: vec![2.0],
        };
        let b = simulate_path_range(&mu1, &vol, &grid, 0..200, &init, 8).unwrap();
        assert_eq!(b.recursion_residual().unwrap(), 0.0);
        let mut x = [0.0];
        let mut starts = Vec::new();
        for p in 0..200 {
            let k = init.start_for(8, p, 20, &mut x);
            assert!((-1.0..2.0).contains(&x[0]));
            for i in 0..=k {
                assert_eq!(b.paths()[[p, i, 0]], x[0]);
            }
            assert!(b.increments().slice(s![p, ..k, 0]).iter().all(|&w| w == 0.0));
            assert_ne!(b.increments()[[p, k, 0]], 0.0);
            starts.push(k);
        }
        assert_eq!(*starts.iter().min().unwrap(), 0);
        assert_eq!(*starts.iter().max().unwrap(), 19);
    }

    #[test]
    fn divergence_is_reported_with_location() {
        let blowup = DriftField::scalar("explosive", |_, x| 50.0 * x + 1.0);
        let vol = VolatilityField::scalar(1.0).unwrap();
        let grid = build_time_grid(1.0, 100).unwrap();
        match simulate_paths(&blowup, &vol, &grid, 10, &[0.0], 1) {
            Err(Error::SimulationDiverged { step, .. }) => assert!(step > 1 && step <= 100),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn kl_requires_matching_generator() {
        let (mu1, mu2) = trend_and_cycle_experts();
        let vol = VolatilityField::scalar(1.0).unwrap();
        let e = ExpertEnsemble::new(vec![mu1.clone()], vol.clone(), vec![1.0], vec![0.0]).unwrap();
        let grid = build_time_grid(1.0, 10).unwrap();
        let batch = simulate_paths(&mu1, &vol, &grid, 50, &[0.0], 3).unwrap();
        assert!(matches!(estimate_weighted_kl(&e, &mu2, &batch), Err(Error::InvalidArgument(_))));
        let kl = estimate_weighted_kl(&e, &mu1, &batch).unwrap();
        assert_eq!(kl.mean, 0.0);
    }

    #[test]
    fn constant_drift_gap_has_closed_form_kl() {
        // θ = 1, μ = 0, σ = 1, T = 1: KL = ½.
        let theta = DriftField::constant(vec![1.0], "one");
        let zero = DriftField::constant(vec![0.0], "zero");
        let vol = VolatilityField::scalar(1.0).unwrap();
        let e = ExpertEnsemble::new(vec![zero], vol.clone(), vec![1.0], vec![0.0]).unwrap();
        let grid = build_time_grid(1.0, 10).unwrap();
        let batch = simulate_paths(&theta, &vol, &grid, 20, &[0.0], 3).unwrap();
        let kl = estimate_weighted_kl(&e, &theta, &batch).unwrap();
        assert_relative_eq!(kl.mean, 0.5, max_relative = 1e-12);
    }

    #[test]
    fn paths_csv_layout() {
        let zero = DriftField::constant(vec![0.0, 0.0], "zero");
        let vol = VolatilityField::identity(2);
        let grid = build_time_grid(1.0, 2).unwrap();
        let batch = simulate_paths(&zero, &vol, &grid, 3, &[0.0, 1.0], 3).unwrap();
        let mut buf = Vec::new();
        batch.write_paths_csv(&mut buf, Some(2)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "path,step,t,x_1,x_2");
        assert_eq!(lines.len(), 1 + 2 * 3);
        let fields: Vec<_> = lines[1].split(',').collect();
        assert_eq!(fields[..2], ["0", "0"]);
        assert_eq!(fields[4].parse::<f64>().unwrap(), 1.0);
        assert_eq!(fields[2], "0.0000000000000000e0");
    }
}
