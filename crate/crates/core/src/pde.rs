//! Finite-difference solution of the one-dimensional `ω` equation
//!
//! `∂ₜω + μ̄ ∂ₓω + ½ Σ ∂ₓₓω − (ς + η₀·g) ω = 0`, `ω(T, x) = exp(−η₁·f(x))`,
//!
//! swept backward in time by Crank-Nicolson after a short implicit-Euler
//! start. The boundary rows impose `∂ₓₓω = 0`.

use std::io::Write;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::lagrange::EtaSolution;
use crate::sde::{DriftField, DriftFn, DriftKind, ExpertEnsemble, PathBatch, TimeGrid};
use crate::stats::fmt17;

/// Uniform space grid `x_j = lo + j (hi − lo) / cells`, `j = 0..=cells`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

impl SpaceGrid {
    pub fn new(lo: f64, hi: f64, cells: usize) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("space grid needs lo < hi, got [{lo}, {hi}]")));
        }
        if cells < 4 {
            return Err(Error::invalid("space grid needs at least four cells"));
        }
        Ok(Self { lo, hi, cells })
    }

    /// `[min − 2 sd, max + 2 sd]` of every state visited by a pilot batch,
    /// with cells of width about `dx`.
    pub fn from_pilot(batch: &PathBatch, dx: f64) -> Result<Self> {
        if batch.dim() != 1 {
            return Err(Error::invalid("pilot domains are one-dimensional"));
        }
        let xs = batch.paths().iter();
        let (mut lo, mut hi, mut s1, mut s2, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0.0, 0.0);
        for &x in xs {
            lo = lo.min(x);
            hi = hi.max(x);
            s1 += x;
            s2 += x * x;
            n += 1.0;
        }
        let sd = (s2 / n - (s1 / n).powi(2)).max(0.0).sqrt();
        let (lo, hi) = (lo - 2.0 * sd, hi + 2.0 * sd);
        let cells = ((hi - lo) / dx).ceil().max(4.0) as usize;
        Self::new(lo, lo + cells as f64 * dx, cells)
    }

    pub fn dx(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        if j == self.cells {
            self.hi
        } else {
            self.lo + j as f64 * self.dx()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.cells).map(|j| self.x(j)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeConfig {
    /// Leading backward steps each replaced by two implicit-Euler half-steps.
    pub rannacher_steps: usize,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self { rannacher_steps: 1 }
    }
}

/// `ω(t_i, x_j)` with the coefficients it was solved with.
#[derive(Debug, Clone)]
pub struct OmegaGrid {
    pub space: SpaceGrid,
    pub time: TimeGrid,
    /// `(N + 1, J + 1)`.
    pub values: Array2<f64>,
    /// `μ̄(t_i, x_j)`.
    mubar: Array2<f64>,
    /// `Σ(t_i, x_j)`.
    cov: Array2<f64>,
}

impl OmegaGrid {
    pub fn omega(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    /// `L = −log ω` at a node.
    pub fn l_value(&self, i: usize, j: usize) -> f64 {
        -self.values[[i, j]].ln()
    }

    /// Linear interpolation of `ω(t_i, ·)` at `x`.
    pub fn omega_at(&self, i: usize, x: f64) -> Result<f64> {
        let t = self.time.t(i);
        if !(x >= self.space.lo && x <= self.space.hi) {
            return Err(Error::ExtrapolationRefused { t, x });
        }
        let u = (x - self.space.lo) / self.space.dx();
        let j = (u.floor() as usize).min(self.space.cells - 1);
        let a = u - j as f64;
        Ok((1.0 - a) * self.values[[i, j]] + a * self.values[[i, j + 1]])
    }

    /// `θ = μ̄ + Σ ∂ₓω / ω` by centred differences on interior nodes
    /// `1..J−1`; `NaN` on the boundary columns.
    pub fn theta_table(&self) -> Array2<f64> {
        let (nt, nx) = self.values.dim();
        let dx = self.space.dx();
        Array2::from_shape_fn((nt, nx), |(i, j)| {
            if j == 0 || j + 1 == nx {
                f64::NAN
            } else {
                let w = &self.values;
                self.mubar[[i, j]] + self.cov[[i, j]] * (w[[i, j + 1]] - w[[i, j - 1]]) / (2.0 * dx * w[[i, j]])
            }
        })
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// CSV `t,x,omega,theta` every `time_stride` time nodes and
    /// `space_stride` space nodes; `theta` is empty on the boundary.
    pub fn write_csv<W: Write>(&self, mut w: W, time_stride: usize, space_stride: usize) -> Result<()> {
        let theta = self.theta_table();
        writeln!(w, "t,x,omega,theta")?;
        let (nt, nx) = self.values.dim();
        let mut rows: Vec<usize> = (0..nt).step_by(time_stride.max(1)).collect();
        if rows.last() != Some(&(nt - 1)) {
            rows.push(nt - 1);
        }
        for i in rows {
            for j in (0..nx).step_by(space_stride.max(1)) {
                let th = theta[[i, j]];
                let th = if th.is_nan() { String::new() } else { fmt17(th) };
                writeln!(
                    w,
                    "{},{},{},{}",
                    fmt17(self.time.t(i)),
                    fmt17(self.space.x(j)),
                    fmt17(self.values[[i, j]]),
                    th
                )?;
            }
        }
        Ok(())
    }
}

struct Coefficients {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    mubar: Vec<f64>,
    cov: Vec<f64>,
}

/// Tridiagonal generator on interior nodes `1..J−1` with the boundary
/// condition eliminated.
fn coefficients(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta0: &[f64],
    space: &SpaceGrid,
    t: f64,
) -> Result<Coefficients> {
    let nx = space.cells + 1;
    let dx = space.dx();
    let xs = space.nodes();
    let states = ArrayView2::from_shape((nx, 1), &xs).map_err(|e| Error::invalid(e.to_string()))?;
    let mut mubar = Array2::zeros((nx, 1));
    ensemble.average_drift().eval_batch(t, states, mubar.view_mut())?;
    let mut kill = vec![0.0; nx];
    ensemble.varsigma().eval_batch(t, states, &mut kill)?;
    let mut cov = vec![0.0; nx];
    for j in 0..nx {
        kill[j] += cs.running_rate(eta0, t, &xs[j..j + 1])?;
        cov[j] = ensemble.vol().covariance(t, &xs[j..j + 1])?[0];
    }
    let n = nx - 2;
    let (mut lower, mut diag, mut upper) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        let j = k + 1;
        let m = mubar[[j, 0]];
        let lo = -m / (2.0 * dx) + 0.5 * cov[j] / (dx * dx);
        let up = m / (2.0 * dx) + 0.5 * cov[j] / (dx * dx);
        let di = -cov[j] / (dx * dx) - kill[j];
        lower[k] = lo;
        diag[k] = di;
        upper[k] = up;
    }
    // ω_0 = 2ω_1 − ω_2 and ω_J = 2ω_{J−1} − ω_{J−2}.
    let lo0 = lower[0];
    diag[0] += 2.0 * lo0;
    upper[0] -= lo0;
    lower[0] = 0.0;
    let upn = upper[n - 1];
    diag[n - 1] += 2.0 * upn;
    lower[n - 1] -= upn;
    upper[n - 1] = 0.0;
    Ok(Coefficients {
        lower,
        diag,
        upper,
        mubar: mubar.column(0).to_vec(),
        cov,
    })
}

fn apply(c: &Coefficients, w: &[f64], out: &mut [f64]) {
    let n = w.len();
    for k in 0..n {
        let mut v = c.diag[k] * w[k];
        if k > 0 {
            v += c.lower[k] * w[k - 1];
        }
        if k + 1 < n {
            v += c.upper[k] * w[k + 1];
        }
        out[k] = v;
    }
}

/// Thomas algorithm for `a_k x_{k−1} + b_k x_k + c_k x_{k+1} = d_k`.
pub fn solve_tridiagonal(a: &[f64], b: &[f64], c: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    let mut denom = b[0];
    if denom == 0.0 {
        return Err(Error::SolverFailed("zero pivot in tridiagonal solve".into()));
    }
    cp[0] = c[0] / denom;
    dp[0] = d[0] / denom;
    for k in 1..n {
        denom = b[k] - a[k] * cp[k - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::SolverFailed(format!("zero pivot in tridiagonal solve at row {k}")));
        }
        cp[k] = c[k] / denom;
        dp[k] = (d[k] - a[k] * dp[k - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = dp[n - 1];
    for k in (0..n - 1).rev() {
        x[k] = dp[k] - cp[k] * x[k + 1];
    }
    Ok(x)
}

/// One backward θ-step from `w` at the later time (coefficients `old`) to the
/// earlier time (coefficients `new`) over `h`.
fn theta_step(old: &Coefficients, new: &Coefficients, w: &[f64], h: f64, theta: f64) -> Result<Vec<f64>> {
    let n = w.len();
    let mut lw = vec![0.0; n];
    apply(old, w, &mut lw);
    let rhs: Vec<f64> = w.iter().zip(&lw).map(|(a, b)| a + (1.0 - theta) * h * b).collect();
    let a: Vec<f64> = new.lower.iter().map(|v| -theta * h * v).collect();
    let b: Vec<f64> = new.diag.iter().map(|v| 1.0 - theta * h * v).collect();
    let c: Vec<f64> = new.upper.iter().map(|v| -theta * h * v).collect();
    solve_tridiagonal(&a, &b, &c, &rhs)
}

pub fn solve_omega_pde(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    space: &SpaceGrid,
    time: &TimeGrid,
) -> Result<OmegaGrid> {
    solve_omega_pde_with(ensemble, cs, eta, space, time, &PdeConfig::default())
}

pub fn solve_omega_pde_with(
    ensemble: &ExpertEnsemble,
    cs: &ConstraintSet,
    eta: &EtaSolution,
    space: &SpaceGrid,
    time: &TimeGrid,
    cfg: &PdeConfig,
) -> Result<OmegaGrid> {
    if ensemble.dim() != 1 {
        return Err(Error::invalid("the finite-difference oracle is one-dimensional"));
    }
    if eta.eta0.len() != cs.num_running() || eta.eta1.len() != cs.num_terminal() {
        return Err(Error::invalid("multipliers do not match the constraint set"));
    }
    let nx = space.cells + 1;
    let nt = time.steps() + 1;
    let xs = space.nodes();
    let mut values = Array2::zeros((nt, nx));
    let mut mubar = Array2::zeros((nt, nx));
    let mut cov = Array2::zeros((nt, nx));
    for j in 0..nx {
        values[[nt - 1, j]] = (-cs.terminal_tilt(&eta.eta1, &xs[j..j + 1])?).exp();
    }
    let mut interior: Vec<f64> = (1..nx - 1).map(|j| values[[nt - 1, j]]).collect();
    let mut old = coefficients(ensemble, cs, &eta.eta0, space, time.t(nt - 1))?;
    for (j, (m, s)) in old.mubar.iter().zip(&old.cov).enumerate() {
        mubar[[nt - 1, j]] = *m;
        cov[[nt - 1, j]] = *s;
    }
    for i in (0..nt - 1).rev() {
        let (t_old, t_new) = (time.t(i + 1), time.t(i));
        let new = coefficients(ensemble, cs, &eta.eta0, space, t_new)?;
        let backward_index = nt - 2 - i;
        interior = if backward_index < cfg.rannacher_steps {
            let mid = coefficients(ensemble, cs, &eta.eta0, space, 0.5 * (t_old + t_new))?;
            let h = 0.5 * (t_old - t_new);
            let half = theta_step(&old, &mid, &interior, h, 1.0)?;
            theta_step(&mid, &new, &half, h, 1.0)?
        } else {
            theta_step(&old, &new, &interior, t_old - t_new, 0.5)?
        };
        for (k, v) in interior.iter().enumerate() {
            values[[i, k + 1]] = *v;
        }
        let n = interior.len();
        values[[i, 0]] = 2.0 * interior[0] - interior[1];
        values[[i, nx - 1]] = 2.0 * interior[n - 1] - interior[n - 2];
        if let Some(j) = (0..nx).find(|&j| !(values[[i, j]] > 0.0)) {
            return Err(Error::SolverFailed(format!(
                "omega = {:e} at t = {t_new}, x = {}",
                values[[i, j]],
                xs[j]
            )));
        }
        for (j, (m, s)) in new.mubar.iter().zip(&new.cov).enumerate() {
            mubar[[i, j]] = *m;
            cov[[i, j]] = *s;
        }
        old = new;
    }
    Ok(OmegaGrid {
        space: space.clone(),
        time: time.clone(),
        values,
        mubar,
        cov,
    })
}

struct TabulatedDrift {
    nodes_t: Vec<f64>,
    lo: f64,
    dx: f64,
    cells: usize,
    theta: Array2<f64>,
}

impl TabulatedDrift {
    fn eval_one(&self, t: f64, x: f64) -> Result<f64> {
        let x_min = self.lo + self.dx;
        let x_max = self.lo + (self.cells - 1) as f64 * self.dx;
        let t_max = *self.nodes_t.last().unwrap();
        if !(x >= x_min && x <= x_max && t >= 0.0 && t <= t_max) {
            return Err(Error::ExtrapolationRefused { t, x });
        }
        let nt = self.nodes_t.len();
        let i = match self.nodes_t.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(i) => i.min(nt - 2),
            Err(i) => i.saturating_sub(1).min(nt - 2),
        };
        let a = ((t - self.nodes_t[i]) / (self.nodes_t[i + 1] - self.nodes_t[i])).clamp(0.0, 1.0);
        let u = (x - self.lo) / self.dx;
        let j = (u.floor() as usize).clamp(1, self.cells - 2);
        let b = u - j as f64;
        let th = &self.theta;
        let at = |ii: usize| (1.0 - b) * th[[ii, j]] + b * th[[ii, j + 1]];
        Ok((1.0 - a) * at(i) + a * at(i + 1))
    }
}

impl DriftFn for TabulatedDrift {
    fn dim(&self) -> usize {
        1
    }

    fn eval_batch(&self, t: f64, states: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) -> Result<()> {
        for (r, x) in states.column(0).iter().enumerate() {
            out[[r, 0]] = self.eval_one(t, *x)?;
        }
        Ok(())
    }
}

/// The optimal drift tabulated on interior nodes, bilinear in `(t, x)`.
/// Queries outside the interior are refused.
pub fn drift_from_pde(grid: &OmegaGrid, ensemble: &ExpertEnsemble) -> Result<DriftField> {
    if ensemble.dim() != 1 {
        return Err(Error::invalid("tabulated drifts are one-dimensional"));
    }
    Ok(DriftField::new(
        TabulatedDrift {
            nodes_t: grid.time.nodes().to_vec(),
            lo: grid.space.lo,
            dx: grid.space.dx(),
            cells: grid.space.cells,
            theta: grid.theta_table(),
        },
        DriftKind::ClosedForm,
        "pde-oracle",
    ))
}
