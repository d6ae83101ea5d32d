//! Terminal and running expectation constraints, evaluated along path batches.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ivsmile;
use crate::sde::PathBatch;

type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type RunningFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// `f(X_T)` with target expectation zero.
#[derive(Clone)]
pub struct TerminalConstraint {
    f: Arc<TerminalFn>,
    label: String,
}

impl TerminalConstraint {
    pub fn new(label: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            f: Arc::new(f),
            label: label.into(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let v = (self.f)(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::ConstraintEval {
                label: self.label.clone(),
            })
        }
    }
}

impl fmt::Debug for TerminalConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TerminalConstraint({})", self.label)
    }
}

/// `∫ g(u, X_u) du` with target expectation zero.
#[derive(Clone)]
pub struct RunningConstraint {
    g: Arc<RunningFn>,
    label: String,
}

impl RunningConstraint {
    pub fn new(label: impl Into<String>, g: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            g: Arc::new(g),
            label: label.into(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> Result<f64> {
        let v = (self.g)(t, x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::ConstraintEval {
                label: self.label.clone(),
            })
        }
    }
}

impl fmt::Debug for RunningConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RunningConstraint({})", self.label)
    }
}

/// `I` running and `J` terminal constraints. Columns of every per-path matrix
/// are ordered running first, then terminal.
#[derive(Clone, Debug, Default)]
pub struct ConstraintSet {
    pub running: Vec<RunningConstraint>,
    pub terminal: Vec<TerminalConstraint>,
}

impl ConstraintSet {
    pub fn new(running: Vec<RunningConstraint>, terminal: Vec<TerminalConstraint>) -> Self {
        Self { running, terminal }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.running.len() + self.terminal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_running(&self) -> usize {
        self.running.len()
    }

    pub fn num_terminal(&self) -> usize {
        self.terminal.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.running
            .iter()
            .map(|c| c.label.clone())
            .chain(self.terminal.iter().map(|c| c.label.clone()))
            .collect()
    }

    pub fn push(&mut self, c: Constraint) {
        match c {
            Constraint::Running(r) => self.running.push(r),
            Constraint::Terminal(t) => self.terminal.push(t),
        }
    }

    /// `η₀ · g(t, x)`.
    pub fn running_rate(&self, eta0: &[f64], t: f64, x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (g, &e) in self.running.iter().zip(eta0) {
            acc += e * g.eval(t, x)?;
        }
        Ok(acc)
    }

    /// `η₁ · f(x)`.
    pub fn terminal_tilt(&self, eta1: &[f64], x: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for (f, &e) in self.terminal.iter().zip(eta1) {
            acc += e * f.eval(x)?;
        }
        Ok(acc)
    }

    /// `η₀ · g` at every left endpoint of the batch, `(M, N)`.
    pub fn running_rate_along(&self, eta0: &[f64], batch: &PathBatch) -> Result<Array2<f64>> {
        let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
        let mut out = Array2::zeros((m, n));
        if self.running.is_empty() {
            return Ok(out);
        }
        let mut x = vec![0.0; d];
        for p in 0..m {
            for i in 0..n {
                for j in 0..d {
                    x[j] = batch.paths()[[p, i, j]];
                }
                out[[p, i]] = self.running_rate(eta0, batch.grid().t(i), &x)?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub enum Constraint {
    Running(RunningConstraint),
    Terminal(TerminalConstraint),
}

impl Constraint {
    pub fn label(&self) -> &str {
        match self {
            Constraint::Running(r) => r.label(),
            Constraint::Terminal(t) => t.label(),
        }
    }
}

/// Per-path constraint values, `(M, I + J)`. Running columns hold left-endpoint
/// Riemann sums over `t_0..t_{N-1}`; terminal columns hold `f(X_{t_N})`.
pub fn eval_constraints(cs: &ConstraintSet, batch: &PathBatch) -> Result<Array2<f64>> {
    let (m, n, d) = (batch.num_paths(), batch.grid().steps(), batch.dim());
    let dt = batch.grid().dt();
    let ni = cs.num_running();
    let mut out = Array2::zeros((m, cs.len()));
    let mut x = vec![0.0; d];
    for p in 0..m {
        for i in 0..n {
            for j in 0..d {
                x[j] = batch.paths()[[p, i, j]];
            }
            let t = batch.grid().t(i);
            for (c, g) in cs.running.iter().enumerate() {
                out[[p, c]] += g.eval(t, &x)? * dt;
            }
        }
        for j in 0..d {
            x[j] = batch.paths()[[p, n, j]];
        }
        for (c, f) in cs.terminal.iter().enumerate() {
            out[[p, ni + c]] = f.eval(&x)?;
        }
    }
    Ok(out)
}

/// A builtin constraint by name and numeric parameters, as written in configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ConstraintSpec {
    pub fn new(name: &str, params: &[(&str, f64)]) -> Self {
        Self {
            name: name.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn build(&self) -> Result<Constraint> {
        builtin_constraints(&self.name, &self.params)
    }
}

pub const BUILTIN_NAMES: [&str; 6] = [
    "interval-prob",
    "mean",
    "variance-about",
    "barrier-occupation",
    "moving-barrier-occupation",
    "atm-skew",
];

fn take_params(name: &str, params: &BTreeMap<String, f64>, required: &[&str]) -> Result<(Vec<f64>, usize)> {
    for key in params.keys() {
        if key != "component" && !required.contains(&key.as_str()) {
            return Err(Error::invalid(format!("constraint `{name}` has no parameter `{key}`")));
        }
    }
    let values = required
        .iter()
        .map(|k| {
            params
                .get(*k)
                .copied()
                .ok_or_else(|| Error::invalid(format!("constraint `{name}` needs parameter `{k}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let component = match params.get("component") {
        None => 0,
        Some(&c) if c >= 0.0 && c.fract() == 0.0 => c as usize,
        Some(&c) => return Err(Error::invalid(format!("component must be a non-negative integer, got {c}"))),
    };
    Ok((values, component))
}

/// Builtin constraints. Scalar builtins act on state component `component`
/// (default 0):
///
/// | name | kind | value |
/// |---|---|---|
/// | `interval-prob` (a, b, p) | terminal | `1{a < x < b} − p` |
/// | `mean` (c) | terminal | `x − c` |
/// | `variance-about` (c, v) | terminal | `(x − c)² − v` |
/// | `barrier-occupation` (q) | running | `1{x < t} − q` |
/// | `moving-barrier-occupation` (q) | running | `1{x < 1 − (0.5 − t)²} − q` |
/// | `atm-skew` (s) | terminal | smile slope at `Δ = ½` minus `s` |
pub fn builtin_constraints(name: &str, params: &BTreeMap<String, f64>) -> Result<Constraint> {
    let label = |tail: String| format!("{name}({tail})");
    match name {
        "interval-prob" => {
            let (v, k) = take_params(name, params, &["a", "b", "p"])?;
            let (a, b, p) = (v[0], v[1], v[2]);
            if !(a < b) {
                return Err(Error::invalid("interval-prob needs a < b"));
            }
            Ok(Constraint::Terminal(TerminalConstraint::new(
                label(format!("a={a}, b={b}, p={p}")),
                move |x| if x[k] > a && x[k] < b { 1.0 - p } else { -p },
            )))
        }
        "mean" => {
            let (v, k) = take_params(name, params, &["c"])?;
            let c = v[0];
            Ok(Constraint::Terminal(TerminalConstraint::new(
                label(format!("c={c}")),
                move |x| x[k] - c,
            )))
        }
        "variance-about" => {
            let (v, k) = take_params(name, params, &["c", "v"])?;
            let (c, var) = (v[0], v[1]);
            Ok(Constraint::Terminal(TerminalConstraint::new(
                label(format!("c={c}, v={var}")),
                move |x| (x[k] - c).powi(2) - var,
            )))
        }
        "barrier-occupation" => {
            let (v, k) = take_params(name, params, &["q"])?;
            let q = v[0];
            Ok(Constraint::Running(RunningConstraint::new(
                label(format!("q={q}")),
                move |t, x| if x[k] < t { 1.0 - q } else { -q },
            )))
        }
        "moving-barrier-occupation" => {
            let (v, k) = take_params(name, params, &["q"])?;
            let q = v[0];
            Ok(Constraint::Running(RunningConstraint::new(
                label(format!("q={q}")),
                move |t, x| {
                    if x[k] < 1.0 - (0.5 - t).powi(2) {
                        1.0 - q
                    } else {
                        -q
                    }
                },
            )))
        }
        "atm-skew" => {
            let (v, _) = take_params(name, params, &["s"])?;
            let s = v[0];
            Ok(Constraint::Terminal(TerminalConstraint::new(
                label(format!("s={s}")),
                move |x| ivsmile::atm_skew(x) - s,
            )))
        }
        other => Err(Error::invalid(format!(
            "unknown constraint `{other}`; expected one of {}",
            BUILTIN_NAMES.join(", ")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{build_time_grid, simulate_paths, DriftField, VolatilityField};

    fn spec(name: &str, p: &[(&str, f64)]) -> Constraint {
        ConstraintSpec::new(name, p).build().unwrap()
    }

    #[test]
    fn builtin_values() {
        let Constraint::Terminal(f) = spec("interval-prob", &[("a", 0.8), ("b", 1.2), ("p", 0.9)]) else {
            panic!()
        };
        assert!((f.eval(&[1.0]).unwrap() - 0.1).abs() < 1e-15);
        assert!((f.eval(&[0.8]).unwrap() + 0.9).abs() < 1e-15);
        assert!((f.eval(&[1.3]).unwrap() + 0.9).abs() < 1e-15);

        let Constraint::Terminal(f) = spec("variance-about", &[("c", 1.0), ("v", 0.05)]) else {
            panic!()
        };
        assert!((f.eval(&[1.5]).unwrap() - 0.2).abs() < 1e-15);

        let Constraint::Running(g) = spec("moving-barrier-occupation", &[("q", 0.8)]) else {
            panic!()
        };
        // Barrier at t = 0.5 is 1.
        assert!((g.eval(0.5, &[0.99]).unwrap() - 0.2).abs() < 1e-15);
        assert!((g.eval(0.5, &[1.01]).unwrap() + 0.8).abs() < 1e-15);
        // Barrier at t = 0 is 0.75.
        assert!((g.eval(0.0, &[0.8]).unwrap() + 0.8).abs() < 1e-15);

        let Constraint::Running(g) = spec("barrier-occupation", &[("q", 0.2)]) else {
            panic!()
        };
        assert!((g.eval(0.3, &[0.1]).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn builtin_errors() {
        let empty = BTreeMap::new();
        assert!(matches!(builtin_constraints("quantile", &empty), Err(Error::InvalidArgument(_))));
        assert!(builtin_constraints("mean", &empty).is_err());
        assert!(ConstraintSpec::new("mean", &[("c", 1.0), ("z", 2.0)]).build().is_err());
        assert!(ConstraintSpec::new("interval-prob", &[("a", 1.0), ("b", 0.0), ("p", 0.5)]).build().is_err());
    }

    #[test]
    fn non_finite_value_names_the_constraint() {
        let f = TerminalConstraint::new("log", |x| x[0].ln());
        match f.eval(&[-1.0]) {
            Err(Error::ConstraintEval { label }) => assert_eq!(label, "log"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn columns_are_running_then_terminal() {
        let grid = build_time_grid(1.0, 4).unwrap();
        let drift = DriftField::constant(vec![0.0], "zero");
        let vol = VolatilityField::scalar(1.0).unwrap();
        let batch = simulate_paths(&drift, &vol, &grid, 3, &[0.0], 1).unwrap();
        let cs = ConstraintSet::new(
            vec![RunningConstraint::new("t", |t, _| t)],
            vec![TerminalConstraint::new("x", |x| x[0])],
        );
        let vals = eval_constraints(&cs, &batch).unwrap();
        // Left-endpoint sum of t over (0, 0.25, 0.5, 0.75) times 0.25.
        assert!((vals[[0, 0]] - 0.375).abs() < 1e-15);
        assert_eq!(vals[[2, 1]], batch.paths()[[2, 4, 0]]);
        assert_eq!(cs.labels(), vec!["t".to_string(), "x".to_string()]);
    }
}
