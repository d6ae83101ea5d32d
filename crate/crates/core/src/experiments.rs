//! Config-driven experiments and their artifact directories.
//!
//! A config names builtin expert drifts (or network checkpoints), builtin
//! constraints and run sizes. [`run_experiment`] simulates every expert and
//! the average-drift model with common random numbers, solves for the
//! multipliers, trains the chosen learners, re-simulates under the learned
//! drift and writes
//!
//! ```text
//! <out>/paths/        sample paths, increments, quantile bands, smile series
//! <out>/tables/       constraint table, KL estimates, multipliers, RN scatter, smile bands
//! <out>/losses/       loss histories and constraint evolution during training
//! <out>/checkpoints/  networks, multipliers and the resolved config
//! <out>/report.txt    key = value summary
//! ```
//!
//! Every file is a deterministic function of the config and its seed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::constraints::{eval_constraints, ConstraintSet, ConstraintSpec};
use crate::drift_learner::{
    neural_drift, time_state_inputs, train_drift_monitored, write_loss_csv, DriftLearnerConfig, TrainedDrift,
};
use crate::error::{Error, Result};
use crate::girsanov::{log_rn_candidate, log_rn_target_unnormalised, self_normalised_weights, write_scatter_csv};
use crate::ivsmile::{
    build_smile_experts, generate_synthetic_smile_series, write_smile_bands, ExpertProtocolConfig, SmileExperts,
    SmileGrid, SmileSeries, SyntheticSmileConfig,
};
use crate::lagrange::{solve_eta, EtaSolution};
use crate::mlp::{Activation, FeedforwardNet, Head};
use crate::pde::{solve_omega_pde_with, OmegaGrid, PdeConfig, SpaceGrid};
use crate::rng::derive_seed;
use crate::sde::{
    build_time_grid, estimate_weighted_kl, simulate_paths, varsigma_along, DriftField, DriftFn, DriftKind,
    ExpertEnsemble, PathBatch, TimeGrid, VolatilityField,
};
use crate::stats::{fmt17, quantiles, McEstimate};
use crate::value_learner::{drift_from_omega, train_omega_monitored, OmegaModel, TrainedOmega, ValueLearnerConfig};

pub const BUILTIN_EXPERIMENTS: [&str; 4] = [
    "two-experts-two-constraints",
    "three-constraints",
    "gaussian-tilt-oracle",
    "synthetic-smile",
];

pub const BUILTIN_DRIFTS: [&str; 5] = [
    "constant",
    "linear-trend",
    "cyclical-reversion",
    "ornstein-uhlenbeck",
    "checkpoint",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerChoice {
    None,
    Drift,
    Omega,
    Both,
}

impl LearnerChoice {
    pub fn drift(self) -> bool {
        matches!(self, LearnerChoice::Drift | LearnerChoice::Both)
    }

    pub fn omega(self) -> bool {
        matches!(self, LearnerChoice::Omega | LearnerChoice::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    /// Network checkpoint for `name = "checkpoint"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmileSpec {
    #[serde(default)]
    pub generator: SyntheticSmileConfig,
    #[serde(default)]
    pub protocol: ExpertProtocolConfig,
    #[serde(default = "default_ttm")]
    pub ttm_days: u32,
    /// Time-node stride of the smile band tables.
    #[serde(default = "one")]
    pub band_stride: usize,
}

fn default_ttm() -> u32 {
    30
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    #[serde(default)]
    pub experts: Vec<DriftSpec>,
    #[serde(default)]
    pub weights: Vec<f64>,
    #[serde(default)]
    pub x0: Vec<f64>,
    /// Row-major lower-triangular volatility factor.
    #[serde(default)]
    pub vol: Vec<f64>,
    /// Replaces `experts`, `vol` and `x0` by neural SDEs fitted to a
    /// synthetic smile series.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic_smile: Option<SmileSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub num_paths: usize,
    /// Paths written to `paths/`.
    pub export_paths: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            num_paths: 10_000,
            export_paths: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EtaSpec {
    pub num_paths: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EtaSpec {
    fn default() -> Self {
        Self {
            num_paths: 10_000,
            tol: crate::lagrange::DEFAULT_TOL,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            activation: Activation::Silu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonitorSpec {
    /// Iterations between constraint evaluations during training; 0 disables.
    pub every: usize,
    pub num_paths: usize,
}

impl Default for MonitorSpec {
    fn default() -> Self {
        Self {
            every: 50,
            num_paths: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PdeSpec {
    pub dx: f64,
    pub pilot_paths: usize,
    pub solver: PdeConfig,
    pub time_stride: usize,
    pub space_stride: usize,
}

impl Default for PdeSpec {
    fn default() -> Self {
        Self {
            dx: 0.01,
            pilot_paths: 2000,
            solver: PdeConfig::default(),
            time_stride: 10,
            space_stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_learner")]
    pub learner: LearnerChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub grid: GridSpec,
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub eta: EtaSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub drift_learner: DriftLearnerConfig,
    #[serde(default)]
    pub value_learner: ValueLearnerConfig,
    #[serde(default)]
    pub monitor: MonitorSpec,
    #[serde(default)]
    pub pde: PdeSpec,
}

fn default_learner() -> LearnerChoice {
    LearnerChoice::Drift
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// A builtin experiment at its default sizes.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "two-experts-two-constraints" => TWO_EXPERTS_TWO_CONSTRAINTS,
            "three-constraints" => THREE_CONSTRAINTS,
            "gaussian-tilt-oracle" => GAUSSIAN_TILT_ORACLE,
            "synthetic-smile" => SYNTHETIC_SMILE,
            other => {
                return Err(Error::Config(format!(
                    "unknown builtin experiment `{other}`; known: {}",
                    BUILTIN_EXPERIMENTS.join(", ")
                )))
            }
        };
        Self::from_toml(text)
    }

    /// A builtin name or a path to a TOML file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if BUILTIN_EXPERIMENTS.contains(&name_or_path) {
            Self::builtin(name_or_path)
        } else {
            Self::load(Path::new(name_or_path))
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output
            .clone()
            .unwrap_or_else(|| PathBuf::from("artifacts").join(&self.name))
    }

    /// Structural checks that need no simulation or training.
    pub fn validate(&self) -> Result<()> {
        build_time_grid(self.grid.horizon, self.grid.steps).map_err(config_err)?;
        let e = &self.ensemble;
        let k = if e.synthetic_smile.is_some() {
            if !e.experts.is_empty() || !e.vol.is_empty() || !e.x0.is_empty() {
                return Err(Error::Config(
                    "a synthetic-smile ensemble takes no experts, vol or x0".into(),
                ));
            }
            e.synthetic_smile.as_ref().map(|s| s.protocol.weights.len()).unwrap_or(0)
        } else {
            for d in &e.experts {
                if !BUILTIN_DRIFTS.contains(&d.name.as_str()) {
                    return Err(Error::Config(format!(
                        "unknown drift `{}`; known: {}",
                        d.name,
                        BUILTIN_DRIFTS.join(", ")
                    )));
                }
            }
            e.experts.len()
        };
        let weights = match &e.synthetic_smile {
            Some(s) => &s.protocol.weights,
            None => &e.weights,
        };
        if k == 0 {
            return Err(Error::Config("the ensemble needs at least one expert".into()));
        }
        if weights.len() != k {
            return Err(Error::Config(format!("{} weights for {k} experts", weights.len())));
        }
        if weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Config("weights must lie in [0, 1]".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights sum to {total}, not 1")));
        }
        for c in &self.constraints {
            c.build().map_err(config_err)?;
        }
        if self.simulation.num_paths == 0 || self.eta.num_paths == 0 {
            return Err(Error::Config("path counts must be positive".into()));
        }
        if !(self.eta.tol > 0.0) {
            return Err(Error::Config("eta.tol must be positive".into()));
        }
        if self.value_learner.staggered_starts && self.value_learner.initial_box.is_none() {
            return Err(Error::Config("value_learner.staggered_starts needs an initial_box".into()));
        }
        Ok(())
    }
}

const TWO_EXPERTS_TWO_CONSTRAINTS: &str = r#"
name = "two-experts-two-constraints"
learner = "drift"

[grid]
horizon = 1.0
steps = 1000

[ensemble]
x0 = [0.0]
vol = [1.0]
weights = [0.5, 0.5]

[[ensemble.experts]]
name = "linear-trend"

[[ensemble.experts]]
name = "cyclical-reversion"

[[constraints]]
name = "interval-prob"
params = { a = 0.8, b = 1.2, p = 0.9 }

[[constraints]]
name = "barrier-occupation"
params = { q = 0.2 }
"#;

const THREE_CONSTRAINTS: &str = r#"
name = "three-constraints"
learner = "both"

[grid]
horizon = 1.0
steps = 1000

[ensemble]
x0 = [0.0]
vol = [1.0]
weights = [0.5, 0.5]

[[ensemble.experts]]
name = "linear-trend"

[[ensemble.experts]]
name = "cyclical-reversion"

[[constraints]]
name = "mean"
params = { c = 1.0 }

[[constraints]]
name = "variance-about"
params = { c = 1.0, v = 0.05 }

[[constraints]]
name = "moving-barrier-occupation"
params = { q = 0.8 }
"#;

const GAUSSIAN_TILT_ORACLE: &str = r#"
name = "gaussian-tilt-oracle"
learner = "both"

[grid]
horizon = 1.0
steps = 100

[ensemble]
x0 = [0.0]
vol = [1.0]
weights = [1.0]

[[ensemble.experts]]
name = "constant"
params = { value = 0.0 }

[[constraints]]
name = "mean"
params = { c = 0.5 }

[eta]
num_paths = 200000

[value_learner]
initial_box = [[-1.5], [2.5]]
"#;

const SYNTHETIC_SMILE: &str = r#"
name = "synthetic-smile"
learner = "drift"

[grid]
horizon = 0.08333333333333333
steps = 28

[ensemble.synthetic_smile]
ttm_days = 30

[[constraints]]
name = "atm-skew"
params = { s = 0.05 }

[drift_learner]
steps = 28
"#;

struct TimeStateDrift {
    net: FeedforwardNet,
}

impl DriftFn for TimeStateDrift {
    fn dim(&self) -> usize {
        self.net.output_dim()
    }

    fn eval_batch(&self, t: f64, states: ArrayView2<f64>, mut out: ndarray::ArrayViewMut2<f64>) -> Result<()> {
        out.assign(&self.net.forward(time_state_inputs(t, states).view())?);
        Ok(())
    }
}

fn param(spec: &DriftSpec, key: &str, default: f64) -> f64 {
    spec.params.get(key).copied().unwrap_or(default)
}

fn check_params(spec: &DriftSpec, allowed: &[&str]) -> Result<()> {
    match spec.params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::Config(format!("drift `{}` has no parameter `{k}`", spec.name))),
        None => Ok(()),
    }
}

/// A builtin drift. Scalar builtins act on one-dimensional states:
///
/// | name | parameters (defaults) | drift |
/// |---|---|---|
/// | `constant` | value (0) | `value` |
/// | `linear-trend` | a (4), b (0.7) | `a t − b x` |
/// | `cyclical-reversion` | k (3), cycles (2), phase (π/12) | `k (t + sin(2π·cycles·t + phase) − x)` |
/// | `ornstein-uhlenbeck` | kappa (1), mean (0) | `kappa (mean − x)` |
/// | `checkpoint` | `path` to a network on `x` or `(t, x)` | network output |
pub fn builtin_drift(spec: &DriftSpec, dim: usize, base_dir: &Path) -> Result<DriftField> {
    let scalar = |label: String| {
        if dim == 1 {
            Ok(label)
        } else {
            Err(Error::Config(format!("drift `{}` is one-dimensional", spec.name)))
        }
    };
    match spec.name.as_str() {
        "constant" => {
            check_params(spec, &["value"])?;
            let v = param(spec, "value", 0.0);
            Ok(DriftField::constant(vec![v], scalar(format!("constant({v})"))?))
        }
        "linear-trend" => {
            check_params(spec, &["a", "b"])?;
            let (a, b) = (param(spec, "a", 4.0), param(spec, "b", 0.7));
            Ok(DriftField::scalar(scalar(format!("{a}t-{b}x"))?, move |t, x| a * t - b * x))
        }
        "cyclical-reversion" => {
            check_params(spec, &["k", "cycles", "phase"])?;
            let k = param(spec, "k", 3.0);
            let cycles = param(spec, "cycles", 2.0);
            let phase = param(spec, "phase", std::f64::consts::PI / 12.0);
            let w = 2.0 * std::f64::consts::PI * cycles;
            Ok(DriftField::scalar(
                scalar(format!("{k}(t+sin({w}t+{phase})-x)"))?,
                move |t, x| k * (t + (w * t + phase).sin() - x),
            ))
        }
        "ornstein-uhlenbeck" => {
            check_params(spec, &["kappa", "mean"])?;
            let (kappa, mean) = (param(spec, "kappa", 1.0), param(spec, "mean", 0.0));
            Ok(DriftField::scalar(scalar(format!("{kappa}({mean}-x)"))?, move |_, x| {
                kappa * (mean - x)
            }))
        }
        "checkpoint" => {
            check_params(spec, &[])?;
            let rel = spec
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("checkpoint drift needs `path`".into()))?;
            let path = if rel.is_absolute() { rel.clone() } else { base_dir.join(rel) };
            let net = FeedforwardNet::load(&path)?;
            let label = format!("checkpoint({})", path.display());
            if net.output_dim() != dim {
                return Err(Error::Config(format!("{label} outputs {} values, state has {dim}", net.output_dim())));
            }
            if net.input_dim() == dim {
                crate::ivsmile::state_drift(&net, label)
            } else if net.input_dim() == dim + 1 {
                Ok(DriftField::new(TimeStateDrift { net }, DriftKind::Neural, label))
            } else {
                Err(Error::Config(format!("{label} takes {} inputs", net.input_dim())))
            }
        }
        other => Err(Error::Config(format!(
            "unknown drift `{other}`; known: {}",
            BUILTIN_DRIFTS.join(", ")
        ))),
    }
}

pub struct SmileContext {
    pub series: SmileSeries,
    pub experts: SmileExperts,
    pub grid: SmileGrid,
    pub band_stride: usize,
}

/// A config with its ensemble, constraints and grid built.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub ensemble: ExpertEnsemble,
    pub constraints: ConstraintSet,
    pub grid: TimeGrid,
    pub smile: Option<SmileContext>,
}

/// Stage seeds derived from the master seed.
#[derive(Debug, Clone, Copy)]
pub struct StageSeeds {
    pub simulation: u64,
    pub eta: u64,
    pub drift_learner: u64,
    pub value_learner: u64,
    pub monitor: u64,
    pub smile_series: u64,
    pub smile_protocol: u64,
}

impl StageSeeds {
    pub fn new(seed: u64) -> Self {
        Self {
            simulation: derive_seed(seed, 1),
            eta: derive_seed(seed, 2),
            drift_learner: derive_seed(seed, 3),
            value_learner: derive_seed(seed, 4),
            monitor: derive_seed(seed, 5),
            smile_series: derive_seed(seed, 6),
            smile_protocol: derive_seed(seed, 7),
        }
    }
}

impl Experiment {
    /// Builds everything the config describes; synthetic-smile ensembles
    /// are fitted here.
    pub fn build(config: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let grid = build_time_grid(config.grid.horizon, config.grid.steps)?;
        let mut running = Vec::new();
        let mut terminal = Vec::new();
        for c in &config.constraints {
            match c.build().map_err(config_err)? {
                crate::constraints::Constraint::Running(r) => running.push(r),
                crate::constraints::Constraint::Terminal(t) => terminal.push(t),
            }
        }
        let constraints = ConstraintSet::new(running, terminal);
        let seeds = StageSeeds::new(config.seed);
        let (ensemble, smile) = match &config.ensemble.synthetic_smile {
            Some(spec) => {
                let series = generate_synthetic_smile_series(&spec.generator, seeds.smile_series)
                    .map_err(|e| e.in_stage("smile-series"))?;
                let protocol = ExpertProtocolConfig {
                    seed: seeds.smile_protocol,
                    ..spec.protocol.clone()
                };
                let experts = build_smile_experts(&series, &protocol).map_err(|e| e.in_stage("smile-experts"))?;
                let ensemble = experts.ensemble.clone();
                (
                    ensemble,
                    Some(SmileContext {
                        series,
                        experts,
                        grid: SmileGrid::standard(spec.ttm_days),
                        band_stride: spec.band_stride,
                    }),
                )
            }
            None => {
                let e = &config.ensemble;
                let d = e.x0.len();
                if d == 0 {
                    return Err(Error::Config("ensemble.x0 is empty".into()));
                }
                let vol = VolatilityField::constant(d, e.vol.clone()).map_err(config_err)?;
                let experts = e
                    .experts
                    .iter()
                    .map(|s| builtin_drift(s, d, base_dir))
                    .collect::<Result<Vec<_>>>()?;
                let ensemble =
                    ExpertEnsemble::new(experts, vol, e.weights.clone(), e.x0.clone()).map_err(config_err)?;
                (ensemble, None)
            }
        };
        Ok(Self {
            config,
            ensemble,
            constraints,
            grid,
            smile,
        })
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds::new(self.config.seed)
    }

    pub fn simulate(&self, drift: &DriftField, num_paths: usize, seed: u64) -> Result<PathBatch> {
        simulate_paths(drift, self.ensemble.vol(), &self.grid, num_paths, self.ensemble.x0(), seed)
    }

    pub fn solve_eta(&self) -> Result<EtaSolution> {
        let batch = self.simulate(self.ensemble.average_drift(), self.config.eta.num_paths, self.seeds().eta)?;
        solve_eta(&self.ensemble, &self.constraints, &batch, self.config.eta.tol, self.config.eta.max_iter)
    }

    fn hidden_widths(&self, outputs: usize) -> Vec<usize> {
        let mut w = vec![self.ensemble.dim() + 1];
        w.extend_from_slice(&self.config.network.hidden);
        w.push(outputs);
        w
    }

    pub fn drift_learner_config(&self) -> DriftLearnerConfig {
        DriftLearnerConfig {
            horizon: self.grid.horizon(),
            seed: self.seeds().drift_learner,
            ..self.config.drift_learner.clone()
        }
    }

    pub fn value_learner_config(&self) -> ValueLearnerConfig {
        ValueLearnerConfig {
            horizon: self.grid.horizon(),
            seed: self.seeds().value_learner,
            ..self.config.value_learner.clone()
        }
    }

    pub fn initial_drift_net(&self) -> Result<FeedforwardNet> {
        FeedforwardNet::new(
            &self.hidden_widths(self.ensemble.dim()),
            self.config.network.activation,
            Head::Identity,
            derive_seed(self.seeds().drift_learner, 0xD1),
        )
    }

    pub fn initial_omega_net(&self) -> Result<FeedforwardNet> {
        FeedforwardNet::new(
            &self.hidden_widths(1),
            self.config.network.activation,
            Head::Softplus,
            derive_seed(self.seeds().value_learner, 0x0E),
        )
    }

    /// Batch under the average drift on a learner grid, for monitoring.
    fn monitor_batch(&self, steps: usize) -> Result<PathBatch> {
        let grid = build_time_grid(self.grid.horizon(), steps)?;
        simulate_paths(
            self.ensemble.average_drift(),
            self.ensemble.vol(),
            &grid,
            self.config.monitor.num_paths,
            self.ensemble.x0(),
            self.seeds().monitor,
        )
    }
}

fn create(dir: &Path, rel: &str) -> Result<BufWriter<File>> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Constraint expectations per measure.
#[derive(Debug, Clone)]
pub struct ConstraintTable {
    pub labels: Vec<String>,
    pub measures: Vec<String>,
    /// `means[measure][constraint]`.
    pub means: Vec<Vec<McEstimate>>,
}

impl ConstraintTable {
    pub fn new(labels: Vec<String>) -> Self {
        Self {
            labels,
            measures: Vec::new(),
            means: Vec::new(),
        }
    }

    pub fn push(&mut self, measure: &str, values: Vec<McEstimate>) {
        self.measures.push(measure.to_string());
        self.means.push(values);
    }

    pub fn get(&self, measure: &str) -> Option<&[McEstimate]> {
        self.measures.iter().position(|m| m == measure).map(|i| self.means[i].as_slice())
    }

    fn write<W: Write>(&self, mut w: W, se: bool) -> Result<()> {
        writeln!(w, "constraint,{}", self.measures.join(","))?;
        for (j, label) in self.labels.iter().enumerate() {
            let cells: Vec<String> = self
                .means
                .iter()
                .map(|col| fmt17(if se { col[j].std_error } else { col[j].mean }))
                .collect();
            writeln!(w, "\"{}\",{}", label.replace('"', "'"), cells.join(","))?;
        }
        Ok(())
    }
}

/// Means of every constraint value (running integrals then terminal values)
/// over a batch, with standard errors.
pub fn constraint_means(cs: &ConstraintSet, batch: &PathBatch) -> Result<Vec<McEstimate>> {
    let c = eval_constraints(cs, batch)?;
    Ok((0..c.ncols())
        .map(|j| McEstimate::from_samples(&c.column(j).to_vec()))
        .collect())
}

/// `measure,t,component,q10,q50,q90` rows of one batch.
fn write_quantile_rows<W: Write>(w: &mut W, measure: &str, batch: &PathBatch) -> Result<()> {
    for i in 0..=batch.grid().steps() {
        let states = batch.states_at(i);
        for c in 0..batch.dim() {
            let q = quantiles(&states.column(c).to_vec(), &[0.1, 0.5, 0.9]);
            writeln!(
                w,
                "{measure},{},{},{},{},{}",
                fmt17(batch.grid().t(i)),
                c + 1,
                fmt17(q[0]),
                fmt17(q[1]),
                fmt17(q[2])
            )?;
        }
    }
    Ok(())
}

fn write_batch_artifacts(
    dir: &Path,
    measure: &str,
    batch: &PathBatch,
    export: usize,
    quantile_file: &mut BufWriter<File>,
    smile: Option<&SmileContext>,
) -> Result<()> {
    batch.write_paths_csv(create(dir, &format!("paths/{measure}.csv"))?, Some(export))?;
    write_quantile_rows(quantile_file, measure, batch)?;
    if let Some(s) = smile {
        write_smile_bands(
            create(dir, &format!("tables/smile_bands_{measure}.csv"))?,
            batch,
            &s.grid,
            s.band_stride,
        )?;
    }
    Ok(())
}

/// What a run produced, for callers that want the numbers.
pub struct RunOutcome {
    pub dir: PathBuf,
    pub eta: EtaSolution,
    pub table: ConstraintTable,
    /// `(measure, weighted KL)`.
    pub kl: Vec<(String, McEstimate)>,
    pub drift: Option<TrainedDrift>,
    pub omega: Option<TrainedOmega>,
}

struct Report {
    lines: Vec<String>,
}

impl Report {
    fn new() -> Self {
        Self { lines: Vec::new() }
    }

    fn kv(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key} = {value}"));
    }

    fn est(&mut self, key: &str, e: &McEstimate) {
        self.kv(key, format!("{} +- {}", fmt17(e.mean), fmt17(e.std_error)));
    }

    fn eta(&mut self, eta: &EtaSolution) {
        self.kv("eta.converged", eta.converged);
        self.kv("eta.iterations", eta.iterations);
        self.kv("eta.ess", fmt17(eta.ess));
        for (i, v) in eta.eta0.iter().enumerate() {
            self.kv(&format!("eta.eta0[{i}]"), fmt17(*v));
        }
        for (i, v) in eta.eta1.iter().enumerate() {
            self.kv(&format!("eta.eta1[{i}]"), fmt17(*v));
        }
        for (i, v) in eta.residuals.iter().enumerate() {
            self.kv(&format!("eta.residual[{i}]"), fmt17(*v));
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut w = create(dir, "report.txt")?;
        for l in &self.lines {
            writeln!(w, "{l}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn write_eta(dir: &Path, eta: &EtaSolution, labels: &[String]) -> Result<()> {
    let mut w = create(dir, "checkpoints/eta.json")?;
    writeln!(w, "{}", serde_json::to_string_pretty(eta)?)?;
    w.flush()?;
    let mut w = create(dir, "tables/eta.csv")?;
    writeln!(w, "constraint,eta,residual")?;
    for (j, (v, r)) in eta.flat().iter().zip(&eta.residuals).enumerate() {
        writeln!(w, "\"{}\",{},{}", labels[j].replace('"', "'"), fmt17(*v), fmt17(*r))?;
    }
    w.flush()?;
    Ok(())
}

/// Weighted constraint means under `θ` by reweighting an average-drift batch.
fn reweighted_means(theta: &DriftField, exp: &Experiment, batch: &PathBatch, values: &ndarray::Array2<f64>) -> Result<Vec<f64>> {
    let lrn = log_rn_candidate(theta, &exp.ensemble, batch)?;
    let w = self_normalised_weights(&lrn)?;
    let m = values.nrows() as f64;
    Ok((0..values.ncols())
        .map(|j| values.column(j).iter().zip(&w.weights).map(|(c, w)| c * w).sum::<f64>() / m)
        .collect())
}

/// Runs the full pipeline and writes the artifact directory `out`.
pub fn run_experiment(exp: &Experiment, out: &Path) -> Result<RunOutcome> {
    let cfg = &exp.config;
    let seeds = exp.seeds();
    let labels = exp.constraints.labels();
    fs::create_dir_all(out)?;
    let mut w = create(out, "checkpoints/config.toml")?;
    w.write_all(cfg.to_toml()?.as_bytes())?;
    w.flush()?;
    let mut report = Report::new();
    report.kv("experiment", &cfg.name);
    report.kv("seed", cfg.seed);
    report.kv("paths", cfg.simulation.num_paths);
    report.kv("steps", exp.grid.steps());
    report.kv("horizon", fmt17(exp.grid.horizon()));
    for (j, l) in labels.iter().enumerate() {
        report.kv(&format!("constraint[{j}]"), l);
    }
    if let Some(s) = &exp.smile {
        write_smile_context(out, s, &mut report)?;
    }

    let m = cfg.simulation.num_paths;
    let export = cfg.simulation.export_paths;
    let mut table = ConstraintTable::new(labels.clone());
    let mut quantile_file = create(out, "paths/quantiles.csv")?;
    writeln!(quantile_file, "measure,t,component,q10,q50,q90")?;
    let mut kl = Vec::new();

    let stage = |name: &'static str| move |e: Error| e.in_stage(name);
    for (k, expert) in exp.ensemble.experts().iter().enumerate() {
        let measure = format!("P{}", k + 1);
        let batch = exp.simulate(expert, m, seeds.simulation).map_err(stage("simulate"))?;
        table.push(&measure, constraint_means(&exp.constraints, &batch).map_err(stage("simulate"))?);
        write_batch_artifacts(out, &measure, &batch, export, &mut quantile_file, exp.smile.as_ref())?;
    }
    let qbar = exp
        .simulate(exp.ensemble.average_drift(), m, seeds.simulation)
        .map_err(stage("simulate"))?;
    table.push("Qbar", constraint_means(&exp.constraints, &qbar).map_err(stage("simulate"))?);
    write_batch_artifacts(out, "Qbar", &qbar, export, &mut quantile_file, exp.smile.as_ref())?;
    qbar.write_increments_csv(create(out, "paths/increments_Qbar.csv")?, Some(export))?;
    {
        let s = varsigma_along(&exp.ensemble, &qbar)?;
        let dt = exp.grid.dt();
        let per_path: Vec<f64> = s.rows().into_iter().map(|r| r.sum() * dt).collect();
        kl.push(("Qbar".to_string(), McEstimate::from_samples(&per_path)));
    }
    // Partial artifacts survive a later failure.
    let save_partial = |table: &ConstraintTable, kl: &[(String, McEstimate)]| -> Result<()> {
        table.write(create(out, "tables/constraints.csv")?, false)?;
        table.write(create(out, "tables/constraints_se.csv")?, true)?;
        let mut w = create(out, "tables/kl.csv")?;
        writeln!(w, "measure,kl,std_error")?;
        for (name, e) in kl {
            writeln!(w, "{name},{},{}", fmt17(e.mean), fmt17(e.std_error))?;
        }
        w.flush()?;
        Ok(())
    };
    save_partial(&table, &kl)?;

    let eta = exp.solve_eta().map_err(stage("eta"))?;
    write_eta(out, &eta, &labels)?;
    report.eta(&eta);
    if !eta.converged {
        report.save(out)?;
        return Err(Error::IllConditioned(format!(
            "multipliers did not reach tolerance {} (max residual {:.3e})",
            eta.tol,
            eta.max_abs_residual()
        ))
        .in_stage("eta"));
    }

    let dcfg = exp.drift_learner_config();
    let vcfg = exp.value_learner_config();
    let every = cfg.monitor.every;
    let mut evolution: BTreeMap<&'static str, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
    let mut drift_out = None;
    let mut omega_out = None;
    let mut learned: Vec<(&'static str, DriftField)> = Vec::new();

    if cfg.learner.drift() {
        let mbatch = exp.monitor_batch(dcfg.steps)?;
        let mvalues = eval_constraints(&exp.constraints, &mbatch)?;
        let mut rows = Vec::new();
        let param = dcfg.parameterisation;
        let mut monitor = |iter: usize, net: &FeedforwardNet| -> Result<()> {
            if every > 0 && (iter.is_multiple_of(every) || iter + 1 == dcfg.iterations) {
                let theta = neural_drift(net.clone(), &exp.ensemble, param, "monitor")?;
                rows.push((iter, reweighted_means(&theta, exp, &mbatch, &mvalues)?));
            }
            Ok(())
        };
        let trained = train_drift_monitored(
            &exp.ensemble,
            &exp.constraints,
            &eta,
            exp.initial_drift_net()?,
            &dcfg,
            &mut monitor,
        )
        .map_err(stage("drift-learner"))?;
        write_loss_csv(create(out, "losses/drift.csv")?, &trained.losses)?;
        trained.net.save(&out.join("checkpoints/drift_net.json"))?;
        evolution.insert("drift", rows);
        learned.push(("drift", trained.drift.clone()));
        drift_out = Some(trained);
    }
    if cfg.learner.omega() {
        let mbatch = exp.monitor_batch(vcfg.steps)?;
        let mvalues = eval_constraints(&exp.constraints, &mbatch)?;
        let mut rows = Vec::new();
        let mut monitor = |iter: usize, model: &OmegaModel| -> Result<()> {
            if every > 0 && (iter.is_multiple_of(every) || iter + 1 == vcfg.iterations) {
                let theta = drift_from_omega(model, &exp.ensemble)?;
                rows.push((iter, reweighted_means(&theta, exp, &mbatch, &mvalues)?));
            }
            Ok(())
        };
        let trained = train_omega_monitored(
            &exp.ensemble,
            &exp.constraints,
            &eta,
            exp.initial_omega_net()?,
            &vcfg,
            &mut monitor,
        )
        .map_err(stage("value-learner"))?;
        write_loss_csv(create(out, "losses/omega.csv")?, &trained.losses)?;
        let mut w = create(out, "checkpoints/omega_net.json")?;
        writeln!(
            w,
            "{{\"log_scale\":{},\"net\":{}}}",
            serde_json::to_string(&trained.model.log_scale)?,
            trained.model.net.to_json()?
        )?;
        w.flush()?;
        evolution.insert("omega", rows);
        learned.push(("omega", drift_from_omega(&trained.model, &exp.ensemble)?));
        omega_out = Some(trained);
    }
    write_evolution(out, &evolution, labels.len())?;

    let target = log_rn_target_unnormalised(&exp.ensemble, &exp.constraints, &eta, &qbar)?;
    for (learner, theta) in &learned {
        let measure = if learned.len() == 1 { "Qopt".to_string() } else { format!("Qopt_{learner}") };
        let batch = exp.simulate(theta, m, seeds.simulation).map_err(stage("evaluate"))?;
        table.push(&measure, constraint_means(&exp.constraints, &batch).map_err(stage("evaluate"))?);
        kl.push((
            measure.clone(),
            estimate_weighted_kl(&exp.ensemble, theta, &batch).map_err(stage("evaluate"))?,
        ));
        write_batch_artifacts(out, &measure, &batch, export, &mut quantile_file, exp.smile.as_ref())?;
        drop(batch);
        let cand = log_rn_candidate(theta, &exp.ensemble, &qbar).map_err(stage("evaluate"))?;
        write_scatter_csv(create(out, &format!("tables/rn_scatter_{learner}.csv"))?, &cand, &target, 0)?;
    }
    quantile_file.flush()?;
    save_partial(&table, &kl)?;

    for (i, measure) in table.measures.iter().enumerate() {
        for (j, e) in table.means[i].iter().enumerate() {
            report.est(&format!("table.{measure}[{j}]"), e);
        }
    }
    for (measure, e) in &kl {
        report.est(&format!("kl.{measure}"), e);
    }
    if let Some(t) = &drift_out {
        report.kv("drift.final_loss", fmt17(*t.losses.last().unwrap_or(&f64::NAN)));
    }
    if let Some(t) = &omega_out {
        report.kv("omega.final_loss", fmt17(*t.losses.last().unwrap_or(&f64::NAN)));
        report.kv("omega.log_scale", fmt17(t.model.log_scale));
    }
    report.save(out)?;
    info!("artifacts written to {}", out.display());
    Ok(RunOutcome {
        dir: out.to_path_buf(),
        eta,
        table,
        kl,
        drift: drift_out,
        omega: omega_out,
    })
}

fn write_evolution(out: &Path, evolution: &BTreeMap<&'static str, Vec<(usize, Vec<f64>)>>, n: usize) -> Result<()> {
    if evolution.values().all(|r| r.is_empty()) {
        return Ok(());
    }
    let learners: Vec<&str> = evolution.keys().copied().collect();
    let mut iters: Vec<usize> = evolution.values().flat_map(|r| r.iter().map(|(i, _)| *i)).collect();
    iters.sort_unstable();
    iters.dedup();
    for j in 0..n {
        let mut w = create(out, &format!("losses/constraint_{}.csv", j + 1))?;
        writeln!(w, "iter,{}", learners.join(","))?;
        for &it in &iters {
            let cells: Vec<String> = learners
                .iter()
                .map(|l| {
                    evolution[l]
                        .iter()
                        .find(|(i, _)| *i == it)
                        .map(|(_, v)| fmt17(v[j]))
                        .unwrap_or_default()
                })
                .collect();
            writeln!(w, "{it},{}", cells.join(","))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn write_smile_context(out: &Path, s: &SmileContext, report: &mut Report) -> Result<()> {
    s.series.write_csv(create(out, "paths/smile_series.csv")?)?;
    for (k, net) in s.experts.drifts.iter().enumerate() {
        net.save(&out.join(format!("checkpoints/smile_drift_{}.json", k + 1)))?;
    }
    s.experts.factor.net.save(&out.join("checkpoints/smile_factor.json"))?;
    for (k, c) in s.experts.factor_checksums.iter().enumerate() {
        report.kv(&format!("smile.factor_checksum[{k}]"), c);
    }
    report.kv("smile.series_length", s.series.len());
    report.kv(
        "smile.full_fit_final_loss",
        fmt17(*s.experts.full_losses.last().unwrap_or(&f64::NAN)),
    );
    Ok(())
}

/// Solves for the multipliers only and writes them.
pub fn run_eta(exp: &Experiment, out: &Path) -> Result<EtaSolution> {
    let eta = exp.solve_eta().map_err(|e| e.in_stage("eta"))?;
    write_eta(out, &eta, &exp.constraints.labels())?;
    let mut report = Report::new();
    report.kv("experiment", &exp.config.name);
    report.kv("seed", exp.config.seed);
    report.eta(&eta);
    report.save(out)?;
    Ok(eta)
}

/// Simulates every expert and the average drift; writes `paths/` only.
pub fn export_paths(exp: &Experiment, out: &Path) -> Result<()> {
    let m = exp.config.simulation.num_paths;
    let export = exp.config.simulation.export_paths;
    let seed = exp.seeds().simulation;
    let mut q = create(out, "paths/quantiles.csv")?;
    writeln!(q, "measure,t,component,q10,q50,q90")?;
    for (k, expert) in exp.ensemble.experts().iter().enumerate() {
        let batch = exp.simulate(expert, m, seed).map_err(|e| e.in_stage("simulate"))?;
        write_batch_artifacts(out, &format!("P{}", k + 1), &batch, export, &mut q, None)?;
    }
    let batch = exp
        .simulate(exp.ensemble.average_drift(), m, seed)
        .map_err(|e| e.in_stage("simulate"))?;
    write_batch_artifacts(out, "Qbar", &batch, export, &mut q, None)?;
    batch.write_increments_csv(create(out, "paths/increments_Qbar.csv")?, Some(export))?;
    q.flush()?;
    Ok(())
}

/// Solves for the multipliers, then the one-dimensional value PDE on a
/// domain sized by a pilot batch; writes `tables/omega_grid.csv`.
pub fn run_oracle_pde(exp: &Experiment, out: &Path) -> Result<(EtaSolution, OmegaGrid)> {
    if exp.ensemble.dim() != 1 {
        return Err(Error::Config("the PDE oracle is one-dimensional".into()));
    }
    let vol = exp.ensemble.vol();
    if vol.constant_factor().is_none() {
        return Err(Error::Config("the PDE oracle needs a constant volatility".into()));
    }
    let eta = exp.solve_eta().map_err(|e| e.in_stage("eta"))?;
    write_eta(out, &eta, &exp.constraints.labels())?;
    if !eta.converged {
        return Err(Error::IllConditioned("multipliers did not converge".into()).in_stage("eta"));
    }
    let spec = &exp.config.pde;
    let pilot = exp
        .simulate(exp.ensemble.average_drift(), spec.pilot_paths, exp.seeds().monitor)
        .map_err(|e| e.in_stage("pde"))?;
    let space = SpaceGrid::from_pilot(&pilot, spec.dx).map_err(|e| e.in_stage("pde"))?;
    let grid = solve_omega_pde_with(&exp.ensemble, &exp.constraints, &eta, &space, &exp.grid, &spec.solver)
        .map_err(|e| e.in_stage("pde"))?;
    grid.write_csv(create(out, "tables/omega_grid.csv")?, spec.time_stride, spec.space_stride)?;
    let mut report = Report::new();
    report.kv("experiment", &exp.config.name);
    report.kv("seed", exp.config.seed);
    report.eta(&eta);
    report.kv("pde.lo", fmt17(space.lo));
    report.kv("pde.hi", fmt17(space.hi));
    report.kv("pde.cells", space.cells);
    report.kv("pde.omega_0_x0", fmt17(grid.omega_at(0, exp.ensemble.x0()[0])?));
    report.save(out)?;
    Ok((eta, grid))
}
