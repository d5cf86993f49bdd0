use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::store::{csv_table, Artifact};
use super::{ExperimentConfig, HarnessError, Params};
use crate::classify::{
    conv_forward, conv_gd_run, correlation, diag_gd_run, frequency_dataset, max_margin, sparse_dataset,
    ClassificationDataset, ClassifierRun, ConvNetSpec, DiagonalNetSpec, LossFn, Truth,
};
use crate::dynamics::{
    alpha_time, closed_form_sigma, empirical_threshold, flow_rhs, flow_threshold_bounds, integrate_flow,
    is_incremental, CoordinateSeries, Depth, IncrementalQuery, Method, StepControl, ToyModelSpec, Trajectory,
};
use crate::gd::{
    empirical_gd_threshold, first_step_depth_ratio, gd_run, gd_step, gd_threshold_bounds, max_no_overshoot_rate, FirstStep,
    GdConfig,
};
use crate::linalg::{effective_rank, SpectrumTrajectory};
use crate::quadratic::{
    quadratic_dataset, quadratic_gd_run, squared_flow, variance_flow_spectrum, variance_loss, LossKind, QuadraticNetSpec, QuadraticRun,
};
use crate::rng::{stream, Stream};
use crate::sensing::{
    calibrate_gaussian_std, gaussian_measurements, planted_target, sensing_flow_spectrum, sensing_gd_run, InitScheme, SensingProblem,
    SensingRun,
};
use crate::sparse::{agreement_curve, DeepSelectConfig, PursuitProblem};

/// A single value or a list; always read back as a list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(
    from = "OneOrMany<T>",
    into = "Vec<T>",
    bound(serialize = "T: Serialize + Clone", deserialize = "T: Deserialize<'de>")
)]
pub struct Grid<T>(pub Vec<T>);

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> From<OneOrMany<T>> for Grid<T> {
    fn from(v: OneOrMany<T>) -> Self {
        match v {
            OneOrMany::One(x) => Grid(vec![x]),
            OneOrMany::Many(xs) => Grid(xs),
        }
    }
}

impl<T> From<Grid<T>> for Vec<T> {
    fn from(g: Grid<T>) -> Self {
        g.0
    }
}

impl<T> Grid<T> {
    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

type Check = Result<(), HarnessError>;

fn fail(path: &str, message: impl Into<String>) -> HarnessError {
    HarnessError::config(format!("params.{path}"), message)
}

fn nonempty<T>(path: &str, grid: &Grid<T>) -> Check {
    if grid.is_empty() {
        return Err(fail(path, "grid must not be empty"));
    }
    Ok(())
}

fn positive(path: &str, values: impl IntoIterator<Item = f64>) -> Check {
    for v in values {
        if !(v > 0.0 && v.is_finite()) {
            return Err(fail(path, format!("must be positive and finite, got {v}")));
        }
    }
    Ok(())
}

fn at_least_one(path: &str, v: usize) -> Check {
    if v == 0 {
        return Err(fail(path, "must be at least 1"));
    }
    Ok(())
}

fn control(path: &str, c: &StepControl) -> Check {
    c.validate().map_err(|e| fail(path, e.to_string()))
}

fn optimal_vector(path: &str, optimal: &[f64]) -> Check {
    if optimal.is_empty() || optimal.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(fail(path, "must be a non-empty list of non-negative values"));
    }
    Ok(())
}

fn finite_depths(path: &str, depths: &Grid<u32>) -> Check {
    nonempty(path, depths)?;
    if depths.iter().any(|n| *n == 0) {
        return Err(fail(path, "depths must be at least 1"));
    }
    Ok(())
}

/// One learning rate for every depth, or one per depth.
fn rates_for(path: &str, rates: &Grid<f64>, depths: usize) -> Check {
    positive(path, rates.iter().copied())?;
    if rates.len() != 1 && rates.len() != depths {
        return Err(fail(path, format!("give one rate or one per depth ({depths}), got {}", rates.len())));
    }
    Ok(())
}

fn rate_at(rates: &Grid<f64>, k: usize) -> f64 {
    if rates.len() == 1 {
        rates.0[0]
    } else {
        rates.0[k]
    }
}

/// Substream for randomness shared by every cell of one trial.
fn trial_stream(seed: u64, trial: usize) -> Stream {
    stream(seed, (1 << 63) | trial as u64)
}

fn default_samples() -> usize {
    200
}

fn default_alphas() -> Vec<f64> {
    vec![0.5, 0.9]
}

fn default_incremental() -> [f64; 2] {
    [0.1, 0.9]
}

fn one() -> usize {
    1
}

fn default_record() -> usize {
    100
}

fn default_rank_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyFlowParams {
    pub optimal: Vec<f64>,
    pub depths: Grid<Depth>,
    pub init_scales: Grid<f64>,
    pub t_end: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Closed form where one exists and the integrator otherwise, unless set.
    #[serde(default)]
    pub method: Option<Method>,
    #[serde(default)]
    pub control: StepControl,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// `(s, f)` used to test each adjacent pair of distinct targets for
    /// incremental learning on the sampled trajectory.
    #[serde(default = "default_incremental")]
    pub incremental: [f64; 2],
}

impl ToyFlowParams {
    pub fn validate(&self) -> Check {
        optimal_vector("optimal", &self.optimal)?;
        nonempty("depths", &self.depths)?;
        nonempty("init_scales", &self.init_scales)?;
        positive("init_scales", self.init_scales.iter().copied())?;
        positive("t_end", [self.t_end])?;
        at_least_one("samples", self.samples)?;
        control("control", &self.control)?;
        if self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(fail("alphas", "each α must lie in (0, 1)"));
        }
        let [is, jf] = self.incremental;
        if !(is > 0.0 && is < 1.0 && jf > 0.0 && jf < 1.0) {
            return Err(fail("incremental", "s and f must lie in (0, 1)"));
        }
        match self.method {
            Some(Method::Gd) => Err(fail("method", "use kind = \"toy-gd\" for gradient descent")),
            Some(Method::ClosedForm) => {
                if let Some(d) = self.depths.iter().find(|d| matches!(d, Depth::Finite(n) if *n > 2)) {
                    return Err(fail("method", format!("no closed form at depth {d}")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn method_for(&self, depth: Depth) -> Method {
        self.method.unwrap_or(match depth {
            Depth::Finite(1 | 2) | Depth::Infinite => Method::ClosedForm,
            Depth::Finite(_) => Method::Ode,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyGdParams {
    pub optimal: Vec<f64>,
    pub depths: Grid<u32>,
    pub init_scales: Grid<f64>,
    /// Absolute learning rate; exclusive with `rate_factor`.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    /// `η = c (1/σ*₁)^{2-2/N}`; exclusive with `learning_rate`.
    #[serde(default)]
    pub rate_factor: Option<f64>,
    pub steps: usize,
    #[serde(default = "one")]
    pub record_every: usize,
}

impl ToyGdParams {
    pub fn validate(&self) -> Check {
        optimal_vector("optimal", &self.optimal)?;
        finite_depths("depths", &self.depths)?;
        nonempty("init_scales", &self.init_scales)?;
        positive("init_scales", self.init_scales.iter().copied())?;
        at_least_one("record_every", self.record_every)?;
        match (self.learning_rate, self.rate_factor) {
            (Some(eta), None) => positive("learning_rate", [eta]),
            (None, Some(c)) => positive("rate_factor", [c]),
            _ => Err(fail("learning_rate", "set exactly one of learning_rate and rate_factor")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMethod {
    #[default]
    Flow,
    Gd,
}

fn default_small_optimal() -> f64 {
    1.0
}

fn default_gd_steps() -> usize {
    10_000_000
}

fn default_rate_factors() -> Grid<f64> {
    Grid(vec![0.1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdParams {
    pub depths: Grid<Depth>,
    pub ratios: Grid<f64>,
    pub s: Grid<f64>,
    pub f: Grid<f64>,
    #[serde(default = "default_small_optimal")]
    pub small_optimal: f64,
    #[serde(default)]
    pub method: ThresholdMethod,
    /// Learning-rate factors `c` for `method = "gd"`.
    #[serde(default = "default_rate_factors")]
    pub rate_factors: Grid<f64>,
    #[serde(default = "default_gd_steps")]
    pub max_steps: usize,
    /// Search bracket on `σ₀`; derived from the bounds when absent.
    #[serde(default)]
    pub bracket: Option<[f64; 2]>,
    #[serde(default)]
    pub control: StepControl,
}

impl ThresholdParams {
    pub fn validate(&self) -> Check {
        nonempty("depths", &self.depths)?;
        if self.depths.iter().any(|d| matches!(d, Depth::Finite(1))) {
            return Err(fail("depths", "no initialization threshold exists at depth 1"));
        }
        if self.method == ThresholdMethod::Gd && self.depths.iter().any(|d| *d == Depth::Infinite) {
            return Err(fail("depths", "gradient descent needs finite depths"));
        }
        nonempty("ratios", &self.ratios)?;
        nonempty("s", &self.s)?;
        nonempty("f", &self.f)?;
        nonempty("rate_factors", &self.rate_factors)?;
        positive("small_optimal", [self.small_optimal])?;
        positive("rate_factors", self.rate_factors.iter().copied())?;
        for (path, grid) in [("ratios", &self.ratios), ("s", &self.s), ("f", &self.f)] {
            for &v in grid.iter() {
                let (r, s, f) = match path {
                    "ratios" => (v, 0.1, 0.9),
                    "s" => (2.0, v, 0.9),
                    _ => (2.0, 0.1, v),
                };
                IncrementalQuery::with_ratio(r, s, f).map_err(|e| fail(path, e.to_string()))?;
            }
        }
        if let Some([lo, hi]) = self.bracket {
            if !(lo > 0.0 && hi > lo) {
                return Err(fail("bracket", "need 0 < lo < hi"));
            }
        }
        control("control", &self.control)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SensingInit {
    /// Gaussian factors scaled so the top singular value of `W(0)` is about
    /// `init_scale`.
    #[default]
    Gaussian,
    /// `W(0) = init_scale · I`.
    Identity,
}

/// Time span of an optional population gradient flow written alongside the
/// descent run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSpan {
    pub t_end: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub control: StepControl,
}

impl FlowSpan {
    fn validate(&self, path: &str) -> Check {
        positive(&format!("{path}.t_end"), [self.t_end])?;
        at_least_one(&format!("{path}.samples"), self.samples)?;
        control(&format!("{path}.control"), &self.control)
    }

    fn times(&self) -> Vec<f64> {
        (0..=self.samples).map(|k| self.t_end * k as f64 / self.samples as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingParams {
    pub d: usize,
    pub spectrum: Vec<f64>,
    /// Number of Gaussian measurements; the population loss when absent.
    #[serde(default)]
    pub measurements: Option<usize>,
    pub depths: Grid<u32>,
    #[serde(default)]
    pub init: SensingInit,
    pub init_scale: f64,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_record")]
    pub record_every: usize,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default = "default_rank_fraction")]
    pub rank_fraction: f64,
    /// Eigenvalue flow under identity init and the population loss.
    #[serde(default)]
    pub flow: Option<FlowSpan>,
}

impl SensingParams {
    pub fn validate(&self) -> Check {
        at_least_one("d", self.d)?;
        optimal_vector("spectrum", &self.spectrum)?;
        if self.spectrum.len() > self.d {
            return Err(fail("spectrum", "rank exceeds d"));
        }
        finite_depths("depths", &self.depths)?;
        positive("init_scale", [self.init_scale])?;
        positive("learning_rate", [self.learning_rate])?;
        positive("rank_fraction", [self.rank_fraction])?;
        at_least_one("record_every", self.record_every)?;
        at_least_one("trials", self.trials)?;
        if let Some(m) = self.measurements {
            at_least_one("measurements", m)?;
        }
        if let Some(flow) = &self.flow {
            flow.validate("flow")?;
            if self.init != SensingInit::Identity || self.measurements.is_some() {
                return Err(fail("flow", "the eigenvalue flow needs identity init and the population loss"));
            }
        }
        Ok(())
    }

    fn top_k(&self) -> usize {
        self.top_k.unwrap_or(self.spectrum.len() + 2).min(self.d).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticParams {
    pub d: usize,
    /// Eigenvalues of `W*ᵀW*`.
    pub spectrum: Vec<f64>,
    pub samples: usize,
    pub init_scale: f64,
    #[serde(default)]
    pub target_bias: f64,
    pub losses: Grid<LossKind>,
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_record")]
    pub record_every: usize,
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default = "default_rank_fraction")]
    pub rank_fraction: f64,
    /// Eigenvalue flow of `WᵀW` for each loss.
    #[serde(default)]
    pub flow: Option<FlowSpan>,
}

impl QuadraticParams {
    pub fn validate(&self) -> Check {
        at_least_one("d", self.d)?;
        optimal_vector("spectrum", &self.spectrum)?;
        if self.spectrum.len() > self.d {
            return Err(fail("spectrum", "rank exceeds d"));
        }
        if self.samples < 2 {
            return Err(fail("samples", "need at least 2 samples"));
        }
        nonempty("losses", &self.losses)?;
        positive("init_scale", [self.init_scale])?;
        positive("learning_rate", [self.learning_rate])?;
        positive("rank_fraction", [self.rank_fraction])?;
        if !self.target_bias.is_finite() {
            return Err(fail("target_bias", "must be finite"));
        }
        at_least_one("record_every", self.record_every)?;
        at_least_one("trials", self.trials)?;
        match &self.flow {
            Some(flow) => flow.validate("flow"),
            None => Ok(()),
        }
    }

    fn top_k(&self) -> usize {
        self.top_k.unwrap_or(self.spectrum.len() + 2).min(self.d).max(1)
    }
}

fn exponential() -> LossFn {
    LossFn::Exponential
}

fn default_target_loss() -> f64 {
    1e-8
}

fn default_pilot() -> usize {
    50
}

fn four() -> usize {
    4
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagClassifyParams {
    pub d: usize,
    pub samples: usize,
    #[serde(default = "four")]
    pub sparsity: usize,
    pub depths: Grid<u32>,
    pub init_scales: Grid<f64>,
    /// One rate for all depths or one per depth.
    pub learning_rates: Grid<f64>,
    #[serde(default = "exponential")]
    pub loss: LossFn,
    pub max_steps: usize,
    #[serde(default = "default_record")]
    pub record_every: usize,
    #[serde(default = "default_target_loss")]
    pub target_loss: f64,
    #[serde(default = "default_pilot")]
    pub pilot_steps: usize,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default = "yes")]
    pub max_margin: bool,
}

impl DiagClassifyParams {
    pub fn validate(&self) -> Check {
        at_least_one("d", self.d)?;
        at_least_one("samples", self.samples)?;
        if self.sparsity == 0 || self.sparsity > self.d {
            return Err(fail("sparsity", "need 1 ≤ sparsity ≤ d"));
        }
        finite_depths("depths", &self.depths)?;
        nonempty("init_scales", &self.init_scales)?;
        positive("init_scales", self.init_scales.iter().copied())?;
        rates_for("learning_rates", &self.learning_rates, self.depths.len())?;
        positive("target_loss", [self.target_loss])?;
        at_least_one("record_every", self.record_every)?;
        at_least_one("trials", self.trials)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvClassifyParams {
    pub d: usize,
    pub samples: usize,
    /// Number of non-zero truth frequencies.
    #[serde(default = "four")]
    pub frequencies: usize,
    pub depths: Grid<u32>,
    pub init_scales: Grid<f64>,
    pub learning_rates: Grid<f64>,
    #[serde(default = "exponential")]
    pub loss: LossFn,
    pub max_steps: usize,
    #[serde(default = "default_record")]
    pub record_every: usize,
    #[serde(default = "default_target_loss")]
    pub target_loss: f64,
    #[serde(default = "default_pilot")]
    pub pilot_steps: usize,
    #[serde(default = "one")]
    pub trials: usize,
}

impl ConvClassifyParams {
    pub fn validate(&self) -> Check {
        if self.d < 4 {
            return Err(fail("d", "need d ≥ 4"));
        }
        at_least_one("samples", self.samples)?;
        if self.frequencies == 0 || self.frequencies > self.d / 2 - 1 {
            return Err(fail("frequencies", "need 1 ≤ frequencies < d/2"));
        }
        finite_depths("depths", &self.depths)?;
        nonempty("init_scales", &self.init_scales)?;
        positive("init_scales", self.init_scales.iter().copied())?;
        rates_for("learning_rates", &self.learning_rates, self.depths.len())?;
        positive("target_loss", [self.target_loss])?;
        at_least_one("record_every", self.record_every)?;
        at_least_one("trials", self.trials)
    }
}

fn default_sparsities() -> Grid<usize> {
    Grid((1..=10).collect())
}

fn thirty() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OmpAgreementParams {
    pub d: usize,
    pub n: usize,
    #[serde(default = "default_sparsities")]
    pub sparsities: Grid<usize>,
    #[serde(default = "thirty")]
    pub trials: usize,
    #[serde(default)]
    pub deep: DeepSelectConfig,
}

impl OmpAgreementParams {
    pub fn validate(&self) -> Check {
        at_least_one("d", self.d)?;
        nonempty("sparsities", &self.sparsities)?;
        if self.sparsities.iter().any(|s| *s == 0 || *s > self.n || *s > self.d) {
            return Err(fail("sparsities", "need 1 ≤ s ≤ min(d, n)"));
        }
        if self.trials < 2 {
            return Err(fail("trials", "need at least 2 trials per sparsity"));
        }
        if self.deep.stop_after.is_some() {
            return Err(fail("deep.stop_after", "set per problem from its sparsity"));
        }
        self.deep.validate().map_err(|e| fail("deep", e.to_string()))
    }
}

/// Files plus the summary document of a finished run.
pub(crate) struct Outputs {
    pub artifacts: Vec<Artifact>,
    pub summary: Value,
}

type CellResult = Result<(Vec<Artifact>, Value), HarnessError>;

fn collect(cells: Vec<CellResult>) -> Result<(Vec<Artifact>, Vec<Value>), HarnessError> {
    let mut artifacts = Vec::new();
    let mut values = Vec::new();
    for cell in cells {
        let (a, v) = cell?;
        artifacts.extend(a);
        values.push(v);
    }
    Ok((artifacts, values))
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}_{k}")).collect()
}

fn trajectory_csv(first: &str, traj: &Trajectory, columns: Vec<String>) -> Vec<u8> {
    let mut header = vec![first.to_string()];
    header.extend(columns);
    csv_table(&header, traj.times.iter().zip(&traj.values).map(|(t, v)| std::iter::once(*t).chain(v.iter().copied()).collect()))
}

fn spectrum_csv(traj: &SpectrumTrajectory, first: &str, prefix: &str, extra: Option<(&str, &[f64])>) -> Vec<u8> {
    let width = traj.values.iter().map(Vec::len).max().unwrap_or(0);
    let mut header = vec![first.to_string()];
    header.extend(numbered(prefix, width));
    if let Some((name, _)) = extra {
        header.push(name.to_string());
    }
    let rows = traj.times.iter().zip(&traj.values).enumerate().map(|(k, (t, v))| {
        let mut row = vec![*t];
        row.extend(v.iter().copied());
        row.resize(width + 1, f64::NAN);
        if let Some((_, col)) = extra {
            row.push(col.get(k).copied().unwrap_or(f64::NAN));
        }
        row
    });
    csv_table(&header, rows)
}

pub(crate) fn execute(config: &ExperimentConfig) -> Result<Outputs, HarnessError> {
    let seed = config.seed;
    let (artifacts, summary) = match &config.params {
        Params::ToyFlow(p) => toy_flow(p)?,
        Params::ToyGd(p) => toy_gd(p)?,
        Params::Threshold(p) => threshold(p)?,
        Params::Sensing(p) => sensing(p, seed)?,
        Params::Quadratic(p) => quadratic(p, seed)?,
        Params::DiagClassify(p) => diag_classify(p, seed)?,
        Params::ConvClassify(p) => conv_classify(p, seed)?,
        Params::OmpAgreement(p) => omp_agreement(p, seed)?,
    };
    let summary = json!({
        "kind": config.kind,
        "schema_version": config.schema_version,
        "seed": seed,
        "config_hash": config.hash(),
        "results": summary,
    });
    Ok(Outputs { artifacts, summary })
}

fn toy_flow(p: &ToyFlowParams) -> Result<(Vec<Artifact>, Value), HarnessError> {
    let cells: Vec<(Depth, f64)> =
        p.depths.iter().flat_map(|&d| p.init_scales.iter().map(move |&s| (d, s))).collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(depth, s0)| {
            let spec = ToyModelSpec::new(depth, s0, p.optimal.clone())?;
            let method = p.method_for(depth);
            let traj = match method {
                Method::Ode => integrate_flow(&spec, p.t_end, &StepControl { samples: p.samples, ..p.control })?,
                _ => {
                    let times: Vec<f64> = (0..=p.samples).map(|k| p.t_end * k as f64 / p.samples as f64).collect();
                    let values = times
                        .iter()
                        .map(|&t| (0..spec.dim()).map(|i| closed_form_sigma(&spec, i, t)).collect())
                        .collect::<crate::Result<Vec<Vec<f64>>>>()?;
                    Trajectory { times, values, method: Method::ClosedForm, spec: Some(spec.clone()) }
                }
            };
            let file = format!("flow_N{depth}_init{s0:e}.csv");
            let bytes = trajectory_csv("time", &traj, numbered("sigma", spec.dim()));
            let mut alphas = Vec::new();
            for i in 0..spec.dim() {
                for &a in &p.alphas {
                    let at = alpha_time(&spec, i, a)?;
                    alphas.push(json!({"coordinate": i, "alpha": a, "time": at.time, "degenerate": at.degenerate}));
                }
            }
            let initial_rate = flow_rhs(&spec, &vec![s0; spec.dim()])?;
            let value = json!({
                "depth": depth, "init_scale": s0, "method": method, "file": file,
                "final": traj.last(), "alpha_times": alphas, "initial_rate": initial_rate,
                "incremental": witnesses(&traj, &spec.optimal, p.incremental)?,
            });
            Ok((vec![Artifact::new(file, bytes)], value))
        })
        .collect();
    let (artifacts, cells) = collect(results)?;
    Ok((artifacts, json!({ "cells": cells })))
}

/// Adjacent pairs in descending target order, each with its earliest
/// sampled witness time or `null`.
fn witnesses(traj: &Trajectory, optimal: &[f64], [s, f]: [f64; 2]) -> Result<Vec<Value>, HarnessError> {
    let mut order: Vec<usize> = (0..optimal.len()).filter(|&i| optimal[i] > 0.0).collect();
    order.sort_by(|&a, &b| optimal[b].total_cmp(&optimal[a]));
    let series = |i: usize| CoordinateSeries {
        times: &traj.times,
        values: traj.values.iter().map(|row| row[i]).collect(),
        optimal: optimal[i],
    };
    let mut out = Vec::new();
    for pair in order.windows(2) {
        let (i, j) = (pair[0], pair[1]);
        if optimal[i] <= optimal[j] {
            continue;
        }
        let query = IncrementalQuery::with_ratio(optimal[i] / optimal[j], s, f)?;
        let hit = is_incremental(&series(i), &series(j), &query)?;
        out.push(json!({"large": i, "small": j, "witness_time": hit.map(|w| w.time)}));
    }
    Ok(out)
}

fn toy_gd(p: &ToyGdParams) -> Result<(Vec<Artifact>, Value), HarnessError> {
    let cells: Vec<(u32, f64)> = p.depths.iter().flat_map(|&d| p.init_scales.iter().map(move |&s| (d, s))).collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(n, s0)| {
            let spec = ToyModelSpec::new(Depth::Finite(n), s0, p.optimal.clone())?;
            let config = match (p.learning_rate, p.rate_factor) {
                (Some(eta), _) => GdConfig::new(spec.clone(), eta, p.steps)?,
                (None, Some(c)) => GdConfig::from_rate_factor(spec.clone(), c, p.steps)?,
                (None, None) => unreachable!("validated"),
            };
            let traj = gd_run(&config, p.record_every)?;
            let file = format!("gd_N{n}_init{s0:e}.csv");
            let bytes = trajectory_csv("iteration", &traj, numbered("sigma", spec.dim()));
            let peak = traj
                .values
                .iter()
                .flat_map(|row| row.iter().zip(&spec.optimal).filter(|(_, o)| **o > 0.0).map(|(v, o)| v / o))
                .fold(0.0, f64::max);
            let safe_rate = if n >= 2 { Some(max_no_overshoot_rate(&spec)?) } else { None };
            let value = json!({
                "depth": n, "init_scale": s0, "learning_rate": config.learning_rate, "file": file,
                "final": traj.last(), "max_relative_value": peak, "overshoot": peak > 1.0,
                "max_no_overshoot_rate": safe_rate, "first_step": first_step(&spec, config.learning_rate)?,
                "first_iterate": gd_step(&config, &spec.initial())?,
            });
            Ok((vec![Artifact::new(file, bytes)], value))
        })
        .collect();
    let (artifacts, cells) = collect(results)?;
    Ok((artifacts, json!({ "cells": cells })))
}

/// Predicted first update of the two largest distinct targets, in units of
/// their own targets. `null` when the prediction does not apply.
fn first_step(spec: &ToyModelSpec, eta: f64) -> Result<Option<FirstStep>, HarnessError> {
    let mut sorted: Vec<f64> = spec.optimal.iter().copied().filter(|v| *v > 0.0).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.dedup();
    let (Some(&top), Some(&next)) = (sorted.first(), sorted.get(1)) else { return Ok(None) };
    let r_init = spec.init_scale / top;
    if r_init >= 1.0 {
        return Ok(None);
    }
    let c = eta * top.powf(spec.depth.flow_exponent());
    Ok(Some(first_step_depth_ratio(spec.depth, top / next, c, 1.0, r_init)?))
}

fn threshold(p: &ThresholdParams) -> Result<(Vec<Artifact>, Value), HarnessError> {
    let mut cells = Vec::new();
    for &depth in p.depths.iter() {
        for &r in p.ratios.iter() {
            for &s in p.s.iter() {
                for &f in p.f.iter() {
                    match p.method {
                        ThresholdMethod::Flow => cells.push((depth, r, s, f, None)),
                        ThresholdMethod::Gd => cells.extend(p.rate_factors.iter().map(|&c| (depth, r, s, f, Some(c)))),
                    }
                }
            }
        }
    }
    let sj = p.small_optimal;
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(depth, r, s, f, c)| {
            let query = IncrementalQuery::with_ratio(r, s, f)?;
            let template = query.pair_spec(depth, s * sj * 0.5, sj)?;
            let bounds = match c {
                None => Some(flow_threshold_bounds(&query, sj, depth)?),
                Some(c) if depth == Depth::Finite(2) => Some(gd_threshold_bounds(&query, sj, r * sj, c)?),
                Some(_) => None,
            };
            let bracket = p.bracket.map(|[a, b]| (a, b)).unwrap_or_else(|| {
                let lo = bounds.as_ref().map_or(1e-12 * s * sj, |b| 0.5 * b.lower);
                (lo, 0.999 * s * sj)
            });
            let empirical = match c {
                None => empirical_threshold(&template, &query, bracket, &p.control),
                Some(c) => GdConfig::from_rate_factor(template.clone(), c, p.max_steps)
                    .and_then(|g| empirical_gd_threshold(&g, &query, bracket)),
            };
            let (value, error) = match empirical {
                Ok(v) => (Some(v), None),
                Err(e) => (None, Some(e.to_string())),
            };
            let within = match (&bounds, value) {
                (Some(b), Some(v)) => Some(b.contains(v)),
                _ => None,
            };
            let out = json!({
                "depth": depth, "ratio": r, "s": s, "f": f, "rate_factor": c,
                "lower": bounds.as_ref().map(|b| b.lower), "upper": bounds.as_ref().map(|b| b.upper),
                "regime": bounds.as_ref().map(|b| b.regime),
                "empirical": value, "within_bounds": within, "bracket": [bracket.0, bracket.1], "error": error,
            });
            Ok((Vec::new(), out))
        })
        .collect();
    let (_, cells) = collect(results)?;
    let rows: Vec<Vec<f64>> = cells
        .iter()
        .map(|c| {
            let num = |k: &str| c[k].as_f64().unwrap_or(f64::NAN);
            let depth = c["depth"].as_f64().unwrap_or(f64::INFINITY);
            vec![depth, num("ratio"), num("s"), num("f"), num("rate_factor"), num("lower"), num("empirical"), num("upper")]
        })
        .collect();
    let header: Vec<String> =
        ["depth", "ratio", "s", "f", "rate_factor", "lower", "empirical", "upper"].iter().map(|s| s.to_string()).collect();
    let table = Artifact::new("thresholds.csv".into(), csv_table(&header, rows.into_iter()));
    Ok((vec![table], json!({ "cells": cells })))
}

fn sensing(p: &SensingParams, seed: u64) -> Result<(Vec<Artifact>, Value), HarnessError> {
    let problems = (0..p.trials)
        .map(|t| {
            let mut rng = trial_stream(seed, t);
            let target = planted_target(&mut rng, p.d, &p.spectrum)?;
            let meas = p.measurements.map(|m| gaussian_measurements(&mut rng, &target, m));
            Ok((target, meas))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let cells: Vec<(usize, u32)> = (0..p.trials).flat_map(|t| p.depths.iter().map(move |&n| (t, n))).collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .enumerate()
        .map(|(cell, &(trial, n))| {
            let mut rng = stream(seed, cell as u64);
            let init = match p.init {
                SensingInit::Identity => InitScheme::Identity { scale: p.init_scale },
                SensingInit::Gaussian => {
                    InitScheme::Gaussian { std: calibrate_gaussian_std(&mut rng, p.d, n, p.init_scale, 100)? }
                }
            };
            let (target, meas) = problems[trial].clone();
            let problem = SensingProblem::new(n, target, init, meas)?;
            let run = SensingRun {
                learning_rate: p.learning_rate,
                steps: p.steps,
                record_every: p.record_every,
                top_k: p.top_k(),
                track_alignment: false,
            };
            let traj = sensing_gd_run(&problem, &run, &mut rng)?;
            let last = traj.last().unwrap_or(&[]).to_vec();
            let file = format!("sensing_N{n}_trial{trial}.csv");
            let mut files = vec![Artifact::new(file.clone(), spectrum_csv(&traj, "step", "sv", None))];
            let mut flow_final = None;
            if let Some(flow) = &p.flow {
                let tr = sensing_flow_spectrum(&problem, &flow.times(), &flow.control)?;
                flow_final = tr.last().map(<[f64]>::to_vec);
                files.push(Artifact::new(format!("sensing_flow_N{n}_trial{trial}.csv"), spectrum_csv(&tr, "time", "eig", None)));
            }
            let value = json!({
                "depth": n, "trial": trial, "file": file, "final_singular_values": last,
                "effective_rank": effective_rank(&last, p.rank_fraction), "flow_final": flow_final,
            });
            Ok((files, value))
        })
        .collect();
    let (artifacts, cells) = collect(results)?;
    Ok((artifacts, json!({ "cells": cells })))
}

fn quadratic(p: &QuadraticParams, seed: u64) -> Result<(Vec<Artifact>, Value), HarnessError> {
    let problems = (0..p.trials)
        .map(|t| {
            let mut rng = trial_stream(seed, t);
            let mut spec = QuadraticNetSpec::planted(&mut rng, p.d, &p.spectrum, p.init_scale)?;
            spec.target_bias = p.target_bias;
            let data = quadratic_dataset(&mut rng, &spec, p.samples);
            Ok((spec, data))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let cells: Vec<(usize, LossKind)> = (0..p.trials).flat_map(|t| p.losses.iter().map(move |&l| (t, l))).collect();
    let results: Vec<CellResult> = cells
        .par_iter()
        .enumerate()
        .map(|(cell, &(trial, loss))| {
            let mut rng = stream(seed, cell as u64);
            let (spec, data) = &problems[trial];
            let run = QuadraticRun {
                loss,
                learning_rate: p.learning_rate,
                steps: p.steps,
                record_every: p.record_every,
                top_k: p.top_k(),
            };
            let trace = quadratic_gd_run(spec, data, &run, &mut rng)?;
            let last = trace.spectrum.last().unwrap_or(&[]).to_vec();
            let name = serde_json::to_value(loss).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default();
            let file = format!("quadratic_{name}_trial{trial}.csv");
            let extra = loss.has_bias().then_some(("bias", trace.bias.as_slice()));
            let mut files = vec![Artifact::new(file.clone(), spectrum_csv(&trace.spectrum, "step", "eig", extra))];
            let mut flow_final = None;
            if let Some(flow) = &p.flow {
                let times = flow.times();
                let (tr, bias) = match loss {
                    LossKind::Variance => (variance_flow_spectrum(spec, &times, &flow.control)?, Vec::new()),
                    _ => {
                        let pair = loss.has_bias().then_some((0.0, spec.target_bias));
                        let cf = squared_flow(spec.target_spectrum(), spec.init_scale, pair, &times, &flow.control)?;
                        (cf.spectrum, cf.bias)
                    }
                };
                flow_final = tr.last().map(<[f64]>::to_vec);
                let extra = loss.has_bias().then_some(("bias", bias.as_slice()));
                files.push(Artifact::new(format!("quadratic_flow_{name}_trial{trial}.csv"), spectrum_csv(&tr, "time", "eig", extra)));
            }
            let value = json!({
                "loss": loss, "trial": trial, "file": file, "final_eigenvalues": last,
                "final_bias": trace.bias.last(), "effective_rank": effective_rank(&last, p.rank_fraction),
                "variance_loss": variance_loss(&trace.weights, &spec.target_weights, Some(&data.x))?,
                "population_variance_loss": variance_loss(&trace.weights, &spec.target_weights, None)?,
                "flow_final": flow_final,
            });
            Ok((files, value))
        })
        .collect();
    let (artifacts, cells) = collect(results)?;
    Ok((artifacts, json!({ "cells": cells })))
}

const TOP_TRACKED: usize = 5;

fn diag_classify(p: &DiagClassifyParams, seed: u64) -> Result<(Vec<Artifact>, Value), HarnessError> {
    let datasets = (0..p.trials)
        .into_par_iter()
        .map(|t| {
            let ds = sparse_dataset(&mut trial_stream(seed, t), p.d, p.samples, p.sparsity)?;
            let mm = if p.max_margin { Some(max_margin(&ds, 1e-12, 1_000_000)?) } else { None };
            Ok((ds, mm))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for t in 0..p.trials {
        for (k, &n) in p.depths.iter().enumerate() {
            for &s0 in p.init_scales.iter() {
                cells.push((t, n, s0, rate_at(&p.learning_rates, k)));
            }
        }
    }
    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|&(trial, n, s0, eta)| {
            let (ds, mm) = &datasets[trial];
            let spec = DiagonalNetSpec::new(n, s0)?;
            let run = ClassifierRun {
                loss: p.loss,
                learning_rate: eta,
                max_steps: p.max_steps,
                target_loss: p.target_loss,
                pilot_steps: p.pilot_steps,
                record_every: p.record_every,
            };
            let trace = diag_gd_run(&spec, ds, &run)?;
            let top = trace.top_coordinates(TOP_TRACKED);
            let mut header = vec!["step".to_string(), "loss".to_string()];
            header.extend(top.iter().map(|i| format!("abs_sigma_{i}")));
            let rows = trace.predictor.times.iter().zip(&trace.predictor.values).zip(&trace.losses).map(|((t, v), l)| {
                let mut row = vec![*t, *l];
                row.extend(top.iter().map(|&i| v[i].abs()));
                row
            });
            let file = format!("diag_N{n}_init{s0:e}_trial{trial}.csv");
            let sigma = trace.final_predictor();
            let support = match &ds.truth {
                Truth::Sparse { support, .. } | Truth::Frequency { frequencies: support, .. } => support.clone(),
            };
            let value = json!({
                "depth": n, "init_scale": s0, "learning_rate": eta, "trial": trial, "file": file,
                "steps": trace.steps, "converged": trace.converged, "final_loss": trace.losses.last(),
                "truth_support": support, "top_coordinates": top,
                "truth_correlation": correlation(sigma, ds.truth.weights()),
                "max_margin_correlation": mm.as_ref().map(|m| correlation(sigma, &m.weights)),
            });
            Ok((vec![Artifact::new(file, csv_table(&header, rows))], value))
        })
        .collect();
    let (artifacts, cells) = collect(results)?;
    let margins: Vec<Option<f64>> = datasets.iter().map(|(_, m)| m.as_ref().map(|m| m.margin)).collect();
    Ok((artifacts, json!({ "cells": cells, "max_margins": margins })))
}

fn conv_classify(p: &ConvClassifyParams, seed: u64) -> Result<(Vec<Artifact>, Value), HarnessError> {
    let datasets = (0..p.trials)
        .map(|t| frequency_dataset(&mut trial_stream(seed, t), p.d, p.samples, p.frequencies))
        .collect::<crate::Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for t in 0..p.trials {
        for (k, &n) in p.depths.iter().enumerate() {
            for &s0 in p.init_scales.iter() {
                cells.push((t, n, s0, rate_at(&p.learning_rates, k)));
            }
        }
    }
    let results: Vec<CellResult> = cells
        .par_iter()
        .enumerate()
        .map(|(cell, &(trial, n, s0, eta))| {
            let ds = &datasets[trial];
            let spec = ConvNetSpec::new(n, s0)?;
            let run = ClassifierRun {
                loss: p.loss,
                learning_rate: eta,
                max_steps: p.max_steps,
                target_loss: p.target_loss,
                pilot_steps: p.pilot_steps,
                record_every: p.record_every,
            };
            let trace = conv_gd_run(&spec, ds, &run, &mut stream(seed, cell as u64))?;
            let Truth::Frequency { frequencies, .. } = &ds.truth else { unreachable!("frequency dataset") };
            let top = trace.top_frequencies(p.frequencies);
            let width = p.d / 2 + 1;
            let mut header = vec!["step".to_string(), "loss".to_string()];
            header.extend((0..width).map(|f| format!("amp_{f}")));
            let rows = trace.amplitudes.times.iter().zip(&trace.amplitudes.values).zip(&trace.losses).map(|((t, v), l)| {
                let mut row = vec![*t, *l];
                row.extend(v.iter().copied());
                row
            });
            let file = format!("conv_N{n}_init{s0:e}_trial{trial}.csv");
            let value = json!({
                "depth": n, "init_scale": s0, "learning_rate": eta, "trial": trial, "file": file,
                "steps": trace.steps, "converged": trace.converged, "final_loss": trace.losses.last(),
                "truth_frequencies": frequencies, "top_frequencies": top, "recovered": &top == frequencies,
                "truth_correlation": correlation(&trace.predictor, ds.truth.weights()),
                "train_margin": train_margin(&trace.kernels, ds)?,
            });
            Ok((vec![Artifact::new(file, csv_table(&header, rows))], value))
        })
        .collect();
    let (artifacts, cells) = collect(results)?;
    Ok((artifacts, json!({ "cells": cells })))
}

/// Smallest `yₖ f(xₖ)` of the trained network over the training set.
fn train_margin(kernels: &[DVector<f64>], data: &ClassificationDataset) -> crate::Result<f64> {
    let mut margin = f64::INFINITY;
    for (row, y) in data.x.row_iter().zip(data.y.iter()) {
        let x: Vec<f64> = row.iter().copied().collect();
        margin = margin.min(y * conv_forward(kernels, &x)?);
    }
    Ok(margin)
}

fn omp_agreement(p: &OmpAgreementParams, seed: u64) -> Result<(Vec<Artifact>, Value), HarnessError> {
    let mut problems = Vec::new();
    for (k, &s) in p.sparsities.iter().enumerate() {
        for t in 0..p.trials {
            let cell = (k * p.trials + t) as u64;
            problems.push(PursuitProblem::generate(&mut stream(seed, cell), p.d, p.n, s)?);
        }
    }
    let curve = agreement_curve(&problems, &p.deep)?;
    let header: Vec<String> =
        ["sparsity", "mean", "std", "trials", "short_records"].iter().map(|s| s.to_string()).collect();
    let rows = curve
        .iter()
        .map(|a| vec![a.sparsity as f64, a.mean, a.std, a.trials as f64, a.short_records as f64]);
    let table = Artifact::new("agreement.csv".into(), csv_table(&header, rows));
    Ok((vec![table], json!({ "agreement": curve })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_accepts_scalars_and_lists() {
        let g: Grid<f64> = serde_json::from_str("2.5").unwrap();
        assert_eq!(g.0, vec![2.5]);
        let g: Grid<f64> = serde_json::from_str("[1, 2]").unwrap();
        assert_eq!(g.0, vec![1.0, 2.0]);
        assert_eq!(serde_json::to_string(&Grid(vec![3u32])).unwrap(), "[3]");
    }
}
