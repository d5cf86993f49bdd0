//! Orthogonal matching pursuit and feature selection by a deep `±` toy
//! model on the same dictionary.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::gaussian_matrix;

/// Sparse coding instance `x = D α` with unit-norm dictionary columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PursuitProblem {
    pub dictionary: DMatrix<f64>,
    pub target: DVector<f64>,
    pub coefficients: DVector<f64>,
    pub sparsity: usize,
}

impl PursuitProblem {
    pub fn new(dictionary: DMatrix<f64>, coefficients: DVector<f64>) -> Result<Self> {
        if dictionary.ncols() != coefficients.len() {
            return Err(Error::DimensionMismatch { expected: dictionary.ncols(), found: coefficients.len() });
        }
        if let Some(j) = dictionary.column_iter().position(|c| (c.norm() - 1.0).abs() > 1e-12) {
            return Err(invalid(format!("dictionary column {j} is not unit-norm")));
        }
        let target = &dictionary * &coefficients;
        let sparsity = coefficients.iter().filter(|v| **v != 0.0).count();
        Ok(Self { dictionary, target, coefficients, sparsity })
    }

    /// Gaussian dictionary with normalized columns and an `s`-sparse code
    /// with magnitudes uniform in `[0.5, 2]` and random signs.
    pub fn generate<R: Rng + ?Sized>(rng: &mut R, d: usize, n: usize, s: usize) -> Result<Self> {
        if d == 0 || s > n {
            return Err(invalid(format!("need d ≥ 1 and s ≤ n, got d = {d}, n = {n}, s = {s}")));
        }
        let mut dictionary = gaussian_matrix(rng, d, n, 1.0);
        for mut c in dictionary.column_iter_mut() {
            c.unscale_mut(c.norm());
        }
        let mut coefficients = DVector::zeros(n);
        for j in sample(rng, n, s) {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            coefficients[j] = sign * rng.random_range(0.5..=2.0);
        }
        Self::new(dictionary, coefficients)
    }

    pub fn dim(&self) -> usize {
        self.dictionary.nrows()
    }

    pub fn features(&self) -> usize {
        self.dictionary.ncols()
    }

    fn residual(&self, sigma: &DVector<f64>) -> DVector<f64> {
        &self.dictionary * sigma - &self.target
    }
}

/// Features in the order they were chosen; `residuals[0]` is `‖x‖` and
/// `residuals[k]` the residual norm just after the `k`-th choice.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub indices: Vec<usize>,
    pub residuals: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostic: Option<String>,
}

impl SelectionRecord {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

const EXACT: f64 = 1e-12;

/// Orthogonal matching pursuit for at most `k` steps. Stops early once the
/// residual vanishes (relative `1e-12`).
pub fn omp_select(problem: &PursuitProblem, k: usize) -> Result<SelectionRecord> {
    if k > problem.dim() {
        return Err(invalid(format!("k = {k} exceeds the signal dimension {}", problem.dim())));
    }
    let x = &problem.target;
    let scale = x.norm();
    let mut record = SelectionRecord { residuals: vec![scale], ..Default::default() };
    let mut residual = x.clone();
    let mut chosen = vec![false; problem.features()];
    for _ in 0..k {
        if residual.norm() <= EXACT * scale {
            break;
        }
        let corr = problem.dictionary.tr_mul(&residual);
        let j = (0..corr.len())
            .filter(|&j| !chosen[j])
            .max_by(|&a, &b| corr[a].abs().total_cmp(&corr[b].abs()))
            .ok_or_else(|| invalid("no feature left to select"))?;
        chosen[j] = true;
        record.indices.push(j);
        let sub = problem.dictionary.select_columns(&record.indices);
        let svd = sub.clone().svd(true, true);
        let (hi, lo) = (svd.singular_values.max(), svd.singular_values.min());
        if lo <= hi * 1e-10 {
            warn!("selected set of size {} is ill-conditioned (σ_min/σ_max = {:e})", record.len(), lo / hi);
        }
        let coef = svd.solve(x, hi * 1e-12).map_err(|e| invalid(e.to_string()))?;
        residual = x - sub * coef;
        record.residuals.push(residual.norm());
    }
    Ok(record)
}

/// Settings for [`deep_select`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeepSelectConfig {
    pub depth: u32,
    pub init_scale: f64,
    pub learning_rate: f64,
    /// Crossing level for `|σᵢ|`; `None` means `1e-2 · ‖α‖∞`.
    pub threshold: Option<f64>,
    /// Stop once this many features are chosen.
    pub stop_after: Option<usize>,
    pub max_steps: usize,
    /// Relative residual `‖Dσ − x‖ / ‖x‖` treated as convergence.
    pub tolerance: f64,
}

impl Default for DeepSelectConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            init_scale: 1e-4,
            learning_rate: 3e-3,
            threshold: None,
            stop_after: None,
            max_steps: 500_000,
            tolerance: 1e-6,
        }
    }
}

impl DeepSelectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::UnsupportedDepth("depth must be at least 1".into()));
        }
        if !(self.init_scale > 0.0) || !(self.learning_rate > 0.0) || !(self.tolerance > 0.0) {
            return Err(invalid("init scale, learning rate and tolerance must be positive"));
        }
        if matches!(self.threshold, Some(t) if !(t > 0.0)) {
            return Err(invalid("threshold must be positive"));
        }
        Ok(())
    }

    pub fn threshold_for(&self, problem: &PursuitProblem) -> f64 {
        self.threshold.unwrap_or_else(|| 1e-2 * problem.coefficients.amax())
    }
}

/// Gradient descent on `½‖Dσ − x‖²` with `σ = w₊^N − w₋^N`, recording the
/// order in which `|σᵢ|` first crosses the threshold. Features crossing on
/// the same step are ordered by magnitude.
pub fn deep_select(problem: &PursuitProblem, config: &DeepSelectConfig) -> Result<SelectionRecord> {
    config.validate()?;
    let n = problem.features();
    let depth = config.depth as i32;
    let threshold = config.threshold_for(problem);
    let scale = problem.target.norm();
    let start = config.init_scale.powf(1.0 / config.depth as f64);
    let mut plus = DVector::from_element(n, start);
    let mut minus = DVector::from_element(n, start);
    let mut chosen = vec![false; n];
    let mut record = SelectionRecord { residuals: vec![scale], ..Default::default() };
    let rate = config.learning_rate * config.depth as f64;
    for step in 0..=config.max_steps {
        let sigma = plus.map(|v| v.powi(depth)) - minus.map(|v| v.powi(depth));
        let residual = problem.residual(&sigma);
        let rnorm = residual.norm();
        if !rnorm.is_finite() {
            return Err(Error::Divergence { step, detail: "residual is not finite".into() });
        }
        let mut crossed: Vec<usize> = (0..n).filter(|&i| !chosen[i] && sigma[i].abs() >= threshold).collect();
        crossed.sort_by(|&a, &b| sigma[b].abs().total_cmp(&sigma[a].abs()));
        for i in crossed {
            chosen[i] = true;
            record.indices.push(i);
            record.residuals.push(rnorm);
        }
        if let Some(k) = config.stop_after {
            if record.len() >= k {
                record.indices.truncate(k);
                record.residuals.truncate(k + 1);
                return Ok(record);
            }
        }
        if rnorm <= config.tolerance * scale {
            if record.is_empty() {
                record.diagnostic = Some(format!(
                    "converged with max |σ| = {:e} below the threshold {threshold:e}",
                    sigma.amax()
                ));
            }
            return Ok(record);
        }
        if step == config.max_steps {
            break;
        }
        let grad = problem.dictionary.tr_mul(&residual);
        for i in 0..n {
            let (p, q) = (plus[i], minus[i]);
            plus[i] = p - rate * p.powi(depth - 1) * grad[i];
            minus[i] = q + rate * q.powi(depth - 1) * grad[i];
        }
    }
    Err(Error::NoConvergence { steps: config.max_steps })
}

/// `|first-s(a) ∩ first-s(b)| / s` and whether either record was shorter
/// than `s`.
pub fn agreement(a: &SelectionRecord, b: &SelectionRecord, s: usize) -> (f64, bool) {
    if s == 0 {
        return (1.0, false);
    }
    let pa = &a.indices[..a.len().min(s)];
    let pb = &b.indices[..b.len().min(s)];
    let shared = pa.iter().filter(|i| pb.contains(i)).count();
    (shared as f64 / s as f64, pa.len() < s || pb.len() < s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementPoint {
    pub sparsity: usize,
    pub mean: f64,
    /// Sample standard deviation over trials.
    pub std: f64,
    pub trials: usize,
    /// Trials scored on a shorter prefix than `sparsity`.
    pub short_records: usize,
}

/// Per-sparsity agreement between OMP and [`deep_select`], each problem
/// scored at its own sparsity. Trials run in parallel.
pub fn agreement_curve(problems: &[PursuitProblem], config: &DeepSelectConfig) -> Result<Vec<AgreementPoint>> {
    config.validate()?;
    let mut levels: Vec<usize> = problems.iter().map(|p| p.sparsity).collect();
    levels.sort_unstable();
    levels.dedup();
    for &s in &levels {
        let count = problems.iter().filter(|p| p.sparsity == s).count();
        if count < 2 {
            return Err(invalid(format!("sparsity {s} has {count} problem(s); need at least 2")));
        }
    }
    let scored: Vec<(usize, f64, bool)> = problems
        .par_iter()
        .map(|p| {
            let s = p.sparsity;
            let omp = omp_select(p, s.min(p.dim()))?;
            let deep = deep_select(p, &DeepSelectConfig { stop_after: Some(s), ..*config })?;
            let (a, short) = agreement(&omp, &deep, s);
            Ok((s, a, short))
        })
        .collect::<Result<_>>()?;
    Ok(levels
        .into_iter()
        .map(|s| {
            let vals: Vec<f64> = scored.iter().filter(|t| t.0 == s).map(|t| t.1).collect();
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            let short_records = scored.iter().filter(|t| t.0 == s && t.2).count();
            AgreementPoint { sparsity: s, mean, std: var.sqrt(), trials: vals.len(), short_records }
        })
        .collect())
}
