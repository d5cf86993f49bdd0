use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::{ClassificationDataset, LossFn};
use crate::dynamics::{Method, Trajectory};
use crate::error::{invalid, Error, Result};

/// Diagonal network `σ = w₊^N − w₋^N` with both halves started at
/// `σ₀^{1/N}`, so the initial predictor is exactly zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagonalNetSpec {
    pub depth: u32,
    pub init_scale: f64,
}

impl DiagonalNetSpec {
    pub fn new(depth: u32, init_scale: f64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::UnsupportedDepth("diagonal network depth must be at least 1".into()));
        }
        if !(init_scale > 0.0) || !init_scale.is_finite() {
            return Err(invalid(format!("init scale must be positive, got {init_scale}")));
        }
        Ok(Self { depth, init_scale })
    }

    pub fn predictor(&self, plus: &DVector<f64>, minus: &DVector<f64>) -> DVector<f64> {
        let n = self.depth as i32;
        plus.map(|v| v.powi(n)) - minus.map(|v| v.powi(n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierRun {
    pub loss: LossFn,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Training stops once the mean loss drops below this.
    pub target_loss: f64,
    /// Number of leading steps over which the loss must decrease strictly.
    pub pilot_steps: usize,
    pub record_every: usize,
}

impl ClassifierRun {
    pub fn new(loss: LossFn, learning_rate: f64, max_steps: usize) -> Self {
        Self { loss, learning_rate, max_steps, target_loss: 1e-8, pilot_steps: 50, record_every: 100 }
    }
}

/// Outcome of [`diag_gd_run`]: the predictor `σ` sampled along training
/// (against the step index) and the loss at each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalTrace {
    pub predictor: Trajectory,
    pub losses: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
}

impl DiagonalTrace {
    pub fn final_predictor(&self) -> &[f64] {
        self.predictor.last().unwrap_or(&[])
    }

    /// Indices of the `k` largest final `|σᵢ|`.
    pub fn top_coordinates(&self, k: usize) -> Vec<usize> {
        let last = self.final_predictor();
        let mut idx: Vec<usize> = (0..last.len()).collect();
        idx.sort_by(|&a, &b| last[b].abs().total_cmp(&last[a].abs()));
        idx.truncate(k);
        idx
    }
}

/// Gradient descent on both halves of a diagonal network. The loss must
/// fall at every one of the first `pilot_steps` steps, otherwise the run is
/// aborted with [`Error::PilotFailed`] suggesting a quarter of the rate.
pub fn diag_gd_run(spec: &DiagonalNetSpec, data: &ClassificationDataset, run: &ClassifierRun) -> Result<DiagonalTrace> {
    if !(run.learning_rate > 0.0) || run.record_every == 0 {
        return Err(invalid("learning rate and record interval must be positive"));
    }
    let d = data.dim();
    let n = spec.depth;
    let nf = n as f64;
    let start = spec.init_scale.powf(1.0 / nf);
    let mut plus = DVector::from_element(d, start);
    let mut minus = DVector::from_element(d, start);
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut losses = Vec::new();
    let mut previous = f64::INFINITY;
    let mut step = 0;
    let mut converged;
    loop {
        let sigma = spec.predictor(&plus, &minus);
        let (loss, grad) = data.loss_and_gradient(run.loss, &sigma);
        if !loss.is_finite() || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("loss = {loss}") });
        }
        if step <= run.pilot_steps && step > 0 && loss >= previous {
            return Err(Error::PilotFailed { step, eta: run.learning_rate, suggested: run.learning_rate / 4.0 });
        }
        previous = loss;
        converged = loss < run.target_loss;
        let done = converged || step == run.max_steps;
        if step % run.record_every == 0 || done {
            times.push(step as f64);
            values.push(sigma.as_slice().to_vec());
            losses.push(loss);
        }
        if done {
            break;
        }
        let scale = run.learning_rate * nf;
        for i in 0..d {
            let (p, q) = (plus[i], minus[i]);
            plus[i] = p - scale * p.powi(n as i32 - 1) * grad[i];
            minus[i] = q + scale * q.powi(n as i32 - 1) * grad[i];
        }
        step += 1;
    }
    let predictor = Trajectory { times, values, method: Method::Gd, spec: None };
    Ok(DiagonalTrace { predictor, losses, steps: step, converged })
}
