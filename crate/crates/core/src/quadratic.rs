//! Quadratic networks `f(x) = xᵀ WᵀW x (+ b)` on Gaussian inputs.
//!
//! Both losses carry a 1/16 factor. The variance loss removes the squared
//! mean of the error, which decouples the eigenvalues of `WᵀW` into
//! independent depth-2 toy flows; the squared loss couples them through the
//! trace of the residual.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::ode::Dopri5;
use crate::dynamics::{integrate_flow_at, Depth, StepControl, ToyModelSpec};
use crate::error::{invalid, Error, Result};
use crate::linalg::{random_orthogonal, singular_values, symmetric_eigen_desc, SpectrumTrajectory};
use crate::rng::gaussian_matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Variance,
    Squared,
    SquaredWithBias,
}

impl LossKind {
    pub fn has_bias(self) -> bool {
        self == LossKind::SquaredWithBias
    }
}

/// Ground truth and init scale. The init is `W(0) = √σ₀ Q` for a random
/// orthogonal `Q`, so `W(0)ᵀW(0) = σ₀ I`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticNetSpec {
    pub target_weights: DMatrix<f64>,
    pub target_bias: f64,
    pub init_scale: f64,
    gram: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl QuadraticNetSpec {
    pub fn new(target_weights: DMatrix<f64>, target_bias: f64, init_scale: f64) -> Result<Self> {
        let d = target_weights.nrows();
        if d == 0 || target_weights.ncols() != d {
            return Err(invalid("target weights must be a non-empty square matrix"));
        }
        if !(init_scale > 0.0 && init_scale.is_finite()) {
            return Err(invalid(format!("init scale must be positive, got {init_scale}")));
        }
        if !target_bias.is_finite() {
            return Err(invalid("target bias must be finite"));
        }
        let gram = target_weights.tr_mul(&target_weights);
        let (values, eigenvectors) = symmetric_eigen_desc(&gram);
        let eigenvalues = values.into_iter().map(|v| v.max(0.0)).collect();
        Ok(Self { target_weights, target_bias, init_scale, gram, eigenvalues, eigenvectors })
    }

    /// Truth with `W*ᵀW* = U diag(spectrum) Uᵀ` for a random orthonormal `U`;
    /// `spectrum` may be shorter than `d` (the rest is zero).
    pub fn planted<R: Rng + ?Sized>(rng: &mut R, d: usize, spectrum: &[f64], init_scale: f64) -> Result<Self> {
        if spectrum.is_empty() || spectrum.len() > d || spectrum.iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("spectrum must be non-empty, non-negative and at most d long"));
        }
        let u = random_orthogonal(rng, d);
        let mut root = DMatrix::zeros(d, d);
        for (k, v) in spectrum.iter().enumerate() {
            root.row_mut(k).copy_from(&(u.column(k).transpose() * v.sqrt()));
        }
        Self::new(root, 0.0, init_scale)
    }

    pub fn dim(&self) -> usize {
        self.target_weights.nrows()
    }

    /// `W*ᵀW*`.
    pub fn target_gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Eigenvalues of `W*ᵀW*`, descending.
    pub fn target_spectrum(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenbasis(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn initial_weights<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        random_orthogonal(rng, self.dim()) * self.init_scale.sqrt()
    }
}

/// Gaussian inputs (one per row) labelled by the ground-truth network.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl QuadraticDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

pub fn quadratic_dataset<R: Rng + ?Sized>(rng: &mut R, spec: &QuadraticNetSpec, m: usize) -> QuadraticDataset {
    let x = gaussian_matrix(rng, m, spec.dim(), 1.0);
    let y = forward(&spec.target_weights, &x).add_scalar(spec.target_bias);
    QuadraticDataset { x, y }
}

/// `‖W xₖ‖²` for every row `xₖ` of `x`.
pub fn forward(w: &DMatrix<f64>, x: &DMatrix<f64>) -> DVector<f64> {
    let z = x * w.transpose();
    DVector::from_iterator(z.nrows(), z.row_iter().map(|r| r.norm_squared()))
}

/// Variance loss. With `samples = None` this is the Gaussian-population
/// value `(1/8)‖W*ᵀW* - WᵀW‖²_F`; otherwise `1/16` times the unbiased sample
/// variance of the error over the rows of `samples`.
pub fn variance_loss(w: &DMatrix<f64>, w_star: &DMatrix<f64>, samples: Option<&DMatrix<f64>>) -> Result<f64> {
    if w.shape() != w_star.shape() || w.nrows() != w.ncols() {
        return Err(Error::DimensionMismatch { expected: w_star.nrows(), found: w.nrows() });
    }
    match samples {
        None => Ok((w_star.tr_mul(w_star) - w.tr_mul(w)).norm_squared() / 8.0),
        Some(x) => {
            if x.ncols() != w.nrows() {
                return Err(Error::DimensionMismatch { expected: w.nrows(), found: x.ncols() });
            }
            if x.nrows() < 2 {
                return Err(invalid("sample variance needs at least two inputs"));
            }
            let e = forward(w_star, x) - forward(w, x);
            let mean = e.mean();
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (e.len() as f64 - 1.0);
            Ok(var / 16.0)
        }
    }
}

/// Variance-loss flow of the eigenvalues of `WᵀW`: each follows the depth-2
/// toy law from `σ₀`. Values are reported sorted descending.
pub fn variance_flow_spectrum(spec: &QuadraticNetSpec, times: &[f64], ctrl: &StepControl) -> Result<SpectrumTrajectory> {
    let toy = ToyModelSpec::new(Depth::Finite(2), spec.init_scale, spec.eigenvalues.clone())?;
    let tr = integrate_flow_at(&toy, times, ctrl)?;
    let mut out = SpectrumTrajectory::default();
    for (t, mut v) in tr.times.into_iter().zip(tr.values) {
        v.sort_by(|a, b| b.total_cmp(a));
        out.push(t, v);
    }
    Ok(out)
}

/// Population variance-loss flow `Ẇ = ½ W (W*ᵀW* - WᵀW)` on the full matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramFlow {
    pub times: Vec<f64>,
    /// Diagonal of `Uᵀ WᵀW U`, in target-eigenvalue order.
    pub eigen_diagonal: Vec<Vec<f64>>,
    /// Largest off-diagonal magnitude of `Uᵀ WᵀW U`.
    pub leakage: Vec<f64>,
}

pub fn variance_matrix_flow<R: Rng + ?Sized>(
    spec: &QuadraticNetSpec,
    times: &[f64],
    ctrl: &StepControl,
    rng: &mut R,
) -> Result<GramFlow> {
    let d = spec.dim();
    let w0 = spec.initial_weights(rng);
    let gram = &spec.gram;
    let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
        let w = DMatrix::from_column_slice(d, d, y);
        let dw = &w * (gram - w.tr_mul(&w)) * 0.5;
        out.copy_from_slice(dw.as_slice());
    };
    let mut solver = Dopri5::new(rhs, 0.0, w0.as_slice(), *ctrl)?;
    let u = &spec.eigenvectors;
    let mut out = GramFlow { times: vec![], eigen_diagonal: vec![], leakage: vec![] };
    for &t in times {
        solver.advance_to(t)?;
        let w = DMatrix::from_column_slice(d, d, solver.state());
        let rot = u.transpose() * w.tr_mul(&w) * u;
        let leak = (0..d)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| rot[(i, j)].abs())
            .fold(0.0, f64::max);
        out.times.push(t);
        out.eigen_diagonal.push((0..d).map(|i| rot[(i, i)]).collect());
        out.leakage.push(leak);
    }
    Ok(out)
}

/// Squared-loss flow of the eigenvalues of `WᵀW`,
/// `σ̇ᵢ = σᵢ(σ*ᵢ - σᵢ + ½Σⱼ(σ*ⱼ - σⱼ) + ½(b* - b))`, and with a bias pair
/// `(b, b*)` also `ḃ = Σⱼ(σ*ⱼ - σⱼ) + b* - b`.
pub fn squared_flow_rhs(sigma: &[f64], optimal: &[f64], bias: Option<(f64, f64)>) -> Result<(Vec<f64>, Option<f64>)> {
    if sigma.len() != optimal.len() {
        return Err(Error::DimensionMismatch { expected: optimal.len(), found: sigma.len() });
    }
    if sigma.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid("σ must be non-negative"));
    }
    let gap: f64 = optimal.iter().zip(sigma).map(|(a, b)| a - b).sum();
    let bias_gap = bias.map_or(0.0, |(b, b_star)| b_star - b);
    let ds = sigma
        .iter()
        .zip(optimal)
        .map(|(s, o)| s * (o - s + 0.5 * gap + 0.5 * bias_gap))
        .collect();
    Ok((ds, bias.map(|_| gap + bias_gap)))
}

/// Integrated coupled squared-loss flow. `bias` is `(b(0), b*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledFlow {
    pub spectrum: SpectrumTrajectory,
    pub bias: Vec<f64>,
}

pub fn squared_flow(
    optimal: &[f64],
    init_scale: f64,
    bias: Option<(f64, f64)>,
    times: &[f64],
    ctrl: &StepControl,
) -> Result<CoupledFlow> {
    let d = optimal.len();
    let mut y0 = vec![init_scale; d];
    if let Some((b0, _)) = bias {
        y0.push(b0);
    }
    let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
        let sigma: Vec<f64> = y[..d].iter().map(|v| v.max(0.0)).collect();
        let pair = bias.map(|(_, b_star)| (y[d], b_star));
        let (ds, db) = squared_flow_rhs(&sigma, optimal, pair).expect("validated shapes");
        out[..d].copy_from_slice(&ds);
        if let Some(db) = db {
            out[d] = db;
        }
    };
    let mut solver = Dopri5::new(rhs, 0.0, &y0, *ctrl)?;
    let mut out = CoupledFlow { spectrum: SpectrumTrajectory::default(), bias: vec![] };
    for &t in times {
        solver.advance_to(t)?;
        let y = solver.state();
        out.spectrum.push(t, y[..d].to_vec());
        if bias.is_some() {
            out.bias.push(y[d]);
        }
    }
    Ok(out)
}

/// Settings of a descent run on `W` (and `b`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticRun {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub steps: usize,
    pub record_every: usize,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTrace {
    /// Leading eigenvalues of `WᵀW`.
    pub spectrum: SpectrumTrajectory,
    /// Bias at each record (empty without a bias).
    pub bias: Vec<f64>,
    /// Final `W`.
    pub weights: DMatrix<f64>,
}

/// Full-parameter gradient descent on a finite dataset.
///
/// Gradients: squared loss `(1/16m)Σe²` gives `-(1/4m) W Σ eₖ xₖxₖᵀ`; the
/// variance loss uses the centred errors and `1/(m-1)`. The bias moves by
/// `η · mean(e)`, eight times its raw gradient step, so that its population
/// law reads `ḃ = Σ(σ* - σ) + b* - b`. It starts at its optimum for `W(0)`.
pub fn quadratic_gd_run<R: Rng + ?Sized>(
    spec: &QuadraticNetSpec,
    data: &QuadraticDataset,
    run: &QuadraticRun,
    rng: &mut R,
) -> Result<QuadraticTrace> {
    if data.x.ncols() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), found: data.x.ncols() });
    }
    let m = data.len();
    if m < 2 {
        return Err(invalid("need at least two examples"));
    }
    if !(run.learning_rate > 0.0) {
        return Err(invalid("learning rate must be positive"));
    }
    let mut w = spec.initial_weights(rng);
    let mut b = if run.loss.has_bias() { (&data.y - forward(&w, &data.x)).mean() } else { 0.0 };
    let limit = 10.0 * spec.eigenvalues[0].max(f64::MIN_POSITIVE);
    let every = run.record_every.max(1);
    let mut out = QuadraticTrace { spectrum: SpectrumTrajectory::default(), bias: vec![], weights: DMatrix::zeros(0, 0) };
    for step in 0..=run.steps {
        if step % every == 0 || step == run.steps {
            let ev = singular_values(&w.tr_mul(&w));
            if !ev[0].is_finite() || ev[0] > limit || !b.is_finite() {
                return Err(Error::Divergence { step, detail: format!("top eigenvalue {} of WᵀW", ev[0]) });
            }
            out.spectrum.push(step as f64, ev.into_iter().take(run.top_k.max(1)).collect());
            if run.loss.has_bias() {
                out.bias.push(b);
            }
        }
        if step == run.steps {
            break;
        }
        let (grad, mean_error) = loss_gradient(&w, b, data, run.loss);
        w -= grad * run.learning_rate;
        if run.loss.has_bias() {
            b += run.learning_rate * mean_error;
        }
    }
    out.weights = w;
    Ok(out)
}

/// Gradient of the chosen loss with respect to `W`, and the mean error.
fn loss_gradient(w: &DMatrix<f64>, b: f64, data: &QuadraticDataset, loss: LossKind) -> (DMatrix<f64>, f64) {
    let mf = data.len() as f64;
    let mut e = &data.y - forward(w, &data.x);
    e.add_scalar_mut(-b);
    let mean = e.mean();
    let scale = match loss {
        LossKind::Variance => {
            e.add_scalar_mut(-mean);
            1.0 / (4.0 * (mf - 1.0))
        }
        _ => 1.0 / (4.0 * mf),
    };
    let mut xe = data.x.clone();
    for (mut row, ek) in xe.row_iter_mut().zip(e.iter()) {
        row *= *ek;
    }
    (-(w * xe.tr_mul(&data.x)) * scale, mean)
}
