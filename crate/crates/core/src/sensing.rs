//! Deep matrix sensing with the end-to-end matrix `W = W_N ⋯ W_1` and the
//! depth-normalized loss `(1/2N) E⟨W - W*, A⟩²`.
//!
//! Under the population loss and a scaled-identity init the factors stay
//! diagonal in the eigenbasis of `W*`, and every eigenvalue follows the toy
//! law with the same depth and the same clock.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::ode::Dopri5;
use crate::dynamics::{integrate_flow_at, Depth, StepControl, ToyModelSpec};
use crate::error::{invalid, Error, Result};
use crate::linalg::{principal_angles, singular_values, symmetric_eigen_desc, top_left_singular_vectors};
use crate::rng::gaussian_matrix;

pub use crate::linalg::{effective_rank, SpectrumTrajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "kebab-case")]
pub enum InitScheme {
    /// Every factor equals `scale^{1/N} I`, so `W(0) = scale · I`.
    Identity { scale: f64 },
    /// I.i.d. normal factor entries with this standard deviation.
    Gaussian { std: f64 },
}

/// Sensing matrices stored one per row, flattened column-major, with their
/// noiseless responses `yₖ = ⟨Aₖ, W*⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurements {
    pub a: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl Measurements {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `m` sensing matrices with i.i.d. standard normal entries.
pub fn gaussian_measurements<R: Rng + ?Sized>(rng: &mut R, target: &DMatrix<f64>, m: usize) -> Measurements {
    let d2 = target.len();
    let a = gaussian_matrix(rng, m, d2, 1.0);
    let y = &a * DVector::from_column_slice(target.as_slice());
    Measurements { a, y }
}

/// Symmetric PSD target `U diag(spectrum) Uᵀ` with a random orthonormal `U`.
pub fn planted_target<R: Rng + ?Sized>(rng: &mut R, d: usize, spectrum: &[f64]) -> Result<DMatrix<f64>> {
    let k = spectrum.len();
    if k == 0 || k > d {
        return Err(invalid(format!("need 1 ≤ rank ≤ d, got rank {k} for d = {d}")));
    }
    if spectrum.iter().any(|v| !(*v >= 0.0)) {
        return Err(invalid("target spectrum must be non-negative"));
    }
    let u = gaussian_matrix(rng, d, k, 1.0).qr().q();
    Ok(&u * DMatrix::from_diagonal(&DVector::from_column_slice(spectrum)) * u.transpose())
}

#[derive(Debug, Clone)]
pub struct SensingProblem {
    pub depth: u32,
    pub target: DMatrix<f64>,
    pub init: InitScheme,
    /// `None` selects the population loss.
    pub measurements: Option<Measurements>,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SensingProblem {
    pub fn new(depth: u32, target: DMatrix<f64>, init: InitScheme, measurements: Option<Measurements>) -> Result<Self> {
        if depth == 0 {
            return Err(invalid("depth must be at least 1"));
        }
        let d = target.nrows();
        if d == 0 || target.ncols() != d {
            return Err(invalid("target must be a non-empty square matrix"));
        }
        let scale = target.abs().max().max(1.0);
        if (&target - target.transpose()).abs().max() > 1e-12 * scale {
            return Err(invalid("target must be symmetric"));
        }
        let (eigenvalues, eigenvectors) = symmetric_eigen_desc(&target);
        if eigenvalues.iter().any(|v| *v < -1e-10 * scale) {
            return Err(invalid("target must be positive semi-definite"));
        }
        let eigenvalues = eigenvalues.into_iter().map(|v| v.max(0.0)).collect();
        match init {
            InitScheme::Identity { scale } | InitScheme::Gaussian { std: scale } if !(scale > 0.0) => {
                return Err(invalid("init scale must be positive"));
            }
            _ => {}
        }
        if let Some(m) = &measurements {
            if m.a.ncols() != d * d || m.a.nrows() != m.y.len() {
                return Err(Error::DimensionMismatch { expected: d * d, found: m.a.ncols() });
            }
        }
        Ok(Self { depth, target, init, measurements, eigenvalues, eigenvectors })
    }

    pub fn dim(&self) -> usize {
        self.target.nrows()
    }

    /// Eigenvalues of `W*`, descending.
    pub fn target_spectrum(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Eigenvectors of `W*` as columns, matching [`Self::target_spectrum`].
    pub fn eigenbasis(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    fn rank(&self) -> usize {
        let top = self.eigenvalues[0];
        self.eigenvalues.iter().filter(|v| **v > 1e-12 * top.max(1e-300)).count()
    }

    /// Initial factors `[W_1, …, W_N]`.
    pub fn initial_factors<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<DMatrix<f64>> {
        let d = self.dim();
        match self.init {
            InitScheme::Identity { scale } => {
                let w = scale.powf(1.0 / self.depth as f64);
                vec![DMatrix::identity(d, d) * w; self.depth as usize]
            }
            InitScheme::Gaussian { std } => (0..self.depth).map(|_| gaussian_matrix(rng, d, d, std)).collect(),
        }
    }

    fn identity_scale(&self) -> Result<f64> {
        match self.init {
            InitScheme::Identity { scale } => Ok(scale),
            InitScheme::Gaussian { .. } => Err(invalid("this operation needs the identity init")),
        }
    }

    /// Gradient of the loss with respect to `W` (before the chain rule
    /// through the factors), i.e. `(1/N)(W - W*)` for the population loss.
    fn outer_gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let nf = self.depth as f64;
        match &self.measurements {
            None => (w - &self.target) / nf,
            Some(m) => {
                let d = self.dim();
                let r = &m.a * DVector::from_column_slice(w.as_slice()) - &m.y;
                let g = m.a.tr_mul(&r) / (nf * m.len() as f64);
                DMatrix::from_column_slice(d, d, g.as_slice())
            }
        }
    }

    /// Loss value at end-to-end matrix `w`.
    pub fn loss(&self, w: &DMatrix<f64>) -> f64 {
        let nf = self.depth as f64;
        match &self.measurements {
            None => (w - &self.target).norm_squared() / (2.0 * nf),
            Some(m) => {
                let r = &m.a * DVector::from_column_slice(w.as_slice()) - &m.y;
                r.norm_squared() / (2.0 * nf * m.len() as f64)
            }
        }
    }

    /// Per-factor gradients `(W_N⋯W_{n+1})ᵀ G (W_{n-1}⋯W_1)ᵀ` and the
    /// end-to-end product.
    fn factor_gradients(&self, factors: &[DMatrix<f64>]) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let n = factors.len();
        let d = self.dim();
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(DMatrix::identity(d, d));
        for f in factors {
            let next = f * prefix.last().expect("non-empty");
            prefix.push(next);
        }
        let w = prefix[n].clone();
        let g = self.outer_gradient(&w);
        let mut grads = vec![DMatrix::zeros(0, 0); n];
        // suffix = W_N ⋯ W_{k+1}
        let mut suffix: Option<DMatrix<f64>> = None;
        for k in (0..n).rev() {
            let left = match &suffix {
                Some(s) => s.tr_mul(&g),
                None => g.clone(),
            };
            grads[k] = if k == 0 { left } else { &left * prefix[k].transpose() };
            suffix = Some(match suffix {
                Some(s) => s * &factors[k],
                None => factors[k].clone(),
            });
        }
        (grads, w)
    }
}

/// Product `W_N ⋯ W_1`.
pub fn end_to_end(factors: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = factors[0].nrows();
    factors.iter().fold(DMatrix::identity(d, d), |acc, f| f * acc)
}

/// Per-eigenvalue toy flow: under identity init and the population loss,
/// eigenvalue `i` of `W(t)` follows `σ̇ = σ^{2-2/N}(σ*ᵢ - σ)`. Values are
/// reported sorted descending.
pub fn sensing_flow_spectrum(problem: &SensingProblem, times: &[f64], ctrl: &StepControl) -> Result<SpectrumTrajectory> {
    let scale = problem.identity_scale()?;
    let spec = ToyModelSpec::new(Depth::Finite(problem.depth), scale, problem.eigenvalues.clone())?;
    let tr = integrate_flow_at(&spec, times, ctrl)?;
    let mut out = SpectrumTrajectory::default();
    for (t, mut v) in tr.times.into_iter().zip(tr.values) {
        v.sort_by(|a, b| b.total_cmp(a));
        out.push(t, v);
    }
    Ok(out)
}

/// `U diag(values) Uᵀ` in the eigenbasis of `W*`, with `values` in the order
/// of [`SensingProblem::target_spectrum`].
pub fn reconstruct(problem: &SensingProblem, values: &[f64]) -> DMatrix<f64> {
    let u = &problem.eigenvectors;
    u * DMatrix::from_diagonal(&DVector::from_column_slice(values)) * u.transpose()
}

/// Full flow over all factor entries, integrated with the adaptive stepper.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorFlow {
    pub times: Vec<f64>,
    /// Diagonal of `Uᵀ W U` at each time, in target-eigenvalue order.
    pub eigen_diagonal: Vec<Vec<f64>>,
    /// Largest off-diagonal magnitude of `Uᵀ W U` at each time.
    pub leakage: Vec<f64>,
    pub spectrum: SpectrumTrajectory,
}

pub fn sensing_factor_flow<R: Rng + ?Sized>(
    problem: &SensingProblem,
    times: &[f64],
    ctrl: &StepControl,
    rng: &mut R,
) -> Result<FactorFlow> {
    let d = problem.dim();
    let n = problem.depth as usize;
    let factors = problem.initial_factors(rng);
    let mut y0 = Vec::with_capacity(n * d * d);
    for f in &factors {
        y0.extend_from_slice(f.as_slice());
    }
    let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
        let fs: Vec<DMatrix<f64>> = y.chunks(d * d).map(|c| DMatrix::from_column_slice(d, d, c)).collect();
        let (grads, _) = problem.factor_gradients(&fs);
        for (o, g) in out.chunks_mut(d * d).zip(&grads) {
            for (a, b) in o.iter_mut().zip(g.as_slice()) {
                *a = -b;
            }
        }
    };
    let mut solver = Dopri5::new(rhs, 0.0, &y0, *ctrl)?;
    let u = &problem.eigenvectors;
    let mut out = FactorFlow { times: vec![], eigen_diagonal: vec![], leakage: vec![], spectrum: Default::default() };
    for &t in times {
        solver.advance_to(t)?;
        let fs: Vec<DMatrix<f64>> =
            solver.state().chunks(d * d).map(|c| DMatrix::from_column_slice(d, d, c)).collect();
        let w = end_to_end(&fs);
        let rot = u.transpose() * &w * u;
        let mut leak: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    leak = leak.max(rot[(i, j)].abs());
                }
            }
        }
        out.times.push(t);
        out.eigen_diagonal.push((0..d).map(|i| rot[(i, i)]).collect());
        out.leakage.push(leak);
        out.spectrum.push(t, singular_values(&w));
    }
    Ok(out)
}

/// Settings of a descent run on the factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingRun {
    pub learning_rate: f64,
    pub steps: usize,
    pub record_every: usize,
    /// Number of leading singular values logged per record.
    pub top_k: usize,
    pub track_alignment: bool,
}

/// Full-matrix gradient descent on `(W_1, …, W_N)`.
///
/// Aborts with a divergence error when a singular value of `W` exceeds
/// `10 σ*₁` or turns non-finite.
pub fn sensing_gd_run<R: Rng + ?Sized>(problem: &SensingProblem, run: &SensingRun, rng: &mut R) -> Result<SpectrumTrajectory> {
    if !(run.learning_rate > 0.0) {
        return Err(invalid("learning rate must be positive"));
    }
    let mut factors = problem.initial_factors(rng);
    let limit = 10.0 * problem.eigenvalues[0].max(f64::MIN_POSITIVE);
    let rank = problem.rank();
    let target_vectors = problem.eigenvectors.columns(0, rank).into_owned();
    let every = run.record_every.max(1);
    let mut out = SpectrumTrajectory::default();
    let record = |out: &mut SpectrumTrajectory, step: usize, w: &DMatrix<f64>| -> Result<()> {
        let sv = singular_values(w);
        if !sv[0].is_finite() || sv[0] > limit {
            return Err(Error::Divergence { step, detail: format!("top singular value {} exceeds 10·σ*₁", sv[0]) });
        }
        out.push(step as f64, sv.into_iter().take(run.top_k.max(1)).collect());
        if run.track_alignment {
            let u = top_left_singular_vectors(w, rank);
            out.alignment.push(principal_angles(&u, &target_vectors));
        }
        Ok(())
    };
    for step in 0..=run.steps {
        let (grads, w) = problem.factor_gradients(&factors);
        if step % every == 0 || step == run.steps {
            record(&mut out, step, &w)?;
        } else if !w[(0, 0)].is_finite() {
            return Err(Error::Divergence { step, detail: "non-finite product".into() });
        }
        if step == run.steps {
            break;
        }
        for (f, g) in factors.iter_mut().zip(&grads) {
            *f -= g * run.learning_rate;
        }
    }
    Ok(out)
}

/// Entry standard deviation for which the expected top singular value of the
/// product of `depth` Gaussian `d × d` factors equals `target`. Depth 1 uses
/// the moment `E σ_max ≈ 2√d · std`; deeper products use `draws` Monte-Carlo
/// samples at unit variance and the scaling `σ_max ∝ stdᴺ`.
pub fn calibrate_gaussian_std<R: Rng + ?Sized>(rng: &mut R, d: usize, depth: u32, target: f64, draws: usize) -> Result<f64> {
    if depth == 0 || d == 0 || !(target > 0.0) {
        return Err(invalid("need depth ≥ 1, d ≥ 1 and a positive target"));
    }
    if depth == 1 {
        return Ok(target / (2.0 * (d as f64).sqrt()));
    }
    let draws = draws.max(1);
    let mut mean = 0.0;
    for _ in 0..draws {
        let factors: Vec<DMatrix<f64>> = (0..depth).map(|_| gaussian_matrix(rng, d, d, 1.0)).collect();
        mean += singular_values(&end_to_end(&factors))[0];
    }
    mean /= draws as f64;
    Ok((target / mean).powf(1.0 / depth as f64))
}
