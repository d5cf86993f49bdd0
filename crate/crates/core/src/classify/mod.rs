//! Binary classification with deep diagonal and circular-convolutional
//! linear networks on Gaussian data labelled by a sparse (or
//! frequency-sparse) teacher.

mod conv;
mod diagonal;
mod svm;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::gaussian_matrix;

pub use conv::{
    conv_forward, conv_gd_run, convolve, correlate, frequency_amplitudes, induced_frequency_profile,
    induced_predictor, ConvNetSpec, ConvTrace,
};
pub use diagonal::{diag_gd_run, ClassifierRun, DiagonalNetSpec, DiagonalTrace};
pub use svm::{max_margin, MaxMargin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFn {
    Exponential,
    Logistic,
}

impl LossFn {
    /// Loss at margin `z` and the magnitude `-ℓ'(z)` of its slope.
    pub fn eval(self, z: f64) -> (f64, f64) {
        match self {
            LossFn::Exponential => {
                let l = (-z).exp();
                (l, l)
            }
            LossFn::Logistic => {
                let value = if z > 0.0 { (-z).exp().ln_1p() } else { -z + z.exp().ln_1p() };
                let slope = if z > 0.0 {
                    let e = (-z).exp();
                    e / (1.0 + e)
                } else {
                    1.0 / (1.0 + z.exp())
                };
                (value, slope)
            }
        }
    }
}

/// The teacher that labelled a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Truth {
    /// Weight vector with the listed non-zero coordinates.
    Sparse { support: Vec<usize>, weights: Vec<f64> },
    /// Real predictor whose spectrum is supported on `frequencies` (and
    /// their conjugates).
    Frequency { frequencies: Vec<usize>, weights: Vec<f64> },
}

impl Truth {
    pub fn weights(&self) -> &[f64] {
        match self {
            Truth::Sparse { weights, .. } | Truth::Frequency { weights, .. } => weights,
        }
    }
}

/// Examples as rows of `x`, labels in `{-1, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationDataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub truth: Truth,
}

impl ClassificationDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Mean loss and gradient with respect to the linear predictor.
    pub fn loss_and_gradient(&self, loss: LossFn, predictor: &DVector<f64>) -> (f64, DVector<f64>) {
        let m = self.len() as f64;
        let z = (&self.x * predictor).component_mul(&self.y);
        let mut total = 0.0;
        let mut weights = DVector::zeros(self.len());
        for k in 0..self.len() {
            let (l, slope) = loss.eval(z[k]);
            total += l;
            weights[k] = -slope * self.y[k] / m;
        }
        (total / m, self.x.tr_mul(&weights))
    }
}

const MIN_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 1000;

fn labelled<R: Rng + ?Sized>(rng: &mut R, m: usize, truth: Truth) -> Option<ClassificationDataset> {
    let w = DVector::from_column_slice(truth.weights());
    let x = gaussian_matrix(rng, m, w.len(), 1.0);
    let z = &x * &w;
    let norm = w.norm();
    if z.iter().any(|v| v.abs() <= MIN_MARGIN * norm) {
        return None;
    }
    let y = z.map(|v| v.signum());
    Some(ClassificationDataset { x, y, truth })
}

/// Gaussian examples labelled by a `k`-sparse teacher with magnitudes
/// uniform in `[0.5, 2]` and random signs. Truth and examples are redrawn
/// until every normalized margin exceeds `1e-3`.
pub fn sparse_dataset<R: Rng + ?Sized>(rng: &mut R, d: usize, m: usize, k: usize) -> Result<ClassificationDataset> {
    if k == 0 || k > d || m == 0 {
        return Err(invalid(format!("need 1 ≤ k ≤ d and m ≥ 1, got k = {k}, d = {d}, m = {m}")));
    }
    for _ in 0..MAX_DRAWS {
        let mut support = sample(rng, d, k).into_vec();
        support.sort_unstable();
        let mut weights = vec![0.0; d];
        for &i in &support {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            weights[i] = sign * rng.random_range(0.5..=2.0);
        }
        if let Some(ds) = labelled(rng, m, Truth::Sparse { support, weights }) {
            return Ok(ds);
        }
    }
    Err(Error::NoConvergence { steps: MAX_DRAWS })
}

/// Gaussian examples labelled by a real predictor with `k` non-zero
/// frequencies drawn from `1..d/2`, amplitudes uniform in `[0.5, 2]` and
/// uniform phases.
pub fn frequency_dataset<R: Rng + ?Sized>(rng: &mut R, d: usize, m: usize, k: usize) -> Result<ClassificationDataset> {
    if d < 4 || k == 0 || k > d / 2 - 1 || m == 0 {
        return Err(invalid(format!("need d ≥ 4 and 1 ≤ k < d/2, got k = {k}, d = {d}")));
    }
    for _ in 0..MAX_DRAWS {
        let mut frequencies: Vec<usize> = sample(rng, d / 2 - 1, k).into_iter().map(|f| f + 1).collect();
        frequencies.sort_unstable();
        let mut weights = vec![0.0; d];
        for &f in &frequencies {
            let amp = rng.random_range(0.5..=2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            // Coefficient c at f and conj(c) at d - f, inverse transform 1/d.
            for (i, w) in weights.iter_mut().enumerate() {
                let angle = std::f64::consts::TAU * (f * i) as f64 / d as f64 + phase;
                *w += 2.0 * amp * angle.cos() / d as f64;
            }
        }
        if let Some(ds) = labelled(rng, m, Truth::Frequency { frequencies, weights }) {
            return Ok(ds);
        }
    }
    Err(Error::NoConvergence { steps: MAX_DRAWS })
}

/// Cosine similarity; zero when either vector vanishes.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Summary metrics of a trained predictor, computed on its direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub truth_correlation: f64,
    pub max_margin_correlation: Option<f64>,
    pub final_loss: f64,
    pub steps: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn datasets_are_separable_with_margin() {
        let mut rng = stream(1, 0);
        let ds = sparse_dataset(&mut rng, 30, 50, 4).unwrap();
        let w = DVector::from_column_slice(ds.truth.weights());
        let z = (&ds.x * &w).component_mul(&ds.y);
        assert!(z.iter().all(|v| *v > 1e-3 * w.norm()));
        assert!(ds.y.iter().all(|v| *v == 1.0 || *v == -1.0));
        match &ds.truth {
            Truth::Sparse { support, weights } => {
                assert_eq!(support.len(), 4);
                assert_eq!(weights.iter().filter(|v| **v != 0.0).count(), 4);
                assert!(support.iter().all(|&i| (0.5..=2.0).contains(&weights[i].abs())));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn frequency_truth_has_the_drawn_spectrum() {
        let mut rng = stream(2, 0);
        let ds = frequency_dataset(&mut rng, 16, 40, 3).unwrap();
        let Truth::Frequency { frequencies, weights } = &ds.truth else { unreachable!() };
        let amps = frequency_amplitudes(weights);
        for (f, a) in amps.iter().enumerate() {
            if frequencies.contains(&f) {
                assert!((0.5 - 1e-9..=2.0 + 1e-9).contains(a), "f={f} a={a}");
            } else {
                assert!(*a < 1e-12, "f={f} a={a}");
            }
        }
    }

    #[test]
    fn logistic_is_stable() {
        let (l, s) = LossFn::Logistic.eval(800.0);
        assert!(l >= 0.0 && l < 1e-300 && s >= 0.0);
        let (l, s) = LossFn::Logistic.eval(-800.0);
        assert!((l - 800.0).abs() < 1e-9 && (s - 1.0).abs() < 1e-12);
        let (l, s) = LossFn::Exponential.eval(0.0);
        assert_eq!((l, s), (1.0, 1.0));
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let mut rng = stream(3, 0);
        let ds = sparse_dataset(&mut rng, 6, 10, 2).unwrap();
        let p = DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2);
        for loss in [LossFn::Exponential, LossFn::Logistic] {
            let (_, g) = ds.loss_and_gradient(loss, &p);
            for i in 0..6 {
                let h = 1e-6;
                let mut up = p.clone();
                up[i] += h;
                let mut dn = p.clone();
                dn[i] -= h;
                let fd = (ds.loss_and_gradient(loss, &up).0 - ds.loss_and_gradient(loss, &dn).0) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn correlation_basics() {
        assert_eq!(correlation(&[1.0, 0.0], &[2.0, 0.0]), 1.0);
        assert_eq!(correlation(&[1.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((correlation(&[1.0, 1.0], &[-1.0, -1.0]) + 1.0).abs() < 1e-15);
    }
}
