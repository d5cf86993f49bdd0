use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::ClassificationDataset;
use crate::error::{Error, Result};

/// Hard-margin separator through the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxMargin {
    /// Feasible weights: every `yₖ⟨w, xₖ⟩ ≥ 1`.
    pub weights: Vec<f64>,
    /// Geometric margin `1/‖w‖`.
    pub margin: f64,
    /// Relative duality gap at termination.
    pub gap: f64,
    pub sweeps: usize,
}

/// Solves `min ½‖w‖²` subject to `yₖ⟨w, xₖ⟩ ≥ 1` by coordinate ascent on
/// the dual. Stops once the relative duality gap and the constraint
/// violation are both below `tol`; the returned weights are rescaled to be
/// exactly feasible. By strong convexity the direction error is of order
/// `√tol`.
pub fn max_margin(data: &ClassificationDataset, tol: f64, max_sweeps: usize) -> Result<MaxMargin> {
    let m = data.len();
    let d = data.dim();
    let rows: Vec<DVector<f64>> = (0..m).map(|k| data.x.row(k).transpose() * data.y[k]).collect();
    let sq: Vec<f64> = rows.iter().map(|z| z.norm_squared()).collect();
    let mut alpha = vec![0.0; m];
    let mut w = DVector::<f64>::zeros(d);
    for sweep in 1..=max_sweeps {
        for k in 0..m {
            if sq[k] == 0.0 {
                continue;
            }
            let next = (alpha[k] + (1.0 - rows[k].dot(&w)) / sq[k]).max(0.0);
            let delta = next - alpha[k];
            if delta != 0.0 {
                w.axpy(delta, &rows[k], 1.0);
                alpha[k] = next;
            }
        }
        let norm2 = w.norm_squared();
        let dual_sum: f64 = alpha.iter().sum();
        let gap = (norm2 - dual_sum).abs() / norm2.max(f64::MIN_POSITIVE);
        let worst = rows.iter().map(|z| z.dot(&w)).fold(f64::INFINITY, f64::min);
        if gap <= tol && worst >= 1.0 - tol && worst > 0.0 {
            let w = w / worst;
            let margin = 1.0 / w.norm();
            return Ok(MaxMargin { weights: w.as_slice().to_vec(), margin, gap, sweeps: sweep });
        }
    }
    Err(Error::NoConvergence { steps: max_sweeps })
}

#[cfg(test)]
mod tests {
    use super::super::Truth;
    use super::*;
    use nalgebra::DMatrix;

    fn data(rows: &[[f64; 2]], y: &[f64]) -> ClassificationDataset {
        ClassificationDataset {
            x: DMatrix::from_fn(rows.len(), 2, |i, j| rows[i][j]),
            y: DVector::from_column_slice(y),
            truth: Truth::Sparse { support: vec![0], weights: vec![1.0, 0.0] },
        }
    }

    #[test]
    fn two_point_problem() {
        // Constraints w₁ + w₂ ≥ 1 and w₁ ≥ 1 are both active at w = (1, 0).
        let ds = data(&[[1.0, 1.0], [-1.0, 0.0], [3.0, -0.5]], &[1.0, -1.0, 1.0]);
        let mm = max_margin(&ds, 1e-14, 100_000).unwrap();
        assert!((mm.weights[0] - 1.0).abs() < 1e-6 && mm.weights[1].abs() < 1e-6, "{mm:?}");
        assert!((mm.margin - 1.0).abs() < 1e-6);
    }

    #[test]
    fn result_is_feasible() {
        let mut rng = crate::rng::stream(4, 0);
        let ds = super::super::sparse_dataset(&mut rng, 20, 30, 3).unwrap();
        let mm = max_margin(&ds, 1e-9, 100_000).unwrap();
        let w = DVector::from_column_slice(&mm.weights);
        let z = (&ds.x * &w).component_mul(&ds.y);
        assert!(z.min() >= 1.0 - 1e-12);
        // No separator of the truth direction beats the optimum.
        let t = DVector::from_column_slice(ds.truth.weights());
        let zt = (&ds.x * &t).component_mul(&ds.y);
        assert!(zt.min() / t.norm() <= mm.margin + 1e-12);
    }
}
