//! Small dense linear-algebra helpers and the spectrum record.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::gaussian_matrix;

/// Uniformly random orthogonal matrix (QR of a Gaussian matrix with the
/// sign of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> DMatrix<f64> {
    let qr = gaussian_matrix(rng, d, d, 1.0).qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Singular values sorted in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending and
/// eigenvectors as matching columns.
pub fn symmetric_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// Principal angles (radians, ascending) between the column spans of two
/// matrices with orthonormal columns.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let mut cosines = singular_values(&(a.transpose() * b));
    cosines.truncate(a.ncols().min(b.ncols()));
    cosines.iter().map(|c| c.clamp(-1.0, 1.0).acos()).collect()
}

/// Top-`k` left singular vectors of `m`.
pub fn top_left_singular_vectors(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = k.min(order.len());
    DMatrix::from_fn(m.nrows(), k, |i, j| u[(i, order[j])])
}

/// Number of values at or above `fraction · max`. The spectrum must be
/// sorted descending; an all-zero spectrum has rank 0.
pub fn effective_rank(spectrum: &[f64], fraction: f64) -> usize {
    let top = spectrum.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return 0;
    }
    spectrum.iter().filter(|v| **v >= fraction * top).count()
}

/// Singular values of an end-to-end matrix over time, each row sorted
/// descending. `alignment` holds, per recorded time, the principal angles
/// between the top singular subspace and the target's top eigenvectors, and
/// is empty when not tracked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpectrumTrajectory {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub alignment: Vec<Vec<f64>>,
}

impl SpectrumTrajectory {
    pub fn push(&mut self, time: f64, values: Vec<f64>) {
        self.times.push(time);
        self.values.push(values);
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.values.last().map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn orthogonal_is_orthogonal() {
        let q = random_orthogonal(&mut stream(1, 0), 6);
        let err = (q.transpose() * &q - DMatrix::identity(6, 6)).abs().max();
        assert!(err < 1e-12);
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[4.0, 3.0, 2.0, 1.0, 1e-6], 0.1), 4);
        assert_eq!(effective_rank(&[1.0], 0.5), 1);
        assert_eq!(effective_rank(&[0.0, 0.0], 0.1), 0);
    }

    #[test]
    fn eigen_sorted() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 3.0, 2.0]));
        let (v, e) = symmetric_eigen_desc(&m);
        assert_eq!(v, vec![3.0, 2.0, 1.0]);
        assert!((e[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn angles_between_coordinate_planes() {
        let a = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let b = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 0.0]);
        assert!((principal_angles(&a, &b)[0] - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(principal_angles(&a, &a)[0] < 1e-7);
    }
}
