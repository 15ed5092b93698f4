//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};

/// Symmetric positive semi-definite decomposition with a degeneracy cut.
#[derive(Debug, Clone)]
pub struct PsdDecomposition {
    /// Eigenvalues after clamping (ascending order is not guaranteed).
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
    /// `true` for eigen-directions treated as degenerate (eigenvalue ≤ tol).
    pub degenerate: Vec<bool>,
    /// Most negative raw eigenvalue (0 if none were negative).
    pub most_negative: f64,
}

impl PsdDecomposition {
    /// Decomposes the symmetric part of `a`. Eigenvalues at or below `tol`
    /// are flagged degenerate and clamped to zero.
    pub fn new(a: &DMatrix<f64>, tol: f64) -> Self {
        if a.is_empty() {
            return Self {
                eigenvalues: Vec::new(),
                eigenvectors: DMatrix::zeros(0, 0),
                degenerate: Vec::new(),
                most_negative: 0.0,
            };
        }
        let sym = (a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        let mut most_negative = 0.0f64;
        let mut eigenvalues = Vec::with_capacity(eig.eigenvalues.len());
        let mut degenerate = Vec::with_capacity(eig.eigenvalues.len());
        for &l in eig.eigenvalues.iter() {
            most_negative = most_negative.min(l);
            if l <= tol {
                eigenvalues.push(0.0);
                degenerate.push(true);
            } else {
                eigenvalues.push(l);
                degenerate.push(false);
            }
        }
        Self {
            eigenvalues,
            eigenvectors: eig.eigenvectors,
            degenerate,
            most_negative,
        }
    }

    fn rebuild(&self, map: impl Fn(f64, bool) -> f64) -> DMatrix<f64> {
        let n = self.eigenvalues.len();
        let mut out = DMatrix::zeros(n, n);
        for (j, (&l, &deg)) in self.eigenvalues.iter().zip(&self.degenerate).enumerate() {
            let w = map(l, deg);
            if w == 0.0 {
                continue;
            }
            let v = self.eigenvectors.column(j);
            out += &v * v.transpose() * w;
        }
        out
    }

    /// The clamped matrix itself.
    pub fn matrix(&self) -> DMatrix<f64> {
        self.rebuild(|l, _| l)
    }

    pub fn sqrt(&self) -> DMatrix<f64> {
        self.rebuild(|l, deg| if deg { 0.0 } else { l.sqrt() })
    }

    /// Moore–Penrose inverse restricted to the non-degenerate subspace.
    pub fn pinv(&self) -> DMatrix<f64> {
        self.rebuild(|l, deg| if deg { 0.0 } else { 1.0 / l })
    }

    /// Inverse square root on the non-degenerate subspace.
    pub fn pinv_sqrt(&self) -> DMatrix<f64> {
        self.rebuild(|l, deg| if deg { 0.0 } else { 1.0 / l.sqrt() })
    }

    pub fn rank(&self) -> usize {
        self.degenerate.iter().filter(|d| !**d).count()
    }
}

/// Zeroes rows and columns `i` for which `reference[(i, i)] == 0` exactly.
/// A PSD matrix with a zero diagonal entry has that whole row equal to zero,
/// so functions of it (square root, pseudo-inverse) must too.
pub fn zero_null_axes(m: &mut DMatrix<f64>, reference: &DMatrix<f64>) {
    for i in 0..reference.nrows() {
        if reference[(i, i)] == 0.0 {
            m.row_mut(i).fill(0.0);
            m.column_mut(i).fill(0.0);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let d = PsdDecomposition::new(&a, 1e-12);
        let s = d.sqrt();
        assert!((&s * &s - &a).norm() < 1e-12);
        let p = d.pinv();
        assert!((&p * &a - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn degenerate_direction_is_dropped() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let d = PsdDecomposition::new(&a, 1e-10);
        assert_eq!(d.rank(), 1);
        let mut s = d.sqrt();
        zero_null_axes(&mut s, &a);
        assert_eq!(s[(0, 0)], 0.0);
        assert!((s[(1, 1)] - 2f64.sqrt()).abs() < 1e-14);
        let pi = d.pinv();
        assert!((pi[(1, 1)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn negative_eigenvalue_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        let d = PsdDecomposition::new(&a, 0.0);
        assert!((d.most_negative + 1e-3).abs() < 1e-15);
        assert_eq!(d.matrix()[(1, 1)], 0.0);
    }
}
