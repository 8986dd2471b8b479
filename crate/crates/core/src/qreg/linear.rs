//! Least squares through the normal equations.
//!
//! The Gram matrix of a stage design is factorised once and reused for every
//! right-hand side (outcomes, composites, candidate pseudo-outcomes).

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Gram matrices whose condition number exceeds this get a ridge.
pub const RIDGE_CONDITION: f64 = 1e10;
pub const RIDGE: f64 = 1e-8;
/// Condition number beyond which even the ridged system is rejected.
pub const MAX_CONDITION: f64 = 1e15;

pub struct LeastSquares {
    design: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    pub condition: f64,
    pub ridged: bool,
}

fn condition_number(gram: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
    let max = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl LeastSquares {
    pub fn new(design: DMatrix<f64>) -> Result<Self> {
        let d = design.ncols();
        if d == 0 || design.nrows() == 0 {
            return Err(Error::numerical("empty design matrix"));
        }
        let mut gram = design.tr_mul(&design);
        let mut condition = condition_number(&gram);
        let mut ridged = false;
        if !(condition <= RIDGE_CONDITION) {
            for i in 0..d {
                gram[(i, i)] += RIDGE;
            }
            condition = condition_number(&gram);
            ridged = true;
            if !(condition <= MAX_CONDITION) {
                return Err(Error::numerical(format!(
                    "rank-deficient design ({} x {}), condition number {:.3e} after ridge",
                    design.nrows(),
                    d,
                    condition
                )));
            }
        }
        let factor = Cholesky::new(gram).ok_or_else(|| {
            Error::numerical(format!("normal equations not positive definite (condition {condition:.3e})"))
        })?;
        Ok(Self {
            design,
            factor,
            condition,
            ridged,
        })
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Coefficients (features x targets) for an (n x targets) matrix.
    pub fn solve(&self, targets: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = self.design.tr_mul(targets);
        self.factor.solve(&rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_a_line_exactly() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DMatrix::from_row_slice(3, 1, &[2.0, 5.0, 8.0]);
        let beta = LeastSquares::new(x).unwrap().solve(&y);
        assert!((beta[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((beta[(1, 0)] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn saturated_two_point_fit() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, 3.0]);
        let y = DMatrix::from_row_slice(2, 1, &[0.5, 4.5]);
        let ls = LeastSquares::new(x.clone()).unwrap();
        let fitted = &x * ls.solve(&y);
        assert!((fitted - y).abs().max() < 1e-10);
    }

    #[test]
    fn collinear_columns_get_a_ridge() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let ls = LeastSquares::new(x.clone()).unwrap();
        assert!(ls.ridged);
        let y = DMatrix::from_row_slice(3, 1, &[2.0, 2.0, 2.0]);
        let fitted = &x * ls.solve(&y);
        assert!((fitted - y).abs().max() < 1e-6);
    }

    #[test]
    fn zero_design_is_rejected() {
        let x = DMatrix::from_element(4, 3, 0.0);
        let ls = LeastSquares::new(x);
        // 1e-8 * I has condition number 1; zero design is degenerate but solvable.
        assert!(ls.is_ok());
        let big = DMatrix::from_fn(4, 2, |_, j| if j == 0 { 1e9 } else { 0.0 });
        assert!(LeastSquares::new(big).is_err());
    }
}
