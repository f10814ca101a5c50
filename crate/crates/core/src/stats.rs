//! Small numerical helpers: normal quantiles, dense least squares.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

pub fn normal_quantile(prob: f64) -> f64 {
    Normal::standard().inverse_cdf(prob)
}

pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// Two-sided critical value `Phi^{-1}(1 - alpha/2)`.
pub fn critical_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(normal_quantile(1.0 - alpha / 2.0))
}

/// Least-squares solution of `a x = b` via SVD, refusing rank-deficient `a`.
pub fn solve_full_rank(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let dim = a.ncols();
    if dim == 0 {
        return Ok(DVector::zeros(0));
    }
    if a.nrows() < dim {
        return Err(Error::SingularGram { rank: a.nrows(), dim });
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = smax * (a.nrows().max(dim) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > cutoff).count();
    if rank < dim {
        return Err(Error::SingularGram { rank, dim });
    }
    svd.solve(b, cutoff).map_err(|e| Error::Estimation(e.to_string()))
}

/// Inverse of a symmetric positive definite matrix, or the rank if singular.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.inverse()),
        None => {
            let dim = a.ncols();
            let svd = a.clone().svd(false, false);
            let smax = svd.singular_values.max();
            let rank = svd.singular_values.iter().filter(|&&s| s > smax * dim as f64 * f64::EPSILON).count();
            Err(Error::SingularGram { rank, dim })
        }
    }
}
