//! Smooth losses that depend on the coefficients only through the linear
//! index `x_i'b`. All three first-step programs (balancing, logistic, weighted
//! least squares) have this form, which lets the solver evaluate them on a
//! subset of columns without copying the design.

use nalgebra::DMatrix;

use crate::error::LossError;
use crate::link::LinkSpec;

/// A convex, differentiable function of a coefficient vector.
pub trait SmoothLoss: Sync {
    fn dim(&self) -> usize;

    fn value_grad(&self, coef: &[f64]) -> Result<(f64, Vec<f64>), LossError>;

    fn value(&self, coef: &[f64]) -> Result<f64, LossError> {
        Ok(self.value_grad(coef)?.0)
    }

    /// The same loss as a function of the coordinates in `cols` only, the
    /// remaining coordinates pinned at zero. `None` if unsupported.
    fn restrict(&self, _cols: &[usize]) -> Option<Box<dyn SmoothLoss + '_>> {
        None
    }
}

/// Wraps a value-and-gradient closure.
pub struct FnLoss<F> {
    dim: usize,
    f: F,
}

impl<F> FnLoss<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), LossError> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> SmoothLoss for FnLoss<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>), LossError> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, coef: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
        (self.f)(coef)
    }
}

/// Per-row contribution `l_i(eta)` and its derivative.
pub trait RowKernel: Sync + Clone {
    fn value(&self, row: usize, eta: f64) -> Result<f64, LossError>;
    fn value_deriv(&self, row: usize, eta: f64) -> Result<(f64, f64), LossError>;
}

/// `(1 - D) H(eta) - D eta`.
#[derive(Clone, Copy)]
pub struct BalancingKernel<'a> {
    pub treated: &'a [bool],
    pub link: LinkSpec,
}

impl RowKernel for BalancingKernel<'_> {
    #[inline]
    fn value(&self, row: usize, eta: f64) -> Result<f64, LossError> {
        self.link.check(row, eta)?;
        Ok(if self.treated[row] { -eta } else { (self.link.big_h)(eta) })
    }

    #[inline]
    fn value_deriv(&self, row: usize, eta: f64) -> Result<(f64, f64), LossError> {
        self.link.check(row, eta)?;
        Ok(if self.treated[row] {
            (-eta, -1.0)
        } else {
            ((self.link.big_h)(eta), (self.link.h)(eta))
        })
    }
}

/// Logistic negative log-likelihood `log(1 + e^eta) - D eta`.
#[derive(Clone, Copy)]
pub struct LogisticKernel<'a> {
    pub treated: &'a [bool],
}

#[inline]
fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

#[inline]
pub fn logistic_cdf(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl RowKernel for LogisticKernel<'_> {
    #[inline]
    fn value(&self, row: usize, eta: f64) -> Result<f64, LossError> {
        let d = if self.treated[row] { 1.0 } else { 0.0 };
        Ok(softplus(eta) - d * eta)
    }

    #[inline]
    fn value_deriv(&self, row: usize, eta: f64) -> Result<(f64, f64), LossError> {
        let d = if self.treated[row] { 1.0 } else { 0.0 };
        Ok((softplus(eta) - d * eta, logistic_cdf(eta) - d))
    }
}

/// `w_i (y_i - eta)^2`; unit weights when `weights` is `None`.
#[derive(Clone, Copy)]
pub struct SquaresKernel<'a> {
    pub y: &'a [f64],
    pub weights: Option<&'a [f64]>,
}

impl RowKernel for SquaresKernel<'_> {
    #[inline]
    fn value(&self, row: usize, eta: f64) -> Result<f64, LossError> {
        let w = self.weights.map_or(1.0, |w| w[row]);
        let r = self.y[row] - eta;
        Ok(w * r * r)
    }

    #[inline]
    fn value_deriv(&self, row: usize, eta: f64) -> Result<(f64, f64), LossError> {
        let w = self.weights.map_or(1.0, |w| w[row]);
        let r = self.y[row] - eta;
        Ok((w * r * r, -2.0 * w * r))
    }
}

/// `scale * sum_i l_i(x_i'b)` over the rows of `x`.
pub struct IndexLoss<'a, K> {
    x: &'a DMatrix<f64>,
    cols: Option<Vec<usize>>,
    scale: f64,
    kernel: K,
}

impl<'a, K: RowKernel> IndexLoss<'a, K> {
    pub fn new(x: &'a DMatrix<f64>, scale: f64, kernel: K) -> Self {
        Self { x, cols: None, scale, kernel }
    }

    #[inline]
    fn column(&self, k: usize) -> &[f64] {
        let j = self.cols.as_ref().map_or(k, |c| c[k]);
        let n = self.x.nrows();
        &self.x.as_slice()[j * n..(j + 1) * n]
    }

    /// Linear index `x b`, skipping zero coefficients.
    pub fn index(&self, coef: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.x.nrows()];
        for (k, &b) in coef.iter().enumerate() {
            if b != 0.0 {
                for (e, &v) in eta.iter_mut().zip(self.column(k)) {
                    *e += v * b;
                }
            }
        }
        eta
    }
}

impl<K: RowKernel> SmoothLoss for IndexLoss<'_, K> {
    fn dim(&self) -> usize {
        self.cols.as_ref().map_or(self.x.ncols(), Vec::len)
    }

    fn value_grad(&self, coef: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
        let eta = self.index(coef);
        let mut value = 0.0;
        let mut resid = Vec::with_capacity(eta.len());
        for (i, &e) in eta.iter().enumerate() {
            let (v, d) = self.kernel.value_deriv(i, e)?;
            value += v;
            resid.push(d);
        }
        let grad: Vec<f64> = (0..self.dim())
            .map(|k| self.scale * self.column(k).iter().zip(&resid).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let value = self.scale * value;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(LossError::NonFinite);
        }
        Ok((value, grad))
    }

    fn value(&self, coef: &[f64]) -> Result<f64, LossError> {
        let eta = self.index(coef);
        let mut value = 0.0;
        for (i, &e) in eta.iter().enumerate() {
            value += self.kernel.value(i, e)?;
        }
        let value = self.scale * value;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(LossError::NonFinite)
        }
    }

    fn restrict(&self, cols: &[usize]) -> Option<Box<dyn SmoothLoss + '_>> {
        let mapped = match &self.cols {
            Some(outer) => cols.iter().map(|&k| outer[k]).collect(),
            None => cols.to_vec(),
        };
        Some(Box::new(IndexLoss {
            x: self.x,
            cols: Some(mapped),
            scale: self.scale,
            kernel: self.kernel.clone(),
        }))
    }
}
