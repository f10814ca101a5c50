//! The immunization step: weighted least squares of the control outcomes on
//! the covariates, with weights `h'(x_i'b)` taken from the balancing fit.
//!
//! Only control rows enter the loss, but it is normalized by the full sample
//! size `n` so that loadings and penalty levels share the scale of the
//! balancing step.

use nalgebra::{DMatrix, DVector};

use crate::balancing::{exempt_mask, iterate_loadings, lambda_level, linear_index, LoadingFit, LoadingOptions};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::link::LinkSpec;
use crate::objective::{IndexLoss, SmoothLoss, SquaresKernel};
use crate::solver::{minimize_composite, FitResult, PenaltyPlan, SolverOptions};
use crate::stats::solve_full_rank;

/// Control-group design with the immunization weights attached.
#[derive(Debug, Clone)]
pub struct ControlDesign {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    n: usize,
}

impl ControlDesign {
    pub fn new(ds: &Dataset, beta_hat: &[f64], link: LinkSpec) -> Result<Self> {
        Self::with_outcome(ds, ds.y().as_slice(), beta_hat, link)
    }

    /// Same design and weights, outcome taken from `y` (full-sample length).
    pub fn with_outcome(ds: &Dataset, y: &[f64], beta_hat: &[f64], link: LinkSpec) -> Result<Self> {
        if beta_hat.len() != ds.p() {
            return Err(Error::Dimension(format!("beta has length {} but p = {}", beta_hat.len(), ds.p())));
        }
        if y.len() != ds.n() {
            return Err(Error::Dimension(format!("outcome has {} rows but n = {}", y.len(), ds.n())));
        }
        let rows = ds.control_rows();
        let eta = linear_index(ds, beta_hat);
        let mut weights = Vec::with_capacity(rows.len());
        for &i in &rows {
            link.check(i, eta[i])?;
            weights.push((link.h_prime)(eta[i]));
        }
        let x = ds.x().select_rows(&rows);
        let y = rows.iter().map(|&i| y[i]).collect();
        Ok(Self { x, y, weights, n: ds.n() })
    }

    pub fn loss(&self) -> IndexLoss<'_, SquaresKernel<'_>> {
        IndexLoss::new(&self.x, 1.0 / self.n as f64, SquaresKernel { y: &self.y, weights: Some(&self.weights) })
    }

    fn residuals(&self, mu: &[f64]) -> Vec<f64> {
        let fitted = &self.x * DVector::from_column_slice(mu);
        self.y.iter().zip(fitted.iter()).map(|(y, f)| y - f).collect()
    }

    /// `psi'_j = sqrt((1/n) sum_controls h'(x_i'b)^2 (y_i - x_i'mu)^2 x_ij^2)`.
    pub fn loadings(&self, mu: &[f64]) -> Vec<f64> {
        let r = self.residuals(mu);
        let n = self.n as f64;
        (0..self.x.ncols())
            .map(|j| {
                let s: f64 = self
                    .x
                    .column(j)
                    .iter()
                    .zip(&r)
                    .zip(&self.weights)
                    .map(|((x, r), w)| (w * r * x).powi(2))
                    .sum();
                (s / n).sqrt()
            })
            .collect()
    }

    /// Weighted mean of control outcomes.
    pub fn weighted_mean(&self) -> f64 {
        let sw: f64 = self.weights.iter().sum();
        self.weights.iter().zip(&self.y).map(|(w, y)| w * y).sum::<f64>() / sw
    }

    /// Weighted standard deviation of the control outcomes, floored at one.
    /// Used to put the solver tolerance on the outcome's scale.
    pub fn outcome_scale(&self) -> f64 {
        let m = self.weighted_mean();
        let sw: f64 = self.weights.iter().sum();
        let v = self.weights.iter().zip(&self.y).map(|(w, y)| w * (y - m).powi(2)).sum::<f64>() / sw;
        v.sqrt().max(1.0)
    }

    /// The design with the outcome centered at its weighted mean.
    fn centered(&self) -> (Self, f64) {
        let m = self.weighted_mean();
        let y = self.y.iter().map(|v| v - m).collect();
        (Self { x: self.x.clone(), y, weights: self.weights.clone(), n: self.n }, m)
    }
}

/// Value and gradient of `(1/n) sum_i (1 - D_i) h'(x_i'b) (y_i - x_i'mu)^2`.
pub fn weighted_ls_loss(mu: &[f64], ds: &Dataset, beta_hat: &[f64], link: LinkSpec) -> Result<(f64, Vec<f64>)> {
    let design = ControlDesign::new(ds, beta_hat, link)?;
    if mu.len() != ds.p() {
        return Err(Error::Dimension(format!("mu has length {} but p = {}", mu.len(), ds.p())));
    }
    Ok(design.loss().value_grad(mu)?)
}

pub fn mu_loadings(ds: &Dataset, beta_hat: &[f64], mu: &[f64], link: LinkSpec) -> Result<Vec<f64>> {
    if mu.len() != ds.p() {
        return Err(Error::Dimension(format!("mu has length {} but p = {}", mu.len(), ds.p())));
    }
    Ok(ControlDesign::new(ds, beta_hat, link)?.loadings(mu))
}

fn scaled_solver(design: &ControlDesign, solver: &SolverOptions) -> SolverOptions {
    SolverOptions { tol: solver.tol * design.outcome_scale(), ..solver.clone() }
}

/// Penalized weighted least squares. The solver tolerance is multiplied by
/// the outcome scale (see [`ControlDesign::outcome_scale`]).
pub fn fit_mu_penalized_on(
    design: &ControlDesign,
    plan: &PenaltyPlan,
    init: &[f64],
    solver: &SolverOptions,
) -> Result<FitResult> {
    minimize_composite(&design.loss(), plan, init, &scaled_solver(design, solver))
}

pub fn fit_mu_penalized(
    ds: &Dataset,
    beta_hat: &[f64],
    link: LinkSpec,
    plan: &PenaltyPlan,
    solver: &SolverOptions,
) -> Result<FitResult> {
    let design = ControlDesign::new(ds, beta_hat, link)?;
    fit_mu_penalized_on(&design, plan, &vec![0.0; ds.p()], solver)
}

/// Immunization step with data-driven loadings. Starts from the
/// intercept-only weighted mean and makes `fits` fits in total (at least
/// one), stopping early when the loadings settle within `opts.eps`.
pub fn iterate_mu_loadings_on(
    ds: &Dataset,
    design: &ControlDesign,
    opts: &LoadingOptions,
    fits: usize,
) -> Result<LoadingFit> {
    let j = ds.intercept_index().ok_or(Error::NoIntercept)?;
    // Fitting the centered outcome makes the result exactly equivariant to
    // shifts of Y; the mean goes back into the intercept.
    let (centered, shift) = design.centered();
    let init = vec![0.0; ds.p()];
    let lambda = lambda_level(ds.n(), ds.p(), opts.gamma, opts.c, true)?;
    let solver = scaled_solver(&centered, &opts.solver);
    let loss = centered.loss();
    let mut out = iterate_loadings(
        init,
        lambda,
        exempt_mask(ds),
        opts,
        fits.saturating_sub(1),
        |mu| Ok(centered.loadings(mu)),
        |plan, warm| minimize_composite(&loss, plan, warm, &solver),
    )?;
    out.fit.coef[j] += shift;
    Ok(out)
}

pub fn iterate_mu_loadings(
    ds: &Dataset,
    beta_hat: &[f64],
    link: LinkSpec,
    opts: &LoadingOptions,
    fits: usize,
) -> Result<LoadingFit> {
    let design = ControlDesign::new(ds, beta_hat, link)?;
    iterate_mu_loadings_on(ds, &design, opts, fits)
}

/// Closed-form weighted regression of control outcomes on the covariates.
pub fn fit_mu_lowdim(ds: &Dataset, beta_hat: &[f64], link: LinkSpec) -> Result<FitResult> {
    let design = ControlDesign::new(ds, beta_hat, link)?;
    fit_mu_lowdim_on(&design)
}

pub fn fit_mu_lowdim_on(design: &ControlDesign) -> Result<FitResult> {
    let mut a = design.x.clone();
    let mut b = DVector::from_column_slice(&design.y);
    for (i, &w) in design.weights.iter().enumerate() {
        let s = w.sqrt();
        a.row_mut(i).scale_mut(s);
        b[i] *= s;
    }
    let mu = solve_full_rank(&a, &b)?;
    let coef: Vec<f64> = mu.iter().copied().collect();
    let (value, grad) = design.loss().value_grad(&coef)?;
    let kkt = grad.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
    Ok(FitResult::from_coef(coef, value, kkt, 1, true, None))
}
