//! ATT point estimates, variance estimates and comparators.
//!
//! Every balancing-based estimator evaluates the same estimating function
//!
//! ```text
//! g(Z, theta, (b, mu)) = [D - (1 - D) h(x'b)] (Y - x'mu) - D theta
//! ```
//!
//! with `theta` solving `mean(g) = 0` and asymptotic variance
//! `mean(g^2) / mean(D)^2`. The estimators differ only in how `b` and `mu`
//! are obtained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balancing::{
    control_weights, exempt_mask, fit_balancing_lowdim, iterate_beta_loadings, iterate_loadings,
    iterate_logit_loadings, lambda_level, linear_index, LoadingFit, LoadingOptions,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::immunization::{fit_mu_lowdim_on, iterate_mu_loadings_on, ControlDesign};
use crate::link::LinkSpec;
use crate::objective::{IndexLoss, SquaresKernel};
use crate::solver::minimize_composite;
use crate::stats::{critical_value, solve_full_rank, spd_inverse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Naive,
    Immunized,
    Farrell,
    Lowdim,
    Oracle,
    DoubleSelection,
    Ols,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Immunized => "immunized",
            Method::Farrell => "farrell",
            Method::Lowdim => "lowdim",
            Method::Oracle => "oracle",
            Method::DoubleSelection => "double-selection",
            Method::Ols => "ols",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Diagnostics for one first-step fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub lambda: f64,
    pub active: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    pub solver_iterations: usize,
    pub loading_iterations: usize,
    pub loadings_converged: bool,
}

impl StageSummary {
    fn from_loading_fit(lf: &LoadingFit, exempt: Option<usize>) -> Self {
        let active = lf.fit.active_set.iter().filter(|&&j| Some(j) != exempt).count();
        Self {
            lambda: lf.plan.lambda,
            active,
            kkt_residual: lf.fit.kkt_residual,
            converged: lf.fit.converged,
            solver_iterations: lf.fit.iterations,
            loading_iterations: lf.iterations,
            loadings_converged: lf.loadings_converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSummary {
    pub sum: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttEstimate {
    pub method: Method,
    pub theta: f64,
    /// Asymptotic standard deviation of `sqrt(n) (theta_hat - theta)`.
    pub sigma: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub n: usize,
    pub n1: usize,
    /// Non-intercept covariates selected in the propensity / balancing step.
    pub propensity_active: Option<usize>,
    /// Non-intercept covariates selected in the outcome step.
    pub outcome_active: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_summary: Option<WeightSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub propensity_stage: Option<StageSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_stage: Option<StageSummary>,
    /// Control weights `h(x_i'b)` in control-row order.
    #[serde(skip)]
    pub weights: Vec<f64>,
    #[serde(skip)]
    pub beta_hat: Option<Vec<f64>>,
    #[serde(skip)]
    pub mu_hat: Option<Vec<f64>>,
}

impl AttEstimate {
    fn new(method: Method, theta: f64, sigma: f64, n: usize, n1: usize, alpha: f64) -> Result<Self> {
        let z = critical_value(alpha)?;
        let se = sigma / (n as f64).sqrt();
        Ok(Self {
            method,
            theta,
            sigma,
            se,
            ci_low: theta - z * se,
            ci_high: theta + z * se,
            alpha,
            n,
            n1,
            propensity_active: None,
            outcome_active: None,
            weight_summary: None,
            propensity_stage: None,
            outcome_stage: None,
            weights: Vec::new(),
            beta_hat: None,
            mu_hat: None,
        })
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }

    fn with_weights(mut self, full: &[f64], ds: &Dataset) -> Self {
        self.weights = ds.control_rows().iter().map(|&i| full[i]).collect();
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for &w in &self.weights {
            lo = lo.min(w);
            hi = hi.max(w);
            sum += w;
        }
        self.weight_summary = Some(WeightSummary { sum, min: lo, max: hi });
        self
    }
}

/// Solves the moment condition for `theta` and evaluates the variance.
/// `weights` has full length (zero on treated rows), `offset` is `x_i'mu`.
fn moment_estimate(
    ds: &Dataset,
    weights: &[f64],
    offset: &[f64],
    theta_override: Option<f64>,
    alpha: f64,
    method: Method,
) -> Result<AttEstimate> {
    let n = ds.n();
    let n1 = ds.n1();
    if n1 == 0 {
        return Err(Error::Estimation("no treated units".into()));
    }
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::Estimation("non-finite balancing weights".into()));
    }
    let y = ds.y();
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let a = if ds.treated()[i] { 1.0 } else { -weights[i] };
        terms.push(a * (y[i] - offset[i]));
    }
    let theta_hat = terms.iter().sum::<f64>() / n1 as f64;
    let theta = theta_override.unwrap_or(theta_hat);
    let mean_g2 = (0..n)
        .map(|i| {
            let g = terms[i] - ds.d(i) * theta;
            g * g
        })
        .sum::<f64>()
        / n as f64;
    let share = n1 as f64 / n as f64;
    let sigma = (mean_g2 / (share * share)).sqrt();
    AttEstimate::new(method, theta_hat, sigma, n, n1, alpha)
}

/// Plug-in estimator with `mu = 0`; variance from `g` at `mu = 0`.
pub fn att_naive(ds: &Dataset, beta_hat: &[f64], link: LinkSpec, alpha: f64) -> Result<AttEstimate> {
    let w = control_weights(ds, beta_hat, link)?;
    let zero = vec![0.0; ds.n()];
    Ok(moment_estimate(ds, &w, &zero, None, alpha, Method::Naive)?.with_weights(&w, ds))
}

/// Immunized estimator `(1/n1) sum [D - (1-D) h(x'b)] (Y - x'mu)`.
pub fn att_immunized(ds: &Dataset, beta_hat: &[f64], mu_hat: &[f64], link: LinkSpec, alpha: f64) -> Result<AttEstimate> {
    if mu_hat.len() != ds.p() {
        return Err(Error::Dimension(format!("mu has length {} but p = {}", mu_hat.len(), ds.p())));
    }
    let w = control_weights(ds, beta_hat, link)?;
    let offset = linear_index(ds, mu_hat);
    Ok(moment_estimate(ds, &w, offset.as_slice(), None, alpha, Method::Immunized)?.with_weights(&w, ds))
}

/// Covariate imbalance left by the weights,
/// `(1/n1) [sum_treated x_i - sum_controls h(x_i'b) x_i]`.
pub fn imbalance(ds: &Dataset, beta_hat: &[f64], link: LinkSpec) -> Result<Vec<f64>> {
    let w = control_weights(ds, beta_hat, link)?;
    let n1 = ds.n1() as f64;
    Ok((0..ds.p())
        .map(|j| {
            let col = ds.x().column(j);
            (0..ds.n()).map(|i| if ds.treated()[i] { col[i] } else { -w[i] * col[i] }).sum::<f64>() / n1
        })
        .collect())
}

/// Settings shared by the estimation pipelines.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorConfig {
    pub link: LinkSpec,
    pub loadings: LoadingOptions,
    /// Total fits in the outcome-step loading iteration.
    pub mu_fits: usize,
    pub alpha: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { link: LinkSpec::exponential(), loadings: LoadingOptions::default(), mu_fits: 2, alpha: 0.05 }
    }
}

fn require_intercept(ds: &Dataset) -> Result<usize> {
    ds.intercept_index().ok_or(Error::NoIntercept)
}

/// Naive plug-in and immunized estimates sharing one balancing fit.
pub fn naive_and_immunized(ds: &Dataset, cfg: &EstimatorConfig) -> Result<(AttEstimate, AttEstimate)> {
    let icpt = require_intercept(ds)?;
    let balance = iterate_beta_loadings(ds, cfg.link, &cfg.loadings)?;
    let beta = &balance.fit.coef;
    let stage_b = StageSummary::from_loading_fit(&balance, Some(icpt));

    let mut naive = att_naive(ds, beta, cfg.link, cfg.alpha)?;
    naive.propensity_active = Some(stage_b.active);
    naive.propensity_stage = Some(stage_b.clone());
    naive.beta_hat = Some(beta.clone());

    let design = ControlDesign::new(ds, beta, cfg.link)?;
    let outcome = iterate_mu_loadings_on(ds, &design, &cfg.loadings, cfg.mu_fits)?;
    let stage_m = StageSummary::from_loading_fit(&outcome, Some(icpt));
    let mut imm = att_immunized(ds, beta, &outcome.fit.coef, cfg.link, cfg.alpha)?;
    imm.propensity_active = Some(stage_b.active);
    imm.outcome_active = Some(stage_m.active);
    imm.propensity_stage = Some(stage_b);
    imm.outcome_stage = Some(stage_m);
    imm.beta_hat = Some(beta.clone());
    imm.mu_hat = Some(outcome.fit.coef);
    Ok((naive, imm))
}

pub fn estimate_naive(ds: &Dataset, cfg: &EstimatorConfig) -> Result<AttEstimate> {
    let icpt = require_intercept(ds)?;
    let balance = iterate_beta_loadings(ds, cfg.link, &cfg.loadings)?;
    let stage = StageSummary::from_loading_fit(&balance, Some(icpt));
    let mut est = att_naive(ds, &balance.fit.coef, cfg.link, cfg.alpha)?;
    est.propensity_active = Some(stage.active);
    est.propensity_stage = Some(stage);
    est.beta_hat = Some(balance.fit.coef);
    Ok(est)
}

pub fn estimate_immunized(ds: &Dataset, cfg: &EstimatorConfig) -> Result<AttEstimate> {
    Ok(naive_and_immunized(ds, cfg)?.1)
}

/// Two-step GMM: unpenalized balancing, plug-in point estimate with `mu = 0`,
/// variance evaluated at the weighted-regression `mu`.
pub fn att_lowdim(ds: &Dataset, link: LinkSpec, alpha: f64, tol: f64, max_iter: usize) -> Result<AttEstimate> {
    let fit = fit_balancing_lowdim(ds, link, tol, max_iter)?;
    if !fit.converged {
        return Err(Error::Estimation(format!(
            "low-dimensional balancing fit did not converge: {}",
            fit.message.as_deref().unwrap_or("unknown reason")
        )));
    }
    let beta = fit.coef;
    let w = control_weights(ds, &beta, link)?;
    let design = ControlDesign::new(ds, &beta, link)?;
    let mu = fit_mu_lowdim_on(&design)?.coef;
    let offset = linear_index(ds, &mu);
    let zero = vec![0.0; ds.n()];
    let plug_in = moment_estimate(ds, &w, &zero, None, alpha, Method::Lowdim)?;
    let mut est = moment_estimate(ds, &w, offset.as_slice(), Some(plug_in.theta), alpha, Method::Lowdim)?;
    est.theta = plug_in.theta;
    let z = critical_value(alpha)?;
    est.ci_low = est.theta - z * est.se;
    est.ci_high = est.theta + z * est.se;
    est.propensity_active = Some(ds.p() - usize::from(ds.intercept_index().is_some()));
    est.beta_hat = Some(beta);
    est.mu_hat = Some(mu);
    Ok(est.with_weights(&w, ds))
}

pub fn estimate_lowdim(ds: &Dataset, cfg: &EstimatorConfig) -> Result<AttEstimate> {
    att_lowdim(ds, cfg.link, cfg.alpha, cfg.loadings.solver.tol, cfg.loadings.solver.max_iter)
}

/// Logit-Lasso propensity and unweighted control-only Lasso outcome model,
/// combined through the immunized formula with exponential weights.
pub fn att_farrell(ds: &Dataset, cfg: &EstimatorConfig) -> Result<AttEstimate> {
    let icpt = require_intercept(ds)?;
    let link = LinkSpec::exponential();
    let logit = iterate_logit_loadings(ds, &cfg.loadings)?;
    let stage_b = StageSummary::from_loading_fit(&logit, Some(icpt));
    let unweighted = ControlDesign::new(ds, &vec![0.0; ds.p()], link)?;
    let outcome = iterate_mu_loadings_on(ds, &unweighted, &cfg.loadings, cfg.mu_fits)?;
    let stage_m = StageSummary::from_loading_fit(&outcome, Some(icpt));
    let mut est = att_immunized(ds, &logit.fit.coef, &outcome.fit.coef, link, cfg.alpha)?;
    est.method = Method::Farrell;
    est.propensity_active = Some(stage_b.active);
    est.outcome_active = Some(stage_m.active);
    est.propensity_stage = Some(stage_b);
    est.outcome_stage = Some(stage_m);
    est.beta_hat = Some(logit.fit.coef);
    est.mu_hat = Some(outcome.fit.coef);
    Ok(est)
}

/// Heteroskedasticity-robust (HC1) least squares; returns coefficients and
/// their standard errors.
fn robust_ols(z: &DMatrix<f64>, y: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let (n, k) = z.shape();
    if n <= k {
        return Err(Error::Estimation(format!("{k} regressors but only {n} observations")));
    }
    let coef = solve_full_rank(z, y)?;
    let resid = y - z * &coef;
    let bread = spd_inverse(&(z.transpose() * z))?;
    let mut meat = DMatrix::zeros(k, k);
    for i in 0..n {
        let row = z.row(i).transpose();
        meat.ger(resid[i] * resid[i], &row, &row, 1.0);
    }
    let cov = &bread * meat * &bread * (n as f64 / (n - k) as f64);
    let se = DVector::from_iterator(k, (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()));
    Ok((coef, se))
}

/// Drops, in order, columns lying in the span of the columns kept before
/// them (relative residual norm below `1e-9`). `fixed` columns are always
/// kept first.
fn non_aliased(fixed: &[DVector<f64>], candidates: Vec<(usize, DVector<f64>)>) -> Result<Vec<usize>> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let reduce = |col: &DVector<f64>, basis: &[DVector<f64>]| {
        let mut v = col.clone();
        for _ in 0..2 {
            for q in basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        v
    };
    for (k, col) in fixed.iter().enumerate() {
        let v = reduce(col, &basis);
        let norm = v.norm();
        if norm <= 1e-9 * col.norm() || norm == 0.0 {
            return Err(Error::SingularGram { rank: k, dim: fixed.len() });
        }
        basis.push(v / norm);
    }
    let mut kept = Vec::new();
    for (j, col) in candidates {
        let v = reduce(&col, &basis);
        let norm = v.norm();
        if norm > 1e-9 * col.norm() && norm > 0.0 {
            basis.push(v / norm);
            kept.push(j);
        }
    }
    Ok(kept)
}

/// Regress `Y` on an intercept, `D` and the given covariate columns; the
/// estimate is the coefficient on `D`. Covariates collinear with earlier
/// regressors are dropped.
fn ols_on_columns(ds: &Dataset, cols: &[usize], alpha: f64, method: Method) -> Result<AttEstimate> {
    let n = ds.n();
    let ones = DVector::from_element(n, 1.0);
    let d = DVector::from_fn(n, |i, _| ds.d(i));
    let candidates = cols
        .iter()
        .copied()
        .filter(|&j| Some(j) != ds.intercept_index())
        .map(|j| (j, ds.x().column(j).into_owned()))
        .collect();
    let extra = non_aliased(&[ones, d], candidates)?;
    let k = 2 + extra.len();
    if n <= k + 1 {
        return Err(Error::Estimation(format!("{} regressors need more than {} observations", k, n)));
    }
    let mut z = DMatrix::zeros(n, k);
    for i in 0..n {
        z[(i, 0)] = 1.0;
        z[(i, 1)] = ds.d(i);
        for (c, &j) in extra.iter().enumerate() {
            z[(i, 2 + c)] = ds.x()[(i, j)];
        }
    }
    let (coef, se) = robust_ols(&z, ds.y())?;
    let root_n = (n as f64).sqrt();
    let mut est = AttEstimate::new(method, coef[1], se[1] * root_n, n, ds.n1(), alpha)?;
    est.outcome_active = Some(extra.len());
    Ok(est)
}

/// Least squares of `Y` on intercept, `D` and every covariate.
pub fn att_ols(ds: &Dataset, alpha: f64) -> Result<AttEstimate> {
    let cols: Vec<usize> = (0..ds.p()).collect();
    ols_on_columns(ds, &cols, alpha, Method::Ols)
}

/// Lasso of `target` on the covariates over the full sample, with the
/// outcome-step penalty level and iterated heteroskedastic loadings.
pub fn linear_lasso(ds: &Dataset, target: &[f64], cfg: &EstimatorConfig) -> Result<LoadingFit> {
    let icpt = require_intercept(ds)?;
    let n = ds.n() as f64;
    let loss = IndexLoss::new(ds.x(), 1.0 / n, SquaresKernel { y: target, weights: None });
    let mut init = vec![0.0; ds.p()];
    init[icpt] = target.iter().sum::<f64>() / n;
    let scale = (target.iter().map(|v| v * v).sum::<f64>() / n).sqrt().max(1.0);
    let solver = crate::solver::SolverOptions { tol: cfg.loadings.solver.tol * scale, ..cfg.loadings.solver.clone() };
    let lambda = lambda_level(ds.n(), ds.p(), cfg.loadings.gamma, cfg.loadings.c, true)?;
    let loadings_at = |coef: &[f64]| -> Result<Vec<f64>> {
        let fitted = linear_index(ds, coef);
        Ok((0..ds.p())
            .map(|j| {
                let s: f64 = ds
                    .x()
                    .column(j)
                    .iter()
                    .zip(target.iter().zip(fitted.iter()))
                    .map(|(x, (t, f))| ((t - f) * x).powi(2))
                    .sum();
                (s / n).sqrt()
            })
            .collect())
    };
    iterate_loadings(init, lambda, exempt_mask(ds), &cfg.loadings, cfg.mu_fits.saturating_sub(1), loadings_at, |plan, warm| {
        minimize_composite(&loss, plan, warm, &solver)
    })
}

/// Double selection: Lasso of `Y` on `X`, Lasso of `D` on `X`, then robust
/// least squares of `Y` on `D` and the union of selected columns.
pub fn att_double_selection(ds: &Dataset, cfg: &EstimatorConfig) -> Result<AttEstimate> {
    let icpt = require_intercept(ds)?;
    let y_fit = linear_lasso(ds, ds.y().as_slice(), cfg)?;
    let d: Vec<f64> = (0..ds.n()).map(|i| ds.d(i)).collect();
    let d_fit = linear_lasso(ds, &d, cfg)?;
    let mut union: Vec<usize> = y_fit
        .fit
        .active_set
        .iter()
        .chain(&d_fit.fit.active_set)
        .copied()
        .filter(|&j| j != icpt)
        .collect();
    union.sort_unstable();
    union.dedup();
    if ds.n() <= union.len() + 2 {
        return Err(Error::Estimation(format!(
            "union of selected covariates ({}) too large for n = {}",
            union.len(),
            ds.n()
        )));
    }
    let mut est = ols_on_columns(ds, &union, cfg.alpha, Method::DoubleSelection)?;
    let stage_d = StageSummary::from_loading_fit(&d_fit, Some(icpt));
    let stage_y = StageSummary::from_loading_fit(&y_fit, Some(icpt));
    est.propensity_active = Some(stage_d.active);
    est.outcome_active = Some(stage_y.active);
    est.propensity_stage = Some(stage_d);
    est.outcome_stage = Some(stage_y);
    Ok(est)
}

/// Runs `method` end to end. `Oracle` needs a column subset and is handled
/// by the simulation driver; here it falls back to `Lowdim`.
pub fn estimate(ds: &Dataset, method: Method, cfg: &EstimatorConfig) -> Result<AttEstimate> {
    match method {
        Method::Naive => estimate_naive(ds, cfg),
        Method::Immunized => estimate_immunized(ds, cfg),
        Method::Farrell => att_farrell(ds, cfg),
        Method::Lowdim | Method::Oracle => estimate_lowdim(ds, cfg).map(|mut e| {
            e.method = method;
            e
        }),
        Method::DoubleSelection => att_double_selection(ds, cfg),
        Method::Ols => att_ols(ds, cfg.alpha),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesPoint {
    pub period: String,
    pub estimate: Option<AttEstimate>,
    /// `mean(Y_t | D = 1) - theta_t`.
    pub counterfactual_level: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Series {
    pub points: Vec<SeriesPoint>,
    pub balancing: StageSummary,
    pub warnings: Vec<String>,
}

/// Immunized estimates for several outcome columns sharing one balancing
/// fit. A failing period is reported in its point and does not stop the
/// others.
pub fn counterfactual_series(ds_base: &Dataset, outcomes: &[(String, Vec<f64>)], cfg: &EstimatorConfig) -> Result<Series> {
    let icpt = require_intercept(ds_base)?;
    for (name, col) in outcomes {
        if col.len() != ds_base.n() {
            return Err(Error::Dimension(format!(
                "outcome `{name}` has {} rows, covariates have {}",
                col.len(),
                ds_base.n()
            )));
        }
    }
    let mut warnings = Vec::new();
    if ds_base.n1() == 1 {
        warnings.push(
            "single treated unit: the variance estimate rests on one treated residual".to_string(),
        );
    }
    let balance = iterate_beta_loadings(ds_base, cfg.link, &cfg.loadings)?;
    let beta = &balance.fit.coef;
    let stage_b = StageSummary::from_loading_fit(&balance, Some(icpt));
    let treated = ds_base.treated_rows();

    let points = outcomes
        .iter()
        .map(|(name, col)| {
            let run = || -> Result<AttEstimate> {
                let ds = ds_base.with_outcome(DVector::from_column_slice(col))?;
                let design = ControlDesign::new(&ds, beta, cfg.link)?;
                let outcome = iterate_mu_loadings_on(&ds, &design, &cfg.loadings, cfg.mu_fits)?;
                let stage_m = StageSummary::from_loading_fit(&outcome, Some(icpt));
                let mut est = att_immunized(&ds, beta, &outcome.fit.coef, cfg.link, cfg.alpha)?;
                est.propensity_active = Some(stage_b.active);
                est.outcome_active = Some(stage_m.active);
                est.outcome_stage = Some(stage_m);
                est.mu_hat = Some(outcome.fit.coef);
                Ok(est)
            };
            match run() {
                Ok(est) => {
                    let treated_mean = treated.iter().map(|&i| col[i]).sum::<f64>() / treated.len() as f64;
                    SeriesPoint {
                        period: name.clone(),
                        counterfactual_level: Some(treated_mean - est.theta),
                        estimate: Some(est),
                        error: None,
                    }
                }
                Err(e) => SeriesPoint { period: name.clone(), estimate: None, counterfactual_level: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(Series { points, balancing: stage_b, warnings })
}
