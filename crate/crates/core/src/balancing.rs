//! The balancing step.
//!
//! Loss `M(b) = (1/n) sum_i [(1 - D_i) H(x_i'b) - D_i x_i'b]`. Its stationary
//! points reweight the controls by `h(x_i'b)` so that their weighted
//! covariate sums match the treated sums exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, LossError, Result};
use crate::link::LinkSpec;
use crate::objective::{logistic_cdf, BalancingKernel, IndexLoss, LogisticKernel, SmoothLoss};
use crate::solver::{minimize_composite, FitResult, PenaltyPlan, SolverOptions};
use crate::stats::normal_quantile;

pub fn balancing_objective<'a>(ds: &'a Dataset, link: LinkSpec) -> IndexLoss<'a, BalancingKernel<'a>> {
    IndexLoss::new(ds.x(), 1.0 / ds.n() as f64, BalancingKernel { treated: ds.treated(), link })
}

pub fn logistic_objective(ds: &Dataset) -> IndexLoss<'_, LogisticKernel<'_>> {
    IndexLoss::new(ds.x(), 1.0 / ds.n() as f64, LogisticKernel { treated: ds.treated() })
}

/// Value and gradient of the balancing loss at `beta`.
pub fn balancing_loss(beta: &[f64], ds: &Dataset, link: LinkSpec) -> Result<(f64, Vec<f64>)> {
    check_dim(ds, beta)?;
    Ok(balancing_objective(ds, link).value_grad(beta)?)
}

fn check_dim(ds: &Dataset, v: &[f64]) -> Result<()> {
    if v.len() != ds.p() {
        return Err(Error::Dimension(format!("coefficient length {} but p = {}", v.len(), ds.p())));
    }
    Ok(())
}

pub(crate) fn linear_index(ds: &Dataset, coef: &[f64]) -> DVector<f64> {
    ds.x() * DVector::from_column_slice(coef)
}

/// Control weights `h(x_i'b)` (zero for treated rows).
pub fn control_weights(ds: &Dataset, beta: &[f64], link: LinkSpec) -> Result<Vec<f64>> {
    check_dim(ds, beta)?;
    let eta = linear_index(ds, beta);
    let mut w = vec![0.0; ds.n()];
    for i in 0..ds.n() {
        if !ds.treated()[i] {
            link.check(i, eta[i])?;
            w[i] = (link.h)(eta[i]);
        }
    }
    Ok(w)
}

/// Largest violation of the empirical balancing equations
/// `(1/n) sum_i [D_i - (1 - D_i) h(x_i'b)] x_i = 0`.
pub fn balance_violation(ds: &Dataset, beta: &[f64], link: LinkSpec) -> Result<f64> {
    let (_, grad) = balancing_loss(beta, ds, link)?;
    Ok(grad.iter().fold(0.0, |m, g| m.max(g.abs())))
}

fn column_loadings(ds: &Dataset, resid: &[f64]) -> Vec<f64> {
    let n = ds.n() as f64;
    (0..ds.p())
        .map(|j| {
            let s: f64 = ds.x().column(j).iter().zip(resid).map(|(x, r)| (r * x).powi(2)).sum();
            (s / n).sqrt()
        })
        .collect()
}

/// `psi_j = sqrt((1/n) sum_i [(1 - D_i) h(x_i'b) - D_i]^2 x_ij^2)`.
pub fn beta_loadings(ds: &Dataset, beta: &[f64], link: LinkSpec) -> Result<Vec<f64>> {
    let w = control_weights(ds, beta, link)?;
    let resid: Vec<f64> = (0..ds.n()).map(|i| w[i] - ds.d(i)).collect();
    Ok(column_loadings(ds, &resid))
}

/// Logistic-score analogue of [`beta_loadings`], residual `D_i - Lambda(x_i'b)`.
pub fn logit_loadings(ds: &Dataset, beta: &[f64]) -> Result<Vec<f64>> {
    check_dim(ds, beta)?;
    let eta = linear_index(ds, beta);
    let resid: Vec<f64> = (0..ds.n()).map(|i| ds.d(i) - logistic_cdf(eta[i])).collect();
    Ok(column_loadings(ds, &resid))
}

/// `lambda = c * Phi^{-1}(1 - gamma / 2p) / sqrt(n)`, doubled for the outcome
/// step (`prime = true`).
pub fn lambda_level(n: usize, p: usize, gamma: f64, c: f64, prime: bool) -> Result<f64> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidParameter(format!("need n >= 1 and p >= 1, got n = {n}, p = {p}")));
    }
    let tail = gamma / (2.0 * p as f64);
    if !(tail > 0.0 && tail < 1.0) {
        return Err(Error::InvalidParameter(format!("gamma / 2p must lie in (0, 1), got {tail}")));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidParameter(format!("c must be positive, got {c}")));
    }
    let base = c * normal_quantile(1.0 - tail) / (n as f64).sqrt();
    Ok(if prime { 2.0 * base } else { base })
}

/// Settings for the data-driven penalty loadings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingOptions {
    pub gamma: f64,
    pub c: f64,
    /// Stop once the sup-norm change in loadings is at most `eps`.
    pub eps: f64,
    /// Maximum number of refits after the initial fit.
    pub k0: usize,
    pub solver: SolverOptions,
}

impl Default for LoadingOptions {
    fn default() -> Self {
        Self { gamma: 0.05, c: 1.1, eps: 1e-4, k0: 15, solver: SolverOptions::default() }
    }
}

/// Outcome of a loading iteration: the final plan and the fit obtained with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingFit {
    pub plan: PenaltyPlan,
    pub fit: FitResult,
    /// Number of refits after the initial fit.
    pub iterations: usize,
    /// Sup-norm change in loadings at each refit.
    pub changes: Vec<f64>,
    pub loadings_converged: bool,
}

pub(crate) fn exempt_mask(ds: &Dataset) -> Vec<bool> {
    let mut mask = vec![false; ds.p()];
    if let Some(j) = ds.intercept_index() {
        mask[j] = true;
    }
    mask
}

/// Runs the loading iteration: loadings at the current coefficients, refit,
/// repeat until the loadings settle or `k0` refits have been made. Each refit
/// warm-starts from the previous solution.
pub(crate) fn iterate_loadings<L, F>(
    init: Vec<f64>,
    lambda: f64,
    exempt: Vec<bool>,
    opts: &LoadingOptions,
    max_refits: usize,
    loadings_at: L,
    fit_with: F,
) -> Result<LoadingFit>
where
    L: Fn(&[f64]) -> Result<Vec<f64>>,
    F: Fn(&PenaltyPlan, &[f64]) -> Result<FitResult>,
{
    let wrap = |iteration: usize| move |e: Error| Error::LoadingIteration { iteration, source: Box::new(e) };
    let mut plan = PenaltyPlan {
        lambda,
        loadings: loadings_at(&init).map_err(wrap(0))?,
        c: opts.c,
        gamma: opts.gamma,
        exempt,
    };
    let mut fit = fit_with(&plan, &init).map_err(wrap(0))?;
    let mut changes = Vec::new();
    let mut k = 0;
    let mut settled = false;
    while k < max_refits {
        k += 1;
        let next = loadings_at(&fit.coef).map_err(wrap(k))?;
        let change = next.iter().zip(&plan.loadings).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
        changes.push(change);
        plan.loadings = next;
        let warm = fit.coef.clone();
        fit = fit_with(&plan, &warm).map_err(wrap(k))?;
        if change <= opts.eps {
            settled = true;
            break;
        }
    }
    Ok(LoadingFit { plan, fit, iterations: k, changes, loadings_converged: settled })
}

fn intercept_start(ds: &Dataset) -> Result<Vec<f64>> {
    let j = ds.intercept_index().ok_or(Error::NoIntercept)?;
    let mut beta = vec![0.0; ds.p()];
    beta[j] = (ds.n1() as f64 / ds.n0() as f64).ln();
    Ok(beta)
}

/// Penalized balancing program from `init`.
pub fn fit_balancing_penalized(
    ds: &Dataset,
    link: LinkSpec,
    plan: &PenaltyPlan,
    init: &[f64],
    solver: &SolverOptions,
) -> Result<FitResult> {
    check_dim(ds, init)?;
    minimize_composite(&balancing_objective(ds, link), plan, init, solver)
}

/// Balancing step with iterated data-driven loadings, starting from the
/// intercept-only point `log(n1 / n0)`.
pub fn iterate_beta_loadings(ds: &Dataset, link: LinkSpec, opts: &LoadingOptions) -> Result<LoadingFit> {
    let init = intercept_start(ds)?;
    let lambda = lambda_level(ds.n(), ds.p(), opts.gamma, opts.c, false)?;
    iterate_loadings(
        init,
        lambda,
        exempt_mask(ds),
        opts,
        opts.k0,
        |b| beta_loadings(ds, b, link),
        |plan, warm| fit_balancing_penalized(ds, link, plan, warm, &opts.solver),
    )
}

/// Logit Lasso: average logistic negative log-likelihood plus weighted l1.
pub fn logit_lasso_fit(ds: &Dataset, plan: &PenaltyPlan, init: &[f64], solver: &SolverOptions) -> Result<FitResult> {
    check_dim(ds, init)?;
    minimize_composite(&logistic_objective(ds), plan, init, solver)
}

pub fn iterate_logit_loadings(ds: &Dataset, opts: &LoadingOptions) -> Result<LoadingFit> {
    let init = intercept_start(ds)?;
    let lambda = lambda_level(ds.n(), ds.p(), opts.gamma, opts.c, false)?;
    iterate_loadings(
        init,
        lambda,
        exempt_mask(ds),
        opts,
        opts.k0,
        |b| logit_loadings(ds, b),
        |plan, warm| logit_lasso_fit(ds, plan, warm, &opts.solver),
    )
}

const NEWTON_CAP: usize = 200;

/// Unpenalized balancing program, solved by damped Newton.
///
/// Reports `converged = false` with a diagnostic when the objective is
/// unbounded below (some covariate direction separates treated from
/// controls) or the Hessian is singular.
pub fn fit_balancing_lowdim(ds: &Dataset, link: LinkSpec, tol: f64, max_iter: usize) -> Result<FitResult> {
    let loss = balancing_objective(ds, link);
    let p = ds.p();
    let mut beta = match ds.intercept_index() {
        Some(_) => intercept_start(ds)?,
        None => vec![0.0; p],
    };
    let (mut f, mut g) = loss.value_grad(&beta)?;
    let sup = |g: &[f64]| g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cap = max_iter.min(NEWTON_CAP);
    let controls = ds.control_rows();
    let n = ds.n() as f64;
    let mut polish = 0;

    for it in 1..=cap {
        if sup(&g) <= tol {
            polish += 1;
            if polish > 2 || sup(&g) == 0.0 {
                return Ok(FitResult::from_coef(beta, f, sup(&g), it - 1, true, None));
            }
        }
        let eta = linear_index(ds, &beta);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for &i in &controls {
            let w = (link.h_prime)(eta[i]) / n;
            let row = ds.x().row(i);
            hess.ger(w, &row.transpose(), &row.transpose(), 1.0);
        }
        let Some(chol) = hess.cholesky() else {
            return Ok(FitResult::from_coef(
                beta,
                f,
                sup(&g),
                it - 1,
                sup(&g) <= tol,
                Some("singular Hessian of the balancing loss".into()),
            ));
        };
        let dir = -chol.solve(&DVector::from_column_slice(&g));
        let slope: f64 = dir.iter().zip(&g).map(|(d, gj)| d * gj).sum();
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-14 {
            let cand: Vec<f64> = beta.iter().zip(dir.iter()).map(|(b, d)| b + step * d).collect();
            match loss.value_grad(&cand) {
                Ok((fc, gc)) if fc <= f + 1e-4 * step * slope || (fc <= f && sup(&gc) < sup(&g)) => {
                    accepted = Some((cand, fc, gc));
                    break;
                }
                Ok(_) | Err(LossError::NonFinite) | Err(LossError::Overflow { .. }) => step *= 0.5,
            }
        }
        match accepted {
            Some((cand, fc, gc)) => {
                beta = cand;
                f = fc;
                g = gc;
            }
            None => {
                let kkt = sup(&g);
                return Ok(FitResult::from_coef(
                    beta,
                    f,
                    kkt,
                    it,
                    kkt <= tol,
                    (kkt > tol).then(|| "Newton line search failed".to_string()),
                ));
            }
        }
    }
    let kkt = sup(&g);
    let converged = kkt <= tol;
    let message = (!converged).then(|| {
        let max_index = linear_index(ds, &beta).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        format!("no convergence after {cap} Newton steps; objective may be unbounded below (separation), max |x'b| = {max_index:.1}")
    });
    Ok(FitResult::from_coef(beta, f, kkt, cap, converged, message))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::add_intercept;

    fn intercept_only(n1: usize, n0: usize) -> Dataset {
        let n = n1 + n0;
        let d: Vec<f64> = (0..n).map(|i| if i < n1 { 1.0 } else { 0.0 }).collect();
        let y = DVector::from_iterator(n, (0..n).map(|i| i as f64));
        let ds = Dataset::new(y, &d, DMatrix::zeros(n, 0), vec![]).unwrap();
        add_intercept(&ds).unwrap()
    }

    #[test]
    fn loss_at_zero() {
        let ds = intercept_only(3, 7);
        let (v, g) = balancing_loss(&[0.0], &ds, LinkSpec::exponential()).unwrap();
        assert!((v - 0.7).abs() < 1e-15);
        assert!((g[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn overflow_guard_reports_magnitude() {
        let ds = intercept_only(3, 7);
        let err = balancing_loss(&[701.0], &ds, LinkSpec::exponential()).unwrap_err();
        assert!(err.to_string().contains("exceeds guard"), "{err}");
    }

    #[test]
    fn lowdim_intercept_closed_form() {
        let ds = intercept_only(30, 70);
        let fit = fit_balancing_lowdim(&ds, LinkSpec::exponential(), 1e-7, 100).unwrap();
        assert!(fit.converged);
        assert!((fit.coef[0] - (30.0f64 / 70.0).ln()).abs() < 1e-12);
        assert!((fit.coef[0] + 0.84730).abs() < 1e-5);
        let ds = intercept_only(10, 10);
        let fit = fit_balancing_lowdim(&ds, LinkSpec::exponential(), 1e-7, 100).unwrap();
        assert!(fit.coef[0].abs() < 1e-14);
    }

    #[test]
    fn loadings_worked_example() {
        // D = (1,0,0), X_j = (1,2,0), weights h = 1 on the controls
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 0.0]);
        let ds = Dataset::new(DVector::zeros(3), &[1.0, 0.0, 0.0], x, vec!["one".into(), "xj".into()]).unwrap();
        let psi = beta_loadings(&ds, &[0.0, 0.0], LinkSpec::exponential()).unwrap();
        assert!((psi[1] - (5.0f64 / 3.0).sqrt()).abs() < 1e-14);
        assert!((psi[1] - 1.29099).abs() < 1e-5);
    }

    #[test]
    fn zero_column_has_zero_loading() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let ds = Dataset::new(DVector::zeros(3), &[1.0, 0.0, 0.0], x, vec!["a".into(), "z".into()]).unwrap();
        let psi = beta_loadings(&ds, &[0.3, 0.0], LinkSpec::exponential()).unwrap();
        assert_eq!(psi[1], 0.0);
    }

    #[test]
    fn lambda_formula() {
        // Phi^{-1}(0.9975) = 2.807033768343811 (frozen from an independent quantile routine)
        let lam = lambda_level(100, 10, 0.05, 1.1, false).unwrap();
        assert!((lam - 1.1 * 2.807033768343811 / 10.0).abs() < 1e-12);
        assert!((lam - 0.308773).abs() < 1e-5);
        let prime = lambda_level(100, 10, 0.05, 1.1, true).unwrap();
        assert_eq!(prime, 2.0 * lam);
        let quarter = lambda_level(400, 10, 0.05, 1.1, false).unwrap();
        assert!((quarter - lam / 2.0).abs() < 1e-15);
        assert!(lambda_level(100, 1, 2.0, 1.1, false).is_err());
    }

    #[test]
    fn constant_design_settles_immediately() {
        let ds = intercept_only(12, 20);
        let out = iterate_beta_loadings(&ds, LinkSpec::exponential(), &LoadingOptions::default()).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.loadings_converged);
        assert!((out.fit.coef[0] - (12.0f64 / 20.0).ln()).abs() < 1e-6);
    }

    #[test]
    fn logit_intercept_only() {
        let ds = intercept_only(12, 20);
        let plan = PenaltyPlan { lambda: 5.0, loadings: vec![1.0], c: 1.1, gamma: 0.05, exempt: vec![true] };
        let fit = logit_lasso_fit(&ds, &plan, &[0.0], &SolverOptions { tol: 1e-10, ..Default::default() }).unwrap();
        assert!((fit.coef[0] - (12.0f64 / 20.0).ln()).abs() < 1e-8);
    }
}
