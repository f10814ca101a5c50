//! Monte Carlo design with sparse logistic treatment and exponential outcome.
//!
//! Covariates are `N(0, S)` with `S_ij = 0.5^|i-j|`. Treatment follows
//! `P(D = 1 | X) = Lambda(X'gamma0)`; potential outcomes are
//! `Y(d) = exp(X'mu0) + d * zeta0 * X'gamma0 + eps`, `eps ~ N(0, 1)`.
//! `gamma0` is nonzero on the first ten coordinates, `mu0` on the first and
//! last ten.
//!
//! Every replication draws from its own ChaCha8 stream keyed by
//! `(base_seed, n, p)` with the replication index as stream id, so results
//! do not depend on scheduling or thread count.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use gauss_quad::GaussHermite;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{add_intercept, ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{self, naive_and_immunized, AttEstimate, EstimatorConfig, Method};
use crate::objective::logistic_cdf;
use crate::stats::solve_full_rank;

/// Latent-index variance giving a 0.3 share against the logistic error
/// variance `pi^2 / 3`.
pub fn latent_target() -> f64 {
    (0.3 / 0.7) * PI * PI / 3.0
}

/// `s^2` with `Var(exp(Z)) = 4` for `Z ~ N(0, s^2)`: solves
/// `(e^{s^2} - 1) e^{s^2} = 4`.
pub fn outcome_index_variance() -> f64 {
    ((1.0 + 17f64.sqrt()) / 2.0).ln()
}

/// How `zeta0` (the treatment-effect heterogeneity scale) is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZetaConvention {
    /// `zeta0 = sqrt(Var(exp(X'mu0)) / (5 Var(Y(0))))`.
    Printed,
    /// `Var(zeta0 X'gamma0) = Var(Y(0)) / 5`.
    FifthOfVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeModel {
    /// `exp(X'mu0)`.
    Exponential,
    /// `X'mu0 * sqrt(Var(exp) / Var(X'mu0))`, same variance as the exponential model.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityModel {
    /// `Lambda(X'gamma0)`.
    Logistic,
    /// `Lambda(X'gamma0 + 0.5 (X_1^2 - 1) - 0.5 (X_2^2 - 1) + 0.5 X_1 X_3)`: not a
    /// function of any single linear index.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub p: usize,
    pub gamma0: Vec<f64>,
    pub mu0: Vec<f64>,
    pub rho_gamma: f64,
    pub rho_mu: f64,
    pub zeta0: f64,
    pub theta0: f64,
    pub convention: ZetaConvention,
    pub outcome: OutcomeModel,
    pub propensity: PropensityModel,
    /// Seed for auxiliary Monte Carlo integrals (true ATT under
    /// misspecification, population nuisance targets).
    pub seed: u64,
}

/// Unscaled coefficient patterns, 1-based `j`:
/// `g_j = (-1)^j / j^2` for `j <= 10`; `m_j` equals `g_j` there and
/// `(-1)^{j+1} / (p - j + 1)^2` for `j >= p - 9`.
pub fn base_patterns(p: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if p < 20 {
        return Err(Error::InvalidParameter(format!("p must be at least 20, got {p}")));
    }
    let sign = |k: usize| if k % 2 == 0 { 1.0 } else { -1.0 };
    let mut g = vec![0.0; p];
    let mut m = vec![0.0; p];
    for j in 1..=p {
        if j <= 10 {
            g[j - 1] = sign(j) / (j * j) as f64;
            m[j - 1] = g[j - 1];
        } else if j + 9 >= p {
            let k = p - j + 1;
            m[j - 1] = sign(j + 1) / (k * k) as f64;
        }
    }
    Ok((g, m))
}

/// `v' S v` for the AR(0.5) covariance.
pub fn ar_quadratic_form(v: &[f64]) -> f64 {
    let nz: Vec<(usize, f64)> = v.iter().copied().enumerate().filter(|(_, x)| *x != 0.0).collect();
    let mut total = 0.0;
    for &(i, a) in &nz {
        for &(j, b) in &nz {
            total += a * b * 0.5f64.powi((i as i32 - j as i32).abs());
        }
    }
    total
}

/// Calibrated design with the default logistic/exponential models.
pub fn calibrate(p: usize, convention: ZetaConvention) -> Result<DgpSpec> {
    calibrate_with(p, convention, OutcomeModel::Exponential, PropensityModel::Logistic, 0)
}

pub fn calibrate_with(
    p: usize,
    convention: ZetaConvention,
    outcome: OutcomeModel,
    propensity: PropensityModel,
    seed: u64,
) -> Result<DgpSpec> {
    let (g, m) = base_patterns(p)?;
    let target = latent_target();
    let rho_gamma = (target / ar_quadratic_form(&g)).sqrt();
    let s2 = outcome_index_variance();
    let rho_mu = (s2 / ar_quadratic_form(&m)).sqrt();
    let var_exp = (s2.exp() - 1.0) * s2.exp();
    let var_y0 = var_exp + 1.0;
    let zeta0 = match convention {
        ZetaConvention::Printed => (var_exp / (5.0 * var_y0)).sqrt(),
        ZetaConvention::FifthOfVariance => (var_y0 / (5.0 * target)).sqrt(),
    };
    let mut spec = DgpSpec {
        p,
        gamma0: g.iter().map(|v| v * rho_gamma).collect(),
        mu0: m.iter().map(|v| v * rho_mu).collect(),
        rho_gamma,
        rho_mu,
        zeta0,
        theta0: f64::NAN,
        convention,
        outcome,
        propensity,
        seed,
    };
    spec.theta0 = match propensity {
        PropensityModel::Logistic => true_att(&spec, TrueAttMethod::Quadrature)?.value,
        PropensityModel::Nonlinear => true_att(&spec, TrueAttMethod::MonteCarlo { draws: 400_000 })?.value,
    };
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrueAttMethod {
    Quadrature,
    MonteCarlo { draws: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrueAtt {
    pub value: f64,
    /// Monte Carlo standard error; zero for quadrature.
    pub std_error: f64,
}

const QUADRATURE_NODES: usize = 96;

/// `E[Z Lambda(Z)]` for `Z ~ N(0, var)` by Gauss-Hermite quadrature.
pub fn expected_z_logistic(var: f64) -> f64 {
    let rule = GaussHermite::new(NonZeroUsize::new(QUADRATURE_NODES).unwrap());
    let scale = (2.0 * var).sqrt();
    rule.integrate(|x| {
        let z = scale * x;
        z * logistic_cdf(z)
    }) / PI.sqrt()
}

/// True ATT. With the logistic propensity,
/// `theta0 = zeta0 E[Z Lambda(Z)] / E[Lambda(Z)]`, `Z ~ N(0, gamma0' S gamma0)`,
/// and `E[Lambda(Z)] = 1/2` by symmetry. With the nonlinear propensity only
/// the Monte Carlo route applies: `E[pi(X) tau(X)] / E[pi(X)]`.
pub fn true_att(spec: &DgpSpec, method: TrueAttMethod) -> Result<TrueAtt> {
    let var = ar_quadratic_form(&spec.gamma0);
    match (method, spec.propensity) {
        (TrueAttMethod::Quadrature, PropensityModel::Logistic) => {
            Ok(TrueAtt { value: 2.0 * spec.zeta0 * expected_z_logistic(var), std_error: 0.0 })
        }
        (TrueAttMethod::Quadrature, PropensityModel::Nonlinear) => Err(Error::InvalidParameter(
            "quadrature true ATT requires the logistic propensity model".into(),
        )),
        (TrueAttMethod::MonteCarlo { draws }, _) => {
            if draws < 1000 {
                return Err(Error::InvalidParameter(format!("need at least 1000 draws, got {draws}")));
            }
            let mut rng = stream(spec.seed, 0, spec.p as u64, AUX_TRUE_ATT);
            match spec.propensity {
                PropensityModel::Logistic => {
                    let sd = var.sqrt();
                    let mut sum = 0.0;
                    let mut sum2 = 0.0;
                    for _ in 0..draws {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        let z = sd * e;
                        let v = 2.0 * spec.zeta0 * z * logistic_cdf(z);
                        sum += v;
                        sum2 += v * v;
                    }
                    let mean = sum / draws as f64;
                    let var_v = (sum2 / draws as f64 - mean * mean).max(0.0);
                    Ok(TrueAtt { value: mean, std_error: (var_v / draws as f64).sqrt() })
                }
                PropensityModel::Nonlinear => {
                    let mut x = vec![0.0; spec.p];
                    let (mut s_pt, mut s_p, mut s_pt2, mut s_p2, mut s_cross) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for _ in 0..draws {
                        draw_covariates(&mut rng, &mut x);
                        let idx = dot(&x, &spec.gamma0);
                        let prob = propensity(spec, &x, idx);
                        let tau = spec.zeta0 * idx;
                        s_pt += prob * tau;
                        s_p += prob;
                        s_pt2 += (prob * tau).powi(2);
                        s_p2 += prob * prob;
                        s_cross += prob * tau * prob;
                    }
                    let nd = draws as f64;
                    let (a, b) = (s_pt / nd, s_p / nd);
                    let ratio = a / b;
                    // delta method for a ratio of means
                    let var_a = s_pt2 / nd - a * a;
                    let var_b = s_p2 / nd - b * b;
                    let cov = s_cross / nd - a * b;
                    let var_r = (var_a - 2.0 * ratio * cov + ratio * ratio * var_b) / (b * b);
                    Ok(TrueAtt { value: ratio, std_error: (var_r.max(0.0) / nd).sqrt() })
                }
            }
        }
    }
}

const AUX_TRUE_ATT: u64 = 0x7472_7565;
const AUX_TARGETS: u64 = 0x7461_7267;

/// Generator for `(key, n, p)` on stream `id`. The 32-byte ChaCha key is
/// `key || n || p || 0` in little-endian 64-bit words.
pub fn stream(key: u64, n: u64, p: u64, id: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&key.to_le_bytes());
    seed[8..16].copy_from_slice(&n.to_le_bytes());
    seed[16..24].copy_from_slice(&p.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(id);
    rng
}

/// AR(1) recursion: exact draw from `N(0, S)`, `S_ij = 0.5^|i-j|`.
fn draw_covariates(rng: &mut ChaCha8Rng, x: &mut [f64]) {
    let innov = 0.75f64.sqrt();
    let mut prev = 0.0;
    for (j, xj) in x.iter_mut().enumerate() {
        let e: f64 = StandardNormal.sample(rng);
        *xj = if j == 0 { e } else { 0.5 * prev + innov * e };
        prev = *xj;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn propensity(spec: &DgpSpec, x: &[f64], index: f64) -> f64 {
    match spec.propensity {
        PropensityModel::Logistic => logistic_cdf(index),
        PropensityModel::Nonlinear => {
            let extra = 0.5 * (x[0] * x[0] - 1.0) - 0.5 * (x[1] * x[1] - 1.0) + 0.5 * x[0] * x[2];
            logistic_cdf(index + extra)
        }
    }
}

fn outcome_mean(spec: &DgpSpec, x: &[f64]) -> f64 {
    let idx = dot(x, &spec.mu0);
    match spec.outcome {
        OutcomeModel::Exponential => idx.exp(),
        OutcomeModel::Linear => {
            let s2 = outcome_index_variance();
            let var_exp = (s2.exp() - 1.0) * s2.exp();
            idx * (var_exp / s2).sqrt()
        }
    }
}

/// One sample of size `n` with an intercept column prepended.
pub fn draw_sample(spec: &DgpSpec, n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidParameter(format!("n must be at least 2, got {n}")));
    }
    let p = spec.p;
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut d = vec![0.0; n];
    let mut row = vec![0.0; p];
    for i in 0..n {
        draw_covariates(rng, &mut row);
        let idx = dot(&row, &spec.gamma0);
        let u: f64 = rng.random();
        let treated = u < propensity(spec, &row, idx);
        let eps: f64 = StandardNormal.sample(rng);
        d[i] = if treated { 1.0 } else { 0.0 };
        y[i] = outcome_mean(spec, &row) + if treated { spec.zeta0 * idx } else { 0.0 } + eps;
        for j in 0..p {
            x[(i, j)] = row[j];
        }
    }
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    let ds = Dataset::with_kinds(y, &d, x, names, vec![ColumnKind::Continuous; p])?;
    add_intercept(&ds)
}

/// Population nuisance values (intercept first) the first-step estimators
/// aim at: `beta0` is `(0, gamma0)`; `mu` targets are the weighted
/// projections of `Y(0)` on `(1, X)` among controls, with odds weights for
/// the balancing route and unit weights for the unweighted route.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceTargets {
    pub beta: Vec<f64>,
    pub mu_weighted: Option<Vec<f64>>,
    pub mu_unweighted: Option<Vec<f64>>,
}

/// Largest `p` for which the outcome projections are integrated.
pub const MAX_PROJECTION_DIM: usize = 100;

pub fn nuisance_targets(spec: &DgpSpec, draws: usize) -> Result<NuisanceTargets> {
    let mut beta = vec![0.0];
    beta.extend_from_slice(&spec.gamma0);
    if spec.p > MAX_PROJECTION_DIM || spec.propensity != PropensityModel::Logistic {
        return Ok(NuisanceTargets { beta, mu_weighted: None, mu_unweighted: None });
    }
    let k = spec.p + 1;
    let mut rng = stream(spec.seed, 0, spec.p as u64, AUX_TARGETS);
    let mut gw = DMatrix::zeros(k, k);
    let mut bw = DVector::zeros(k);
    let mut gu = DMatrix::zeros(k, k);
    let mut bu = DVector::zeros(k);
    let mut x = vec![0.0; spec.p];
    let mut z = DVector::zeros(k);
    for _ in 0..draws {
        draw_covariates(&mut rng, &mut x);
        z[0] = 1.0;
        for j in 0..spec.p {
            z[j + 1] = x[j];
        }
        let lam = logistic_cdf(dot(&x, &spec.gamma0));
        let m = outcome_mean(spec, &x);
        // E[(1-D) e^{x'g} | X] = Lambda, E[(1-D) | X] = 1 - Lambda
        gw.ger(lam, &z, &z, 1.0);
        bw.axpy(lam * m, &z, 1.0);
        gu.ger(1.0 - lam, &z, &z, 1.0);
        bu.axpy((1.0 - lam) * m, &z, 1.0);
    }
    let mw = solve_full_rank(&gw, &bw)?;
    let mu = solve_full_rank(&gu, &bu)?;
    Ok(NuisanceTargets {
        beta,
        mu_weighted: Some(mw.iter().copied().collect()),
        mu_unweighted: Some(mu.iter().copied().collect()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyOptions {
    pub convention: ZetaConvention,
    pub outcome: OutcomeModel,
    pub propensity: PropensityModel,
    pub estimator: EstimatorConfig,
    /// Worker threads; 0 or 1 runs sequentially.
    pub jobs: usize,
    /// Draws used to integrate the population nuisance targets; 0 skips them.
    pub target_draws: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            convention: ZetaConvention::Printed,
            outcome: OutcomeModel::Exponential,
            propensity: PropensityModel::Logistic,
            estimator: EstimatorConfig::default(),
            jobs: 1,
            target_draws: 0,
        }
    }
}

/// Result of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Draw {
    pub theta: f64,
    pub se: f64,
    pub covered: bool,
    pub converged: bool,
    pub l1_beta: Option<f64>,
    pub l1_mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub n: usize,
    pub p: usize,
    pub estimator: Method,
    pub theta0: f64,
    pub replications: usize,
    pub failures: usize,
    pub nonconverged: usize,
    pub rmse: f64,
    pub bias: f64,
    pub coverage: f64,
    pub mean_theta: f64,
    pub sd_theta: f64,
    pub mean_se: f64,
    pub l1_beta: Option<f64>,
    pub l1_mu: Option<f64>,
    #[serde(skip)]
    pub draws: Vec<Draw>,
    #[serde(skip)]
    pub errors: Vec<String>,
}

impl ReportRow {
    /// Monte Carlo standard error of `mean_theta`.
    pub fn mc_std_error(&self) -> f64 {
        self.sd_theta / (self.replications as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    pub rows: Vec<ReportRow>,
}

impl SimulationReport {
    pub fn row(&self, n: usize, p: usize, method: Method) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.n == n && r.p == p && r.estimator == method)
    }
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn oracle_columns(p: usize) -> Vec<usize> {
    // intercept plus x1..x10
    (0..=10.min(p)).collect()
}

fn stage_converged(est: &AttEstimate) -> bool {
    est.propensity_stage.as_ref().is_none_or(|s| s.converged) && est.outcome_stage.as_ref().is_none_or(|s| s.converged)
}

fn run_replication(
    spec: &DgpSpec,
    n: usize,
    methods: &[Method],
    targets: &NuisanceTargets,
    cfg: &EstimatorConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<std::result::Result<Draw, String>> {
    let ds = match draw_sample(spec, n, rng) {
        Ok(ds) => ds,
        Err(e) => return methods.iter().map(|_| Err(e.to_string())).collect(),
    };
    let to_draw = |est: &AttEstimate, beta_target: Option<&[f64]>, mu_target: Option<&[f64]>| Draw {
        theta: est.theta,
        se: est.se,
        covered: est.covers(spec.theta0),
        converged: stage_converged(est),
        l1_beta: est.beta_hat.as_deref().zip(beta_target).map(|(a, b)| l1_distance(a, b)),
        l1_mu: est.mu_hat.as_deref().zip(mu_target).map(|(a, b)| l1_distance(a, b)),
    };
    let needs_pair = methods.contains(&Method::Naive) || methods.contains(&Method::Immunized);
    let pair = needs_pair.then(|| naive_and_immunized(&ds, cfg).map_err(|e| e.to_string()));
    let mu_w = targets.mu_weighted.as_deref();
    let mu_u = targets.mu_unweighted.as_deref();
    methods
        .iter()
        .map(|&m| match m {
            Method::Naive => pair.as_ref().unwrap().as_ref().map(|(nv, _)| to_draw(nv, Some(&targets.beta), None)).map_err(Clone::clone),
            Method::Immunized => {
                pair.as_ref().unwrap().as_ref().map(|(_, im)| to_draw(im, Some(&targets.beta), mu_w)).map_err(Clone::clone)
            }
            Method::Farrell => estimators::att_farrell(&ds, cfg).map(|e| to_draw(&e, Some(&targets.beta), mu_u)).map_err(|e| e.to_string()),
            Method::Oracle => {
                let cols = oracle_columns(spec.p);
                let beta_target: Vec<f64> = cols.iter().map(|&j| targets.beta[j]).collect();
                ds.select_columns(&cols)
                    .and_then(|sub| estimators::estimate(&sub, Method::Oracle, cfg))
                    .map(|e| to_draw(&e, Some(&beta_target), None))
                    .map_err(|e| e.to_string())
            }
            other => estimators::estimate(&ds, other, cfg).map(|e| to_draw(&e, None, None)).map_err(|e| e.to_string()),
        })
        .collect()
}

fn aggregate(n: usize, p: usize, method: Method, theta0: f64, results: Vec<std::result::Result<Draw, String>>) -> ReportRow {
    let mut draws = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(d) => draws.push(d),
            Err(e) => errors.push(e),
        }
    }
    let k = draws.len() as f64;
    let mean = |f: &dyn Fn(&Draw) -> f64| draws.iter().map(f).sum::<f64>() / k;
    let mean_theta = mean(&|d| d.theta);
    let sd_theta = if draws.len() > 1 {
        (draws.iter().map(|d| (d.theta - mean_theta).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    let mean_opt = |f: &dyn Fn(&Draw) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = draws.iter().filter_map(f).collect();
        (!vals.is_empty() && vals.len() == draws.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    ReportRow {
        n,
        p,
        estimator: method,
        theta0,
        replications: draws.len(),
        failures: errors.len(),
        nonconverged: draws.iter().filter(|d| !d.converged).count(),
        rmse: mean(&|d| (d.theta - theta0).powi(2)).sqrt(),
        bias: mean_theta - theta0,
        coverage: mean(&|d| if d.covered { 1.0 } else { 0.0 }),
        mean_theta,
        sd_theta,
        mean_se: mean(&|d| d.se),
        l1_beta: mean_opt(&|d| d.l1_beta),
        l1_mu: mean_opt(&|d| d.l1_mu),
        draws,
        errors,
    }
}

/// Runs every estimator on `replications` samples for each grid point.
pub fn run_study(
    grid: &[GridPoint],
    methods: &[Method],
    replications: usize,
    base_seed: u64,
    opts: &StudyOptions,
) -> Result<SimulationReport> {
    if replications == 0 {
        return Err(Error::InvalidParameter("replications must be at least 1".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidParameter("no estimators requested".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    let mut rows = Vec::new();
    for gp in grid {
        let spec = calibrate_with(gp.p, opts.convention, opts.outcome, opts.propensity, base_seed)?;
        let targets = if opts.target_draws > 0 {
            nuisance_targets(&spec, opts.target_draws)?
        } else {
            let mut beta = vec![0.0];
            beta.extend_from_slice(&spec.gamma0);
            NuisanceTargets { beta, mu_weighted: None, mu_unweighted: None }
        };
        let run = |r: usize| {
            let mut rng = stream(base_seed, gp.n as u64, gp.p as u64, r as u64);
            run_replication(&spec, gp.n, methods, &targets, &opts.estimator, &mut rng)
        };
        let per_rep: Vec<Vec<std::result::Result<Draw, String>>> = if opts.jobs > 1 {
            pool.install(|| (0..replications).into_par_iter().map(run).collect())
        } else {
            (0..replications).map(run).collect()
        };
        for (k, &m) in methods.iter().enumerate() {
            let results = per_rep.iter().map(|rep| rep[k].clone()).collect();
            rows.push(aggregate(gp.n, gp.p, m, spec.theta0, results));
        }
    }
    Ok(SimulationReport { rows })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

/// One CSV row per `(n, p, estimator)`.
pub fn write_report_csv<W: std::io::Write>(report: &SimulationReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n", "p", "estimator", "theta0", "replications", "failures", "nonconverged", "rmse", "bias", "coverage",
        "mean_theta", "sd_theta", "mean_se", "l1_beta", "l1_mu",
    ])?;
    for r in &report.rows {
        w.write_record([
            r.n.to_string(),
            r.p.to_string(),
            r.estimator.to_string(),
            format!("{}", r.theta0),
            r.replications.to_string(),
            r.failures.to_string(),
            r.nonconverged.to_string(),
            format!("{}", r.rmse),
            format!("{}", r.bias),
            format!("{}", r.coverage),
            format!("{}", r.mean_theta),
            format!("{}", r.sd_theta),
            format!("{}", r.mean_se),
            fmt_opt(r.l1_beta),
            fmt_opt(r.l1_mu),
        ])?;
    }
    w.flush().map_err(|source| Error::Io { path: "<report>".into(), source })?;
    Ok(())
}

/// Text table: one block per `p`, one column group (RMSE, Bias, CR) per `n`.
pub fn format_report_table(report: &SimulationReport) -> String {
    let mut ns: Vec<usize> = report.rows.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut ps: Vec<usize> = report.rows.iter().map(|r| r.p).collect();
    ps.sort_unstable();
    ps.dedup();
    let mut methods: Vec<Method> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.estimator) {
            methods.push(r.estimator);
        }
    }
    let mut out = String::new();
    out.push_str(&format!("{:<18}", ""));
    for n in &ns {
        out.push_str(&format!("{:^27}", format!("n={n}")));
    }
    out.push('\n');
    out.push_str(&format!("{:<18}", ""));
    for _ in &ns {
        out.push_str(&format!("{:>9}{:>9}{:>9}", "RMSE", "Bias", "CR"));
    }
    out.push('\n');
    for p in &ps {
        out.push_str(&format!("{:-^1$}\n", format!(" p={p} "), 18 + 27 * ns.len()));
        for m in &methods {
            out.push_str(&format!("{:<18}", m.name()));
            for n in &ns {
                match report.row(*n, *p, *m) {
                    Some(r) => out.push_str(&format!("{:>9.3}{:>9.3}{:>9.3}", r.rmse, r.bias, r.coverage)),
                    None => out.push_str(&format!("{:>27}", "")),
                }
            }
            out.push('\n');
        }
    }
    out
}
