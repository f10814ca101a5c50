//! Proximal gradient solver for `f(b) + lambda * sum_j psi_j |b_j|`.
//!
//! Accelerated proximal gradient with halving backtracking. A candidate is
//! only accepted if it does not increase the composite objective; when an
//! extrapolated step would, momentum is reset and a plain step is taken from
//! the current iterate. When the loss supports column restriction the
//! problem is solved on a growing working set of coordinates, and the full
//! KKT conditions are re-checked after every inner solve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, LossError, Result};
use crate::objective::SmoothLoss;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyPlan {
    pub lambda: f64,
    pub loadings: Vec<f64>,
    pub c: f64,
    pub gamma: f64,
    /// `true` leaves the coordinate unpenalized.
    pub exempt: Vec<bool>,
}

impl PenaltyPlan {
    /// A plan with no penalty at all.
    pub fn unpenalized(p: usize) -> Self {
        Self { lambda: 0.0, loadings: vec![0.0; p], c: 1.1, gamma: 0.05, exempt: vec![false; p] }
    }

    pub fn dim(&self) -> usize {
        self.loadings.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if let Some(j) = self.loadings.iter().position(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "loading {j} must be finite and >= 0, got {}",
                self.loadings[j]
            )));
        }
        if self.exempt.len() != self.loadings.len() {
            return Err(Error::Dimension(format!(
                "{} loadings but {} exempt flags",
                self.loadings.len(),
                self.exempt.len()
            )));
        }
        Ok(())
    }

    /// Effective per-coordinate penalty `lambda * psi_j`, zero when exempt.
    pub fn weights(&self) -> Vec<f64> {
        self.loadings
            .iter()
            .zip(&self.exempt)
            .map(|(&psi, &ex)| if ex { 0.0 } else { self.lambda * psi })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coef: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub active_set: Vec<usize>,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Composite objective after every accepted step, when requested.
    #[serde(skip)]
    pub history: Vec<f64>,
}

impl FitResult {
    pub(crate) fn from_coef(
        coef: Vec<f64>,
        objective: f64,
        kkt_residual: f64,
        iterations: usize,
        converged: bool,
        message: Option<String>,
    ) -> Self {
        let active_set = coef.iter().enumerate().filter(|(_, &b)| b != 0.0).map(|(j, _)| j).collect();
        Self { coef, objective, kkt_residual, iterations, active_set, converged, message, history: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub initial_step: f64,
    pub accelerate: bool,
    pub working_set: bool,
    #[serde(skip)]
    pub record_history: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 20_000,
            initial_step: 1.0,
            accelerate: true,
            working_set: true,
            record_history: false,
        }
    }
}

const MIN_STEP: f64 = 1e-14;
const STEP_GROWTH: f64 = 1.25;

/// `sign(v) * max(|v| - t, 0)`.
#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

fn penalty(weights: &[f64], coef: &[f64]) -> f64 {
    weights.iter().zip(coef).map(|(w, b)| w * b.abs()).sum()
}

fn kkt_from_grad(coef: &[f64], grad: &[f64], weights: &[f64]) -> f64 {
    coef.iter()
        .zip(grad)
        .zip(weights)
        .map(|((&b, &g), &w)| {
            if b != 0.0 {
                (g + w * b.signum()).abs()
            } else {
                (g.abs() - w).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Largest violation of the optimality conditions of the penalized program
/// at `coef`.
pub fn kkt_residual(loss: &dyn SmoothLoss, plan: &PenaltyPlan, coef: &[f64]) -> std::result::Result<f64, LossError> {
    let (_, grad) = loss.value_grad(coef)?;
    Ok(kkt_from_grad(coef, &grad, &plan.weights()))
}

struct Inner {
    coef: Vec<f64>,
    grad: Vec<f64>,
    objective: f64,
    kkt: f64,
    iterations: usize,
    converged: bool,
    message: Option<String>,
}

fn prox_step(y: &[f64], gy: &[f64], weights: &[f64], step: f64) -> Vec<f64> {
    y.iter()
        .zip(gy)
        .zip(weights)
        .map(|((&yj, &gj), &wj)| soft_threshold(yj - step * gj, step * wj))
        .collect()
}

fn prox_gradient(
    loss: &dyn SmoothLoss,
    weights: &[f64],
    init: Vec<f64>,
    opts: &SolverOptions,
    max_iter: usize,
    history: &mut Vec<f64>,
) -> Result<Inner> {
    let mut x = init;
    let (mut fx, mut gx) = loss
        .value_grad(&x)
        .map_err(|e| Error::Solver(format!("loss not evaluable at initial point: {e}")))?;
    let mut obj_x = fx + penalty(weights, &x);
    let mut kkt = kkt_from_grad(&x, &gx, weights);
    if kkt <= opts.tol {
        return Ok(Inner { coef: x, grad: gx, objective: obj_x, kkt, iterations: 0, converged: true, message: None });
    }

    let mut y = x.clone();
    let mut fy = fx;
    let mut gy = gx.clone();
    let mut y_is_x = true;
    let mut grad_x_fresh = true;
    let mut momentum = 1.0_f64;
    let mut step = opts.initial_step;
    let mut since_check = 0usize;

    for it in 1..=max_iter {
        // backtracking from y
        let mut s = step;
        let candidate = loop {
            let z = prox_step(&y, &gy, weights, s);
            let mut lin = 0.0;
            let mut quad = 0.0;
            for ((zj, yj), gj) in z.iter().zip(&y).zip(&gy) {
                let d = zj - yj;
                lin += gj * d;
                quad += d * d;
            }
            if let Ok(fz) = loss.value(&z) {
                let bound = fy + lin + quad / (2.0 * s);
                if fz <= bound + 1e-15 * fy.abs().max(1.0) {
                    break Some((z, fz, quad.sqrt() / s));
                }
            }
            s *= 0.5;
            if s < MIN_STEP {
                break None;
            }
        };

        let Some((z, fz, mapping_norm)) = candidate else {
            if !y_is_x {
                y.clone_from(&x);
                fy = fx;
                if !grad_x_fresh {
                    gx = loss.value_grad(&x)?.1;
                    grad_x_fresh = true;
                }
                gy.clone_from(&gx);
                y_is_x = true;
                momentum = 1.0;
                step = opts.initial_step;
                continue;
            }
            if !grad_x_fresh {
                gx = loss.value_grad(&x)?.1;
            }
            kkt = kkt_from_grad(&x, &gx, weights);
            return Ok(Inner {
                coef: x,
                grad: gx,
                objective: obj_x,
                kkt,
                iterations: it,
                converged: kkt <= opts.tol,
                message: Some(format!("line search stalled below step {MIN_STEP:e}")),
            });
        };
        step = s * STEP_GROWTH;

        let obj_z = fz + penalty(weights, &z);
        if obj_z > obj_x {
            if !y_is_x {
                y.clone_from(&x);
                fy = fx;
                if !grad_x_fresh {
                    gx = loss.value_grad(&x)?.1;
                    grad_x_fresh = true;
                }
                gy.clone_from(&gx);
                y_is_x = true;
                momentum = 1.0;
                continue;
            }
            // plain step that fails to descend: numerically at the optimum
            if !grad_x_fresh {
                gx = loss.value_grad(&x)?.1;
            }
            kkt = kkt_from_grad(&x, &gx, weights);
            return Ok(Inner {
                coef: x,
                grad: gx,
                objective: obj_x,
                kkt,
                iterations: it,
                converged: kkt <= opts.tol,
                message: (kkt > opts.tol).then(|| "no further descent possible in floating point".to_string()),
            });
        }

        let x_prev = std::mem::replace(&mut x, z);
        fx = fz;
        obj_x = obj_z;
        grad_x_fresh = false;
        if opts.record_history {
            history.push(obj_x);
        }

        since_check += 1;
        let want_check = mapping_norm <= 10.0 * opts.tol || since_check >= 20 || !opts.accelerate;
        let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
        let beta = if opts.accelerate { (momentum - 1.0) / next_momentum } else { 0.0 };
        momentum = next_momentum;

        if want_check || beta == 0.0 {
            since_check = 0;
            let (_, g) = loss.value_grad(&x)?;
            gx = g;
            grad_x_fresh = true;
            kkt = kkt_from_grad(&x, &gx, weights);
            if kkt <= opts.tol {
                return Ok(Inner { coef: x, grad: gx, objective: obj_x, kkt, iterations: it, converged: true, message: None });
            }
        }

        if beta == 0.0 {
            y.clone_from(&x);
            fy = fx;
            gy.clone_from(&gx);
            y_is_x = true;
            continue;
        }
        let y_next: Vec<f64> = x.iter().zip(&x_prev).map(|(a, b)| a + beta * (a - b)).collect();
        match loss.value_grad(&y_next) {
            Ok((f, g)) => {
                y = y_next;
                fy = f;
                gy = g;
                y_is_x = false;
            }
            Err(_) => {
                if !grad_x_fresh {
                    gx = loss.value_grad(&x)?.1;
                    grad_x_fresh = true;
                }
                y.clone_from(&x);
                fy = fx;
                gy.clone_from(&gx);
                y_is_x = true;
                momentum = 1.0;
            }
        }
    }

    if !grad_x_fresh {
        gx = loss.value_grad(&x)?.1;
    }
    kkt = kkt_from_grad(&x, &gx, weights);
    Ok(Inner {
        coef: x,
        grad: gx,
        objective: obj_x,
        kkt,
        iterations: max_iter,
        converged: kkt <= opts.tol,
        message: (kkt > opts.tol).then(|| format!("iteration limit {max_iter} reached")),
    })
}

/// Minimizes `loss + lambda * sum_j psi_j |b_j|` from `init`.
///
/// Returns `converged = false` (not an error) when the iteration budget runs
/// out or the line search stalls; errors only when the loss cannot be
/// evaluated at `init`.
pub fn minimize_composite(
    loss: &dyn SmoothLoss,
    plan: &PenaltyPlan,
    init: &[f64],
    opts: &SolverOptions,
) -> Result<FitResult> {
    plan.validate()?;
    let p = loss.dim();
    if plan.dim() != p || init.len() != p {
        return Err(Error::Dimension(format!(
            "loss has dimension {p}, plan {} and init {}",
            plan.dim(),
            init.len()
        )));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be > 0, got {}", opts.tol)));
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite initial point".into()));
    }
    let weights = plan.weights();
    let mut history = Vec::new();

    if opts.working_set && p > 8 {
        if let Some(fit) = working_set_solve(loss, &weights, init, opts, &mut history)? {
            return Ok(FitResult { history, ..fit });
        }
    }
    let inner = prox_gradient(loss, &weights, init.to_vec(), opts, opts.max_iter, &mut history)?;
    let mut fit = FitResult::from_coef(inner.coef, inner.objective, inner.kkt, inner.iterations, inner.converged, inner.message);
    fit.history = history;
    Ok(fit)
}

/// `None` when the loss cannot be restricted or the working set would cover
/// most coordinates anyway.
fn working_set_solve(
    loss: &dyn SmoothLoss,
    weights: &[f64],
    init: &[f64],
    opts: &SolverOptions,
    history: &mut Vec<f64>,
) -> Result<Option<FitResult>> {
    let p = loss.dim();
    let (f0, g0) = loss
        .value_grad(init)
        .map_err(|e| Error::Solver(format!("loss not evaluable at initial point: {e}")))?;
    let kkt0 = kkt_from_grad(init, &g0, weights);
    if kkt0 <= opts.tol {
        let obj = f0 + penalty(weights, init);
        return Ok(Some(FitResult::from_coef(init.to_vec(), obj, kkt0, 0, true, None)));
    }

    let mut in_set = vec![false; p];
    for j in 0..p {
        if weights[j] == 0.0 || init[j] != 0.0 {
            in_set[j] = true;
        }
    }
    let base = in_set.iter().filter(|&&b| b).count();
    add_violators(&mut in_set, init, &g0, weights, opts.tol, base.max(10));
    if in_set.iter().filter(|&&b| b).count() * 2 > p {
        return Ok(None);
    }

    let mut coef = init.to_vec();
    let mut iterations = 0usize;
    loop {
        let set: Vec<usize> = (0..p).filter(|&j| in_set[j]).collect();
        let Some(sub) = loss.restrict(&set) else {
            return Ok(None);
        };
        let sub_weights: Vec<f64> = set.iter().map(|&j| weights[j]).collect();
        let sub_init: Vec<f64> = set.iter().map(|&j| coef[j]).collect();
        let budget = opts.max_iter.saturating_sub(iterations).max(1);
        let inner = prox_gradient(sub.as_ref(), &sub_weights, sub_init, opts, budget, history)?;
        iterations += inner.iterations;

        coef.iter_mut().for_each(|b| *b = 0.0);
        for (k, &j) in set.iter().enumerate() {
            coef[j] = inner.coef[k];
        }
        let (fv, grad) = loss.value_grad(&coef)?;
        let kkt = kkt_from_grad(&coef, &grad, weights);
        let objective = fv + penalty(weights, &coef);
        debug_assert!(inner.grad.len() == set.len());
        if kkt <= opts.tol {
            return Ok(Some(FitResult::from_coef(coef, objective, kkt, iterations, true, None)));
        }
        let added = add_violators(&mut in_set, &coef, &grad, weights, opts.tol, set.len().max(10));
        if added == 0 || iterations >= opts.max_iter {
            let msg = inner.message.unwrap_or_else(|| "working set stalled".into());
            return Ok(Some(FitResult::from_coef(coef, objective, kkt, iterations, false, Some(msg))));
        }
    }
}

/// Adds up to `limit` coordinates outside the set whose zero value violates
/// the subgradient condition, largest violation first.
fn add_violators(in_set: &mut [bool], coef: &[f64], grad: &[f64], weights: &[f64], tol: f64, limit: usize) -> usize {
    let mut viol: Vec<(usize, f64)> = (0..coef.len())
        .filter(|&j| !in_set[j])
        .map(|j| (j, grad[j].abs() - weights[j]))
        .filter(|&(_, v)| v > tol)
        .collect();
    viol.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let take = viol.len().min(limit);
    for &(j, _) in &viol[..take] {
        in_set[j] = true;
    }
    take
}
