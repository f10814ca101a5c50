#![allow(dead_code)]

use balance_att::data::add_intercept;
use balance_att::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Gaussian covariates, logistic treatment on the first three columns,
/// linear outcome plus noise. Intercept prepended.
pub fn synthetic(n: usize, p: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(n, p);
    let mut d = vec![0.0; n];
    let mut y = DVector::zeros(n);
    for i in 0..n {
        for j in 0..p {
            x[(i, j)] = StandardNormal.sample(&mut rng);
        }
        let idx: f64 = (0..p.min(3)).map(|j| x[(i, j)] * [0.6, -0.4, 0.3][j]).sum();
        let u: f64 = rng.random();
        d[i] = if u < 1.0 / (1.0 + (-idx).exp()) { 1.0 } else { 0.0 };
        let e: f64 = StandardNormal.sample(&mut rng);
        y[i] = 1.0 + (0..p.min(4)).map(|j| x[(i, j)] * (j as f64 + 1.0) * 0.5).sum::<f64>() + 0.5 * d[i] + e;
    }
    // keep both groups non-empty
    d[0] = 1.0;
    d[n - 1] = 0.0;
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    add_intercept(&Dataset::new(y, &d, x, names).unwrap()).unwrap()
}

pub fn gaussian_vec(len: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn row(ds: &Dataset, i: usize) -> Vec<f64> {
    ds.x().row(i).iter().copied().collect()
}

/// Largest violation of the optimality conditions of
/// `f + sum_j w_j |b_j|`, computed from a supplied gradient.
pub fn kkt_violation(coef: &[f64], grad: &[f64], weights: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..coef.len() {
        let v = if coef[j] > 0.0 {
            (grad[j] + weights[j]).abs()
        } else if coef[j] < 0.0 {
            (grad[j] - weights[j]).abs()
        } else {
            (grad[j].abs() - weights[j]).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

/// Balancing-loss gradient with the exponential link, written out row by row:
/// `(1/n) sum_i [(1 - D_i) exp(x_i'b) - D_i] x_i`.
pub fn balancing_gradient(ds: &Dataset, beta: &[f64]) -> Vec<f64> {
    let n = ds.n() as f64;
    let mut g = vec![0.0; ds.p()];
    for i in 0..ds.n() {
        let x = row(ds, i);
        let r = if ds.treated()[i] { -1.0 } else { dot(&x, beta).exp() };
        for j in 0..ds.p() {
            g[j] += r * x[j] / n;
        }
    }
    g
}

/// Central finite-difference check of an analytic gradient.
pub fn fd_relative_error<F: Fn(&[f64]) -> f64>(f: F, at: &[f64], grad: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..at.len() {
        let h = 1e-6 * at[j].abs().max(1.0);
        let mut up = at.to_vec();
        let mut dn = at.to_vec();
        up[j] += h;
        dn[j] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        worst = worst.max((fd - grad[j]).abs() / grad[j].abs().max(1.0));
    }
    worst
}
