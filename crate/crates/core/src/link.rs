//! Link functions for the balancing loss.
//!
//! `H` is the primitive entering the loss, `h = H'` gives the control-unit
//! weights and must be positive and strictly increasing. The implied
//! propensity score is `G = h / (1 + h)`.

use serde::{Serialize, Serializer};

use crate::error::LossError;

/// Default bound on `|x'b|` during evaluation.
pub const INDEX_GUARD: f64 = 700.0;

#[derive(Clone, Copy)]
pub struct LinkSpec {
    pub name: &'static str,
    pub big_h: fn(f64) -> f64,
    pub h: fn(f64) -> f64,
    pub h_prime: fn(f64) -> f64,
    pub h_second: fn(f64) -> f64,
    pub guard: f64,
}

impl std::fmt::Debug for LinkSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinkSpec").field("name", &self.name).field("guard", &self.guard).finish()
    }
}

impl PartialEq for LinkSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.guard == other.guard
    }
}

impl Serialize for LinkSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name)
    }
}

impl Default for LinkSpec {
    fn default() -> Self {
        Self::exponential()
    }
}

fn exp(u: f64) -> f64 {
    u.exp()
}

fn hyp_big_h(u: f64) -> f64 {
    let r = (u * u + 1.0).sqrt();
    0.5 * (u * u + u * r + u.asinh())
}

fn hyp_h(u: f64) -> f64 {
    // u + sqrt(u^2+1), written to avoid cancellation for large negative u
    let r = (u * u + 1.0).sqrt();
    if u >= 0.0 {
        u + r
    } else {
        1.0 / (r - u)
    }
}

fn hyp_h_prime(u: f64) -> f64 {
    hyp_h(u) / (u * u + 1.0).sqrt()
}

fn hyp_h_second(u: f64) -> f64 {
    (u * u + 1.0).powf(-1.5)
}

impl LinkSpec {
    /// `H = h = exp`: odds weights of a logistic propensity score.
    pub fn exponential() -> Self {
        Self { name: "exp", big_h: exp, h: exp, h_prime: exp, h_second: exp, guard: INDEX_GUARD }
    }

    /// `h(u) = u + sqrt(u^2 + 1)`. Positive, increasing, linear growth.
    pub fn hyperbolic() -> Self {
        Self {
            name: "hyperbolic",
            big_h: hyp_big_h,
            h: hyp_h,
            h_prime: hyp_h_prime,
            h_second: hyp_h_second,
            guard: INDEX_GUARD,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "exp" | "exponential" => Some(Self::exponential()),
            "hyperbolic" => Some(Self::hyperbolic()),
            _ => None,
        }
    }

    /// Implied propensity score `h / (1 + h)`.
    pub fn propensity(&self, u: f64) -> f64 {
        let w = (self.h)(u);
        w / (1.0 + w)
    }

    #[inline]
    pub fn check(&self, row: usize, u: f64) -> Result<(), LossError> {
        if u.abs() > self.guard || !u.is_finite() {
            Err(LossError::Overflow { row, magnitude: u.abs(), guard: self.guard })
        } else {
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central(f: fn(f64) -> f64, u: f64) -> f64 {
        let step = 1e-6 * (1.0 + u.abs());
        (f(u + step) - f(u - step)) / (2.0 * step)
    }

    #[test]
    fn derivatives_agree_with_finite_differences() {
        for link in [LinkSpec::exponential(), LinkSpec::hyperbolic()] {
            for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
                let pairs = [(link.big_h, link.h), (link.h, link.h_prime), (link.h_prime, link.h_second)];
                for (f, df) in pairs {
                    let fd = central(f, u);
                    let rel = (fd - df(u)).abs() / df(u).abs().max(1e-8);
                    assert!(rel < 1e-6, "{} at {u}: fd {fd} vs {}", link.name, df(u));
                }
                assert!((link.h)(u) > 0.0);
            }
            assert!(((link.h)(0.0) - 1.0).abs() < 1e-15);
            assert!(((link.h_prime)(0.0) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn guard_trips_beyond_bound() {
        let link = LinkSpec::exponential();
        assert!(link.check(0, 699.0).is_ok());
        assert!(matches!(link.check(3, -701.0), Err(LossError::Overflow { row: 3, .. })));
    }
}
