//! One-sided truncated normal draws.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::model::{log_normal_cdf, normal_log_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Support `(0, ∞)`.
    Positive,
    /// Support `(−∞, 0)`.
    Negative,
}

/// Draw from `N(mean, sd²)` restricted to one side of zero.
pub fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, side: Side, rng: &mut R) -> f64 {
    match side {
        Side::Positive => mean + sd * standard_above(-mean / sd, rng),
        Side::Negative => -(-mean + sd * standard_above(mean / sd, rng)),
    }
}

/// Mean and variance of `N(mean, sd²)` restricted to one side of zero.
pub fn truncated_normal_moments(mean: f64, sd: f64, side: Side) -> (f64, f64) {
    let (a, sign) = match side {
        Side::Positive => (-mean / sd, 1.0),
        Side::Negative => (mean / sd, -1.0),
    };
    // inverse Mills ratio φ(a)/(1 − Φ(a)) in logs, so deep tails stay finite
    let r = (normal_log_pdf(a) - log_normal_cdf(-a)).exp();
    let var = (1.0 + a * r - r * r).max(0.0);
    (mean + sign * sd * r, sd * sd * var)
}

/// Standard normal conditioned on `z > a`. Plain rejection when `a ≤ 0`,
/// otherwise exponential-proposal rejection with the optimal rate.
fn standard_above<R: Rng + ?Sized>(a: f64, rng: &mut R) -> f64 {
    if a <= 0.0 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            if z > a {
                return z;
            }
        }
    }
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let z = a + exp.sample(rng);
        let d = z - rate;
        if rng.random::<f64>() < (-0.5 * d * d).exp() {
            return z;
        }
    }
}
