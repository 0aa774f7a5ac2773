//! Adaptive random-walk Metropolis steps for positive scalar parameters.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalScale {
    /// `x' = x·exp(s z)`, acceptance ratio carries the Jacobian `x'/x`.
    Log,
    /// `x' = x + s z`, negative proposals rejected.
    Raw,
}

/// Proposal scale plus acceptance bookkeeping for one scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub scale: f64,
    pub accepted: u64,
    pub attempts: u64,
}

impl Adapter {
    pub fn new(scale: f64) -> Self {
        Adapter { scale, accepted: 0, attempts: 0 }
    }

    pub fn rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.accepted as f64 / self.attempts as f64
        }
    }
}

/// Robbins–Monro schedule: at iteration `t` (1-based) the log proposal scale
/// moves by `t^(−decay) (α − target)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adaptation {
    pub iteration: usize,
    pub target: f64,
    pub decay: f64,
}

/// One Metropolis step on a positive scalar. `log_target` is the log density
/// in the parameter's own coordinate; non-finite values reject.
pub fn mh_step<R: Rng + ?Sized>(
    x: f64,
    log_target: impl Fn(f64) -> f64,
    adapter: &mut Adapter,
    proposal: ProposalScale,
    adapt: Option<Adaptation>,
    rng: &mut R,
) -> (f64, bool) {
    let z: f64 = rng.sample(StandardNormal);
    let cand = match proposal {
        ProposalScale::Log => x * (adapter.scale * z).exp(),
        ProposalScale::Raw => x + adapter.scale * z,
    };
    let log_alpha = if cand > 0.0 && cand.is_finite() {
        let jac = match proposal {
            ProposalScale::Log => cand.ln() - x.ln(),
            ProposalScale::Raw => 0.0,
        };
        if cand == x {
            0.0
        } else {
            log_target(cand) - log_target(x) + jac
        }
    } else {
        f64::NEG_INFINITY
    };
    let alpha = if log_alpha.is_nan() { 0.0 } else { log_alpha.min(0.0).exp() };
    let accept = rng.random::<f64>() < alpha;
    adapter.attempts += 1;
    if accept {
        adapter.accepted += 1;
    }
    if let Some(a) = adapt {
        let step = (a.iteration.max(1) as f64).powf(-a.decay);
        adapter.scale *= (step * (alpha - a.target)).exp();
    }
    (if accept { cand } else { x }, accept)
}
