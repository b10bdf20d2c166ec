//! Score-function and clipped importance-sampling estimators, expressed as
//! the derivative of the loss with respect to each step's log-probability.
//! The bandit tests and the diffusion trainer share these functions.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    /// On-policy REINFORCE; each batch is used for one update.
    Sf,
    /// Clipped-ratio surrogate; several updates per batch.
    Is,
}

impl Estimator {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sf" => Ok(Estimator::Sf),
            "is" => Ok(Estimator::Is),
            other => Err(Error::InvalidConfig(format!("unknown estimator {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Sf => "sf",
            Estimator::Is => "is",
        }
    }
}

/// Loss contribution of one step and its derivative with respect to the
/// step's current log-probability. `n` is the number of trajectories.
pub fn step_term(est: Estimator, adv: f64, logp: f64, logp_old: f64, clip: f64, n: usize) -> (f64, f64) {
    let n = n as f64;
    match est {
        Estimator::Sf => (-adv * logp / n, -adv / n),
        Estimator::Is => {
            let rho = (logp - logp_old).exp();
            let clipped = rho.clamp(1.0 - clip, 1.0 + clip);
            let (u, c) = (rho * adv, clipped * adv);
            if u <= c {
                (-u / n, -u / n)
            } else {
                (-c / n, 0.0)
            }
        }
    }
}
