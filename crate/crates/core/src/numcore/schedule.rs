use serde::{Deserialize, Serialize};

use super::GroupRates;
use crate::{Error, Result};

/// Annealed learning rate and adversarial penalty, both functions of the
/// normalized training progress `p ∈ [0, 1]`.
///
/// `eta(p) = eta0 / (1 + alpha_sched·p)^beta_sched` is the classifier rate;
/// the extractor trains `lr_ratio_f_over_g` times slower.
/// `lambda(p) = 2 / (1 + exp(−gamma·p)) − 1` ramps from 0 towards 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub eta0: f64,
    pub alpha_sched: f64,
    pub beta_sched: f64,
    pub gamma: f64,
    pub lr_ratio_f_over_g: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            eta0: 0.01,
            alpha_sched: 10.0,
            beta_sched: 0.75,
            gamma: 10.0,
            lr_ratio_f_over_g: 10.0,
        }
    }
}

fn check_progress(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain {
            what: "progress",
            value: p,
            domain: "[0, 1]",
        });
    }
    Ok(())
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("eta0", self.eta0),
            ("alpha_sched", self.alpha_sched),
            ("beta_sched", self.beta_sched),
            ("gamma", self.gamma),
            ("lr_ratio_f_over_g", self.lr_ratio_f_over_g),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("schedule field {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// Classifier learning rate at progress `p`.
    pub fn eta_at(&self, p: f64) -> Result<f64> {
        check_progress(p)?;
        Ok(self.eta0 / (1.0 + self.alpha_sched * p).powf(self.beta_sched))
    }

    /// Adversarial penalty at progress `p`.
    pub fn lambda_at(&self, p: f64) -> Result<f64> {
        check_progress(p)?;
        Ok(2.0 / (1.0 + (-self.gamma * p).exp()) - 1.0)
    }

    /// Per-group rates at progress `p`.
    pub fn rates_at(&self, p: f64) -> Result<GroupRates> {
        let eta = self.eta_at(p)?;
        Ok(GroupRates {
            extractor: eta / self.lr_ratio_f_over_g,
            classifier: eta,
        })
    }

    /// Progress after `completed` of `total` epochs.
    pub fn progress(completed: usize, total: usize) -> f64 {
        if total == 0 {
            0.0
        } else {
            (completed as f64 / total as f64).clamp(0.0, 1.0)
        }
    }
}
