use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Running loss and gradient statistics plus the observed patch-norm bound.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceMonitor {
    pub loss_sum: f64,
    pub grad_sq_sum: f64,
    /// Number of recorded batch losses.
    pub count: u64,
    /// Largest patch norm seen in any memory feature or bank so far.
    pub r_hat: f64,
    /// Batch losses that exceeded `2·r_hat`.
    pub violations: u64,
}

impl ConvergenceMonitor {
    pub fn observe_norm(&mut self, r: f64) {
        if r > self.r_hat {
            self.r_hat = r;
        }
    }

    /// Records one batch. The loss bound is checked, not assumed.
    pub fn record(&mut self, loss: f64, grad_sq: f64) -> Result<()> {
        if !loss.is_finite() || !grad_sq.is_finite() {
            return Err(Error::numeric("non-finite loss or gradient norm"));
        }
        self.loss_sum += loss;
        self.grad_sq_sum += grad_sq;
        self.count += 1;
        if loss > 2.0 * self.r_hat {
            self.violations += 1;
            log::warn!("loss {loss} exceeds 2·R̂ = {}", 2.0 * self.r_hat);
        }
        Ok(())
    }

    /// Cumulative average of squared gradient norms.
    pub fn ergodic_grad_sq(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.grad_sq_sum / self.count as f64
        }
    }

    pub fn mean_loss(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.loss_sum / self.count as f64
        }
    }
}
