use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Task weights of the combined objective plus the angular margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Angular triplet margin in radians.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.5,
            gamma: 0.3,
            margin: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                ));
            }
        }
        if !(0.0..=PI).contains(&self.margin) {
            return config(format!("margin {} outside [0, pi]", self.margin));
        }
        Ok(())
    }
}

/// `α·L_CL + β·L_auth + γ·L_CTC`. The gradient with respect to each
/// component is its weight.
pub fn total_loss(l_cl: f64, l_auth: f64, l_ctc: f64, weights: &LossWeights) -> f64 {
    weights.alpha * l_cl + weights.beta * l_auth + weights.gamma * l_ctc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 1.0, 1.0, &w) - 0.9).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        let (a, b, c) = (0.37, 1.9, 4.2);
        assert!(
            (total_loss(2.0 * a, 2.0 * b, 2.0 * c, &w) - 2.0 * total_loss(a, b, c, &w)).abs()
                < 1e-12
        );
    }

    #[test]
    fn validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            alpha: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            margin: 4.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
