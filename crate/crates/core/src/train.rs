//! Parameter update rules shared by pre-training and fine-tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UpdateRule {
    /// Plain gradient descent.
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl UpdateRule {
    pub fn adam() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            UpdateRule::Sgd => Ok(()),
            UpdateRule::Adam { beta1, beta2, eps } => {
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 {
                    Ok(())
                } else {
                    Err(Error::invalid(format!("bad Adam constants {self:?}")))
                }
            }
        }
    }
}

/// Update rule together with whatever running statistics it keeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub rule: UpdateRule,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub m: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub v: Vec<f64>,
}

impl Optimizer {
    pub fn new(rule: UpdateRule, len: usize) -> Self {
        let moments = if matches!(rule, UpdateRule::Adam { .. }) { len } else { 0 };
        Self {
            rule,
            step: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        match self.rule {
            UpdateRule::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step() {
        let mut o = Optimizer::new(UpdateRule::Sgd, 2);
        let mut p = [1.0, 2.0];
        o.apply(&mut p, &[0.5, -1.0], 0.1);
        assert_eq!(p, [0.95, 2.1]);
        assert!(o.m.is_empty());
    }

    #[test]
    fn first_adam_step_moves_by_the_learning_rate() {
        let mut o = Optimizer::new(UpdateRule::adam(), 2);
        let mut p = [0.0, 0.0];
        o.apply(&mut p, &[3.0, -0.01], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-6);
    }
}
