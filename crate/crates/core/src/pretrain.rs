//! Imitation pre-training of the policy on the expert dataset.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::KinematicParams;
use crate::policy::{il_loss_batch, ILLossConfig, PolicyParams};
use crate::scenarios::{Frame, FUTURE_LEN};
use crate::train::{Optimizer, UpdateRule};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub il: ILLossConfig,
    pub update_rule: UpdateRule,
    pub kinematics: KinematicParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            il: ILLossConfig::default(),
            update_rule: UpdateRule::Sgd,
            kinematics: KinematicParams::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        self.il.validate()?;
        self.update_rule.validate()?;
        self.kinematics.validate()
    }
}

/// Everything needed to continue training where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainState {
    pub params: PolicyParams,
    pub optimizer: Optimizer,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Mean imitation loss of each completed epoch.
    pub curve: Vec<f64>,
}

impl PretrainState {
    pub fn new(params: PolicyParams, rule: UpdateRule) -> Self {
        let n = params.values.len();
        Self {
            params,
            optimizer: Optimizer::new(rule, n),
            epoch: 0,
            curve: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        s.params.validate().map_err(|e| Error::data(e.to_string()))?;
        Ok(s)
    }
}

/// Shuffled order of the dataset for one epoch.
fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains until `cfg.epochs` epochs are complete.
pub fn resume(mut state: PretrainState, expert: &[Frame], cfg: &PretrainConfig) -> Result<PretrainState> {
    cfg.validate()?;
    state.params.validate()?;
    if expert.is_empty() {
        return Err(Error::invalid("empty expert dataset"));
    }
    if state.params.config.horizon > FUTURE_LEN {
        return Err(Error::invalid("policy horizon exceeds the ground-truth future"));
    }
    let batches = expert.len().div_ceil(cfg.batch_size);
    while state.epoch < cfg.epochs {
        let order = epoch_order(cfg.seed, state.epoch, expert.len());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let step = state.epoch * batches + b + 1;
            let frames: Vec<&Frame> = chunk.iter().map(|&i| &expert[i]).collect();
            let (terms, grad) = il_loss_batch(&state.params, &frames, &cfg.il, &cfg.kinematics)
                .map_err(|e| e.context(format!("pre-training step {step}")))?;
            if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    step,
                    reason: "non-finite imitation loss".into(),
                });
            }
            total += terms.total * frames.len() as f64;
            state.optimizer.apply(&mut state.params.values, &grad, cfg.lr);
        }
        state.curve.push(total / expert.len() as f64);
        state.epoch += 1;
    }
    Ok(state)
}

/// Pre-trains `params0` and returns the trained parameters and the
/// per-epoch mean loss.
pub fn pretrain(params0: &PolicyParams, expert: &[Frame], cfg: &PretrainConfig) -> Result<(PolicyParams, Vec<f64>)> {
    let s = resume(PretrainState::new(params0.clone(), cfg.update_rule), expert, cfg)?;
    Ok((s.params, s.curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::scenarios::fixtures::straight_frame;

    fn setup() -> (PolicyParams, Vec<Frame>) {
        let p = PolicyParams::init(
            PolicyConfig {
                hidden: 8,
                horizon: 10,
                ..PolicyConfig::default()
            },
            1,
        )
        .unwrap();
        let frames = (0..5).map(|i| straight_frame(8.0 + i as f64, i)).collect();
        (p, frames)
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (p, f) = setup();
        let cfg = PretrainConfig { epochs: 0, ..Default::default() };
        let (q, curve) = pretrain(&p, &f, &cfg).unwrap();
        assert_eq!(p, q);
        assert!(curve.is_empty());
    }

    #[test]
    fn split_training_equals_straight_training() {
        let (p, f) = setup();
        let cfg = PretrainConfig { epochs: 3, batch_size: 2, lr: 1e-3, ..Default::default() };
        let (straight, curve) = pretrain(&p, &f, &cfg).unwrap();
        let half = resume(PretrainState::new(p, cfg.update_rule), &f, &PretrainConfig { epochs: 1, ..cfg }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        half.save(&path).unwrap();
        let rest = resume(PretrainState::load(&path).unwrap(), &f, &cfg).unwrap();
        assert!(rest.params.values.iter().zip(&straight.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(rest.curve, curve);
    }

    #[test]
    fn empty_expert_set_is_rejected() {
        let (p, _) = setup();
        assert!(matches!(pretrain(&p, &[], &PretrainConfig::default()), Err(Error::InvalidArgument(_))));
    }
}
