//! Learned multi-modal planner: scene encoding, a two-hidden-layer network
//! with plan, score and prediction heads, and the imitation loss.

mod encode;
mod loss;
mod network;

pub use encode::{encode_scene, SceneEncoding, ENCODING_DIM};
pub use loss::{il_loss, il_loss_batch, il_terms, smooth_l1, smooth_l1_grad, ILLossConfig, ILTerms};
pub use network::{network_backward, network_forward, NetworkCache, PolicyConfig, PolicyParams};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{ControlInput, ControlSequence, KinematicParams};

/// Metres per unit of the prediction head.
pub const PREDICTION_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiModalOutput {
    pub plans: Vec<ControlSequence>,
    pub logits: Vec<f64>,
    /// World positions per neighbor slot and step. Slots without a
    /// neighbor are anchored at the ego position and carry no meaning.
    pub predictions: Vec<Vec<[f64; 2]>>,
}

/// Gradient of a scalar loss with respect to a [`MultiModalOutput`];
/// plan entries are flattened `[a0, d0, a1, d1, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub plans: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub predictions: Vec<Vec<[f64; 2]>>,
}

impl OutputGrad {
    pub fn zeros(config: &PolicyConfig) -> Self {
        Self {
            plans: vec![vec![0.0; 2 * config.horizon]; config.modes],
            logits: vec![0.0; config.modes],
            predictions: vec![vec![[0.0; 2]; config.horizon]; config.neighbors],
        }
    }
}

/// Index of the largest logit, the lowest index among ties.
pub fn best_mode(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, l) in logits.iter().enumerate() {
        if *l > logits[best] {
            best = i;
        }
    }
    best
}

pub fn select_best(out: &MultiModalOutput) -> ControlSequence {
    out.plans[best_mode(&out.logits)].clone()
}

/// Forward pass state needed to backpropagate output gradients.
#[derive(Clone, Debug)]
pub struct BatchCache {
    pub network: NetworkCache,
    thetas: Vec<f64>,
    bounds: [f64; 2],
}

fn anchor(enc: &SceneEncoding, slot: usize) -> [f64; 2] {
    enc.neighbor_positions
        .get(slot)
        .copied()
        .unwrap_or_else(|| enc.origin.position())
}

fn decode(config: &PolicyConfig, z: &[f64], enc: &SceneEncoding, kin: &KinematicParams) -> MultiModalOutput {
    let t = config.horizon;
    let plans = (0..config.modes)
        .map(|m| {
            let controls = (0..t)
                .map(|k| {
                    let i = (m * t + k) * 2;
                    ControlInput::new(kin.a_max * z[i].tanh(), kin.delta_max * z[i + 1].tanh())
                })
                .collect();
            ControlSequence::new(controls, kin.dt)
        })
        .collect();
    let logits = z[config.plan_outputs()..config.plan_outputs() + config.modes].to_vec();
    let base = config.plan_outputs() + config.modes;
    let predictions = (0..config.neighbors)
        .map(|slot| {
            let a = anchor(enc, slot);
            (0..t)
                .map(|k| {
                    let i = base + (slot * t + k) * 2;
                    let o = enc.rotate_to_world([PREDICTION_SCALE * z[i], PREDICTION_SCALE * z[i + 1]]);
                    [a[0] + o[0], a[1] + o[1]]
                })
                .collect()
        })
        .collect();
    MultiModalOutput {
        plans,
        logits,
        predictions,
    }
}

/// Runs the network on a batch of encodings.
pub fn forward_batch(
    params: &PolicyParams,
    encodings: &[&SceneEncoding],
    kin: &KinematicParams,
) -> Result<(Vec<MultiModalOutput>, BatchCache)> {
    let c = &params.config;
    if encodings.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if let Some(e) = encodings.iter().find(|e| e.values.len() != c.input_dim) {
        return Err(Error::invalid(format!(
            "encoding has {} entries, network expects {}",
            e.values.len(),
            c.input_dim
        )));
    }
    let input = DMatrix::from_fn(c.input_dim, encodings.len(), |r, b| encodings[b].values[r]);
    let network = network_forward(params, input)?;
    let outputs = encodings
        .iter()
        .enumerate()
        .map(|(b, e)| decode(c, network.output.column(b).as_slice(), e, kin))
        .collect();
    let cache = BatchCache {
        network,
        thetas: encodings.iter().map(|e| e.origin.theta).collect(),
        bounds: [kin.a_max, kin.delta_max],
    };
    Ok((outputs, cache))
}

pub fn forward(params: &PolicyParams, enc: &SceneEncoding, kin: &KinematicParams) -> Result<MultiModalOutput> {
    Ok(forward_batch(params, &[enc], kin)?.0.remove(0))
}

/// Parameter gradient summed over the batch.
pub fn backward_batch(params: &PolicyParams, cache: &BatchCache, grads: &[OutputGrad]) -> Vec<f64> {
    let c = &params.config;
    let t = c.horizon;
    let z = &cache.network.output;
    let mut dz = DMatrix::zeros(z.nrows(), z.ncols());
    for (b, g) in grads.iter().enumerate() {
        for (m, plan) in g.plans.iter().enumerate() {
            for (j, gv) in plan.iter().enumerate() {
                let i = m * t * 2 + j;
                let th = z[(i, b)].tanh();
                dz[(i, b)] = gv * cache.bounds[j % 2] * (1.0 - th * th);
            }
        }
        for (m, gl) in g.logits.iter().enumerate() {
            dz[(c.plan_outputs() + m, b)] = *gl;
        }
        let base = c.plan_outputs() + c.modes;
        let (s, co) = cache.thetas[b].sin_cos();
        for (slot, steps) in g.predictions.iter().enumerate() {
            for (k, gp) in steps.iter().enumerate() {
                let i = base + (slot * t + k) * 2;
                dz[(i, b)] = PREDICTION_SCALE * (co * gp[0] + s * gp[1]);
                dz[(i + 1, b)] = PREDICTION_SCALE * (-s * gp[0] + co * gp[1]);
            }
        }
    }
    network_backward(params, &cache.network, &dz)
}
