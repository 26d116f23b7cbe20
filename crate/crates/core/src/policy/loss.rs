use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{backward_batch, best_mode, encode_scene, forward_batch, MultiModalOutput, OutputGrad, PolicyParams, SceneEncoding};
use crate::error::{Error, Result};
use crate::kinematics::{rollout, rollout_vjp, ControlSequence, KinematicParams};
use crate::scenarios::Frame;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ILLossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for ILLossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

impl ILLossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3].iter().all(|l| l.is_finite() && *l >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("loss weights must be finite and >= 0: {self:?}")))
        }
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Unweighted loss components and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ILTerms {
    pub prediction: f64,
    pub score: f64,
    pub imitation: f64,
    pub total: f64,
}

impl ILTerms {
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a ILTerms>) -> ILTerms {
        let mut acc = ILTerms::default();
        let mut n = 0.0;
        for t in items {
            acc.prediction += t.prediction;
            acc.score += t.score;
            acc.imitation += t.imitation;
            acc.total += t.total;
            n += 1.0;
        }
        if n > 0.0 {
            acc.prediction /= n;
            acc.score /= n;
            acc.imitation /= n;
            acc.total /= n;
        }
        acc
    }
}

/// Loss terms for one frame given the network output. The imitation term
/// compares the rollout of `imitation_plan` (the best-scored mode when
/// `None`) with the ground truth.
///
/// Returns the terms, the gradient of the weighted total with respect to
/// the scores and predictions, and its gradient with respect to the
/// imitation plan.
pub fn il_terms(
    out: &MultiModalOutput,
    enc: &SceneEncoding,
    frame: &Frame,
    cfg: &ILLossConfig,
    kin: &KinematicParams,
    imitation_plan: Option<&ControlSequence>,
) -> Result<(ILTerms, OutputGrad, Vec<f64>)> {
    let modes = out.plans.len();
    let t = out.plans[0].len();
    if frame.ego_future_gt.len() < t {
        return Err(Error::invalid(format!(
            "frame {}#{} has {} ground-truth steps, need {t}",
            frame.scene_id,
            frame.frame_index,
            frame.ego_future_gt.len()
        )));
    }
    let start = frame.current();
    let gt = &frame.ego_future_gt[..t];
    let mut grad = OutputGrad {
        plans: vec![vec![0.0; 2 * t]; modes],
        logits: vec![0.0; modes],
        predictions: vec![vec![[0.0; 2]; t]; out.predictions.len()],
    };

    // imitation
    let plan = imitation_plan.unwrap_or(&out.plans[best_mode(&out.logits)]);
    let traj = rollout(start, plan, kin)?;
    let norm = 1.0 / (2 * t) as f64;
    let mut imitation = 0.0;
    let mut state_grads = vec![[0.0; 4]; t + 1];
    for k in 0..t {
        let s = &traj.states[k + 1];
        for (c, d) in [s.x - gt[k].x, s.y - gt[k].y].into_iter().enumerate() {
            imitation += smooth_l1(d) * norm;
            state_grads[k + 1][c] = cfg.lambda3 * smooth_l1_grad(d) * norm;
        }
    }
    let (_, plan_grad) = rollout_vjp(start, plan, kin, &state_grads)?;

    // prediction, over occupied slots that have a ground-truth future
    let mut prediction = 0.0;
    let mut entries = 0usize;
    let mut pred_terms = Vec::new();
    for (slot, &idx) in enc.neighbor_indices.iter().enumerate().take(out.predictions.len()) {
        let Some(fut) = frame.neighbor_futures_gt.get(idx).filter(|f| f.len() >= t) else {
            continue;
        };
        for k in 0..t {
            let p = out.predictions[slot][k];
            let d = [p[0] - fut[k][0], p[1] - fut[k][1]];
            pred_terms.push((slot, k, d));
        }
        entries += 2 * t;
    }
    if entries > 0 {
        let norm = 1.0 / entries as f64;
        for (slot, k, d) in pred_terms {
            prediction += (smooth_l1(d[0]) + smooth_l1(d[1])) * norm;
            grad.predictions[slot][k] = [
                cfg.lambda1 * smooth_l1_grad(d[0]) * norm,
                cfg.lambda1 * smooth_l1_grad(d[1]) * norm,
            ];
        }
    }

    // score: cross-entropy towards the mode ending closest to the truth
    let end = gt[t - 1].position();
    let mut target = 0;
    let mut best = f64::INFINITY;
    for (m, p) in out.plans.iter().enumerate() {
        let last = *rollout(start, p, kin)?.states.last().expect("non-empty rollout");
        let d = (last.x - end[0]).hypot(last.y - end[1]);
        if d < best {
            best = d;
            target = m;
        }
    }
    let max = out.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = out.logits.iter().map(|l| (l - max).exp()).sum();
    let score = max + z.ln() - out.logits[target];
    for (m, l) in out.logits.iter().enumerate() {
        let p = (l - max).exp() / z;
        grad.logits[m] = cfg.lambda2 * (p - if m == target { 1.0 } else { 0.0 });
    }

    let terms = ILTerms {
        prediction,
        score,
        imitation,
        total: cfg.lambda1 * prediction + cfg.lambda2 * score + cfg.lambda3 * imitation,
    };
    Ok((terms, grad, plan_grad))
}

/// Mean imitation loss over `frames` and its parameter gradient.
pub fn il_loss_batch(
    params: &PolicyParams,
    frames: &[&Frame],
    cfg: &ILLossConfig,
    kin: &KinematicParams,
) -> Result<(ILTerms, Vec<f64>)> {
    cfg.validate()?;
    let encodings: Vec<SceneEncoding> = frames.par_iter().map(|f| encode_scene(f)).collect();
    let refs: Vec<&SceneEncoding> = encodings.iter().collect();
    let (outputs, cache) = forward_batch(params, &refs, kin)?;
    let per_frame: Vec<(ILTerms, OutputGrad)> = outputs
        .par_iter()
        .zip(encodings.par_iter())
        .zip(frames.par_iter())
        .map(|((out, enc), frame)| {
            let (terms, mut grad, plan_grad) = il_terms(out, enc, frame, cfg, kin, None)?;
            grad.plans[best_mode(&out.logits)] = plan_grad;
            Ok((terms, grad))
        })
        .collect::<Result<_>>()?;
    let n = frames.len() as f64;
    let terms = ILTerms::mean(per_frame.iter().map(|p| &p.0));
    let grads: Vec<OutputGrad> = per_frame.into_iter().map(|p| p.1).collect();
    let mut g = backward_batch(params, &cache, &grads);
    g.iter_mut().for_each(|v| *v /= n);
    Ok((terms, g))
}

/// Imitation loss of one frame and its gradient with respect to the
/// network parameters.
pub fn il_loss(params: &PolicyParams, frame: &Frame, cfg: &ILLossConfig, kin: &KinematicParams) -> Result<(f64, Vec<f64>)> {
    let (terms, g) = il_loss_batch(params, &[frame], cfg, kin)?;
    Ok((terms.total, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{forward, PolicyConfig};
    use crate::scenarios::fixtures::straight_frame;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1(1.0), 0.5);
        assert_eq!(smooth_l1_grad(0.0), 0.0);
    }

    fn tiny() -> PolicyConfig {
        PolicyConfig {
            hidden: 8,
            horizon: 5,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn perfect_outputs_have_zero_imitation_and_prediction() {
        let kin = KinematicParams::default();
        let frame = straight_frame(10.0, 3);
        let enc = encode_scene(&frame);
        let p = PolicyParams::zeros(tiny());
        let out = forward(&p, &enc, &kin).unwrap();
        // parked neighbors and a constant-speed ego match the zero network
        let (terms, grad, plan_grad) = il_terms(&out, &enc, &frame, &ILLossConfig::default(), &kin, None).unwrap();
        assert_eq!(terms.imitation, 0.0);
        assert_eq!(terms.prediction, 0.0);
        assert!(plan_grad.iter().all(|g| *g == 0.0));
        assert!(grad.predictions.iter().flatten().all(|g| *g == [0.0, 0.0]));
    }

    #[test]
    fn missing_ground_truth_is_rejected() {
        let kin = KinematicParams::default();
        let mut frame = straight_frame(10.0, 0);
        frame.ego_future_gt.clear();
        let p = PolicyParams::zeros(tiny());
        let r = il_loss(&p, &frame, &ILLossConfig::default(), &kin);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn gradient_matches_finite_differences_on_a_tiny_network() {
        let kin = KinematicParams::default();
        let mut frame = straight_frame(8.0, 3);
        // give the ground truth some curvature and the neighbors some motion
        for (k, s) in frame.ego_future_gt.iter_mut().enumerate() {
            s.y += 0.02 * (k * k) as f64;
        }
        for f in &mut frame.neighbor_futures_gt {
            for (k, p) in f.iter_mut().enumerate() {
                p[0] += 0.9 * k as f64;
            }
        }
        let cfg = ILLossConfig {
            lambda1: 0.7,
            lambda2: 1.3,
            lambda3: 2.0,
        };
        let mut p = PolicyParams::init(tiny(), 5).unwrap();
        // larger output weights so the three modes differ visibly
        let n = p.values.len();
        let out_w = tiny().output_dim() * (tiny().hidden + 1);
        p.values[n - out_w..].iter_mut().for_each(|v| *v *= 5.0);
        let (_, g) = il_loss(&p, &frame, &cfg, &kin).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for k in (0..n).step_by(7) {
            let mut q = p.clone();
            q.values[k] += h;
            let up = il_loss(&q, &frame, &cfg, &kin).unwrap().0;
            q.values[k] -= 2.0 * h;
            let down = il_loss(&q, &frame, &cfg, &kin).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-3 * g[k].abs().max(fd.abs()).max(1e-4), "param {k}: {} vs {fd}", g[k]);
            checked += 1;
        }
        assert!(checked > 1000);
    }
}
