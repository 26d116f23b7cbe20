//! Style fine-tuning: trajectory classes, mixed expert/user batches, the
//! combined imitation + style loss and the per-class update loop.

mod classify;
mod sampler;

pub use classify::{classify_frame, Partitioned, TrajectoryClass, MOVING_DISTANCE, MOVING_SPEED, TURN_HEADING};
pub use sampler::{expert_count, sample_mixed_batch};

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{raw_costs, CostScene, CostWeights, NUM_TERMS};
use crate::error::{Error, Result};
use crate::features::FeatureScaling;
use crate::irl::{feature_expectation, irl_loss, StyleTarget};
use crate::kinematics::{recover_controls, rollout, rollout_vjp, ControlSequence, KinematicParams, Trajectory};
use crate::optimizer::{refine_tracked, Refinement, SolverConfig};
use crate::policy::{backward_batch, best_mode, encode_scene, forward_batch, il_terms, ILLossConfig, MultiModalOutput, OutputGrad, PolicyParams, SceneEncoding};
use crate::scenarios::{Frame, FUTURE_LEN};
use crate::train::{Optimizer, UpdateRule};

/// Whether plans pass through the cost-function optimizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Structure {
    #[default]
    #[serde(rename = "nn")]
    Nn,
    #[serde(rename = "nn-cf")]
    NnCf,
}

/// Which parameters a fine-tuning update changes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateTarget {
    #[default]
    #[serde(rename = "nn")]
    Nn,
    #[serde(rename = "cf")]
    Cf,
    #[serde(rename = "nn-cf")]
    NnCf,
}

impl UpdateTarget {
    pub fn network(self) -> bool {
        matches!(self, UpdateTarget::Nn | UpdateTarget::NnCf)
    }

    pub fn costs(self) -> bool {
        matches!(self, UpdateTarget::Cf | UpdateTarget::NnCf)
    }
}

/// How the cost weights receive their gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostGradient {
    /// Through the unrolled optimizer, from the imitation and style losses.
    #[default]
    Unrolled,
    /// Maximum-entropy contrast between the demonstrated and planned costs,
    /// `w_i (|c_i(demo)|^2 - |c_i(plan)|^2)`, scaled by `alpha`.
    Contrast,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FineTuneConfig {
    pub alpha: f64,
    pub expert_proportion: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_nn: f64,
    pub lr_cf: f64,
    pub seed: u64,
    pub structure: Structure,
    pub update_target: UpdateTarget,
    pub cost_gradient: CostGradient,
    pub update_rule: UpdateRule,
    pub solver: SolverConfig,
    pub il: ILLossConfig,
    pub beta: FeatureScaling,
    pub kinematics: KinematicParams,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            expert_proportion: 0.5,
            batch_size: 64,
            steps: 100,
            lr_nn: 1e-5,
            lr_cf: 1e-3,
            seed: 0,
            structure: Structure::Nn,
            update_target: UpdateTarget::Nn,
            cost_gradient: CostGradient::Unrolled,
            update_rule: UpdateRule::Sgd,
            solver: SolverConfig::default(),
            il: ILLossConfig::default(),
            beta: FeatureScaling::default(),
            kinematics: KinematicParams::default(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.expert_proportion) {
            return Err(Error::invalid(format!("expert proportion {} outside [0, 1]", self.expert_proportion)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        for (name, lr) in [("lr_nn", self.lr_nn), ("lr_cf", self.lr_cf)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::invalid(format!("{name} {lr} must be finite and >= 0")));
            }
        }
        if self.update_target.costs() && self.structure == Structure::Nn {
            return Err(Error::invalid("updating cost weights requires the nn-cf structure"));
        }
        self.update_rule.validate()?;
        self.solver.validate()?;
        self.il.validate()?;
        self.beta.validate()?;
        self.kinematics.validate()
    }
}

/// Combined loss of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TilTerms {
    pub il: f64,
    pub irl: f64,
    pub til: f64,
}

#[derive(Clone, Debug)]
pub struct TilOutput {
    pub terms: TilTerms,
    pub grad_nn: Vec<f64>,
    pub grad_cf: [f64; NUM_TERMS],
}

struct FramePlan<'a> {
    enc: SceneEncoding,
    out: MultiModalOutput,
    refined: Option<Refinement<'a>>,
    plan: ControlSequence,
}

/// Cost scene seeded with the policy's own neighbor predictions.
fn policy_scene<'a>(frame: &'a Frame, enc: &SceneEncoding, out: &MultiModalOutput, kin: &KinematicParams) -> Result<CostScene<'a>> {
    let horizon = out.plans[0].len();
    let preds = out.predictions.iter().take(enc.neighbor_indices.len()).cloned().collect();
    Ok(CostScene::from_frame(frame, horizon, kin)?.with_predictions(preds))
}

/// Plans for a batch: the network's best mode, refined by the optimizer
/// under [`Structure::NnCf`].
pub fn plan_batch(
    params: &PolicyParams,
    weights: &CostWeights,
    frames: &[&Frame],
    structure: Structure,
    solver: &SolverConfig,
    kin: &KinematicParams,
) -> Result<(Vec<MultiModalOutput>, Vec<ControlSequence>)> {
    let encodings: Vec<SceneEncoding> = frames.par_iter().map(|f| encode_scene(f)).collect();
    let refs: Vec<&SceneEncoding> = encodings.iter().collect();
    let (outputs, _) = forward_batch(params, &refs, kin)?;
    let plans = outputs
        .par_iter()
        .zip(encodings.par_iter())
        .zip(frames.par_iter())
        .map(|((out, enc), frame)| {
            let best = out.plans[best_mode(&out.logits)].clone();
            match structure {
                Structure::Nn => Ok(best),
                Structure::NnCf => {
                    let scene = policy_scene(frame, enc, out, kin)?;
                    refine_tracked(&best, frame.current(), &scene, weights, solver, kin).map(|r| r.plan())
                }
            }
        })
        .collect::<Result<_>>()?;
    Ok((outputs, plans))
}

/// `L_TIL = L_IL + alpha * L_IRL` on a single-class batch and its
/// gradients with respect to the network parameters and cost weights.
pub fn til_loss(
    params: &PolicyParams,
    weights: &CostWeights,
    batch: &[&Frame],
    class: TrajectoryClass,
    target: &StyleTarget,
    cfg: &FineTuneConfig,
) -> Result<TilOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let kin = &cfg.kinematics;
    target.require(class)?;
    let encodings: Vec<SceneEncoding> = batch.par_iter().map(|f| encode_scene(f)).collect();
    let refs: Vec<&SceneEncoding> = encodings.iter().collect();
    let (outputs, cache) = forward_batch(params, &refs, kin)?;

    // scenes must outlive the refinements that borrow them
    let scenes: Vec<Option<CostScene<'_>>> = match cfg.structure {
        Structure::Nn => batch.iter().map(|_| None).collect(),
        Structure::NnCf => outputs
            .par_iter()
            .zip(encodings.par_iter())
            .zip(batch.par_iter())
            .map(|((out, enc), frame)| policy_scene(frame, enc, out, kin).map(Some))
            .collect::<Result<_>>()?,
    };
    let plans: Vec<FramePlan<'_>> = outputs
        .into_par_iter()
        .zip(encodings.into_par_iter())
        .zip(batch.par_iter().zip(scenes.par_iter()))
        .map(|((out, enc), (frame, scene))| {
            let best = out.plans[best_mode(&out.logits)].clone();
            let refined = match scene {
                Some(scene) => Some(refine_tracked(&best, frame.current(), scene, weights, &cfg.solver, kin)?),
                None => None,
            };
            let plan = refined.as_ref().map_or(best, |r| r.plan());
            Ok(FramePlan { enc, out, refined, plan })
        })
        .collect::<Result<_>>()?;

    let n = batch.len() as f64;
    let il: Vec<_> = plans
        .par_iter()
        .zip(batch.par_iter())
        .map(|(p, frame)| il_terms(&p.out, &p.enc, frame, &cfg.il, kin, Some(&p.plan)))
        .collect::<Result<_>>()?;
    let loss_il = il.iter().map(|t| t.0.total).sum::<f64>() / n;

    let mut plan_grads: Vec<Vec<f64>> = il.iter().map(|t| t.2.clone()).collect();
    let mut loss_irl = 0.0;
    if cfg.alpha != 0.0 {
        let trajs: Vec<Trajectory> = plans
            .par_iter()
            .zip(batch.par_iter())
            .map(|(p, f)| rollout(f.current(), &p.plan, kin))
            .collect::<Result<_>>()?;
        let (l, state_grads) = irl_loss(&trajs, batch, class, target, &cfg.beta)?;
        loss_irl = l;
        // per-frame IL gradients are averaged after the backward pass, so
        // the batch-level style gradient is pre-multiplied by the batch size
        let scale = cfg.alpha * n;
        let extra: Vec<Vec<f64>> = plans
            .par_iter()
            .zip(batch.par_iter())
            .zip(state_grads.par_iter())
            .map(|((p, f), g)| Ok(rollout_vjp(f.current(), &p.plan, kin, g)?.1))
            .collect::<Result<_>>()?;
        for (pg, e) in plan_grads.iter_mut().zip(extra) {
            for (a, b) in pg.iter_mut().zip(e) {
                *a += scale * b;
            }
        }
    }

    let pulled: Vec<(Vec<f64>, [f64; NUM_TERMS])> = plans
        .par_iter()
        .zip(plan_grads.par_iter())
        .map(|(p, g)| match &p.refined {
            Some(r) => r.vjp(g),
            None => (g.clone(), [0.0; NUM_TERMS]),
        })
        .collect();

    let mut grad_cf = [0.0; NUM_TERMS];
    match cfg.cost_gradient {
        CostGradient::Unrolled => {
            for (_, gw) in &pulled {
                for (a, b) in grad_cf.iter_mut().zip(gw) {
                    *a += b;
                }
            }
        }
        CostGradient::Contrast if cfg.structure == Structure::NnCf => {
            let contrasts: Vec<[f64; NUM_TERMS]> = plans
                .par_iter()
                .zip(batch.par_iter().zip(scenes.par_iter()))
                .map(|(p, (f, scene))| {
                    let scene = scene.as_ref().expect("nn-cf builds scenes");
                    let demo = recover_controls(f.current(), &f.ego_future_gt[..p.plan.len()], kin);
                    let sq = |pi: &ControlSequence| {
                        let c = raw_costs(&pi.to_flat(), f.current(), scene, kin, false).costs;
                        let t = pi.len();
                        std::array::from_fn::<f64, NUM_TERMS, _>(|i| c[i * t..(i + 1) * t].iter().map(|v| v * v).sum())
                    };
                    let (d, q) = (sq(&demo), sq(&p.plan));
                    let w = weights.to_array();
                    std::array::from_fn(|i| cfg.alpha * w[i] * (d[i] - q[i]))
                })
                .collect();
            for c in contrasts {
                for (a, b) in grad_cf.iter_mut().zip(c) {
                    *a += b;
                }
            }
        }
        CostGradient::Contrast => {}
    }
    grad_cf.iter_mut().for_each(|g| *g /= n);

    let grads: Vec<OutputGrad> = il
        .into_iter()
        .zip(pulled)
        .zip(&plans)
        .map(|(((_, mut g, _), (gp, _)), p)| {
            g.plans[best_mode(&p.out.logits)] = gp;
            g
        })
        .collect();
    let mut grad_nn = backward_batch(params, &cache, &grads);
    grad_nn.iter_mut().for_each(|v| *v /= n);

    Ok(TilOutput {
        terms: TilTerms {
            il: loss_il,
            irl: loss_irl,
            til: loss_il + cfg.alpha * loss_irl,
        },
        grad_nn,
        grad_cf,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub class: TrajectoryClass,
    pub loss_il: f64,
    pub loss_irl: f64,
    pub loss_til: f64,
}

pub const LOG_HEADER: &str = "step,class,loss_il,loss_irl,loss_til";

pub fn write_log_csv(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{:?},{:?},{:?}\n", r.step, r.class, r.loss_il, r.loss_irl, r.loss_til));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct FineTuneResult {
    pub params: PolicyParams,
    pub weights: CostWeights,
    pub log: Vec<LogRow>,
}

/// Random stream for the batch of `(step, class)`.
pub fn batch_rng(seed: u64, step: usize, class: TrajectoryClass) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((step * TrajectoryClass::ALL.len() + class as usize) as u64);
    rng
}

/// Alternates one update per styled class for `cfg.steps` outer steps.
pub fn finetune(
    params: &PolicyParams,
    weights: &CostWeights,
    expert: &[Frame],
    user: &[Frame],
    cfg: &FineTuneConfig,
) -> Result<FineTuneResult> {
    cfg.validate()?;
    params.validate()?;
    weights.validate()?;
    if params.config.horizon > FUTURE_LEN {
        return Err(Error::invalid("policy horizon exceeds the ground-truth future"));
    }
    let mut params = params.clone();
    let mut weights = *weights;
    let mut log = Vec::new();
    if cfg.steps == 0 {
        return Ok(FineTuneResult { params, weights, log });
    }
    let target = feature_expectation(user, &cfg.beta)?;
    if let Some(c) = target.missing().first() {
        return Err(Error::data(format!("user dataset has no {c} frames")));
    }
    let expert_p = Partitioned::new(expert);
    let user_p = Partitioned::new(user);
    let mut opt_nn = Optimizer::new(cfg.update_rule, params.values.len());
    let mut opt_cf = Optimizer::new(cfg.update_rule, NUM_TERMS);

    for step in 0..cfg.steps {
        for class in TrajectoryClass::STYLED {
            let ctx = |e: Error| e.context(format!("step {} class {class}", step + 1));
            let mut rng = batch_rng(cfg.seed, step, class);
            let batch = sample_mixed_batch(&expert_p, &user_p, class, cfg.batch_size, cfg.expert_proportion, &mut rng)
                .map_err(ctx)?;
            let out = til_loss(&params, &weights, &batch, class, &target, cfg).map_err(ctx)?;
            if !out.terms.til.is_finite() || out.grad_nn.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    step: step + 1,
                    reason: format!("non-finite loss or gradient on {class} batch"),
                });
            }
            if cfg.update_target.network() {
                opt_nn.apply(&mut params.values, &out.grad_nn, cfg.lr_nn);
            }
            if cfg.update_target.costs() {
                let mut w = weights.to_array();
                opt_cf.apply(&mut w, &out.grad_cf, cfg.lr_cf);
                weights = CostWeights::from_array(w.map(|v| v.max(0.0)));
            }
            log.push(LogRow {
                step: step + 1,
                class,
                loss_il: out.terms.il,
                loss_irl: out.terms.irl,
                loss_til: out.terms.til,
            });
        }
    }
    Ok(FineTuneResult { params, weights, log })
}
