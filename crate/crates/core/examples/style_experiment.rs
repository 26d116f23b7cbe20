//! Pre-train on pooled styles, fine-tune toward one, compare style error.
//! Knobs come from environment variables (see `knob`).

use std::time::Instant;

use tilplan::costs::CostWeights;
use tilplan::eval::{evaluate, Domain, EvalConfig};
use tilplan::irl::feature_expectation;
use tilplan::policy::{PolicyConfig, PolicyParams};
use tilplan::pretrain::{pretrain, PretrainConfig};
use tilplan::scenarios::{generate_scenes, segment_frames, Frame, StyleParams};
use tilplan::train::UpdateRule;
use tilplan::transfer::{finetune, FineTuneConfig, Structure, UpdateTarget};

fn knob(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn frames(n: usize, style: &StyleParams, seed: u64) -> Vec<Frame> {
    generate_scenes(n, style, seed).unwrap().iter().flat_map(|s| segment_frames(s).unwrap()).collect()
}

fn main() {
    let t0 = Instant::now();
    let a = StyleParams::aggressive();
    let b = StyleParams::gentle();
    let scenes = knob("SCENES", 40.0) as usize;
    let mut expert = frames(scenes, &a, 1);
    expert.extend(frames(scenes, &b, 2));
    expert.extend(frames(scenes, &StyleParams::neutral(), 3));
    let user_pool = frames(20, &a, 10);
    let user: Vec<Frame> = user_pool.into_iter().step_by(4).take(64).collect();
    let held = frames(20, &a, 20);
    println!("expert {} user {} held {}", expert.len(), user.len(), held.len());

    let adam = knob("ADAM", 1.0) > 0.5;
    let rule = if adam { UpdateRule::adam() } else { UpdateRule::Sgd };
    let p0 = PolicyParams::init(PolicyConfig::default(), 0).unwrap();
    let pcfg = PretrainConfig {
        epochs: knob("EPOCHS", 5.0) as usize,
        lr: knob("LR_PRE", 1e-3),
        update_rule: rule,
        ..Default::default()
    };
    let (pre, curve) = pretrain(&p0, &expert, &pcfg).unwrap();
    println!("pretrain curve {curve:?} ({:.1}s)", t0.elapsed().as_secs_f64());

    let ecfg = EvalConfig::default();
    let w = CostWeights::default();
    let held_target = feature_expectation(&held, &ecfg.beta).unwrap();
    let user_target = feature_expectation(&user, &ecfg.beta).unwrap();
    let r0 = evaluate("pre", Domain::Out, &pre, &w, &held, &held_target, Structure::Nn, &ecfg).unwrap();
    let i0 = evaluate("pre", Domain::In, &pre, &w, &user, &user_target, Structure::Nn, &ecfg).unwrap();
    println!("pre out {:.5} in {:.5} pe3 {:.3}", r0.style_error, i0.style_error, r0.plan_error_3s);

    let cf = knob("CF", 0.0) > 0.5;
    let structure = if cf { Structure::NnCf } else { Structure::Nn };
    for (name, alpha, p) in [("il", 0.0, 0.0), ("til", knob("ALPHA", 100.0), 0.5)] {
        let cfg = FineTuneConfig {
            alpha,
            expert_proportion: p,
            steps: knob("STEPS", 100.0) as usize,
            lr_nn: knob("LR_NN", 1e-5),
            update_rule: rule,
            seed: knob("SEED", 0.0) as u64,
            structure,
            update_target: if cf { UpdateTarget::NnCf } else { UpdateTarget::Nn },
            ..Default::default()
        };
        let t = Instant::now();
        let res = finetune(&pre, &w, &expert, &user, &cfg).unwrap();
        let r = evaluate(name, Domain::Out, &res.params, &res.weights, &held, &held_target, structure, &ecfg).unwrap();
        let i = evaluate(name, Domain::In, &res.params, &res.weights, &user, &user_target, structure, &ecfg).unwrap();
        let last = res.log.last().unwrap();
        println!("weights {:?}", res.weights.to_array());
        println!(
            "{name} out {:.5} in {:.5} pe3 {:.3} ratio {:.3} irl {:.4} ({:.1}s)",
            r.style_error,
            i.style_error,
            r.plan_error_3s,
            r.style_error / r0.style_error,
            last.loss_irl,
            t.elapsed().as_secs_f64()
        );
    }
}
