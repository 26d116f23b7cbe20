//! Open-loop evaluation: plan error, prediction error, safety rates and
//! style error, plus CSV/JSON report emission.

mod geometry;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use geometry::OrientedBox;

use crate::costs::CostWeights;
use crate::error::{Error, Result};
use crate::features::{extract_features, style_error, FeatureScaling, FeatureVector};
use crate::irl::StyleTarget;
use crate::kinematics::{rollout, ControlSequence, KinematicParams, Trajectory};
use crate::optimizer::SolverConfig;
use crate::policy::{encode_scene, PolicyParams};
use crate::scenarios::{Frame, LightState};
use crate::transfer::{classify_frame, plan_batch, Structure, TrajectoryClass};

/// Future-step indices of the 1 s and 3 s plan-error checkpoints.
const STEP_1S: usize = 9;
const STEP_3S: usize = 29;

/// Frames per policy batch during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ego_half_length: f64,
    pub ego_half_width: f64,
    /// Lateral offset beyond which the ego counts as off route (m).
    pub road_half_width: f64,
    pub solver: SolverConfig,
    pub beta: FeatureScaling,
    pub kinematics: KinematicParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ego_half_length: 2.4,
            ego_half_width: 1.0,
            road_half_width: 3.5,
            solver: SolverConfig::default(),
            beta: FeatureScaling::default(),
            kinematics: KinematicParams::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("ego_half_length", self.ego_half_length),
            ("ego_half_width", self.ego_half_width),
            ("road_half_width", self.road_half_width),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        self.solver.validate()?;
        self.beta.validate()?;
        self.kinematics.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    In,
    Out,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::In => "in",
            Domain::Out => "out",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in" => Ok(Domain::In),
            "out" => Ok(Domain::Out),
            _ => Err(Error::invalid(format!("unknown domain '{s}' (expected in or out)"))),
        }
    }
}

/// Rates are percentages; errors are in meters except the dimensionless
/// style error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub domain: Domain,
    pub plan_error_1s: f64,
    pub plan_error_3s: f64,
    pub ade_5s: f64,
    pub fde_5s: f64,
    pub collision_rate: f64,
    pub off_route_rate: f64,
    pub red_light_rate: f64,
    pub style_error: f64,
    pub frame_count: usize,
}

/// A plan for one frame plus neighbor forecasts keyed by neighbor index.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePlan {
    pub plan: ControlSequence,
    pub predictions: Vec<(usize, Vec<[f64; 2]>)>,
}

/// Per-frame results before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameOutcome {
    pub plan_error_1s: f64,
    pub plan_error_3s: f64,
    /// `None` when the frame has no forecast neighbors.
    pub displacement: Option<(f64, f64)>,
    pub flags: SafetyFlags,
    pub class: TrajectoryClass,
    pub features: FeatureVector,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SafetyFlags {
    pub collision: bool,
    pub off_route: bool,
    pub red_light: bool,
}

/// Heading of each ground-truth neighbor step, from consecutive positions.
/// Steps without motion keep the previous heading.
fn neighbor_headings(start: [f64; 2], start_heading: f64, future: &[[f64; 2]]) -> Vec<f64> {
    let mut prev = start;
    let mut h = start_heading;
    future
        .iter()
        .map(|p| {
            let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
            if dx.hypot(dy) > 1e-3 {
                h = dy.atan2(dx);
            }
            prev = *p;
            h
        })
        .collect()
}

/// Collision, off-route and red-light checks over the future states of
/// `traj` (state 0 is the current state and is skipped).
pub fn safety_flags(frame: &Frame, traj: &Trajectory, cfg: &EvalConfig) -> SafetyFlags {
    let future = &traj.states[1..];
    let mut flags = SafetyFlags::default();

    'outer: for (n, rec) in frame.neighbors.iter().enumerate() {
        let Some(gt) = frame.neighbor_futures_gt.get(n) else { break };
        let cur = rec.current();
        let headings = neighbor_headings([cur.x, cur.y], cur.theta, gt);
        for (k, s) in future.iter().enumerate().take(gt.len()) {
            let ego = OrientedBox::new([s.x, s.y], s.theta, cfg.ego_half_length, cfg.ego_half_width);
            let other = OrientedBox::new(gt[k], headings[k], rec.half_length, rec.half_width);
            if ego.overlaps(&other) {
                flags.collision = true;
                break 'outer;
            }
        }
    }

    let proj: Vec<_> = traj.states.iter().map(|s| frame.route.project(s.x, s.y)).collect();
    flags.off_route = proj[1..].iter().any(|p| p.lateral.abs() > cfg.road_half_width);

    let light = &frame.traffic_light;
    if light.state == LightState::Red {
        flags.red_light = proj.windows(2).enumerate().any(|(k, w)| {
            w[0].s < light.stop_line && w[1].s >= light.stop_line && light.is_red_at((k + 1) as f64 * traj.dt)
        });
    }
    flags
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn assess_frame(frame: &Frame, plan: &FramePlan, cfg: &EvalConfig) -> Result<FrameOutcome> {
    let ctx = || format!("frame {}#{}", frame.scene_id, frame.frame_index);
    if plan.plan.len() <= STEP_3S || frame.ego_future_gt.len() <= STEP_3S {
        return Err(Error::invalid(format!("{}: plan and ground truth need at least {} steps", ctx(), STEP_3S + 1)));
    }
    let traj = rollout(frame.current(), &plan.plan, &cfg.kinematics).map_err(|e| e.context(ctx()))?;
    let err_at = |k: usize| {
        let (p, g) = (&traj.states[k + 1], &frame.ego_future_gt[k]);
        distance([p.x, p.y], [g.x, g.y])
    };

    let mut ade = 0.0;
    let mut fde = 0.0;
    let mut counted = 0;
    for (n, pred) in &plan.predictions {
        let gt = frame
            .neighbor_futures_gt
            .get(*n)
            .ok_or_else(|| Error::invalid(format!("{}: forecast for unknown neighbor {n}", ctx())))?;
        let len = pred.len().min(gt.len());
        if len == 0 {
            continue;
        }
        ade += (0..len).map(|k| distance(pred[k], gt[k])).sum::<f64>() / len as f64;
        fde += distance(pred[len - 1], gt[len - 1]);
        counted += 1;
    }
    let displacement = (counted > 0).then(|| (ade / counted as f64, fde / counted as f64));

    Ok(FrameOutcome {
        plan_error_1s: err_at(STEP_1S),
        plan_error_3s: err_at(STEP_3S),
        displacement,
        flags: safety_flags(frame, &traj, cfg),
        class: classify_frame(frame),
        features: extract_features(&traj, frame, &cfg.beta).map_err(|e| e.context(ctx()))?,
    })
}

/// Style error of each styled class present in both the outcomes and the
/// target, averaged with equal class weight. Zero when no class qualifies.
fn class_style_error(outcomes: &[FrameOutcome], target: &StyleTarget) -> f64 {
    let errors: Vec<f64> = TrajectoryClass::STYLED
        .iter()
        .filter_map(|&c| {
            let goal = target.get(c)?;
            let mean = FeatureVector::mean(outcomes.iter().filter(|o| o.class == c).map(|o| &o.features))?;
            Some(style_error(&mean, goal))
        })
        .collect();
    if errors.is_empty() {
        0.0
    } else {
        errors.iter().sum::<f64>() / errors.len() as f64
    }
}

pub fn aggregate(model: &str, domain: Domain, outcomes: &[FrameOutcome], target: &StyleTarget) -> MetricsReport {
    let n = outcomes.len().max(1) as f64;
    let mean = |f: &dyn Fn(&FrameOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / n;
    let pct = |f: &dyn Fn(&SafetyFlags) -> bool| 100.0 * outcomes.iter().filter(|o| f(&o.flags)).count() as f64 / n;
    let disp: Vec<(f64, f64)> = outcomes.iter().filter_map(|o| o.displacement).collect();
    let m = disp.len().max(1) as f64;
    MetricsReport {
        model: model.to_string(),
        domain,
        plan_error_1s: mean(&|o| o.plan_error_1s),
        plan_error_3s: mean(&|o| o.plan_error_3s),
        ade_5s: disp.iter().map(|d| d.0).sum::<f64>() / m,
        fde_5s: disp.iter().map(|d| d.1).sum::<f64>() / m,
        collision_rate: pct(&|f| f.collision),
        off_route_rate: pct(&|f| f.off_route),
        red_light_rate: pct(&|f| f.red_light),
        style_error: class_style_error(outcomes, target),
        frame_count: outcomes.len(),
    }
}

/// Scores externally produced plans, one per frame.
pub fn evaluate_plans(
    model: &str,
    domain: Domain,
    frames: &[Frame],
    plans: &[FramePlan],
    target: &StyleTarget,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.validate()?;
    if frames.is_empty() {
        return Err(Error::invalid("empty evaluation dataset"));
    }
    if frames.len() != plans.len() {
        return Err(Error::invalid(format!("{} plans for {} frames", plans.len(), frames.len())));
    }
    let outcomes: Vec<FrameOutcome> = frames
        .par_iter()
        .zip(plans.par_iter())
        .map(|(f, p)| assess_frame(f, p, cfg))
        .collect::<Result<_>>()?;
    Ok(aggregate(model, domain, &outcomes, target))
}

/// Plans every frame with the policy (refined under nn-cf) and scores it.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &str,
    domain: Domain,
    params: &PolicyParams,
    weights: &CostWeights,
    dataset: &[Frame],
    target: &StyleTarget,
    structure: Structure,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty evaluation dataset"));
    }
    let mut plans = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(EVAL_CHUNK) {
        let refs: Vec<&Frame> = chunk.iter().collect();
        let (outputs, chosen) = plan_batch(params, weights, &refs, structure, &cfg.solver, &cfg.kinematics)?;
        for ((frame, out), plan) in chunk.iter().zip(outputs).zip(chosen) {
            let enc = encode_scene(frame);
            let predictions = enc.neighbor_indices.iter().copied().zip(out.predictions).collect();
            plans.push(FramePlan { plan, predictions });
        }
    }
    evaluate_plans(model, domain, dataset, &plans, target, cfg)
}

pub const REPORT_HEADER: &str =
    "model,domain,plan_err_1s,plan_err_3s,ade_5s,fde_5s,collision_pct,off_route_pct,red_light_pct,style_error,frames";

/// The JSON mirror sits next to the CSV with a `.json` extension.
pub fn json_mirror_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn report_csv(reports: &[MetricsReport]) -> Result<String> {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in reports {
        if r.model.contains([',', '\n', '"']) {
            return Err(Error::invalid(format!("model name {:?} cannot be written to CSV", r.model)));
        }
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.domain.name(),
            r.plan_error_1s,
            r.plan_error_3s,
            r.ade_5s,
            r.fde_5s,
            r.collision_rate,
            r.off_route_rate,
            r.red_light_rate,
            r.style_error,
            r.frame_count
        )
        .expect("writing to a String");
    }
    Ok(out)
}

pub fn parse_report_csv(text: &str) -> Result<Vec<MetricsReport>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == REPORT_HEADER => {}
        _ => return Err(Error::Parse { line: 1, reason: "missing report header".into() }),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let bad = |reason: String| Error::Parse { line: i + 1, reason };
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 11 {
                return Err(bad(format!("expected 11 columns, found {}", cols.len())));
            }
            let num = |j: usize| cols[j].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", j + 1)));
            Ok(MetricsReport {
                model: cols[0].to_string(),
                domain: cols[1].parse().map_err(|e: Error| bad(e.to_string()))?,
                plan_error_1s: num(2)?,
                plan_error_3s: num(3)?,
                ade_5s: num(4)?,
                fde_5s: num(5)?,
                collision_rate: num(6)?,
                off_route_rate: num(7)?,
                red_light_rate: num(8)?,
                style_error: num(9)?,
                frame_count: cols[10].parse().map_err(|e| bad(format!("column 11: {e}")))?,
            })
        })
        .collect()
}

/// Writes the CSV report and its JSON mirror.
pub fn emit_report(reports: &[MetricsReport], path: &Path) -> Result<()> {
    std::fs::write(path, report_csv(reports)?).map_err(|e| Error::io(path, e))?;
    let json = json_mirror_path(path);
    std::fs::write(&json, serde_json::to_string_pretty(reports)?).map_err(|e| Error::io(json, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::{recover_controls, AgentState};
    use crate::scenarios::fixtures::straight_frame;
    use crate::scenarios::{generate_scenes, segment_frames, StyleParams, TrafficLight};

    fn replay(frame: &Frame, kin: &KinematicParams) -> FramePlan {
        FramePlan {
            plan: recover_controls(frame.current(), &frame.ego_future_gt, kin),
            predictions: Vec::new(),
        }
    }

    fn generated() -> Vec<Frame> {
        generate_scenes(4, &StyleParams::neutral(), 5)
            .unwrap()
            .iter()
            .flat_map(|s| segment_frames(s).unwrap())
            .collect()
    }

    #[test]
    fn replaying_ground_truth_matches_the_logs() {
        let cfg = EvalConfig::default();
        let frames = generated();
        let plans: Vec<FramePlan> = frames.iter().map(|f| replay(f, &cfg.kinematics)).collect();
        let target = StyleTarget::default();
        let report = evaluate_plans("replay", Domain::In, &frames, &plans, &target, &cfg).unwrap();
        assert!(report.plan_error_1s < 1e-6 && report.plan_error_3s < 1e-6, "{report:?}");
        let logs: Vec<SafetyFlags> = frames
            .iter()
            .map(|f| safety_flags(f, &f.ground_truth_trajectory().unwrap(), &cfg))
            .collect();
        let pct = |g: fn(&SafetyFlags) -> bool| 100.0 * logs.iter().filter(|f| g(f)).count() as f64 / logs.len() as f64;
        assert_eq!(report.collision_rate, pct(|f| f.collision));
        assert_eq!(report.off_route_rate, pct(|f| f.off_route));
        assert_eq!(report.red_light_rate, pct(|f| f.red_light));
    }

    #[test]
    fn driving_through_a_parked_car_is_a_collision() {
        let cfg = EvalConfig::default();
        let mut frame = straight_frame(10.0, 1);
        // park the neighbor on the centreline 20 m ahead
        frame.neighbors[0].history.iter_mut().for_each(|s| *s = AgentState::new(20.0, 0.0, 0.3, 0.0));
        frame.neighbor_futures_gt[0] = vec![[20.0, 0.0]; frame.ego_future_gt.len()];
        let plan = replay(&frame, &cfg.kinematics);
        let out = assess_frame(&frame, &plan, &cfg).unwrap();
        assert!(out.flags.collision);

        // the overlap oracle: ego front bumper reaches x = 17.6 + 2.4 before 5 s
        let ego_end = frame.ego_future_gt.last().unwrap();
        assert!(ego_end.x + cfg.ego_half_length > 20.0 - 2.4);

        let report = aggregate("m", Domain::Out, &[out], &StyleTarget::default());
        assert_eq!(report.collision_rate, 100.0);
    }

    #[test]
    fn parked_cars_beside_the_lane_are_not_collisions() {
        let cfg = EvalConfig::default();
        let frame = straight_frame(10.0, 6);
        let out = assess_frame(&frame, &replay(&frame, &cfg.kinematics), &cfg).unwrap();
        assert_eq!(out.flags, SafetyFlags::default());
    }

    #[test]
    fn red_light_and_off_route_flags() {
        let cfg = EvalConfig::default();
        let mut frame = straight_frame(10.0, 0);
        // stop line 30 m along the route (route starts at x = -30)
        frame.traffic_light = TrafficLight {
            state: LightState::Red,
            stop_line: 60.0,
            switch_in: None,
        };
        let plan = replay(&frame, &cfg.kinematics);
        assert!(assess_frame(&frame, &plan, &cfg).unwrap().flags.red_light);
        frame.traffic_light.switch_in = Some(2.0);
        assert!(!assess_frame(&frame, &plan, &cfg).unwrap().flags.red_light);

        let shifted: Vec<AgentState> = frame
            .ego_future_gt
            .iter()
            .map(|s| AgentState::new(s.x, 0.1 * s.x, 0.1f64.atan(), s.v))
            .collect();
        frame.ego_future_gt = shifted;
        let traj = frame.ground_truth_trajectory().unwrap();
        // lateral reaches 0.1 * 50 = 5 m > 3.5 m
        assert!(safety_flags(&frame, &traj, &cfg).off_route);
    }

    #[test]
    fn adding_a_colliding_frame_never_lowers_the_rate() {
        let cfg = EvalConfig::default();
        let frames = generated();
        let mut outcomes: Vec<FrameOutcome> = frames
            .iter()
            .take(12)
            .map(|f| assess_frame(f, &replay(f, &cfg.kinematics), &cfg).unwrap())
            .collect();
        let target = StyleTarget::default();
        let before = aggregate("m", Domain::In, &outcomes, &target).collision_rate;
        let mut extra = outcomes[0].clone();
        extra.flags.collision = true;
        outcomes.push(extra);
        assert!(aggregate("m", Domain::In, &outcomes, &target).collision_rate >= before);
    }

    #[test]
    fn evaluation_ignores_frame_order() {
        let cfg = EvalConfig::default();
        let frames: Vec<Frame> = generated().into_iter().take(20).collect();
        let target = crate::irl::feature_expectation(&frames, &cfg.beta).unwrap();
        let plans: Vec<FramePlan> = frames.iter().map(|f| replay(f, &cfg.kinematics)).collect();
        let a = evaluate_plans("m", Domain::In, &frames, &plans, &target, &cfg).unwrap();
        let rev_f: Vec<Frame> = frames.iter().rev().cloned().collect();
        let rev_p: Vec<FramePlan> = plans.iter().rev().cloned().collect();
        let b = evaluate_plans("m", Domain::In, &rev_f, &rev_p, &target, &cfg).unwrap();
        for (x, y) in [(a.plan_error_3s, b.plan_error_3s), (a.style_error, b.style_error), (a.collision_rate, b.collision_rate)] {
            assert!((x - y).abs() < 1e-12);
        }
        // replaying the demonstrations reproduces their own expectation
        assert!(a.style_error < 1e-3, "{}", a.style_error);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = EvalConfig::default();
        let p = PolicyParams::zeros(crate::policy::PolicyConfig::default());
        let err = evaluate("m", Domain::In, &p, &CostWeights::default(), &[], &StyleTarget::default(), Structure::Nn, &cfg);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    fn sample_report(model: &str, domain: Domain) -> MetricsReport {
        MetricsReport {
            model: model.into(),
            domain,
            plan_error_1s: 0.1 + 1.0 / 3.0,
            plan_error_3s: 1.234567890123,
            ade_5s: 2.0_f64.sqrt(),
            fde_5s: 1e-17,
            collision_rate: 100.0 / 3.0,
            off_route_rate: 0.0,
            red_light_rate: 12.5,
            style_error: 0.04448,
            frame_count: 64,
        }
    }

    #[test]
    fn report_rows_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        emit_report(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), format!("{REPORT_HEADER}\n"));

        emit_report(&[sample_report("pre", Domain::In)], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 2);

        let reports = vec![sample_report("pre", Domain::In), sample_report("til", Domain::Out)];
        emit_report(&reports, &path).unwrap();
        let csv = parse_report_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let json: Vec<MetricsReport> = serde_json::from_str(&std::fs::read_to_string(json_mirror_path(&path)).unwrap()).unwrap();
        for (a, b) in csv.iter().zip(&json) {
            assert_eq!((&a.model, a.domain, a.frame_count), (&b.model, b.domain, b.frame_count));
            for (x, y) in [
                (a.plan_error_1s, b.plan_error_1s),
                (a.plan_error_3s, b.plan_error_3s),
                (a.ade_5s, b.ade_5s),
                (a.fde_5s, b.fde_5s),
                (a.collision_rate, b.collision_rate),
                (a.red_light_rate, b.red_light_rate),
                (a.style_error, b.style_error),
            ] {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert_eq!(csv, reports);
    }

    #[test]
    fn unwritable_report_path_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("r.csv");
        assert!(matches!(emit_report(&[], &path), Err(Error::Io { .. })));
    }
}
