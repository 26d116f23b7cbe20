use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::route::{Route, RouteBuilder};
use crate::error::{Error, Result};
use crate::kinematics::{step, AgentState, KinematicParams};
use crate::scalar::wrap_angle;

/// Steps in a generated scene (20 s at 10 Hz).
pub const SCENE_STEPS: usize = 200;

/// Knobs of the scripted ego driver.
///
/// Documented ranges (checked by [`StyleParams::validate`]):
/// `speed_fraction` in `[0.3, 1.3]`, `lateral_aggressiveness` in
/// `[0.3, 8]` m/s^2, `smoothness` in `[0.3, 30]` m/s^3 (a jerk limit, so
/// larger is rougher), `lane_offset` in `[-1.5, 1.5]` m (positive left).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    /// Cruise speed as a fraction of the speed limit.
    pub speed_fraction: f64,
    /// Lateral acceleration the driver accepts in curves (m/s^2).
    pub lateral_aggressiveness: f64,
    /// Longitudinal jerk limit (m/s^3).
    pub smoothness: f64,
    /// Preferred lateral offset from the lane centre (m).
    pub lane_offset: f64,
}

impl StyleParams {
    pub fn neutral() -> Self {
        Self {
            speed_fraction: 0.85,
            lateral_aggressiveness: 2.0,
            smoothness: 3.0,
            lane_offset: 0.0,
        }
    }

    pub fn aggressive() -> Self {
        Self {
            speed_fraction: 1.05,
            lateral_aggressiveness: 4.0,
            smoothness: 10.0,
            lane_offset: 0.6,
        }
    }

    pub fn gentle() -> Self {
        Self {
            speed_fraction: 0.65,
            lateral_aggressiveness: 1.0,
            smoothness: 1.0,
            lane_offset: -0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.3..=1.3).contains(&self.speed_fraction)
            && (0.3..=8.0).contains(&self.lateral_aggressiveness)
            && (0.3..=30.0).contains(&self.smoothness)
            && (-1.5..=1.5).contains(&self.lane_offset);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("style parameters out of range: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Straight,
    Curve,
    Intersection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborLog {
    pub states: Vec<AgentState>,
    pub half_length: f64,
    pub half_width: f64,
}

/// A light that is red until step `red_until` and green afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightSchedule {
    pub stop_line: f64,
    pub red_until: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: String,
    pub kind: SceneKind,
    pub dt: f64,
    pub ego: Vec<AgentState>,
    pub neighbors: Vec<NeighborLog>,
    pub route: Route,
    pub light: Option<LightSchedule>,
}

/// Lane-following traffic participant, integrated along the route.
struct LaneAgent {
    s: f64,
    v: f64,
    offset: f64,
    /// +1 along the route, -1 oncoming.
    direction: f64,
    cruise: f64,
    obeys_light: bool,
    half_length: f64,
    half_width: f64,
}

impl LaneAgent {
    fn state(&self, route: &Route) -> AgentState {
        let p = route.sample_at(self.s);
        let (nx, ny) = (-p.tangent.sin(), p.tangent.cos());
        let heading = if self.direction > 0.0 {
            p.tangent
        } else {
            wrap_angle(p.tangent + std::f64::consts::PI)
        };
        AgentState::new(p.x + self.offset * nx, p.y + self.offset * ny, heading, self.v)
    }
}

const STOP_DECEL: f64 = 2.5;
const STOP_MARGIN: f64 = 1.0;
const MIN_GAP: f64 = 4.0;
const HEADWAY: f64 = 1.2;

fn max_curvature(route: &Route, from: f64, to: f64) -> f64 {
    let mut k: f64 = 0.0;
    let mut s = from.max(0.0);
    while s < to {
        let a = route.sample_at(s);
        let b = route.sample_at(s + 1.0);
        k = k.max(wrap_angle(b.tangent - a.tangent).abs());
        s += 1.0;
    }
    k
}

fn light_speed_cap(light: Option<&LightSchedule>, step: usize, s: f64) -> f64 {
    match light {
        Some(l) if step < l.red_until && s < l.stop_line => {
            let d = l.stop_line - STOP_MARGIN - s;
            if d <= 0.2 {
                0.0
            } else {
                (2.0 * STOP_DECEL * d).sqrt()
            }
        }
        _ => f64::INFINITY,
    }
}

fn follow_cap(gap: f64, v_lead: f64, v: f64) -> f64 {
    (v_lead + 0.5 * (gap - MIN_GAP - HEADWAY * v)).max(0.0)
}

fn build_route(kind: SceneKind, limit: f64, rng: &mut ChaCha8Rng) -> (Route, Option<LightSchedule>) {
    let b = RouteBuilder::new(0.0, 0.0, 0.0, limit);
    let sign = |rng: &mut ChaCha8Rng| -> f64 { if rng.gen_bool(0.5) { 1.0 } else { -1.0 } };
    match kind {
        SceneKind::Straight => (b.straight(800.0).build(), None),
        SceneKind::Curve => {
            let r1 = rng.gen_range(20.0..100.0);
            let a1 = sign(rng) * rng.gen_range(0.7..1.6);
            let r2 = rng.gen_range(20.0..100.0);
            let a2 = -a1.signum() * rng.gen_range(0.7..1.6);
            let route = b
                .straight(rng.gen_range(50.0..90.0))
                .arc(r1, a1)
                .straight(rng.gen_range(20.0..60.0))
                .arc(r2, a2)
                .straight(600.0)
                .build();
            (route, None)
        }
        SceneKind::Intersection => {
            let stop_line = rng.gen_range(90.0..140.0);
            let red_until = if rng.gen_bool(0.75) {
                rng.gen_range(40..150)
            } else {
                0
            };
            let b = b.straight(stop_line + 12.0);
            let route = if rng.gen_bool(0.6) {
                b.arc(rng.gen_range(12.0..20.0), sign(rng) * std::f64::consts::FRAC_PI_2)
                    .straight(600.0)
                    .build()
            } else {
                b.straight(600.0).build()
            };
            (route, Some(LightSchedule { stop_line, red_until }))
        }
    }
}

fn spawn_traffic(rng: &mut ChaCha8Rng, s0: f64, limit: f64, route_len: f64) -> Vec<LaneAgent> {
    let mut agents = Vec::new();
    let car = |rng: &mut ChaCha8Rng| (rng.gen_range(2.2..2.6), rng.gen_range(0.9..1.05));
    if rng.gen_bool(0.6) {
        let (hl, hw) = car(rng);
        agents.push(LaneAgent {
            s: s0 + rng.gen_range(18.0..45.0),
            v: limit * rng.gen_range(0.55..0.9),
            offset: 0.0,
            direction: 1.0,
            cruise: limit * rng.gen_range(0.55..0.9),
            obeys_light: true,
            half_length: hl,
            half_width: hw,
        });
    }
    if rng.gen_bool(0.4) {
        let (hl, hw) = car(rng);
        agents.push(LaneAgent {
            s: s0 - rng.gen_range(12.0..25.0),
            v: limit * 0.8,
            offset: 0.0,
            direction: 1.0,
            cruise: limit * 0.95,
            obeys_light: true,
            half_length: hl,
            half_width: hw,
        });
    }
    for _ in 0..rng.gen_range(0..=4) {
        let (hl, hw) = car(rng);
        let cruise = limit * rng.gen_range(0.7..1.0);
        agents.push(LaneAgent {
            s: s0 + rng.gen_range(-30.0..80.0),
            v: cruise,
            offset: 3.5,
            direction: 1.0,
            cruise,
            obeys_light: true,
            half_length: hl,
            half_width: hw,
        });
    }
    for _ in 0..rng.gen_range(0..=4) {
        let (hl, hw) = car(rng);
        let cruise = limit * rng.gen_range(0.6..1.0);
        agents.push(LaneAgent {
            s: (s0 + rng.gen_range(40.0..250.0)).min(route_len - 1.0),
            v: cruise,
            offset: 7.0,
            direction: -1.0,
            cruise,
            obeys_light: false,
            half_length: hl,
            half_width: hw,
        });
    }
    for _ in 0..rng.gen_range(0..=3) {
        let (hl, hw) = car(rng);
        agents.push(LaneAgent {
            s: s0 + rng.gen_range(20.0..180.0),
            v: 0.0,
            offset: -rng.gen_range(3.0..3.6),
            direction: 1.0,
            cruise: 0.0,
            obeys_light: false,
            half_length: hl,
            half_width: hw,
        });
    }
    agents
}

fn generate_one(index: usize, style: &StyleParams, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let kin = KinematicParams::default();
    let dt = kin.dt;

    let kind = match rng.gen_range(0..10) {
        0..=2 => SceneKind::Straight,
        3..=6 => SceneKind::Curve,
        _ => SceneKind::Intersection,
    };
    let limit = rng.gen_range(10.0..15.0);
    let (route, light) = build_route(kind, limit, &mut rng);
    let s0 = 40.0;
    let start_pt = route.sample_at(s0);
    let (nx, ny) = (-start_pt.tangent.sin(), start_pt.tangent.cos());
    let cruise = style.speed_fraction * limit;
    let mut ego = AgentState::new(
        start_pt.x + style.lane_offset * nx,
        start_pt.y + style.lane_offset * ny,
        start_pt.tangent,
        cruise * rng.gen_range(0.8..1.0),
    );
    let mut agents = spawn_traffic(&mut rng, s0, limit, route.length());
    // drop agents spawned on top of the ego
    agents.retain(|a| {
        let st = a.state(&route);
        (st.x - ego.x).hypot(st.y - ego.y) > 8.0
    });

    let mut ego_log = Vec::with_capacity(SCENE_STEPS);
    let mut logs: Vec<Vec<AgentState>> = vec![Vec::with_capacity(SCENE_STEPS); agents.len()];
    let mut a_prev = 0.0;

    for k in 0..SCENE_STEPS {
        ego_log.push(ego);
        for (log, a) in logs.iter_mut().zip(&agents) {
            log.push(a.state(&route));
        }

        // ego longitudinal command
        let proj = route.project(ego.x, ego.y);
        let horizon = proj.s + 10.0 + 3.0 * ego.v;
        let kappa = max_curvature(&route, proj.s, horizon);
        let mut v_des = cruise;
        if kappa > 1e-6 {
            v_des = v_des.min((style.lateral_aggressiveness / kappa).sqrt());
        }
        let stop_cap = light_speed_cap(light.as_ref(), k, proj.s);
        v_des = v_des.min(stop_cap);
        for a in &agents {
            let ahead = a.s - proj.s;
            if a.direction > 0.0 && (a.offset - proj.lateral).abs() < 2.0 && ahead > 0.0 && ahead < 80.0 {
                let gap = ahead - a.half_length - 2.4;
                v_des = v_des.min(follow_cap(gap, a.v, ego.v));
            }
        }
        let a_cmd = (1.5 * (v_des - ego.v)).clamp(-kin.a_max, 3.0);
        let jerk = style.smoothness * dt;
        let mut accel = a_prev + (a_cmd - a_prev).clamp(-jerk, jerk);
        if ego.v > stop_cap + 0.5 {
            // braking for a red light overrides the jerk limit
            let d = light.map_or(f64::INFINITY, |l| l.stop_line - STOP_MARGIN - proj.s);
            let need = ego.v * ego.v / (2.0 * d.max(0.05));
            accel = accel.min(-need.min(kin.a_max)).min(a_cmd);
        }
        a_prev = accel;

        // pure pursuit onto the offset lane line
        let look = (1.2 * ego.v).max(6.0);
        let tp = route.sample_at(proj.s + look);
        let (tx, ty) = (
            tp.x - style.lane_offset * tp.tangent.sin(),
            tp.y + style.lane_offset * tp.tangent.cos(),
        );
        let alpha = wrap_angle((ty - ego.y).atan2(tx - ego.x) - ego.theta);
        let delta = (2.0 * kin.wheelbase * alpha.sin() / look).atan().clamp(-0.5, 0.5);

        let next = step(ego.to_array(), [accel, delta], &kin);
        ego = AgentState::from_array(next);

        // traffic
        let ego_s = proj.s;
        let snapshot: Vec<(f64, f64, f64, f64)> = agents.iter().map(|a| (a.s, a.v, a.offset, a.direction)).collect();
        for (i, a) in agents.iter_mut().enumerate() {
            if a.cruise == 0.0 {
                continue;
            }
            let mut target = a.cruise;
            if a.direction > 0.0 {
                let kappa = max_curvature(&route, a.s, a.s + 10.0 + 3.0 * a.v);
                if kappa > 1e-6 {
                    target = target.min((2.0 / kappa).sqrt());
                }
                if a.obeys_light {
                    target = target.min(light_speed_cap(light.as_ref(), k, a.s));
                }
                for (j, &(s, v, off, dir)) in snapshot.iter().enumerate() {
                    let ahead = s - a.s;
                    if j != i && dir > 0.0 && (off - a.offset).abs() < 1.5 && ahead > 0.0 && ahead < 80.0 {
                        target = target.min(follow_cap(ahead - 5.0, v, a.v));
                    }
                }
                if a.offset.abs() < 1.5 && ego_s > a.s && ego_s - a.s < 80.0 {
                    target = target.min(follow_cap(ego_s - a.s - 5.0, ego.v, a.v));
                }
            }
            let acc = (1.0 * (target - a.v)).clamp(-kin.a_max, 2.0);
            a.v = (a.v + acc * dt).max(0.0);
            a.s += a.direction * a.v * dt;
        }
    }

    Scene {
        scene_id: format!("s{seed}-{index:05}"),
        kind,
        dt,
        ego: ego_log,
        neighbors: agents
            .iter()
            .zip(logs)
            .map(|(a, states)| NeighborLog {
                states,
                half_length: a.half_length,
                half_width: a.half_width,
            })
            .collect(),
        route,
        light,
    }
}

/// Generates `count` 20 s scenes. Scene `i` draws from its own stream of
/// the seeded generator, so output is independent of thread count.
pub fn generate_scenes(count: usize, style: &StyleParams, seed: u64) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::invalid("scene count must be at least 1"));
    }
    style.validate()?;
    Ok((0..count)
        .into_par_iter()
        .map(|i| generate_one(i, style, seed))
        .collect())
}
