use serde::{Deserialize, Serialize};

use crate::kinematics::AgentState;
use crate::scalar::wrap_angle;
use crate::scenarios::{Frame, LightState, HISTORY_LEN, MAX_NEIGHBORS};

const STATE_DIM: usize = 4;
const ROUTE_POINTS: usize = 10;
const ROUTE_SPACING: f64 = 10.0;
const POS_SCALE: f64 = 20.0;
const SPEED_SCALE: f64 = 10.0;

const EGO_BLOCK: usize = HISTORY_LEN * STATE_DIM;
const NEIGHBOR_BLOCK: usize = MAX_NEIGHBORS * HISTORY_LEN * STATE_DIM;
const ROUTE_BLOCK: usize = ROUTE_POINTS * 3;
const LIGHT_BLOCK: usize = 5;

/// Length of every [`SceneEncoding::values`] vector.
pub const ENCODING_DIM: usize = EGO_BLOCK + NEIGHBOR_BLOCK + MAX_NEIGHBORS + ROUTE_BLOCK + LIGHT_BLOCK;

/// Network input for one frame, expressed in the ego's current body frame,
/// plus what is needed to map outputs back to world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEncoding {
    pub values: Vec<f64>,
    /// `mask[i]` is true when slot `i` holds a neighbor.
    pub mask: [bool; MAX_NEIGHBORS],
    /// Index into `frame.neighbors` of the neighbor in each occupied slot.
    pub neighbor_indices: Vec<usize>,
    /// Current world position of each occupied slot.
    pub neighbor_positions: Vec<[f64; 2]>,
    pub origin: AgentState,
}

impl SceneEncoding {
    pub fn rotate_to_world(&self, v: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.origin.theta.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1]]
    }
}

fn push_state(out: &mut Vec<f64>, origin: &AgentState, s: &AgentState) {
    let (sn, c) = origin.theta.sin_cos();
    let (dx, dy) = (s.x - origin.x, s.y - origin.y);
    out.push((c * dx + sn * dy) / POS_SCALE);
    out.push((-sn * dx + c * dy) / POS_SCALE);
    out.push(wrap_angle(s.theta - origin.theta));
    out.push(s.v / SPEED_SCALE);
}

fn push_history(out: &mut Vec<f64>, origin: &AgentState, history: &[AgentState]) {
    // left-pad short histories with their oldest state
    let pad = HISTORY_LEN.saturating_sub(history.len());
    let tail = &history[history.len().saturating_sub(HISTORY_LEN)..];
    for _ in 0..pad {
        push_state(out, origin, &tail[0]);
    }
    for s in tail {
        push_state(out, origin, s);
    }
}

pub fn encode_scene(frame: &Frame) -> SceneEncoding {
    let origin = *frame.current();
    let mut values = Vec::with_capacity(ENCODING_DIM);
    push_history(&mut values, &origin, &frame.ego_history);

    let nearest = frame.nearest_neighbors(MAX_NEIGHBORS);
    let mut mask = [false; MAX_NEIGHBORS];
    let mut positions = Vec::with_capacity(nearest.len());
    for (slot, &i) in nearest.iter().enumerate() {
        let n = &frame.neighbors[i];
        push_history(&mut values, &origin, &n.history);
        mask[slot] = true;
        positions.push(n.current().position());
    }
    values.resize(EGO_BLOCK + NEIGHBOR_BLOCK, 0.0);
    values.extend(mask.iter().map(|m| if *m { 1.0 } else { 0.0 }));

    let s_now = frame.route.project(origin.x, origin.y).s;
    let (sn, c) = origin.theta.sin_cos();
    for i in 1..=ROUTE_POINTS {
        let p = frame.route.sample_at(s_now + ROUTE_SPACING * i as f64);
        let (dx, dy) = (p.x - origin.x, p.y - origin.y);
        values.push((-sn * dx + c * dy) / POS_SCALE);
        values.push(wrap_angle(p.tangent - origin.theta));
        values.push(p.speed_limit / SPEED_SCALE);
    }

    let light = &frame.traffic_light;
    let one_hot = match light.state {
        LightState::Green => [1.0, 0.0, 0.0],
        LightState::Red => [0.0, 1.0, 0.0],
        LightState::None => [0.0, 0.0, 1.0],
    };
    values.extend(one_hot);
    if light.state == LightState::None {
        values.extend([0.0, 0.0]);
    } else {
        values.push(((light.stop_line - s_now) / 50.0).clamp(-1.0, 4.0));
        values.push(light.switch_in.map_or(0.0, |t| t / 10.0));
    }
    debug_assert_eq!(values.len(), ENCODING_DIM);

    SceneEncoding {
        values,
        mask,
        neighbor_indices: nearest,
        neighbor_positions: positions,
        origin,
    }
}
