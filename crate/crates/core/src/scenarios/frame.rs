use serde::{Deserialize, Serialize};

use super::route::Route;
use crate::error::{Error, Result};
use crate::kinematics::{AgentState, Trajectory};

pub const HISTORY_LEN: usize = 20;
pub const FUTURE_LEN: usize = 50;
pub const WINDOW_LEN: usize = HISTORY_LEN + FUTURE_LEN;
pub const MAX_NEIGHBORS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightState {
    Green,
    Red,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub state: LightState,
    /// Arc length of the stop line along the frame's route.
    pub stop_line: f64,
    /// Seconds until a red light turns green; `None` means it holds over
    /// the whole horizon.
    #[serde(default)]
    pub switch_in: Option<f64>,
}

impl TrafficLight {
    pub const NONE: TrafficLight = TrafficLight {
        state: LightState::None,
        stop_line: 0.0,
        switch_in: None,
    };

    /// Whether the light is red `t` seconds after the frame's current time.
    pub fn is_red_at(&self, t: f64) -> bool {
        self.state == LightState::Red && self.switch_in.is_none_or(|s| t < s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub history: Vec<AgentState>,
    pub half_length: f64,
    pub half_width: f64,
}

impl NeighborRecord {
    pub fn current(&self) -> &AgentState {
        self.history.last().expect("neighbor history is never empty")
    }
}

/// One training/evaluation sample: 2 s of history, 5 s of ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub scene_id: String,
    pub frame_index: usize,
    pub dt: f64,
    pub ego_history: Vec<AgentState>,
    pub neighbors: Vec<NeighborRecord>,
    pub route: Route,
    pub traffic_light: TrafficLight,
    pub ego_future_gt: Vec<AgentState>,
    /// Ground-truth future positions, index-aligned with `neighbors`.
    pub neighbor_futures_gt: Vec<Vec<[f64; 2]>>,
}

impl Frame {
    /// The ego state at the current time (last history sample).
    pub fn current(&self) -> &AgentState {
        self.ego_history.last().expect("frame history is never empty")
    }

    pub fn has_ground_truth(&self) -> bool {
        !self.ego_future_gt.is_empty()
    }

    /// Current state followed by the ground-truth future.
    pub fn ground_truth_trajectory(&self) -> Result<Trajectory> {
        if self.ego_future_gt.is_empty() {
            return Err(Error::invalid(format!(
                "frame {}#{} has no ground-truth future",
                self.scene_id, self.frame_index
            )));
        }
        let mut states = Vec::with_capacity(self.ego_future_gt.len() + 1);
        states.push(*self.current());
        states.extend_from_slice(&self.ego_future_gt);
        Ok(Trajectory::new(states, self.dt))
    }

    /// Neighbor indices sorted by distance to the ego at the current time,
    /// nearest first, truncated to `limit`. Ties keep the stored order.
    pub fn nearest_neighbors(&self, limit: usize) -> Vec<usize> {
        let ego = self.current();
        let mut idx: Vec<(f64, usize)> = self
            .neighbors
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let c = n.current();
                ((c.x - ego.x).hypot(c.y - ego.y), i)
            })
            .collect();
        idx.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        idx.into_iter().take(limit).map(|(_, i)| i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = || format!("frame {}#{}", self.scene_id, self.frame_index);
        if !(self.dt > 0.0) {
            return Err(Error::invalid(format!("{}: dt must be positive", ctx())));
        }
        if self.ego_history.is_empty() {
            return Err(Error::invalid(format!("{}: empty ego history", ctx())));
        }
        self.route
            .validate()
            .map_err(|e| e.context(ctx()))?;
        if self.neighbors.iter().any(|n| n.history.is_empty()) {
            return Err(Error::invalid(format!("{}: neighbor with empty history", ctx())));
        }
        if !self.neighbor_futures_gt.is_empty() && self.neighbor_futures_gt.len() != self.neighbors.len() {
            return Err(Error::invalid(format!(
                "{}: {} neighbor futures for {} neighbors",
                ctx(),
                self.neighbor_futures_gt.len(),
                self.neighbors.len()
            )));
        }
        let finite = |s: &AgentState| s.to_array().iter().all(|v| v.is_finite());
        if !self.ego_history.iter().chain(&self.ego_future_gt).all(finite) {
            return Err(Error::invalid(format!("{}: non-finite ego state", ctx())));
        }
        Ok(())
    }
}
