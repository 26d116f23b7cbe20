//! Synthetic driving scenes, frame windowing, the JSONL frame format and
//! the k-means extraction of user datasets.

mod frame;
mod generate;
mod io;
mod kmeans;
mod route;

pub use frame::{
    Frame, LightState, NeighborRecord, TrafficLight, FUTURE_LEN, HISTORY_LEN, MAX_NEIGHBORS, WINDOW_LEN,
};
pub use generate::{generate_scenes, LightSchedule, NeighborLog, Scene, SceneKind, StyleParams};
pub use io::{load_frames, read_frames, save_frames, write_frames};
pub use kmeans::{kmeans, kmeans_user_split, KMeansResult, UserSplit};
pub use route::{Projection, Route, RouteBuilder, RoutePoint};

use crate::error::{Error, Result};
use crate::kinematics::AgentState;

/// Steps between consecutive frame windows.
pub const WINDOW_STRIDE: usize = 10;

/// Cuts a scene into 70-step windows (20 history + 50 future) every 10
/// steps starting at step 0. A 200-step scene yields 14 frames.
pub fn segment_frames(scene: &Scene) -> Result<Vec<Frame>> {
    let len = scene.ego.len();
    if len < WINDOW_LEN {
        return Err(Error::invalid(format!(
            "scene {} has {len} steps, need at least {WINDOW_LEN}",
            scene.scene_id
        )));
    }
    let count = (len - WINDOW_LEN) / WINDOW_STRIDE + 1;
    (0..count).map(|i| window(scene, i)).collect()
}

fn window(scene: &Scene, index: usize) -> Result<Frame> {
    let start = index * WINDOW_STRIDE;
    let now = start + HISTORY_LEN - 1;
    let ego_now = scene.ego[now];
    let history = scene.ego[start..=now].to_vec();
    let future = scene.ego[now + 1..start + WINDOW_LEN].to_vec();

    let mut order: Vec<(f64, usize)> = scene
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let s = n.states[now];
            ((s.x - ego_now.x).hypot(s.y - ego_now.y), i)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut neighbors = Vec::new();
    let mut futures = Vec::new();
    for &(_, i) in order.iter().take(MAX_NEIGHBORS) {
        let n = &scene.neighbors[i];
        neighbors.push(NeighborRecord {
            history: n.states[start..=now].to_vec(),
            half_length: n.half_length,
            half_width: n.half_width,
        });
        futures.push(
            n.states[now + 1..start + WINDOW_LEN]
                .iter()
                .map(|s| [s.x, s.y])
                .collect(),
        );
    }

    // keep the route local to the window
    let s_now = scene.route.project(ego_now.x, ego_now.y).s;
    let from = s_now - 30.0;
    let to = s_now + 160.0;
    let route = scene.route.crop(from, to);
    let offset = scene.route.crop_offset(from);

    let traffic_light = match &scene.light {
        Some(l) => {
            let stop_line = l.stop_line - offset;
            if now < l.red_until {
                TrafficLight {
                    state: LightState::Red,
                    stop_line,
                    switch_in: Some((l.red_until - now) as f64 * scene.dt),
                }
            } else {
                TrafficLight {
                    state: LightState::Green,
                    stop_line,
                    switch_in: None,
                }
            }
        }
        None => TrafficLight::NONE,
    };

    Ok(Frame {
        scene_id: scene.scene_id.clone(),
        frame_index: index,
        dt: scene.dt,
        ego_history: history,
        neighbors,
        route,
        traffic_light,
        ego_future_gt: future,
        neighbor_futures_gt: futures,
    })
}

/// Small hand-built frames shared by unit and integration tests.
pub mod fixtures {
    use super::*;

    /// Straight eastbound road along `y = 0` from `x = -30` to `x = 300`,
    /// ego at the origin cruising at the speed limit on the centreline,
    /// with the ground truth continuing at constant speed. `neighbors`
    /// vehicles are parked alongside at `y = +-6 m`, spaced 12 m apart.
    pub fn straight_frame(speed_limit: f64, neighbors: usize) -> Frame {
        let dt = 0.1;
        let v = speed_limit;
        let route = RouteBuilder::new(-30.0, 0.0, 0.0, speed_limit).straight(330.0).build();
        let ego_at = |k: i64| AgentState::new(k as f64 * v * dt, 0.0, 0.0, v);
        let history = (-(HISTORY_LEN as i64) + 1..=0).map(ego_at).collect();
        let future = (1..=FUTURE_LEN as i64).map(ego_at).collect();
        let mut recs = Vec::new();
        let mut futs = Vec::new();
        for i in 0..neighbors {
            let side = if i % 2 == 0 { 6.0 } else { -6.0 };
            let p = AgentState::new(12.0 * (i / 2) as f64 + 5.0, side, 0.0, 0.0);
            recs.push(NeighborRecord {
                history: vec![p; HISTORY_LEN],
                half_length: 2.4,
                half_width: 1.0,
            });
            futs.push(vec![[p.x, p.y]; FUTURE_LEN]);
        }
        Frame {
            scene_id: "fixture-straight".into(),
            frame_index: 0,
            dt,
            ego_history: history,
            neighbors: recs,
            route,
            traffic_light: TrafficLight::NONE,
            ego_future_gt: future,
            neighbor_futures_gt: futs,
        }
    }

    /// Replaces the frame's ground-truth future by an arbitrary state list
    /// (used for classification fixtures).
    pub fn with_future(mut frame: Frame, future: Vec<AgentState>) -> Frame {
        frame.ego_future_gt = future;
        frame
    }
}
