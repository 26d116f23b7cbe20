#![allow(dead_code)]

use std::sync::OnceLock;

use tilplan::kinematics::AgentState;
use tilplan::policy::{PolicyConfig, PolicyParams};
use tilplan::scenarios::fixtures::{straight_frame, with_future};
use tilplan::scenarios::{generate_scenes, segment_frames, Frame, StyleParams};

pub fn frames_of(scenes: usize, style: &StyleParams, seed: u64) -> Vec<Frame> {
    generate_scenes(scenes, style, seed)
        .unwrap()
        .iter()
        .flat_map(|s| segment_frames(s).unwrap())
        .collect()
}

/// A fixed pool of generated frames across all scene kinds.
pub fn pool() -> &'static [Frame] {
    static POOL: OnceLock<Vec<Frame>> = OnceLock::new();
    POOL.get_or_init(|| frames_of(16, &StyleParams::neutral(), 77))
}

pub fn tiny_policy(horizon: usize, seed: u64) -> PolicyParams {
    PolicyParams::init(
        PolicyConfig {
            hidden: 8,
            horizon,
            ..PolicyConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// Constant-speed future along a circular arc from the origin heading
/// east, turning by `dh` in total over 5 s.
pub fn arc_future(v: f64, dh: f64) -> Vec<AgentState> {
    let n = 50;
    let len = v * 5.0;
    (1..=n)
        .map(|k| {
            let s = len * k as f64 / n as f64;
            let th = dh * k as f64 / n as f64;
            let (x, y) = if dh == 0.0 {
                (s, 0.0)
            } else {
                let r = len / dh;
                (r * th.sin(), r * (1.0 - th.cos()))
            };
            AgentState::new(x, y, th, v)
        })
        .collect()
}

pub fn frame_with_future(future: Vec<AgentState>) -> Frame {
    with_future(straight_frame(10.0, 0), future)
}

/// `||a - b|| / max(||b||, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(floor)
}
