use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_6;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::wrap_angle;
use crate::scenarios::Frame;

/// Minimum speed and displacement for a frame to carry style (m/s, m).
pub const MOVING_SPEED: f64 = 2.0;
pub const MOVING_DISTANCE: f64 = 2.0;
pub const TURN_HEADING: f64 = FRAC_PI_6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryClass {
    Stationary,
    Straight,
    Turn,
}

impl TrajectoryClass {
    pub const ALL: [TrajectoryClass; 3] = [TrajectoryClass::Stationary, TrajectoryClass::Straight, TrajectoryClass::Turn];
    /// Classes used for fine-tuning.
    pub const STYLED: [TrajectoryClass; 2] = [TrajectoryClass::Straight, TrajectoryClass::Turn];

    pub fn name(self) -> &'static str {
        match self {
            TrajectoryClass::Stationary => "stationary",
            TrajectoryClass::Straight => "straight",
            TrajectoryClass::Turn => "turn",
        }
    }
}

impl std::fmt::Display for TrajectoryClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Labels the ground-truth future. A turn needs the heading change and
/// the endpoint's lateral offset (in the initial heading frame) to agree in
/// sign, with `|heading change| > pi/6`.
pub fn classify_frame(frame: &Frame) -> TrajectoryClass {
    let Some(end) = frame.ego_future_gt.last() else {
        return TrajectoryClass::Stationary;
    };
    let start = frame.current();
    let max_speed = frame.ego_future_gt.iter().map(|s| s.v).fold(f64::NEG_INFINITY, f64::max);
    let (dx, dy) = (end.x - start.x, end.y - start.y);
    if max_speed < MOVING_SPEED || dx.hypot(dy) < MOVING_DISTANCE {
        return TrajectoryClass::Stationary;
    }
    let dh = wrap_angle(end.theta - start.theta);
    let (s, c) = start.theta.sin_cos();
    let lateral = -s * dx + c * dy;
    if (dh > TURN_HEADING && lateral > 0.0) || (dh < -TURN_HEADING && lateral < 0.0) {
        TrajectoryClass::Turn
    } else {
        TrajectoryClass::Straight
    }
}

/// A dataset with its frames grouped by class.
#[derive(Clone, Debug)]
pub struct Partitioned<'a> {
    pub frames: &'a [Frame],
    pub classes: Vec<TrajectoryClass>,
    pub by_class: BTreeMap<TrajectoryClass, Vec<usize>>,
}

impl<'a> Partitioned<'a> {
    pub fn new(frames: &'a [Frame]) -> Self {
        let classes: Vec<TrajectoryClass> = frames.par_iter().map(classify_frame).collect();
        let mut by_class: BTreeMap<TrajectoryClass, Vec<usize>> = BTreeMap::new();
        for (i, c) in classes.iter().enumerate() {
            by_class.entry(*c).or_default().push(i);
        }
        Self { frames, classes, by_class }
    }

    pub fn indices(&self, class: TrajectoryClass) -> &[usize] {
        self.by_class.get(&class).map_or(&[], |v| v.as_slice())
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        TrajectoryClass::ALL
            .iter()
            .map(|c| (c.name().to_string(), self.indices(*c).len()))
            .collect()
    }
}
