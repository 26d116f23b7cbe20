//! Driving-style features of a planned or demonstrated trajectory.
//!
//! Each feature is the mean of a nonnegative per-step term, multiplied by
//! its scaling factor at extraction time:
//!
//! | feature       | per-step term                                   |
//! |---------------|-------------------------------------------------|
//! | `acc_lat`     | `|v * dtheta/dt|`                               |
//! | `acc_lon`     | `|dv/dt|`                                       |
//! | `jerk_lat`    | `|d(v * dtheta/dt)/dt|`                         |
//! | `jerk_lon`    | `|d^2 v/dt^2|`                                  |
//! | `efficiency`  | `max(0, v_limit - v)`                           |
//! | `road_offset` | `|lateral offset from the route centreline|`    |
//! | `safety`      | `max(0, 1 - gap / d_safe)` to the nearest agent |
//!
//! Differences are taken between consecutive states; position terms are
//! averaged over the future states only (the start state is excluded).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::Trajectory;
use crate::scalar::wrap_angle;
use crate::scenarios::Frame;

pub const NUM_FEATURES: usize = 7;

/// Distance below which the safety feature and cost become active (m).
pub const SAFE_DISTANCE: f64 = 5.0;

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "acc_lat",
    "acc_lon",
    "jerk_lat",
    "jerk_lon",
    "efficiency",
    "road_offset",
    "safety",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub acc_lat: f64,
    pub acc_lon: f64,
    pub jerk_lat: f64,
    pub jerk_lon: f64,
    pub efficiency: f64,
    pub road_offset: f64,
    pub safety: f64,
}

impl FeatureVector {
    pub fn from_array(a: [f64; NUM_FEATURES]) -> Self {
        Self {
            acc_lat: a[0],
            acc_lon: a[1],
            jerk_lat: a[2],
            jerk_lon: a[3],
            efficiency: a[4],
            road_offset: a[5],
            safety: a[6],
        }
    }

    pub fn to_array(&self) -> [f64; NUM_FEATURES] {
        [
            self.acc_lat,
            self.acc_lon,
            self.jerk_lat,
            self.jerk_lon,
            self.efficiency,
            self.road_offset,
            self.safety,
        ]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v >= 0.0)
    }

    /// Componentwise mean of a nonempty set of vectors.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a FeatureVector>) -> Option<FeatureVector> {
        let mut acc = [0.0; NUM_FEATURES];
        let mut n = 0usize;
        for f in items {
            for (a, v) in acc.iter_mut().zip(f.to_array()) {
                *a += v;
            }
            n += 1;
        }
        (n > 0).then(|| FeatureVector::from_array(acc.map(|a| a / n as f64)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub beta: [f64; NUM_FEATURES],
}

impl Default for FeatureScaling {
    fn default() -> Self {
        Self {
            beta: [0.008, 0.008, 0.004, 0.01, 0.004, 0.0005, 0.01],
        }
    }
}

impl FeatureScaling {
    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().all(|b| b.is_finite() && *b > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid("feature scaling factors must be positive"))
        }
    }
}

/// Raw (unscaled) per-step quantities shared by extraction and its VJP.
struct Terms {
    lat: Vec<f64>,
    dtheta: Vec<f64>,
    lon: Vec<f64>,
    deficit: Vec<f64>,
    offset: Vec<f64>,
    /// `(gap, ego - neighbor)` to the nearest neighbor, per future state.
    nearest: Vec<Option<(f64, [f64; 2])>>,
}

fn terms(traj: &Trajectory, frame: &Frame) -> Result<Terms> {
    let n = traj.states.len();
    if n < 3 {
        return Err(Error::invalid(format!(
            "feature extraction needs at least 3 states, got {n}"
        )));
    }
    let dt = traj.dt;
    let steps = n - 1;
    let mut t = Terms {
        lat: Vec::with_capacity(steps),
        dtheta: Vec::with_capacity(steps),
        lon: Vec::with_capacity(steps),
        deficit: Vec::with_capacity(steps),
        offset: Vec::with_capacity(steps),
        nearest: Vec::with_capacity(steps),
    };
    for k in 0..steps {
        let (s0, s1) = (&traj.states[k], &traj.states[k + 1]);
        let rate = wrap_angle(s1.theta - s0.theta) / dt;
        t.dtheta.push(rate);
        t.lat.push(s0.v * rate);
        t.lon.push((s1.v - s0.v) / dt);
    }
    for (k, s) in traj.states.iter().enumerate().skip(1) {
        let p = frame.route.project(s.x, s.y);
        t.deficit.push(p.speed_limit - s.v);
        t.offset.push(p.lateral);
        let mut best: Option<(f64, [f64; 2])> = None;
        for fut in &frame.neighbor_futures_gt {
            if let Some(q) = fut.get(k - 1) {
                let d = [s.x - q[0], s.y - q[1]];
                let gap = d[0].hypot(d[1]);
                if best.is_none_or(|(g, _)| gap < g) {
                    best = Some((gap, d));
                }
            }
        }
        t.nearest.push(best);
    }
    Ok(t)
}

fn mean_abs(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn mean_abs_diff(v: &[f64], dt: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    v.windows(2).map(|w| ((w[1] - w[0]) / dt).abs()).sum::<f64>() / (v.len() - 1) as f64
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn extract_features(traj: &Trajectory, frame: &Frame, beta: &FeatureScaling) -> Result<FeatureVector> {
    let t = terms(traj, frame)?;
    let dt = traj.dt;
    let m = t.offset.len() as f64;
    let efficiency = t.deficit.iter().map(|d| d.max(0.0)).sum::<f64>() / m;
    let safety = t
        .nearest
        .iter()
        .map(|n| n.map_or(0.0, |(gap, _)| (1.0 - gap / SAFE_DISTANCE).max(0.0)))
        .sum::<f64>()
        / m;
    let raw = [
        mean_abs(&t.lat),
        mean_abs(&t.lon),
        mean_abs_diff(&t.lat, dt),
        mean_abs_diff(&t.lon, dt),
        efficiency,
        mean_abs(&t.offset),
        safety,
    ];
    let mut out = [0.0; NUM_FEATURES];
    for i in 0..NUM_FEATURES {
        out[i] = beta.beta[i] * raw[i];
    }
    Ok(FeatureVector::from_array(out))
}

/// Vector-Jacobian product of [`extract_features`]: returns
/// `sum_i weights[i] * d feature_i / d state_k` for every state `k`, with
/// `[x, y, theta, v]` ordering. Absolute values use subgradient 0 at 0.
pub fn features_vjp(
    traj: &Trajectory,
    frame: &Frame,
    beta: &FeatureScaling,
    weights: &[f64; NUM_FEATURES],
) -> Result<Vec<[f64; 4]>> {
    let t = terms(traj, frame)?;
    let dt = traj.dt;
    let n = traj.states.len();
    let steps = n - 1;
    let c: Vec<f64> = (0..NUM_FEATURES).map(|i| weights[i] * beta.beta[i]).collect();
    let mut grad = vec![[0.0; 4]; n];

    let mut lat_bar = vec![0.0; steps];
    let mut lon_bar = vec![0.0; steps];
    for k in 0..steps {
        lat_bar[k] += c[0] * sgn(t.lat[k]) / steps as f64;
        lon_bar[k] += c[1] * sgn(t.lon[k]) / steps as f64;
    }
    if steps >= 2 {
        let m = (steps - 1) as f64;
        for k in 0..steps - 1 {
            let g = c[2] * sgn((t.lat[k + 1] - t.lat[k]) / dt) / (m * dt);
            lat_bar[k + 1] += g;
            lat_bar[k] -= g;
            let g = c[3] * sgn((t.lon[k + 1] - t.lon[k]) / dt) / (m * dt);
            lon_bar[k + 1] += g;
            lon_bar[k] -= g;
        }
    }
    for k in 0..steps {
        let v0 = traj.states[k].v;
        // lat = v_k * wrap(theta_{k+1} - theta_k) / dt
        grad[k][3] += lat_bar[k] * t.dtheta[k];
        grad[k + 1][2] += lat_bar[k] * v0 / dt;
        grad[k][2] -= lat_bar[k] * v0 / dt;
        // lon = (v_{k+1} - v_k) / dt
        grad[k + 1][3] += lon_bar[k] / dt;
        grad[k][3] -= lon_bar[k] / dt;
    }

    let m = steps as f64;
    for k in 0..steps {
        let g = &mut grad[k + 1];
        if t.deficit[k] > 0.0 {
            g[3] -= c[4] / m;
        }
        let off = sgn(t.offset[k]);
        if off != 0.0 {
            let s = &traj.states[k + 1];
            let d = frame.route.project(s.x, s.y).d_lateral;
            g[0] += c[5] * off * d[0] / m;
            g[1] += c[5] * off * d[1] / m;
        }
        if let Some((gap, d)) = t.nearest[k] {
            if gap < SAFE_DISTANCE && gap > 0.0 {
                let f = -c[6] / (m * SAFE_DISTANCE * gap);
                g[0] += f * d[0];
                g[1] += f * d[1];
            }
        }
    }
    Ok(grad)
}

/// Mean absolute difference between two scaled feature vectors.
pub fn style_error(f_hat: &FeatureVector, f: &FeatureVector) -> f64 {
    f_hat
        .to_array()
        .iter()
        .zip(f.to_array())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / NUM_FEATURES as f64
}
