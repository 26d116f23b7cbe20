//! Weighted residuals of the trajectory refinement objective
//! `1/2 * sum_i ||w_i c_i(pi)||^2` and their Jacobian with respect to the
//! control sequence.
//!
//! Residuals are stored term-major: term `i` occupies rows
//! `[i * T, (i + 1) * T)`, entry `k` of a term referring to control `k` or
//! to the state reached after applying it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::SAFE_DISTANCE;
use crate::kinematics::{saturate, step_with_jacobian, AgentState, ControlInput, ControlSequence, KinematicParams};
use crate::scalar::{wrap_angle, Scalar};
use crate::scenarios::{Frame, Route, TrafficLight, MAX_NEIGHBORS};

pub const NUM_TERMS: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostTerm {
    Speed,
    Acc,
    Jerk,
    Steer,
    Rate,
    Pos,
    Head,
    Traffic,
    Safety,
}

impl CostTerm {
    pub const ALL: [CostTerm; NUM_TERMS] = [
        CostTerm::Speed,
        CostTerm::Acc,
        CostTerm::Jerk,
        CostTerm::Steer,
        CostTerm::Rate,
        CostTerm::Pos,
        CostTerm::Head,
        CostTerm::Traffic,
        CostTerm::Safety,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["speed", "acc", "jerk", "steer", "rate", "pos", "head", "traffic", "safety"][self as usize]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub speed: f64,
    pub acc: f64,
    pub jerk: f64,
    pub steer: f64,
    pub rate: f64,
    pub pos: f64,
    pub head: f64,
    pub traffic: f64,
    pub safety: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self::from_array([0.1, 0.5, 0.1, 0.01, 0.5, 0.5, 5.0, 10.0, 10.0])
    }
}

impl CostWeights {
    pub fn from_array(a: [f64; NUM_TERMS]) -> Self {
        Self {
            speed: a[0],
            acc: a[1],
            jerk: a[2],
            steer: a[3],
            rate: a[4],
            pos: a[5],
            head: a[6],
            traffic: a[7],
            safety: a[8],
        }
    }

    pub fn to_array(&self) -> [f64; NUM_TERMS] {
        [
            self.speed,
            self.acc,
            self.jerk,
            self.steer,
            self.rate,
            self.pos,
            self.head,
            self.traffic,
            self.safety,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("cost weights must be finite and nonnegative: {self:?}")))
        }
    }
}

/// Everything the residuals need from the scene.
#[derive(Clone, Debug)]
pub struct CostScene<'a> {
    pub route: &'a Route,
    pub light: TrafficLight,
    /// Predicted positions of up to ten neighbors, one per planning step.
    pub predictions: Vec<Vec<[f64; 2]>>,
    /// Control applied just before the plan starts (for jerk and rate).
    pub prev_control: ControlInput,
    pub safe_distance: f64,
    pub dt: f64,
}

impl<'a> CostScene<'a> {
    /// Builds the scene from a frame, predicting the ten nearest neighbors
    /// by constant-velocity extrapolation over `horizon` steps.
    pub fn from_frame(frame: &'a Frame, horizon: usize, kin: &KinematicParams) -> Result<Self> {
        frame.route.validate()?;
        let dt = frame.dt;
        let predictions = frame
            .nearest_neighbors(MAX_NEIGHBORS)
            .into_iter()
            .map(|i| {
                let s = frame.neighbors[i].current();
                (1..=horizon)
                    .map(|k| {
                        let t = k as f64 * dt;
                        [s.x + s.v * s.theta.cos() * t, s.y + s.v * s.theta.sin() * t]
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            route: &frame.route,
            light: frame.traffic_light,
            predictions,
            prev_control: previous_control(frame, kin),
            safe_distance: SAFE_DISTANCE,
            dt,
        })
    }

    pub fn with_predictions(mut self, predictions: Vec<Vec<[f64; 2]>>) -> Self {
        self.predictions = predictions;
        self
    }
}

/// Estimates the last applied control from the final two history states.
pub fn previous_control(frame: &Frame, kin: &KinematicParams) -> ControlInput {
    let h = &frame.ego_history;
    if h.len() < 2 {
        return ControlInput::default();
    }
    let (p, c) = (&h[h.len() - 2], &h[h.len() - 1]);
    let a = (c.v - p.v) / frame.dt;
    let delta = if p.v > 0.1 {
        (wrap_angle(c.theta - p.theta) * kin.wheelbase / (p.v * frame.dt)).atan()
    } else {
        0.0
    };
    ControlInput::new(a.clamp(-kin.a_max, kin.a_max), delta.clamp(-kin.delta_max, kin.delta_max))
}

/// Weighted residuals together with the horizon used to lay them out.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualVector {
    pub values: Vec<f64>,
    pub horizon: usize,
}

impl ResidualVector {
    pub fn term(&self, t: CostTerm) -> &[f64] {
        let h = self.horizon;
        &self.values[t.index() * h..(t.index() + 1) * h]
    }

    pub fn term_of(&self, row: usize) -> CostTerm {
        CostTerm::ALL[row / self.horizon]
    }

    pub fn objective(&self) -> f64 {
        0.5 * self.values.iter().map(|r| r * r).sum::<f64>()
    }
}

/// Unweighted costs `c_i` (term-major) and optionally `dc/dpi` as a dense
/// row-major `(9T) x (2T)` matrix.
pub struct RawCosts<S> {
    pub costs: Vec<S>,
    pub jacobian: Option<Vec<S>>,
}

pub(crate) fn raw_costs<S: Scalar>(
    flat: &[S],
    start: &AgentState,
    scene: &CostScene<'_>,
    kin: &KinematicParams,
    with_jacobian: bool,
) -> RawCosts<S> {
    let t_len = flat.len() / 2;
    let n = 2 * t_len;
    let dt = scene.dt;
    let rows = NUM_TERMS * t_len;
    let mut costs = vec![S::zero(); rows];
    let mut jac = if with_jacobian {
        Some(vec![S::zero(); rows * n])
    } else {
        None
    };

    let sat: Vec<(S, bool)> = flat
        .chunks_exact(2)
        .flat_map(|u| [saturate(u[0], kin.a_max), saturate(u[1], kin.delta_max)])
        .collect();

    let mut s = [
        S::cst(start.x),
        S::cst(start.y),
        S::cst(start.theta),
        S::cst(start.v),
    ];
    // sens[r][c] = d state_r / d flat_c for the current state
    let mut sens = vec![[S::zero(); 4]; n];

    for k in 0..t_len {
        let (next, sj) = step_with_jacobian(s, [flat[2 * k], flat[2 * k + 1]], kin);
        if with_jacobian {
            for col in sens.iter_mut().take(2 * k) {
                let old = *col;
                for r in 0..4 {
                    let mut acc = S::zero();
                    for c in 0..4 {
                        acc += sj.state[r][c] * old[c];
                    }
                    col[r] = acc;
                }
            }
            for c in 0..2 {
                for r in 0..4 {
                    sens[2 * k + c][r] = sj.control[r][c];
                }
            }
        }
        s = next;

        let proj = scene.route.project(s[0], s[1]);
        let (a, a_sat) = sat[2 * k];
        let (d, d_sat) = sat[2 * k + 1];
        let (a_prev, a_prev_sat, d_prev, d_prev_sat) = if k == 0 {
            (S::cst(scene.prev_control.a), true, S::cst(scene.prev_control.delta), true)
        } else {
            (sat[2 * k - 2].0, sat[2 * k - 2].1, sat[2 * k - 1].0, sat[2 * k - 1].1)
        };

        let row = |term: CostTerm| term.index() * t_len + k;
        costs[row(CostTerm::Speed)] = s[3] - proj.speed_limit;
        costs[row(CostTerm::Acc)] = a;
        costs[row(CostTerm::Jerk)] = (a - a_prev) / dt;
        costs[row(CostTerm::Steer)] = d;
        costs[row(CostTerm::Rate)] = (d - d_prev) / dt;
        costs[row(CostTerm::Pos)] = proj.lateral;
        costs[row(CostTerm::Head)] = wrap_angle(s[2] - proj.tangent);

        let time = (k + 1) as f64 * dt;
        let overrun = proj.s - scene.light.stop_line;
        let traffic_active = scene.light.is_red_at(time) && overrun.re() > 0.0;
        if traffic_active {
            costs[row(CostTerm::Traffic)] = overrun;
        }

        let mut safety = S::zero();
        let mut safety_grad: Vec<(S, S)> = Vec::new();
        for pred in &scene.predictions {
            let Some(q) = pred.get(k) else { continue };
            let (dx, dy) = (s[0] - q[0], s[1] - q[1]);
            let gap = (dx * dx + dy * dy).sqrt();
            let g = gap.re();
            if g < scene.safe_distance && g > 0.0 {
                safety += -gap + scene.safe_distance;
                if with_jacobian {
                    safety_grad.push((-dx / gap, -dy / gap));
                }
            }
        }
        costs[row(CostTerm::Safety)] = safety;

        if let Some(j) = jac.as_mut() {
            let mut set = |term: CostTerm, col: usize, v: S| j[row(term) * n + col] = v;
            if !a_sat {
                set(CostTerm::Acc, 2 * k, S::cst(1.0));
                set(CostTerm::Jerk, 2 * k, S::cst(1.0 / dt));
            }
            if k > 0 && !a_prev_sat {
                set(CostTerm::Jerk, 2 * k - 2, S::cst(-1.0 / dt));
            }
            if !d_sat {
                set(CostTerm::Steer, 2 * k + 1, S::cst(1.0));
                set(CostTerm::Rate, 2 * k + 1, S::cst(1.0 / dt));
            }
            if k > 0 && !d_prev_sat {
                set(CostTerm::Rate, 2 * k - 1, S::cst(-1.0 / dt));
            }
            for col in 0..2 * (k + 1) {
                let sc = &sens[col];
                let dpos = |g: [f64; 2]| sc[0] * g[0] + sc[1] * g[1];
                j[row(CostTerm::Speed) * n + col] = sc[3];
                j[row(CostTerm::Pos) * n + col] = dpos(proj.d_lateral);
                j[row(CostTerm::Head) * n + col] = sc[2] - dpos(proj.d_tangent);
                if traffic_active {
                    j[row(CostTerm::Traffic) * n + col] = dpos(proj.d_s);
                }
                if !safety_grad.is_empty() {
                    let mut acc = S::zero();
                    for (gx, gy) in &safety_grad {
                        acc += *gx * sc[0] + *gy * sc[1];
                    }
                    j[row(CostTerm::Safety) * n + col] = acc;
                }
            }
        }
    }
    RawCosts { costs, jacobian: jac }
}

fn check(pi: &ControlSequence, weights: &CostWeights, scene: &CostScene<'_>) -> Result<()> {
    if pi.is_empty() {
        return Err(Error::invalid("empty control sequence"));
    }
    weights.validate()?;
    scene.route.validate()
}

/// Weighted residuals `w_i * c_i` for every term and step.
pub fn residuals(
    pi: &ControlSequence,
    start: &AgentState,
    scene: &CostScene<'_>,
    weights: &CostWeights,
    kin: &KinematicParams,
) -> Result<ResidualVector> {
    check(pi, weights, scene)?;
    let raw = raw_costs(&pi.to_flat(), start, scene, kin, false);
    let t = pi.len();
    let w = weights.to_array();
    let values = raw
        .costs
        .iter()
        .enumerate()
        .map(|(r, c)| w[r / t] * c)
        .collect();
    Ok(ResidualVector { values, horizon: t })
}

/// Jacobian of [`residuals`] with respect to the flattened controls, as a
/// row-major `(9T) x (2T)` matrix.
pub fn residual_jacobian(
    pi: &ControlSequence,
    start: &AgentState,
    scene: &CostScene<'_>,
    weights: &CostWeights,
    kin: &KinematicParams,
) -> Result<Vec<f64>> {
    check(pi, weights, scene)?;
    let raw = raw_costs(&pi.to_flat(), start, scene, kin, true);
    let t = pi.len();
    let n = 2 * t;
    let w = weights.to_array();
    let mut jac = raw.jacobian.expect("requested");
    for (r, row) in jac.chunks_exact_mut(n).enumerate() {
        let wr = w[r / t];
        row.iter_mut().for_each(|v| *v *= wr);
    }
    Ok(jac)
}
