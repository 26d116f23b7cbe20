//! Discrete-time rear-axle kinematic bicycle model.
//!
//! ```text
//! x'     = x + v cos(theta) dt
//! y'     = y + v sin(theta) dt
//! theta' = wrap(theta + v tan(delta) / L dt)
//! v'     = max(0, v + a dt)
//! ```
//!
//! Controls are saturated to `|a| <= a_max`, `|delta| <= delta_max` before
//! use. A saturated control has a zero derivative, and so does the speed
//! update when the clamp at zero is active.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{wrap_angle, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
}

impl AgentState {
    pub const fn new(x: f64, y: f64, theta: f64, v: f64) -> Self {
        Self { x, y, theta, v }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.theta, self.v]
    }

    pub fn from_array(s: [f64; 4]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub delta: f64,
}

impl ControlInput {
    pub const fn new(a: f64, delta: f64) -> Self {
        Self { a, delta }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence {
    pub controls: Vec<ControlInput>,
    pub dt: f64,
}

impl ControlSequence {
    pub fn new(controls: Vec<ControlInput>, dt: f64) -> Self {
        Self { controls, dt }
    }

    pub fn zeros(len: usize, dt: f64) -> Self {
        Self::new(vec![ControlInput::default(); len], dt)
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Flattened `[a0, delta0, a1, delta1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.controls.iter().flat_map(|u| [u.a, u.delta]).collect()
    }

    pub fn from_flat(flat: &[f64], dt: f64) -> Self {
        let controls = flat
            .chunks_exact(2)
            .map(|c| ControlInput::new(c[0], c[1]))
            .collect();
        Self::new(controls, dt)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<AgentState>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(states: Vec<AgentState>, dt: f64) -> Self {
        Self { states, dt }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn start(&self) -> &AgentState {
        &self.states[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicParams {
    pub wheelbase: f64,
    pub dt: f64,
    pub a_max: f64,
    pub delta_max: f64,
}

impl Default for KinematicParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.9,
            dt: 0.1,
            a_max: 5.0,
            delta_max: 0.6,
        }
    }
}

impl KinematicParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.wheelbase > 0.0
            && self.dt > 0.0
            && self.a_max > 0.0
            && self.delta_max > 0.0
            && [self.wheelbase, self.dt, self.a_max, self.delta_max]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid kinematic parameters {self:?}")))
        }
    }
}

/// Per-step Jacobians of the update: `state[r][c] = d s'_r / d s_c`,
/// `control[r][c] = d s'_r / d u_c` with `u = (a, delta)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepJacobian<S = f64> {
    pub state: [[S; 4]; 4],
    pub control: [[S; 2]; 4],
}

#[inline]
pub(crate) fn saturate<S: Scalar>(u: S, bound: f64) -> (S, bool) {
    let r = u.re();
    if r > bound {
        (S::cst(bound), true)
    } else if r < -bound {
        (S::cst(-bound), true)
    } else {
        (u, false)
    }
}

/// One model step over a generic scalar.
#[inline]
pub(crate) fn step<S: Scalar>(s: [S; 4], u: [S; 2], p: &KinematicParams) -> [S; 4] {
    let (a, _) = saturate(u[0], p.a_max);
    let (delta, _) = saturate(u[1], p.delta_max);
    let [x, y, th, v] = s;
    let dt = p.dt;
    let v_next = v + a * dt;
    [
        x + v * th.cos() * dt,
        y + v * th.sin() * dt,
        wrap_angle(th + v * delta.tan() * (dt / p.wheelbase)),
        v_next.hinge(),
    ]
}

/// One model step together with its analytic Jacobians.
#[inline]
pub(crate) fn step_with_jacobian<S: Scalar>(
    s: [S; 4],
    u: [S; 2],
    p: &KinematicParams,
) -> ([S; 4], StepJacobian<S>) {
    let (a, a_sat) = saturate(u[0], p.a_max);
    let (delta, d_sat) = saturate(u[1], p.delta_max);
    let [x, y, th, v] = s;
    let dt = p.dt;
    let (c, sn) = (th.cos(), th.sin());
    let t = delta.tan();
    let v_raw = v + a * dt;
    let clamped = v_raw.re() < 0.0;

    let next = [
        x + v * c * dt,
        y + v * sn * dt,
        wrap_angle(th + v * t * (dt / p.wheelbase)),
        if clamped { S::zero() } else { v_raw },
    ];

    let z = S::zero();
    let one = S::cst(1.0);
    let mut jac = StepJacobian {
        state: [[z; 4]; 4],
        control: [[z; 2]; 4],
    };
    jac.state[0] = [one, z, -(v * sn) * dt, c * dt];
    jac.state[1] = [z, one, v * c * dt, sn * dt];
    jac.state[2] = [z, z, one, t * (dt / p.wheelbase)];
    jac.state[3] = [z, z, z, if clamped { z } else { one }];
    if !d_sat {
        jac.control[2][1] = v * (t * t + 1.0) * (dt / p.wheelbase);
    }
    if !a_sat && !clamped {
        jac.control[3][0] = S::cst(dt);
    }
    (next, jac)
}

fn check_inputs(pi: &ControlSequence, params: &KinematicParams) -> Result<()> {
    if pi.is_empty() {
        return Err(Error::invalid("empty control sequence"));
    }
    params.validate()
}

/// Rolls `start` forward under `pi`. The returned trajectory holds
/// `pi.len() + 1` states, the first being `start`.
pub fn rollout(
    start: &AgentState,
    pi: &ControlSequence,
    params: &KinematicParams,
) -> Result<Trajectory> {
    check_inputs(pi, params)?;
    let mut states = Vec::with_capacity(pi.len() + 1);
    let mut s = start.to_array();
    states.push(*start);
    for u in &pi.controls {
        s = step(s, [u.a, u.delta], params);
        states.push(AgentState::from_array(s));
    }
    Ok(Trajectory::new(states, params.dt))
}

/// Per-step Jacobians along the rollout, one entry per control.
pub fn rollout_jacobians(
    start: &AgentState,
    pi: &ControlSequence,
    params: &KinematicParams,
) -> Result<Vec<StepJacobian>> {
    check_inputs(pi, params)?;
    let mut s = start.to_array();
    let mut out = Vec::with_capacity(pi.len());
    for u in &pi.controls {
        let (next, jac) = step_with_jacobian(s, [u.a, u.delta], params);
        out.push(jac);
        s = next;
    }
    Ok(out)
}

/// Vector-Jacobian product of the rollout. `state_grads[k]` is the upstream
/// gradient with respect to state `k` (including the start state at 0).
/// Returns the gradient with respect to the start state and the flattened
/// `(a, delta)` controls.
pub fn rollout_vjp(
    start: &AgentState,
    pi: &ControlSequence,
    params: &KinematicParams,
    state_grads: &[[f64; 4]],
) -> Result<([f64; 4], Vec<f64>)> {
    let jacs = rollout_jacobians(start, pi, params)?;
    if state_grads.len() != jacs.len() + 1 {
        return Err(Error::invalid(format!(
            "expected {} state gradients, got {}",
            jacs.len() + 1,
            state_grads.len()
        )));
    }
    let mut g = state_grads[jacs.len()];
    let mut controls = vec![0.0; 2 * jacs.len()];
    for k in (0..jacs.len()).rev() {
        let j = &jacs[k];
        for c in 0..2 {
            controls[2 * k + c] = (0..4).map(|r| j.control[r][c] * g[r]).sum();
        }
        let mut prev = state_grads[k];
        for (c, p) in prev.iter_mut().enumerate() {
            *p += (0..4).map(|r| j.state[r][c] * g[r]).sum::<f64>();
        }
        g = prev;
    }
    Ok((g, controls))
}

/// Recovers the control sequence that reproduces `future` from `start`
/// by inverting the update equations. Steps at zero speed carry no
/// steering information and recover `delta = 0`.
pub fn recover_controls(
    start: &AgentState,
    future: &[AgentState],
    params: &KinematicParams,
) -> ControlSequence {
    let mut prev = *start;
    let mut controls = Vec::with_capacity(future.len());
    for s in future {
        let a = (s.v - prev.v) / params.dt;
        let delta = if prev.v > 1e-9 {
            let dth = wrap_angle(s.theta - prev.theta);
            (dth * params.wheelbase / (prev.v * params.dt)).atan()
        } else {
            0.0
        };
        controls.push(ControlInput::new(a, delta));
        prev = *s;
    }
    ControlSequence::new(controls, params.dt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> KinematicParams {
        KinematicParams::default()
    }

    #[test]
    fn stationary_fixed_point() {
        let start = AgentState::default();
        let traj = rollout(&start, &ControlSequence::zeros(50, 0.1), &params()).unwrap();
        assert_eq!(traj.len(), 51);
        assert!(traj.states.iter().all(|s| *s == start));
    }

    #[test]
    fn single_step_hand_evaluation() {
        let start = AgentState::new(0.0, 0.0, 0.0, 10.0);
        let pi = ControlSequence::new(vec![ControlInput::new(1.0, 0.0)], 0.1);
        let traj = rollout(&start, &pi, &params()).unwrap();
        let s = traj.states[1];
        assert!((s.x - 1.0).abs() < 1e-12);
        assert_eq!(s.y, 0.0);
        assert_eq!(s.theta, 0.0);
        assert!((s.v - 10.1).abs() < 1e-12);
    }

    #[test]
    fn constant_steer_heading_accumulates() {
        let start = AgentState::new(0.0, 0.0, 0.0, 5.0);
        let pi = ControlSequence::new(vec![ControlInput::new(0.0, 0.1); 50], 0.1);
        let traj = rollout(&start, &pi, &params()).unwrap();
        // independent scalar loop
        let rate = 5.0 * 0.1f64.tan() / 2.9 * 0.1;
        let mut heading = 0.0;
        for (k, s) in traj.states.iter().enumerate() {
            let closed = k as f64 * rate;
            assert!((s.theta - wrap_angle(closed)).abs() < 1e-12, "step {k}");
            assert!((s.theta - wrap_angle(heading)).abs() < 1e-12);
            heading += rate;
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let err = rollout(&AgentState::default(), &ControlSequence::zeros(0, 0.1), &params());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_speed_steer_derivative_vanishes() {
        let pi = ControlSequence::new(vec![ControlInput::new(0.0, 0.0)], 0.1);
        let j = rollout_jacobians(&AgentState::default(), &pi, &params()).unwrap();
        assert_eq!(j[0].control[2][1], 0.0);
    }

    #[test]
    fn saturated_steer_column_is_zero() {
        let start = AgentState::new(0.0, 0.0, 0.0, 8.0);
        let pi = ControlSequence::new(vec![ControlInput::new(0.0, 0.6)], 0.1);
        let j = rollout_jacobians(&start, &pi, &params()).unwrap();
        // exactly at the bound is still inside; push past it
        assert!(j[0].control[2][1] > 0.0);
        let pi = ControlSequence::new(vec![ControlInput::new(9.0, 0.9)], 0.1);
        let j = rollout_jacobians(&start, &pi, &params()).unwrap();
        for r in 0..4 {
            assert_eq!(j[0].control[r][1], 0.0);
            assert_eq!(j[0].control[r][0], 0.0);
        }
    }

    #[test]
    fn speed_clamp_zeroes_acceleration_derivative() {
        let start = AgentState::new(0.0, 0.0, 0.0, 0.2);
        let pi = ControlSequence::new(vec![ControlInput::new(-4.0, 0.0)], 0.1);
        let traj = rollout(&start, &pi, &params()).unwrap();
        assert_eq!(traj.states[1].v, 0.0);
        let j = rollout_jacobians(&start, &pi, &params()).unwrap();
        assert_eq!(j[0].control[3][0], 0.0);
    }

    #[test]
    fn recovered_controls_replay_the_log() {
        let start = AgentState::new(1.0, -2.0, 0.4, 6.0);
        let pi = ControlSequence::new(
            (0..50)
                .map(|k| ControlInput::new(((k as f64) * 0.3).sin(), 0.2 * ((k as f64) * 0.1).cos()))
                .collect(),
            0.1,
        );
        let traj = rollout(&start, &pi, &params()).unwrap();
        let rec = recover_controls(&start, &traj.states[1..], &params());
        let replay = rollout(&start, &rec, &params()).unwrap();
        for (a, b) in traj.states.iter().zip(&replay.states) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
    }
}
