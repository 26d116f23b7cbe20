//! Damped Gauss-Newton refinement of a control sequence, differentiable by
//! unrolling the iterations.
//!
//! Each accepted iteration maps `x -> x + eta * delta(x, w)` with
//! `delta = -(J^T J + lambda I)^{-1} J^T r`. The backward pass revisits the
//! accepted iterations in reverse and needs second derivatives of the
//! residuals only through products `d/de [J(x + e v)^T y]`, which are
//! obtained by evaluating the Jacobian over [`Dual`] numbers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costs::{raw_costs, CostScene, CostWeights, RawCosts, NUM_TERMS};
use crate::error::{Error, Result};
use crate::kinematics::{AgentState, ControlSequence, KinematicParams};
use crate::scalar::{Dual, Scalar};
use crate::scenarios::{Frame, FUTURE_LEN};

/// Damping retries allowed per iteration after the first attempt.
pub const MAX_RETRIES: usize = 5;
/// Iterations stop once `||J^T r||` falls to this level.
pub const GRADIENT_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub step_size: f64,
    pub iterations: usize,
    pub damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step_size: 0.4,
            iterations: 2,
            damping: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::invalid(format!("step_size {} outside (0, 1]", self.step_size)));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(Error::invalid(format!("damping {} must be finite and >= 0", self.damping)));
        }
        Ok(())
    }
}

/// A weighted nonlinear least-squares problem `1/2 ||W c(x)||^2` where each
/// residual row is scaled by one of a small set of weights.
pub trait LeastSquaresProblem: Sync {
    fn num_params(&self) -> usize;
    fn weights(&self) -> &[f64];
    /// Which weight scales residual `row`.
    fn weight_index(&self, row: usize) -> usize;
    /// Unweighted residuals, and their row-major Jacobian on request.
    fn evaluate<S: Scalar>(&self, x: &[S], with_jacobian: bool) -> RawCosts<S>;
}

/// One accepted iteration: the iterate it started from, the step taken and
/// the damping that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverStep {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub damping: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    pub steps: Vec<SolverStep>,
    /// Objective at the start and after every iteration.
    pub objective: Vec<f64>,
}

struct Linearization {
    c: DVector<f64>,
    r: DVector<f64>,
    jc: DMatrix<f64>,
    j: DMatrix<f64>,
}

fn row_weights<P: LeastSquaresProblem>(p: &P, rows: usize) -> Vec<f64> {
    let w = p.weights();
    (0..rows).map(|m| w[p.weight_index(m)]).collect()
}

fn objective<P: LeastSquaresProblem>(p: &P, x: &[f64]) -> f64 {
    let raw = p.evaluate(x, false);
    let w = p.weights();
    0.5 * raw
        .costs
        .iter()
        .enumerate()
        .map(|(m, c)| (w[p.weight_index(m)] * c).powi(2))
        .sum::<f64>()
}

fn linearize<P: LeastSquaresProblem>(p: &P, x: &[f64]) -> Linearization {
    let n = x.len();
    let raw = p.evaluate(x, true);
    let rows = raw.costs.len();
    let rw = row_weights(p, rows);
    let c = DVector::from_vec(raw.costs);
    let jc = DMatrix::from_row_slice(rows, n, &raw.jacobian.expect("requested"));
    let r = c.component_mul(&DVector::from_column_slice(&rw));
    let mut j = jc.clone();
    for (m, mut row) in j.row_iter_mut().enumerate() {
        row *= rw[m];
    }
    Linearization { c, r, jc, j }
}

fn normal_matrix(j: &DMatrix<f64>, damping: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut m = j.tr_mul(j);
    for i in 0..m.nrows() {
        m[(i, i)] += damping;
    }
    Cholesky::new(m)
}

/// Runs `cfg.iterations` damped Gauss-Newton iterations from `x0`.
pub fn solve<P: LeastSquaresProblem>(p: &P, x0: &[f64], cfg: &SolverConfig) -> Result<Solution> {
    cfg.validate()?;
    if x0.len() != p.num_params() {
        return Err(Error::invalid(format!(
            "expected {} parameters, got {}",
            p.num_params(),
            x0.len()
        )));
    }
    let mut x = x0.to_vec();
    let mut steps = Vec::new();
    let mut f = objective(p, &x);
    let mut objectives = vec![f];
    let fail = |iteration: usize, reason: &str, x: &[f64]| Error::Solver {
        reason: reason.to_string(),
        iteration,
        last_iterate: x.to_vec(),
    };
    if !f.is_finite() {
        return Err(fail(0, "non-finite objective", &x));
    }

    for it in 0..cfg.iterations {
        let lin = linearize(p, &x);
        let g = lin.j.tr_mul(&lin.r);
        if g.norm() <= GRADIENT_TOLERANCE {
            break;
        }
        let mut damping = cfg.damping;
        let mut accepted = false;
        let mut singular = false;
        for _ in 0..=MAX_RETRIES {
            let Some(chol) = normal_matrix(&lin.j, damping) else {
                singular = true;
                damping = if damping > 0.0 { 2.0 * damping } else { 1e-12 };
                continue;
            };
            singular = false;
            let delta = -chol.solve(&g);
            let x_new: Vec<f64> = x
                .iter()
                .zip(delta.iter())
                .map(|(xi, di)| xi + cfg.step_size * di)
                .collect();
            let f_new = objective(p, &x_new);
            if f_new <= f {
                steps.push(SolverStep {
                    x: std::mem::replace(&mut x, x_new),
                    delta: delta.as_slice().to_vec(),
                    damping,
                });
                f = f_new;
                accepted = true;
                break;
            }
            damping = if damping > 0.0 { 2.0 * damping } else { 1e-12 };
        }
        if singular {
            return Err(fail(it, "singular normal equations", &x));
        }
        objectives.push(f);
        if !accepted {
            break;
        }
    }
    Ok(Solution {
        x,
        steps,
        objective: objectives,
    })
}

/// `sum_m y_m w_m d/de [Jc_m(x + e v)]`, one entry per parameter.
fn hessian_vector<P: LeastSquaresProblem>(p: &P, x: &[f64], v: &[f64], y: &DVector<f64>, rw: &[f64]) -> DVector<f64> {
    let n = x.len();
    let xd: Vec<Dual> = x.iter().zip(v).map(|(a, b)| Dual::new(*a, *b)).collect();
    let jac = p.evaluate(&xd, true).jacobian.expect("requested");
    let mut out = DVector::zeros(n);
    for (m, row) in jac.chunks_exact(n).enumerate() {
        let s = y[m] * rw[m];
        if s == 0.0 {
            continue;
        }
        for (o, d) in out.iter_mut().zip(row) {
            *o += s * d.eps;
        }
    }
    out
}

/// Pulls `upstream = dL/dx*` back through the unrolled iterations, giving
/// `(dL/dx0, dL/dw)`.
pub fn solution_vjp<P: LeastSquaresProblem>(
    p: &P,
    sol: &Solution,
    cfg: &SolverConfig,
    upstream: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut g = DVector::from_column_slice(upstream);
    let mut gw = vec![0.0; p.weights().len()];
    let eta = cfg.step_size;
    for step in sol.steps.iter().rev() {
        let lin = linearize(p, &step.x);
        let rows = lin.r.len();
        let rw = row_weights(p, rows);
        let chol = normal_matrix(&lin.j, step.damping).expect("factorized in the forward pass");
        let z = chol.solve(&g);
        let delta = DVector::from_column_slice(&step.delta);
        let a = &lin.r + &lin.j * &delta;
        let u = &lin.j * &z;
        let hz = hessian_vector(p, &step.x, z.as_slice(), &a, &rw);
        let hd = hessian_vector(p, &step.x, delta.as_slice(), &u, &rw);
        let jcz = &lin.jc * &z;
        let jcd = &lin.jc * &delta;
        for m in 0..rows {
            gw[p.weight_index(m)] -= eta * (a[m] * jcz[m] + u[m] * jcd[m] + u[m] * lin.c[m]);
        }
        g -= (hz + hd + lin.j.tr_mul(&u)) * eta;
    }
    (g.as_slice().to_vec(), gw)
}

/// Refinement objective for one planning problem.
pub struct PlanningProblem<'a> {
    pub start: AgentState,
    pub scene: &'a CostScene<'a>,
    pub weights: [f64; NUM_TERMS],
    pub kin: KinematicParams,
    pub horizon: usize,
}

impl LeastSquaresProblem for PlanningProblem<'_> {
    fn num_params(&self) -> usize {
        2 * self.horizon
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn weight_index(&self, row: usize) -> usize {
        row / self.horizon
    }

    fn evaluate<S: Scalar>(&self, x: &[S], with_jacobian: bool) -> RawCosts<S> {
        raw_costs(x, &self.start, self.scene, &self.kin, with_jacobian)
    }
}

/// A finished refinement that can propagate gradients back to the initial
/// sequence and the cost weights.
pub struct Refinement<'a> {
    pub problem: PlanningProblem<'a>,
    pub solution: Solution,
    pub config: SolverConfig,
    pub dt: f64,
}

impl Refinement<'_> {
    pub fn plan(&self) -> ControlSequence {
        ControlSequence::from_flat(&self.solution.x, self.dt)
    }

    /// `(dL/dpi0, dL/dw)` given `dL/dpi*` as a flat `[a0, d0, a1, ...]` vector.
    pub fn vjp(&self, upstream: &[f64]) -> (Vec<f64>, [f64; NUM_TERMS]) {
        let (gx, gw) = solution_vjp(&self.problem, &self.solution, &self.config, upstream);
        let mut w = [0.0; NUM_TERMS];
        w.copy_from_slice(&gw);
        (gx, w)
    }
}

/// Refines `pi0` and keeps what the backward pass needs.
pub fn refine_tracked<'a>(
    pi0: &ControlSequence,
    start: &AgentState,
    scene: &'a CostScene<'a>,
    w: &CostWeights,
    cfg: &SolverConfig,
    kin: &KinematicParams,
) -> Result<Refinement<'a>> {
    if pi0.is_empty() {
        return Err(Error::invalid("empty control sequence"));
    }
    w.validate()?;
    kin.validate()?;
    scene.route.validate()?;
    let flat = pi0.to_flat();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite control sequence"));
    }
    let problem = PlanningProblem {
        start: *start,
        scene,
        weights: w.to_array(),
        kin: *kin,
        horizon: pi0.len(),
    };
    let solution = solve(&problem, &flat, cfg)?;
    Ok(Refinement {
        problem,
        solution,
        config: *cfg,
        dt: pi0.dt,
    })
}

/// Refines `pi0` against the weighted cost of `scene`.
pub fn refine(
    pi0: &ControlSequence,
    start: &AgentState,
    scene: &CostScene<'_>,
    w: &CostWeights,
    cfg: &SolverConfig,
    kin: &KinematicParams,
) -> Result<ControlSequence> {
    Ok(refine_tracked(pi0, start, scene, w, cfg, kin)?.plan())
}

/// [`refine`] on a frame, with neighbors extrapolated at constant velocity.
pub fn refine_frame(
    pi0: &ControlSequence,
    frame: &Frame,
    w: &CostWeights,
    cfg: &SolverConfig,
    kin: &KinematicParams,
) -> Result<ControlSequence> {
    let scene = CostScene::from_frame(frame, pi0.len().max(FUTURE_LEN), kin)?;
    refine(pi0, frame.current(), &scene, w, cfg, kin)
}

/// Refined plan with full Jacobians: `d_weights` is `2T x 9`, `d_initial`
/// is `2T x 2T`, rows indexing the flattened output.
#[derive(Clone, Debug)]
pub struct RefineGrad {
    pub plan: ControlSequence,
    pub d_weights: DMatrix<f64>,
    pub d_initial: DMatrix<f64>,
}

pub fn refine_with_grad(
    pi0: &ControlSequence,
    start: &AgentState,
    scene: &CostScene<'_>,
    w: &CostWeights,
    cfg: &SolverConfig,
    kin: &KinematicParams,
) -> Result<RefineGrad> {
    let r = refine_tracked(pi0, start, scene, w, cfg, kin)?;
    let n = 2 * pi0.len();
    let rows: Vec<(Vec<f64>, [f64; NUM_TERMS])> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            r.vjp(&e)
        })
        .collect();
    let mut d_initial = DMatrix::zeros(n, n);
    let mut d_weights = DMatrix::zeros(n, NUM_TERMS);
    for (i, (gx, gw)) in rows.iter().enumerate() {
        d_initial.row_mut(i).copy_from_slice(gx);
        d_weights.row_mut(i).copy_from_slice(gw);
    }
    Ok(RefineGrad {
        plan: r.plan(),
        d_weights,
        d_initial,
    })
}
