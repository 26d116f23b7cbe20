//! Python bindings. Configs cross the boundary as JSON strings with the same
//! schema the CLI reads; cost weights and features cross as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde_json::Value;

use tilplan::costs::{CostScene, CostTerm, CostWeights, NUM_TERMS};
use tilplan::eval::{Domain, EvalConfig};
use tilplan::features::{FeatureScaling, FeatureVector, FEATURE_NAMES, NUM_FEATURES};
use tilplan::kinematics::{AgentState, ControlInput, ControlSequence, KinematicParams};
use tilplan::optimizer::SolverConfig;
use tilplan::policy::{encode_scene, forward, select_best, ILLossConfig, PolicyConfig, PolicyParams};
use tilplan::pretrain::PretrainConfig;
use tilplan::scenarios::StyleParams;
use tilplan::transfer::{classify_frame, FineTuneConfig, Structure};

type State = (f64, f64, f64, f64);
type Control = (f64, f64);

fn err(e: tilplan::Error) -> PyErr {
    match e.root() {
        tilplan::Error::InvalidArgument(_) | tilplan::Error::Data(_) | tilplan::Error::Parse { .. } | tilplan::Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        tilplan::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
    }
}

fn parse_name<T: serde::de::DeserializeOwned>(s: &str) -> PyResult<T> {
    serde_json::from_value(Value::String(s.into())).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn state(s: State) -> AgentState {
    AgentState::new(s.0, s.1, s.2, s.3)
}

fn tuple(s: &AgentState) -> State {
    (s.x, s.y, s.theta, s.v)
}

fn controls(c: &[Control], dt: f64) -> ControlSequence {
    ControlSequence::new(c.iter().map(|&(a, d)| ControlInput::new(a, d)).collect(), dt)
}

fn control_list(pi: &ControlSequence) -> Vec<Control> {
    pi.controls.iter().map(|u| (u.a, u.delta)).collect()
}

fn weights_from(d: Option<&Bound<'_, PyDict>>) -> PyResult<CostWeights> {
    let mut w = CostWeights::default().to_array();
    if let Some(d) = d {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let term = CostTerm::ALL
                .iter()
                .find(|t| t.name() == key)
                .ok_or_else(|| PyValueError::new_err(format!("unknown cost term '{key}'")))?;
            w[term.index()] = v.extract()?;
        }
    }
    let w = CostWeights::from_array(w);
    w.validate().map_err(err)?;
    Ok(w)
}

fn weights_dict<'py>(py: Python<'py>, w: &CostWeights) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (t, v) in CostTerm::ALL.iter().zip(w.to_array()) {
        d.set_item(t.name(), v)?;
    }
    Ok(d)
}

fn features_dict<'py>(py: Python<'py>, f: &FeatureVector) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (n, v) in FEATURE_NAMES.iter().zip(f.to_array()) {
        d.set_item(*n, v)?;
    }
    Ok(d)
}

fn features_from(d: &Bound<'_, PyDict>) -> PyResult<FeatureVector> {
    let mut a = [0.0; NUM_FEATURES];
    for (i, n) in FEATURE_NAMES.iter().enumerate() {
        a[i] = d
            .get_item(*n)?
            .ok_or_else(|| PyValueError::new_err(format!("missing feature '{n}'")))?
            .extract()?;
    }
    Ok(FeatureVector::from_array(a))
}

/// One 7 s window: 2 s of history and a 5 s ground-truth future.
#[pyclass(name = "Frame", frozen, skip_from_py_object, module = "tilplan")]
#[derive(Clone)]
struct PyFrame {
    inner: tilplan::scenarios::Frame,
}

#[pymethods]
impl PyFrame {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: tilplan::scenarios::Frame = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn scene_id(&self) -> String {
        self.inner.scene_id.clone()
    }

    #[getter]
    fn frame_index(&self) -> usize {
        self.inner.frame_index
    }

    /// Current ego state `(x, y, theta, v)`.
    #[getter]
    fn current(&self) -> State {
        tuple(self.inner.current())
    }

    #[getter]
    fn ground_truth(&self) -> Vec<State> {
        self.inner.ego_future_gt.iter().map(tuple).collect()
    }

    #[getter]
    fn num_neighbors(&self) -> usize {
        self.inner.neighbors.len()
    }

    /// "stationary", "straight" or "turn".
    #[getter]
    fn trajectory_class(&self) -> &'static str {
        classify_frame(&self.inner).name()
    }

    fn __repr__(&self) -> String {
        format!("Frame({}#{})", self.inner.scene_id, self.inner.frame_index)
    }
}

fn unwrap_frames(frames: &[PyRef<'_, PyFrame>]) -> Vec<tilplan::scenarios::Frame> {
    frames.iter().map(|f| f.inner.clone()).collect()
}

/// A multi-modal planning policy.
#[pyclass(name = "Policy", frozen, skip_from_py_object, module = "tilplan")]
#[derive(Clone)]
struct PyPolicy {
    inner: PolicyParams,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (seed=0, hidden=256, horizon=50, modes=3))]
    fn new(seed: u64, hidden: usize, horizon: usize, modes: usize) -> PyResult<Self> {
        let config = PolicyConfig {
            hidden,
            horizon,
            modes,
            ..PolicyConfig::default()
        };
        Ok(Self {
            inner: PolicyParams::init(config, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PolicyParams::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.values.len()
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.config.horizon
    }

    /// Best-scoring mode's controls `[(a, delta), ...]`, optionally refined
    /// by the cost-function optimizer.
    #[pyo3(signature = (frame, refine=false, weights=None))]
    fn plan(&self, frame: &PyFrame, refine: bool, weights: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<Control>> {
        let kin = KinematicParams::default();
        let w = weights_from(weights)?;
        let out = forward(&self.inner, &encode_scene(&frame.inner), &kin).map_err(err)?;
        let best = select_best(&out);
        if !refine {
            return Ok(control_list(&best));
        }
        let enc = encode_scene(&frame.inner);
        let preds = out.predictions.iter().take(enc.neighbor_indices.len()).cloned().collect();
        let scene = CostScene::from_frame(&frame.inner, best.len(), &kin).map_err(err)?.with_predictions(preds);
        let pi = tilplan::optimizer::refine(&best, frame.inner.current(), &scene, &w, &SolverConfig::default(), &kin).map_err(err)?;
        Ok(control_list(&pi))
    }

    /// Imitation loss on one frame with default loss weights.
    fn il_loss(&self, frame: &PyFrame) -> PyResult<f64> {
        let (l, _) = tilplan::policy::il_loss(&self.inner, &frame.inner, &ILLossConfig::default(), &KinematicParams::default())
            .map_err(err)?;
        Ok(l)
    }
}

/// Synthetic frames in one driving style ("neutral", "aggressive",
/// "gentle" or a JSON object of style parameters).
#[pyfunction]
#[pyo3(signature = (scenes, style="neutral", seed=0))]
fn generate_frames(py: Python<'_>, scenes: usize, style: &str, seed: u64) -> PyResult<Vec<PyFrame>> {
    let style = match style {
        "neutral" => StyleParams::neutral(),
        "aggressive" => StyleParams::aggressive(),
        "gentle" => StyleParams::gentle(),
        json => serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("style: {e}")))?,
    };
    let frames = py
        .detach(|| -> tilplan::Result<Vec<_>> {
            let mut out = Vec::new();
            for s in tilplan::scenarios::generate_scenes(scenes, &style, seed)? {
                out.extend(tilplan::scenarios::segment_frames(&s)?);
            }
            Ok(out)
        })
        .map_err(err)?;
    Ok(frames.into_iter().map(|inner| PyFrame { inner }).collect())
}

#[pyfunction]
fn load_frames(path: PathBuf) -> PyResult<Vec<PyFrame>> {
    Ok(tilplan::scenarios::load_frames(&path)
        .map_err(err)?
        .into_iter()
        .map(|inner| PyFrame { inner })
        .collect())
}

#[pyfunction]
fn save_frames(path: PathBuf, frames: Vec<PyRef<'_, PyFrame>>) -> PyResult<()> {
    tilplan::scenarios::save_frames(&path, &unwrap_frames(&frames)).map_err(err)
}

/// States `[(x, y, theta, v), ...]` reached from `start`, start included.
#[pyfunction]
fn rollout(start: State, controls_: Vec<Control>) -> PyResult<Vec<State>> {
    let kin = KinematicParams::default();
    let t = tilplan::kinematics::rollout(&state(start), &controls(&controls_, kin.dt), &kin).map_err(err)?;
    Ok(t.states.iter().map(tuple).collect())
}

#[pyfunction]
fn recover_controls(start: State, future: Vec<State>) -> Vec<Control> {
    let kin = KinematicParams::default();
    let fut: Vec<AgentState> = future.into_iter().map(state).collect();
    control_list(&tilplan::kinematics::recover_controls(&state(start), &fut, &kin))
}

#[pyfunction]
fn default_cost_weights(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    weights_dict(py, &CostWeights::default())
}

/// Style features of `controls` driven from the frame's current state, or
/// of the ground truth when `controls` is omitted.
#[pyfunction]
#[pyo3(signature = (frame, controls_=None))]
fn extract_features<'py>(py: Python<'py>, frame: &PyFrame, controls_: Option<Vec<Control>>) -> PyResult<Bound<'py, PyDict>> {
    let kin = KinematicParams::default();
    let traj = match controls_ {
        Some(c) => tilplan::kinematics::rollout(frame.inner.current(), &controls(&c, kin.dt), &kin),
        None => frame.inner.ground_truth_trajectory(),
    }
    .map_err(err)?;
    let f = tilplan::features::extract_features(&traj, &frame.inner, &FeatureScaling::default()).map_err(err)?;
    features_dict(py, &f)
}

#[pyfunction]
fn style_error(a: &Bound<'_, PyDict>, b: &Bound<'_, PyDict>) -> PyResult<f64> {
    Ok(tilplan::features::style_error(&features_from(a)?, &features_from(b)?))
}

#[pyfunction]
fn maxent_probabilities(costs: Vec<f64>) -> PyResult<Vec<f64>> {
    tilplan::irl::maxent_probabilities(&costs).map_err(err)
}

/// Refines a control sequence against the weighted cost of `frame`.
#[pyfunction]
#[pyo3(signature = (frame, controls_, weights=None, step_size=0.4, iterations=2))]
fn refine(
    frame: &PyFrame,
    controls_: Vec<Control>,
    weights: Option<&Bound<'_, PyDict>>,
    step_size: f64,
    iterations: usize,
) -> PyResult<Vec<Control>> {
    let kin = KinematicParams::default();
    let cfg = SolverConfig {
        step_size,
        iterations,
        ..SolverConfig::default()
    };
    cfg.validate().map_err(err)?;
    let pi = tilplan::optimizer::refine_frame(&controls(&controls_, kin.dt), &frame.inner, &weights_from(weights)?, &cfg, &kin)
        .map_err(err)?;
    Ok(control_list(&pi))
}

/// Imitation pre-training; returns the trained policy and per-epoch loss.
#[pyfunction]
#[pyo3(signature = (policy, expert, config=None))]
fn pretrain(py: Python<'_>, policy: &PyPolicy, expert: Vec<PyRef<'_, PyFrame>>, config: Option<&str>) -> PyResult<(PyPolicy, Vec<f64>)> {
    let cfg: PretrainConfig = parse(config)?;
    let frames = unwrap_frames(&expert);
    let p = policy.inner.clone();
    let (inner, curve) = py.detach(|| tilplan::pretrain::pretrain(&p, &frames, &cfg)).map_err(err)?;
    Ok((PyPolicy { inner }, curve))
}

/// Fine-tunes toward the user's style; returns the policy, the cost
/// weights and the per-update log as dicts.
#[pyfunction]
#[pyo3(signature = (policy, expert, user, config=None, weights=None))]
fn finetune<'py>(
    py: Python<'py>,
    policy: &PyPolicy,
    expert: Vec<PyRef<'py, PyFrame>>,
    user: Vec<PyRef<'py, PyFrame>>,
    config: Option<&str>,
    weights: Option<&Bound<'py, PyDict>>,
) -> PyResult<(PyPolicy, Bound<'py, PyDict>, Vec<Bound<'py, PyDict>>)> {
    let cfg: FineTuneConfig = parse(config)?;
    let w = weights_from(weights)?;
    let (e, u) = (unwrap_frames(&expert), unwrap_frames(&user));
    let p = policy.inner.clone();
    let res = py.detach(|| tilplan::transfer::finetune(&p, &w, &e, &u, &cfg)).map_err(err)?;
    let log = res
        .log
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("class", r.class.name())?;
            d.set_item("loss_il", r.loss_il)?;
            d.set_item("loss_irl", r.loss_irl)?;
            d.set_item("loss_til", r.loss_til)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    Ok((PyPolicy { inner: res.params }, weights_dict(py, &res.weights)?, log))
}

/// Open-loop metrics as a dict keyed like the report columns.
#[pyfunction]
#[pyo3(signature = (policy, frames, target=None, weights=None, structure="nn", domain="out", model="model", config=None))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    policy: &PyPolicy,
    frames: Vec<PyRef<'py, PyFrame>>,
    target: Option<Vec<PyRef<'py, PyFrame>>>,
    weights: Option<&Bound<'py, PyDict>>,
    structure: &str,
    domain: &str,
    model: &str,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg: EvalConfig = parse(config)?;
    let structure: Structure = parse_name(structure)?;
    let domain: Domain = parse_name(domain)?;
    let w = weights_from(weights)?;
    let data = unwrap_frames(&frames);
    let demo = target.map(|t| unwrap_frames(&t)).unwrap_or_else(|| data.clone());
    let p = policy.inner.clone();
    let r = py
        .detach(|| {
            let style = tilplan::irl::feature_expectation(&demo, &cfg.beta)?;
            tilplan::eval::evaluate(model, domain, &p, &w, &data, &style, structure, &cfg)
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("model", &r.model)?;
    d.set_item("domain", r.domain.name())?;
    d.set_item("plan_err_1s", r.plan_error_1s)?;
    d.set_item("plan_err_3s", r.plan_error_3s)?;
    d.set_item("ade_5s", r.ade_5s)?;
    d.set_item("fde_5s", r.fde_5s)?;
    d.set_item("collision_pct", r.collision_rate)?;
    d.set_item("off_route_pct", r.off_route_rate)?;
    d.set_item("red_light_pct", r.red_light_rate)?;
    d.set_item("style_error", r.style_error)?;
    d.set_item("frames", r.frame_count)?;
    Ok(d)
}

/// Runs the command-line front end in-process and returns its exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| tilplan::cli::run(std::iter::once("tilplan".to_string()).chain(args)))
}

#[pymodule]
#[pyo3(name = "tilplan")]
fn tilplan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("NUM_COST_TERMS", NUM_TERMS)?;
    m.add("FEATURE_NAMES", FEATURE_NAMES.to_vec())?;
    m.add_class::<PyFrame>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(generate_frames, m)?)?;
    m.add_function(wrap_pyfunction!(load_frames, m)?)?;
    m.add_function(wrap_pyfunction!(save_frames, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(recover_controls, m)?)?;
    m.add_function(wrap_pyfunction!(default_cost_weights, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(style_error, m)?)?;
    m.add_function(wrap_pyfunction!(maxent_probabilities, m)?)?;
    m.add_function(wrap_pyfunction!(refine, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
