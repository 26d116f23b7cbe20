use std::path::Path;

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encode::ENCODING_DIM;
use crate::error::{Error, Result};
use crate::scenarios::{FUTURE_LEN, MAX_NEIGHBORS};

const CHECKPOINT_FORMAT: &str = "tilplan-policy";
const CHECKPOINT_VERSION: u32 = 1;

/// Shape of the planner network: two `tanh` hidden layers of equal width
/// and one linear output layer holding all heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub modes: usize,
    pub horizon: usize,
    pub neighbors: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            input_dim: ENCODING_DIM,
            hidden: 256,
            modes: 3,
            horizon: FUTURE_LEN,
            neighbors: MAX_NEIGHBORS,
        }
    }
}

impl PolicyConfig {
    pub fn plan_outputs(&self) -> usize {
        self.modes * self.horizon * 2
    }

    pub fn prediction_outputs(&self) -> usize {
        self.neighbors * self.horizon * 2
    }

    pub fn output_dim(&self) -> usize {
        self.plan_outputs() + self.modes + self.prediction_outputs()
    }

    /// Offsets of `[w1, b1, w2, b2, w3, b3]` in the flat parameter vector,
    /// followed by the total length.
    fn layout(&self) -> [usize; 7] {
        let (i, h, o) = (self.input_dim, self.hidden, self.output_dim());
        let sizes = [h * i, h, h * h, h, o * h, o];
        let mut off = [0; 7];
        for k in 0..6 {
            off[k + 1] = off[k] + sizes[k];
        }
        off
    }

    pub fn num_params(&self) -> usize {
        self.layout()[6]
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.modes == 0 || self.horizon == 0 {
            return Err(Error::invalid(format!("degenerate policy config {self:?}")));
        }
        if self.neighbors > MAX_NEIGHBORS {
            return Err(Error::invalid(format!("at most {MAX_NEIGHBORS} predicted neighbors")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: PolicyConfig,
    values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(config: PolicyConfig) -> Self {
        Self {
            values: vec![0.0; config.num_params()],
            config,
        }
    }

    /// Glorot-uniform weights, zero biases; the output layer is shrunk so
    /// an untrained network starts near the zero plan.
    pub fn init(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let off = config.layout();
        let (i, h, o) = (config.input_dim, config.hidden, config.output_dim());
        for (layer, (fan_in, fan_out, gain)) in [(i, h, 1.0), (h, h, 1.0), (h, o, 0.1)].into_iter().enumerate() {
            let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.values[off[2 * layer]..off[2 * layer + 1]] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.values.len() != self.config.num_params() {
            return Err(Error::invalid(format!(
                "policy expects {} parameters, found {}",
                self.config.num_params(),
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite policy parameter"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config,
            values: self.values.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        let p = Self {
            config: c.config,
            values: c.values,
        };
        p.validate().map_err(|e| Error::data(e.to_string()))?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }

    fn matrix(&self, k: usize, rows: usize, cols: usize) -> DMatrixView<'_, f64> {
        let off = self.config.layout();
        DMatrixView::from_slice(&self.values[off[k]..off[k + 1]], rows, cols)
    }
}

/// Activations kept from a batched forward pass; column `b` is sample `b`.
#[derive(Clone, Debug)]
pub struct NetworkCache {
    pub input: DMatrix<f64>,
    pub h1: DMatrix<f64>,
    pub h2: DMatrix<f64>,
    pub output: DMatrix<f64>,
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrixView<'_, f64>) {
    for mut col in m.column_iter_mut() {
        col += b.column(0);
    }
}

/// Raw (pre-squash) outputs for a batch of input columns.
pub fn network_forward(params: &PolicyParams, input: DMatrix<f64>) -> Result<NetworkCache> {
    let c = &params.config;
    if input.nrows() != c.input_dim {
        return Err(Error::invalid(format!(
            "input has {} rows, network expects {}",
            input.nrows(),
            c.input_dim
        )));
    }
    let (h, o) = (c.hidden, c.output_dim());
    let mut h1 = params.matrix(0, h, c.input_dim) * &input;
    add_bias(&mut h1, &params.matrix(1, h, 1));
    h1.apply(|v| *v = v.tanh());
    let mut h2 = params.matrix(2, h, h) * &h1;
    add_bias(&mut h2, &params.matrix(3, h, 1));
    h2.apply(|v| *v = v.tanh());
    let mut output = params.matrix(4, o, h) * &h2;
    add_bias(&mut output, &params.matrix(5, o, 1));
    Ok(NetworkCache { input, h1, h2, output })
}

/// Parameter gradient, summed over the batch, given `dL/d output`.
pub fn network_backward(params: &PolicyParams, cache: &NetworkCache, d_output: &DMatrix<f64>) -> Vec<f64> {
    let c = &params.config;
    let (h, o) = (c.hidden, c.output_dim());
    let off = c.layout();
    let mut grad = vec![0.0; off[6]];
    let mut put = |k: usize, m: &DMatrix<f64>| grad[off[k]..off[k + 1]].copy_from_slice(m.as_slice());
    let row_sum = |m: &DMatrix<f64>| m.column_sum();

    put(4, &(d_output * cache.h2.transpose()));
    put(5, &DMatrix::from_column_slice(o, 1, row_sum(d_output).as_slice()));
    let mut d2 = params.matrix(4, o, h).tr_mul(d_output);
    d2.zip_apply(&cache.h2, |d, a| *d *= 1.0 - a * a);
    put(2, &(&d2 * cache.h1.transpose()));
    put(3, &DMatrix::from_column_slice(h, 1, row_sum(&d2).as_slice()));
    let mut d1 = params.matrix(2, h, h).tr_mul(&d2);
    d1.zip_apply(&cache.h1, |d, a| *d *= 1.0 - a * a);
    put(0, &(&d1 * cache.input.transpose()));
    put(1, &DMatrix::from_column_slice(h, 1, row_sum(&d1).as_slice()));
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PolicyConfig {
        PolicyConfig {
            input_dim: 6,
            hidden: 8,
            modes: 2,
            horizon: 3,
            neighbors: 1,
        }
    }

    #[test]
    fn parameter_count() {
        let c = tiny();
        let o = 2 * 3 * 2 + 2 + 3 * 2;
        assert_eq!(c.output_dim(), o);
        assert_eq!(c.num_params(), 8 * 6 + 8 + 64 + 8 + o * 8 + o);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let p = PolicyParams::init(tiny(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
        let o = tiny().output_dim();
        let probe = DMatrix::from_fn(o, 3, |_, _| rng.gen_range(-1.0..1.0));
        let loss = |p: &PolicyParams| network_forward(p, x.clone()).unwrap().output.dot(&probe);
        let cache = network_forward(&p, x.clone()).unwrap();
        let g = network_backward(&p, &cache, &probe);
        let h = 1e-6;
        for k in 0..p.values.len() {
            let mut q = p.clone();
            q.values[k] += h;
            let up = loss(&q);
            q.values[k] -= 2.0 * h;
            let fd = (up - loss(&q)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = PolicyParams::init(tiny(), 9).unwrap();
        let q = PolicyParams::from_json(&p.to_json().unwrap()).unwrap();
        assert!(p.values.iter().zip(&q.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(p.config, q.config);
    }

    #[test]
    fn wrong_length_checkpoint_is_rejected() {
        let mut p = PolicyParams::init(tiny(), 9).unwrap();
        p.values.pop();
        let text = serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: p.config,
            values: p.values,
        })
        .unwrap();
        assert!(matches!(PolicyParams::from_json(&text), Err(Error::Data(_))));
    }
}
