//! Style regularizer and maximum-entropy IRL utilities.
//!
//! Training never evaluates a partition function: the expected features of
//! the model are replaced by the features of its most likely plans. The
//! enumerated-candidate functions ([`maxent_probabilities`],
//! [`maxent_weight_fit`]) exist to check the exact formulation on small sets.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_features, features_vjp, FeatureScaling, FeatureVector, NUM_FEATURES};
use crate::kinematics::Trajectory;
use crate::scenarios::Frame;
use crate::transfer::{classify_frame, TrajectoryClass};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassExpectation {
    #[serde(flatten)]
    pub features: FeatureVector,
    pub count: usize,
}

/// Demonstrated feature expectation per driving class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StyleTarget {
    pub classes: BTreeMap<TrajectoryClass, ClassExpectation>,
}

impl StyleTarget {
    pub fn get(&self, class: TrajectoryClass) -> Option<&FeatureVector> {
        self.classes.get(&class).map(|c| &c.features)
    }

    pub fn count(&self, class: TrajectoryClass) -> usize {
        self.classes.get(&class).map_or(0, |c| c.count)
    }

    /// Styled classes with no demonstrations.
    pub fn missing(&self) -> Vec<TrajectoryClass> {
        TrajectoryClass::STYLED
            .into_iter()
            .filter(|c| !self.classes.contains_key(c))
            .collect()
    }

    pub fn require(&self, class: TrajectoryClass) -> Result<&FeatureVector> {
        self.get(class)
            .ok_or_else(|| Error::invalid(format!("style target has no {} expectation", class.name())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: StyleTarget = serde_json::from_str(text)?;
        if t.classes.values().any(|c| !c.features.is_valid()) {
            return Err(Error::data("style target holds negative or non-finite features"));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

/// Ground-truth feature vector of every frame, in input order.
pub fn ground_truth_features(frames: &[Frame], beta: &FeatureScaling) -> Result<Vec<FeatureVector>> {
    frames
        .par_iter()
        .map(|f| extract_features(&f.ground_truth_trajectory()?, f, beta))
        .collect()
}

/// Mean ground-truth features per styled class. Stationary frames are
/// skipped; classes without frames are left out (see
/// [`StyleTarget::missing`]).
pub fn feature_expectation(dataset: &[Frame], beta: &FeatureScaling) -> Result<StyleTarget> {
    beta.validate()?;
    let feats = ground_truth_features(dataset, beta)?;
    let mut groups: BTreeMap<TrajectoryClass, Vec<FeatureVector>> = BTreeMap::new();
    for (frame, f) in dataset.iter().zip(feats) {
        let class = classify_frame(frame);
        if class != TrajectoryClass::Stationary {
            groups.entry(class).or_default().push(f);
        }
    }
    let classes = groups
        .into_iter()
        .map(|(c, fs)| {
            let features = FeatureVector::mean(&fs).expect("groups are nonempty");
            (c, ClassExpectation { features, count: fs.len() })
        })
        .collect();
    Ok(StyleTarget { classes })
}

/// Style regularizer of a batch of planned trajectories against the class
/// target: the mean absolute difference between the batch-mean features
/// and the target. Returns the loss and its subgradient with respect to
/// every state of every trajectory.
pub fn irl_loss(
    planned: &[Trajectory],
    frames: &[&Frame],
    class: TrajectoryClass,
    target: &StyleTarget,
    beta: &FeatureScaling,
) -> Result<(f64, Vec<Vec<[f64; 4]>>)> {
    if planned.len() != frames.len() || planned.is_empty() {
        return Err(Error::invalid(format!(
            "{} planned trajectories for {} frames",
            planned.len(),
            frames.len()
        )));
    }
    let goal = target.require(class)?;
    if let Some(f) = frames.iter().find(|f| classify_frame(f) != class) {
        return Err(Error::invalid(format!(
            "frame {}#{} is not a {} frame",
            f.scene_id,
            f.frame_index,
            class.name()
        )));
    }
    let feats: Vec<FeatureVector> = planned
        .par_iter()
        .zip(frames.par_iter())
        .map(|(t, f)| extract_features(t, f, beta))
        .collect::<Result<_>>()?;
    let mean = FeatureVector::mean(&feats).expect("nonempty batch");
    let diff: Vec<f64> = mean.to_array().iter().zip(goal.to_array()).map(|(a, b)| a - b).collect();
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / NUM_FEATURES as f64;
    let scale = 1.0 / (NUM_FEATURES * planned.len()) as f64;
    let weights: [f64; NUM_FEATURES] = std::array::from_fn(|i| {
        let d = diff[i];
        scale * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 }
    });
    let grads = planned
        .par_iter()
        .zip(frames.par_iter())
        .map(|(t, f)| features_vjp(t, f, beta, &weights))
        .collect::<Result<_>>()?;
    Ok((loss, grads))
}

/// `exp(-c_j) / sum_k exp(-c_k)`, shifted by the minimum cost.
pub fn maxent_probabilities(costs: &[f64]) -> Result<Vec<f64>> {
    if costs.is_empty() {
        return Err(Error::invalid("no candidate costs"));
    }
    if costs.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("non-finite candidate cost"));
    }
    let min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = costs.iter().map(|c| (min - c).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// Candidate trajectories summarized by their feature vectors, one of
/// which is the demonstration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub features: Vec<[f64; NUM_FEATURES]>,
    pub demo: usize,
}

impl CandidateSet {
    fn costs(&self, w: &[f64; NUM_FEATURES]) -> Vec<f64> {
        self.features
            .iter()
            .map(|f| f.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Probability of the demonstration under linear costs `w . f`.
    pub fn demo_probability(&self, w: &[f64; NUM_FEATURES]) -> Result<f64> {
        Ok(maxent_probabilities(&self.costs(w))?[self.demo])
    }

    /// Negative log-likelihood of the demonstration.
    pub fn nll(&self, w: &[f64; NUM_FEATURES]) -> Result<f64> {
        let c = self.costs(w);
        let min = c.iter().cloned().fold(f64::INFINITY, f64::min);
        let z: f64 = c.iter().map(|v| (min - v).exp()).sum();
        Ok(c[self.demo] - min + z.ln())
    }

    /// `E_P[f] - f_demo`, accumulated as `sum_j p_j (f_j - f_demo)` so
    /// that identical candidates give exactly zero.
    pub fn expectation_gap(&self, w: &[f64; NUM_FEATURES]) -> Result<[f64; NUM_FEATURES]> {
        let p = maxent_probabilities(&self.costs(w))?;
        let demo = &self.features[self.demo];
        let mut g = [0.0; NUM_FEATURES];
        for (pj, f) in p.iter().zip(&self.features) {
            for i in 0..NUM_FEATURES {
                g[i] += pj * (f[i] - demo[i]);
            }
        }
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if self.demo >= self.features.len() {
            return Err(Error::invalid(format!(
                "demo index {} outside a set of {}",
                self.demo,
                self.features.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: [f64; NUM_FEATURES],
    /// Summed negative log-likelihood before each step and after the last.
    pub losses: Vec<f64>,
}

/// Consecutive loss increases tolerated before a fit is declared diverged.
pub const DIVERGENCE_PATIENCE: usize = 10;

/// Fits linear feature weights by gradient descent on the demonstrations'
/// negative log-likelihood. With costs `w . f`, the gradient of the
/// likelihood is `E_P[f] - f_demo`, so each step moves `w` along it.
pub fn maxent_weight_fit(
    sets: &[CandidateSet],
    initial: [f64; NUM_FEATURES],
    lr: f64,
    steps: usize,
) -> Result<WeightFit> {
    if sets.is_empty() {
        return Err(Error::invalid("no candidate sets"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be positive")));
    }
    sets.iter().try_for_each(CandidateSet::validate)?;
    let total_nll = |w: &[f64; NUM_FEATURES]| -> Result<f64> { sets.iter().map(|s| s.nll(w)).sum() };
    let mut w = initial;
    let mut losses = vec![total_nll(&w)?];
    let mut rising = 0;
    for _ in 0..steps {
        let mut g = [0.0; NUM_FEATURES];
        for s in sets {
            for (gi, v) in g.iter_mut().zip(s.expectation_gap(&w)?) {
                *gi += v;
            }
        }
        for (wi, gi) in w.iter_mut().zip(g) {
            *wi += lr * gi;
        }
        let l = total_nll(&w)?;
        if !l.is_finite() {
            return Err(Error::FitFailure("non-finite likelihood".into()));
        }
        rising = if l > *losses.last().expect("nonempty") { rising + 1 } else { 0 };
        losses.push(l);
        if rising >= DIVERGENCE_PATIENCE {
            return Err(Error::FitFailure(format!(
                "likelihood worsened for {DIVERGENCE_PATIENCE} consecutive steps"
            )));
        }
    }
    Ok(WeightFit { weights: w, losses })
}
