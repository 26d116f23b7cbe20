use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Frame;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureScaling, FeatureVector, NUM_FEATURES};

pub const MAX_ITERATIONS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<[f64; NUM_FEATURES]>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

fn dist2(a: &[f64; NUM_FEATURES], b: &[f64; NUM_FEATURES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64; NUM_FEATURES], centers: &[[f64; NUM_FEATURES]]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centers.iter().enumerate() {
        let d = dist2(p, c);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Lloyd's algorithm with k-means++ seeding. Stops when assignments no
/// longer change or after [`MAX_ITERATIONS`] iterations.
pub fn kmeans(points: &[[f64; NUM_FEATURES]], k: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || points.len() < k {
        return Err(Error::data(format!("k-means needs at least k = {k} points, got {}", points.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[idx]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &centers[centers.len() - 1]));
        }
    }

    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    let mut inertia = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut sums = vec![[0.0; NUM_FEATURES]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            // an emptied cluster keeps its previous center
            if counts[j] > 0 {
                centers[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        inertia.push(points.iter().zip(&next).map(|(p, &a)| dist2(p, &centers[a])).sum());
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
    }
    Ok(KMeansResult {
        centers,
        assignments,
        inertia,
        iterations,
    })
}

#[derive(Clone, Debug)]
pub struct UserSplit {
    pub users: Vec<Vec<Frame>>,
    pub centers: Vec<FeatureVector>,
}

/// Clusters frames by their ground-truth feature vectors and returns, for
/// each center, the `per_cluster` frames nearest to it (ties by input order).
pub fn kmeans_user_split(
    frames: &[Frame],
    k: usize,
    per_cluster: usize,
    beta: &FeatureScaling,
    seed: u64,
) -> Result<UserSplit> {
    if frames.len() < k * per_cluster {
        return Err(Error::data(format!(
            "need at least {} frames for {k} users of {per_cluster}, got {}",
            k * per_cluster,
            frames.len()
        )));
    }
    let points: Vec<[f64; NUM_FEATURES]> = frames
        .iter()
        .map(|f| Ok(extract_features(&f.ground_truth_trajectory()?, f, beta)?.to_array()))
        .collect::<Result<_>>()?;
    let km = kmeans(&points, k, seed)?;
    let users = km
        .centers
        .iter()
        .map(|c| {
            let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, c), i)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.iter().take(per_cluster).map(|&(_, i)| frames[i].clone()).collect()
        })
        .collect();
    Ok(UserSplit {
        users,
        centers: km.centers.iter().map(|c| FeatureVector::from_array(*c)).collect(),
    })
}
