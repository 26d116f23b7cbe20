use rand::Rng;

use super::classify::{Partitioned, TrajectoryClass};
use crate::error::{Error, Result};
use crate::scenarios::Frame;

/// Expert share of a batch: `floor(n * p)`, the rest comes from the user.
pub fn expert_count(n: usize, p: f64) -> usize {
    ((n as f64 * p).floor() as usize).min(n)
}

fn draw<'a, R: Rng>(side: &Partitioned<'a>, class: TrajectoryClass, count: usize, name: &str, rng: &mut R) -> Result<Vec<&'a Frame>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let pool = side.indices(class);
    if pool.is_empty() {
        return Err(Error::data(format!("{name} dataset has no {class} frames")));
    }
    Ok((0..count).map(|_| &side.frames[pool[rng.gen_range(0..pool.len())]]).collect())
}

/// Samples `floor(n p)` expert and `n - floor(n p)` user frames of one
/// class with replacement, expert frames first.
pub fn sample_mixed_batch<'a, R: Rng>(
    expert: &Partitioned<'a>,
    user: &Partitioned<'a>,
    class: TrajectoryClass,
    n: usize,
    p: f64,
    rng: &mut R,
) -> Result<Vec<&'a Frame>> {
    let e = expert_count(n, p);
    let mut batch = draw(expert, class, e, "expert", rng)?;
    batch.extend(draw(user, class, n - e, "user", rng)?);
    Ok(batch)
}
