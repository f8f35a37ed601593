use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_points, dist2, PointCloud};
use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// Farthest-point sampling of `n` indices from a cloud, first index drawn
/// uniformly from `seed`.
pub fn farthest_point_sample(cloud: &PointCloud, n: usize, seed: u64) -> Result<Vec<usize>> {
    fps_indices(&cloud.xyz, n, seed)
}

/// [`farthest_point_sample`] over raw `M × 3` coordinates.
pub fn fps_indices<T: Real>(xyz: &Tensor<T>, n: usize, seed: u64) -> Result<Vec<usize>> {
    let m = check_points(xyz, "farthest_point_sample")?;
    if m == 0 {
        return Err(Error::Empty("farthest_point_sample"));
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..m);
    fps_from_start(xyz, n, start)
}

/// Greedy max-min sampling from a fixed first index.
///
/// Each new index maximizes the distance to the already selected set among
/// unselected points, ties to the lowest index. When `n > M` the `M` distinct
/// indices are repeated cyclically.
pub fn fps_from_start<T: Real>(xyz: &Tensor<T>, n: usize, start: usize) -> Result<Vec<usize>> {
    let m = check_points(xyz, "farthest_point_sample")?;
    if m == 0 {
        return Err(Error::Empty("farthest_point_sample"));
    }
    if n == 0 {
        return Err(Error::invalid("farthest_point_sample: n must be at least 1"));
    }
    if start >= m {
        return Err(Error::IndexOutOfRange { index: start, len: m });
    }
    let distinct = n.min(m);
    let mut selected = Vec::with_capacity(n);
    let mut taken = vec![false; m];
    let mut min_d = vec![T::infinity(); m];
    let mut last = start;
    selected.push(start);
    taken[start] = true;
    while selected.len() < distinct {
        let p = xyz.point(last);
        let mut best = usize::MAX;
        let mut best_d = T::neg_infinity();
        for i in 0..m {
            let d = dist2(xyz.point(i), p);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        taken[best] = true;
        selected.push(best);
        last = best;
    }
    for i in distinct..n {
        selected.push(selected[i % distinct]);
    }
    Ok(selected)
}
