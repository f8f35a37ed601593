use super::{check_points, dist2};
use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// Result of a k-nearest-neighbor query, row-major `Q × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Knn<T = f32> {
    pub k: usize,
    pub indices: Vec<usize>,
    /// Euclidean distances, ascending per query.
    pub dists: Vec<T>,
}

impl<T: Real> Knn<T> {
    pub fn queries(&self) -> usize {
        self.indices.len() / self.k.max(1)
    }

    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn distances(&self, q: usize) -> &[T] {
        &self.dists[q * self.k..(q + 1) * self.k]
    }
}

/// Neighbors of one query point in a reference cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSet<T = f32> {
    pub query_index: usize,
    pub neighbor_indices: Vec<usize>,
    /// `k × 3`, neighbor minus query.
    pub displacements: Tensor<T>,
}

impl<T: Real> NeighborSet<T> {
    pub(crate) fn build(
        query_index: usize,
        query: [T; 3],
        reference: &Tensor<T>,
        neighbor_indices: Vec<usize>,
    ) -> Self {
        let mut d = Vec::with_capacity(neighbor_indices.len() * 3);
        for &j in &neighbor_indices {
            let p = reference.point(j);
            d.extend_from_slice(&[p[0] - query[0], p[1] - query[1], p[2] - query[2]]);
        }
        let displacements =
            Tensor::matrix(neighbor_indices.len(), 3, d).expect("three columns per neighbor");
        Self {
            query_index,
            neighbor_indices,
            displacements,
        }
    }

    pub fn len(&self) -> usize {
        self.neighbor_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_indices.is_empty()
    }
}

/// Sorted buffer of the `k` best `(d², index)` pairs seen so far.
pub(crate) struct TopK<T> {
    k: usize,
    items: Vec<(T, usize)>,
}

impl<T: Real> TopK<T> {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, d2: T, idx: usize) {
        let key = |e: &(T, usize)| e.0 < d2 || (e.0 == d2 && e.1 < idx);
        if self.items.len() == self.k {
            let last = self.items[self.k - 1];
            if !(d2 < last.0 || (d2 == last.0 && idx < last.1)) {
                return;
            }
        }
        let pos = self.items.partition_point(key);
        self.items.insert(pos, (d2, idx));
        self.items.truncate(self.k);
    }

    pub(crate) fn full(&self) -> bool {
        self.items.len() == self.k
    }

    pub(crate) fn first(&self) -> usize {
        self.items[0].1
    }

    pub(crate) fn worst(&self) -> Option<T> {
        self.items.last().map(|e| e.0)
    }

    /// Writes indices and distances, padding with the nearest neighbor.
    pub(crate) fn emit(&self, k: usize, indices: &mut Vec<usize>, dists: &mut Vec<T>) {
        for &(d2, i) in &self.items {
            indices.push(i);
            dists.push(d2.sqrt());
        }
        let (d0, i0) = self.items[0];
        for _ in self.items.len()..k {
            indices.push(i0);
            dists.push(d0.sqrt());
        }
    }
}

/// Brute-force k nearest neighbors; ties go to the lower reference index.
/// When `k` exceeds the reference size the nearest index is repeated.
pub fn knn<T: Real>(query: &Tensor<T>, reference: &Tensor<T>, k: usize) -> Result<Knn<T>> {
    let q = check_points(query, "knn query")?;
    let r = check_points(reference, "knn reference")?;
    if r == 0 {
        return Err(Error::Empty("knn reference"));
    }
    if k == 0 {
        return Err(Error::invalid("knn: k must be at least 1"));
    }
    let kk = k.min(r);
    let mut indices = Vec::with_capacity(q * k);
    let mut dists = Vec::with_capacity(q * k);
    for qi in 0..q {
        let p = query.point(qi);
        let mut top = TopK::new(kk);
        for j in 0..r {
            top.push(dist2(p, reference.point(j)), j);
        }
        top.emit(k, &mut indices, &mut dists);
    }
    Ok(Knn { k, indices, dists })
}

/// k nearest neighbors packaged as neighbor sets.
pub fn knn_groups<T: Real>(
    query: &Tensor<T>,
    reference: &Tensor<T>,
    k: usize,
) -> Result<Vec<NeighborSet<T>>> {
    let res = knn(query, reference, k)?;
    Ok((0..res.queries())
        .map(|qi| NeighborSet::build(qi, query.point(qi), reference, res.neighbors(qi).to_vec()))
        .collect())
}

/// Up to `max_k` reference points within `radius`, in ascending index order.
/// A query with no neighbor in range falls back to its single nearest one.
pub fn ball_query<T: Real>(
    query: &Tensor<T>,
    reference: &Tensor<T>,
    radius: f64,
    max_k: usize,
) -> Result<Vec<NeighborSet<T>>> {
    let q = check_points(query, "ball_query query")?;
    let r = check_points(reference, "ball_query reference")?;
    if r == 0 {
        return Err(Error::Empty("ball_query reference"));
    }
    if !(radius > 0.0) || max_k == 0 {
        return Err(Error::invalid(format!(
            "ball_query: radius {radius} and max_k {max_k} must be positive"
        )));
    }
    let r2 = T::of(radius * radius);
    let mut out = Vec::with_capacity(q);
    for qi in 0..q {
        let p = query.point(qi);
        let mut found = Vec::with_capacity(max_k);
        for j in 0..r {
            if dist2(p, reference.point(j)) <= r2 {
                found.push(j);
                if found.len() == max_k {
                    break;
                }
            }
        }
        if found.is_empty() {
            let mut top = TopK::new(1);
            for j in 0..r {
                top.push(dist2(p, reference.point(j)), j);
            }
            found.push(top.first());
        }
        out.push(NeighborSet::build(qi, p, reference, found));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 3]]) -> Tensor<f64> {
        Tensor::from_points(v)
    }

    #[test]
    fn coincident_query() {
        let r = knn(&pts(&[[1.0, 2.0, 3.0]]), &pts(&[[0.0; 3], [1.0, 2.0, 3.0]]), 1).unwrap();
        assert_eq!(r.indices, vec![1]);
        assert_eq!(r.dists, vec![0.0]);
    }

    #[test]
    fn two_reference_example() {
        let r = knn(&pts(&[[0.0; 3]]), &pts(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]), 2).unwrap();
        assert_eq!(r.indices, vec![0, 1]);
        assert_eq!(r.dists, vec![1.0, 2.0]);
    }

    #[test]
    fn pads_with_nearest_when_k_exceeds_reference() {
        let r = knn(&pts(&[[0.0; 3]]), &pts(&[[3.0, 0.0, 0.0], [1.0, 0.0, 0.0]]), 4).unwrap();
        assert_eq!(r.indices, vec![1, 0, 1, 1]);
        assert_eq!(r.dists, vec![1.0, 3.0, 1.0, 1.0]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let r = knn(&pts(&[[0.0; 3]]), &pts(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), 2)
            .unwrap();
        assert_eq!(r.indices, vec![0, 1]);
    }

    #[test]
    fn empty_reference_errors() {
        assert!(knn(&pts(&[[0.0; 3]]), &pts(&[]), 1).is_err());
        assert!(ball_query(&pts(&[[0.0; 3]]), &pts(&[]), 1.0, 1).is_err());
    }

    #[test]
    fn ball_query_radius_cut() {
        let g = ball_query(&pts(&[[0.0; 3]]), &pts(&[[0.4, 0.0, 0.0], [0.0, 0.6, 0.0]]), 0.5, 8)
            .unwrap();
        assert_eq!(g[0].neighbor_indices, vec![0]);
    }

    #[test]
    fn ball_query_covers_all() {
        let reference = pts(&[[0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, -0.3]]);
        let g = ball_query(&pts(&[[0.0; 3]]), &reference, 10.0, 5).unwrap();
        assert_eq!(g[0].neighbor_indices, vec![0, 1, 2]);
        assert_eq!(g[0].displacements.row(2), &[0.0, 0.0, -0.3]);
    }

    #[test]
    fn ball_query_falls_back_to_nearest() {
        let reference = pts(&[[5.0, 0.0, 0.0], [0.0, 3.0, 0.0], [4.0, 4.0, 0.0]]);
        let g = ball_query(&pts(&[[0.0; 3]]), &reference, 0.5, 4).unwrap();
        let nn = knn(&pts(&[[0.0; 3]]), &reference, 1).unwrap();
        assert_eq!(g[0].neighbor_indices, nn.indices);
    }
}
