use std::collections::HashMap;

use super::neighbors::TopK;
use super::{check_points, dist2, Knn, NeighborSet};
use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

type Cell = (i64, i64, i64);

/// Uniform-grid index over a reference cloud.
///
/// Returns exactly what the brute-force [`knn`](super::knn) and
/// [`ball_query`](super::ball_query) return, including tie-breaks.
#[derive(Clone, Debug)]
pub struct GridIndex<T = f32> {
    reference: Tensor<T>,
    cell: f64,
    cells: HashMap<Cell, Vec<usize>>,
    lo: Cell,
    hi: Cell,
}

impl<T: Real> GridIndex<T> {
    pub fn build(reference: &Tensor<T>, cell_size: f64) -> Result<Self> {
        let n = check_points(reference, "grid reference")?;
        if n == 0 {
            return Err(Error::Empty("grid reference"));
        }
        if !(cell_size > 0.0) {
            return Err(Error::invalid(format!("grid cell size {cell_size} must be positive")));
        }
        let mut cells: HashMap<Cell, Vec<usize>> = HashMap::new();
        let mut lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut hi = (i64::MIN, i64::MIN, i64::MIN);
        for i in 0..n {
            let c = Self::cell_of(cell_size, reference.point(i));
            lo = (lo.0.min(c.0), lo.1.min(c.1), lo.2.min(c.2));
            hi = (hi.0.max(c.0), hi.1.max(c.1), hi.2.max(c.2));
            cells.entry(c).or_default().push(i);
        }
        Ok(Self {
            reference: reference.clone(),
            cell: cell_size,
            cells,
            lo,
            hi,
        })
    }

    fn cell_of(cs: f64, p: [T; 3]) -> Cell {
        (
            (p[0].as_f64() / cs).floor() as i64,
            (p[1].as_f64() / cs).floor() as i64,
            (p[2].as_f64() / cs).floor() as i64,
        )
    }

    pub fn reference(&self) -> &Tensor<T> {
        &self.reference
    }

    fn max_ring(&self, c: Cell) -> i64 {
        let span = |q: i64, lo: i64, hi: i64| (q - lo).abs().max((hi - q).abs());
        span(c.0, self.lo.0, self.hi.0)
            .max(span(c.1, self.lo.1, self.hi.1))
            .max(span(c.2, self.lo.2, self.hi.2))
    }

    fn visit_ring(&self, c: Cell, r: i64, mut f: impl FnMut(usize)) {
        let x0 = (c.0 - r).max(self.lo.0);
        let x1 = (c.0 + r).min(self.hi.0);
        let y0 = (c.1 - r).max(self.lo.1);
        let y1 = (c.1 + r).min(self.hi.1);
        let z0 = (c.2 - r).max(self.lo.2);
        let z1 = (c.2 + r).min(self.hi.2);
        for x in x0..=x1 {
            for y in y0..=y1 {
                for z in z0..=z1 {
                    let ring = (x - c.0).abs().max((y - c.1).abs()).max((z - c.2).abs());
                    if ring != r {
                        continue;
                    }
                    if let Some(ids) = self.cells.get(&(x, y, z)) {
                        ids.iter().for_each(|&i| f(i));
                    }
                }
            }
        }
    }

    fn nearest_k(&self, p: [T; 3], k: usize) -> TopK<T> {
        let c = Self::cell_of(self.cell, p);
        let mut top = TopK::new(k);
        let last = self.max_ring(c);
        for r in 0..=last {
            self.visit_ring(c, r, |i| top.push(dist2(p, self.reference.point(i)), i));
            if top.full() {
                // Anything beyond ring r is farther than r cells away.
                let bound = (r as f64 * self.cell).powi(2) * (1.0 - 1e-9);
                if top.worst().map(|w| w.as_f64() < bound).unwrap_or(false) {
                    break;
                }
            }
        }
        top
    }

    pub fn knn(&self, query: &Tensor<T>, k: usize) -> Result<Knn<T>> {
        let q = check_points(query, "knn query")?;
        if k == 0 {
            return Err(Error::invalid("knn: k must be at least 1"));
        }
        let kk = k.min(self.reference.rows());
        let mut indices = Vec::with_capacity(q * k);
        let mut dists = Vec::with_capacity(q * k);
        for qi in 0..q {
            self.nearest_k(query.point(qi), kk)
                .emit(k, &mut indices, &mut dists);
        }
        Ok(Knn { k, indices, dists })
    }

    pub fn ball_query(
        &self,
        query: &Tensor<T>,
        radius: f64,
        max_k: usize,
    ) -> Result<Vec<NeighborSet<T>>> {
        let q = check_points(query, "ball_query query")?;
        if !(radius > 0.0) || max_k == 0 {
            return Err(Error::invalid(format!(
                "ball_query: radius {radius} and max_k {max_k} must be positive"
            )));
        }
        let r2 = T::of(radius * radius);
        let rings = (radius / self.cell).ceil() as i64 + 1;
        let mut out = Vec::with_capacity(q);
        for qi in 0..q {
            let p = query.point(qi);
            let c = Self::cell_of(self.cell, p);
            let mut found = Vec::new();
            for r in 0..=rings.min(self.max_ring(c)) {
                self.visit_ring(c, r, |i| {
                    if dist2(p, self.reference.point(i)) <= r2 {
                        found.push(i);
                    }
                });
            }
            found.sort_unstable();
            found.truncate(max_k);
            if found.is_empty() {
                found.push(self.nearest_k(p, 1).first());
            }
            out.push(NeighborSet::build(qi, p, &self.reference, found));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointops::{ball_query, knn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Tensor<f32> {
        let pts: Vec<[f32; 3]> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale * 0.1..scale * 0.1),
                ]
            })
            .collect();
        Tensor::from_points(&pts)
    }

    #[test]
    fn grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let reference = cloud(&mut rng, 300, 10.0);
            let query = cloud(&mut rng, 50, 12.0);
            let grid = GridIndex::build(&reference, 0.5 + trial as f64 * 0.3).unwrap();
            for k in [1, 3, 16] {
                assert_eq!(grid.knn(&query, k).unwrap(), knn(&query, &reference, k).unwrap());
            }
            assert_eq!(
                grid.ball_query(&query, 1.5, 8).unwrap(),
                ball_query(&query, &reference, 1.5, 8).unwrap()
            );
        }
    }

    #[test]
    fn grid_handles_duplicate_points() {
        let reference = Tensor::from_points(&[[0.0f32; 3], [0.0; 3], [1.0, 0.0, 0.0]]);
        let grid = GridIndex::build(&reference, 1.0).unwrap();
        let q = Tensor::from_points(&[[0.0f32; 3]]);
        assert_eq!(grid.knn(&q, 2).unwrap().indices, vec![0, 1]);
    }
}
