use super::{check_points, knn, NeighborSet};
use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// Ragged grouped rows: group `q` occupies rows `offsets[q]..offsets[q + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedRows<T = f32> {
    pub rows: Tensor<T>,
    pub offsets: Vec<usize>,
}

impl<T: Real> GroupedRows<T> {
    pub fn groups(&self) -> usize {
        self.offsets.len() - 1
    }
}

fn offsets_of<T>(neighbors: &[NeighborSet<T>]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(neighbors.len() + 1);
    offsets.push(0);
    for n in neighbors {
        offsets.push(offsets.last().unwrap() + n.neighbor_indices.len());
    }
    offsets
}

/// Rows `[query_feature ‖ neighbor_feature ‖ displacement]` for every
/// neighbor of every query; the query part is omitted when `query_feats`
/// is `None`.
pub fn gather_groups<T: Real>(
    neighbors: &[NeighborSet<T>],
    query_feats: Option<&Tensor<T>>,
    ref_feats: &Tensor<T>,
) -> Result<GroupedRows<T>> {
    let (r, d) = ref_feats.dims2()?;
    let dq = match query_feats {
        Some(q) => {
            let (qr, dq) = q.dims2()?;
            if let Some(bad) = neighbors.iter().find(|n| n.query_index >= qr) {
                return Err(Error::IndexOutOfRange {
                    index: bad.query_index,
                    len: qr,
                });
            }
            dq
        }
        None => 0,
    };
    let offsets = offsets_of(neighbors);
    let total = *offsets.last().unwrap();
    let width = dq + d + 3;
    let mut out = Vec::with_capacity(total * width);
    for n in neighbors {
        for (k, &j) in n.neighbor_indices.iter().enumerate() {
            if j >= r {
                return Err(Error::IndexOutOfRange { index: j, len: r });
            }
            if let Some(q) = query_feats {
                out.extend_from_slice(q.row(n.query_index));
            }
            out.extend_from_slice(ref_feats.row(j));
            out.extend_from_slice(n.displacements.row(k));
        }
    }
    Ok(GroupedRows {
        rows: Tensor::matrix(total, width, out)?,
        offsets,
    })
}

/// Gradients of [`gather_groups`] with respect to query and reference
/// features (displacement columns are dropped).
pub fn gather_groups_backward<T: Real>(
    neighbors: &[NeighborSet<T>],
    d_rows: &Tensor<T>,
    query_shape: Option<(usize, usize)>,
    ref_shape: (usize, usize),
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (total, width) = d_rows.dims2()?;
    let dq = query_shape.map(|s| s.1).unwrap_or(0);
    let (r, d) = ref_shape;
    if width != dq + d + 3 {
        return Err(Error::shape("gather_groups_backward", d_rows.shape(), &[total, dq + d + 3]));
    }
    let mut dquery = query_shape.map(|(q, dq)| Tensor::zeros(&[q, dq]));
    let mut dref = Tensor::zeros(&[r, d]);
    let mut row = 0;
    for n in neighbors {
        for &j in &n.neighbor_indices {
            let g = d_rows.row(row);
            if let Some(dqt) = dquery.as_mut() {
                for (a, &b) in dqt.row_mut(n.query_index).iter_mut().zip(&g[..dq]) {
                    *a += b;
                }
            }
            for (a, &b) in dref.row_mut(j).iter_mut().zip(&g[dq..dq + d]) {
                *a += b;
            }
            row += 1;
        }
    }
    Ok((dquery, dref))
}

/// Rows `[neighbor_feature ‖ neighbor_xyz − query_xyz]` per group.
pub fn group_features<T: Real>(
    neighbors: &[NeighborSet<T>],
    feats: &Tensor<T>,
) -> Result<GroupedRows<T>> {
    gather_groups(neighbors, None, feats)
}

pub fn group_features_backward<T: Real>(
    neighbors: &[NeighborSet<T>],
    d_rows: &Tensor<T>,
    feats_shape: (usize, usize),
) -> Result<Tensor<T>> {
    Ok(gather_groups_backward(neighbors, d_rows, None, feats_shape)?.1)
}

/// Offset added to distances in inverse-distance weights.
pub const INTERP_EPS: f64 = 1e-8;

/// Inverse-distance weights over the three nearest sources of each target.
///
/// `w_i = 1 / (d_i + ε)`, normalized. A target that coincides with a source
/// takes that source's feature exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpWeights<T = f32> {
    pub k: usize,
    pub n_source: usize,
    pub indices: Vec<usize>,
    pub weights: Vec<T>,
}

impl<T: Real> InterpWeights<T> {
    pub fn build(target: &Tensor<T>, source: &Tensor<T>) -> Result<Self> {
        let s = check_points(source, "interpolate source")?;
        check_points(target, "interpolate target")?;
        if s == 0 {
            return Err(Error::Empty("interpolate source"));
        }
        let k = s.min(3);
        let nn = knn(target, source, k)?;
        let eps = T::of(INTERP_EPS);
        let mut weights = Vec::with_capacity(nn.dists.len());
        for q in 0..nn.queries() {
            let d = nn.distances(q);
            if d[0] == T::zero() {
                weights.push(T::one());
                weights.extend(std::iter::repeat_n(T::zero(), k - 1));
                continue;
            }
            let inv: Vec<T> = d.iter().map(|&di| T::one() / (di + eps)).collect();
            let total: T = inv.iter().copied().sum();
            weights.extend(inv.into_iter().map(|w| w / total));
        }
        Ok(Self {
            k,
            n_source: s,
            indices: nn.indices,
            weights,
        })
    }

    pub fn targets(&self) -> usize {
        self.indices.len() / self.k
    }

    pub fn apply(&self, source_feats: &Tensor<T>) -> Result<Tensor<T>> {
        let (s, d) = source_feats.dims2()?;
        if s != self.n_source {
            return Err(Error::shape("interpolate_features", &[self.n_source, d], source_feats.shape()));
        }
        let t = self.targets();
        let mut out = vec![T::zero(); t * d];
        for q in 0..t {
            let row = &mut out[q * d..(q + 1) * d];
            for j in 0..self.k {
                let w = self.weights[q * self.k + j];
                if w == T::zero() {
                    continue;
                }
                let src = source_feats.row(self.indices[q * self.k + j]);
                for (o, &v) in row.iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        Tensor::matrix(t, d, out)
    }

    pub fn backward(&self, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (t, d) = d_out.dims2()?;
        if t != self.targets() {
            return Err(Error::shape("interpolate_backward", &[self.targets(), d], d_out.shape()));
        }
        let mut ds = Tensor::zeros(&[self.n_source, d]);
        for q in 0..t {
            let g = d_out.row(q);
            for j in 0..self.k {
                let w = self.weights[q * self.k + j];
                if w == T::zero() {
                    continue;
                }
                let dst = ds.row_mut(self.indices[q * self.k + j]);
                for (o, &v) in dst.iter_mut().zip(g) {
                    *o += w * v;
                }
            }
        }
        Ok(ds)
    }
}

impl<T: Real> InterpWeights<T> {
    /// Gradients of `apply(source_feats)` with respect to the target and
    /// source positions the weights were built from. Targets that coincide
    /// with a source get none.
    pub fn position_backward(
        &self,
        target_xyz: &Tensor<T>,
        source_xyz: &Tensor<T>,
        source_feats: &Tensor<T>,
        d_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let t = self.targets();
        if target_xyz.rows() != t || source_xyz.rows() != self.n_source || d_out.rows() != t {
            return Err(Error::shape("interpolate position backward", target_xyz.shape(), d_out.shape()));
        }
        let mut dt = Tensor::zeros(&[t, 3]);
        let mut ds = Tensor::zeros(&[self.n_source, 3]);
        let eps = INTERP_EPS;
        let mut dist = vec![0.0f64; self.k];
        let mut a = vec![0.0f64; self.k];
        let mut gw = vec![0.0f64; self.k];
        for q in 0..t {
            let p = target_xyz.point(q);
            let idx = &self.indices[q * self.k..(q + 1) * self.k];
            for (j, &s) in idx.iter().enumerate() {
                let r = source_xyz.point(s);
                dist[j] = (0..3).map(|c| (p[c] - r[c]).as_f64().powi(2)).sum::<f64>().sqrt();
            }
            if dist[0] == 0.0 {
                continue;
            }
            let g = d_out.row(q);
            for (j, &s) in idx.iter().enumerate() {
                a[j] = 1.0 / (dist[j] + eps);
                gw[j] = source_feats.row(s).iter().zip(g).map(|(f, d)| f.as_f64() * d.as_f64()).sum();
            }
            let total: f64 = a.iter().sum();
            let mean_g: f64 = a.iter().zip(&gw).map(|(ai, gi)| ai * gi).sum::<f64>() / total;
            for (j, &s) in idx.iter().enumerate() {
                // dL/dd_j through a_j = 1/(d_j + ε) and the normalization.
                let dd = -a[j] * a[j] * (gw[j] - mean_g) / total;
                let r = source_xyz.point(s);
                for c in 0..3 {
                    let v = T::of(dd * (p[c] - r[c]).as_f64() / dist[j]);
                    dt.row_mut(q)[c] += v;
                    ds.row_mut(s)[c] -= v;
                }
            }
        }
        Ok((dt, ds))
    }
}

pub fn interpolate_features<T: Real>(
    target_xyz: &Tensor<T>,
    source_xyz: &Tensor<T>,
    source_feats: &Tensor<T>,
) -> Result<Tensor<T>> {
    InterpWeights::build(target_xyz, source_xyz)?.apply(source_feats)
}
