use super::{Encoding, FlowHeadConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{
    mlp_backward, mlp_forward, segment_max_pool, segment_max_pool_backward, MlpCache, Real, Tensor,
};
use crate::pointops::{
    ball_query, gather_groups, gather_groups_backward, knn_groups, InterpWeights, NeighborSet,
};

/// Neighborhoods used by the flow head; depends only on positions.
#[derive(Clone, Debug)]
pub struct FlowGeometry<T = f32> {
    /// Frame-1 centroid to its `embed_k` nearest frame-2 centroids.
    pub embed: Vec<NeighborSet<T>>,
    /// Frame-1 centroid to frame-1 centroids within `conv_radius`.
    pub conv: Vec<NeighborSet<T>>,
    /// Frame-1 sampled points from frame-1 centroids.
    pub up: InterpWeights<T>,
    /// Query-frame positions the neighborhoods were built from.
    pub sampled1: Tensor<T>,
    pub centroids1: Tensor<T>,
}

impl<T: Real> FlowGeometry<T> {
    pub fn build(
        sampled1: &Tensor<T>,
        centroids1: &Tensor<T>,
        centroids2: &Tensor<T>,
        cfg: &FlowHeadConfig,
    ) -> Result<Self> {
        Ok(Self {
            embed: knn_groups(centroids1, centroids2, cfg.embed_k)?,
            conv: ball_query(centroids1, centroids1, cfg.conv_radius, cfg.conv_max_k)?,
            up: InterpWeights::build(sampled1, centroids1)?,
            sampled1: sampled1.clone(),
            centroids1: centroids1.clone(),
        })
    }

    pub fn for_pair(enc1: &Encoding<T>, enc2: &Encoding<T>, cfg: &FlowHeadConfig) -> Result<Self> {
        Self::build(&enc1.sampled_xyz, &enc1.centroids, &enc2.centroids, cfg)
    }
}

#[derive(Clone, Debug)]
pub struct FlowCache<T> {
    embed_mlp: MlpCache<T>,
    embed_arg: Vec<usize>,
    embed_rows: usize,
    conv_mlp: MlpCache<T>,
    conv_arg: Vec<usize>,
    conv_rows: usize,
    conv_out: Tensor<T>,
    up_mlp: MlpCache<T>,
    fc_mlp: MlpCache<T>,
    n_centroids1: usize,
    n_centroids2: usize,
    embed_dim: usize,
    conv_dim: usize,
    feat_dim: usize,
}

/// Gradients with respect to the encoder outputs consumed by the head.
#[derive(Clone, Debug)]
pub struct FlowInputGrads<T> {
    pub d_sampled1: Tensor<T>,
    pub d_centroid1: Tensor<T>,
    pub d_centroid2: Tensor<T>,
    /// Gradient with respect to the frame-1 sampled positions through the
    /// displacement features and interpolation weights, neighbor sets held
    /// fixed. Centroid positions are folded into their sampled rows.
    pub d_sampled1_xyz: Tensor<T>,
}

fn check_pair<T: Real>(enc1: &Encoding<T>, enc2: &Encoding<T>, d: usize) -> Result<()> {
    for (what, t) in [
        ("frame-1 sampled features", &enc1.sampled_feats),
        ("frame-1 centroid features", &enc1.centroid_feats),
        ("frame-2 centroid features", &enc2.centroid_feats),
    ] {
        if t.cols() != d {
            return Err(Error::Config(format!(
                "flow head: {what} have width {}, config expects {d}",
                t.cols()
            )));
        }
    }
    Ok(())
}

/// Flow over frame-1's sampled points using precomputed neighborhoods.
pub fn flow_head_forward_with<T: Real>(
    geom: &FlowGeometry<T>,
    enc1: &Encoding<T>,
    enc2: &Encoding<T>,
    params: &ModelParams<T>,
) -> Result<(Tensor<T>, FlowCache<T>)> {
    let cfg = &params.config.flow;
    let d = params.config.backbone.feature_dim();
    check_pair(enc1, enc2, d)?;
    let store = &params.store;

    let rows = gather_groups(&geom.embed, Some(&enc1.centroid_feats), &enc2.centroid_feats)?;
    let embed_rows = rows.rows.rows();
    let (h, embed_mlp) = mlp_forward(store, "s.embed", &cfg.embed_mlp, rows.rows)?;
    let (e, embed_arg) = segment_max_pool(&h, &rows.offsets)?;

    let rows = gather_groups(&geom.conv, None, &e)?;
    let conv_rows = rows.rows.rows();
    let (h, conv_mlp) = mlp_forward(store, "s.conv", &cfg.conv_mlp, rows.rows)?;
    let (c, conv_arg) = segment_max_pool(&h, &rows.offsets)?;

    let u = geom.up.apply(&c)?;
    let x = Tensor::concat_cols(&[&u, &enc1.sampled_feats])?;
    let (h, up_mlp) = mlp_forward(store, "s.up", &cfg.upconv_mlp, x)?;
    let (flow, fc_mlp) = mlp_forward(store, "s.fc", &cfg.fc, h)?;

    let cache = FlowCache {
        embed_mlp,
        embed_arg,
        embed_rows,
        conv_mlp,
        conv_arg,
        conv_rows,
        conv_dim: c.cols(),
        conv_out: c,
        up_mlp,
        fc_mlp,
        n_centroids1: enc1.centroids.rows(),
        n_centroids2: enc2.centroids.rows(),
        embed_dim: e.cols(),
        feat_dim: d,
    };
    Ok((flow, cache))
}

/// Flow field `n_sample × 3` from frame 1 towards frame 2, in meters.
pub fn flow_head_forward<T: Real>(
    enc1: &Encoding<T>,
    enc2: &Encoding<T>,
    params: &ModelParams<T>,
) -> Result<Tensor<T>> {
    let geom = FlowGeometry::for_pair(enc1, enc2, &params.config.flow)?;
    Ok(flow_head_forward_with(&geom, enc1, enc2, params)?.0)
}

/// Accumulates `s.*` gradients and returns gradients on the encodings.
/// `centroid_rows[i]` is the row of frame-1 centroid `i` among the sampled
/// points.
pub fn flow_head_backward<T: Real>(
    geom: &FlowGeometry<T>,
    params: &mut ModelParams<T>,
    cache: &FlowCache<T>,
    centroid_rows: &[usize],
    d_flow: Tensor<T>,
) -> Result<FlowInputGrads<T>> {
    let cfg = params.config.flow.clone();
    let store = &mut params.store;

    let dh = mlp_backward(store, "s.fc", &cfg.fc, &cache.fc_mlp, d_flow)?;
    let dx = mlp_backward(store, "s.up", &cfg.upconv_mlp, &cache.up_mlp, dh)?;
    let mut parts = dx.split_cols(&[cache.conv_dim, cache.feat_dim])?;
    let d_sampled1 = parts.pop().expect("two parts");
    let du = parts.pop().expect("two parts");
    let dc = geom.up.backward(&du)?;
    let (mut d_xyz, mut d_cxyz) =
        geom.up.position_backward(&geom.sampled1, &geom.centroids1, &cache.conv_out, &du)?;

    let dh = segment_max_pool_backward(&cache.conv_arg, cache.conv_rows, &dc)?;
    let drows = mlp_backward(store, "s.conv", &cfg.conv_mlp, &cache.conv_mlp, dh)?;
    displacement_backward(&geom.conv, &drows, cache.embed_dim, &mut d_cxyz, false);
    let (_, de) =
        gather_groups_backward(&geom.conv, &drows, None, (cache.n_centroids1, cache.embed_dim))?;

    let dh = segment_max_pool_backward(&cache.embed_arg, cache.embed_rows, &de)?;
    let drows = mlp_backward(store, "s.embed", &cfg.embed_mlp, &cache.embed_mlp, dh)?;
    displacement_backward(&geom.embed, &drows, 2 * cache.feat_dim, &mut d_cxyz, true);
    let (d1, d_centroid2) = gather_groups_backward(
        &geom.embed,
        &drows,
        Some((cache.n_centroids1, cache.feat_dim)),
        (cache.n_centroids2, cache.feat_dim),
    )?;
    for (k, &row) in centroid_rows.iter().enumerate() {
        let g = d_cxyz.row(k).to_vec();
        for (a, b) in d_xyz.row_mut(row).iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(FlowInputGrads {
        d_sampled1,
        d_centroid1: d1.expect("query features requested"),
        d_centroid2,
        d_sampled1_xyz: d_xyz,
    })
}

/// Accumulates position gradients from the displacement columns
/// (`neighbor − query`) starting at column `col` of `d_rows`. With
/// `ref_fixed` only queries receive gradient; otherwise neighbors index the
/// query set itself.
fn displacement_backward<T: Real>(
    neighbors: &[NeighborSet<T>],
    d_rows: &Tensor<T>,
    col: usize,
    d_query: &mut Tensor<T>,
    ref_fixed: bool,
) {
    let mut row = 0;
    for n in neighbors {
        for &j in &n.neighbor_indices {
            let g = [0, 1, 2].map(|k| d_rows.row(row)[col + k]);
            for k in 0..3 {
                d_query.row_mut(n.query_index)[k] -= g[k];
            }
            if !ref_fixed {
                for k in 0..3 {
                    d_query.row_mut(j)[k] += g[k];
                }
            }
            row += 1;
        }
    }
}
