use super::{BackboneConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{
    mlp_backward, mlp_forward, segment_max_pool, segment_max_pool_backward, MlpCache, Real, Tensor,
};
use crate::pointops::{
    ball_query, fps_indices, gather_groups, GridIndex, InterpWeights, NeighborSet, PointCloud,
};

/// Above this many reference points ball queries go through a grid index.
const GRID_THRESHOLD: usize = 256;

/// Parameter-independent part of the backbone for one frame: sampling,
/// grouping and interpolation weights. Reusable across training steps.
#[derive(Clone, Debug)]
pub struct BackboneGeometry<T = f32> {
    /// Indices of the sampled points in the input cloud.
    pub sample_idx: Vec<usize>,
    pub sampled_xyz: Tensor<T>,
    /// Raw per-point input features, `n_sample × input_dim`.
    pub input_feats: Tensor<T>,
    /// Indices of the centroids among the sampled points.
    pub centroid_idx: Vec<usize>,
    pub centroids: Tensor<T>,
    pub groups: Vec<NeighborSet<T>>,
    pub interp: InterpWeights<T>,
}

impl<T: Real> BackboneGeometry<T> {
    pub fn build(cloud: &PointCloud, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Empty("backbone input cloud"));
        }
        let xyz: Tensor<T> = cloud.xyz.cast();
        let sample_idx = fps_indices(&xyz, cfg.n_sample, seed)?;
        let sampled_xyz = xyz.gather_rows(&sample_idx)?;
        let input_feats = if cfg.use_reflectance {
            let refl = cloud
                .reflectance
                .as_ref()
                .ok_or_else(|| Error::invalid("use_reflectance set but cloud has no reflectance"))?;
            let v = sample_idx.iter().map(|&i| T::of(refl[i] as f64)).collect();
            Tensor::matrix(sample_idx.len(), 1, v)?
        } else {
            Tensor::zeros(&[sample_idx.len(), 0])
        };
        Self::from_sampled(sample_idx, sampled_xyz, input_feats, cfg, seed)
    }

    fn from_sampled(
        sample_idx: Vec<usize>,
        sampled_xyz: Tensor<T>,
        input_feats: Tensor<T>,
        cfg: &BackboneConfig,
        seed: u64,
    ) -> Result<Self> {
        let centroid_idx = fps_indices(&sampled_xyz, cfg.n_centroids, seed.wrapping_add(1))?;
        let centroids = sampled_xyz.gather_rows(&centroid_idx)?;
        let groups = if sampled_xyz.rows() > GRID_THRESHOLD {
            GridIndex::build(&sampled_xyz, cfg.radius)?.ball_query(&centroids, cfg.radius, cfg.max_k)?
        } else {
            ball_query(&centroids, &sampled_xyz, cfg.radius, cfg.max_k)?
        };
        let interp = InterpWeights::build(&sampled_xyz, &centroids)?;
        Ok(Self {
            sample_idx,
            sampled_xyz,
            input_feats,
            centroid_idx,
            centroids,
            groups,
            interp,
        })
    }
}

/// Backbone output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoding<T = f32> {
    pub sampled_xyz: Tensor<T>,
    pub sampled_feats: Tensor<T>,
    pub centroid_idx: Vec<usize>,
    pub centroids: Tensor<T>,
    pub centroid_feats: Tensor<T>,
}

impl<T: Real> Encoding<T> {
    /// Same features at new sampled positions; centroids follow their points.
    pub fn moved_to(&self, sampled_xyz: &Tensor<T>) -> Result<Self> {
        if sampled_xyz.shape() != self.sampled_xyz.shape() {
            return Err(Error::shape("Encoding::moved_to", self.sampled_xyz.shape(), sampled_xyz.shape()));
        }
        Ok(Self {
            sampled_xyz: sampled_xyz.clone(),
            sampled_feats: self.sampled_feats.clone(),
            centroid_idx: self.centroid_idx.clone(),
            centroids: sampled_xyz.gather_rows(&self.centroid_idx)?,
            centroid_feats: self.centroid_feats.clone(),
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.centroid_feats.cols()
    }
}

#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    mlp: MlpCache<T>,
    argmax: Vec<usize>,
    rows: usize,
}

/// Set-conv over the centroids followed by interpolation back to the
/// sampled points.
pub fn backbone_features<T: Real>(
    geom: &BackboneGeometry<T>,
    params: &ModelParams<T>,
) -> Result<(Encoding<T>, BackboneCache<T>)> {
    let cfg = &params.config.backbone;
    if geom.input_feats.cols() != cfg.input_dim() {
        return Err(Error::shape(
            "backbone input features",
            geom.input_feats.shape(),
            &[geom.input_feats.rows(), cfg.input_dim()],
        ));
    }
    let grouped = gather_groups(&geom.groups, None, &geom.input_feats)?;
    let rows = grouped.rows.rows();
    let (h, mlp) = mlp_forward(&params.store, "g.sa", &cfg.mlp, grouped.rows)?;
    let (centroid_feats, argmax) = segment_max_pool(&h, &grouped.offsets)?;
    let sampled_feats = geom.interp.apply(&centroid_feats)?;
    let enc = Encoding {
        sampled_xyz: geom.sampled_xyz.clone(),
        sampled_feats,
        centroid_idx: geom.centroid_idx.clone(),
        centroids: geom.centroids.clone(),
        centroid_feats,
    };
    Ok((enc, BackboneCache { mlp, argmax, rows }))
}

/// Accumulates `g.*` gradients given gradients on both feature outputs.
pub fn backbone_backward<T: Real>(
    geom: &BackboneGeometry<T>,
    params: &mut ModelParams<T>,
    cache: &BackboneCache<T>,
    d_sampled_feats: Option<&Tensor<T>>,
    d_centroid_feats: Option<&Tensor<T>>,
) -> Result<()> {
    let d = params.config.backbone.feature_dim();
    let mut dc = Tensor::zeros(&[geom.centroids.rows(), d]);
    if let Some(ds) = d_sampled_feats {
        dc.add_assign(&geom.interp.backward(ds)?)?;
    }
    if let Some(g) = d_centroid_feats {
        dc.add_assign(g)?;
    }
    let dh = segment_max_pool_backward(&cache.argmax, cache.rows, &dc)?;
    let spec = params.config.backbone.mlp.clone();
    mlp_backward(&mut params.store, "g.sa", &spec, &cache.mlp, dh)?;
    Ok(())
}

/// Encodes one frame: FPS to `n_sample`, FPS to `n_centroids`, set-conv,
/// interpolation back to the sampled points.
pub fn backbone_forward<T: Real>(
    cloud: &PointCloud,
    params: &ModelParams<T>,
    seed: u64,
) -> Result<Encoding<T>> {
    let geom = BackboneGeometry::build(cloud, &params.config.backbone, seed)?;
    Ok(backbone_features(&geom, params)?.0)
}
