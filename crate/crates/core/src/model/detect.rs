use super::conv::{col2im3x3, im2col3x3};
use super::{DetectHeadConfig, Encoding, ModelParams, REG_CHANNELS};
use crate::error::{Error, Result};
use crate::numeric::{mlp_backward, mlp_forward, MlpCache, MlpSpec, Real, Tensor};

/// Assignment of sampled points to BEV cells, `cell = iy * side + ix`.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub side: usize,
    pub cell_of_point: Vec<Option<usize>>,
}

impl BevGrid {
    pub fn build<T: Real>(xyz: &Tensor<T>, cfg: &DetectHeadConfig) -> Self {
        let side = cfg.bev_cells;
        let cs = cfg.cell_size();
        let lo = -cfg.bev_extent;
        let cell_of_point = (0..xyz.rows())
            .map(|i| {
                let p = xyz.point(i);
                let ix = ((p[0].as_f64() - lo) / cs).floor();
                let iy = ((p[1].as_f64() - lo) / cs).floor();
                let inside = ix >= 0.0 && iy >= 0.0 && ix < side as f64 && iy < side as f64;
                inside.then(|| iy as usize * side + ix as usize)
            })
            .collect();
        Self {
            side,
            cell_of_point,
        }
    }

    pub fn occupied(&self) -> usize {
        self.cell_of_point.iter().filter(|c| c.is_some()).count()
    }
}

/// Head outputs in channels-last layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectOutput<T = f32> {
    /// `side × side × num_classes`, values in (0, 1).
    pub heatmap: Tensor<T>,
    /// `side × side × 8`.
    pub regmap: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct DetectCache<T> {
    /// Source point per (cell, channel); `usize::MAX` for empty cells.
    argmax: Vec<usize>,
    n_points: usize,
    feat_dim: usize,
    conv1: MlpCache<T>,
    conv2: MlpCache<T>,
    hm: MlpCache<T>,
    reg: MlpCache<T>,
    heatmap: Tensor<T>,
}

fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

fn scatter_max<T: Real>(grid: &BevGrid, feats: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let d = feats.cols();
    let cells = grid.side * grid.side;
    let mut pooled = Tensor::zeros(&[cells, d]);
    let mut argmax = vec![usize::MAX; cells * d];
    for (i, cell) in grid.cell_of_point.iter().enumerate() {
        let Some(c) = *cell else { continue };
        let row = feats.row(i);
        let out = pooled.row_mut(c);
        let arg = &mut argmax[c * d..(c + 1) * d];
        for k in 0..d {
            if arg[k] == usize::MAX || row[k] > out[k] {
                out[k] = row[k];
                arg[k] = i;
            }
        }
    }
    (pooled, argmax)
}

/// BEV scatter, two 3×3 convolutions and the heatmap and regression heads.
pub fn detect_head_forward<T: Real>(
    enc: &Encoding<T>,
    params: &ModelParams<T>,
) -> Result<(DetectOutput<T>, DetectCache<T>)> {
    let cfg = &params.config.detect;
    let d = params.config.backbone.feature_dim();
    if enc.sampled_feats.cols() != d {
        return Err(Error::Config(format!(
            "detect head: features have width {}, config expects {d}",
            enc.sampled_feats.cols()
        )));
    }
    let grid = BevGrid::build(&enc.sampled_xyz, cfg);
    if grid.occupied() == 0 {
        log::warn!("detect head: no sampled point inside the BEV extent");
    }
    let side = cfg.bev_cells;
    let ch = cfg.conv_channels;
    let store = &params.store;
    let (pooled, argmax) = scatter_max(&grid, &enc.sampled_feats);
    let (h1, conv1) = mlp_forward(store, "h.conv1", &MlpSpec::relu(&[ch]), im2col3x3(&pooled, side)?)?;
    let (h2, conv2) = mlp_forward(store, "h.conv2", &MlpSpec::relu(&[ch]), im2col3x3(&h1, side)?)?;
    let (logits, hm) = mlp_forward(
        store,
        "h.hm",
        &MlpSpec::linear_head(&[cfg.num_classes]),
        h2.clone(),
    )?;
    let (reg, reg_cache) = mlp_forward(store, "h.reg", &MlpSpec::linear_head(&[REG_CHANNELS]), h2)?;
    let heat: Vec<T> = logits.data().iter().map(|&z| sigmoid(z)).collect();
    let heatmap = Tensor::new(vec![side, side, cfg.num_classes], heat)?;
    let regmap = reg.reshape(vec![side, side, REG_CHANNELS])?;
    let cache = DetectCache {
        argmax,
        n_points: enc.sampled_feats.rows(),
        feat_dim: d,
        conv1,
        conv2,
        hm,
        reg: reg_cache,
        heatmap: heatmap.clone(),
    };
    Ok((DetectOutput { heatmap, regmap }, cache))
}

/// Accumulates `h.*` gradients given gradients on the heatmap probabilities
/// and the regression map, and returns the gradient on `sampled_feats`.
pub fn detect_head_backward<T: Real>(
    params: &mut ModelParams<T>,
    cache: &DetectCache<T>,
    d_heatmap: &Tensor<T>,
    d_regmap: &Tensor<T>,
) -> Result<Tensor<T>> {
    let cfg = params.config.detect.clone();
    let side = cfg.bev_cells;
    let cells = side * side;
    let ch = cfg.conv_channels;
    if d_heatmap.shape() != cache.heatmap.shape() {
        return Err(Error::shape("detect_head_backward heatmap", cache.heatmap.shape(), d_heatmap.shape()));
    }
    if d_regmap.len() != cells * REG_CHANNELS {
        return Err(Error::shape(
            "detect_head_backward regmap",
            &[side, side, REG_CHANNELS],
            d_regmap.shape(),
        ));
    }
    let dz: Vec<T> = d_heatmap
        .data()
        .iter()
        .zip(cache.heatmap.data())
        .map(|(&g, &p)| g * p * (T::one() - p))
        .collect();
    let store = &mut params.store;
    let dz = Tensor::matrix(cells, cfg.num_classes, dz)?;
    let mut dh2 = mlp_backward(
        store,
        "h.hm",
        &MlpSpec::linear_head(&[cfg.num_classes]),
        &cache.hm,
        dz,
    )?;
    let dreg = d_regmap.clone().reshape(vec![cells, REG_CHANNELS])?;
    dh2.add_assign(&mlp_backward(
        store,
        "h.reg",
        &MlpSpec::linear_head(&[REG_CHANNELS]),
        &cache.reg,
        dreg,
    )?)?;
    let dcol = mlp_backward(store, "h.conv2", &MlpSpec::relu(&[ch]), &cache.conv2, dh2)?;
    let dh1 = col2im3x3(&dcol, side)?;
    let dcol = mlp_backward(store, "h.conv1", &MlpSpec::relu(&[ch]), &cache.conv1, dh1)?;
    let dpooled = col2im3x3(&dcol, side)?;

    let d = cache.feat_dim;
    let mut dfeats = Tensor::zeros(&[cache.n_points, d]);
    for (idx, &src) in cache.argmax.iter().enumerate() {
        if src != usize::MAX {
            dfeats.row_mut(src)[idx % d] += dpooled.data()[idx];
        }
    }
    Ok(dfeats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{backbone_forward, ModelConfig, HEATMAP_PRIOR_BIAS};
    use crate::numeric::MlpSpec;
    use crate::pointops::PointCloud;

    fn small_config() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.backbone.n_sample = 32;
        c.backbone.n_centroids = 8;
        c.backbone.mlp = MlpSpec::relu(&[8]);
        c.detect.bev_cells = 8;
        c.detect.bev_extent = 4.0;
        c.detect.conv_channels = 4;
        c
    }

    #[test]
    fn cell_assignment_uses_floor_from_minimum() {
        let cfg = small_config().detect;
        let xyz = Tensor::from_points(&[[-4.0f32, -4.0, 0.0], [0.1, -3.1, 0.0], [4.0, 0.0, 0.0], [3.99, 3.99, 0.0]]);
        let g = BevGrid::build(&xyz, &cfg);
        assert_eq!(g.cell_of_point, vec![Some(0), Some(4), None, Some(63)]);
    }

    #[test]
    fn empty_extent_gives_uniform_prior() {
        let p = ModelParams::<f64>::init(small_config(), 0).unwrap();
        let far: Vec<[f32; 3]> = (0..40).map(|i| [100.0 + i as f32, 50.0, 0.0]).collect();
        let enc = backbone_forward(&PointCloud::from_points(&far), &p, 0).unwrap();
        let (out, _) = detect_head_forward(&enc, &p).unwrap();
        let expected = 1.0 / (1.0 + (-HEATMAP_PRIOR_BIAS).exp());
        assert!(out.heatmap.data().iter().all(|&v| (v - expected).abs() < 1e-12));
        assert_eq!(out.heatmap.shape(), &[8, 8, 1]);
        assert_eq!(out.regmap.shape(), &[8, 8, 8]);
    }

    #[test]
    fn heatmap_strictly_inside_unit_interval() {
        let p = ModelParams::<f32>::init(small_config(), 1).unwrap();
        let pts: Vec<[f32; 3]> = (0..40).map(|i| [(i % 7) as f32 - 3.0, (i % 5) as f32 - 2.0, 0.3]).collect();
        let enc = backbone_forward(&PointCloud::from_points(&pts), &p, 0).unwrap();
        let (out, _) = detect_head_forward(&enc, &p).unwrap();
        assert!(out.heatmap.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}
