use super::{
    backbone_backward, backbone_features, detect_head_backward, detect_head_forward,
    flow_head_backward, flow_head_forward_with, BackboneGeometry, DetectOutput,
    FlowGeometry, ModelConfig, ModelParams,
};
use crate::error::{Error, Result};
use crate::losses::{
    detection_total_loss, flow_total_loss_indexed, nn_index_cell, DetectionLossReport,
    DetectionLossWeights, DetectionTargets, DistanceMode, FlowLossReport,
};
use crate::numeric::{Real, Tensor};
use crate::pointops::{GridIndex, PointCloud};

/// Sampling seeds for the two frames of a pair.
fn frame_seeds(seed: u64) -> (u64, u64) {
    let base = seed.wrapping_mul(4);
    (base, base.wrapping_add(2))
}

/// Everything about a frame pair that does not depend on parameters.
#[derive(Clone, Debug)]
pub struct PairGeometry<T = f32> {
    pub frame_t: BackboneGeometry<T>,
    pub frame_t1: BackboneGeometry<T>,
    pub forward: FlowGeometry<T>,
    /// Index over the full frame `t+1` cloud for the nearest-neighbor loss.
    pub target: GridIndex<T>,
}

impl<T: Real> PairGeometry<T> {
    pub fn build(
        cloud_t: &PointCloud,
        cloud_t1: &PointCloud,
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<Self> {
        let (s0, s1) = frame_seeds(seed);
        let frame_t = BackboneGeometry::build(cloud_t, &cfg.backbone, s0)?;
        let frame_t1 = BackboneGeometry::build(cloud_t1, &cfg.backbone, s1)?;
        let forward = FlowGeometry::build(
            &frame_t.sampled_xyz,
            &frame_t.centroids,
            &frame_t1.centroids,
            &cfg.flow,
        )?;
        let xyz: Tensor<T> = cloud_t1.xyz.cast();
        let target = GridIndex::build(&xyz, nn_index_cell(&xyz))?;
        Ok(Self {
            frame_t,
            frame_t1,
            forward,
            target,
        })
    }
}

/// The four point sets of one forward-backward cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowCycle<T = f32> {
    /// Sampled points of frame `t`.
    pub anchors: Tensor<T>,
    pub forward_flow: Tensor<T>,
    /// `P′ = anchors + forward_flow`.
    pub propagated: Tensor<T>,
    pub backward_flow: Tensor<T>,
    /// `P″ = P′ + backward_flow`.
    pub reconstructed: Tensor<T>,
}

struct CycleState<T> {
    cycle: FlowCycle<T>,
    fwd: super::FlowCache<T>,
    bwd_geom: FlowGeometry<T>,
    bwd: super::FlowCache<T>,
    cache1: super::BackboneCache<T>,
    cache2: super::BackboneCache<T>,
}

fn run_cycle<T: Real>(
    pair_t: &BackboneGeometry<T>,
    pair_t1: &BackboneGeometry<T>,
    forward: &FlowGeometry<T>,
    params: &ModelParams<T>,
) -> Result<CycleState<T>> {
    let (enc1, cache1) = backbone_features(pair_t, params)?;
    let (enc2, cache2) = backbone_features(pair_t1, params)?;
    let (forward_flow, fwd) = flow_head_forward_with(forward, &enc1, &enc2, params)?;
    forward_flow.ensure_finite("forward flow")?;
    let mut propagated = enc1.sampled_xyz.clone();
    propagated.add_assign(&forward_flow)?;

    let enc_p = enc1.moved_to(&propagated)?;
    let bwd_geom = FlowGeometry::for_pair(&enc_p, &enc1, &params.config.flow)?;
    let (backward_flow, bwd) = flow_head_forward_with(&bwd_geom, &enc_p, &enc1, params)?;
    backward_flow.ensure_finite("backward flow")?;
    let mut reconstructed = propagated.clone();
    reconstructed.add_assign(&backward_flow)?;

    Ok(CycleState {
        cycle: FlowCycle {
            anchors: enc1.sampled_xyz.clone(),
            forward_flow,
            propagated,
            backward_flow,
            reconstructed,
        },
        fwd,
        bwd_geom,
        bwd,
        cache1,
        cache2,
    })
}

/// Forward flow `t → t+1`, propagation, backward flow from the propagated
/// points against frame `t`, and reconstruction. The flow head weights are
/// shared by both directions; the propagated points carry frame-`t` features.
pub fn forward_backward_flow<T: Real>(
    cloud_t: &PointCloud,
    cloud_t1: &PointCloud,
    params: &ModelParams<T>,
    seed: u64,
) -> Result<FlowCycle<T>> {
    let cfg = &params.config;
    let (s0, s1) = frame_seeds(seed);
    let g_t = BackboneGeometry::build(cloud_t, &cfg.backbone, s0)?;
    let g_t1 = BackboneGeometry::build(cloud_t1, &cfg.backbone, s1)?;
    let fwd = FlowGeometry::build(&g_t.sampled_xyz, &g_t.centroids, &g_t1.centroids, &cfg.flow)?;
    Ok(run_cycle(&g_t, &g_t1, &fwd, params)?.cycle)
}

#[derive(Clone, Debug)]
pub struct FlowStepOutput<T = f32> {
    pub report: FlowLossReport,
    pub cycle: FlowCycle<T>,
}

/// Flow loss of one pair; accumulates gradients of every `g.*` and `s.*`
/// parameter into `params`.
///
/// `P′` reaches the loss three ways: directly in the nearest-neighbor term,
/// as the base of `P″`, and as the positions the backward pass runs on.
/// All three carry gradient; neighbor sets are held fixed.
pub fn flow_loss_and_grads<T: Real>(
    pair: &PairGeometry<T>,
    params: &mut ModelParams<T>,
    mode: DistanceMode,
) -> Result<FlowStepOutput<T>> {
    let st = run_cycle(&pair.frame_t, &pair.frame_t1, &pair.forward, params)?;
    let lg = flow_total_loss_indexed(
        &st.cycle.anchors,
        &pair.target,
        &st.cycle.propagated,
        &st.cycle.reconstructed,
        mode,
    )?;
    if !lg.report.total.is_finite() {
        return Err(Error::NonFinite(format!("flow loss {}", lg.report.total)));
    }
    let centroid_rows = &pair.frame_t.centroid_idx;
    let d_rec = lg.d_reconstructed;
    let gb = flow_head_backward(&st.bwd_geom, params, &st.bwd, centroid_rows, d_rec.clone())?;
    let mut d_prop = lg.d_propagated;
    d_prop.add_assign(&d_rec)?;
    d_prop.add_assign(&gb.d_sampled1_xyz)?;
    let gf = flow_head_backward(&pair.forward, params, &st.fwd, centroid_rows, d_prop)?;

    let mut d_sampled = gf.d_sampled1;
    d_sampled.add_assign(&gb.d_sampled1)?;
    let mut d_centroid = gf.d_centroid1;
    d_centroid.add_assign(&gb.d_centroid1)?;
    d_centroid.add_assign(&gb.d_centroid2)?;
    backbone_backward(&pair.frame_t, params, &st.cache1, Some(&d_sampled), Some(&d_centroid))?;
    backbone_backward(&pair.frame_t1, params, &st.cache2, None, Some(&gf.d_centroid2))?;
    Ok(FlowStepOutput {
        report: lg.report,
        cycle: st.cycle,
    })
}

/// Flow loss of one pair without gradients.
pub fn flow_loss<T: Real>(
    pair: &PairGeometry<T>,
    params: &ModelParams<T>,
    mode: DistanceMode,
) -> Result<FlowStepOutput<T>> {
    let st = run_cycle(&pair.frame_t, &pair.frame_t1, &pair.forward, params)?;
    let lg = flow_total_loss_indexed(
        &st.cycle.anchors,
        &pair.target,
        &st.cycle.propagated,
        &st.cycle.reconstructed,
        mode,
    )?;
    Ok(FlowStepOutput {
        report: lg.report,
        cycle: st.cycle,
    })
}

/// Forward flow of a prepared pair, one row per sampled point of frame `t`.
pub fn pair_forward_flow<T: Real>(pair: &PairGeometry<T>, params: &ModelParams<T>) -> Result<Tensor<T>> {
    let (enc1, _) = backbone_features(&pair.frame_t, params)?;
    let (enc2, _) = backbone_features(&pair.frame_t1, params)?;
    Ok(flow_head_forward_with(&pair.forward, &enc1, &enc2, params)?.0)
}

/// Detection head output for one prepared frame.
pub fn detect_forward<T: Real>(geom: &BackboneGeometry<T>, params: &ModelParams<T>) -> Result<DetectOutput<T>> {
    let (enc, _) = backbone_features(geom, params)?;
    Ok(detect_head_forward(&enc, params)?.0)
}

#[derive(Clone, Debug)]
pub struct DetectStepOutput<T = f32> {
    pub report: DetectionLossReport,
    pub output: DetectOutput<T>,
}

/// Detection loss of one frame; accumulates gradients of every `g.*` and
/// `h.*` parameter into `params`.
pub fn detection_loss_and_grads<T: Real>(
    geom: &BackboneGeometry<T>,
    targets: &DetectionTargets<T>,
    params: &mut ModelParams<T>,
    weights: DetectionLossWeights,
) -> Result<DetectStepOutput<T>> {
    let (enc, bcache) = backbone_features(geom, params)?;
    let (output, dcache) = detect_head_forward(&enc, params)?;
    let lg = detection_total_loss(&output, targets, weights)?;
    if !lg.report.total.is_finite() {
        return Err(Error::NonFinite(format!("detection loss {}", lg.report.total)));
    }
    let d_feats = detect_head_backward(params, &dcache, &lg.d_heatmap, &lg.d_regmap)?;
    backbone_backward(geom, params, &bcache, Some(&d_feats), None)?;
    Ok(DetectStepOutput {
        report: lg.report,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{backbone_forward, detect_head_forward, flow_head_forward, tiny_config, tiny_scene};
    use crate::numeric::Namespace;

    #[test]
    fn zeroed_output_layer_gives_exact_cycle() {
        let (a, _, _) = tiny_scene(3);
        let mut p = ModelParams::<f32>::init(tiny_config(), 3).unwrap();
        p.zero_flow_output();
        let c = forward_backward_flow(&a, &a, &p, 0).unwrap();
        assert!(c.forward_flow.data().iter().all(|&v| v == 0.0));
        assert!(c.backward_flow.data().iter().all(|&v| v == 0.0));
        assert_eq!(c.reconstructed, c.anchors);
        let pair = PairGeometry::build(&a, &a, &p.config, 0).unwrap();
        let out = flow_loss_and_grads(&pair, &mut p, DistanceMode::Squared).unwrap();
        assert_eq!(out.report.cycle_loss, 0.0);
        // Samples are a subset of the static cloud.
        assert_eq!(out.report.nn_loss, 0.0);
    }

    #[test]
    fn every_backbone_parameter_gets_gradient_from_flow() {
        let (a, b, _) = tiny_scene(4);
        let cfg = tiny_config();
        let mut p = ModelParams::<f64>::init(cfg.clone(), 4).unwrap();
        let pair = PairGeometry::build(&a, &b, &cfg, 1).unwrap();
        flow_loss_and_grads(&pair, &mut p, DistanceMode::Squared).unwrap();
        for q in p.store.iter() {
            let any = q.grad.data().iter().any(|&g| g != 0.0);
            match Namespace::of(&q.name) {
                Some(Namespace::Detect) => assert!(!any, "{}", q.name),
                _ => assert!(any, "{} has zero gradient", q.name),
            }
        }
    }

    #[test]
    fn both_frames_feed_backbone_gradient() {
        // Gradient through frame t+1 alone: drop frame t's contribution by
        // comparing against a run where frame t+1's backward is skipped.
        let (a, b, _) = tiny_scene(5);
        let cfg = tiny_config();
        let mut p = ModelParams::<f64>::init(cfg.clone(), 5).unwrap();
        let pair = PairGeometry::build(&a, &b, &cfg, 2).unwrap();
        let st = run_cycle(&pair.frame_t, &pair.frame_t1, &pair.forward, &p).unwrap();
        let lg = flow_total_loss_indexed(
            &st.cycle.anchors,
            &pair.target,
            &st.cycle.propagated,
            &st.cycle.reconstructed,
            DistanceMode::Squared,
        )
        .unwrap();
        let mut d_prop = lg.d_propagated;
        d_prop.add_assign(&lg.d_reconstructed).unwrap();
        let gf = flow_head_backward(&pair.forward, &mut p, &st.fwd, &pair.frame_t.centroid_idx, d_prop).unwrap();
        p.store.zero_grads();
        backbone_backward(&pair.frame_t1, &mut p, &st.cache2, None, Some(&gf.d_centroid2)).unwrap();
        assert!(p.store.grad("g.sa.l0.w").unwrap().data().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn namespace_isolation() {
        let (a, b, _) = tiny_scene(6);
        let cfg = tiny_config();
        let p = ModelParams::<f32>::init(cfg, 6).unwrap();
        let mut no_h = p.clone();
        no_h.store.zero_namespace(Namespace::Detect);
        let mut no_s = p.clone();
        no_s.store.zero_namespace(Namespace::Flow);
        assert_eq!(
            forward_backward_flow(&a, &b, &p, 0).unwrap(),
            forward_backward_flow(&a, &b, &no_h, 0).unwrap()
        );
        let enc = backbone_forward(&a, &p, 0).unwrap();
        assert_eq!(
            detect_head_forward(&enc, &p).unwrap().0,
            detect_head_forward(&enc, &no_s).unwrap().0
        );
    }

    #[test]
    fn flow_is_translation_equivariant() {
        let (a, b, _) = tiny_scene(7);
        let p = ModelParams::<f64>::init(tiny_config(), 7).unwrap();
        let t = [3.0, -2.0, 0.5];
        let e1 = backbone_forward(&a, &p, 1).unwrap();
        let e2 = backbone_forward(&b, &p, 2).unwrap();
        let f = flow_head_forward(&e1, &e2, &p).unwrap();
        let e1t = backbone_forward(&a.translated(t), &p, 1).unwrap();
        let e2t = backbone_forward(&b.translated(t), &p, 2).unwrap();
        let ft = flow_head_forward(&e1t, &e2t, &p).unwrap();
        for (x, y) in f.data().iter().zip(ft.data()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn forward_backward_is_deterministic() {
        let (a, b, _) = tiny_scene(8);
        let p = ModelParams::<f32>::init(tiny_config(), 8).unwrap();
        assert_eq!(
            forward_backward_flow(&a, &b, &p, 3).unwrap(),
            forward_backward_flow(&a, &b, &p, 3).unwrap()
        );
    }
}
