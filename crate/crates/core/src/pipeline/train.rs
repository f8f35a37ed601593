use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::checkpoint::{apply_checkpoint, Checkpoint};
use super::config::{DataConfig, RunConfig};
use super::metrics::MetricsLog;
use crate::data::{read_manifest, subset_split, Box3, SyntheticDataset, UnlabeledPair};
use crate::error::{Error, Result};
use crate::eval::{
    decode_detections, evaluate_detections, flow_eval, merge_flow_evals, nms, DetectEvalConfig,
    EvalReport, FlowEval,
};
use crate::losses::{make_detection_targets, DetectionTargets};
use crate::model::{
    detect_forward, detection_loss_and_grads, flow_loss, flow_loss_and_grads, pair_forward_flow,
    BackboneGeometry, ModelParams, PairGeometry,
};
use crate::numeric::{Namespace, Optimizer, Real, Tensor};

/// Scene ids of the three splits plus the generator behind them.
#[derive(Clone, Debug)]
pub struct SceneSource {
    pub dataset: SyntheticDataset,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
    pub test_ids: Vec<u64>,
}

impl SceneSource {
    pub fn from_config(cfg: &DataConfig) -> Result<Self> {
        let dataset = SyntheticDataset::new(cfg.generator.clone(), cfg.seed)?;
        let train_ids = match &cfg.manifest {
            None => (0..cfg.train_scenes as u64).collect(),
            Some(path) => {
                let (ids, meta) = read_manifest(path)?;
                if meta.generator_hash != cfg.generator.hash() || meta.seed != cfg.seed {
                    return Err(Error::Config(format!(
                        "manifest {} was written for another generator or seed",
                        path.display()
                    )));
                }
                ids
            }
        };
        let val_ids = cfg.val_ids();
        let test_ids = cfg.test_ids();
        if train_ids.iter().any(|i| val_ids.contains(i) || test_ids.contains(i)) {
            return Err(Error::Config("training ids overlap held-out ids".into()));
        }
        Ok(Self {
            dataset,
            train_ids,
            val_ids,
            test_ids,
        })
    }

    /// Unlabeled frame pair: the only view flow training ever gets.
    pub fn pair(&self, id: u64) -> Result<UnlabeledPair> {
        self.dataset.pair(id)
    }
}

/// Sampling seed of the per-frame geometry of a scene.
fn geometry_seed(id: u64) -> u64 {
    id
}

fn stage_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let digest = Sha256::digest(tag.as_bytes());
    rng.set_stream(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")));
    rng
}

struct PairCache<'a> {
    source: &'a SceneSource,
    run: &'a RunConfig,
    pairs: HashMap<u64, PairGeometry<f32>>,
}

impl<'a> PairCache<'a> {
    fn new(source: &'a SceneSource, run: &'a RunConfig) -> Self {
        Self {
            source,
            run,
            pairs: HashMap::new(),
        }
    }

    fn get(&mut self, id: u64) -> Result<&PairGeometry<f32>> {
        if !self.pairs.contains_key(&id) {
            let p = self.source.pair(id)?;
            let g = PairGeometry::build(&p.frame_t, &p.frame_t1, &self.run.model, geometry_seed(id))?;
            self.pairs.insert(id, g);
        }
        Ok(&self.pairs[&id])
    }
}

/// Result of one training stage.
#[derive(Debug)]
pub struct StageOutcome {
    pub tag: String,
    /// Parameters at the best validation point.
    pub best: ModelParams<f32>,
    pub best_step: u64,
    pub best_metric: f64,
    /// Parameters after the last step.
    pub last: ModelParams<f32>,
    pub steps_run: u64,
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log: MetricsLog,
}

fn diverged(e: Error, step: u64, last_good: &Option<PathBuf>) -> Error {
    match e {
        Error::NonFinite(msg) => {
            log::error!("non-finite value at step {step}: {msg}");
            Error::Divergence {
                step: step as usize,
                last_good: last_good.clone(),
            }
        }
        other => other,
    }
}

/// Self-supervised flow training of `g` and `s` from the given parameters.
/// Only unlabeled pairs are read.
pub fn train_flow(
    mut params: ModelParams<f32>,
    run: &RunConfig,
    source: &SceneSource,
    out_dir: &Path,
    tag: &str,
) -> Result<StageOutcome> {
    let cfg = &run.flow;
    let dir = out_dir.join(tag);
    let mut log = MetricsLog::create(
        dir.join("metrics.csv"),
        &["nn_loss", "cycle_loss", "total", "val_loss"],
    )?;
    let best_path = dir.join("best.fsck");
    let last_path = dir.join("last.fsck");
    let mut rng = stage_rng(run.seed, tag);
    let mut opt = Optimizer::<f32>::new(cfg.optimizer);
    let mut train = PairCache::new(source, run);
    let mut val = PairCache::new(source, run);
    let mut best: Option<(f64, u64, ModelParams<f32>)> = None;
    let mut saved_best: Option<PathBuf> = None;
    let mut since_best = 0usize;
    let inv_b = 1.0 / cfg.batch_size as f32;
    params.store.zero_grads();

    let validate = |params: &ModelParams<f32>, val: &mut PairCache| -> Result<f64> {
        let mut total = 0.0;
        for &id in &source.val_ids {
            total += flow_loss(val.get(id)?, params, cfg.distance)?.report.total;
        }
        Ok(total / source.val_ids.len().max(1) as f64)
    };

    let mut step = 0u64;
    while step < cfg.steps as u64 {
        step += 1;
        let (mut nn, mut cyc, mut tot) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let id = source.train_ids[rng.random_range(0..source.train_ids.len())];
            let pair = train.get(id)?;
            let out = flow_loss_and_grads(pair, &mut params, cfg.distance)
                .map_err(|e| diverged(e, step, &saved_best))?;
            nn += out.report.nn_loss;
            cyc += out.report.cycle_loss;
            tot += out.report.total;
        }
        params.store.scale_grads(inv_b);
        opt.step(&mut params.store).map_err(|e| diverged(e, step, &saved_best))?;
        let b = cfg.batch_size as f64;
        let mut row = vec![("nn_loss", nn / b), ("cycle_loss", cyc / b), ("total", tot / b)];

        let last = step == cfg.steps as u64;
        if step % cfg.val_every as u64 == 0 || last {
            let v = validate(&params, &mut val).map_err(|e| diverged(e, step, &saved_best))?;
            if !v.is_finite() {
                return Err(diverged(Error::NonFinite(format!("validation loss {v}")), step, &saved_best));
            }
            row.push(("val_loss", v));
            if best.as_ref().is_none_or(|(bv, _, _)| v < *bv) {
                let mut ck = Checkpoint::new(&params, step, tag).with_optimizer(&opt).with_rng(&rng);
                ck.metrics.insert("val_loss".into(), v);
                ck.save(&best_path)?;
                saved_best = Some(best_path.clone());
                best = Some((v, step, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            log::info!("[{tag}] step {step} train {:.5} val {v:.5}", tot / b);
        }
        log.append(step, &row)?;
        if cfg.patience.is_some_and(|p| since_best >= p) {
            log::info!("[{tag}] early stop at step {step}");
            break;
        }
    }
    let mut ck = Checkpoint::new(&params, step, tag).with_optimizer(&opt).with_rng(&rng);
    ck.metrics.insert("steps".into(), step as f64);
    ck.save(&last_path)?;
    let (best_metric, best_step, best_params) = best.expect("validation runs at the last step");
    Ok(StageOutcome {
        tag: tag.to_string(),
        best: best_params,
        best_step,
        best_metric,
        last: params,
        steps_run: step,
        best_path,
        last_path,
        log,
    })
}

struct FrameCache<'a> {
    source: &'a SceneSource,
    run: &'a RunConfig,
    frames: HashMap<u64, (BackboneGeometry<f32>, DetectionTargets<f32>, Vec<Box3>)>,
}

impl<'a> FrameCache<'a> {
    fn new(source: &'a SceneSource, run: &'a RunConfig) -> Self {
        Self {
            source,
            run,
            frames: HashMap::new(),
        }
    }

    fn get(&mut self, id: u64) -> Result<&(BackboneGeometry<f32>, DetectionTargets<f32>, Vec<Box3>)> {
        if !self.frames.contains_key(&id) {
            let s = self.source.dataset.scene(id)?;
            let g = BackboneGeometry::build(&s.frame_t, &self.run.model.backbone, geometry_seed(id))?;
            let t = make_detection_targets(&s.gt_boxes_t, &self.run.model.detect)?;
            self.frames.insert(id, (g, t, s.gt_boxes_t));
        }
        Ok(&self.frames[&id])
    }
}

/// Decoded, suppressed detections of one prepared frame.
pub fn detect_boxes<T: Real>(
    geom: &BackboneGeometry<T>,
    params: &ModelParams<T>,
    eval: &DetectEvalConfig,
) -> Result<Vec<Box3>> {
    let out = detect_forward(geom, params)?;
    let dets = decode_detections(&out.heatmap, &out.regmap, &params.config.detect, eval.peak_threshold, eval.max_dets)?;
    Ok(nms(&dets, eval.nms_iou))
}

/// Validation score: mean defined per-class AP.
fn mean_ap(report: &EvalReport) -> f64 {
    let defined: Vec<f64> = report.ap.iter().filter(|a| a.defined).map(|a| a.ap).collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Supervised training of `g` and `h` on the labeled subset
/// `subset_split(train_ids, label_fraction, seed)`.
pub fn train_detection(
    mut params: ModelParams<f32>,
    run: &RunConfig,
    source: &SceneSource,
    out_dir: &Path,
    tag: &str,
) -> Result<StageOutcome> {
    let cfg = &run.detect;
    let labeled = subset_split(&source.train_ids, run.label_fraction, run.seed)?;
    log::info!("[{tag}] {} labeled frames of {}", labeled.len(), source.train_ids.len());
    let dir = out_dir.join(tag);
    let mut log = MetricsLog::create(
        dir.join("metrics.csv"),
        &["heatmap_loss", "reg_loss", "total", "val_ap", "val_loss"],
    )?;
    let best_path = dir.join("best.fsck");
    let last_path = dir.join("last.fsck");
    let mut rng = stage_rng(run.seed, tag);
    let mut opt = Optimizer::<f32>::new(cfg.optimizer);
    let mut train = FrameCache::new(source, run);
    let mut val = FrameCache::new(source, run);
    // Ranked by AP, then by lower validation loss.
    let mut best: Option<((f64, f64), u64, ModelParams<f32>)> = None;
    let mut saved_best: Option<PathBuf> = None;
    let mut since_best = 0usize;
    let inv_b = 1.0 / cfg.batch_size as f32;
    params.store.zero_grads();

    let validate = |params: &ModelParams<f32>, val: &mut FrameCache| -> Result<(f64, f64)> {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        let mut loss = 0.0;
        for &id in &source.val_ids {
            let (g, t, boxes) = val.get(id)?;
            let out = detect_forward(g, params)?;
            loss += crate::losses::detection_total_loss(&out, t, cfg.weights)?.report.total;
            let d = decode_detections(&out.heatmap, &out.regmap, &params.config.detect, cfg.eval.peak_threshold, cfg.eval.max_dets)?;
            dets.push(nms(&d, cfg.eval.nms_iou));
            gts.push(boxes.clone());
        }
        let report = evaluate_detections(&dets, &gts, params.config.detect.num_classes, &cfg.eval)?;
        Ok((mean_ap(&report), loss / source.val_ids.len().max(1) as f64))
    };

    let mut step = 0u64;
    while step < cfg.steps as u64 {
        step += 1;
        let (mut hm, mut rg, mut tot) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let id = labeled[rng.random_range(0..labeled.len())];
            let (g, t, _) = train.get(id)?;
            let out = detection_loss_and_grads(g, t, &mut params, cfg.weights)
                .map_err(|e| diverged(e, step, &saved_best))?;
            hm += out.report.heatmap;
            rg += out.report.regression;
            tot += out.report.total;
        }
        params.store.scale_grads(inv_b);
        opt.step(&mut params.store).map_err(|e| diverged(e, step, &saved_best))?;
        let b = cfg.batch_size as f64;
        let mut row = vec![("heatmap_loss", hm / b), ("reg_loss", rg / b), ("total", tot / b)];

        let last = step == cfg.steps as u64;
        if step % cfg.val_every as u64 == 0 || last {
            let (ap, vl) = validate(&params, &mut val).map_err(|e| diverged(e, step, &saved_best))?;
            if !vl.is_finite() {
                return Err(diverged(Error::NonFinite(format!("validation loss {vl}")), step, &saved_best));
            }
            row.push(("val_ap", ap));
            row.push(("val_loss", vl));
            let better = best
                .as_ref()
                .is_none_or(|((bap, bl), _, _)| ap > *bap || (ap == *bap && vl < *bl));
            if better {
                let mut ck = Checkpoint::new(&params, step, tag).with_optimizer(&opt).with_rng(&rng);
                ck.metrics.insert("val_ap".into(), ap);
                ck.metrics.insert("val_loss".into(), vl);
                ck.save(&best_path)?;
                saved_best = Some(best_path.clone());
                best = Some(((ap, vl), step, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            log::info!("[{tag}] step {step} train {:.4} val AP {ap:.4} val loss {vl:.4}", tot / b);
        }
        log.append(step, &row)?;
        if cfg.patience.is_some_and(|p| since_best >= p) {
            log::info!("[{tag}] early stop at step {step}");
            break;
        }
    }
    let mut ck = Checkpoint::new(&params, step, tag).with_optimizer(&opt).with_rng(&rng);
    ck.metrics.insert("steps".into(), step as f64);
    ck.save(&last_path)?;
    let ((best_ap, _), best_step, best_params) = best.expect("validation runs at the last step");
    Ok(StageOutcome {
        tag: tag.to_string(),
        best: best_params,
        best_step,
        best_metric: best_ap,
        last: params,
        steps_run: step,
        best_path,
        last_path,
        log,
    })
}

/// Fresh parameters for a run.
pub fn fresh_params(run: &RunConfig) -> Result<ModelParams<f32>> {
    ModelParams::init(run.model.clone(), run.seed)
}

/// Flow pre-training from scratch, or continuing `g` and `s` from
/// `init_checkpoint` when set.
pub fn pretrain_flow(run: &RunConfig) -> Result<StageOutcome> {
    run.validate()?;
    let source = SceneSource::from_config(&run.data)?;
    let mut params = fresh_params(run)?;
    if let Some(init) = &run.init_checkpoint {
        let ck = Checkpoint::load(init)?;
        apply_checkpoint(&ck, &mut params, &[Namespace::Backbone, Namespace::Flow])?;
    }
    train_flow(params, run, &source, &run.out_dir, "pretrain-flow")
}

/// Detection training. With `init`, only the backbone tensors are taken
/// from it; the detection head always starts fresh.
pub fn train_detect(run: &RunConfig, init: Option<&Path>) -> Result<StageOutcome> {
    run.validate()?;
    let source = SceneSource::from_config(&run.data)?;
    let mut params = fresh_params(run)?;
    if let Some(init) = init {
        let ck = Checkpoint::load(init)?;
        apply_checkpoint(&ck, &mut params, &[Namespace::Backbone])?;
    }
    train_detection(params, run, &source, &run.out_dir, "train-detect")
}

/// Forward flow EPE on the given scenes, and the EPE of predicting zero.
pub fn evaluate_flow(params: &ModelParams<f32>, source: &SceneSource, ids: &[u64]) -> Result<(FlowEval, FlowEval)> {
    let mut model = Vec::with_capacity(ids.len());
    let mut zero = Vec::with_capacity(ids.len());
    for &id in ids {
        let s = source.dataset.scene(id)?;
        let gt = s
            .gt_flow
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("scene {id} has no ground-truth flow")))?;
        let pair = PairGeometry::build(&s.frame_t, &s.frame_t1, &params.config, geometry_seed(id))?;
        let pred = pair_forward_flow(&pair, params)?;
        // Sampled points are points of frame t, so their nearest source
        // point is themselves.
        let gt_s = gt.gather_rows(&pair.frame_t.sample_idx)?;
        model.push(flow_eval(&pred, &gt_s)?);
        zero.push(flow_eval(&Tensor::zeros(gt_s.shape()), &gt_s)?);
    }
    Ok((merge_flow_evals(&model), merge_flow_evals(&zero)))
}

/// Detections and ground truth on the given scenes.
pub fn collect_detections(
    params: &ModelParams<f32>,
    source: &SceneSource,
    ids: &[u64],
    eval: &DetectEvalConfig,
) -> Result<(Vec<Vec<Box3>>, Vec<Vec<Box3>>)> {
    let mut dets = Vec::with_capacity(ids.len());
    let mut gts = Vec::with_capacity(ids.len());
    for &id in ids {
        let s = source.dataset.scene(id)?;
        let g = BackboneGeometry::build(&s.frame_t, &params.config.backbone, geometry_seed(id))?;
        dets.push(detect_boxes(&g, params, eval)?);
        gts.push(s.gt_boxes_t);
    }
    Ok((dets, gts))
}

pub fn evaluate_detection(
    params: &ModelParams<f32>,
    source: &SceneSource,
    ids: &[u64],
    eval: &DetectEvalConfig,
) -> Result<EvalReport> {
    let (dets, gts) = collect_detections(params, source, ids, eval)?;
    evaluate_detections(&dets, &gts, params.config.detect.num_classes, eval)
}

/// Mean defined AP over classes of a report, 0 when none is defined.
pub fn report_map(report: &EvalReport) -> f64 {
    mean_ap(report)
}
