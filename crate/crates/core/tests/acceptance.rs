//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! `cargo test --release -p flowdet --test acceptance` runs every criterion
//! that finishes in a few minutes. The training experiments (self-supervised
//! EPE, the low-data comparison and the directional alternation report) run
//! when `FLOWDET_ACCEPTANCE=full` is set. The process exits nonzero when any
//! criterion that ran failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use flowdet::data::{
    half_turn_yaw, load_kitti_bin, normalize_yaw, parse_kitti_bin, write_kitti_bin, Box3,
    SyntheticDataset,
};
use flowdet::eval::{average_precision, bev_iou, decode_detections, N_RECALL};
use flowdet::losses::{
    cycle_consistency_loss, make_detection_targets, nearest_neighbor_loss, DistanceMode,
};
use flowdet::model::{
    flow_loss, gradient_suite, pair_forward_flow, DetectHeadConfig, ModelParams, PairGeometry,
};
use flowdet::numeric::{Namespace, Tensor};
use flowdet::pipeline::{
    alternate_train, apply_checkpoint, evaluate_detection, evaluate_flow, fresh_params,
    pretrain_flow, report_map, train_detect, Checkpoint, RunConfig, SceneSource, Stage,
};
use flowdet::pointops::{knn, PointCloud};

const INSTANCES: usize = 1000;

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn gate(ok: bool, detail: impl Into<String>) -> Self {
        Self {
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Self { status: Status::Skip, detail: detail.into() }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self { status: Status::Fail, detail: format!("error: {e}") }
    }
}

fn full_mode() -> bool {
    std::env::var("FLOWDET_ACCEPTANCE").is_ok_and(|v| v == "full")
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn preset(name: &str) -> RunConfig {
    RunConfig::load(workspace_root().join("presets").join(name)).expect("preset loads")
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut ok = true;
    let mut instances = 0;
    // Ops and the composed model on 100 independent seeds.
    for seed in 0..100 {
        match gradient_suite(seed, 1e-4, 1e-3) {
            Ok(results) => {
                for r in results {
                    instances += 1;
                    ok &= r.report.passed();
                    let e = r.report.max_rel_err();
                    match worst.iter_mut().find(|(n, _)| n == r.name) {
                        Some(w) => w.1 = w.1.max(e),
                        None => worst.push((r.name.to_string(), e)),
                    }
                }
            }
            Err(e) => return Outcome::error(e),
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Outcome::gate(
        ok && secs < 120.0,
        format!(
            "{instances} checks (ops rtol 1e-4, model rtol 1e-3, 32-point scene) in {secs:.1}s; worst: {}",
            summary.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Oracle equivalence

fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(-scale..scale)))
        .collect()
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn knn_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for t in 0..INSTANCES {
        let (nq, nr) = (rng.random_range(1..30), rng.random_range(1..40));
        let q = random_points(rng, nq, 3.0);
        let mut r = random_points(rng, nr, 3.0);
        if t % 10 == 0 {
            // Exact duplicates exercise the index tie-break.
            let dup = r[0];
            r.push(dup);
        }
        let k = rng.random_range(1..10);
        let got = knn(&Tensor::from_points(&q), &Tensor::from_points(&r), k).map_err(|e| e.to_string())?;
        for (i, qp) in q.iter().enumerate() {
            let mut all: Vec<(f64, usize)> = r.iter().enumerate().map(|(j, rp)| (dist(*qp, *rp), j)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut want: Vec<(f64, usize)> = all.iter().take(k).copied().collect();
            while want.len() < k {
                want.push(all[0]);
            }
            for (slot, (d, j)) in want.iter().enumerate() {
                let gi = got.indices[i * k + slot];
                let gd = got.dists[i * k + slot];
                if gi != *j || (gd - d).abs() > 1e-9 {
                    return Err(format!("knn instance {t}: query {i} slot {slot}: got ({gi}, {gd}), want ({j}, {d})"));
                }
            }
        }
    }
    Ok(())
}

fn nn_loss_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for t in 0..INSTANCES {
        let (np, nt) = (rng.random_range(1..40), rng.random_range(1..60));
        let p = random_points(rng, np, 4.0);
        let target: Vec<[f32; 3]> = random_points(rng, nt, 4.0)
            .iter()
            .map(|v| v.map(|x| x as f32))
            .collect();
        let cloud = PointCloud::from_points(&target);
        let tgt: Vec<[f64; 3]> = target.iter().map(|v| v.map(f64::from)).collect();
        for mode in [DistanceMode::Squared, DistanceMode::Euclidean] {
            let got = nearest_neighbor_loss(&Tensor::from_points(&p), &cloud, mode).map_err(|e| e.to_string())?;
            let n = p.len() as f64;
            let mut value = 0.0;
            for (i, pp) in p.iter().enumerate() {
                let nn = tgt
                    .iter()
                    .copied()
                    .min_by(|a, b| dist(*pp, *a).total_cmp(&dist(*pp, *b)))
                    .expect("non-empty");
                let d = dist(*pp, nn);
                let (v, scale) = match mode {
                    DistanceMode::Squared => (d * d, 2.0 / n),
                    DistanceMode::Euclidean => (d, if d > 0.0 { 1.0 / (d * n) } else { 0.0 }),
                };
                value += v / n;
                for k in 0..3 {
                    let want = (pp[k] - nn[k]) * scale;
                    let g = got.grad.data()[3 * i + k];
                    if (g - want).abs() > 1e-9 * want.abs().max(1.0) {
                        return Err(format!("nn loss instance {t} ({mode:?}): grad row {i} got {g}, want {want}"));
                    }
                }
            }
            if !rel_close(got.value, value, 1e-9) {
                return Err(format!("nn loss instance {t} ({mode:?}): got {}, want {value}", got.value));
            }
        }
    }
    Ok(())
}

fn cycle_loss_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for t in 0..INSTANCES {
        let n = rng.random_range(1..40);
        let a = random_points(rng, n, 4.0);
        let r = random_points(rng, n, 4.0);
        for mode in [DistanceMode::Squared, DistanceMode::Euclidean] {
            let got = cycle_consistency_loss(&Tensor::from_points(&a), &Tensor::from_points(&r), mode)
                .map_err(|e| e.to_string())?;
            let nf = n as f64;
            let mut value = 0.0;
            for i in 0..n {
                let d = dist(a[i], r[i]);
                let (v, scale) = match mode {
                    DistanceMode::Squared => (d * d, 2.0 / nf),
                    DistanceMode::Euclidean => (d, if d > 0.0 { 1.0 / (d * nf) } else { 0.0 }),
                };
                value += v / nf;
                for k in 0..3 {
                    let want = (r[i][k] - a[i][k]) * scale;
                    let g = got.grad.data()[3 * i + k];
                    if (g - want).abs() > 1e-9 * want.abs().max(1.0) {
                        return Err(format!("cycle loss instance {t} ({mode:?}): grad row {i} got {g}, want {want}"));
                    }
                }
            }
            if !rel_close(got.value, value, 1e-9) {
                return Err(format!("cycle loss instance {t} ({mode:?}): got {}, want {value}", got.value));
            }
        }
    }
    Ok(())
}

fn random_box(rng: &mut ChaCha8Rng, spread: f64) -> Box3 {
    Box3::new(
        [rng.random_range(-spread..spread), rng.random_range(-spread..spread), 0.0],
        [rng.random_range(0.5..3.0), rng.random_range(0.5..5.0), 1.5],
        rng.random_range(-3.2..3.2),
        0,
    )
    .expect("valid box")
}

fn inside(b: &Box3, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    // Length along the heading, width across it.
    let along = dx * c + dy * s;
    let across = -dx * s + dy * c;
    along.abs() <= b.size[1] / 2.0 && across.abs() <= b.size[0] / 2.0
}

/// IoU by jittered-grid Monte-Carlo sampling of the joint bounding square.
fn mc_iou(a: &Box3, b: &Box3, rng: &mut ChaCha8Rng, side: usize) -> f64 {
    let r = |x: &Box3| 0.5 * x.size[0].hypot(x.size[1]);
    let lo_x = (a.center[0] - r(a)).min(b.center[0] - r(b));
    let hi_x = (a.center[0] + r(a)).max(b.center[0] + r(b));
    let lo_y = (a.center[1] - r(a)).min(b.center[1] - r(b));
    let hi_y = (a.center[1] + r(a)).max(b.center[1] + r(b));
    let (cx, cy) = ((hi_x - lo_x) / side as f64, (hi_y - lo_y) / side as f64);
    let (mut inter, mut uni) = (0u64, 0u64);
    for i in 0..side {
        for j in 0..side {
            let x = lo_x + (i as f64 + rng.random::<f64>()) * cx;
            let y = lo_y + (j as f64 + rng.random::<f64>()) * cy;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += u64::from(ia && ib);
            uni += u64::from(ia || ib);
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

fn iou_oracle(rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut worst = 0.0f64;
    for t in 0..INSTANCES {
        let a = random_box(rng, 1.5);
        let b = if t % 20 == 0 { a.clone() } else { random_box(rng, 1.5) };
        let got = bev_iou(&a, &b);
        let want = mc_iou(&a, &b, rng, 400);
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 0.01 {
            return Err(format!("bev_iou instance {t}: got {got}, Monte-Carlo {want}"));
        }
    }
    Ok(worst)
}

/// Axis-aligned IoU; the AP oracle only uses yaw 0 boxes so matching does
/// not depend on the polygon clipper.
fn aligned_iou(a: &Box3, b: &Box3) -> f64 {
    let ov = |ca: f64, sa: f64, cb: f64, sb: f64| {
        ((ca + sa / 2.0).min(cb + sb / 2.0) - (ca - sa / 2.0).max(cb - sb / 2.0)).max(0.0)
    };
    // Yaw 0: length along x, width along y.
    let ix = ov(a.center[0], a.size[1], b.center[0], b.size[1]);
    let iy = ov(a.center[1], a.size[0], b.center[1], b.size[0]);
    let inter = ix * iy;
    inter / (a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter)
}

/// AP over every score cutoff, each cutoff matched from scratch.
fn exhaustive_ap(dets: &[Vec<Box3>], gts: &[Vec<Box3>], thr: f64) -> Option<f64> {
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut all: Vec<(usize, &Box3)> = dets.iter().enumerate().flat_map(|(f, d)| d.iter().map(move |b| (f, b))).collect();
    all.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut points = Vec::new();
    for cut in 1..=all.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        for &(f, d) in &all[..cut] {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[f].iter().enumerate() {
                let o = aligned_iou(d, g);
                if !used[f][j] && o >= thr && best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                used[f][j] = true;
                tp += 1;
            }
        }
        points.push((tp, cut));
    }
    let mut total = 0.0;
    for level in 1..=N_RECALL {
        let best = points
            .iter()
            .filter(|(tp, _)| tp * N_RECALL >= level * num_gt)
            .map(|&(tp, cut)| tp as f64 / cut as f64)
            .fold(0.0, f64::max);
        total += best;
    }
    Some(total / N_RECALL as f64)
}

fn aligned_box(rng: &mut ChaCha8Rng, cx: f64, cy: f64, score: f64) -> Box3 {
    Box3::scored(
        [cx, cy, 0.0],
        [rng.random_range(1.5..2.0), rng.random_range(3.5..4.5), 1.5],
        0.0,
        0,
        score,
    )
    .expect("valid box")
}

fn ap_oracle(rng: &mut ChaCha8Rng) -> Result<(), String> {
    for t in 0..INSTANCES {
        let frames = rng.random_range(1..=3);
        let mut gts = vec![Vec::new(); frames];
        let mut dets = vec![Vec::new(); frames];
        let n_gt = rng.random_range(0..=5);
        let n_det = rng.random_range(0..=5);
        for _ in 0..n_gt {
            let f = rng.random_range(0..frames);
            let (x, y) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let b = aligned_box(rng, x, y, 1.0);
            gts[f].push(b);
        }
        for _ in 0..n_det {
            let f = rng.random_range(0..frames);
            let score = rng.random_range(0.0..1.0);
            // Mostly near a ground truth so matches and near-misses both occur.
            let b = match gts[f].first().filter(|_| rng.random_bool(0.8)) {
                Some(_) => {
                    let g = gts[f][rng.random_range(0..gts[f].len())].clone();
                    let x = g.center[0] + rng.random_range(-0.8..0.8);
                    let y = g.center[1] + rng.random_range(-0.5..0.5);
                    aligned_box(rng, x, y, score)
                }
                None => {
                    let (x, y) = (rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
                    aligned_box(rng, x, y, score)
                }
            };
            dets[f].push(b);
        }
        let thr = [0.3, 0.5, 0.7][t % 3];
        let got = average_precision(&dets, &gts, thr, N_RECALL).map_err(|e| e.to_string())?;
        match exhaustive_ap(&dets, &gts, thr) {
            None if !got.defined => {}
            Some(want) if got.defined && (got.ap - want).abs() <= 1e-9 => {}
            want => return Err(format!("AP instance {t}: got {:?} (defined {}), want {want:?}", got.ap, got.defined)),
        }
    }
    Ok(())
}

fn oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut parts = Vec::new();
    let mut ok = true;
    let mut run = |name: &str, r: Result<String, String>| match r {
        Ok(s) => parts.push(format!("{name} ok{s}")),
        Err(e) => {
            ok = false;
            parts.push(format!("{name} FAILED ({e})"));
        }
    };
    run("knn", knn_oracle(&mut rng).map(|_| String::new()));
    run("nn_loss", nn_loss_oracle(&mut rng).map(|_| String::new()));
    run("cycle_loss", cycle_loss_oracle(&mut rng).map(|_| String::new()));
    run("bev_iou", iou_oracle(&mut rng).map(|w| format!(" (max |Δ| {w:.4} vs MC, tol 0.01)")));
    run("AP", ap_oracle(&mut rng).map(|_| " (tol 1e-9)".into()));
    Outcome::gate(ok, format!("{INSTANCES} instances each: {}", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 3. Self-supervised flow

struct FlowRun {
    checkpoint: PathBuf,
    steps: usize,
    secs: f64,
}

fn run_flow_pretraining(dir: &Path) -> flowdet::Result<FlowRun> {
    let mut run = preset("desk.toml");
    run.stage = Stage::PretrainFlow;
    run.out_dir = dir.join("flow");
    let start = Instant::now();
    let out = pretrain_flow(&run)?;
    Ok(FlowRun {
        checkpoint: out.best_path,
        steps: run.flow.steps,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn self_supervision(flow: &flowdet::Result<FlowRun>) -> Outcome {
    let flow = match flow {
        Ok(f) => f,
        Err(e) => return Outcome::error(e),
    };
    let run = preset("desk.toml");
    let result = (|| -> flowdet::Result<Outcome> {
        let params = Checkpoint::load(&flow.checkpoint)?.model_params();
        let source = SceneSource::from_config(&run.data)?;
        let (model, zero) = evaluate_flow(&params, &source, &source.test_ids)?;
        let ratio = model.epe_mean / zero.epe_mean;
        Ok(Outcome::gate(
            ratio <= 0.5 && flow.steps <= 2000 && flow.secs < 900.0,
            format!(
                "{} steps in {:.0}s; held-out EPE {:.4} m vs zero-flow {:.4} m, ratio {ratio:.3} (need <= 0.5); dynamic EPE {:.3} vs {:.3}",
                flow.steps, flow.secs, model.epe_mean, zero.epe_mean, model.epe_dynamic, zero.epe_dynamic
            ),
        ))
    })();
    result.unwrap_or_else(Outcome::error)
}

// ---------------------------------------------------------------------------
// 4. Low-data benefit

fn low_data(flow: &flowdet::Result<FlowRun>, dir: &Path) -> Outcome {
    let flow = match flow {
        Ok(f) => f,
        Err(e) => return Outcome::error(e),
    };
    let start = Instant::now();
    let result = (|| -> flowdet::Result<Outcome> {
        let mut lines = Vec::new();
        let mut gaps = Vec::new();
        let mut ok = true;
        for (fraction, name) in [(0.05, "lowlabel_005.toml"), (0.20, "lowlabel_020.toml")] {
            let mut means = [0.0f64; 2];
            for seed in 0..3u64 {
                for (arm, init) in [Some(flow.checkpoint.as_path()), None].into_iter().enumerate() {
                    let mut run = preset(name);
                    run.seed = seed;
                    run.out_dir = dir.join(format!("det_{name}_{seed}_{arm}"));
                    let out = train_detect(&run, init)?;
                    let source = SceneSource::from_config(&run.data)?;
                    let report = evaluate_detection(&out.best, &source, &source.test_ids, &run.detect.eval)?;
                    means[arm] += report_map(&report) / 3.0;
                }
            }
            let gap = means[0] - means[1];
            ok &= gap > 0.0;
            gaps.push(gap);
            lines.push(format!(
                "fraction {fraction}: flow-init {:.4} vs random {:.4} (gap {gap:+.4})",
                means[0], means[1]
            ));
        }
        let secs = start.elapsed().as_secs_f64() + flow.secs;
        lines.push(format!(
            "gap larger at 0.05: {} (directional, not gated)",
            if gaps[0] > gaps[1] { "yes" } else { "no" }
        ));
        lines.push(format!("{secs:.0}s including pre-training"));
        Ok(Outcome::gate(ok && secs < 2700.0, lines.join("; ")))
    })();
    result.unwrap_or_else(Outcome::error)
}

// ---------------------------------------------------------------------------
// 5. Alternation

fn alternation(dir: &Path) -> Outcome {
    let result = (|| -> flowdet::Result<Outcome> {
        let mut smoke = preset("smoke.toml");
        smoke.out_dir = dir.join("smoke");
        let out = alternate_train(&smoke)?;
        let audit = out.audit_passed();
        let mut detail = format!(
            "4-stage smoke run completed; hash audit {} ({} entries)",
            if audit { "passed" } else { "FAILED" },
            out.audit.len()
        );
        if full_mode() {
            let mut wins = 0;
            let mut aps = Vec::new();
            for seed in 0..3u64 {
                let mut run = preset("lowlabel_alternate.toml");
                run.seed = seed;
                run.flow.steps = 300;
                run.flow.val_every = 100;
                run.detect.steps = 500;
                run.detect.val_every = 100;
                run.out_dir = dir.join(format!("alt_{seed}"));
                let out = alternate_train(&run)?;
                let source = SceneSource::from_config(&run.data)?;
                let ap = |p: &ModelParams<f32>| -> flowdet::Result<f64> {
                    Ok(report_map(&evaluate_detection(p, &source, &source.test_ids, &run.detect.eval)?))
                };
                let (ii, iv) = (ap(&out.stages[1].best)?, ap(&out.stages[3].best)?);
                wins += usize::from(iv >= ii);
                aps.push(format!("seed {seed}: (ii) {ii:.4} (iv) {iv:.4}"));
            }
            detail.push_str(&format!(
                "; stage (iv) >= (ii) in {wins}/3 seeds (reported, not gated): {}",
                aps.join(", ")
            ));
        }
        Ok(Outcome::gate(audit, detail))
    })();
    result.unwrap_or_else(Outcome::error)
}

// ---------------------------------------------------------------------------
// 6. Determinism

fn small_run(dir: &Path) -> RunConfig {
    let mut run = RunConfig::default();
    run.model.backbone.n_sample = 256;
    run.model.backbone.n_centroids = 32;
    run.data.train_scenes = 6;
    run.data.val_scenes = 2;
    run.data.test_scenes = 2;
    run.flow.steps = 20;
    run.flow.val_every = 10;
    run.detect.steps = 20;
    run.detect.val_every = 10;
    run.out_dir = dir.to_path_buf();
    run
}

fn max_metric_drift(a: &flowdet::pipeline::MetricsLog, b: &flowdet::pipeline::MetricsLog) -> Option<f64> {
    if a.rows().len() != b.rows().len() {
        return None;
    }
    let mut worst = 0.0f64;
    for (ra, rb) in a.rows().iter().zip(b.rows()) {
        if ra.step != rb.step {
            return None;
        }
        for (x, y) in ra.values.iter().zip(&rb.values) {
            if x.is_nan() != y.is_nan() {
                return None;
            }
            if !x.is_nan() {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Some(worst)
}

fn bitwise_equal(a: &ModelParams<f32>, b: &ModelParams<f32>, ns: Namespace) -> bool {
    a.namespace_hash(ns) == b.namespace_hash(ns)
}

fn determinism(dir: &Path) -> Outcome {
    let result = (|| -> flowdet::Result<Outcome> {
        let a = pretrain_flow(&small_run(&dir.join("a")))?;
        let b = pretrain_flow(&small_run(&dir.join("b")))?;
        let flow_drift = max_metric_drift(&a.log, &b.log);
        let da = train_detect(&small_run(&dir.join("a")), Some(&a.best_path))?;
        let db = train_detect(&small_run(&dir.join("b")), Some(&b.best_path))?;
        let det_drift = max_metric_drift(&da.log, &db.log);
        let metrics_ok = flow_drift.is_some_and(|d| d <= 1e-5) && det_drift.is_some_and(|d| d <= 1e-5);

        // Checkpoint round trip and filtered load.
        let path = dir.join("roundtrip.fsck");
        Checkpoint::new(&da.best, 7, "det").save(&path)?;
        let loaded = Checkpoint::load(&path)?.model_params();
        let all = [Namespace::Backbone, Namespace::Flow, Namespace::Detect];
        let roundtrip = all.iter().all(|&ns| bitwise_equal(&loaded, &da.best, ns));

        let fresh = fresh_params(&small_run(dir))?;
        let mut filtered = fresh.clone();
        apply_checkpoint(&Checkpoint::load(&path)?, &mut filtered, &[Namespace::Backbone])?;
        let filter_ok = bitwise_equal(&filtered, &da.best, Namespace::Backbone)
            && bitwise_equal(&filtered, &fresh, Namespace::Flow)
            && bitwise_equal(&filtered, &fresh, Namespace::Detect);

        Ok(Outcome::gate(
            metrics_ok && roundtrip && filter_ok,
            format!(
                "metric drift flow {} / detect {} (tol 1e-5); checkpoint round trip {}; filtered load {}",
                flow_drift.map_or("mismatch".into(), |d| format!("{d:.1e}")),
                det_drift.map_or("mismatch".into(), |d| format!("{d:.1e}")),
                if roundtrip { "bitwise" } else { "DIFFERS" },
                if filter_ok { "exact" } else { "WRONG" },
            ),
        ))
    })();
    result.unwrap_or_else(Outcome::error)
}

// ---------------------------------------------------------------------------
// 7. Zero cases

fn zero_cases() -> Outcome {
    let result = (|| -> flowdet::Result<Outcome> {
        let run = RunConfig::default();
        let dataset = SyntheticDataset::new(run.data.generator.clone(), run.data.seed)?;
        let scene = dataset.scene(0)?;

        // Static scene, zeroed flow output layer.
        let mut params = ModelParams::<f32>::init(run.model.clone(), 5)?;
        params.zero_flow_output();
        let pair = PairGeometry::build(&scene.frame_t, &scene.frame_t, &params.config, 11)?;
        let flow = pair_forward_flow(&pair, &params)?;
        let flow_zero = flow.data().iter().all(|&v| v == 0.0);
        let cycle = flow_loss(&pair, &params, DistanceMode::Squared)?.report.cycle_loss;

        // Perfect detections.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for id in 0..10 {
            let s = dataset.scene(id)?;
            let d: Vec<Box3> = s
                .gt_boxes_t
                .iter()
                .map(|b| Box3 { score: rng.random_range(0.1..1.0), ..b.clone() })
                .collect();
            gts.push(s.gt_boxes_t);
            dets.push(d);
        }
        let ap = average_precision(&dets, &gts, 0.7, N_RECALL)?.ap;

        // Encode/decode round trip; one box per quadrant keeps peaks apart.
        let cfg = DetectHeadConfig::default();
        let mut worst = 0.0f64;
        let mut recovered = true;
        for _ in 0..200 {
            let boxes: Vec<Box3> = [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)]
                .iter()
                .map(|&(sx, sy)| {
                    Box3::new(
                        [sx * rng.random_range(3.0..15.0), sy * rng.random_range(3.0..15.0), rng.random_range(0.5..1.0)],
                        [rng.random_range(1.5..2.2), rng.random_range(3.0..5.0), rng.random_range(1.3..1.8)],
                        rng.random_range(-3.1..3.1),
                        0,
                    )
                    .expect("valid box")
                })
                .collect();
            let t = make_detection_targets::<f64>(&boxes, &cfg)?;
            let decoded = decode_detections(&t.heatmap, &t.reg, &cfg, 0.99, 100)?;
            if decoded.len() != boxes.len() {
                recovered = false;
                continue;
            }
            for b in &boxes {
                let Some(d) = decoded.iter().min_by(|x, y| {
                    let dx = (x.center[0] - b.center[0]).hypot(x.center[1] - b.center[1]);
                    let dy = (y.center[0] - b.center[0]).hypot(y.center[1] - b.center[1]);
                    dx.total_cmp(&dy)
                }) else {
                    recovered = false;
                    continue;
                };
                for k in 0..3 {
                    worst = worst.max((d.center[k] - b.center[k]).abs());
                    worst = worst.max((d.size[k] - b.size[k]).abs());
                }
                worst = worst.max(normalize_yaw(d.yaw - half_turn_yaw(b.yaw)).abs());
            }
        }

        Ok(Outcome::gate(
            flow_zero && cycle == 0.0 && ap == 1.0 && recovered && worst <= 1e-4,
            format!(
                "static scene flow {} and cycle loss {cycle}; perfect-detection AP {ap}; encode/decode max error {worst:.1e} (yaw modulo a half turn, tol 1e-4)",
                if flow_zero { "≡ 0" } else { "NONZERO" }
            ),
        ))
    })();
    result.unwrap_or_else(Outcome::error)
}

// ---------------------------------------------------------------------------
// 8. KITTI format

fn kitti(dir: &Path) -> Outcome {
    let result = (|| -> flowdet::Result<Outcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut ok = true;
        for t in 0..100 {
            let n = rng.random_range(0..500);
            let xyz: Vec<f32> = (0..3 * n).map(|_| rng.random_range(-80.0..80.0)).collect();
            let refl: Vec<f32> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let cloud = PointCloud::new(Tensor::matrix(n, 3, xyz)?)?.with_reflectance(refl)?;
            let path = dir.join(format!("{t}.bin"));
            write_kitti_bin(&path, &cloud)?;
            let size = std::fs::metadata(&path)?.len() as usize;
            let back = load_kitti_bin(&path)?;
            ok &= back.len() == size / 16 && size == 16 * n;
            ok &= back.xyz == cloud.xyz && back.reflectance == cloud.reflectance;

            // Reader first: arbitrary finite records survive read then write.
            let bytes: Vec<u8> = (0..4 * rng.random_range(0..200usize))
                .flat_map(|_| rng.random_range(-1e4f32..1e4).to_le_bytes())
                .collect();
            let parsed = parse_kitti_bin(&bytes, &path)?;
            ok &= parsed.len() == bytes.len() / 16;
            write_kitti_bin(&path, &parsed)?;
            ok &= std::fs::read(&path)? == bytes;
        }
        Ok(Outcome::gate(ok, "100 random files: point count == filesize/16; writer∘reader and reader∘writer are identities"))
    })();
    result.unwrap_or_else(Outcome::error)
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let full = full_mode();
    let mut criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = Vec::new();
    criteria.push(("gradient correctness", Box::new(gradients)));
    criteria.push(("oracle equivalence", Box::new(oracles)));

    let flow_dir = dir.path().to_path_buf();
    let flow_run: std::rc::Rc<std::cell::OnceCell<flowdet::Result<FlowRun>>> = Default::default();
    {
        let (fr, d) = (flow_run.clone(), flow_dir.clone());
        criteria.push((
            "self-supervised flow",
            Box::new(move || {
                if !full {
                    return Outcome::skip("training experiment; run with FLOWDET_ACCEPTANCE=full");
                }
                self_supervision(fr.get_or_init(|| run_flow_pretraining(&d)))
            }),
        ));
    }
    {
        let (fr, d) = (flow_run.clone(), flow_dir.clone());
        criteria.push((
            "low-data benefit",
            Box::new(move || {
                if !full {
                    return Outcome::skip("training experiment; run with FLOWDET_ACCEPTANCE=full");
                }
                low_data(fr.get_or_init(|| run_flow_pretraining(&d)), &d)
            }),
        ));
    }
    let d = dir.path().to_path_buf();
    criteria.push(("alternation", Box::new(move || alternation(&d))));
    let d = dir.path().join("det");
    criteria.push(("determinism", Box::new(move || determinism(&d))));
    criteria.push(("zero cases", Box::new(zero_cases)));
    let d = dir.path().join("kitti");
    criteria.push((
        "KITTI format",
        Box::new(move || {
            std::fs::create_dir_all(&d).expect("kitti dir");
            kitti(&d)
        }),
    ));

    let mut failed = 0;
    for (k, (name, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let out = f();
        let tag = match out.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!(
            "{tag} [{}] {name}: {} ({})",
            k + 1,
            out.detail,
            fmt_secs(start.elapsed())
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn fmt_secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}
