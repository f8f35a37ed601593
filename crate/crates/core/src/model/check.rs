//! Finite-difference checks of the composed model on a tiny scene.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{col2im3x3, im2col3x3};
use super::{
    detection_loss_and_grads, flow_loss_and_grads, BackboneGeometry, ModelConfig, ModelParams,
    PairGeometry,
};
use crate::data::Box3;
use crate::error::Result;
use crate::losses::{
    cycle_consistency_loss, focal_loss, huber_loss, make_detection_targets,
    nearest_neighbor_loss, DetectionLossWeights, DistanceMode, FOCAL_ALPHA, FOCAL_BETA,
    HUBER_DELTA,
};
use crate::numeric::{
    grad_check, linear_backward, linear_forward, max_pool_rows, max_pool_rows_backward,
    relu_backward, relu_forward, segment_max_pool, segment_max_pool_backward, GradCheckOptions,
    GradCheckReport, MlpSpec, Tensor,
};
use crate::pointops::{
    ball_query, gather_groups, gather_groups_backward, interpolate_features, InterpWeights,
    PointCloud,
};

/// Model small enough that every parameter can be probed in seconds.
pub fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.backbone.n_sample = 32;
    c.backbone.n_centroids = 8;
    c.backbone.radius = 1.2;
    c.backbone.max_k = 6;
    c.backbone.mlp = MlpSpec::relu(&[8, 8]);
    c.flow.embed_k = 4;
    c.flow.embed_mlp = MlpSpec::relu(&[8, 8]);
    c.flow.conv_radius = 3.0;
    c.flow.conv_max_k = 4;
    c.flow.conv_mlp = MlpSpec::relu(&[8]);
    c.flow.upconv_mlp = MlpSpec::relu(&[8, 8]);
    c.flow.fc = MlpSpec::linear_head(&[8, 3]);
    c.detect.bev_extent = 4.0;
    c.detect.bev_cells = 8;
    c.detect.conv_channels = 4;
    c
}

/// 32 random points, a moved copy and one box.
pub fn tiny_scene(seed: u64) -> (PointCloud, PointCloud, Vec<Box3>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f32; 3]> = (0..32)
        .map(|_| {
            [
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.0..1.5),
            ]
        })
        .collect();
    let moved: Vec<[f32; 3]> = pts
        .iter()
        .map(|p| {
            [
                p[0] + 0.3 + rng.random_range(-0.05..0.05),
                p[1] - 0.2 + rng.random_range(-0.05..0.05),
                p[2],
            ]
        })
        .collect();
    let b = Box3::new([0.7, -0.4, 0.7], [1.6, 3.0, 1.4], 0.4, 0).expect("valid box");
    (PointCloud::from_points(&pts), PointCloud::from_points(&moved), vec![b])
}

/// Moves every bias off zero. At initialization biases are zero, so rows
/// with zero input sit exactly on a ReLU kink where central differences are
/// meaningless.
fn jitter_biases(p: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for q in p.store.iter_mut().filter(|q| q.name.ends_with(".b")) {
        for v in q.value.data_mut() {
            *v += rng.random_range(0.02..0.1) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
}

fn named_values(p: &ModelParams<f64>, prefixes: &[&str]) -> Vec<(String, Tensor<f64>)> {
    p.store
        .iter()
        .filter(|q| prefixes.iter().any(|pre| q.name.starts_with(pre)))
        .map(|q| (q.name.clone(), q.value.clone()))
        .collect()
}

fn with_values(base: &ModelParams<f64>, names: &[String], values: &[Tensor<f64>]) -> ModelParams<f64> {
    let mut p = base.clone();
    for (n, v) in names.iter().zip(values) {
        p.store.get_mut(n).expect("known parameter").value = v.clone();
    }
    p
}

/// Central differences of the flow loss against the analytic gradient of
/// every `g.*` and `s.*` parameter.
pub fn check_flow_gradients(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    let (a, b, _) = tiny_scene(seed);
    let mut params = ModelParams::<f64>::init(cfg.clone(), seed)?;
    jitter_biases(&mut params, seed);
    let pair = PairGeometry::<f64>::build(&a, &b, &cfg, seed)?;
    params.store.zero_grads();
    flow_loss_and_grads(&pair, &mut params, DistanceMode::Squared)?;

    let inputs = named_values(&params, &["g.", "s."]);
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let analytic: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| params.store.grad(n).cloned())
        .collect::<Result<_>>()?;
    let loss = |vals: &[Tensor<f64>]| {
        let mut p = with_values(&params, &names, vals);
        flow_loss_and_grads(&pair, &mut p, DistanceMode::Squared)
            .map(|o| o.report.total)
            .unwrap_or(f64::NAN)
    };
    Ok(grad_check(&inputs, &analytic, loss, opts))
}

/// Central differences of the detection loss for every `g.*` and `h.*`
/// parameter.
pub fn check_detect_gradients(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    let (a, _, boxes) = tiny_scene(seed);
    let mut params = ModelParams::<f64>::init(cfg.clone(), seed)?;
    jitter_biases(&mut params, seed);
    let geom = BackboneGeometry::<f64>::build(&a, &cfg.backbone, seed)?;
    let targets = make_detection_targets::<f64>(&boxes, &cfg.detect)?;
    let w = DetectionLossWeights::default();
    params.store.zero_grads();
    detection_loss_and_grads(&geom, &targets, &mut params, w)?;

    let inputs = named_values(&params, &["g.", "h."]);
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let analytic: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| params.store.grad(n).cloned())
        .collect::<Result<_>>()?;
    let loss = |vals: &[Tensor<f64>]| {
        let mut p = with_values(&params, &names, vals);
        detection_loss_and_grads(&geom, &targets, &mut p, w)
            .map(|o| o.report.total)
            .unwrap_or(f64::NAN)
    };
    Ok(grad_check(&inputs, &analytic, loss, opts))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches data")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Values bounded away from zero so ReLU kinks stay out of reach.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, 0.1, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Random points on a coarse jittered grid: distinct pairwise distances keep
/// neighbor sets and max-pool winners stable under small perturbations.
fn spread_points(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let pts: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            [
                (i % 4) as f64 + rng.random_range(-0.2..0.2),
                (i / 4 % 4) as f64 + rng.random_range(-0.2..0.2),
                (i / 16) as f64 + rng.random_range(-0.2..0.2),
            ]
        })
        .collect();
    Tensor::from_points(&pts)
}

fn check_linear(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let x = rand_tensor(rng, &[5, 4], -1.0, 1.0);
    let w = rand_tensor(rng, &[4, 3], -1.0, 1.0);
    let b = rand_tensor(rng, &[3], -1.0, 1.0);
    let r = rand_tensor(rng, &[5, 3], -1.0, 1.0);
    let g = linear_backward(&x, &w, &r)?;
    Ok(grad_check(
        &[("x".into(), x), ("w".into(), w), ("b".into(), b)],
        &[g.dx, g.dw, g.db],
        |t| linear_forward(&t[0], &t[1], &t[2]).map(|y| dot(&y, &r)).unwrap_or(f64::NAN),
        opts,
    ))
}

fn check_relu(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let x = off_kink(rng, &[6, 4]);
    let r = rand_tensor(rng, &[6, 4], -1.0, 1.0);
    let dx = relu_backward(&x, &r)?;
    Ok(grad_check(&[("x".into(), x)], &[dx], |t| dot(&relu_forward(&t[0]), &r), opts))
}

fn check_max_pool(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    // Rows far apart per column so the winner cannot change.
    let mut x = rand_tensor(rng, &[5, 3], 0.0, 0.1);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += ((i * 7) % 5) as f64;
    }
    let r = rand_tensor(rng, &[3], -1.0, 1.0);
    let (_, arg) = max_pool_rows(&x)?;
    let dx = max_pool_rows_backward(&arg, 5, &r)?;
    let offsets = vec![0, 2, 5];
    let rs = rand_tensor(rng, &[2, 3], -1.0, 1.0);
    let (_, sarg) = segment_max_pool(&x, &offsets)?;
    let dsx = segment_max_pool_backward(&sarg, 5, &rs)?;
    let mut report = grad_check(
        &[("max_pool_rows.x".into(), x.clone())],
        &[dx],
        |t| max_pool_rows(&t[0]).map(|(y, _)| dot(&y, &r)).unwrap_or(f64::NAN),
        opts,
    );
    report.merge(grad_check(
        &[("segment_max_pool.x".into(), x)],
        &[dsx],
        |t| segment_max_pool(&t[0], &offsets).map(|(y, _)| dot(&y, &rs)).unwrap_or(f64::NAN),
        opts,
    ));
    Ok(report)
}

fn check_grouping(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let reference = spread_points(rng, 12);
    let query = spread_points(rng, 5);
    let nb = ball_query(&query, &reference, 1.5, 4)?;
    let qf = rand_tensor(rng, &[5, 2], -1.0, 1.0);
    let rf = rand_tensor(rng, &[12, 3], -1.0, 1.0);
    let rows = gather_groups(&nb, Some(&qf), &rf)?;
    let r = rand_tensor(rng, rows.rows.shape(), -1.0, 1.0);
    let (dq, dr) = gather_groups_backward(&nb, &r, Some((5, 2)), (12, 3))?;
    let mut report = grad_check(
        &[("gather_groups.query".into(), qf), ("gather_groups.ref".into(), rf.clone())],
        &[dq.expect("query gradient requested"), dr],
        |t| gather_groups(&nb, Some(&t[0]), &t[1]).map(|g| dot(&g.rows, &r)).unwrap_or(f64::NAN),
        opts,
    );

    let interp = InterpWeights::build(&query, &reference)?;
    let ri = rand_tensor(rng, &[5, 3], -1.0, 1.0);
    let ds = interp.backward(&ri)?;
    report.merge(grad_check(
        &[("interpolate_features.source".into(), rf)],
        &[ds],
        |t| {
            interpolate_features(&query, &reference, &t[0])
                .map(|y| dot(&y, &ri))
                .unwrap_or(f64::NAN)
        },
        opts,
    ));
    Ok(report)
}

fn check_conv(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let side = 4;
    let x = rand_tensor(rng, &[side * side, 2], -1.0, 1.0);
    let w = rand_tensor(rng, &[18, 3], -1.0, 1.0);
    let b = rand_tensor(rng, &[3], -1.0, 1.0);
    let r = rand_tensor(rng, &[side * side, 3], -1.0, 1.0);
    let col = im2col3x3(&x, side)?;
    let g = linear_backward(&col, &w, &r)?;
    let dx = col2im3x3(&g.dx, side)?;
    Ok(grad_check(
        &[("conv3x3.x".into(), x), ("conv3x3.w".into(), w), ("conv3x3.b".into(), b)],
        &[dx, g.dw, g.db],
        |t| {
            im2col3x3(&t[0], side)
                .and_then(|c| linear_forward(&c, &t[1], &t[2]))
                .map(|y| dot(&y, &r))
                .unwrap_or(f64::NAN)
        },
        opts,
    ))
}

fn check_flow_losses(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let target: Vec<[f32; 3]> = spread_points(rng, 40)
        .data()
        .chunks_exact(3)
        .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect();
    let target = PointCloud::from_points(&target);
    let p = spread_points(rng, 16);
    let a = rand_tensor(rng, &[10, 3], -2.0, 2.0);
    let b = rand_tensor(rng, &[10, 3], -2.0, 2.0);
    let mut report = GradCheckReport { rtol: opts.rtol, entries: Vec::new() };
    for mode in [DistanceMode::Squared, DistanceMode::Euclidean] {
        let tag = match mode {
            DistanceMode::Squared => "squared",
            DistanceMode::Euclidean => "euclidean",
        };
        let l = nearest_neighbor_loss(&p, &target, mode)?;
        report.merge(grad_check(
            &[(format!("nearest_neighbor_loss.{tag}"), p.clone())],
            &[l.grad],
            |t| nearest_neighbor_loss(&t[0], &target, mode).map(|l| l.value).unwrap_or(f64::NAN),
            opts,
        ));
        let l = cycle_consistency_loss(&a, &b, mode)?;
        report.merge(grad_check(
            &[(format!("cycle_consistency_loss.{tag}"), b.clone())],
            &[l.grad],
            |t| cycle_consistency_loss(&a, &t[0], mode).map(|l| l.value).unwrap_or(f64::NAN),
            opts,
        ));
    }
    Ok(report)
}

fn check_detection_losses(rng: &mut ChaCha8Rng, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let n = 30;
    let p = rand_tensor(rng, &[n], 0.05, 0.95);
    let t = Tensor::vector(
        (0..n)
            .map(|i| if i % 7 == 0 { 1.0 } else { rng.random_range(0.0..0.9) })
            .collect(),
    );
    let l = focal_loss(&p, &t, FOCAL_ALPHA, FOCAL_BETA)?;
    let mut report = grad_check(
        &[("focal_loss".into(), p)],
        &[l.grad],
        |x| focal_loss(&x[0], &t, FOCAL_ALPHA, FOCAL_BETA).map(|l| l.value).unwrap_or(f64::NAN),
        opts,
    );

    let mut pred = Vec::new();
    let mut target = Vec::new();
    for _ in 0..40 {
        let tv: f64 = rng.random_range(-1.0..1.0);
        let mag = if rng.random_bool(0.5) { rng.random_range(0.0..0.8) } else { rng.random_range(1.2..3.0) };
        let r = if rng.random_bool(0.5) { mag } else { -mag };
        pred.push(tv + r);
        target.push(tv);
    }
    let pred = Tensor::matrix(5, 8, pred)?;
    let target = Tensor::matrix(5, 8, target)?;
    let mask = [true, false, true, true, false];
    let l = huber_loss(&pred, &target, HUBER_DELTA, &mask)?;
    report.merge(grad_check(
        &[("huber_loss".into(), pred)],
        &[l.grad],
        |x| huber_loss(&x[0], &target, HUBER_DELTA, &mask).map(|l| l.value).unwrap_or(f64::NAN),
        opts,
    ));
    Ok(report)
}

/// One named group of the gradient suite.
#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub report: GradCheckReport,
}

/// Finite-difference checks of every differentiable op at `op_rtol` and of
/// both composed models at `model_rtol`.
pub fn gradient_suite(seed: u64, op_rtol: f64, model_rtol: f64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let op = GradCheckOptions { seed, ..GradCheckOptions::with_rtol(op_rtol) };
    // Random scenes can put a ReLU or max-pool switch within one step of the
    // probe point.
    let model = GradCheckOptions { seed, refinements: 2, ..GradCheckOptions::with_rtol(model_rtol) };
    type OpCheck = fn(&mut ChaCha8Rng, GradCheckOptions) -> Result<GradCheckReport>;
    let ops: [(&'static str, OpCheck); 7] = [
        ("linear", check_linear),
        ("relu", check_relu),
        ("max_pool", check_max_pool),
        ("grouping", check_grouping),
        ("conv3x3", check_conv),
        ("flow_losses", check_flow_losses),
        ("detection_losses", check_detection_losses),
    ];
    let mut out = Vec::with_capacity(ops.len() + 2);
    for (name, f) in ops {
        out.push(SuiteResult { name, report: f(&mut rng, op)? });
    }
    out.push(SuiteResult { name: "flow_model", report: check_flow_gradients(seed, model)? });
    out.push(SuiteResult { name: "detect_model", report: check_detect_gradients(seed, model)? });
    Ok(out)
}
