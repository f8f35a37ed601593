use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::pointops::knn;

/// Ground-truth displacement below which a point counts as static, meters.
pub const STATIC_THRESHOLD: f64 = 0.05;

/// Mean end-point error: average Euclidean norm of `pred − gt`.
pub fn epe(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.cols() != 3 {
        return Err(Error::shape("epe", pred.shape(), gt.shape()));
    }
    if pred.rows() == 0 {
        return Err(Error::Empty("epe"));
    }
    Ok(point_errors(pred, gt).iter().sum::<f64>() / pred.rows() as f64)
}

fn point_errors(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Vec<f64> {
    (0..pred.rows())
        .map(|i| {
            let (p, g) = (pred.row(i), gt.row(i));
            (0..3)
                .map(|k| (p[k] as f64 - g[k] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Ground-truth flow at arbitrary points, taken from the nearest point of
/// the frame it is defined on.
pub fn gt_flow_at(points: &Tensor<f32>, frame_xyz: &Tensor<f32>, gt_flow: &Tensor<f32>) -> Result<Tensor<f32>> {
    if frame_xyz.rows() != gt_flow.rows() {
        return Err(Error::shape("gt_flow_at", frame_xyz.shape(), gt_flow.shape()));
    }
    let nn = knn(points, frame_xyz, 1)?;
    let idx: Vec<usize> = (0..nn.queries()).map(|q| nn.neighbors(q)[0]).collect();
    gt_flow.gather_rows(&idx)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowEval {
    pub epe_mean: f64,
    /// NaN when no point is static.
    pub epe_static: f64,
    /// NaN when no point moves.
    pub epe_dynamic: f64,
    pub n_static: usize,
    pub n_dynamic: usize,
}

pub fn flow_eval(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<FlowEval> {
    let mean = epe(pred, gt)?;
    let errs = point_errors(pred, gt);
    let (mut s, mut d, mut ns, mut nd) = (0.0, 0.0, 0usize, 0usize);
    for (i, e) in errs.iter().enumerate() {
        let g = gt.row(i);
        let norm = (0..3).map(|k| (g[k] as f64).powi(2)).sum::<f64>().sqrt();
        if norm < STATIC_THRESHOLD {
            s += e;
            ns += 1;
        } else {
            d += e;
            nd += 1;
        }
    }
    let avg = |sum: f64, n: usize| if n == 0 { f64::NAN } else { sum / n as f64 };
    Ok(FlowEval {
        epe_mean: mean,
        epe_static: avg(s, ns),
        epe_dynamic: avg(d, nd),
        n_static: ns,
        n_dynamic: nd,
    })
}

/// Point-weighted mean of per-scene evaluations.
pub fn merge_flow_evals(evals: &[FlowEval]) -> FlowEval {
    let n: usize = evals.iter().map(|e| e.n_static + e.n_dynamic).sum();
    let ns: usize = evals.iter().map(|e| e.n_static).sum();
    let nd: usize = evals.iter().map(|e| e.n_dynamic).sum();
    let wsum = |f: fn(&FlowEval) -> (f64, usize)| {
        evals
            .iter()
            .map(f)
            .filter(|(_, c)| *c > 0)
            .map(|(v, c)| v * c as f64)
            .sum::<f64>()
    };
    let avg = |sum: f64, n: usize| if n == 0 { f64::NAN } else { sum / n as f64 };
    FlowEval {
        epe_mean: avg(wsum(|e| (e.epe_mean, e.n_static + e.n_dynamic)), n),
        epe_static: avg(wsum(|e| (e.epe_static, e.n_static)), ns),
        epe_dynamic: avg(wsum(|e| (e.epe_dynamic, e.n_dynamic)), nd),
        n_static: ns,
        n_dynamic: nd,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scene, GeneratorConfig};

    #[test]
    fn exact_prediction_is_zero() {
        let g = Tensor::from_points(&[[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]);
        assert_eq!(epe(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn three_four_five() {
        let g = Tensor::from_points(&[[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]);
        let p = Tensor::from_points(&[[1.0, 5.0, 7.0], [0.0, 2.0, 4.5]]);
        assert!((epe(&p, &g).unwrap() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::from_points(&[[0.0; 3]]);
        let b = Tensor::from_points(&[[0.0; 3], [0.0; 3]]);
        assert!(epe(&a, &b).is_err());
    }

    #[test]
    fn zero_predictor_on_uniform_speed() {
        let s = 1.25;
        let cfg = GeneratorConfig {
            n_objects: [3, 3],
            speed: [s, s],
            curvature: [0.0, 0.0],
            background_points: 0,
            clutter_objects: [0, 0],
            jitter_sigma: 0.0,
            ..GeneratorConfig::default()
        };
        let scene = generate_scene(&cfg, 4).unwrap();
        let gt = scene.gt_flow.unwrap();
        let zero = Tensor::zeros(gt.shape());
        assert!((epe(&zero, &gt).unwrap() - s).abs() < 1e-5);
    }

    #[test]
    fn ground_truth_predictor_scores_zero_on_synthetic_scenes() {
        for seed in 0..5 {
            let scene = generate_scene(&GeneratorConfig::default(), seed).unwrap();
            let gt = scene.gt_flow.unwrap();
            let idx: Vec<usize> = (0..gt.rows()).step_by(7).collect();
            let pts = scene.frame_t.xyz.gather_rows(&idx).unwrap();
            let at = gt_flow_at(&pts, &scene.frame_t.xyz, &gt).unwrap();
            let e = flow_eval(&at, &gt.gather_rows(&idx).unwrap()).unwrap();
            assert_eq!(e.epe_mean, 0.0);
            assert!(e.n_dynamic > 0 && e.n_static > 0);
        }
    }

    #[test]
    fn merge_weights_by_points() {
        let a = FlowEval { epe_mean: 1.0, epe_static: 1.0, epe_dynamic: f64::NAN, n_static: 1, n_dynamic: 0 };
        let b = FlowEval { epe_mean: 4.0, epe_static: f64::NAN, epe_dynamic: 4.0, n_static: 0, n_dynamic: 3 };
        let m = merge_flow_evals(&[a, b]);
        assert!((m.epe_mean - 13.0 / 4.0).abs() < 1e-12);
        assert_eq!((m.epe_static, m.epe_dynamic), (1.0, 4.0));
    }
}
