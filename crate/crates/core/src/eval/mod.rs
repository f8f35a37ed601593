//! Flow end-point error, box decoding, rotated BEV IoU, NMS and R40 average
//! precision. All detection metrics are BEV metrics.

mod ap;
mod decode;
mod flow;
mod iou;

pub use ap::{
    average_precision, class_average_precision, counts_at, distance_binned_ap, interpolated_ap,
    pr_curve_csv, write_pr_csv, ApResult, Counts, DISTANCE_BINS, N_RECALL,
};
pub use decode::{decode_detections, nms};
pub use flow::{epe, flow_eval, gt_flow_at, merge_flow_evals, FlowEval, STATIC_THRESHOLD};
pub use iou::{bev_iou, clip_polygon, polygon_area};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Box3;
use crate::error::Result;

/// Matching IoU for the car class.
pub const DEFAULT_IOU: f64 = 0.7;

/// Detection decoding and matching settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectEvalConfig {
    pub iou: f64,
    pub peak_threshold: f64,
    pub max_dets: usize,
    pub nms_iou: f64,
    /// Score threshold for the TP/FP/FN counts.
    pub operating_threshold: f64,
}

impl Default for DetectEvalConfig {
    fn default() -> Self {
        Self {
            iou: DEFAULT_IOU,
            peak_threshold: 0.05,
            max_dets: 50,
            nms_iou: 0.5,
            operating_threshold: 0.3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub flow: Option<FlowEval>,
    /// Per class.
    pub ap: Vec<ApResult>,
    pub distance_ap: Vec<(String, ApResult)>,
    pub counts: Option<Counts>,
}

/// BEV AP per class plus distance bins and operating-point counts.
pub fn evaluate_detections(
    dets: &[Vec<Box3>],
    gts: &[Vec<Box3>],
    num_classes: usize,
    cfg: &DetectEvalConfig,
) -> Result<EvalReport> {
    let ap = (0..num_classes)
        .map(|k| class_average_precision(dets, gts, k, cfg.iou, N_RECALL))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        flow: None,
        ap,
        distance_ap: distance_binned_ap(dets, gts, cfg.iou, N_RECALL)?,
        counts: Some(counts_at(dets, gts, cfg.iou, cfg.operating_threshold)?),
    })
}

fn fmt_ap(r: &ApResult) -> String {
    if r.defined {
        format!("{:.2}", 100.0 * r.ap)
    } else {
        "undefined (no ground truth)".into()
    }
}

impl EvalReport {
    /// Human-readable summary block.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        if let Some(f) = &self.flow {
            let _ = writeln!(s, "flow EPE mean     {:.4} m", f.epe_mean);
            let _ = writeln!(s, "flow EPE static   {:.4} m ({} pts)", f.epe_static, f.n_static);
            let _ = writeln!(s, "flow EPE dynamic  {:.4} m ({} pts)", f.epe_dynamic, f.n_dynamic);
        }
        for (k, r) in self.ap.iter().enumerate() {
            let _ = writeln!(s, "BEV AP_R40 class {k}: {} ({} gt, {} det)", fmt_ap(r), r.num_gt, r.num_det);
        }
        for (name, r) in &self.distance_ap {
            let _ = writeln!(s, "BEV AP_R40 {name:<4}: {}", fmt_ap(r));
        }
        if let Some(c) = &self.counts {
            let _ = writeln!(s, "TP {} FP {} FN {}", c.tp, c.fp, c.fn_);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_mentions_bev() {
        let gts = vec![vec![Box3::new([0.0, 0.0, 0.7], [1.8, 4.0, 1.5], 0.0, 0).unwrap()]];
        let r = evaluate_detections(&gts, &gts, 1, &DetectEvalConfig::default()).unwrap();
        assert_eq!(r.ap[0].ap, 1.0);
        let s = r.summary();
        assert!(s.contains("BEV AP_R40 class 0: 100.00"));
        assert!(s.contains("TP 1 FP 0 FN 0"));
    }
}
