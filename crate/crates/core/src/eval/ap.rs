use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bev_iou;
use crate::data::Box3;
use crate::error::{Error, Result};

/// Recall sample points of the R40 protocol.
pub const N_RECALL: usize = 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// NaN when `defined` is false.
    pub ap: f64,
    /// False when there is no ground truth at all.
    pub defined: bool,
    /// `(recall, precision)` after each detection in score order.
    pub pr_curve: Vec<(f64, f64)>,
    pub num_gt: usize,
    pub num_det: usize,
}

/// Detection outcomes at a score threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Per-detection true/false-positive flags, in descending score order over
/// all frames. Within a frame each detection takes the unmatched ground
/// truth of the same class with the highest IoU, if it reaches `iou`.
fn match_detections(dets: &[Vec<Box3>], gts: &[Vec<Box3>], iou: f64) -> Result<Vec<(f64, bool)>> {
    if dets.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} detection frames but {} ground-truth frames",
            dets.len(),
            gts.len()
        )));
    }
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, d)| (0..d.len()).map(move |i| (f, i)))
        .collect();
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut out = Vec::with_capacity(order.len());
    for (f, i) in order {
        let d = &dets[f][i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts[f].iter().enumerate() {
            if used[f][j] || g.class_id != d.class_id {
                continue;
            }
            let o = bev_iou(d, g);
            if o >= iou && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[f][j] = true;
        }
        out.push((d.score, best.is_some()));
    }
    Ok(out)
}

/// Interpolated precision at `n_recall` equally spaced recall levels in
/// (0, 1]: the best precision at any recall at or above the level, 0 when
/// none reaches it.
pub fn interpolated_ap(pr_curve: &[(f64, f64)], n_recall: usize) -> f64 {
    let mut total = 0.0;
    for j in 1..=n_recall {
        let r = j as f64 / n_recall as f64;
        total += pr_curve
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
    }
    total / n_recall as f64
}

/// Bird's-eye-view average precision over a set of frames.
pub fn average_precision(
    dets: &[Vec<Box3>],
    gts: &[Vec<Box3>],
    iou: f64,
    n_recall: usize,
) -> Result<ApResult> {
    if n_recall == 0 {
        return Err(Error::invalid("n_recall must be positive"));
    }
    let flags = match_detections(dets, gts, iou)?;
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    let mut tp = 0usize;
    let mut pr_curve = Vec::with_capacity(flags.len());
    for (k, &(_, hit)) in flags.iter().enumerate() {
        tp += usize::from(hit);
        let recall = if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 };
        pr_curve.push((recall, tp as f64 / (k + 1) as f64));
    }
    let defined = num_gt > 0;
    Ok(ApResult {
        ap: if defined { interpolated_ap(&pr_curve, n_recall) } else { f64::NAN },
        defined,
        pr_curve,
        num_gt,
        num_det: flags.len(),
    })
}

/// AP restricted to one class.
pub fn class_average_precision(
    dets: &[Vec<Box3>],
    gts: &[Vec<Box3>],
    class_id: usize,
    iou: f64,
    n_recall: usize,
) -> Result<ApResult> {
    let keep = |frames: &[Vec<Box3>]| -> Vec<Vec<Box3>> {
        frames
            .iter()
            .map(|f| f.iter().filter(|b| b.class_id == class_id).cloned().collect())
            .collect()
    };
    average_precision(&keep(dets), &keep(gts), iou, n_recall)
}

pub fn counts_at(dets: &[Vec<Box3>], gts: &[Vec<Box3>], iou: f64, score_threshold: f64) -> Result<Counts> {
    let kept: Vec<Vec<Box3>> = dets
        .iter()
        .map(|f| f.iter().filter(|b| b.score >= score_threshold).cloned().collect())
        .collect();
    let flags = match_detections(&kept, gts, iou)?;
    let tp = flags.iter().filter(|f| f.1).count();
    let num_gt: usize = gts.iter().map(Vec::len).sum();
    Ok(Counts {
        tp,
        fp: flags.len() - tp,
        fn_: num_gt - tp,
    })
}

/// Range bins standing in for difficulty tiers: near, mid and far.
pub const DISTANCE_BINS: [(&str, f64, f64); 3] = [
    ("near", 0.0, 10.0),
    ("mid", 10.0, 20.0),
    ("far", 20.0, f64::INFINITY),
];

/// AP per BEV distance bin; a box falls in the bin holding its center range.
pub fn distance_binned_ap(
    dets: &[Vec<Box3>],
    gts: &[Vec<Box3>],
    iou: f64,
    n_recall: usize,
) -> Result<Vec<(String, ApResult)>> {
    DISTANCE_BINS
        .iter()
        .map(|&(name, lo, hi)| {
            let keep = |frames: &[Vec<Box3>]| -> Vec<Vec<Box3>> {
                frames
                    .iter()
                    .map(|f| {
                        f.iter()
                            .filter(|b| (lo..hi).contains(&b.bev_range()))
                            .cloned()
                            .collect()
                    })
                    .collect()
            };
            Ok((name.to_string(), average_precision(&keep(dets), &keep(gts), iou, n_recall)?))
        })
        .collect()
}

pub fn pr_curve_csv(pr_curve: &[(f64, f64)]) -> String {
    let mut s = String::from("rank,recall,precision\n");
    for (i, (r, p)) in pr_curve.iter().enumerate() {
        let _ = writeln!(s, "{},{r:.6},{p:.6}", i + 1);
    }
    s
}

pub fn write_pr_csv(path: impl AsRef<Path>, pr_curve: &[(f64, f64)]) -> Result<()> {
    fs::write(path, pr_curve_csv(pr_curve))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn car(x: f64, y: f64, score: f64) -> Box3 {
        Box3::scored([x, y, 0.75], [1.8, 4.0, 1.5], 0.0, 0, score).unwrap()
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![vec![car(0.0, 0.0, 1.0), car(8.0, 3.0, 1.0)], vec![car(-5.0, 2.0, 1.0)]];
        let mut dets = gts.clone();
        dets[0][0].score = 0.9;
        dets[0][1].score = 0.7;
        dets[1][0].score = 0.8;
        let r = average_precision(&dets, &gts, 0.7, N_RECALL).unwrap();
        assert_eq!(r.ap, 1.0);
        assert!(r.defined);
    }

    #[test]
    fn only_lower_scored_detection_matches() {
        let gts = vec![vec![car(0.0, 0.0, 1.0)]];
        let dets = vec![vec![car(10.0, 0.0, 0.9), car(0.0, 0.0, 0.5)]];
        let r = average_precision(&dets, &gts, 0.7, N_RECALL).unwrap();
        assert_eq!(r.pr_curve, vec![(0.0, 0.0), (1.0, 0.5)]);
        assert!((r.ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_ground_truth_is_flagged() {
        let r = average_precision(&[vec![car(0.0, 0.0, 0.4)]], &[vec![]], 0.7, N_RECALL).unwrap();
        assert!(!r.defined && r.ap.is_nan());
    }

    #[test]
    fn duplicates_count_once() {
        let gts = vec![vec![car(0.0, 0.0, 1.0)]];
        let dets = vec![vec![car(0.0, 0.0, 0.9), car(0.05, 0.0, 0.8)]];
        let c = counts_at(&dets, &gts, 0.7, 0.0).unwrap();
        assert_eq!(c, Counts { tp: 1, fp: 1, fn_: 0 });
    }

    #[test]
    fn frame_count_mismatch() {
        assert!(average_precision(&[vec![]], &[], 0.7, N_RECALL).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = pr_curve_csv(&[(0.5, 1.0), (1.0, 0.5)]);
        assert_eq!(s.lines().count(), 3);
        assert!(s.starts_with("rank,recall,precision\n1,0.500000,1.000000"));
    }

    #[test]
    fn distance_bins_split_boxes() {
        let gts = vec![vec![car(3.0, 0.0, 1.0), car(15.0, 0.0, 1.0), car(0.0, 25.0, 1.0)]];
        let dets = vec![vec![car(3.0, 0.0, 0.9)]];
        let bins = distance_binned_ap(&dets, &gts, 0.7, N_RECALL).unwrap();
        assert_eq!(bins[0].1.ap, 1.0);
        assert_eq!(bins[1].1.ap, 0.0);
        assert_eq!(bins[2].1.num_gt, 1);
    }

    /// Independent AP: for every cut of the ranked list, rematch that prefix
    /// from scratch by trying every assignment order-consistent with scores,
    /// then take the envelope at each recall level.
    fn oracle_ap(dets: &[Vec<Box3>], gts: &[Vec<Box3>], iou: f64, n: usize) -> f64 {
        let mut all: Vec<(usize, Box3)> = dets
            .iter()
            .enumerate()
            .flat_map(|(f, d)| d.iter().map(move |b| (f, b.clone())))
            .collect();
        all.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let num_gt: usize = gts.iter().map(Vec::len).sum();
        let mut points = Vec::new();
        for k in 1..=all.len() {
            let mut tp = 0;
            for (f, g) in gts.iter().enumerate() {
                let mut taken = vec![false; g.len()];
                for (_, d) in all[..k].iter().filter(|(ff, _)| *ff == f) {
                    let cand = (0..g.len())
                        .filter(|&j| !taken[j] && bev_iou(d, &g[j]) >= iou)
                        .max_by(|&a, &b| {
                            bev_iou(d, &g[a])
                                .total_cmp(&bev_iou(d, &g[b]))
                                .then(b.cmp(&a))
                        });
                    if let Some(j) = cand {
                        taken[j] = true;
                        tp += 1;
                    }
                }
            }
            points.push((tp as f64 / num_gt as f64, tp as f64 / k as f64));
        }
        (1..=n)
            .map(|j| {
                let r = j as f64 / n as f64;
                points
                    .iter()
                    .filter(|p| p.0 >= r - 1e-12)
                    .map(|p| p.1)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / n as f64
    }

    fn random_instance(seed: u64) -> (Vec<Vec<Box3>>, Vec<Vec<Box3>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.random_range(1..=2);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..frames {
            let ng = rng.random_range(0..=3);
            let g: Vec<Box3> = (0..ng)
                .map(|i| car(8.0 * i as f64, 0.0, 1.0))
                .collect();
            let nd = rng.random_range(0..=5);
            let d: Vec<Box3> = (0..nd)
                .map(|_| {
                    let i = rng.random_range(0..4) as f64;
                    car(8.0 * i + rng.random_range(-0.6..0.6), rng.random_range(-0.3..0.3), rng.random_range(0.01..1.0))
                })
                .collect();
            gts.push(g);
            dets.push(d);
        }
        (dets, gts)
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let mut checked = 0;
        for seed in 0..300 {
            let (dets, gts) = random_instance(seed);
            if gts.iter().all(Vec::is_empty) {
                continue;
            }
            let got = average_precision(&dets, &gts, 0.7, N_RECALL).unwrap().ap;
            let want = oracle_ap(&dets, &gts, 0.7, N_RECALL);
            assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
            checked += 1;
        }
        assert!(checked > 200);
    }

    proptest! {
        #[test]
        fn removing_false_positive_never_lowers_ap(seed in 0u64..10_000) {
            let (dets, gts) = random_instance(seed);
            prop_assume!(gts.iter().any(|g| !g.is_empty()));
            let base = average_precision(&dets, &gts, 0.7, N_RECALL).unwrap();
            let flags = match_detections(&dets, &gts, 0.7).unwrap();
            // Find a detection that is a false positive in the full ranking
            // and whose removal leaves the others' matches unchanged.
            let mut order: Vec<(usize, usize)> = dets.iter().enumerate()
                .flat_map(|(f, d)| (0..d.len()).map(move |i| (f, i))).collect();
            order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));
            for (rank, &(f, i)) in order.iter().enumerate() {
                if flags[rank].1 {
                    continue;
                }
                let mut fewer = dets.clone();
                fewer[f].remove(i);
                let r = average_precision(&fewer, &gts, 0.7, N_RECALL).unwrap();
                prop_assert!(r.ap >= base.ap - 1e-12, "{} < {}", r.ap, base.ap);
            }
            for p in &base.pr_curve {
                prop_assert!((0.0..=1.0).contains(&p.0) && (0.0..=1.0).contains(&p.1));
            }
        }
    }
}
