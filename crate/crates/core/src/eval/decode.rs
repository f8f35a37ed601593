use super::bev_iou;
use crate::data::Box3;
use crate::error::{Error, Result};
use crate::model::{DetectHeadConfig, REG_CHANNELS};
use crate::numeric::{Real, Tensor};

/// Whether cell `(ix, iy)` is a 3×3 local maximum of channel `k`. Equal
/// neighbors with a lower cell index win the tie.
fn is_peak<T: Real>(heat: &[T], side: usize, nk: usize, ix: usize, iy: usize, k: usize) -> bool {
    let idx = iy * side + ix;
    let v = heat[idx * nk + k];
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            if dx == 0 && dy == 0 {
                continue;
            }
            let (nx, ny) = (ix as i64 + dx, iy as i64 + dy);
            if nx < 0 || ny < 0 || nx >= side as i64 || ny >= side as i64 {
                continue;
            }
            let n = ny as usize * side + nx as usize;
            let u = heat[n * nk + k];
            if (n < idx && !(v > u)) || (n > idx && v < u) {
                return false;
            }
        }
    }
    true
}

/// Boxes from heatmap peaks. Centers are the cell center plus the regressed
/// `(dx, dy)` in cells, matching the target encoding.
pub fn decode_detections<T: Real>(
    heatmap: &Tensor<T>,
    regmap: &Tensor<T>,
    cfg: &DetectHeadConfig,
    peak_threshold: f64,
    max_dets: usize,
) -> Result<Vec<Box3>> {
    let side = cfg.bev_cells;
    let nk = cfg.num_classes;
    if heatmap.shape() != [side, side, nk] {
        return Err(Error::shape("decode heatmap", heatmap.shape(), &[side, side, nk]));
    }
    if regmap.shape() != [side, side, REG_CHANNELS] {
        return Err(Error::shape("decode regmap", regmap.shape(), &[side, side, REG_CHANNELS]));
    }
    let heat = heatmap.data();
    let reg = regmap.data();
    let cs = cfg.cell_size();
    let mut out = Vec::new();
    for iy in 0..side {
        for ix in 0..side {
            for k in 0..nk {
                let idx = iy * side + ix;
                let score = heat[idx * nk + k].as_f64();
                if !(score >= peak_threshold) || !is_peak(heat, side, nk, ix, iy, k) {
                    continue;
                }
                let r: Vec<f64> = reg[idx * REG_CHANNELS..(idx + 1) * REG_CHANNELS]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let x = -cfg.bev_extent + (ix as f64 + 0.5 + r[0]) * cs;
                let y = -cfg.bev_extent + (iy as f64 + 0.5 + r[1]) * cs;
                let size = [r[3].exp(), r[4].exp(), r[5].exp()];
                let yaw = r[6].atan2(r[7]);
                match Box3::scored([x, y, r[2]], size, yaw, k, score.clamp(0.0, 1.0)) {
                    Ok(b) => out.push(b),
                    Err(e) => log::debug!("skipping undecodable peak at cell {idx}: {e}"),
                }
            }
        }
    }
    // Stable: equal scores keep cell order.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(max_dets);
    Ok(out)
}

/// Greedy suppression in descending score order; a box is dropped when its
/// IoU with a kept box of the same class reaches `iou_threshold`.
pub fn nms(boxes: &[Box3], iou_threshold: f64) -> Vec<Box3> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score));
    let mut kept: Vec<Box3> = Vec::new();
    for i in order {
        let b = &boxes[i];
        if kept
            .iter()
            .all(|k| k.class_id != b.class_id || bev_iou(k, b) < iou_threshold)
        {
            kept.push(b.clone());
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::normalize_yaw;
    use crate::losses::make_detection_targets;
    use std::f64::consts::PI;

    fn cfg() -> DetectHeadConfig {
        DetectHeadConfig::default()
    }

    #[test]
    fn zero_heatmap_gives_nothing() {
        let c = cfg();
        let s = c.bev_cells;
        let h = Tensor::<f32>::zeros(&[s, s, 1]);
        let r = Tensor::<f32>::zeros(&[s, s, REG_CHANNELS]);
        assert!(decode_detections(&h, &r, &c, 0.1, 100).unwrap().is_empty());
    }

    #[test]
    fn encode_decode_roundtrip() {
        let c = cfg();
        let boxes = vec![
            Box3::new([3.3, -7.1, 0.8], [1.7, 4.1, 1.5], 0.4, 0).unwrap(),
            Box3::new([-12.0, 5.05, 0.75], [1.9, 3.8, 1.6], -2.9, 0).unwrap(),
            Box3::new([0.0, 0.0, 0.7], [1.6, 4.4, 1.4], PI, 0).unwrap(),
        ];
        let t = make_detection_targets::<f64>(&boxes, &c).unwrap();
        let dets = decode_detections(&t.heatmap, &t.reg, &c, 0.99, 100).unwrap();
        assert_eq!(dets.len(), boxes.len());
        for b in &boxes {
            let d = dets
                .iter()
                .find(|d| (d.center[0] - b.center[0]).abs() < 1e-4 && (d.center[1] - b.center[1]).abs() < 1e-4)
                .expect("box recovered");
            for k in 0..3 {
                assert!((d.center[k] - b.center[k]).abs() < 1e-4);
                assert!((d.size[k] - b.size[k]).abs() < 1e-4);
            }
            // Headings are recovered modulo a half turn.
            let dy = normalize_yaw(d.yaw - b.yaw);
            assert!(dy.abs() < 1e-4 || (dy.abs() - PI).abs() < 1e-4);
            assert!((bev_iou(d, b) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_adjacent_peaks_keep_lower_index() {
        let c = cfg();
        let s = c.bev_cells;
        let mut h = Tensor::<f32>::zeros(&[s, s, 1]);
        let a = 10 * s + 10;
        h.data_mut()[a] = 0.8;
        h.data_mut()[a + 1] = 0.8;
        let r = Tensor::<f32>::zeros(&[s, s, REG_CHANNELS]);
        let dets = decode_detections(&h, &r, &c, 0.1, 100).unwrap();
        assert_eq!(dets.len(), 1);
        let x = -c.bev_extent + 10.5 * c.cell_size();
        assert!((dets[0].center[0] - x).abs() < 1e-6);
    }

    #[test]
    fn max_dets_keeps_best() {
        let c = cfg();
        let s = c.bev_cells;
        let mut h = Tensor::<f32>::zeros(&[s, s, 1]);
        for (i, v) in [(5, 0.3f32), (20, 0.9), (40, 0.6)] {
            h.data_mut()[i * s + i] = v;
        }
        let r = Tensor::<f32>::zeros(&[s, s, REG_CHANNELS]);
        let dets = decode_detections(&h, &r, &c, 0.1, 2).unwrap();
        let scores: Vec<f64> = dets.iter().map(|d| (d.score * 10.0).round() / 10.0).collect();
        assert_eq!(scores, vec![0.9, 0.6]);
    }

    #[test]
    fn nms_examples() {
        let a = Box3::scored([0.0; 3], [1.8, 4.0, 1.5], 0.0, 0, 0.8).unwrap();
        let b = Box3::scored([0.0; 3], [1.8, 4.0, 1.5], 0.0, 0, 0.9).unwrap();
        let far = Box3::scored([10.0, 0.0, 0.0], [1.8, 4.0, 1.5], 0.0, 0, 0.5).unwrap();
        assert_eq!(nms(&[a.clone()], 0.5), vec![a.clone()]);
        assert_eq!(nms(&[a.clone(), b.clone()], 0.5), vec![b.clone()]);
        assert_eq!(nms(&[b.clone(), far.clone()], 0.5).len(), 2);
    }
}
