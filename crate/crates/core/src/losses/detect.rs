use serde::{Deserialize, Serialize};

use super::LossGrad;
use crate::data::{half_turn_yaw, Box3};
use crate::error::{Error, Result};
use crate::model::{DetectHeadConfig, DetectOutput, REG_CHANNELS};
use crate::numeric::{Real, Tensor};

pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;
pub const HUBER_DELTA: f64 = 1.0;
/// Probabilities are clamped into `[ε, 1 − ε]` inside the focal loss.
pub const FOCAL_CLAMP: f64 = 1e-6;

/// Dense training targets for the BEV head, channels-last.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTargets<T = f32> {
    /// `side × side × num_classes`.
    pub heatmap: Tensor<T>,
    /// `side × side × 8`.
    pub reg: Tensor<T>,
    /// Cells owning a box center, `side²`.
    pub mask: Vec<bool>,
    /// Boxes dropped for lying outside the extent or the class range.
    pub dropped: usize,
}

impl<T: Real> DetectionTargets<T> {
    pub fn positives(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Cell indices and sub-cell offsets of a BEV point; offsets are measured
/// from the cell center, in cells.
pub fn locate_cell(cfg: &DetectHeadConfig, x: f64, y: f64) -> Option<(usize, usize, f64, f64)> {
    let cs = cfg.cell_size();
    let fx = (x + cfg.bev_extent) / cs;
    let fy = (y + cfg.bev_extent) / cs;
    let ix = fx.floor();
    let iy = fy.floor();
    let side = cfg.bev_cells as f64;
    if !(ix >= 0.0 && iy >= 0.0 && ix < side && iy < side) {
        return None;
    }
    Some((ix as usize, iy as usize, fx - ix - 0.5, fy - iy - 0.5))
}

/// Gaussian width in cells for a box.
pub fn splat_sigma(b: &Box3, cfg: &DetectHeadConfig) -> f64 {
    (b.w().hypot(b.l()) / 6.0 / cfg.cell_size()).max(1.0)
}

/// Regression encoding of a box relative to its center cell. Yaw is taken
/// modulo a half turn: the sampled surfaces of a box look the same from
/// both ends, so the full heading is not observable from one frame.
pub fn encode_box(b: &Box3, dx: f64, dy: f64) -> [f64; REG_CHANNELS] {
    let yaw = half_turn_yaw(b.yaw);
    [
        dx,
        dy,
        b.center[2],
        b.w().ln(),
        b.l().ln(),
        b.h().ln(),
        yaw.sin(),
        yaw.cos(),
    ]
}

/// Gaussian heatmap splats (max-merged), peak 1 at each center cell, and
/// regression targets at center cells.
pub fn make_detection_targets<T: Real>(
    boxes: &[Box3],
    cfg: &DetectHeadConfig,
) -> Result<DetectionTargets<T>> {
    let side = cfg.bev_cells;
    let k = cfg.num_classes;
    let mut heat = vec![0.0f64; side * side * k];
    let mut reg = vec![T::zero(); side * side * REG_CHANNELS];
    let mut mask = vec![false; side * side];
    let mut dropped = 0;
    for b in boxes {
        if b.size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid(format!("box dimensions must be positive, got {:?}", b.size)));
        }
        let Some((ix, iy, dx, dy)) = locate_cell(cfg, b.center[0], b.center[1]) else {
            dropped += 1;
            continue;
        };
        if b.class_id >= k {
            dropped += 1;
            continue;
        }
        let sigma = splat_sigma(b, cfg);
        let r = (3.0 * sigma).ceil() as isize;
        for oy in -r..=r {
            for ox in -r..=r {
                let (y, x) = (iy as isize + oy, ix as isize + ox);
                if y < 0 || x < 0 || y >= side as isize || x >= side as isize {
                    continue;
                }
                let v = (-((ox * ox + oy * oy) as f64) / (2.0 * sigma * sigma)).exp();
                let slot = &mut heat[(y as usize * side + x as usize) * k + b.class_id];
                *slot = slot.max(v);
            }
        }
        let cell = iy * side + ix;
        mask[cell] = true;
        for (slot, v) in reg[cell * REG_CHANNELS..(cell + 1) * REG_CHANNELS]
            .iter_mut()
            .zip(encode_box(b, dx, dy))
        {
            *slot = T::of(v);
        }
    }
    if dropped > 0 {
        log::debug!("make_detection_targets: dropped {dropped} boxes outside the BEV extent");
    }
    Ok(DetectionTargets {
        heatmap: Tensor::new(vec![side, side, k], heat.into_iter().map(T::of).collect())?,
        reg: Tensor::new(vec![side, side, REG_CHANNELS], reg)?,
        mask,
        dropped,
    })
}

/// Penalty-reduced focal loss over a heatmap; gradient with respect to the
/// predicted probabilities (zero where the clamp is active).
pub fn focal_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    alpha: f64,
    beta: f64,
) -> Result<LossGrad<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("focal_loss", pred.shape(), target.shape()));
    }
    if let Some(bad) = pred.data().iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("focal_loss: NaN in prediction at {bad}")));
    }
    let n_pos = target.data().iter().filter(|&&t| t.as_f64() == 1.0).count().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let raw = p.as_f64();
        let pc = raw.clamp(FOCAL_CLAMP, 1.0 - FOCAL_CLAMP);
        let live = pc == raw;
        let t = t.as_f64();
        let (l, g) = if t == 1.0 {
            let q = 1.0 - pc;
            (
                -q.powf(alpha) * pc.ln(),
                alpha * q.powf(alpha - 1.0) * pc.ln() - q.powf(alpha) / pc,
            )
        } else {
            let wneg = (1.0 - t).powf(beta);
            let lq = (1.0 - pc).ln();
            (
                -wneg * pc.powf(alpha) * lq,
                -wneg * (alpha * pc.powf(alpha - 1.0) * lq - pc.powf(alpha) / (1.0 - pc)),
            )
        };
        total += l;
        grad.push(T::of(if live { g / n_pos } else { 0.0 }));
    }
    Ok(LossGrad {
        value: total / n_pos,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

/// Mean Huber penalty over the masked cells' channels. `mask` has one entry
/// per row of `pred` viewed as `cells × channels`.
pub fn huber_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    delta: f64,
    mask: &[bool],
) -> Result<LossGrad<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("huber_loss", pred.shape(), target.shape()));
    }
    if mask.is_empty() || pred.len() % mask.len() != 0 {
        return Err(Error::shape("huber_loss mask", &[mask.len()], pred.shape()));
    }
    let ch = pred.len() / mask.len();
    let count = mask.iter().filter(|&&m| m).count() * ch;
    let mut grad = vec![T::zero(); pred.len()];
    if count == 0 {
        log::warn!("huber_loss: empty mask, loss is 0");
        return Ok(LossGrad {
            value: 0.0,
            grad: Tensor::new(pred.shape().to_vec(), grad)?,
        });
    }
    let mut total = 0.0;
    for (cell, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for j in cell * ch..(cell + 1) * ch {
            let r = pred.data()[j].as_f64() - target.data()[j].as_f64();
            let (l, g) = if r.abs() <= delta {
                (0.5 * r * r, r)
            } else {
                (delta * (r.abs() - 0.5 * delta), delta * r.signum())
            };
            total += l;
            grad[j] = T::of(g / count as f64);
        }
    }
    Ok(LossGrad {
        value: total / count as f64,
        grad: Tensor::new(pred.shape().to_vec(), grad)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionLossWeights {
    pub heatmap: f64,
    pub regression: f64,
}

impl Default for DetectionLossWeights {
    fn default() -> Self {
        Self {
            heatmap: 1.0,
            regression: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossReport {
    pub heatmap: f64,
    pub regression: f64,
    pub total: f64,
}

impl DetectionLossReport {
    pub fn new(heatmap: f64, regression: f64, w: DetectionLossWeights) -> Self {
        Self {
            heatmap,
            regression,
            total: w.heatmap * heatmap + w.regression * regression,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectionLossGrads<T> {
    pub report: DetectionLossReport,
    pub d_heatmap: Tensor<T>,
    pub d_regmap: Tensor<T>,
}

/// Weighted focal plus Huber loss with gradients on both head outputs.
pub fn detection_total_loss<T: Real>(
    preds: &DetectOutput<T>,
    targets: &DetectionTargets<T>,
    weights: DetectionLossWeights,
) -> Result<DetectionLossGrads<T>> {
    let hm = focal_loss(&preds.heatmap, &targets.heatmap, FOCAL_ALPHA, FOCAL_BETA)?;
    let reg = huber_loss(&preds.regmap, &targets.reg, HUBER_DELTA, &targets.mask)?;
    let mut d_heatmap = hm.grad;
    d_heatmap.scale(T::of(weights.heatmap));
    let mut d_regmap = reg.grad;
    d_regmap.scale(T::of(weights.regression));
    Ok(DetectionLossGrads {
        report: DetectionLossReport::new(hm.value, reg.value, weights),
        d_heatmap,
        d_regmap,
    })
}
