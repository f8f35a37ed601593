use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};
use crate::pointops::{GridIndex, PointCloud};

/// How point-to-point distances enter the flow losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// Mean squared Euclidean distance.
    #[default]
    Squared,
    /// Mean Euclidean distance; gradient taken as zero at zero distance.
    Euclidean,
}

impl std::str::FromStr for DistanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(Error::Config(format!(
                "unknown loss distance {other:?}, expected squared or euclidean"
            ))),
        }
    }
}

/// Scalar loss and its gradient with respect to the first argument.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T = f32> {
    pub value: f64,
    pub grad: Tensor<T>,
}

/// Adds the distance term for `p − q` to `grad` and returns its value.
fn pair_term<T: Real>(diff: [f64; 3], mode: DistanceMode, scale: f64, grad: &mut [T]) -> f64 {
    let d2 = diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
    match mode {
        DistanceMode::Squared => {
            for k in 0..3 {
                grad[k] += T::of(2.0 * diff[k] * scale);
            }
            d2
        }
        DistanceMode::Euclidean => {
            let d = d2.sqrt();
            if d > 0.0 {
                for k in 0..3 {
                    grad[k] += T::of(diff[k] / d * scale);
                }
            }
            d
        }
    }
}

/// Nearest-neighbor loss against a prebuilt index over the target frame.
/// Neighbor assignment is held fixed for the gradient.
pub fn nearest_neighbor_loss_indexed<T: Real>(
    propagated: &Tensor<T>,
    target: &GridIndex<T>,
    mode: DistanceMode,
) -> Result<LossGrad<T>> {
    let (n, c) = propagated.dims2()?;
    if c != 3 {
        return Err(Error::shape("nearest_neighbor_loss", propagated.shape(), &[n, 3]));
    }
    propagated.ensure_finite("propagated points")?;
    let mut grad = Tensor::zeros(&[n, 3]);
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let nn = target.knn(propagated, 1)?;
    let reference = target.reference();
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let p = propagated.point(i);
        let q = reference.point(nn.indices[i]);
        let diff = [0, 1, 2].map(|k| p[k].as_f64() - q[k].as_f64());
        total += pair_term(diff, mode, scale, grad.row_mut(i));
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
    })
}

/// Grid cell size for nearest-neighbor indexes over a cloud: about four
/// points per occupied cell on a surface-like cloud.
pub fn nn_index_cell<T: Real>(xyz: &Tensor<T>) -> f64 {
    let n = xyz.rows().max(1);
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for i in 0..xyz.rows() {
        let p = xyz.point(i);
        for k in 0..2 {
            lo[k] = lo[k].min(p[k].as_f64());
            hi[k] = hi[k].max(p[k].as_f64());
        }
    }
    let area = ((hi[0] - lo[0]) * (hi[1] - lo[1])).max(1e-6);
    (4.0 * area / n as f64).sqrt().clamp(0.05, 10.0)
}

/// Mean distance from each propagated point to its nearest point in
/// `target`.
pub fn nearest_neighbor_loss<T: Real>(
    propagated: &Tensor<T>,
    target: &PointCloud,
    mode: DistanceMode,
) -> Result<LossGrad<T>> {
    if target.is_empty() {
        return Err(Error::Empty("nearest_neighbor_loss target cloud"));
    }
    let xyz: Tensor<T> = target.xyz.cast();
    let grid = GridIndex::build(&xyz, nn_index_cell(&xyz))?;
    nearest_neighbor_loss_indexed(propagated, &grid, mode)
}

/// Mean distance between paired rows; gradient with respect to
/// `reconstructed`.
pub fn cycle_consistency_loss<T: Real>(
    anchors: &Tensor<T>,
    reconstructed: &Tensor<T>,
    mode: DistanceMode,
) -> Result<LossGrad<T>> {
    if anchors.shape() != reconstructed.shape() || anchors.shape().len() != 2 || anchors.cols() != 3 {
        return Err(Error::shape("cycle_consistency_loss", anchors.shape(), reconstructed.shape()));
    }
    reconstructed.ensure_finite("reconstructed points")?;
    let n = anchors.rows();
    let mut grad = Tensor::zeros(&[n, 3]);
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let scale = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let a = anchors.point(i);
        let r = reconstructed.point(i);
        let diff = [0, 1, 2].map(|k| r[k].as_f64() - a[k].as_f64());
        total += pair_term(diff, mode, scale, grad.row_mut(i));
    }
    Ok(LossGrad {
        value: total * scale,
        grad,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowLossReport {
    pub nn_loss: f64,
    pub cycle_loss: f64,
    pub total: f64,
}

impl FlowLossReport {
    pub fn new(nn_loss: f64, cycle_loss: f64) -> Self {
        Self {
            nn_loss,
            cycle_loss,
            total: nn_loss + cycle_loss,
        }
    }
}

/// Report plus gradients on `P′` (nearest-neighbor term only) and `P″`.
#[derive(Clone, Debug)]
pub struct FlowLossGrads<T> {
    pub report: FlowLossReport,
    pub d_propagated: Tensor<T>,
    pub d_reconstructed: Tensor<T>,
}

pub fn flow_total_loss_indexed<T: Real>(
    samples: &Tensor<T>,
    target: &GridIndex<T>,
    propagated: &Tensor<T>,
    reconstructed: &Tensor<T>,
    mode: DistanceMode,
) -> Result<FlowLossGrads<T>> {
    if samples.shape() != propagated.shape() {
        return Err(Error::shape("flow_total_loss", samples.shape(), propagated.shape()));
    }
    let nn = nearest_neighbor_loss_indexed(propagated, target, mode)?;
    let cyc = cycle_consistency_loss(samples, reconstructed, mode)?;
    Ok(FlowLossGrads {
        report: FlowLossReport::new(nn.value, cyc.value),
        d_propagated: nn.grad,
        d_reconstructed: cyc.grad,
    })
}

/// `nearest_neighbor_loss(P′, P_{t+1}) + cycle_consistency_loss(P, P″)`.
pub fn flow_total_loss<T: Real>(
    samples: &Tensor<T>,
    target: &PointCloud,
    propagated: &Tensor<T>,
    reconstructed: &Tensor<T>,
    mode: DistanceMode,
) -> Result<FlowLossReport> {
    if target.is_empty() {
        return Err(Error::Empty("flow_total_loss target cloud"));
    }
    let xyz: Tensor<T> = target.xyz.cast();
    let grid = GridIndex::build(&xyz, nn_index_cell(&xyz))?;
    Ok(flow_total_loss_indexed(samples, &grid, propagated, reconstructed, mode)?.report)
}
