//! Spatial operators on point sets: sampling, neighbor search, grouping and
//! feature interpolation.
//!
//! Every tie is broken towards the lowest index so results are reproducible
//! bit-for-bit. Point positions never receive gradients; only features do.

mod grid;
mod grouping;
mod neighbors;
mod sampling;

pub use grid::GridIndex;
pub use grouping::{
    gather_groups, gather_groups_backward, group_features, group_features_backward,
    interpolate_features, GroupedRows, InterpWeights, INTERP_EPS,
};
pub use neighbors::{ball_query, knn, knn_groups, Knn, NeighborSet};
pub use sampling::{farthest_point_sample, fps_indices, fps_from_start};

use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

/// One lidar frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    /// `M × 3` coordinates in meters.
    pub xyz: Tensor<f32>,
    /// Optional per-point reflectance in `[0, 1]`.
    pub reflectance: Option<Vec<f32>>,
    pub frame_id: i64,
}

impl PointCloud {
    pub fn new(xyz: Tensor<f32>) -> Result<Self> {
        let (_, c) = xyz.dims2()?;
        if c != 3 {
            return Err(Error::shape("point cloud", xyz.shape(), &[xyz.rows(), 3]));
        }
        xyz.ensure_finite("point coordinates")?;
        Ok(Self {
            xyz,
            reflectance: None,
            frame_id: 0,
        })
    }

    pub fn from_points(points: &[[f32; 3]]) -> Self {
        Self::new(Tensor::from_points(points)).expect("finite points")
    }

    pub fn empty() -> Self {
        Self::from_points(&[])
    }

    pub fn with_reflectance(mut self, reflectance: Vec<f32>) -> Result<Self> {
        if reflectance.len() != self.len() {
            return Err(Error::shape(
                "reflectance",
                &[self.len()],
                &[reflectance.len()],
            ));
        }
        self.reflectance = Some(reflectance);
        Ok(self)
    }

    pub fn with_frame_id(mut self, frame_id: i64) -> Self {
        self.frame_id = frame_id;
        self
    }

    pub fn len(&self) -> usize {
        self.xyz.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> [f32; 3] {
        self.xyz.point(i)
    }

    pub fn translated(&self, t: [f32; 3]) -> Self {
        let mut out = self.clone();
        for p in out.xyz.data_mut().chunks_exact_mut(3) {
            p[0] += t[0];
            p[1] += t[1];
            p[2] += t[2];
        }
        out
    }

    /// Subset of points by index, reflectance included.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let xyz = self.xyz.gather_rows(indices)?;
        let reflectance = self
            .reflectance
            .as_ref()
            .map(|r| indices.iter().map(|&i| r[i]).collect());
        Ok(Self {
            xyz,
            reflectance,
            frame_id: self.frame_id,
        })
    }
}

#[inline]
pub(crate) fn dist2<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

pub(crate) fn check_points<T: Real>(xyz: &Tensor<T>, what: &'static str) -> Result<usize> {
    let (n, c) = xyz.dims2()?;
    if c != 3 {
        return Err(Error::shape(what, xyz.shape(), &[n, 3]));
    }
    Ok(n)
}
