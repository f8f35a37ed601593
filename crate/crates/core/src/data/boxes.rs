use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into (−π, π].
pub fn normalize_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    }
    if a == -PI {
        a = PI;
    }
    a
}

/// Yaw folded into `(-π/2, π/2]`. A box is unchanged by a half turn, so
/// this picks one representative of each BEV footprint.
pub fn half_turn_yaw(yaw: f64) -> f64 {
    let mut a = yaw.rem_euclid(PI);
    if a > PI / 2.0 {
        a -= PI;
    }
    a
}

/// Oriented 3D box. Length `l` runs along the heading `yaw`, width `w`
/// across it, height `h` along z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub center: [f64; 3],
    /// `(w, l, h)` in meters.
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Box3 {
    /// Ground-truth box (score 1), yaw normalized.
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, class_id: usize) -> Result<Self> {
        Self::scored(center, size, yaw, class_id, 1.0)
    }

    pub fn scored(
        center: [f64; 3],
        size: [f64; 3],
        yaw: f64,
        class_id: usize,
        score: f64,
    ) -> Result<Self> {
        if size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("box dimensions must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() || !score.is_finite() {
            return Err(Error::NonFinite("box parameters".into()));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_yaw(yaw),
            class_id,
            score,
        })
    }

    pub fn w(&self) -> f64 {
        self.size[0]
    }

    pub fn l(&self) -> f64 {
        self.size[1]
    }

    pub fn h(&self) -> f64 {
        self.size[2]
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.l() / 2.0;
        let hw = self.w() / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + u * c - v * s, self.center[1] + u * s + v * c])
    }

    /// The eight 3D corners: bottom face then top face, same order as
    /// [`bev_corners`](Self::bev_corners).
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let b = self.bev_corners();
        let z0 = self.center[2] - self.h() / 2.0;
        let z1 = self.center[2] + self.h() / 2.0;
        let mut out = [[0.0; 3]; 8];
        for i in 0..4 {
            out[i] = [b[i][0], b[i][1], z0];
            out[i + 4] = [b[i][0], b[i][1], z1];
        }
        out
    }

    /// Whether `p` lies inside the box (boundary included).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        u.abs() <= self.l() / 2.0
            && v.abs() <= self.w() / 2.0
            && (p[2] - self.center[2]).abs() <= self.h() / 2.0
    }

    pub fn bev_range(&self) -> f64 {
        self.center[0].hypot(self.center[1])
    }
}
