//! KITTI velodyne `.bin` files: little-endian `f32` records of
//! `(x, y, z, reflectance)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::pointops::PointCloud;

const RECORD: usize = 16;

pub fn parse_kitti_bin(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % RECORD) as u64,
            reason: format!("length {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD;
    let mut xyz = Vec::with_capacity(3 * n);
    let mut refl = Vec::with_capacity(n);
    let mut bad = 0usize;
    for rec in bytes.chunks_exact(RECORD) {
        let v: [f32; 4] = std::array::from_fn(|k| {
            f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes"))
        });
        if v.iter().any(|x| !x.is_finite()) {
            bad += 1;
            continue;
        }
        xyz.extend_from_slice(&v[..3]);
        refl.push(v[3]);
    }
    if bad > 0 {
        return Err(Error::NonFinite(format!(
            "{}: {bad} of {n} records",
            path.display()
        )));
    }
    PointCloud::new(Tensor::matrix(n, 3, xyz)?)?.with_reflectance(refl)
}

pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_kitti_bin(&bytes, path)
}

/// Missing reflectance is written as zero.
pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut out = Vec::with_capacity(cloud.len() * RECORD);
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let r = cloud.reflectance.as_ref().map_or(0.0, |r| r[i]);
        for v in [p[0], p[1], p[2], r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}
