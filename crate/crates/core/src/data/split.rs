use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::pointops::{farthest_point_sample, PointCloud};

/// Points sampled from each frame unless configured otherwise.
pub const DEFAULT_SAMPLE_POINTS: usize = 2048;

/// Shuffled prefix of `ceil(fraction · n)` ids. For a fixed seed the
/// shuffle is fixed, so smaller fractions are prefixes of larger ones.
pub fn subset_split(ids: &[u64], fraction: f64, seed: u64) -> Result<Vec<u64>> {
    if ids.is_empty() {
        return Err(Error::Empty("subset_split"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} not in (0, 1]")));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // The epsilon keeps exact products such as 0.05 · 200 from rounding up.
    let k = ((fraction * ids.len() as f64 - 1e-9).ceil() as usize).clamp(1, ids.len());
    shuffled.truncate(k);
    Ok(shuffled)
}

/// Farthest-point subsample of a frame.
pub fn sample_points(cloud: &PointCloud, n: usize, seed: u64) -> Result<(Vec<usize>, Tensor<f32>)> {
    let idx = farthest_point_sample(cloud, n, seed)?;
    let xyz = cloud.xyz.gather_rows(&idx)?;
    Ok((idx, xyz))
}

/// Sidecar of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub generator_hash: String,
    pub seed: u64,
    pub count: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes one id per line to `path` and the metadata to `path.json`.
pub fn write_manifest(path: impl AsRef<Path>, ids: &[u64], generator_hash: &str, seed: u64) -> Result<()> {
    let path = path.as_ref();
    let mut body = String::new();
    for id in ids {
        body.push_str(&id.to_string());
        body.push('\n');
    }
    fs::write(path, body)?;
    let meta = ManifestMeta {
        generator_hash: generator_hash.to_string(),
        seed,
        count: ids.len(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<(Vec<u64>, ManifestMeta)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut ids = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let t = line.trim();
        if !t.is_empty() {
            ids.push(t.parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset,
                reason: format!("bad id `{t}`"),
            })?);
        }
        offset += line.len() as u64;
    }
    let side = sidecar_path(path);
    let meta: ManifestMeta =
        serde_json::from_str(&fs::read_to_string(&side)?).map_err(|e| Error::Format {
            path: side.clone(),
            offset: 0,
            reason: e.to_string(),
        })?;
    if meta.count != ids.len() {
        return Err(Error::Format {
            path: side,
            offset: 0,
            reason: format!("sidecar count {} but {} ids", meta.count, ids.len()),
        });
    }
    Ok((ids, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneConfig;
    use proptest::prelude::*;

    fn ids(n: u64) -> Vec<u64> {
        (0..n).collect()
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let mut s = subset_split(&ids(37), 1.0, 4).unwrap();
        s.sort();
        assert_eq!(s, ids(37));
    }

    #[test]
    fn five_percent_of_two_hundred() {
        assert_eq!(subset_split(&ids(200), 0.05, 1).unwrap().len(), 10);
    }

    #[test]
    fn low_data_fractions_nest() {
        let all = ids(500);
        let a = subset_split(&all, 0.01, 9).unwrap();
        let b = subset_split(&all, 0.05, 9).unwrap();
        let c = subset_split(&all, 0.20, 9).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (5, 25, 100));
        assert!(a.iter().all(|x| b.contains(x)));
        assert!(b.iter().all(|x| c.contains(x)));
    }

    #[test]
    fn bad_inputs() {
        assert!(subset_split(&[], 0.5, 0).is_err());
        assert!(subset_split(&ids(3), 0.0, 0).is_err());
        assert!(subset_split(&ids(3), 1.5, 0).is_err());
    }

    #[test]
    fn default_sample_size() {
        assert_eq!(BackboneConfig::default().n_sample, DEFAULT_SAMPLE_POINTS);
        let cfg: BackboneConfig = toml::from_str("radius = 0.7").unwrap();
        assert_eq!(cfg.n_sample, 2048);
    }

    #[test]
    fn sampling_deterministic_and_cycles() {
        let c = PointCloud::from_points(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let (i1, x1) = sample_points(&c, 7, 3).unwrap();
        let (i2, x2) = sample_points(&c, 7, 3).unwrap();
        assert_eq!((&i1, &x1), (&i2, &x2));
        assert_eq!(i1.len(), 7);
        assert_eq!(&i1[3..6], &i1[0..3]);
        assert!(sample_points(&PointCloud::empty(), 4, 0).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.txt");
        write_manifest(&p, &[3, 1, 4, 15], "abc", 7).unwrap();
        let (got, meta) = read_manifest(&p).unwrap();
        assert_eq!(got, vec![3, 1, 4, 15]);
        assert_eq!(meta.seed, 7);
        assert_eq!(meta.generator_hash, "abc");
    }

    proptest! {
        #[test]
        fn nesting_for_any_pair(n in 1u64..300, a in 0.001f64..1.0, b in 0.001f64..1.0, seed in any::<u64>()) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let all = ids(n);
            let s = subset_split(&all, lo, seed).unwrap();
            let l = subset_split(&all, hi, seed).unwrap();
            prop_assert!(s.len() <= l.len());
            prop_assert_eq!(&l[..s.len()], &s[..]);
        }
    }
}
