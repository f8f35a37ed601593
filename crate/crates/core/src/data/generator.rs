use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Box3;
use crate::error::{Error, Result};
use crate::numeric::{hex_digest, Tensor};
use crate::pointops::PointCloud;

/// Inclusive `[lo, hi]` range.
pub type Range = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Moving objects per scene, inclusive range.
    pub n_objects: [usize; 2],
    pub object_width: Range,
    pub object_length: Range,
    pub object_height: Range,
    /// Meters per frame along the heading.
    pub speed: Range,
    /// Path curvature in 1/m; the yaw change per frame is `speed · curvature`.
    pub curvature: Range,
    /// Initial heading in radians.
    pub heading: Range,
    /// Points on the ground plane.
    pub background_points: usize,
    /// Surface points per moving object.
    pub object_points: usize,
    /// Static unlabeled objects per scene, inclusive range.
    pub clutter_objects: [usize; 2],
    pub clutter_points: usize,
    pub dropout_prob: f64,
    pub jitter_sigma: f64,
    /// Half-width of the square scene in meters.
    pub extent: f64,
    pub num_classes: usize,
    /// Whole-scene translation per frame in meters; zero disables it.
    pub ego_motion: [f64; 3],
    /// Attach a reflectance value to every point.
    pub reflectance: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_objects: [2, 5],
            object_width: [1.6, 2.0],
            object_length: [3.5, 4.5],
            object_height: [1.4, 1.7],
            speed: [0.5, 1.5],
            curvature: [-0.05, 0.05],
            heading: [-PI, PI],
            background_points: 1500,
            object_points: 250,
            clutter_objects: [3, 6],
            clutter_points: 80,
            dropout_prob: 0.1,
            jitter_sigma: 0.01,
            extent: 20.0,
            num_classes: 1,
            ego_motion: [0.0; 3],
            reflectance: false,
        }
    }
}

fn check_range(name: &str, r: Range) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
        return Err(Error::Config(format!("{name} range {r:?} is empty")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent > 0.0) || !self.extent.is_finite() {
            return Err(Error::Config(format!("degenerate extent {}", self.extent)));
        }
        for (n, r) in [
            ("object_width", self.object_width),
            ("object_length", self.object_length),
            ("object_height", self.object_height),
            ("speed", self.speed),
            ("curvature", self.curvature),
            ("heading", self.heading),
        ] {
            check_range(n, r)?;
        }
        for (n, r) in [("n_objects", self.n_objects), ("clutter_objects", self.clutter_objects)] {
            if r[0] > r[1] {
                return Err(Error::Config(format!("{n} range {r:?} is empty")));
            }
        }
        if self.object_width[0] <= 0.0 || self.object_length[0] <= 0.0 || self.object_height[0] <= 0.0 {
            return Err(Error::Config("object sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!("dropout_prob {} not in [0, 1)", self.dropout_prob)));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("jitter_sigma must be non-negative".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex_digest(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub generator_hash: String,
}

/// A frame pair with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub frame_t: PointCloud,
    pub frame_t1: PointCloud,
    /// Per point of `frame_t`, meters.
    pub gt_flow: Option<Tensor<f32>>,
    pub gt_boxes_t: Vec<Box3>,
    pub meta: SceneMeta,
}

/// A frame pair with every label stripped; what flow pre-training sees.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledPair {
    pub frame_t: PointCloud,
    pub frame_t1: PointCloud,
    pub meta: SceneMeta,
}

impl SceneSample {
    pub fn unlabeled(&self) -> UnlabeledPair {
        UnlabeledPair {
            frame_t: self.frame_t.clone(),
            frame_t1: self.frame_t1.clone(),
            meta: self.meta.clone(),
        }
    }

    pub fn into_unlabeled(self) -> UnlabeledPair {
        UnlabeledPair {
            frame_t: self.frame_t,
            frame_t1: self.frame_t1,
            meta: self.meta,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Rigid motion of one object between the frames.
#[derive(Clone, Copy, Debug)]
struct Motion {
    center: [f64; 3],
    dyaw: f64,
    t: [f64; 3],
}

impl Motion {
    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.dyaw.sin_cos();
        let x = p[0] - self.center[0];
        let y = p[1] - self.center[1];
        [
            c * x - s * y + self.center[0] + self.t[0],
            s * x + c * y + self.center[1] + self.t[1],
            p[2] + self.t[2],
        ]
    }
}

/// Uniform samples on the four sides and the top of a box.
fn box_surface(rng: &mut ChaCha8Rng, b: &Box3, n: usize, out: &mut Vec<[f64; 3]>) {
    let (w, l, h) = (b.w(), b.l(), b.h());
    let areas = [l * h, l * h, w * h, w * h, w * l];
    let total: f64 = areas.iter().sum();
    let (s, c) = b.yaw.sin_cos();
    for _ in 0..n {
        let mut pick = rng.random_range(0.0..total);
        let mut face = 0;
        while face < 4 && pick >= areas[face] {
            pick -= areas[face];
            face += 1;
        }
        let a: f64 = rng.random_range(-0.5..0.5);
        let bb: f64 = rng.random_range(-0.5..0.5);
        // Local frame: u along length, v across, z up from the center.
        let (u, v, z) = match face {
            0 => (a * l, 0.5 * w, bb * h),
            1 => (a * l, -0.5 * w, bb * h),
            2 => (0.5 * l, a * w, bb * h),
            3 => (-0.5 * l, a * w, bb * h),
            _ => (a * l, bb * w, 0.5 * h),
        };
        out.push([
            b.center[0] + u * c - v * s,
            b.center[1] + u * s + v * c,
            b.center[2] + z,
        ]);
    }
}

fn far_enough(c: [f64; 2], taken: &[([f64; 2], f64)], r: f64) -> bool {
    taken.iter().all(|(o, ro)| (c[0] - o[0]).hypot(c[1] - o[1]) > r + ro)
}

/// One synthetic frame pair: ground plane, static clutter and moving boxes.
/// Flow is recorded on the underlying surface samples before per-frame
/// dropout and jitter.
pub fn generate_scene(cfg: &GeneratorConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = cfg.extent;
    let margin = (cfg.object_length[1].max(cfg.object_width[1]) / 2.0 + 1.0).min(e / 2.0);

    // Points with their frame-to-frame motion, `None` for static ones.
    let mut pts: Vec<[f64; 3]> = Vec::new();
    let mut owner: Vec<Option<usize>> = Vec::new();

    for _ in 0..cfg.background_points {
        pts.push([rng.random_range(-e..e), rng.random_range(-e..e), 0.0]);
        owner.push(None);
    }

    let mut taken: Vec<([f64; 2], f64)> = Vec::new();
    let mut boxes = Vec::new();
    let mut motions = Vec::new();
    let n_obj = rng.random_range(cfg.n_objects[0]..=cfg.n_objects[1]);
    for _ in 0..n_obj {
        let class_id = rng.random_range(0..cfg.num_classes);
        // Further classes are progressively smaller.
        let scale = 1.0 / (1.0 + class_id as f64);
        let w = uniform(&mut rng, cfg.object_width) * scale;
        let l = uniform(&mut rng, cfg.object_length) * scale;
        let h = uniform(&mut rng, cfg.object_height) * scale.sqrt();
        let heading = uniform(&mut rng, cfg.heading);
        let speed = uniform(&mut rng, cfg.speed);
        let curvature = uniform(&mut rng, cfg.curvature);
        let radius = 0.5 * w.hypot(l) + speed;
        let mut center = None;
        for _ in 0..50 {
            let c = [rng.random_range(-(e - margin)..=(e - margin)), rng.random_range(-(e - margin)..=(e - margin))];
            if far_enough(c, &taken, radius + 0.5) {
                center = Some(c);
                break;
            }
        }
        let Some(c) = center else { continue };
        taken.push((c, radius));
        let b = Box3::new([c[0], c[1], h / 2.0], [w, l, h], heading, class_id)?;
        let dyaw = speed * curvature;
        let mid = heading + dyaw / 2.0;
        let motion = Motion {
            center: b.center,
            dyaw,
            t: [speed * mid.cos(), speed * mid.sin(), 0.0],
        };
        let start = pts.len();
        box_surface(&mut rng, &b, cfg.object_points, &mut pts);
        owner.extend(std::iter::repeat_n(Some(motions.len()), pts.len() - start));
        boxes.push(b);
        motions.push(motion);
    }

    let n_clutter = rng.random_range(cfg.clutter_objects[0]..=cfg.clutter_objects[1]);
    for _ in 0..n_clutter {
        let kind = rng.random_range(0..3);
        let (w, l, h) = match kind {
            0 => (0.3, 0.3, rng.random_range(2.0..3.0)),
            1 => (0.3, rng.random_range(3.0..6.0), rng.random_range(1.0..2.0)),
            _ => {
                let s = rng.random_range(0.8..1.2);
                (s, s, s)
            }
        };
        let radius = 0.5 * f64::hypot(w, l);
        let mut center = None;
        for _ in 0..50 {
            let c = [rng.random_range(-(e - margin)..=(e - margin)), rng.random_range(-(e - margin)..=(e - margin))];
            if far_enough(c, &taken, radius + 0.5) {
                center = Some(c);
                break;
            }
        }
        let Some(c) = center else { continue };
        taken.push((c, radius));
        let yaw = rng.random_range(-PI..PI);
        let b = Box3::new([c[0], c[1], h / 2.0], [w, l, h], yaw, 0)?;
        let start = pts.len();
        box_surface(&mut rng, &b, cfg.clutter_points, &mut pts);
        owner.extend(std::iter::repeat_n(None, pts.len() - start));
    }

    // Underlying surfaces at both times, in f32 as stored.
    let ego = cfg.ego_motion;
    let p0: Vec<[f32; 3]> = pts.iter().map(|p| p.map(|v| v as f32)).collect();
    let mut p1 = Vec::with_capacity(p0.len());
    let mut flow = Vec::with_capacity(p0.len());
    for (p, o) in p0.iter().zip(&owner) {
        let base = p.map(|v| v as f64);
        let moved = match o {
            Some(k) => motions[*k].apply(base),
            None => base,
        };
        let moved = [moved[0] + ego[0], moved[1] + ego[1], moved[2] + ego[2]];
        p1.push(moved.map(|v| v as f32));
        flow.push([0, 1, 2].map(|k| (moved[k] - base[k]) as f32));
    }

    let jitter = Normal::new(0.0, cfg.jitter_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let observe = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..n)
            .filter(|_| cfg.dropout_prob == 0.0 || rng.random::<f64>() >= cfg.dropout_prob)
            .collect()
    };
    let keep0 = observe(p0.len(), &mut rng);
    let keep1 = observe(p1.len(), &mut rng);
    let jittered = |src: &[[f32; 3]], keep: &[usize], rng: &mut ChaCha8Rng| -> Vec<[f32; 3]> {
        keep.iter()
            .map(|&i| {
                if cfg.jitter_sigma == 0.0 {
                    src[i]
                } else {
                    src[i].map(|v| (v as f64 + jitter.sample(rng)) as f32)
                }
            })
            .collect()
    };
    let f0 = jittered(&p0, &keep0, &mut rng);
    let f1 = jittered(&p1, &keep1, &mut rng);
    let gt: Vec<f32> = keep0.iter().flat_map(|&i| flow[i]).collect();

    let mut frame_t = PointCloud::from_points(&f0).with_frame_id(0);
    let mut frame_t1 = PointCloud::from_points(&f1).with_frame_id(1);
    if cfg.reflectance {
        let refl = |n: usize, rng: &mut ChaCha8Rng| (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let r0 = refl(f0.len(), &mut rng);
        let r1 = refl(f1.len(), &mut rng);
        frame_t = frame_t.with_reflectance(r0)?;
        frame_t1 = frame_t1.with_reflectance(r1)?;
    }
    Ok(SceneSample {
        gt_flow: Some(Tensor::matrix(keep0.len(), 3, gt)?),
        frame_t,
        frame_t1,
        gt_boxes_t: boxes,
        meta: SceneMeta {
            seed,
            generator_hash: cfg.hash(),
        },
    })
}

/// Per-scene seed derived from a dataset seed and a scene id.
pub fn scene_seed(dataset_seed: u64, id: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Scenes generated on demand from `(config, seed, id)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub generator: GeneratorConfig,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn new(generator: GeneratorConfig, seed: u64) -> Result<Self> {
        generator.validate()?;
        Ok(Self { generator, seed })
    }

    pub fn scene(&self, id: u64) -> Result<SceneSample> {
        generate_scene(&self.generator, scene_seed(self.seed, id))
    }

    /// Frame pair without labels.
    pub fn pair(&self, id: u64) -> Result<UnlabeledPair> {
        Ok(self.scene(id)?.into_unlabeled())
    }
}
