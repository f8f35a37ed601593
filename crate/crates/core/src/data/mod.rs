//! Synthetic scenes with exact ground truth, KITTI ingestion, dataset splits
//! and PLY export.

mod boxes;
mod generator;
mod kitti;
mod ply;
mod split;

pub use boxes::{half_turn_yaw, normalize_yaw, Box3};
pub use generator::{
    generate_scene, scene_seed, GeneratorConfig, Range, SceneMeta, SceneSample,
    SyntheticDataset, UnlabeledPair,
};
pub use kitti::{load_kitti_bin, parse_kitti_bin, write_kitti_bin};
pub use ply::{
    build_geometry, export_ply, flow_figure, read_ply, render_ply, PlyGeometry, PlyItem, Rgb,
    BLUE, GRAY, GREEN, RED,
};
pub use split::{
    read_manifest, sample_points, subset_split, write_manifest, ManifestMeta,
    DEFAULT_SAMPLE_POINTS,
};
