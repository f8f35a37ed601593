//! ASCII PLY export of points, flow segments and box wireframes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::Box3;
use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub type Rgb = [u8; 3];

/// Full frame `t+1`.
pub const GRAY: Rgb = [128, 128, 128];
/// Sampled points at frame `t`.
pub const RED: Rgb = [255, 0, 0];
/// Propagated points.
pub const GREEN: Rgb = [0, 255, 0];
pub const BLUE: Rgb = [0, 0, 255];

#[derive(Clone, Debug)]
pub enum PlyItem {
    Points { xyz: Tensor<f32>, color: Rgb },
    /// Segments from each origin to origin + vector.
    Flow {
        origins: Tensor<f32>,
        vectors: Tensor<f32>,
        color: Rgb,
    },
    Wireframe { boxes: Vec<Box3>, color: Rgb },
}

/// Vertices and edges as read back from a PLY file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlyGeometry {
    pub vertices: Vec<([f32; 3], Rgb)>,
    pub edges: Vec<(usize, usize)>,
}

const BOX_EDGES: [(usize, usize); 12] = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
];

pub fn build_geometry(items: &[PlyItem]) -> Result<PlyGeometry> {
    let mut g = PlyGeometry::default();
    for item in items {
        match item {
            PlyItem::Points { xyz, color } => {
                for i in 0..xyz.rows() {
                    g.vertices.push((xyz.point(i), *color));
                }
            }
            PlyItem::Flow {
                origins,
                vectors,
                color,
            } => {
                if origins.shape() != vectors.shape() {
                    return Err(Error::shape("ply flow", origins.shape(), vectors.shape()));
                }
                for i in 0..origins.rows() {
                    let o = origins.point(i);
                    let v = vectors.point(i);
                    let base = g.vertices.len();
                    g.vertices.push((o, *color));
                    g.vertices.push(([o[0] + v[0], o[1] + v[1], o[2] + v[2]], *color));
                    g.edges.push((base, base + 1));
                }
            }
            PlyItem::Wireframe { boxes, color } => {
                for b in boxes {
                    let base = g.vertices.len();
                    for c in b.corners() {
                        g.vertices.push((c.map(|v| v as f32), *color));
                    }
                    g.edges.extend(BOX_EDGES.iter().map(|&(a, e)| (base + a, base + e)));
                }
            }
        }
    }
    Ok(g)
}

pub fn render_ply(g: &PlyGeometry) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", g.vertices.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if !g.edges.is_empty() {
        let _ = writeln!(s, "element edge {}", g.edges.len());
        s.push_str("property int vertex1\nproperty int vertex2\n");
    }
    s.push_str("end_header\n");
    for (p, c) in &g.vertices {
        let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    for (a, b) in &g.edges {
        let _ = writeln!(s, "{a} {b}");
    }
    s
}

pub fn export_ply(items: &[PlyItem], path: impl AsRef<Path>) -> Result<()> {
    let g = build_geometry(items)?;
    if g.vertices.is_empty() {
        return Err(Error::Empty("export_ply"));
    }
    fs::write(path, render_ply(&g))?;
    Ok(())
}

/// Reads the ASCII subset written by [`export_ply`].
pub fn read_ply(path: impl AsRef<Path>) -> Result<PlyGeometry> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n').map(|l| {
        let at = offset;
        offset += l.len();
        (at, l.trim())
    });
    let (at, magic) = lines.next().ok_or_else(|| fail(0, "empty file".into()))?;
    if magic != "ply" {
        return Err(fail(at, "missing `ply` magic".into()));
    }
    let (mut nv, mut ne) = (0usize, 0usize);
    loop {
        let (at, l) = lines.next().ok_or_else(|| fail(text.len(), "unterminated header".into()))?;
        if l == "end_header" {
            break;
        }
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["format", f, _] if *f != "ascii" => return Err(fail(at, format!("unsupported format {f}"))),
            ["element", "vertex", n] => nv = n.parse().map_err(|_| fail(at, "bad vertex count".into()))?,
            ["element", "edge", n] => ne = n.parse().map_err(|_| fail(at, "bad edge count".into()))?,
            _ => {}
        }
    }
    let mut g = PlyGeometry::default();
    for _ in 0..nv {
        let (at, l) = lines.next().ok_or_else(|| fail(text.len(), "missing vertex".into()))?;
        let v: Vec<&str> = l.split_whitespace().collect();
        if v.len() != 6 {
            return Err(fail(at, format!("vertex line has {} fields", v.len())));
        }
        let f = |k: usize| v[k].parse::<f32>().map_err(|_| fail(at, format!("bad float `{}`", v[k])));
        let u = |k: usize| v[k].parse::<u8>().map_err(|_| fail(at, format!("bad color `{}`", v[k])));
        g.vertices.push(([f(0)?, f(1)?, f(2)?], [u(3)?, u(4)?, u(5)?]));
    }
    for _ in 0..ne {
        let (at, l) = lines.next().ok_or_else(|| fail(text.len(), "missing edge".into()))?;
        let v: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| fail(at, format!("bad edge `{l}`"))))
            .collect::<Result<_>>()?;
        if v.len() != 2 || v[0] >= nv || v[1] >= nv {
            return Err(fail(at, format!("bad edge `{l}`")));
        }
        g.edges.push((v[0], v[1]));
    }
    Ok(g)
}

/// The usual flow figure: full frame `t+1` in gray, sampled frame-`t`
/// points in red, propagated points in green.
pub fn flow_figure(frame_t1: &Tensor<f32>, sampled_t: &Tensor<f32>, propagated: &Tensor<f32>) -> Vec<PlyItem> {
    vec![
        PlyItem::Points {
            xyz: frame_t1.clone(),
            color: GRAY,
        },
        PlyItem::Points {
            xyz: sampled_t.clone(),
            color: RED,
        },
        PlyItem::Points {
            xyz: propagated.clone(),
            color: GREEN,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.ply");
        let items = [PlyItem::Points {
            xyz: Tensor::from_points(&[[1.0, 2.0, 3.0]]),
            color: RED,
        }];
        export_ply(&items, &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("ply\nformat ascii 1.0\nelement vertex 1\n"));
        assert!(!text.contains("element edge"));
        assert_eq!(read_ply(&p).unwrap().vertices, vec![([1.0, 2.0, 3.0], RED)]);
    }

    #[test]
    fn figure_colors() {
        let a = Tensor::from_points(&[[0.0; 3]]);
        let colors: Vec<Rgb> = flow_figure(&a, &a, &a)
            .iter()
            .map(|i| match i {
                PlyItem::Points { color, .. } => *color,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(colors, vec![GRAY, RED, GREEN]);
    }

    #[test]
    fn roundtrip_with_segments_and_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scene.ply");
        let pts = Tensor::from_points(&[[0.123456, -7.5, 1e-3], [12.345678, 0.0, -3.25]]);
        let vec = Tensor::from_points(&[[0.5, 0.0, 0.0], [0.0, -1.0 / 3.0, 0.0]]);
        let b = Box3::new([1.0, 2.0, 0.75], [1.8, 4.2, 1.5], 0.3, 0).unwrap();
        let items = [
            PlyItem::Points {
                xyz: pts.clone(),
                color: GRAY,
            },
            PlyItem::Flow {
                origins: pts.clone(),
                vectors: vec,
                color: GREEN,
            },
            PlyItem::Wireframe {
                boxes: vec![b],
                color: BLUE,
            },
        ];
        export_ply(&items, &p).unwrap();
        let want = build_geometry(&items).unwrap();
        let got = read_ply(&p).unwrap();
        assert_eq!(got.vertices.len(), 2 + 4 + 8);
        assert_eq!(got.edges.len(), 2 + 12);
        assert_eq!(got.edges, want.edges);
        for ((a, ca), (b, cb)) in got.vertices.iter().zip(&want.vertices) {
            assert_eq!(ca, cb);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-5 * b[k].abs().max(1.0));
            }
        }
    }

    #[test]
    fn empty_geometry_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let items = [PlyItem::Points {
            xyz: Tensor::from_points(&[]),
            color: RED,
        }];
        assert!(matches!(
            export_ply(&items, dir.path().join("e.ply")),
            Err(Error::Empty(_))
        ));
    }
}
