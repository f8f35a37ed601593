use crate::data::Box3;

type Pt = [f64; 2];

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area, positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    0.5 * (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum::<f64>()
}

fn segment_hit(p: Pt, q: Pt, a: Pt, b: Pt) -> Pt {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise
/// polygon `clip`.
pub fn clip_polygon(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let p_in = cross(a, b, p) >= 0.0;
            let q_in = cross(a, b, q) >= 0.0;
            match (p_in, q_in) {
                (true, true) => out.push(q),
                (true, false) => out.push(segment_hit(p, q, a, b)),
                (false, true) => {
                    out.push(segment_hit(p, q, a, b));
                    out.push(q);
                }
                (false, false) => {}
            }
        }
    }
    out
}

/// Intersection over union of the bird's-eye-view rectangles; z is ignored.
pub fn bev_iou(a: &Box3, b: &Box3) -> f64 {
    let pa = a.bev_corners();
    let pb = b.bev_corners();
    let area_a = polygon_area(&pa);
    let area_b = polygon_area(&pb);
    if !(area_a > 0.0) || !(area_b > 0.0) {
        return 0.0;
    }
    let inter = polygon_area(&clip_polygon(&pa, &pb)).max(0.0);
    let union = area_a + area_b - inter;
    if !(union > 0.0) {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn bx(x: f64, y: f64, w: f64, l: f64, yaw: f64) -> Box3 {
        Box3::new([x, y, 0.0], [w, l, 1.0], yaw, 0).unwrap()
    }

    fn monte_carlo(a: &Box3, b: &Box3, n: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for c in a.bev_corners().iter().chain(b.bev_corners().iter()) {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let (mut both, mut either) = (0usize, 0usize);
        for _ in 0..n {
            let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1]), 0.0];
            let (ia, ib) = (a.contains(p), b.contains(p));
            both += usize::from(ia && ib);
            either += usize::from(ia || ib);
        }
        both as f64 / either as f64
    }

    #[test]
    fn identical_boxes() {
        let a = bx(1.0, 2.0, 1.8, 4.0, 0.7);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_offset_unit_squares() {
        let a = bx(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bx(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(bev_iou(&bx(0.0, 0.0, 1.0, 1.0, 0.3), &bx(5.0, 0.0, 1.0, 1.0, 0.0)), 0.0);
    }

    #[test]
    fn yaw_period_and_flip() {
        let a = bx(0.0, 0.0, 1.5, 4.0, 0.2);
        let b = bx(0.0, 0.0, 1.5, 4.0, 0.2 + PI);
        assert!((bev_iou(&a, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_monte_carlo_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for t in 0..8 {
            let a = bx(0.0, 0.0, rng.random_range(1.0..2.5), rng.random_range(2.0..5.0), rng.random_range(-PI..PI));
            let b = bx(
                rng.random_range(-1.5..1.5),
                rng.random_range(-1.5..1.5),
                rng.random_range(1.0..2.5),
                rng.random_range(2.0..5.0),
                rng.random_range(-PI..PI),
            );
            let mc = monte_carlo(&a, &b, 1_000_000, t);
            let iou = bev_iou(&a, &b);
            assert!((iou - mc).abs() < 0.01, "pair {t}: {iou} vs {mc}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_bounded(
            x in -3.0f64..3.0, y in -3.0f64..3.0,
            w1 in 0.5f64..3.0, l1 in 0.5f64..5.0, t1 in -PI..PI,
            w2 in 0.5f64..3.0, l2 in 0.5f64..5.0, t2 in -PI..PI,
        ) {
            let a = bx(0.0, 0.0, w1, l1, t1);
            let b = bx(x, y, w2, l2, t2);
            let ab = bev_iou(&a, &b);
            let ba = bev_iou(&b, &a);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn one_only_when_identical(
            x in -1.0f64..1.0, w in 0.5f64..3.0, l in 0.5f64..5.0, t in -PI..PI,
        ) {
            let a = bx(0.0, 0.0, w, l, t);
            let b = bx(x, 0.0, w, l, t);
            let iou = bev_iou(&a, &b);
            if x.abs() > 1e-3 {
                prop_assert!(iou < 1.0 - 1e-6);
            }
        }
    }
}
