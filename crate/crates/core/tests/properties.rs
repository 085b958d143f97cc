mod common;

use std::f64::consts::PI;

use common::brute_force_min;
use proptest::prelude::*;
use rotdetr::config::MatchCostConfig;
use rotdetr::geom::{min_area_rect, polygon_area, polygon_clip, rotated_iou, wrap_angle_diff, ConvexPolygon, OrientedBox, Point};
use rotdetr::matching::{hungarian, match_cost};
use rotdetr::tensor::{inverse_sigmoid, sigmoid, Graph, Tensor};

fn any_box() -> impl Strategy<Value = OrientedBox> {
    (0.1..0.9f64, 0.1..0.9f64, 0.02..0.5f64, 0.02..0.5f64, -7.0..7.0f64)
        .prop_map(|(cx, cy, w, h, t)| OrientedBox::new(cx, cy, w, h, t))
}

fn rotate_about(b: &OrientedBox, phi: f64, px: f64, py: f64) -> OrientedBox {
    let (s, c) = phi.sin_cos();
    let (dx, dy) = (b.cx - px, b.cy - py);
    OrientedBox::new(px + c * dx - s * dy, py + s * dx + c * dy, b.w, b.h, b.theta + phi)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn self_iou_is_one(a in any_box()) {
        prop_assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in any_box(), b in any_box()) {
        let (x, y) = (rotated_iou(&a, &b), rotated_iou(&b, &a));
        prop_assert!((x - y).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&x));
    }

    #[test]
    fn iou_is_rotation_invariant(a in any_box(), b in any_box(), phi in -PI..PI, px in 0.0..1.0f64, py in 0.0..1.0f64) {
        let before = rotated_iou(&a, &b);
        let after = rotated_iou(&rotate_about(&a, phi, px, py), &rotate_about(&b, phi, px, py));
        prop_assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn canonicalize_is_idempotent_and_preserves_the_region(a in any_box()) {
        let c = a.canonicalize();
        prop_assert!(c.h >= c.w);
        prop_assert!((0.0..PI).contains(&c.theta));
        prop_assert_eq!(c.canonicalize(), c);
        prop_assert!((rotated_iou(&a, &c) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn vertices_round_trip_through_min_area_rect(a in any_box()) {
        let c = a.canonicalize();
        let v = c.vertices().unwrap();
        let r = min_area_rect(&v).unwrap();
        for (x, y) in [(r.cx, c.cx), (r.cy, c.cy), (r.w, c.w), (r.h, c.h)] {
            prop_assert!((x - y).abs() < 1e-9);
        }
        // near-square boxes are ambiguous by a quarter turn, which is the same region
        let period = if (c.h - c.w).abs() < 1e-9 { PI / 2.0 } else { PI };
        let d = (r.theta - c.theta).rem_euclid(period);
        prop_assert!(d.min(period - d) < 1e-9);
    }

    #[test]
    fn vertices_form_the_rectangle(a in any_box()) {
        let v = a.vertices().unwrap();
        let d = |p: Point, q: Point| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
        prop_assert!((d(v[0], v[1]) - a.h).abs() < 1e-12);
        prop_assert!((d(v[1], v[2]) - a.w).abs() < 1e-12);
        let poly = ConvexPolygon::new(v.to_vec()).unwrap();
        prop_assert!((polygon_area(&poly) - a.w * a.h).abs() < 1e-12);
    }

    #[test]
    fn clipping_is_bounded_by_both_areas(a in any_box(), b in any_box()) {
        let (pa, pb) = (a.polygon().unwrap(), b.polygon().unwrap());
        let inter = polygon_clip(&pa, &pb).area();
        prop_assert!(inter <= pa.area() + 1e-12 && inter <= pb.area() + 1e-12);
        prop_assert!((inter - polygon_clip(&pb, &pa).area()).abs() < 1e-12);
    }

    #[test]
    fn wrapped_angle_is_in_range(d in -50.0..50.0f64) {
        let w = wrap_angle_diff(d);
        prop_assert!((-PI / 2.0..PI / 2.0).contains(&w));
        let k = (d - w) / PI;
        prop_assert!((k - k.round()).abs() < 1e-9);
    }

    #[test]
    fn inverse_sigmoid_round_trips(x in 2e-5..(1.0 - 2e-5)) {
        prop_assert!((sigmoid(inverse_sigmoid(x)) - x).abs() < 1e-9);
    }

    #[test]
    fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0..30.0f64, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], v).unwrap());
        for axis in 0..2 {
            let y = g.softmax(x, axis).unwrap();
            let s = g.sum_axis(y, axis).unwrap();
            for &t in g.value(s).data() {
                prop_assert!((t - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaling_the_cost_keeps_the_optimum(
        rows in proptest::collection::vec(proptest::collection::vec(0.0..10.0f64, 5), 1..5),
        k in 0.1..10.0f64,
    ) {
        let a = hungarian(&rows).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * k).collect()).collect();
        let b = hungarian(&scaled).unwrap();
        let cost_of = |pairs: &[(usize, usize)]| pairs.iter().map(|&(i, j)| rows[i][j]).sum::<f64>();
        prop_assert!((cost_of(&b.pairs) - cost_of(&a.pairs)).abs() < 1e-9);
        prop_assert!((a.cost - brute_force_min(&rows)).abs() < 1e-9);
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        cols.dedup();
        prop_assert_eq!(cols.len(), rows.len());
    }

    #[test]
    fn match_cost_vanishes_only_for_perfect_predictions(a in any_box(), b in any_box(), p in 0.0..1.0f64) {
        let cfg = MatchCostConfig::default();
        prop_assert_eq!(match_cost(1.0, &a, &a, &cfg), 0.0);
        let c = match_cost(p, &b, &a, &cfg);
        prop_assert!(c >= 0.0);
        if c == 0.0 {
            prop_assert!((rotated_iou(&a, &b) - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn worked_vertex_and_iou_examples() {
    let v = OrientedBox::new(0.5, 0.5, 0.2, 0.1, 0.0).vertices().unwrap();
    let expect = [(0.6, 0.45), (0.6, 0.55), (0.4, 0.55), (0.4, 0.45)];
    for (p, e) in v.iter().zip(expect) {
        assert!((p.x - e.0).abs() < 1e-15 && (p.y - e.1).abs() < 1e-15);
    }
    let v = OrientedBox::new(0.5, 0.5, 0.2, 0.1, PI / 2.0).vertices().unwrap();
    assert!((v[0].x - 0.55).abs() < 1e-15 && (v[0].y - 0.6).abs() < 1e-15);
    let a = OrientedBox::new(0.5, 0.5, 0.2, 0.2, 0.0);
    let b = OrientedBox::new(0.6, 0.5, 0.2, 0.2, 0.0);
    assert!((rotated_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    let far = OrientedBox::new(0.5 + 2.0, 0.5, 0.2, 0.2, 0.0);
    assert_eq!(rotated_iou(&a, &far), 0.0);
}
