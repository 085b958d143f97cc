//! Geometry of oriented boxes: corners, convex clipping, areas and rotated
//! IoU with exact first derivatives.

mod obb;
mod polygon;
pub mod scalar;

pub use obb::{min_area_rect, rotated_iou, rotated_iou_with_grad, wrap_angle_diff, OrientedBox};
pub use polygon::{ConvexPolygon, Intersection, Point, CROSS_EPS, DEDUP_EPS};

pub(crate) use obb::box_vertices;

/// Shoelace area of a convex polygon (0 for fewer than three vertices).
pub fn polygon_area(poly: &ConvexPolygon) -> f64 {
    poly.area()
}

/// Convex intersection of `subject` and `clip`.
pub fn polygon_clip(subject: &ConvexPolygon, clip: &ConvexPolygon) -> Intersection {
    subject.clip(clip)
}

/// The four corners of `b`, anticlockwise for `j = 1..=4`.
pub fn box_vertices_of(b: &OrientedBox) -> crate::Result<[Point; 4]> {
    b.vertices()
}
