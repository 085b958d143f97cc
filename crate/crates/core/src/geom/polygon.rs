//! Convex polygons: Sutherland–Hodgman clipping and shoelace area.

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Absolute tolerance on cross products for inside tests and parallel edges.
pub const CROSS_EPS: f64 = 1e-12;
/// Output vertices closer than this are merged.
pub const DEDUP_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<S = f64> {
    pub x: S,
    pub y: S,
}

impl<S: Scalar> Point<S> {
    pub fn new(x: S, y: S) -> Self {
        Point { x, y }
    }

    fn sub(self, o: Self) -> Self {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn value(self) -> Point<f64> {
        Point::new(self.x.value(), self.y.value())
    }
}

#[inline]
fn cross<S: Scalar>(a: Point<S>, b: Point<S>) -> S {
    a.x * b.y - a.y * b.x
}

/// Signed shoelace area, positive for anticlockwise order.
pub(crate) fn signed_area<S: Scalar>(pts: &[Point<S>]) -> S {
    let n = pts.len();
    let mut acc = S::from_f64(0.0);
    if n < 3 {
        return acc;
    }
    for i in 0..n {
        let p = pts[i];
        let q = pts[(i + 1) % n];
        acc = acc + cross(p, q);
    }
    acc * S::from_f64(0.5)
}

/// Clips `subject` against every edge of the anticlockwise convex `clip`.
pub(crate) fn clip_convex<S: Scalar>(subject: &[Point<S>], clip: &[Point<S>]) -> Vec<Point<S>> {
    let mut output: Vec<Point<S>> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b.sub(a);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let s = input[j];
            let e = input[(j + 1) % m];
            let cs = cross(edge, s.sub(a));
            let ce = cross(edge, e.sub(a));
            let s_in = cs.value() >= -CROSS_EPS;
            let e_in = ce.value() >= -CROSS_EPS;
            if s_in {
                output.push(s);
            }
            if s_in != e_in {
                let denom = cs - ce;
                if denom.value().abs() > CROSS_EPS {
                    let t = cs / denom;
                    output.push(Point::new(s.x + t * (e.x - s.x), s.y + t * (e.y - s.y)));
                }
            }
        }
    }
    dedup(output)
}

fn dedup<S: Scalar>(pts: Vec<Point<S>>) -> Vec<Point<S>> {
    let mut out: Vec<Point<S>> = Vec::with_capacity(pts.len());
    for p in pts {
        if let Some(last) = out.last() {
            if close(last.value(), p.value()) {
                continue;
            }
        }
        out.push(p);
    }
    while out.len() > 1 && close(out[0].value(), out[out.len() - 1].value()) {
        out.pop();
    }
    out
}

fn close(a: Point<f64>, b: Point<f64>) -> bool {
    (a.x - b.x).abs() < DEDUP_EPS && (a.y - b.y).abs() < DEDUP_EPS
}

/// A convex polygon with anticlockwise vertex order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexPolygon {
    vertices: Vec<Point>,
}

/// Result of intersecting two convex polygons.
#[derive(Debug, Clone, PartialEq)]
pub enum Intersection {
    Region(ConvexPolygon),
    Empty,
    /// One of the inputs has zero area.
    Degenerate,
}

impl Intersection {
    pub fn area(&self) -> f64 {
        match self {
            Intersection::Region(p) => p.area(),
            _ => 0.0,
        }
    }
}

impl ConvexPolygon {
    /// Validates convexity and anticlockwise order (collinear runs allowed).
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Domain("polygon vertex is not finite".into()));
        }
        let n = vertices.len();
        if n >= 3 {
            for i in 0..n {
                let a = vertices[i];
                let b = vertices[(i + 1) % n];
                let c = vertices[(i + 2) % n];
                if cross(b.sub(a), c.sub(b)) < -CROSS_EPS {
                    return Err(Error::Domain(
                        "polygon is not convex and anticlockwise".into(),
                    ));
                }
            }
        }
        Ok(ConvexPolygon { vertices })
    }

    pub(crate) fn from_raw(vertices: Vec<Point>) -> Self {
        ConvexPolygon { vertices }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Shoelace area; zero for fewer than three vertices.
    pub fn area(&self) -> f64 {
        signed_area(&self.vertices).abs()
    }

    pub fn is_degenerate(&self) -> bool {
        self.vertices.len() < 3 || self.area() <= CROSS_EPS
    }

    /// Intersection region of two convex polygons.
    pub fn clip(&self, clip: &ConvexPolygon) -> Intersection {
        if self.is_degenerate() || clip.is_degenerate() {
            return Intersection::Degenerate;
        }
        let out = clip_convex(&self.vertices, &clip.vertices);
        let poly = ConvexPolygon::from_raw(out);
        if poly.vertices.len() < 3 || poly.area() <= 0.0 {
            Intersection::Empty
        } else {
            Intersection::Region(poly)
        }
    }

    /// Even-odd free inside test for convex anticlockwise polygons.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            cross(b.sub(a), p.sub(a)) >= 0.0
        })
    }
}
