use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use super::polygon::{clip_convex, signed_area, ConvexPolygon, Point};
use super::scalar::{Dual, Scalar};
use crate::error::{Error, Result};

/// Rotated rectangle in normalized image coordinates.
///
/// `w` spans the direction `(cos θ, sin θ)` and `h` the perpendicular
/// `(-sin θ, cos θ)`. The canonical form keeps the long side in `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl OrientedBox {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Self {
        OrientedBox { cx, cy, w, h, theta }
    }

    pub fn from_array(p: [f64; 5]) -> Self {
        OrientedBox::new(p[0], p[1], p[2], p[3], p[4])
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.cx, self.cy, self.w, self.h, self.theta]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The four corners for `j = 1..=4`, anticlockwise.
    pub fn vertices(&self) -> Result<[Point; 4]> {
        if !self.is_finite() {
            return Err(Error::Domain(format!("non-finite box {self:?}")));
        }
        Ok(box_vertices(self.to_array()))
    }

    pub fn polygon(&self) -> Result<ConvexPolygon> {
        Ok(ConvexPolygon::from_raw(self.vertices()?.to_vec()))
    }

    /// Long-side form: `h >= w`, `theta` in `[0, π)`; squares reduce `theta`
    /// into `[0, π/2)`.
    pub fn canonicalize(&self) -> OrientedBox {
        let (mut w, mut h, mut theta) = (self.w, self.h, self.theta);
        if w > h {
            std::mem::swap(&mut w, &mut h);
            theta += FRAC_PI_2;
        }
        let square = (h - w) <= 1e-12 * h.abs().max(w.abs());
        let period = if square { FRAC_PI_2 } else { PI };
        theta = theta.rem_euclid(period);
        if theta >= period {
            theta = 0.0;
        }
        OrientedBox::new(self.cx, self.cy, w, h, theta)
    }

    /// True when all four corners lie inside `[0,1]²`.
    pub fn is_inside_unit(&self) -> bool {
        box_vertices(self.to_array())
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y))
    }

    /// Point-in-rectangle test in the box frame (boundary inclusive).
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= 0.5 * self.w && v.abs() <= 0.5 * self.h
    }
}

impl fmt::Display for OrientedBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            self.cx, self.cy, self.w, self.h, self.theta
        )
    }
}

impl FromStr for OrientedBox {
    type Err = Error;

    /// Five whitespace-separated decimals `cx cy w h theta`.
    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f64> = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad box field {t:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 5 {
            return Err(Error::Format(format!(
                "box needs 5 fields \"cx cy w h theta\", got {}",
                vals.len()
            )));
        }
        let b = OrientedBox::new(vals[0], vals[1], vals[2], vals[3], vals[4]);
        if !b.is_finite() {
            return Err(Error::Domain(format!("non-finite box {s:?}")));
        }
        Ok(b)
    }
}

/// Corner `j` (1-based) coordinates, generic over the scalar type.
///
/// x_j = cx + ½(cos θ·cos(⌊(j−1)/2⌋π)·w − sin θ·cos(⌈(j+1)/2⌉π)·h)
/// y_j = cy + ½(sin θ·cos(⌊(j−1)/2⌋π)·w + cos θ·cos(⌈(j+1)/2⌉π)·h)
pub(crate) fn box_vertices<S: Scalar>(p: [S; 5]) -> [Point<S>; 4] {
    let [cx, cy, w, h, theta] = p;
    let (s, c) = (theta.sin(), theta.cos());
    let half = S::from_f64(0.5);
    let corner = |j: i32| {
        let a = S::from_f64(if (j - 1).div_euclid(2) % 2 == 0 { 1.0 } else { -1.0 });
        // ⌈(j+1)/2⌉ for j = 1..4 is 1, 2, 2, 3
        let ceil = (j + 2).div_euclid(2);
        let b = S::from_f64(if ceil % 2 == 0 { 1.0 } else { -1.0 });
        Point::new(
            cx + half * (c * a * w - s * b * h),
            cy + half * (s * a * w + c * b * h),
        )
    };
    [corner(1), corner(2), corner(3), corner(4)]
}

fn iou_generic<S: Scalar>(a: [S; 5], b: [S; 5]) -> S {
    let zero = S::from_f64(0.0);
    let area_a = a[2] * a[3];
    let area_b = b[2] * b[3];
    if area_a.value() <= 0.0 || area_b.value() <= 0.0 {
        return zero;
    }
    let pa = box_vertices(a);
    let pb = box_vertices(b);
    let inter_poly = clip_convex(&pa, &pb);
    if inter_poly.len() < 3 {
        return zero;
    }
    let inter = signed_area(&inter_poly).abs();
    let union = area_a + area_b - inter;
    if union.value() <= 0.0 {
        return zero;
    }
    let iou = inter / union;
    if iou.value() > 1.0 {
        S::from_f64(1.0)
    } else {
        iou
    }
}

/// Rotated IoU of two boxes; zero when either has non-positive area.
pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    if !a.is_finite() || !b.is_finite() {
        return 0.0;
    }
    if a.area() > 0.0 && a.canonicalize() == b.canonicalize() {
        return 1.0;
    }
    iou_generic(a.to_array(), b.to_array())
}

/// Rotated IoU together with its gradient with respect to both parameter
/// vectors `(cx, cy, w, h, theta)`.
///
/// Derivatives are propagated exactly through corner extraction, clipping
/// and the shoelace area; at configurations where a vertex sits exactly on a
/// clip edge the result is one element of the subdifferential.
pub fn rotated_iou_with_grad(a: &OrientedBox, b: &OrientedBox) -> (f64, [f64; 5], [f64; 5]) {
    let da: [Dual<10>; 5] = std::array::from_fn(|i| Dual::variable(a.to_array()[i], i));
    let db: [Dual<10>; 5] = std::array::from_fn(|i| Dual::variable(b.to_array()[i], 5 + i));
    let r = iou_generic(da, db);
    let mut ga = [0.0; 5];
    let mut gb = [0.0; 5];
    ga.copy_from_slice(&r.der[..5]);
    gb.copy_from_slice(&r.der[5..]);
    (r.val, ga, gb)
}

/// Minimum-area enclosing rectangle of a point set, in canonical form.
pub fn min_area_rect(points: &[Point]) -> Result<OrientedBox> {
    let hull = convex_hull(points);
    if hull.len() < 3 {
        return Err(Error::Domain("point set has no area".into()));
    }
    let mut best: Option<(f64, OrientedBox)> = None;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        let len = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        if len == 0.0 {
            continue;
        }
        let (ux, uy) = ((b.x - a.x) / len, (b.y - a.y) / len);
        let (vx, vy) = (-uy, ux);
        let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &hull {
            let u = p.x * ux + p.y * uy;
            let v = p.x * vx + p.y * vy;
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let area = (umax - umin) * (vmax - vmin);
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let mu = 0.5 * (umin + umax);
            let mv = 0.5 * (vmin + vmax);
            best = Some((
                area,
                OrientedBox::new(
                    mu * ux + mv * vx,
                    mu * uy + mv * vy,
                    umax - umin,
                    vmax - vmin,
                    uy.atan2(ux),
                ),
            ));
        }
    }
    best.map(|(_, b)| b.canonicalize())
        .ok_or_else(|| Error::Domain("point set has no area".into()))
}

/// Andrew's monotone chain; anticlockwise, collinear points dropped.
fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let turn = |o: Point, a: Point, b: Point| (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && turn(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Wraps an angle difference into `[-π/2, π/2)`.
pub fn wrap_angle_diff(d: f64) -> f64 {
    let r = (d + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    if r >= FRAC_PI_2 {
        r - PI
    } else {
        r
    }
}
