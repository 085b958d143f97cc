//! Bilinear feature sampling with zero padding, and the fused multi-scale
//! deformable sampling kernel.

use super::graph::{Graph, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// One of the four grid nodes around a continuous sample location.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub ix: usize,
    pub iy: usize,
    /// Area weight of this node.
    pub weight: f64,
    /// ∂weight/∂x and ∂weight/∂y.
    pub dx: f64,
    pub dy: f64,
}

/// Grid nodes surrounding pixel location `(x, y)` on an `h × w` grid.
///
/// Each node is weighted by the area of the sub-rectangle opposite it
/// (`F = F_lt·A_rb + F_rt·A_lb + F_rb·A_lt + F_lb·A_rt`). Nodes outside the
/// grid are omitted, which is zero padding.
#[inline]
pub fn bilinear_corners(x: f64, y: f64, h: usize, w: usize) -> [Option<Corner>; 4] {
    let mut out = [None; 4];
    if !x.is_finite() || !y.is_finite() {
        return out;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let nodes = [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    ];
    for (slot, (ix, iy, weight, dx, dy)) in out.iter_mut().zip(nodes) {
        if ix >= 0 && iy >= 0 && (ix as usize) < w && (iy as usize) < h {
            *slot = Some(Corner {
                ix: ix as usize,
                iy: iy as usize,
                weight,
                dx,
                dy,
            });
        }
    }
    out
}

/// Scalar bilinear lookup into an `[h, w, c]` buffer.
pub fn bilinear_sample_ref(feat: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for corner in bilinear_corners(x, y, h, w).into_iter().flatten() {
        let base = (corner.iy * w + corner.ix) * c;
        for (o, v) in out.iter_mut().zip(&feat[base..base + c]) {
            *o += corner.weight * v;
        }
    }
    out
}

/// Placement of one pyramid level inside a flattened `[N, C]` token buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelSpec {
    pub start: usize,
    pub h: usize,
    pub w: usize,
}

impl LevelSpec {
    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Graph {
    /// Samples `feature: [H, W, C]` at `points: [P, 2]` (pixel `(x, y)`),
    /// giving `[P, C]`. Gradients flow to the features and the points.
    pub fn bilinear_sample(&mut self, feature: Var, points: Var) -> Result<Var> {
        let sf = self.shape(feature).to_vec();
        let sp = self.shape(points).to_vec();
        if sf.len() != 3 || sp.len() != 2 || sp[1] != 2 {
            return Err(Error::dim("bilinear_sample", format!("feature {sf:?}, points {sp:?}")));
        }
        let (h, w, c) = (sf[0], sf[1], sf[2]);
        let p = sp[0];
        let fv = self.value(feature).data();
        let pv = self.value(points).data();
        let mut out = Vec::with_capacity(p * c);
        for i in 0..p {
            out.extend(bilinear_sample_ref(fv, h, w, c, pv[2 * i], pv[2 * i + 1]));
        }
        let out = Tensor::from_parts(vec![p, c], out);
        Ok(self.custom(out, &[feature, points], move |ctx| {
            let fv = ctx.input(0).data();
            let pv = ctx.input(1).data();
            let g = ctx.grad;
            let mut gf = ctx.needs(0).then(|| vec![0.0; h * w * c]);
            let mut gp = ctx.needs(1).then(|| vec![0.0; p * 2]);
            for i in 0..p {
                let gi = &g[i * c..(i + 1) * c];
                for corner in bilinear_corners(pv[2 * i], pv[2 * i + 1], h, w).into_iter().flatten() {
                    let base = (corner.iy * w + corner.ix) * c;
                    if let Some(gf) = gf.as_mut() {
                        for (d, gv) in gf[base..base + c].iter_mut().zip(gi) {
                            *d += corner.weight * gv;
                        }
                    }
                    if let Some(gp) = gp.as_mut() {
                        let dot: f64 = fv[base..base + c].iter().zip(gi).map(|(a, b)| a * b).sum();
                        gp[2 * i] += corner.dx * dot;
                        gp[2 * i + 1] += corner.dy * dot;
                    }
                }
            }
            vec![gf, gp]
        }))
    }

    /// Multi-scale deformable sampling.
    ///
    /// `value: [N, C]` holds every level flattened per `levels`, with channels
    /// split into `heads` groups of `C / heads`. `loc: [Q, M, L, K, 2]` are
    /// pixel coordinates on each level and `attn: [Q, M, L, K]` the weights.
    /// Output `[Q, C]`: for head `m`, `Σ_l Σ_k attn · sample(value_l, loc)`.
    pub fn ms_deform_sample(
        &mut self,
        value: Var,
        levels: &[LevelSpec],
        heads: usize,
        loc: Var,
        attn: Var,
    ) -> Result<Var> {
        let sv = self.shape(value).to_vec();
        let sl = self.shape(loc).to_vec();
        let sa = self.shape(attn).to_vec();
        let nl = levels.len();
        let bad = sv.len() != 2
            || heads == 0
            || sv[1] % heads != 0
            || sl.len() != 5
            || sl[1] != heads
            || sl[2] != nl
            || sl[4] != 2
            || sa != sl[..4]
            || levels.iter().any(|l| l.start + l.len() > sv[0]);
        if bad {
            return Err(Error::dim(
                "ms_deform_sample",
                format!("value {sv:?}, loc {sl:?}, attn {sa:?}, {nl} levels, {heads} heads"),
            ));
        }
        let c = sv[1];
        let d = c / heads;
        let (q, k) = (sl[0], sl[3]);
        let levels = levels.to_vec();
        let vv = self.value(value).data();
        let lv = self.value(loc).data();
        let av = self.value(attn).data();
        let mut out = vec![0.0; q * c];
        for qi in 0..q {
            for m in 0..heads {
                let o = &mut out[qi * c + m * d..qi * c + (m + 1) * d];
                for (li, lvl) in levels.iter().enumerate() {
                    for ki in 0..k {
                        let s = ((qi * heads + m) * nl + li) * k + ki;
                        let a = av[s];
                        for corner in bilinear_corners(lv[2 * s], lv[2 * s + 1], lvl.h, lvl.w).into_iter().flatten() {
                            let row = lvl.start + corner.iy * lvl.w + corner.ix;
                            let src = &vv[row * c + m * d..row * c + (m + 1) * d];
                            let wgt = a * corner.weight;
                            o.iter_mut().zip(src).for_each(|(o, v)| *o += wgt * v);
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![q, c], out);
        Ok(self.custom(out, &[value, loc, attn], move |ctx| {
            let vv = ctx.input(0).data();
            let lv = ctx.input(1).data();
            let av = ctx.input(2).data();
            let g = ctx.grad;
            let mut gv = ctx.needs(0).then(|| vec![0.0; vv.len()]);
            let mut gl = vec![0.0; lv.len()];
            let mut ga = vec![0.0; av.len()];
            for qi in 0..q {
                for m in 0..heads {
                    let go = &g[qi * c + m * d..qi * c + (m + 1) * d];
                    for (li, lvl) in levels.iter().enumerate() {
                        for ki in 0..k {
                            let s = ((qi * heads + m) * nl + li) * k + ki;
                            let a = av[s];
                            let (mut dx, mut dy, mut da) = (0.0, 0.0, 0.0);
                            for corner in bilinear_corners(lv[2 * s], lv[2 * s + 1], lvl.h, lvl.w).into_iter().flatten() {
                                let row = lvl.start + corner.iy * lvl.w + corner.ix;
                                let src = &vv[row * c + m * d..row * c + (m + 1) * d];
                                let dot: f64 = src.iter().zip(go).map(|(v, g)| v * g).sum();
                                da += corner.weight * dot;
                                dx += corner.dx * dot;
                                dy += corner.dy * dot;
                                if let Some(gv) = gv.as_mut() {
                                    let wgt = a * corner.weight;
                                    gv[row * c + m * d..row * c + (m + 1) * d]
                                        .iter_mut()
                                        .zip(go)
                                        .for_each(|(t, g)| *t += wgt * g);
                                }
                            }
                            ga[s] = da;
                            gl[2 * s] = a * dx;
                            gl[2 * s + 1] = a * dy;
                        }
                    }
                }
            }
            vec![gv, ctx.needs(1).then_some(gl), ctx.needs(2).then_some(ga)]
        }))
    }
}
