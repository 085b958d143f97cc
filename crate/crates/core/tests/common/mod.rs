//! Independent oracles shared by the integration tests and the acceptance
//! runner. Nothing here calls back into the library's own reference code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rotdetr::attention::{MsDeformAttn, OffsetInit, Reference};
use rotdetr::geom::OrientedBox;
use rotdetr::nn::{ParamStore, Session};
use rotdetr::tensor::{Graph, LevelSpec, Tensor, Var};

pub mod grads;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rand_in(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// `|a − n| / max(|a|, |n|, 1)`: relative for large gradients, absolute
/// for small ones where finite differences lose relative precision.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Compares reverse-mode gradients of `Σ r ⊙ f(inputs)` (random fixed `r`)
/// against central differences. Returns the worst relative error.
pub fn gradcheck<F>(seed: u64, inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |inputs: &[Tensor], r: &Tensor| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars);
        g.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let r = randn(&mut rng(seed ^ 0x5eed), g.shape(out));
    let rv = g.constant(r.clone());
    let prod = g.mul(out, rv).unwrap();
    let root = g.sum(prod);
    g.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let mut worst = 0.0f64;
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let fp = eval(&work, &r);
            work[i].data_mut()[j] = x0 - FD_STEP;
            let fm = eval(&work, &r);
            work[i].data_mut()[j] = x0;
            let n = (fp - fm) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, n));
        }
    }
    worst
}

/// Area-weighted blend of the four neighbours, each
/// weighted by the rectangle opposite it, zero outside the grid.
pub fn bilinear_oracle(feat: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64) -> Vec<f64> {
    let x0 = x.floor();
    let y0 = y.floor();
    let (x1, y1) = (x0 + 1.0, y0 + 1.0);
    let at = |xi: f64, yi: f64, ch: usize| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            feat[((yi as usize) * w + xi as usize) * c + ch]
        }
    };
    let a_lt = (x - x0) * (y - y0);
    let a_rt = (x1 - x) * (y - y0);
    let a_lb = (x - x0) * (y1 - y);
    let a_rb = (x1 - x) * (y1 - y);
    (0..c)
        .map(|ch| at(x0, y0, ch) * a_rb + at(x1, y0, ch) * a_lb + at(x1, y1, ch) * a_lt + at(x0, y1, ch) * a_rt)
        .collect()
}

/// Point-in-rectangle test in the box's own frame.
pub fn inside(b: &OrientedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let (dx, dy) = (x - b.cx, y - b.cy);
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= 0.5 * b.w && v.abs() <= 0.5 * b.h
}

/// Axis-aligned bounding box of a rotated rectangle.
pub fn aabb(b: &OrientedBox) -> [f64; 4] {
    let (s, c) = b.theta.sin_cos();
    let ex = 0.5 * (c.abs() * b.w + s.abs() * b.h);
    let ey = 0.5 * (s.abs() * b.w + c.abs() * b.h);
    [b.cx - ex, b.cy - ey, b.cx + ex, b.cy + ey]
}

/// Monte-Carlo IoU from `n` stratified uniform samples over the bounding box
/// of the union.
pub fn mc_iou(a: &OrientedBox, b: &OrientedBox, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ba, bb) = (aabb(a), aabb(b));
    let x0 = ba[0].min(bb[0]);
    let y0 = ba[1].min(bb[1]);
    let x1 = ba[2].max(bb[2]);
    let y1 = ba[3].max(bb[3]);
    let side = (n as f64).sqrt().ceil() as usize;
    let (sx, sy) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let (mut inter, mut union) = (0usize, 0usize);
    for i in 0..side {
        for j in 0..side {
            let x = x0 + (i as f64 + rng.random::<f64>()) * sx;
            let y = y0 + (j as f64 + rng.random::<f64>()) * sy;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as usize;
            union += (ia || ib) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Random canonical box well inside a `[0, 1]²` neighbourhood.
pub fn random_box(rng: &mut ChaCha8Rng) -> OrientedBox {
    let w = rng.random_range(0.05..0.4);
    let h = w * rng.random_range(1.0..3.0);
    OrientedBox::new(
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        w,
        h,
        rng.random_range(0.0..std::f64::consts::PI),
    )
}

/// Minimum over all injections of rows into columns, by exhaustive search.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[row][c], best);
                used[c] = false;
            }
        }
    }
    let m = cost.first().map_or(0, |r| r.len());
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

/// One deformable-attention configuration with every weight spelled out.
pub struct DeformCase {
    pub heads: usize,
    pub points: usize,
    pub channels: usize,
    /// `(h, w)` per level.
    pub shapes: Vec<(usize, usize)>,
    /// `[N, C]` flattened input.
    pub input: Vec<f64>,
    /// `[Q, C]` queries.
    pub query: Vec<f64>,
    pub refs: Vec<OrientedBox>,
    pub w_value: Vec<f64>,
    pub b_value: Vec<f64>,
    pub w_off: Vec<f64>,
    pub b_off: Vec<f64>,
    pub w_attn: Vec<f64>,
    pub b_attn: Vec<f64>,
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
}

fn affine(x: &[f64], w: &[f64], b: &[f64], fin: usize, fout: usize) -> Vec<f64> {
    (0..fout)
        .map(|o| b[o] + (0..fin).map(|i| x[i] * w[i * fout + o]).sum::<f64>())
        .collect()
}

/// Literal evaluation of deformable attention,
/// `Σ_m W_m [Σ_l Σ_k A_mlqk · W'_m x^l(φ_l(ĉ_q) + Δp_mlqk)]` one query,
/// head, level and point at a time.
pub fn deform_attn_oracle(case: &DeformCase) -> Vec<Vec<f64>> {
    let c = case.channels;
    let (m_heads, k_pts, nl) = (case.heads, case.points, case.shapes.len());
    let d = c / m_heads;
    let mut starts = Vec::new();
    let mut acc = 0;
    for &(h, w) in &case.shapes {
        starts.push(acc);
        acc += h * w;
    }
    // W' applied to every token
    let values: Vec<Vec<f64>> = case
        .input
        .chunks(c)
        .map(|x| affine(x, &case.w_value, &case.b_value, c, c))
        .collect();
    let mut outs = Vec::new();
    for (q, x) in case.query.chunks(c).enumerate() {
        let off = affine(x, &case.w_off, &case.b_off, c, m_heads * nl * k_pts * 2);
        let logits = affine(x, &case.w_attn, &case.b_attn, c, m_heads * nl * k_pts);
        let r = &case.refs[q];
        let mut heads_out = vec![0.0; c];
        for m in 0..m_heads {
            let group = &logits[m * nl * k_pts..(m + 1) * nl * k_pts];
            let mx = group.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = group.iter().map(|v| (v - mx).exp()).sum();
            for l in 0..nl {
                let (h, w) = case.shapes[l];
                for k in 0..k_pts {
                    let idx = (m * nl + l) * k_pts + k;
                    let a = (group[l * k_pts + k] - mx).exp() / z;
                    let (u, v) = (off[2 * idx], off[2 * idx + 1]);
                    let (s, co) = r.theta.sin_cos();
                    let nx = r.cx + co * u * r.w / 2.0 - s * v * r.h / 2.0;
                    let ny = r.cy + s * u * r.w / 2.0 + co * v * r.h / 2.0;
                    let px = nx * w as f64 - 0.5;
                    let py = ny * h as f64 - 0.5;
                    let level: Vec<f64> = values[starts[l]..starts[l] + h * w].iter().flatten().copied().collect();
                    let sample = bilinear_oracle(&level, h, w, c, px, py);
                    for j in 0..d {
                        heads_out[m * d + j] += a * sample[m * d + j];
                    }
                }
            }
        }
        outs.push(affine(&heads_out, &case.w_out, &case.b_out, c, c));
    }
    outs
}

pub fn random_deform_case(rng: &mut ChaCha8Rng) -> DeformCase {
    let heads = rng.random_range(1..=2);
    let points = rng.random_range(1..=4);
    let levels = rng.random_range(1..=4);
    let channels = heads * rng.random_range(1..=3);
    let queries = rng.random_range(1..=8);
    let shapes: Vec<(usize, usize)> = (0..levels).map(|_| (rng.random_range(1..=6), rng.random_range(1..=6))).collect();
    let n: usize = shapes.iter().map(|(h, w)| h * w).sum();
    let nk = heads * levels * points;
    let mut v = |len: usize, s: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(-s..s)).collect() };
    let input = v(n * channels, 1.0);
    let query = v(queries * channels, 1.0);
    let w_value = v(channels * channels, 1.0);
    let b_value = v(channels, 0.5);
    let w_off = v(channels * nk * 2, 0.6);
    let b_off = v(nk * 2, 1.0);
    let w_attn = v(channels * nk, 1.0);
    let b_attn = v(nk, 1.0);
    let w_out = v(channels * channels, 1.0);
    let b_out = v(channels, 0.5);
    let refs = (0..queries).map(|_| random_box(rng)).collect();
    DeformCase {
        heads,
        points,
        channels,
        shapes,
        input,
        query,
        refs,
        w_value,
        b_value,
        w_off,
        b_off,
        w_attn,
        b_attn,
        w_out,
        b_out,
    }
}

/// VOC07 11-point AP from a ranked list of TP flags, written directly from
/// its definition.
pub fn ap11_oracle(tp: &[bool], n_gt: usize) -> f64 {
    let mut pts = Vec::new();
    let (mut t, mut f) = (0.0, 0.0);
    for &hit in tp {
        if hit {
            t += 1.0
        } else {
            f += 1.0
        }
        pts.push((t / n_gt as f64, t / (t + f)));
    }
    let mut ap = 0.0;
    for i in 0..=10 {
        let r = i as f64 / 10.0;
        let p = pts.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
        ap += p / 11.0;
    }
    ap
}

/// Builds the library attention module with the case's weights.
pub fn library_attention(case: &DeformCase) -> Vec<f64> {
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let nl = case.shapes.len();
    let attn = MsDeformAttn::new(&mut store, &mut r, "a", case.channels, case.heads, nl, case.points, OffsetInit::Pixels).unwrap();
    let set = |store: &mut ParamStore, id, v: &[f64]| store.get_mut(id).data_mut().copy_from_slice(v);
    set(&mut store, attn.value_proj.w, &case.w_value);
    set(&mut store, attn.value_proj.b.unwrap(), &case.b_value);
    set(&mut store, attn.sampling_offsets.w, &case.w_off);
    set(&mut store, attn.sampling_offsets.b.unwrap(), &case.b_off);
    set(&mut store, attn.attention_weights.w, &case.w_attn);
    set(&mut store, attn.attention_weights.b.unwrap(), &case.b_attn);
    set(&mut store, attn.output_proj.w, &case.w_out);
    set(&mut store, attn.output_proj.b.unwrap(), &case.b_out);
    let mut s: Session = store.session(false);
    let c = case.channels;
    let n = case.input.len() / c;
    let q = case.query.len() / c;
    let input = s.graph.constant(Tensor::new(vec![n, c], case.input.clone()).unwrap());
    let query = s.graph.constant(Tensor::new(vec![q, c], case.query.clone()).unwrap());
    let mut levels = Vec::new();
    let mut start = 0;
    for &(h, w) in &case.shapes {
        levels.push(LevelSpec { start, h, w });
        start += h * w;
    }
    let t = attn.forward(&mut s, query, &Reference::Boxes(case.refs.clone()), input, &levels).unwrap();
    s.graph.value(t.out).data().to_vec()
}
