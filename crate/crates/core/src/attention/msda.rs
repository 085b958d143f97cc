//! Multi-scale deformable attention.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::nn::{Init, Linear, ParamStore, Session};
use crate::tensor::{Graph, LevelSpec, Tensor, Var};

/// Where each query's sampling points are anchored.
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Normalized `(x, y)`; offsets are in pixels of each level.
    Points(Vec<[f64; 2]>),
    /// Normalized oriented boxes; an offset `(u, v)` lands at
    /// `c + R(θ)·(u·w/2, v·h/2)`.
    Boxes(Vec<OrientedBox>),
}

impl Reference {
    pub fn len(&self) -> usize {
        match self {
            Reference::Points(p) => p.len(),
            Reference::Boxes(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reference center of query `q`.
    pub fn center(&self, q: usize) -> [f64; 2] {
        match self {
            Reference::Points(p) => p[q],
            Reference::Boxes(b) => [b[q].cx, b[q].cy],
        }
    }
}

/// Per-level pixel location of offset `(u, v)` around reference `q`, and the
/// Jacobian `[[∂x/∂u, ∂x/∂v], [∂y/∂u, ∂y/∂v]]`.
fn locate(refs: &Reference, q: usize, lvl: &LevelSpec, u: f64, v: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let (w, h) = (lvl.w as f64, lvl.h as f64);
    match refs {
        Reference::Points(p) => {
            let [x, y] = p[q];
            ([x * w - 0.5 + u, y * h - 0.5 + v], [[1.0, 0.0], [0.0, 1.0]])
        }
        Reference::Boxes(b) => {
            let b = &b[q];
            let (s, c) = b.theta.sin_cos();
            let (hw, hh) = (0.5 * b.w, 0.5 * b.h);
            let nx = b.cx + c * u * hw - s * v * hh;
            let ny = b.cy + s * u * hw + c * v * hh;
            (
                [nx * w - 0.5, ny * h - 0.5],
                [[w * c * hw, -w * s * hh], [h * s * hw, h * c * hh]],
            )
        }
    }
}

/// Converts raw offsets `[Q, M·L·K·2]` into pixel locations `[Q, M, L, K, 2]`.
pub fn sampling_locations(
    g: &mut Graph,
    offsets: Var,
    refs: &Reference,
    levels: &[LevelSpec],
    heads: usize,
    points: usize,
) -> Result<Var> {
    let nl = levels.len();
    let per_q = heads * nl * points * 2;
    let s = g.shape(offsets).to_vec();
    if s.len() != 2 || s[1] != per_q || s[0] != refs.len() {
        return Err(Error::dim(
            "sampling_locations",
            format!("offsets {s:?}, {} refs, {heads}x{nl}x{points} points", refs.len()),
        ));
    }
    let q = s[0];
    let off = g.value(offsets).data();
    let mut out = vec![0.0; q * per_q];
    let mut jac = vec![[[0.0; 2]; 2]; q * nl];
    for qi in 0..q {
        for (li, lvl) in levels.iter().enumerate() {
            jac[qi * nl + li] = locate(refs, qi, lvl, 0.0, 0.0).1;
        }
        for m in 0..heads {
            for (li, lvl) in levels.iter().enumerate() {
                for k in 0..points {
                    let i = qi * per_q + ((m * nl + li) * points + k) * 2;
                    let (p, _) = locate(refs, qi, lvl, off[i], off[i + 1]);
                    out[i] = p[0];
                    out[i + 1] = p[1];
                }
            }
        }
    }
    let value = Tensor::from_parts(vec![q, heads, nl, points, 2], out);
    Ok(g.custom(value, &[offsets], move |ctx| {
        let mut gi = vec![0.0; ctx.grad.len()];
        for qi in 0..q {
            for m in 0..heads {
                for li in 0..nl {
                    let j = jac[qi * nl + li];
                    for k in 0..points {
                        let i = qi * per_q + ((m * nl + li) * points + k) * 2;
                        let (gx, gy) = (ctx.grad[i], ctx.grad[i + 1]);
                        gi[i] = gx * j[0][0] + gy * j[1][0];
                        gi[i + 1] = gx * j[0][1] + gy * j[1][1];
                    }
                }
            }
        }
        vec![Some(gi)]
    }))
}

/// How the offset biases are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetInit {
    /// Point `k` of head `m` starts `k + 1` pixels along the head's direction.
    Pixels,
    /// Point `k` starts at `(k + 1)/K` of the box half-extent.
    BoxFraction,
}

#[derive(Debug, Clone)]
pub struct MsDeformAttn {
    pub channels: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub value_proj: Linear,
    pub sampling_offsets: Linear,
    pub attention_weights: Linear,
    pub output_proj: Linear,
}

/// Intermediate values of one attention call.
pub struct AttnTrace {
    pub out: Var,
    /// `[Q, M, L, K, 2]` pixel locations.
    pub locations: Var,
    /// `[Q, M, L, K]` normalized weights.
    pub weights: Var,
}

impl MsDeformAttn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        heads: usize,
        levels: usize,
        points: usize,
        init: OffsetInit,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide {channels} channels")));
        }
        let n = heads * levels * points;
        let sampling_offsets = Linear::new(store, rng, &format!("{name}.sampling_offsets"), channels, 2 * n, Init::Zeros);
        let bias = store.get_mut(sampling_offsets.b.expect("bias"));
        for m in 0..heads {
            let a = 2.0 * PI * m as f64 / heads as f64;
            let (s, c) = a.sin_cos();
            let scale = c.abs().max(s.abs());
            let (dx, dy) = (c / scale, s / scale);
            for l in 0..levels {
                for k in 0..points {
                    let r = match init {
                        OffsetInit::Pixels => (k + 1) as f64,
                        OffsetInit::BoxFraction => (k + 1) as f64 / points as f64,
                    };
                    let i = ((m * levels + l) * points + k) * 2;
                    bias.data_mut()[i] = dx * r;
                    bias.data_mut()[i + 1] = dy * r;
                }
            }
        }
        Ok(MsDeformAttn {
            channels,
            heads,
            levels,
            points,
            value_proj: Linear::new(store, rng, &format!("{name}.value_proj"), channels, channels, Init::Xavier),
            sampling_offsets,
            attention_weights: Linear::new(store, rng, &format!("{name}.attention_weights"), channels, n, Init::Zeros),
            output_proj: Linear::new(store, rng, &format!("{name}.output_proj"), channels, channels, Init::Xavier),
        })
    }

    /// `query: [Q, C]` attends into `input: [N, C]` laid out per `levels`.
    pub fn forward(
        &self,
        s: &mut Session,
        query: Var,
        refs: &Reference,
        input: Var,
        levels: &[LevelSpec],
    ) -> Result<AttnTrace> {
        if levels.len() != self.levels {
            return Err(Error::dim("ms_deform_attn", format!("{} levels, expected {}", levels.len(), self.levels)));
        }
        let q = s.graph.shape(query)[0];
        let value = self.value_proj.forward(s, input)?;
        let off = self.sampling_offsets.forward(s, query)?;
        let locations = sampling_locations(&mut s.graph, off, refs, levels, self.heads, self.points)?;
        let logits = self.attention_weights.forward(s, query)?;
        let logits = s.graph.reshape(logits, &[q, self.heads, self.levels * self.points])?;
        let weights = s.graph.softmax(logits, 2)?;
        let weights = s.graph.reshape(weights, &[q, self.heads, self.levels, self.points])?;
        let sampled = s.graph.ms_deform_sample(value, levels, self.heads, locations, weights)?;
        let out = self.output_proj.forward(s, sampled)?;
        Ok(AttnTrace { out, locations, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn head_count_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = MsDeformAttn::new(&mut store, &mut rng, "a", 10, 3, 1, 1, OffsetInit::Pixels).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn initial_weights_are_uniform() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = MsDeformAttn::new(&mut store, &mut rng, "a", 8, 2, 2, 3, OffsetInit::Pixels).unwrap();
        let mut s = store.session(false);
        let levels = [LevelSpec { start: 0, h: 4, w: 4 }, LevelSpec { start: 16, h: 2, w: 2 }];
        let input = s.graph.constant(crate::nn::normal(&mut rng, &[20, 8], 1.0));
        let query = s.graph.constant(crate::nn::normal(&mut rng, &[3, 8], 1.0));
        let refs = Reference::Points(vec![[0.5, 0.5], [0.1, 0.9], [0.0, 0.0]]);
        let t = a.forward(&mut s, query, &refs, input, &levels).unwrap();
        for &w in s.graph.value(t.weights).data() {
            assert!((w - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(s.graph.shape(t.out), &[3, 8]);
    }

    #[test]
    fn box_offsets_follow_rotation() {
        let lvl = LevelSpec { start: 0, h: 10, w: 10 };
        let b = OrientedBox::new(0.5, 0.5, 0.2, 0.4, std::f64::consts::FRAC_PI_2);
        let refs = Reference::Boxes(vec![b]);
        // u = 1 walks half the width along (cos θ, sin θ) = (0, 1)
        let (p, _) = locate(&refs, 0, &lvl, 1.0, 0.0);
        assert!((p[0] - 4.5).abs() < 1e-12 && (p[1] - 5.5).abs() < 1e-12, "{p:?}");
        let (p, _) = locate(&refs, 0, &lvl, 0.0, 1.0);
        assert!((p[0] - 2.5).abs() < 1e-12 && (p[1] - 4.5).abs() < 1e-12, "{p:?}");
    }
}
