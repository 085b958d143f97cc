use rand_chacha::ChaCha8Rng;

use super::msda::{MsDeformAttn, OffsetInit, Reference};
use super::TokenSequence;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::nn::{Init, LayerNorm, Linear, Mlp, ParamStore, Session};
use crate::tensor::{sigmoid, Graph, Var};

/// Log-odds of a 1% prior; initial class bias of every detection head.
pub const PRIOR_BIAS: f64 = -4.59511985013459;

/// Standard multi-head attention over a small query set.
#[derive(Debug, Clone)]
pub struct Mha {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Mha {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, heads: usize) -> Result<Self> {
        if heads == 0 || c % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide {c} channels")));
        }
        Ok(Mha {
            heads,
            q: Linear::new(store, rng, &format!("{name}.q"), c, c, Init::Xavier),
            k: Linear::new(store, rng, &format!("{name}.k"), c, c, Init::Xavier),
            v: Linear::new(store, rng, &format!("{name}.v"), c, c, Init::Xavier),
            o: Linear::new(store, rng, &format!("{name}.o"), c, c, Init::Xavier),
        })
    }

    pub fn forward(&self, s: &mut Session, query: Var, key: Var, value: Var) -> Result<Var> {
        let c = s.graph.shape(query)[1];
        let d = c / self.heads;
        let q = self.q.forward(s, query)?;
        let k = self.k.forward(s, key)?;
        let v = self.v.forward(s, value)?;
        let mut outs = Vec::with_capacity(self.heads);
        for m in 0..self.heads {
            let qh = s.graph.slice(q, 1, m * d, (m + 1) * d)?;
            let kh = s.graph.slice(k, 1, m * d, (m + 1) * d)?;
            let vh = s.graph.slice(v, 1, m * d, (m + 1) * d)?;
            let logits = s.graph.matmul_nt(qh, kh)?;
            let logits = s.graph.scale(logits, 1.0 / (d as f64).sqrt());
            let a = s.graph.softmax(logits, 1)?;
            outs.push(s.graph.matmul(a, vh)?);
        }
        let cat = s.graph.concat(&outs, 1)?;
        self.o.forward(s, cat)
    }
}

/// Self-attention → deformable cross-attention → FFN, each followed by
/// add & norm.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: Mha,
    pub norm1: LayerNorm,
    pub cross_attn: MsDeformAttn,
    pub norm2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(DecoderLayer {
            self_attn: Mha::new(store, rng, &format!("{name}.self_attn"), c, cfg.heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            cross_attn: MsDeformAttn::new(
                store,
                rng,
                &format!("{name}.cross_attn"),
                c,
                cfg.heads,
                cfg.levels,
                cfg.points,
                OffsetInit::BoxFraction,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), c, cfg.ffn_dim, Init::FanIn),
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), cfg.ffn_dim, c, Init::FanIn),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), c),
        })
    }

    /// Returns the updated queries and the `[Q, M, L, K, 2]` sampling
    /// locations of the cross-attention.
    pub fn forward(
        &self,
        s: &mut Session,
        tgt: Var,
        pos: Var,
        refs: &Reference,
        memory: &TokenSequence,
    ) -> Result<(Var, Var)> {
        let qk = s.graph.add(tgt, pos)?;
        let a = self.self_attn.forward(s, qk, qk, tgt)?;
        let x = s.graph.add(tgt, a)?;
        let x = self.norm1.forward(s, x)?;
        let q = s.graph.add(x, pos)?;
        let trace = self.cross_attn.forward(s, q, refs, memory.tokens, &memory.levels)?;
        let x = s.graph.add(x, trace.out)?;
        let x = self.norm2.forward(s, x)?;
        let h = self.ffn1.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = self.ffn2.forward(s, h)?;
        let x = s.graph.add(x, h)?;
        Ok((self.norm3.forward(s, x)?, trace.locations))
    }
}

/// Box regression head: one five-output MLP, or with the angle branch a
/// four-output MLP for `(x, y, w, h)` plus a separate one for `θ`.
#[derive(Debug, Clone)]
pub struct BoxHead {
    pub main: Mlp,
    pub angle: Option<Mlp>,
}

impl BoxHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize, angle_branch: bool) -> Self {
        if angle_branch {
            BoxHead {
                main: Mlp::new(store, rng, &format!("{name}.box"), &[c, c, c, 4], Init::Zeros),
                angle: Some(Mlp::new(store, rng, &format!("{name}.angle"), &[c, c, c, 1], Init::Zeros)),
            }
        } else {
            BoxHead {
                main: Mlp::new(store, rng, &format!("{name}.box"), &[c, c, c, 5], Init::Zeros),
                angle: None,
            }
        }
    }

    /// `[N, 5]` deltas in parameter space.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let d = self.main.forward(s, x)?;
        match &self.angle {
            None => Ok(d),
            Some(a) => {
                let t = a.forward(s, x)?;
                s.graph.concat(&[d, t], 1)
            }
        }
    }
}

/// `[N, 5]` box parameters `(σ⁻¹cx, σ⁻¹cy, σ⁻¹w, σ⁻¹h, θ)` to boxes
/// `(cx, cy, w, h, θ)`.
pub fn params_to_boxes(g: &mut Graph, u: Var) -> Result<Var> {
    let xywh = g.slice(u, 1, 0, 4)?;
    let xywh = g.sigmoid(xywh);
    let t = g.slice(u, 1, 4, 5)?;
    g.concat(&[xywh, t], 1)
}

/// Plain-value version of [`params_to_boxes`].
pub fn param_rows_to_boxes(u: &[f64]) -> Vec<OrientedBox> {
    u.chunks(5)
        .map(|r| OrientedBox::new(sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3]), r[4]))
        .collect()
}

/// Decoder input: query content, query position and the initial reference.
pub struct QueryInit {
    /// `[Q, C]`.
    pub tgt: Var,
    /// `[Q, C]`.
    pub pos: Var,
    /// `[Q, 5]` initial reference in parameter space.
    pub ref_params: Var,
    /// The initial reference is a bare point (learned queries); the first
    /// layer then samples in pixel offsets around it.
    pub point_ref: bool,
}

/// What one decoder layer's heads predict.
pub struct LayerOutput {
    /// `[Q, classes]`.
    pub logits: Var,
    /// `[Q, 5]` parameter-space boxes.
    pub params: Var,
    /// `[Q, 5]` boxes.
    pub boxes: Var,
    /// Reference used by this layer's cross-attention.
    pub reference: Reference,
    /// `[Q, M, L, K, 2]` pixel sampling locations.
    pub locations: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// One class head per layer (not shared).
    pub class_heads: Vec<Linear>,
    pub box_heads: Vec<BoxHead>,
    pub ibr: bool,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let mut layers = Vec::new();
        let mut class_heads = Vec::new();
        let mut box_heads = Vec::new();
        for i in 0..cfg.dec_layers {
            layers.push(DecoderLayer::new(store, rng, &format!("decoder.{i}"), cfg)?);
            let cls = Linear::new(store, rng, &format!("decoder.{i}.class"), cfg.channels, cfg.classes, Init::FanIn);
            store.get_mut(cls.b.expect("bias")).data_mut().fill(PRIOR_BIAS);
            class_heads.push(cls);
            box_heads.push(BoxHead::new(store, rng, &format!("decoder.{i}.head"), cfg.channels, cfg.angle_branch));
        }
        Ok(Decoder {
            layers,
            class_heads,
            box_heads,
            ibr: cfg.ibr,
        })
    }

    /// Runs every layer; layer `d` predicts `σ(Δ_d + σ⁻¹(b_ref))` where the
    /// reference is the previous layer's detached box (or the initial
    /// reference throughout when refinement is off).
    pub fn forward(&self, s: &mut Session, init: &QueryInit, memory: &TokenSequence) -> Result<Vec<LayerOutput>> {
        let mut tgt = init.tgt;
        let mut ref_params = init.ref_params;
        let mut point_ref = init.point_ref;
        let mut outs = Vec::with_capacity(self.layers.len());
        for (d, layer) in self.layers.iter().enumerate() {
            let boxes = param_rows_to_boxes(s.graph.value(ref_params).data());
            let reference = if point_ref {
                Reference::Points(boxes.iter().map(|b| [b.cx, b.cy]).collect())
            } else {
                Reference::Boxes(boxes)
            };
            let (x, locations) = layer.forward(s, tgt, init.pos, &reference, memory)?;
            tgt = x;
            let logits = self.class_heads[d].forward(s, x)?;
            let delta = self.box_heads[d].forward(s, x)?;
            let params = s.graph.add(delta, ref_params)?;
            let boxes = params_to_boxes(&mut s.graph, params)?;
            if self.ibr {
                ref_params = s.graph.detach(params);
                point_ref = false;
            }
            outs.push(LayerOutput {
                logits,
                params,
                boxes,
                reference,
                locations,
            });
        }
        Ok(outs)
    }
}
