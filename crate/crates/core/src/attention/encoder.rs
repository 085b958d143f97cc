use rand_chacha::ChaCha8Rng;

use super::msda::{MsDeformAttn, OffsetInit, Reference};
use super::TokenSequence;
use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{Init, LayerNorm, Linear, ParamStore, Session};
use crate::tensor::Var;

/// Deformable self-attention → add & norm → FFN → add & norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MsDeformAttn,
    pub norm1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        Ok(EncoderLayer {
            attn: MsDeformAttn::new(store, rng, &format!("{name}.attn"), c, cfg.heads, cfg.levels, cfg.points, OffsetInit::Pixels)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            ffn1: Linear::new(store, rng, &format!("{name}.ffn1"), c, cfg.ffn_dim, Init::FanIn),
            ffn2: Linear::new(store, rng, &format!("{name}.ffn2"), cfg.ffn_dim, c, Init::FanIn),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
        })
    }

    pub fn forward(&self, s: &mut Session, seq: &TokenSequence, refs: &Reference, x: Var) -> Result<Var> {
        let q = s.graph.add(x, seq.pos)?;
        let a = self.attn.forward(s, q, refs, x, &seq.levels)?.out;
        let x = s.graph.add(x, a)?;
        let x = self.norm1.forward(s, x)?;
        let h = self.ffn1.forward(s, x)?;
        let h = s.graph.relu(h);
        let h = self.ffn2.forward(s, h)?;
        let x = s.graph.add(x, h)?;
        self.norm2.forward(s, x)
    }
}

/// Stack of encoder layers; each token's reference point is its own cell
/// center.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("encoder.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Encoder { layers })
    }

    /// Memory with the same token layout as `seq`.
    pub fn forward(&self, s: &mut Session, seq: &TokenSequence) -> Result<TokenSequence> {
        let refs = Reference::Points(seq.refs.clone());
        let mut x = seq.tokens;
        for layer in &self.layers {
            x = layer.forward(s, seq, &refs, x)?;
        }
        Ok(seq.with_tokens(x))
    }
}
