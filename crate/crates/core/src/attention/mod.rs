//! Deformable attention, the encoder and the decoder.

mod decoder;
mod encoder;
mod msda;
pub mod posenc;

pub use decoder::{param_rows_to_boxes, params_to_boxes, BoxHead, Decoder, DecoderLayer, LayerOutput, Mha, QueryInit, PRIOR_BIAS};
pub use encoder::{Encoder, EncoderLayer};
pub use msda::{sampling_locations, AttnTrace, MsDeformAttn, OffsetInit, Reference};

use crate::error::{Error, Result};
use crate::nn::Session;
use crate::tensor::{LevelSpec, Var};

/// Flattened pyramid tokens with their positions.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[N, C]`.
    pub tokens: Var,
    /// `[N, C]` sine position plus level embedding.
    pub pos: Var,
    /// Placement of level `l` in the flat sequence, indexed by level.
    pub levels: Vec<LevelSpec>,
    pub level_index: Vec<usize>,
    /// Normalized cell centers.
    pub refs: Vec<[f64; 2]>,
}

impl TokenSequence {
    /// Flattens `maps` (level `l` is `maps[l]`, `[H_l, W_l, C]`) in the order
    /// given by `order`, a permutation of the level indices.
    pub fn from_maps(s: &mut Session, maps: &[Var], order: &[usize], level_embed: Var) -> Result<Self> {
        let nl = maps.len();
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..nl).collect::<Vec<_>>() {
            return Err(Error::dim("tokens", format!("level order {order:?} for {nl} levels")));
        }
        let c = *s.graph.shape(maps[0]).last().unwrap_or(&0);
        let mut levels = vec![LevelSpec { start: 0, h: 0, w: 0 }; nl];
        let mut parts = Vec::with_capacity(nl);
        let mut level_index = Vec::new();
        let mut refs = Vec::new();
        let mut start = 0;
        for &l in order {
            let sh = s.graph.shape(maps[l]).to_vec();
            if sh.len() != 3 || sh[2] != c {
                return Err(Error::dim("tokens", format!("level {l} has shape {sh:?}, channels {c}")));
            }
            let (h, w) = (sh[0], sh[1]);
            levels[l] = LevelSpec { start, h, w };
            start += h * w;
            parts.push(s.graph.reshape(maps[l], &[h * w, c])?);
            for i in 0..h {
                for j in 0..w {
                    level_index.push(l);
                    refs.push([(j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64]);
                }
            }
        }
        let tokens = s.graph.concat(&parts, 0)?;
        let sine = s.graph.constant(posenc::sine_embed_points(&refs, c));
        let lvl = s.graph.gather_rows(level_embed, &level_index)?;
        let pos = s.graph.add(sine, lvl)?;
        Ok(TokenSequence {
            tokens,
            pos,
            levels,
            level_index,
            refs,
        })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    /// Same sequence with new token values.
    pub fn with_tokens(&self, tokens: Var) -> Self {
        TokenSequence {
            tokens,
            ..self.clone()
        }
    }

    /// Rows belonging to level `l`, reshaped back to `[H, W, C]`.
    pub fn level_map(&self, s: &mut Session, l: usize) -> Result<Var> {
        let spec = self.levels[l];
        let c = s.graph.shape(self.tokens)[1];
        let rows = s.graph.slice(self.tokens, 0, spec.start, spec.start + spec.len())?;
        s.graph.reshape(rows, &[spec.h, spec.w, c])
    }
}

