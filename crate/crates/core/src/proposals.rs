//! Oriented proposal generation from encoder memory, and proposal
//! refinement by a three-branch receptive block plus feature alignment.

use rand_chacha::ChaCha8Rng;

use crate::attention::{param_rows_to_boxes, params_to_boxes, BoxHead, TokenSequence, PRIOR_BIAS};
use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::nn::{Conv2d, Init, LayerNorm, Linear, ParamStore, Session};
use crate::tensor::{inverse_sigmoid, Graph, Tensor, Var};

/// Base proposal side at the finest level.
pub const BASE_SIZE: f64 = 0.05;

/// Initial box of a token on 0-based level `level`: its cell center, side
/// `2^level · 0.05`, angle 0.
pub fn initial_box(center: [f64; 2], level: usize) -> OrientedBox {
    let side = BASE_SIZE * (1u64 << level) as f64;
    OrientedBox::new(center[0], center[1], side, side, 0.0)
}

/// Initial boxes of every token, in parameter space.
pub fn initial_params(seq: &TokenSequence) -> Vec<[f64; 5]> {
    seq.refs
        .iter()
        .zip(&seq.level_index)
        .map(|(&c, &l)| {
            let b = initial_box(c, l);
            [inverse_sigmoid(b.cx), inverse_sigmoid(b.cy), inverse_sigmoid(b.w), inverse_sigmoid(b.h), b.theta]
        })
        .collect()
}

/// One scored proposal per token.
pub struct ProposalSet {
    /// `[N, 1]` objectness logits.
    pub logits: Var,
    /// `[N, 5]` parameter-space boxes.
    pub params: Var,
    /// `[N, 5]` boxes.
    pub boxes: Var,
}

impl ProposalSet {
    pub fn box_values(&self, g: &Graph) -> Vec<OrientedBox> {
        param_rows_to_boxes(g.value(self.params).data())
    }

    pub fn scores(&self, g: &Graph) -> Vec<f64> {
        g.value(self.logits).data().to_vec()
    }
}

/// Proposal heads applied to every memory token.
#[derive(Debug, Clone)]
pub struct Opg {
    pub proj: Linear,
    pub norm: LayerNorm,
    pub class: Linear,
    pub boxes: BoxHead,
}

impl Opg {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, c: usize, angle_branch: bool) -> Self {
        let class = Linear::new(store, rng, "opg.class", c, 1, Init::FanIn);
        store.get_mut(class.b.expect("bias")).data_mut().fill(PRIOR_BIAS);
        Opg {
            proj: Linear::new(store, rng, "opg.proj", c, c, Init::FanIn),
            norm: LayerNorm::new(store, "opg.norm", c),
            class,
            boxes: BoxHead::new(store, rng, "opg", c, angle_branch),
        }
    }

    /// Proposals `σ(σ⁻¹(p) + Δ)` (additive in `θ`) around `base: [N, 5]`
    /// parameter-space boxes.
    pub fn generate(&self, s: &mut Session, memory: &TokenSequence, base: Var) -> Result<ProposalSet> {
        let n = memory.len();
        if s.graph.shape(base) != [n, 5] {
            return Err(Error::dim("opg", format!("base {:?} for {n} tokens", s.graph.shape(base))));
        }
        let h = self.proj.forward(s, memory.tokens)?;
        let h = self.norm.forward(s, h)?;
        let logits = self.class.forward(s, h)?;
        let delta = self.boxes.forward(s, h)?;
        let params = s.graph.add(delta, base)?;
        let boxes = params_to_boxes(&mut s.graph, params)?;
        Ok(ProposalSet { logits, params, boxes })
    }
}

/// `relu(Br₁ + ε(Br₁ ⊙ Br₂ ⊙ Br₃))` with 1×1, 1×5 and 1×7 branches and a
/// 1×1 channel-reducing ε.
#[derive(Debug, Clone)]
pub struct ReceptiveBlock {
    pub br1: Conv2d,
    pub br2: Conv2d,
    pub br3: Conv2d,
    pub eps: Conv2d,
}

impl ReceptiveBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        ReceptiveBlock {
            br1: Conv2d::new(store, rng, &format!("{name}.br1"), (1, 1), c, c, 1, Init::FanIn),
            br2: Conv2d::new(store, rng, &format!("{name}.br2"), (1, 5), c, c, 1, Init::FanIn),
            br3: Conv2d::new(store, rng, &format!("{name}.br3"), (1, 7), c, c, 1, Init::FanIn),
            eps: Conv2d::new(store, rng, &format!("{name}.eps"), (1, 1), 3 * c, c, 1, Init::FanIn),
        }
    }

    /// `[H, W, C]` → `[H, W, C]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let b1 = self.br1.forward(s, x)?;
        let b2 = self.br2.forward(s, x)?;
        let b3 = self.br3.forward(s, x)?;
        let cat = s.graph.concat(&[b1, b2, b3], 2)?;
        let e = self.eps.forward(s, cat)?;
        let sum = s.graph.add(b1, e)?;
        Ok(s.graph.relu(sum))
    }
}

/// Pixel coordinates of the five alignment points of `b` (center, then the
/// four corners) on an `h × w` map.
pub fn align_points(b: &OrientedBox, h: usize, w: usize) -> [[f64; 2]; 5] {
    let v = crate::geom::box_vertices(b.to_array());
    let px = |x: f64, y: f64| [x * w as f64 - 0.5, y * h as f64 - 0.5];
    [
        px(b.cx, b.cy),
        px(v[0].x, v[0].y),
        px(v[1].x, v[1].y),
        px(v[2].x, v[2].y),
        px(v[3].x, v[3].y),
    ]
}

/// `feature + mean of bilinear samples at each location's proposal center
/// and corners`; `boxes` holds one proposal per location, row-major.
pub fn opr_align(g: &mut Graph, feature: Var, boxes: &[OrientedBox]) -> Result<Var> {
    let sh = g.shape(feature).to_vec();
    if sh.len() != 3 || boxes.len() != sh[0] * sh[1] {
        return Err(Error::dim("opr_align", format!("feature {sh:?}, {} proposals", boxes.len())));
    }
    let (h, w, c) = (sh[0], sh[1], sh[2]);
    let pts: Vec<f64> = boxes.iter().flat_map(|b| align_points(b, h, w)).flatten().collect();
    let pts = g.constant(Tensor::from_parts(vec![boxes.len() * 5, 2], pts));
    let samples = g.bilinear_sample(feature, pts)?;
    let samples = g.reshape(samples, &[h * w, 5, c])?;
    let sum = g.sum_axis(samples, 1)?;
    let mean = g.scale(sum, 0.2);
    let mean = g.reshape(mean, &[h, w, c])?;
    g.add(feature, mean)
}

/// Indices of the `k` highest scores, best first; equal scores keep the
/// lower index first.
pub fn select_top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Config(format!("cannot select {k} queries from {} proposals", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn initial_sizes_double_per_level() {
        assert_eq!(initial_box([0.5, 0.5], 0).w, 0.05);
        assert_eq!(initial_box([0.5, 0.5], 1).h, 0.1);
        assert_eq!(initial_box([0.5, 0.5], 3).w, 0.4);
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(select_top_k(&[0.1, 0.5, 0.5, 0.9], 3).unwrap(), vec![3, 1, 2]);
        assert_eq!(select_top_k(&[0.3, 0.1], 2).unwrap(), vec![0, 1]);
        assert!(matches!(select_top_k(&[0.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn constant_map_doubles() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[3, 3, 2], 0.7));
        let boxes = vec![OrientedBox::new(0.5, 0.5, 0.3, 0.4, 0.6); 9];
        let y = opr_align(&mut g, f, &boxes).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.4).abs() < 1e-12);
        }
    }

    #[test]
    fn receptive_block_keeps_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rb = ReceptiveBlock::new(&mut store, &mut rng, "rb", 4);
        let mut s = store.session(false);
        let x = s.graph.constant(crate::nn::normal(&mut rng, &[5, 6, 4], 1.0));
        let y = rb.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), &[5, 6, 4]);
    }
}
