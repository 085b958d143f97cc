//! The full detector: backbone, encoder, proposal stages and decoder.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{posenc, Decoder, Encoder, LayerOutput, QueryInit, TokenSequence};
use crate::backbone::Backbone;
use crate::config::{MatchCostConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::geom::OrientedBox;
use crate::matching::{set_loss, SetLoss};
use crate::nn::{normal, Init, LayerNorm, Linear, ParamId, ParamStore, Session};
use crate::proposals::{initial_params, opr_align, select_top_k, Opg, ProposalSet, ReceptiveBlock};
use crate::tensor::{Tensor, Var};

const CONFIG_PREFIX: &str = "config.";

/// Everything one forward pass produces.
pub struct ForwardOutput {
    /// One entry per decoder layer.
    pub layers: Vec<LayerOutput>,
    /// Proposal passes over the encoder memory (first pass, then the
    /// refined pass when refinement is on). Empty without proposals.
    pub proposals: Vec<ProposalSet>,
    /// Token indices chosen as queries, best first.
    pub selected: Vec<usize>,
    /// Query boxes and objectness logits.
    pub query_boxes: Vec<OrientedBox>,
    pub query_scores: Vec<f64>,
}

/// Scalar summaries of a training loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossSummary {
    /// Final decoder layer terms, each divided by the object count.
    pub cls: f64,
    pub l1: f64,
    pub riou: f64,
    /// Everything optimized, all heads included.
    pub total: f64,
}

pub struct Detector {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub level_embed: ParamId,
    pub encoder: Encoder,
    pub opg: Option<Opg>,
    pub receptive: Option<ReceptiveBlock>,
    pub query_proj: Option<(Linear, LayerNorm)>,
    /// Learned `[Q, 2C]` queries and their reference-point head, used when
    /// proposals are off.
    pub learned_queries: Option<(ParamId, Linear)>,
    pub decoder: Decoder,
}

impl Detector {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.queries > cfg.token_count() {
            return Err(Error::Config(format!(
                "{} queries exceed the {} encoder tokens",
                cfg.queries,
                cfg.token_count()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let backbone = Backbone::new(&mut store, &mut rng, c);
        let level_embed = store.add("level_embed", normal(&mut rng, &[cfg.levels, c], 1.0));
        let encoder = Encoder::new(&mut store, &mut rng, cfg)?;
        let (opg, receptive, query_proj, learned_queries) = if cfg.opg {
            let opg = Opg::new(&mut store, &mut rng, c, cfg.angle_branch);
            let receptive = cfg.opr.then(|| ReceptiveBlock::new(&mut store, &mut rng, "opr", c));
            let proj = Linear::new(&mut store, &mut rng, "query.proj", 5 * (c / 2), 2 * c, Init::FanIn);
            let norm = LayerNorm::new(&mut store, "query.norm", 2 * c);
            (Some(opg), receptive, Some((proj, norm)), None)
        } else {
            let q = store.add("query.embed", normal(&mut rng, &[cfg.queries, 2 * c], 1.0));
            let refp = Linear::new(&mut store, &mut rng, "query.ref", c, 2, Init::Xavier);
            (None, None, None, Some((q, refp)))
        };
        let decoder = Decoder::new(&mut store, &mut rng, cfg)?;
        Ok(Detector {
            cfg: cfg.clone(),
            store,
            backbone,
            level_embed,
            encoder,
            opg,
            receptive,
            query_proj,
            learned_queries,
            decoder,
        })
    }

    pub fn session(&self, trainable: bool) -> Session {
        self.store.session(trainable)
    }

    /// Parameters plus the model configuration, ready for a checkpoint.
    pub fn checkpoint_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .cfg
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("{CONFIG_PREFIX}{k}"), Tensor::scalar(v)))
            .collect();
        out.extend(self.store.named_tensors());
        out
    }

    /// Rebuilds a detector from checkpoint tensors; other entries (such as
    /// optimizer state) are ignored.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let pairs: Vec<(String, f64)> = tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(CONFIG_PREFIX).map(|k| (k.to_string(), t.item())))
            .collect();
        if pairs.is_empty() {
            return Err(Error::Format("checkpoint has no model configuration".into()));
        }
        let cfg = ModelConfig::from_pairs(&pairs)?;
        let mut det = Detector::new(&cfg)?;
        let map: HashMap<String, Tensor> = tensors.iter().cloned().collect();
        det.store.load_from(&map)?;
        Ok(det)
    }

    /// Token sequence of a list of `[H, W, C]` maps in natural level order.
    fn tokens(&self, s: &mut Session, maps: &[Var]) -> Result<TokenSequence> {
        let order: Vec<usize> = (0..maps.len()).collect();
        let le = s.p(self.level_embed);
        TokenSequence::from_maps(s, maps, &order, le)
    }

    /// Runs the detector on one `[H, W, 3]` image.
    pub fn forward(&self, s: &mut Session, image: &Tensor) -> Result<ForwardOutput> {
        let img = s.graph.constant(image.clone());
        let pyramid = self.backbone.extract(s, img)?;
        let seq = self.tokens(s, &pyramid.levels)?;
        let memory = self.encoder.forward(s, &seq)?;
        let c = self.cfg.channels;
        let k = self.cfg.queries;
        let (init, memory, proposals, selected, query_boxes, query_scores) = match &self.opg {
            Some(opg) => {
                let base_rows = initial_params(&memory);
                let base = s.graph.constant(Tensor::from_parts(
                    vec![base_rows.len(), 5],
                    base_rows.iter().flatten().copied().collect(),
                ));
                let first = opg.generate(s, &memory, base)?;
                let mut proposals = vec![first];
                let mut memory = memory;
                if let Some(rb) = &self.receptive {
                    let boxes = proposals[0].box_values(&s.graph);
                    let mut maps = Vec::with_capacity(pyramid.levels.len());
                    for (l, &level) in pyramid.levels.iter().enumerate() {
                        let spec = seq.levels[l];
                        let x = rb.forward(s, level)?;
                        maps.push(opr_align(&mut s.graph, x, &boxes[spec.start..spec.start + spec.len()])?);
                    }
                    let seq2 = self.tokens(s, &maps)?;
                    memory = self.encoder.forward(s, &seq2)?;
                    let base = s.graph.detach(proposals[0].params);
                    proposals.push(opg.generate(s, &memory, base)?);
                }
                let last = proposals.last().expect("one pass");
                let scores = last.scores(&s.graph);
                let selected = select_top_k(&scores, k)?;
                let params = s.graph.gather_rows(last.params, &selected)?;
                let ref_params = s.graph.detach(params);
                let boxes: Vec<OrientedBox> = {
                    let all = last.box_values(&s.graph);
                    selected.iter().map(|&i| all[i]).collect()
                };
                let coords: Vec<[f64; 5]> = boxes
                    .iter()
                    .map(|b| {
                        let b = b.canonicalize();
                        [b.cx, b.cy, b.w, b.h, b.theta / std::f64::consts::PI]
                    })
                    .collect();
                let (proj, norm) = self.query_proj.as_ref().expect("query projection");
                let emb = s.graph.constant(posenc::sine_embed_boxes(&coords, c / 2));
                let q = proj.forward(s, emb)?;
                let q = norm.forward(s, q)?;
                let pos = s.graph.slice(q, 1, 0, c)?;
                let tgt = s.graph.slice(q, 1, c, 2 * c)?;
                let query_scores = selected.iter().map(|&i| scores[i]).collect();
                let init = QueryInit {
                    tgt,
                    pos,
                    ref_params,
                    point_ref: false,
                };
                (init, memory, proposals, selected, boxes, query_scores)
            }
            None => {
                let (qid, refp) = self.learned_queries.as_ref().expect("learned queries");
                let q = s.p(*qid);
                let pos = s.graph.slice(q, 1, 0, c)?;
                let tgt = s.graph.slice(q, 1, c, 2 * c)?;
                // σ⁻¹(σ(r)) = r, so the point logits go straight into the
                // parameter-space reference; size and angle start at 0
                let r = refp.forward(s, pos)?;
                let zeros = s.graph.constant(Tensor::zeros(&[k, 3]));
                let ref_params = s.graph.concat(&[r, zeros], 1)?;
                let boxes = crate::attention::param_rows_to_boxes(s.graph.value(ref_params).data());
                let init = QueryInit {
                    tgt,
                    pos,
                    ref_params,
                    point_ref: true,
                };
                (init, memory, Vec::new(), (0..k).collect(), boxes, vec![0.0; k])
            }
        };
        let layers = self.decoder.forward(s, &init, &memory)?;
        Ok(ForwardOutput {
            layers,
            proposals,
            selected,
            query_boxes,
            query_scores,
        })
    }

    /// `(H_l, W_l)` of every pyramid level for the configured image size.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.cfg.levels)
            .map(|l| {
                let n = self.cfg.image_size.div_ceil(8 << l);
                (n, n)
            })
            .collect()
    }

    /// Cross-attention sampling points of decoder layer `layer` in
    /// normalized image coordinates, `M·L·K` per query.
    pub fn sampling_points(&self, s: &Session, out: &ForwardOutput, layer: usize) -> Vec<Vec<[f64; 2]>> {
        let shapes = self.level_shapes();
        let (m, nl, k) = (self.cfg.heads, self.cfg.levels, self.cfg.points);
        let loc = s.graph.value(out.layers[layer].locations).data();
        loc.chunks(m * nl * k * 2)
            .map(|q| {
                q.chunks(2)
                    .enumerate()
                    .map(|(i, p)| {
                        let (h, w) = shapes[(i / k) % nl];
                        [(p[0] + 0.5) / w as f64, (p[1] + 0.5) / h as f64]
                    })
                    .collect()
            })
            .collect()
    }

    /// Set loss over every decoder layer plus class-agnostic losses on each
    /// proposal pass; `norm` is the object count of the whole batch.
    pub fn loss(
        &self,
        s: &mut Session,
        out: &ForwardOutput,
        gts: &[(usize, OrientedBox)],
        cost: &MatchCostConfig,
        norm: f64,
    ) -> Result<(Var, LossSummary)> {
        let mut parts: Vec<SetLoss> = Vec::new();
        for layer in &out.layers {
            parts.push(set_loss(&mut s.graph, layer.logits, layer.boxes, gts, cost, norm)?);
        }
        let final_part = parts.last().map(|p| (p.cls, p.l1, p.riou));
        let agnostic: Vec<(usize, OrientedBox)> = gts.iter().map(|&(_, b)| (0, b)).collect();
        for p in &out.proposals {
            parts.push(set_loss(&mut s.graph, p.logits, p.boxes, &agnostic, cost, norm)?);
        }
        let mut total = s.graph.constant(Tensor::scalar(0.0));
        for p in &parts {
            total = s.graph.add(total, p.total)?;
        }
        let n = norm.max(1.0);
        let mut summary = LossSummary {
            total: s.graph.value(total).item(),
            ..LossSummary::default()
        };
        if let Some((cls, l1, riou)) = final_part {
            summary.cls = s.graph.value(cls).item() / n;
            summary.l1 = s.graph.value(l1).item() / n;
            summary.riou = s.graph.value(riou).item() / n;
        }
        Ok((total, summary))
    }
}
