//! Small convolutional backbone emitting a four-level feature pyramid at
//! strides 8, 16, 32 and 64.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, LayerNorm, ParamStore, Session};
use crate::tensor::Var;

const WIDTHS: [usize; 4] = [16, 32, 32, 32];

/// Per-level `[H_l, W_l, C]` maps, finest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
    pub level_shapes: Vec<(usize, usize)>,
    pub channels: usize,
}

#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: LayerNorm,
}

impl ConvBlock {
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.norm.forward(s, y)?;
        Ok(s.graph.relu(y))
    }
}

/// Four stages of two 3×3 conv → layer norm → relu blocks. The first stage
/// downsamples twice and later stages once, so stages 2–4 sit at strides
/// 8, 16, 32; a stride-2 3×3 conv on stage 4 adds stride 64. Every tap is
/// projected to `C` channels by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct Backbone {
    stages: Vec<[ConvBlock; 2]>,
    extra: ConvBlock,
    proj: Vec<Conv2d>,
    pub channels: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize) -> Self {
        let mut block = |store: &mut ParamStore, name: String, cin, cout, stride| ConvBlock {
            conv: Conv2d::new(store, rng, &name, (3, 3), cin, cout, stride, Init::FanIn),
            norm: LayerNorm::new(store, &format!("{name}.norm"), cout),
        };
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &w) in WIDTHS.iter().enumerate() {
            let second_stride = if i == 0 { 2 } else { 1 };
            let a = block(store, format!("backbone.stage{i}.0"), cin, w, 2);
            let b = block(store, format!("backbone.stage{i}.1"), w, w, second_stride);
            stages.push([a, b]);
            cin = w;
        }
        let extra = block(store, "backbone.extra".into(), cin, cin, 2);
        let proj = (0..4)
            .map(|l| {
                let cin = if l < 3 { WIDTHS[l + 1] } else { cin };
                Conv2d::new(store, rng, &format!("backbone.proj{l}"), (1, 1), cin, channels, 1, Init::FanIn)
            })
            .collect();
        Backbone {
            stages,
            extra,
            proj,
            channels,
        }
    }

    /// `image: [H, W, 3]` with `H` and `W` multiples of 64.
    pub fn extract(&self, s: &mut Session, image: Var) -> Result<FeaturePyramid> {
        let sh = s.graph.shape(image).to_vec();
        if sh.len() != 3 || sh[2] != 3 {
            return Err(Error::dim("backbone", format!("image {sh:?}, expected [H, W, 3]")));
        }
        if sh[0] % 64 != 0 || sh[1] % 64 != 0 || sh[0] == 0 || sh[1] == 0 {
            return Err(Error::Usage(format!(
                "image size {}x{} must be divisible by 64",
                sh[0], sh[1]
            )));
        }
        let mut x = image;
        let mut taps = Vec::new();
        for (i, [a, b]) in self.stages.iter().enumerate() {
            x = a.forward(s, x)?;
            x = b.forward(s, x)?;
            if i > 0 {
                taps.push(x);
            }
        }
        taps.push(self.extra.forward(s, x)?);
        let mut levels = Vec::with_capacity(4);
        let mut level_shapes = Vec::with_capacity(4);
        for (t, p) in taps.into_iter().zip(&self.proj) {
            let y = p.forward(s, t)?;
            let ys = s.graph.shape(y);
            level_shapes.push((ys[0], ys[1]));
            levels.push(y);
        }
        Ok(FeaturePyramid {
            levels,
            level_shapes,
            channels: self.channels,
        })
    }
}
