//! One finite-difference case per differentiable op. Each case draws a random
//! small instance from `seed` and returns the worst relative error.

use rand::Rng;
use rotdetr::attention::{params_to_boxes, sampling_locations, Reference};
use rotdetr::config::MatchCostConfig;
use rotdetr::geom::OrientedBox;
use rotdetr::matching::{focal_loss, l1_loss, riou_loss, set_loss};
use rotdetr::tensor::{LevelSpec, Tensor};

use super::{gradcheck, rand_in, randn, random_box, rng};

pub type Case = (&'static str, fn(u64) -> f64);

pub const OP_TOL: f64 = 1e-6;
pub const COMPOSED_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

/// Values bounded away from zero so ReLU kinks are never straddled.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = rng(seed);
    let mut t = randn(&mut r, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05_f64.copysign(*v);
        }
    }
    t
}

fn boxes_tensor(boxes: &[OrientedBox]) -> Tensor {
    Tensor::new(vec![boxes.len(), 5], boxes.iter().flat_map(|b| b.to_array()).collect()).unwrap()
}

/// Random box whose sides differ enough that canonicalization never flips
/// under a finite-difference step.
fn unambiguous_box(r: &mut rand_chacha::ChaCha8Rng) -> OrientedBox {
    let mut b = random_box(r);
    if (b.h - b.w).abs() < 0.02 {
        b.h += 0.05;
    }
    if r.random_bool(0.5) {
        std::mem::swap(&mut b.w, &mut b.h);
    }
    b
}

pub fn op_cases() -> Vec<Case> {
    vec![
        ("add", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], |g, v| g.add(v[0], v[1]).unwrap())
        }),
        ("sub", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], |g, v| g.sub(v[0], v[1]).unwrap())
        }),
        ("mul", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4]), randn(&mut r, &[3, 4])], |g, v| g.mul(v[0], v[1]).unwrap())
        }),
        ("add_bcast", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[2, 3, 4]), randn(&mut r, &[4])], |g, v| g.add_bcast(v[0], v[1]).unwrap())
        }),
        ("mul_bcast", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[2, 3, 4]), randn(&mut r, &[3, 4])], |g, v| g.mul_bcast(v[0], v[1]).unwrap())
        }),
        ("scale", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[5])], |g, v| g.scale(v[0], -1.7))
        }),
        ("add_scalar", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[5])], |g, v| g.add_scalar(v[0], 0.3))
        }),
        ("relu", |s| gradcheck(s, &[away_from_zero(s, &[4, 5])], |g, v| g.relu(v[0]))),
        ("sigmoid", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[4, 5])], |g, v| g.sigmoid(v[0]))
        }),
        ("inverse_sigmoid", |s| {
            let mut r = rng(s);
            gradcheck(s, &[rand_in(&mut r, &[4, 5], 0.02, 0.98)], |g, v| g.inverse_sigmoid(v[0]))
        }),
        ("sum", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4])], |g, v| g.sum(v[0]))
        }),
        ("mean", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4])], |g, v| g.mean(v[0]))
        }),
        ("matmul", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4]), randn(&mut r, &[4, 5])], |g, v| g.matmul(v[0], v[1]).unwrap())
        }),
        ("matmul_nt", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4]), randn(&mut r, &[5, 4])], |g, v| g.matmul_nt(v[0], v[1]).unwrap())
        }),
        ("linear", |s| {
            let mut r = rng(s);
            let ins = [randn(&mut r, &[2, 3, 4]), randn(&mut r, &[4, 5]), randn(&mut r, &[5])];
            gradcheck(s, &ins, |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap())
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            let axis = (s % 3) as usize;
            gradcheck(s, &[randn(&mut r, &[2, 3, 4])], move |g, v| g.softmax(v[0], axis).unwrap())
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            let ins = [randn(&mut r, &[3, 6]), randn(&mut r, &[6]), randn(&mut r, &[6])];
            gradcheck(s, &ins, |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap())
        }),
        ("concat", |s| {
            let mut r = rng(s);
            let axis = (s % 2) as usize;
            let ins = [randn(&mut r, &[3, 3]), randn(&mut r, &[3, 3]), randn(&mut r, &[3, 3])];
            gradcheck(s, &ins, move |g, v| g.concat(v, axis).unwrap())
        }),
        ("slice", |s| {
            let mut r = rng(s);
            let axis = (s % 3) as usize;
            gradcheck(s, &[randn(&mut r, &[3, 4, 5])], move |g, v| g.slice(v[0], axis, 1, 3).unwrap())
        }),
        ("sum_axis", |s| {
            let mut r = rng(s);
            let axis = (s % 3) as usize;
            gradcheck(s, &[randn(&mut r, &[3, 4, 5])], move |g, v| g.sum_axis(v[0], axis).unwrap())
        }),
        ("reshape", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4])], |g, v| g.reshape(v[0], &[2, 6]).unwrap())
        }),
        ("transpose", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[3, 4])], |g, v| g.transpose(v[0]).unwrap())
        }),
        ("gather_rows", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[4, 3])], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3]).unwrap())
        }),
        ("conv2d", |s| {
            let mut r = rng(s);
            let (kh, kw) = [(3, 3), (1, 5), (1, 1), (3, 1)][(s % 4) as usize];
            let stride = 1 + (s % 2) as usize;
            let ins = [randn(&mut r, &[5, 6, 3]), randn(&mut r, &[kh, kw, 3, 4]), randn(&mut r, &[4])];
            gradcheck(s, &ins, move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, (kh / 2, kw / 2)).unwrap())
        }),
        ("bilinear_sample", |s| {
            let mut r = rng(s);
            // includes points partly or wholly off the grid
            let ins = [randn(&mut r, &[4, 5, 3]), rand_in(&mut r, &[7, 2], -1.5, 5.5)];
            gradcheck(s, &ins, |g, v| g.bilinear_sample(v[0], v[1]).unwrap())
        }),
        ("ms_deform_sample", |s| {
            let mut r = rng(s);
            let levels = [LevelSpec { start: 0, h: 4, w: 5 }, LevelSpec { start: 20, h: 2, w: 3 }];
            let (q, m, k) = (3, 2, 2);
            let ins = [
                randn(&mut r, &[26, 4]),
                rand_in(&mut r, &[q, m, 2, k, 2], -1.0, 4.5),
                rand_in(&mut r, &[q, m, 2, k], 0.0, 1.0),
            ];
            gradcheck(s, &ins, move |g, v| g.ms_deform_sample(v[0], &levels, m, v[1], v[2]).unwrap())
        }),
        ("sampling_locations", |s| {
            let mut r = rng(s);
            let levels = [LevelSpec { start: 0, h: 8, w: 8 }, LevelSpec { start: 64, h: 4, w: 4 }];
            let (q, m, k) = (3, 2, 2);
            let refs = if s % 2 == 0 {
                Reference::Boxes((0..q).map(|_| random_box(&mut r)).collect())
            } else {
                Reference::Points((0..q).map(|_| [r.random(), r.random()]).collect())
            };
            let ins = [randn(&mut r, &[q, m * 2 * k * 2])];
            gradcheck(s, &ins, move |g, v| sampling_locations(g, v[0], &refs, &levels, m, k).unwrap())
        }),
        ("params_to_boxes", |s| {
            let mut r = rng(s);
            gradcheck(s, &[randn(&mut r, &[4, 5])], |g, v| params_to_boxes(g, v[0]).unwrap())
        }),
        ("focal_loss", |s| {
            let mut r = rng(s);
            let targets = [Some(1), None, Some(0), None];
            gradcheck(s, &[randn(&mut r, &[4, 3])], move |g, v| focal_loss(g, v[0], &targets).unwrap())
        }),
        ("l1_loss", |s| {
            let mut r = rng(s);
            let preds: Vec<OrientedBox> = (0..3).map(|_| unambiguous_box(&mut r)).collect();
            let gts: Vec<OrientedBox> = (0..2).map(|_| random_box(&mut r)).collect();
            gradcheck(s, &[boxes_tensor(&preds)], move |g, v| l1_loss(g, v[0], &[(0, 1), (2, 0)], &gts).unwrap())
        }),
        ("riou_loss", |s| {
            let mut r = rng(s);
            let gts: Vec<OrientedBox> = (0..2).map(|_| random_box(&mut r)).collect();
            // predictions near their targets so the overlap is non-trivial
            let preds: Vec<OrientedBox> = [1usize, 0, 1]
                .iter()
                .map(|&t| {
                    let b = gts[t];
                    OrientedBox::new(
                        b.cx + r.random_range(-0.05..0.05),
                        b.cy + r.random_range(-0.05..0.05),
                        b.w * r.random_range(0.7..1.3),
                        b.h * r.random_range(0.7..1.3),
                        b.theta + r.random_range(-0.4..0.4),
                    )
                })
                .collect();
            gradcheck(s, &[boxes_tensor(&preds)], move |g, v| riou_loss(g, v[0], &[(0, 1), (1, 0), (2, 1)], &gts).unwrap())
        }),
    ]
}

/// Full set loss from parameter-space predictions: sigmoid decoding,
/// matching, focal, L1 and rotated-IoU terms.
pub fn composed_set_loss(s: u64) -> f64 {
    let mut r = rng(s);
    let q = 6;
    let gts: Vec<(usize, OrientedBox)> = (0..3).map(|i| (i % 2, random_box(&mut r))).collect();
    let mut params = Vec::new();
    for i in 0..q {
        let b = if i < 3 {
            let g = gts[i].1;
            OrientedBox::new(
                g.cx + r.random_range(-0.04..0.04),
                g.cy + r.random_range(-0.04..0.04),
                g.w * r.random_range(0.8..1.2),
                g.h * r.random_range(0.8..1.2) + 0.03,
                g.theta + r.random_range(-0.3..0.3),
            )
        } else {
            random_box(&mut r)
        };
        let logit = |v: f64| {
            let v = v.clamp(0.02, 0.95);
            (v / (1.0 - v)).ln()
        };
        params.extend([logit(b.cx), logit(b.cy), logit(b.w), logit(b.h), b.theta]);
    }
    let params = Tensor::new(vec![q, 5], params).unwrap();
    let logits = randn(&mut r, &[q, 2]);
    let cfg = MatchCostConfig::default();
    gradcheck(s, &[logits, params], move |g, v| {
        let boxes = params_to_boxes(g, v[1]).unwrap();
        set_loss(g, v[0], boxes, &gts, &cfg, 3.0).unwrap().total
    })
}
