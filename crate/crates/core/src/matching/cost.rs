use crate::config::MatchCostConfig;
use crate::geom::{rotated_iou, wrap_angle_diff, OrientedBox};
use crate::tensor::sigmoid;

/// Floor applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * a * a
    } else {
        a - 0.5
    }
}

/// Mean SmoothL1 (β = 1) over the canonical parameters, with the angle
/// residual wrapped into `[−π/2, π/2)`.
pub fn smooth_l1_boxes(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (a, b) = (a.canonicalize(), b.canonicalize());
    let d = [
        a.cx - b.cx,
        a.cy - b.cy,
        a.w - b.w,
        a.h - b.h,
        wrap_angle_diff(a.theta - b.theta),
    ];
    d.iter().map(|&x| smooth_l1(x)).sum::<f64>() / 5.0
}

/// Classification part of the cost for probability `p` of the true class.
pub fn class_cost(p: f64, focal: bool) -> f64 {
    if focal {
        let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -p.max(PROB_CLAMP).ln();
        let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p).max(PROB_CLAMP).ln();
        pos - neg
    } else {
        -p.max(PROB_CLAMP).ln()
    }
}

/// Pairwise matching cost of a prediction (probability `p` of the ground
/// truth's class, box `pred`) against ground-truth box `gt`.
pub fn match_cost(p: f64, pred: &OrientedBox, gt: &OrientedBox, cfg: &MatchCostConfig) -> f64 {
    let mut c = 0.0;
    if cfg.use_cls {
        c += cfg.lambda_cls * class_cost(p, cfg.focal_cls);
    }
    if cfg.use_l1 {
        c += cfg.lambda_l1 * smooth_l1_boxes(gt, pred);
    }
    if cfg.use_riou {
        c += cfg.lambda_riou * (1.0 - rotated_iou(gt, pred));
    }
    c
}

/// `[gt][prediction]` costs from raw logits `[Q, classes]` and boxes.
pub fn cost_matrix(
    logits: &[f64],
    classes: usize,
    boxes: &[OrientedBox],
    gts: &[(usize, OrientedBox)],
    cfg: &MatchCostConfig,
) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|(c, g)| {
            boxes
                .iter()
                .enumerate()
                .map(|(q, b)| match_cost(sigmoid(logits[q * classes + c]), b, g, cfg))
                .collect()
        })
        .collect()
}
