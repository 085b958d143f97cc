use super::cost::{cost_matrix, FOCAL_ALPHA, FOCAL_GAMMA};
use super::hungarian::hungarian;
use crate::config::MatchCostConfig;
use crate::error::{Error, Result};
use crate::geom::{rotated_iou_with_grad, wrap_angle_diff, OrientedBox};
use crate::tensor::{Graph, Tensor, Var};

/// `ln(1 + eˣ)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Sigmoid focal loss of one logit against a binary target, and its
/// derivative.
pub fn focal_term(x: f64, positive: bool) -> (f64, f64) {
    let p = crate::tensor::sigmoid(x);
    if positive {
        let logp = -softplus(-x);
        let m = (1.0 - p).powf(FOCAL_GAMMA);
        let l = -FOCAL_ALPHA * m * logp;
        let d = FOCAL_ALPHA * m * (FOCAL_GAMMA * p * logp - (1.0 - p));
        (l, d)
    } else {
        let log1mp = -softplus(x);
        let m = p.powf(FOCAL_GAMMA);
        let l = -(1.0 - FOCAL_ALPHA) * m * log1mp;
        let d = (1.0 - FOCAL_ALPHA) * m * (p - FOCAL_GAMMA * (1.0 - p) * log1mp);
        (l, d)
    }
}

/// Summed focal loss over every query and class of `logits: [Q, K]`;
/// query `q` is positive only for class `targets[q]`.
pub fn focal_loss(g: &mut Graph, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let sh = g.shape(logits).to_vec();
    if sh.len() != 2 || sh[0] != targets.len() || targets.iter().flatten().any(|&c| c >= sh[1]) {
        return Err(Error::dim("focal_loss", format!("logits {sh:?}, {} targets", targets.len())));
    }
    let k = sh[1];
    let x = g.value(logits).data();
    let mut total = 0.0;
    let mut dx = vec![0.0; x.len()];
    for (q, t) in targets.iter().enumerate() {
        for c in 0..k {
            let (l, d) = focal_term(x[q * k + c], *t == Some(c));
            total += l;
            dx[q * k + c] = d;
        }
    }
    Ok(g.custom(Tensor::scalar(total), &[logits], move |ctx| {
        vec![Some(dx.iter().map(|d| d * ctx.grad[0]).collect())]
    }))
}

/// Canonical form of `b` and, for each canonical slot, the raw parameter
/// it was taken from (the angle shift has unit derivative).
fn canonical_map(b: &OrientedBox) -> (OrientedBox, [usize; 5]) {
    let c = b.canonicalize();
    let perm = if b.w > b.h { [0, 1, 3, 2, 4] } else { [0, 1, 2, 3, 4] };
    (c, perm)
}

fn box_rows(g: &Graph, boxes: Var, op: &'static str, pairs: &[(usize, usize)], gts: &[OrientedBox]) -> Result<Vec<OrientedBox>> {
    let sh = g.shape(boxes);
    let q = sh[0];
    if sh.len() != 2 || sh[1] != 5 || pairs.iter().any(|&(p, t)| p >= q || t >= gts.len()) {
        return Err(Error::dim(op, format!("boxes {sh:?}, {} targets, pairs {pairs:?}", gts.len())));
    }
    Ok(g.value(boxes).data().chunks(5).map(|r| OrientedBox::from_array(r.try_into().unwrap())).collect())
}

/// Σ over matched `(prediction, target)` pairs of the L1 distance between
/// canonical parameters, angle residual wrapped.
pub fn l1_loss(g: &mut Graph, boxes: Var, pairs: &[(usize, usize)], gts: &[OrientedBox]) -> Result<Var> {
    let rows = box_rows(g, boxes, "l1_loss", pairs, gts)?;
    let mut total = 0.0;
    let mut dx = vec![0.0; rows.len() * 5];
    for &(p, t) in pairs {
        let (c, perm) = canonical_map(&rows[p]);
        let gt = gts[t].canonicalize();
        let d = [
            c.cx - gt.cx,
            c.cy - gt.cy,
            c.w - gt.w,
            c.h - gt.h,
            wrap_angle_diff(c.theta - gt.theta),
        ];
        for (slot, &di) in d.iter().enumerate() {
            total += di.abs();
            dx[p * 5 + perm[slot]] += if di > 0.0 { 1.0 } else if di < 0.0 { -1.0 } else { 0.0 };
        }
    }
    Ok(g.custom(Tensor::scalar(total), &[boxes], move |ctx| {
        vec![Some(dx.iter().map(|d| d * ctx.grad[0]).collect())]
    }))
}

/// Σ over matched pairs of `1 − rotated IoU`.
pub fn riou_loss(g: &mut Graph, boxes: Var, pairs: &[(usize, usize)], gts: &[OrientedBox]) -> Result<Var> {
    let rows = box_rows(g, boxes, "riou_loss", pairs, gts)?;
    let mut total = 0.0;
    let mut dx = vec![0.0; rows.len() * 5];
    for &(p, t) in pairs {
        let (iou, gp, _) = rotated_iou_with_grad(&rows[p], &gts[t]);
        total += 1.0 - iou;
        for i in 0..5 {
            dx[p * 5 + i] -= gp[i];
        }
    }
    Ok(g.custom(Tensor::scalar(total), &[boxes], move |ctx| {
        vec![Some(dx.iter().map(|d| d * ctx.grad[0]).collect())]
    }))
}

/// Loss terms of one prediction head.
pub struct SetLoss {
    /// Summed focal loss (unweighted, unnormalized).
    pub cls: Var,
    pub l1: Var,
    pub riou: Var,
    /// `(λ_cls·cls + λ_L1·l1 + λ_riou·riou) / norm`.
    pub total: Var,
    /// Matched `(prediction, ground truth)` pairs.
    pub matched: Vec<(usize, usize)>,
}

/// Matches `logits: [Q, K]` / `boxes: [Q, 5]` against `gts` under `cfg` and
/// builds the loss for that assignment, divided by `norm` (the number of
/// objects in the batch).
pub fn set_loss(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gts: &[(usize, OrientedBox)],
    cfg: &MatchCostConfig,
    norm: f64,
) -> Result<SetLoss> {
    let k = g.shape(logits).get(1).copied().unwrap_or(0);
    let rows = box_rows(g, boxes, "set_loss", &[], &[])?;
    let cost = cost_matrix(g.value(logits).data(), k, &rows, gts, cfg);
    let assignment = hungarian(&cost)?;
    let matched: Vec<(usize, usize)> = assignment.pairs.iter().map(|&(t, p)| (p, t)).collect();
    set_loss_with(g, logits, boxes, gts, &matched, cfg, norm)
}

/// [`set_loss`] for a given assignment.
pub fn set_loss_with(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    gts: &[(usize, OrientedBox)],
    matched: &[(usize, usize)],
    cfg: &MatchCostConfig,
    norm: f64,
) -> Result<SetLoss> {
    let q = g.shape(logits)[0];
    let mut targets = vec![None; q];
    for &(p, t) in matched {
        if p >= q {
            return Err(Error::dim("set_loss", format!("prediction {p} of {q}")));
        }
        targets[p] = Some(gts[t].0);
    }
    let gt_boxes: Vec<OrientedBox> = gts.iter().map(|g| g.1).collect();
    let cls = focal_loss(g, logits, &targets)?;
    let l1 = l1_loss(g, boxes, matched, &gt_boxes)?;
    let riou = if cfg.use_riou {
        riou_loss(g, boxes, matched, &gt_boxes)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let inv = 1.0 / norm.max(1.0);
    let mut terms = Vec::new();
    if cfg.use_cls {
        terms.push(g.scale(cls, cfg.lambda_cls * inv));
    }
    if cfg.use_l1 {
        terms.push(g.scale(l1, cfg.lambda_l1 * inv));
    }
    if cfg.use_riou {
        terms.push(g.scale(riou, cfg.lambda_riou * inv));
    }
    let mut total = g.constant(Tensor::scalar(0.0));
    for t in terms {
        total = g.add(total, t)?;
    }
    Ok(SetLoss {
        cls,
        l1,
        riou,
        total,
        matched: matched.to_vec(),
    })
}
