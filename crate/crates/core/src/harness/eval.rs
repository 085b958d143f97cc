//! Rotated-box average precision, VOC2007 style.

use crate::error::{Error, Result};
use crate::geom::{rotated_iou, OrientedBox};
use crate::model::Detector;
use crate::tensor::sigmoid;

use super::data::Scene;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: OrientedBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` for classes without ground truth.
    pub ap: Vec<Option<f64>>,
    /// Mean over classes that have ground truth.
    pub map: f64,
    pub detections: Vec<Vec<Detection>>,
}

/// 11-point interpolated AP of a ranked list of hits against `npos`
/// ground truths.
pub fn voc07_ap(tp: &[bool], npos: usize) -> f64 {
    if npos == 0 {
        return 0.0;
    }
    let mut rec = Vec::with_capacity(tp.len());
    let mut prec = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        rec.push(t as f64 / npos as f64);
        prec.push(t as f64 / (t + f) as f64);
    }
    (0..=10)
        .map(|i| {
            let thr = i as f64 / 10.0;
            rec.iter()
                .zip(&prec)
                .filter(|(r, _)| **r >= thr)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Per-class AP over images. Detections are ranked by score (ties by image
/// then list order); each takes the ground truth of its class with the
/// highest IoU and counts as a hit only if that IoU reaches `iou_thresh`
/// and the ground truth is still unclaimed.
pub fn average_precision(
    detections: &[Vec<Detection>],
    truths: &[Vec<(usize, OrientedBox)>],
    classes: usize,
    iou_thresh: f64,
) -> Vec<Option<f64>> {
    (0..classes)
        .map(|c| {
            let npos: usize = truths.iter().map(|t| t.iter().filter(|o| o.0 == c).count()).sum();
            if npos == 0 {
                return None;
            }
            let mut ranked: Vec<(usize, &Detection)> = detections
                .iter()
                .enumerate()
                .flat_map(|(i, ds)| ds.iter().filter(|d| d.class == c).map(move |d| (i, d)))
                .collect();
            ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
            let mut claimed: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
            let tp: Vec<bool> = ranked
                .iter()
                .map(|&(img, d)| {
                    let best = truths[img]
                        .iter()
                        .enumerate()
                        .filter(|(_, o)| o.0 == c)
                        .map(|(j, o)| (j, rotated_iou(&d.bbox, &o.1)))
                        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                    match best {
                        Some((j, iou)) if iou >= iou_thresh && !claimed[img][j] => {
                            claimed[img][j] = true;
                            true
                        }
                        _ => false,
                    }
                })
                .collect();
            Some(voc07_ap(&tp, npos))
        })
        .collect()
}

/// Final-layer detections with score at least `floor`, one per query and
/// class.
pub fn detect(det: &Detector, image: &crate::tensor::Tensor, floor: f64) -> Result<Vec<Detection>> {
    let mut s = det.session(false);
    let out = det.forward(&mut s, image)?;
    let last = out.layers.last().ok_or_else(|| Error::Config("decoder has no layers".into()))?;
    let k = det.cfg.classes;
    let logits = s.graph.value(last.logits).data();
    let boxes = s.graph.value(last.boxes).data();
    let mut dets = Vec::new();
    for (q, b) in boxes.chunks(5).enumerate() {
        let bbox = OrientedBox::from_array(b.try_into().unwrap()).canonicalize();
        for c in 0..k {
            let score = sigmoid(logits[q * k + c]);
            if score >= floor {
                dets.push(Detection { class: c, score, bbox });
            }
        }
    }
    Ok(dets)
}

/// mAP of `det` on `scenes` at rotated IoU `iou_thresh`.
pub fn evaluate(det: &Detector, scenes: &[&Scene], iou_thresh: f64, floor: f64) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Usage("evaluation needs at least one scene".into()));
    }
    let detections = super::par_map(scenes.len(), |i| detect(det, &scenes[i].image, floor))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<Vec<(usize, OrientedBox)>> = scenes.iter().map(|s| s.objects.clone()).collect();
    let ap = average_precision(&detections, &truths, det.cfg.classes, iou_thresh);
    let present: Vec<f64> = ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalReport { ap, map, detections })
}
