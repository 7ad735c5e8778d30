//! Greedy mask NMS and COCO-style mask mAP.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{canonical_order, ScoredInstance};
use crate::mask::{iou_masks, BinaryMask, BoundingBox};

/// One annotated object.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthInstance {
    pub image_id: String,
    pub class: usize,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
}

fn by_confidence(a: &ScoredInstance, b: &ScoredInstance) -> Ordering {
    b.confidence()
        .total_cmp(&a.confidence())
        .then_with(|| canonical_order(a, b))
}

/// Greedy suppression in descending confidence: an instance is dropped when
/// its mask IoU with an already kept instance of the same image is at least
/// `overlap_threshold`. Output is in descending confidence order.
pub fn apply_nms(instances: &[ScoredInstance], overlap_threshold: f64) -> Vec<ScoredInstance> {
    let mut order: Vec<&ScoredInstance> = instances.iter().collect();
    order.sort_by(|a, b| by_confidence(a, b));
    let mut kept: Vec<&ScoredInstance> = Vec::with_capacity(order.len());
    for cand in order {
        let suppressed = kept.iter().any(|k| {
            k.image_id == cand.image_id
                && iou_masks(&k.mask, &cand.mask).is_ok_and(|iou| iou >= overlap_threshold)
        });
        if !suppressed {
            kept.push(cand);
        }
    }
    kept.into_iter().cloned().collect()
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Mean of `ap_per_class`, on a 0-100 scale.
    pub map_overall: f64,
    /// Keyed by class index; only classes present in the ground truth.
    pub ap_per_class: BTreeMap<usize, f64>,
    pub gt_counts: BTreeMap<usize, usize>,
    pub prediction_counts: BTreeMap<usize, usize>,
}

/// Mask mAP. Predictions are matched greedily in descending confidence to
/// the best-overlapping unmatched ground truth of the same class and image
/// with IoU >= threshold; AP is the 101-point interpolated area under the
/// precision/recall curve, averaged over thresholds and then over classes.
pub fn mean_average_precision(
    predictions: &[ScoredInstance],
    ground_truth: &[GroundTruthInstance],
    iou_thresholds: &[f64],
) -> Result<EvaluationReport> {
    if ground_truth.is_empty() {
        return Err(Error::invalid("mAP is undefined without ground truth"));
    }
    if iou_thresholds.is_empty() {
        return Err(Error::invalid("at least one IoU threshold is required"));
    }

    let mut gt_by_class: BTreeMap<usize, BTreeMap<&str, Vec<&GroundTruthInstance>>> = BTreeMap::new();
    for g in ground_truth {
        gt_by_class
            .entry(g.class)
            .or_default()
            .entry(g.image_id.as_str())
            .or_default()
            .push(g);
    }
    let mut pred_by_class: BTreeMap<usize, BTreeMap<&str, Vec<&ScoredInstance>>> = BTreeMap::new();
    for p in predictions {
        pred_by_class
            .entry(p.class())
            .or_default()
            .entry(p.image_id.as_str())
            .or_default()
            .push(p);
    }

    let mut ap_per_class = BTreeMap::new();
    let mut gt_counts = BTreeMap::new();
    for (&class, gts_by_image) in &gt_by_class {
        let npos: usize = gts_by_image.values().map(Vec::len).sum();
        gt_counts.insert(class, npos);
        let empty = BTreeMap::new();
        let preds_by_image = pred_by_class.get(&class).unwrap_or(&empty);

        // Per image: predictions in descending confidence and their IoU rows.
        let mut images = Vec::new();
        for (&image, preds) in preds_by_image {
            let mut preds = preds.clone();
            preds.sort_by(|a, b| by_confidence(a, b));
            let gts = gts_by_image.get(image).map(Vec::as_slice).unwrap_or(&[]);
            let ious = preds
                .iter()
                .map(|p| gts.iter().map(|g| iou_masks(&p.mask, &g.mask)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            images.push((preds, ious));
        }

        let mut ap_sum = 0.0;
        for &t in iou_thresholds {
            let mut dets: Vec<(f64, usize, bool)> = Vec::new();
            for (preds, ious) in &images {
                let n_gt = ious.first().map_or(0, Vec::len);
                let mut taken = vec![false; n_gt];
                for (p, row) in preds.iter().zip(ious) {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, &iou) in row.iter().enumerate() {
                        if taken[gi] || iou < t {
                            continue;
                        }
                        if best.is_none_or(|(_, b)| iou > b) {
                            best = Some((gi, iou));
                        }
                    }
                    if let Some((gi, _)) = best {
                        taken[gi] = true;
                    }
                    dets.push((p.confidence(), dets.len(), best.is_some()));
                }
            }
            ap_sum += interpolated_ap(&mut dets, npos);
        }
        ap_per_class.insert(class, 100.0 * ap_sum / iou_thresholds.len() as f64);
    }

    let prediction_counts = pred_by_class
        .iter()
        .map(|(&c, imgs)| (c, imgs.values().map(Vec::len).sum()))
        .collect();
    let map_overall = ap_per_class.values().sum::<f64>() / ap_per_class.len() as f64;
    Ok(EvaluationReport {
        map_overall,
        ap_per_class,
        gt_counts,
        prediction_counts,
    })
}

/// 101-point interpolated AP in [0, 1]. `dets` holds
/// `(confidence, arrival index, is_true_positive)`.
fn interpolated_ap(dets: &mut [(f64, usize, bool)], npos: usize) -> f64 {
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(dets.len());
    let mut precision = Vec::with_capacity(dets.len());
    for (i, d) in dets.iter().enumerate() {
        if d.2 {
            tp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut acc = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            acc += precision[idx];
        }
    }
    acc / 101.0
}
