//! Semantic, spatial, occurrence and hybrid certainty of instance sets, the
//! image-level aggregates, and the forward-pass consistency analysis.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::{group_instances_with, GroupingParams, InstanceSet, ScoredInstance};
use crate::mask::{iou_boxes, iou_masks, BinaryMask};

/// Per-set certainty values. `c_spl = c_box * c_mask` and
/// `c_h = c_sem * c_spl * c_occ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertaintyBreakdown {
    pub c_sem: f64,
    pub c_box: f64,
    pub c_mask: f64,
    pub c_spl: f64,
    pub c_occ: f64,
    pub c_h: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CertaintyMethod {
    #[default]
    Average,
    Minimum,
}

impl FromStr for CertaintyMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "average" => Ok(Self::Average),
            "minimum" => Ok(Self::Minimum),
            other => Err(Error::invalid(format!(
                "certainty method must be 'average' or 'minimum', got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for CertaintyMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Average => "average",
            Self::Minimum => "minimum",
        })
    }
}

/// Shannon entropy with `0 log 0 = 0`, in the given log base.
pub fn entropy(scores: &[f64], log_base: f64) -> f64 {
    let ln_base = log_base.ln();
    -scores
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln() / ln_base)
        .sum::<f64>()
}

/// `1 - H(P) / H_max(n)` for one detection.
pub fn instance_semantic_certainty(scores: &[f64], log_base: f64) -> Result<f64> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::invalid(format!("semantic certainty needs at least 2 classes, got {n}")));
    }
    let h_max = (n as f64).ln() / log_base.ln();
    let value = 1.0 - entropy(scores, log_base) / h_max;
    Ok(value.clamp(0.0, 1.0))
}

/// Largest deviation of a score vector's sum from 1 that is silently
/// corrected by [`normalize_scores`].
pub const SCORE_SUM_TOLERANCE: f64 = 1e-3;

/// Rescales `scores` to sum to 1 when the sum is off by more than rounding
/// noise but within [`SCORE_SUM_TOLERANCE`]; rejects negative or non-finite entries and
/// larger deviations.
pub fn normalize_scores(scores: &mut [f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::invalid("scores must be finite and non-negative"));
    }
    let sum: f64 = scores.iter().sum();
    let dev = (sum - 1.0).abs();
    // slack for sums like 0.7 + 0.299 that land a few ulps past the bound
    if dev > SCORE_SUM_TOLERANCE + 1e-12 {
        return Err(Error::invalid(format!("scores sum to {sum}, more than {SCORE_SUM_TOLERANCE} away from 1")));
    }
    if dev > 1e-12 {
        scores.iter_mut().for_each(|s| *s /= sum);
    }
    Ok(())
}

/// Mean normalized inverse entropy over the set's members (natural log).
pub fn semantic_certainty(set: &InstanceSet, n: usize) -> Result<f64> {
    semantic_certainty_in_base(set, n, std::f64::consts::E)
}

pub fn semantic_certainty_in_base(set: &InstanceSet, n: usize, log_base: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid(format!("semantic certainty needs at least 2 classes, got {n}")));
    }
    if set.is_empty() {
        return Err(Error::invalid("semantic certainty of an empty instance set"));
    }
    let mut acc = 0.0;
    for m in &set.members {
        if m.scores.len() != n {
            return Err(Error::invalid(format!(
                "member has {} scores, expected {n}",
                m.scores.len()
            )));
        }
        acc += instance_semantic_certainty(&m.scores, log_base)?;
    }
    Ok(acc / set.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialCertainty {
    pub c_box: f64,
    pub c_mask: f64,
    pub c_spl: f64,
}

/// Mean box IoU and mean mask IoU of the members against the set's mean box
/// and consensus mask. An empty consensus mask gives `c_mask = 0`.
pub fn spatial_certainty(set: &InstanceSet) -> Result<SpatialCertainty> {
    if set.is_empty() {
        return Err(Error::invalid("spatial certainty of an empty instance set"));
    }
    let r = set.len() as f64;
    let mut box_acc = 0.0;
    let mut mask_acc = 0.0;
    let empty_consensus = set.consensus.is_empty();
    for m in &set.members {
        box_acc += iou_boxes(&set.mean_box, &m.bbox)?;
        if !empty_consensus {
            mask_acc += iou_masks(&set.consensus, &m.mask)?;
        }
    }
    let c_box = box_acc / r;
    let c_mask = mask_acc / r;
    Ok(SpatialCertainty {
        c_box,
        c_mask,
        c_spl: c_box * c_mask,
    })
}

/// Distinct forward passes represented in the set divided by `fp`.
pub fn occurrence_certainty(set: &InstanceSet, fp: u32) -> Result<f64> {
    if fp == 0 {
        return Err(Error::invalid("forward pass count must be at least 1"));
    }
    let passes = set.distinct_passes();
    if passes as u64 > fp as u64 {
        return Err(Error::invalid(format!(
            "instance set spans {passes} forward passes but only {fp} were run"
        )));
    }
    if let Some(m) = set.members.iter().find(|m| m.forward_pass >= fp) {
        return Err(Error::invalid(format!(
            "member forward_pass {} out of range for {fp} passes",
            m.forward_pass
        )));
    }
    Ok(passes as f64 / fp as f64)
}

pub fn hybrid_certainty(set: &InstanceSet, fp: u32, n: usize) -> Result<CertaintyBreakdown> {
    let c_sem = semantic_certainty(set, n)?;
    let SpatialCertainty { c_box, c_mask, c_spl } = spatial_certainty(set)?;
    let c_occ = occurrence_certainty(set, fp)?;
    Ok(CertaintyBreakdown {
        c_sem,
        c_box,
        c_mask,
        c_spl,
        c_occ,
        c_h: c_sem * c_spl * c_occ,
    })
}

/// Aggregates set certainties into one image value. An image without sets
/// gets `no_detection`.
pub fn image_certainty(sets: &[CertaintyBreakdown], mode: CertaintyMethod, no_detection: f64) -> f64 {
    if sets.is_empty() {
        return no_detection;
    }
    match mode {
        CertaintyMethod::Average => sets.iter().map(|s| s.c_h).sum::<f64>() / sets.len() as f64,
        CertaintyMethod::Minimum => sets.iter().map(|s| s.c_h).fold(f64::INFINITY, f64::min),
    }
}

/// Everything needed to turn raw detections into certainty values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertaintyParams {
    pub forward_passes: u32,
    pub num_classes: usize,
    pub grouping: GroupingParams,
    pub no_detection_certainty: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageCertainty {
    pub image_id: String,
    pub sets: Vec<(InstanceSet, CertaintyBreakdown)>,
    pub value_avg: f64,
    pub value_min: f64,
}

impl ImageCertainty {
    pub fn value(&self, mode: CertaintyMethod) -> f64 {
        match mode {
            CertaintyMethod::Average => self.value_avg,
            CertaintyMethod::Minimum => self.value_min,
        }
    }

    pub fn set_count(&self) -> usize {
        self.sets.len()
    }
}

/// Groups one image's Monte-Carlo detections and scores every set.
pub fn evaluate_image(image_id: &str, instances: &[ScoredInstance], params: &CertaintyParams) -> Result<ImageCertainty> {
    if let Some(bad) = instances.iter().find(|i| i.image_id != image_id) {
        return Err(Error::invalid(format!(
            "detection for {:?} passed with image {image_id:?}",
            bad.image_id
        )));
    }
    let sets = group_instances_with(instances, &params.grouping)?;
    let scored = sets
        .into_iter()
        .map(|s| {
            let b = hybrid_certainty(&s, params.forward_passes, params.num_classes)?;
            Ok((s, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let breakdowns: Vec<_> = scored.iter().map(|(_, b)| *b).collect();
    Ok(ImageCertainty {
        image_id: image_id.to_string(),
        value_avg: image_certainty(&breakdowns, CertaintyMethod::Average, params.no_detection_certainty),
        value_min: image_certainty(&breakdowns, CertaintyMethod::Minimum, params.no_detection_certainty),
        sets: scored,
    })
}

/// Evaluates many images in parallel; the result is keyed by image id.
pub fn evaluate_images(
    detections: &BTreeMap<String, Vec<ScoredInstance>>,
    params: &CertaintyParams,
) -> Result<BTreeMap<String, ImageCertainty>> {
    detections
        .par_iter()
        .map(|(id, inst)| evaluate_image(id, inst, params).map(|c| (id.clone(), c)))
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Hybrid certainty of one set, tagged with its image and consensus mask so
/// it can be matched across runs.
#[derive(Clone, Debug, PartialEq)]
pub struct SetCertainty {
    pub image_id: String,
    pub consensus: BinaryMask,
    pub c_h: f64,
}

impl SetCertainty {
    pub fn from_image(image: &ImageCertainty) -> Vec<SetCertainty> {
        image
            .sets
            .iter()
            .map(|(s, b)| SetCertainty {
                image_id: image.image_id.clone(),
                consensus: s.consensus.clone(),
                c_h: b.c_h,
            })
            .collect()
    }
}

/// Mean absolute hybrid-certainty difference against the reference run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub fp: u32,
    /// Zero when nothing matched; check `matched`.
    pub delta: f64,
    pub matched: usize,
    pub unmatched: usize,
}

/// For every forward-pass count, matches each set to the reference-run set
/// of the same image with the highest consensus IoU (must exceed
/// `iou_threshold`) and averages `|c_h - c_h_ref|` over matched sets.
pub fn consistency_delta(
    per_fp: &BTreeMap<u32, Vec<SetCertainty>>,
    reference_fp: u32,
    iou_threshold: f64,
) -> Result<Vec<ConsistencyRecord>> {
    let reference = per_fp
        .get(&reference_fp)
        .ok_or_else(|| Error::invalid(format!("reference forward-pass count {reference_fp} missing")))?;
    let mut by_image: BTreeMap<&str, Vec<&SetCertainty>> = BTreeMap::new();
    for s in reference {
        by_image.entry(s.image_id.as_str()).or_default().push(s);
    }

    let mut out = Vec::with_capacity(per_fp.len());
    for (&fp, sets) in per_fp {
        let mut acc = 0.0;
        let mut matched = 0;
        let mut unmatched = 0;
        for s in sets {
            let mut best: Option<(f64, &SetCertainty)> = None;
            for r in by_image.get(s.image_id.as_str()).into_iter().flatten() {
                let iou = iou_masks(&s.consensus, &r.consensus)?;
                if iou > iou_threshold && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, r));
                }
            }
            match best {
                Some((_, r)) => {
                    acc += (s.c_h - r.c_h).abs();
                    matched += 1;
                }
                None => unmatched += 1,
            }
        }
        out.push(ConsistencyRecord {
            fp,
            delta: if matched > 0 { acc / matched as f64 } else { 0.0 },
            matched,
            unmatched,
        });
    }
    Ok(out)
}
