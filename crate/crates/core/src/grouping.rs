//! Grouping of repeated forward-pass detections into instance sets.
//!
//! Instances are visited in a canonical order (forward pass ascending, top
//! confidence descending, box corners ascending). Each instance joins the
//! set holding its best-overlapping member when that overlap exceeds the
//! IoU threshold; if it exceeds the threshold against members of several
//! sets, those sets are merged into the best match. Otherwise it founds a
//! new set. The result equals the connected components of the
//! `IoU > threshold` graph regardless of visiting order; the order fixes
//! only which set index each component gets.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::mask::{consensus_mask_with, iou_masks, mean_box, BinaryMask, BoundingBox, VoteRule};

/// One detection from one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredInstance {
    pub image_id: String,
    pub forward_pass: u32,
    /// Per-class confidences, summing to 1.
    pub scores: Vec<f64>,
    pub bbox: BoundingBox,
    pub mask: BinaryMask,
}

impl ScoredInstance {
    /// Top class score.
    pub fn confidence(&self) -> f64 {
        self.scores.iter().copied().fold(0.0, f64::max)
    }

    /// Argmax class; the lowest index wins ties.
    pub fn class(&self) -> usize {
        let mut best = 0;
        for (k, &p) in self.scores.iter().enumerate() {
            if p > self.scores[best] {
                best = k;
            }
        }
        best
    }
}

/// Canonical processing order used for grouping and NMS tie-breaks.
pub(crate) fn canonical_order(a: &ScoredInstance, b: &ScoredInstance) -> Ordering {
    a.forward_pass
        .cmp(&b.forward_pass)
        .then_with(|| b.confidence().total_cmp(&a.confidence()))
        .then_with(|| a.bbox.cmp(&b.bbox))
        .then_with(|| a.mask.runs().cmp(b.mask.runs()))
        .then_with(|| {
            a.scores
                .iter()
                .zip(&b.scores)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Parameters of the set construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupingParams {
    pub iou_threshold: f64,
    /// Fraction of member masks a pixel needs to enter the consensus mask.
    pub vote_fraction: f64,
    pub vote_rule: VoteRule,
}

impl Default for GroupingParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            vote_fraction: 0.25,
            vote_rule: VoteRule::AtLeast,
        }
    }
}

/// Detections judged to lie on the same object.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSet {
    pub members: Vec<ScoredInstance>,
    pub mean_box: BoundingBox,
    pub consensus: BinaryMask,
}

impl InstanceSet {
    pub fn from_members(members: Vec<ScoredInstance>, vote_fraction: f64, rule: VoteRule) -> Result<Self> {
        let boxes: Vec<_> = members.iter().map(|m| m.bbox).collect();
        let masks: Vec<_> = members.iter().map(|m| m.mask.clone()).collect();
        Ok(Self {
            mean_box: mean_box(&boxes)?,
            consensus: consensus_mask_with(&masks, vote_fraction, rule)?,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Number of distinct forward passes represented.
    pub fn distinct_passes(&self) -> usize {
        self.members.iter().map(|m| m.forward_pass).collect::<BTreeSet<_>>().len()
    }

    pub fn image_id(&self) -> &str {
        &self.members[0].image_id
    }
}

/// Groups one image's detections into instance sets with default
/// consensus settings.
pub fn group_instances(instances: &[ScoredInstance], iou_threshold: f64) -> Result<Vec<InstanceSet>> {
    group_instances_with(
        instances,
        &GroupingParams {
            iou_threshold,
            ..GroupingParams::default()
        },
    )
}

pub fn group_instances_with(instances: &[ScoredInstance], params: &GroupingParams) -> Result<Vec<InstanceSet>> {
    let tau = params.iou_threshold;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("iou_threshold must be in (0,1), got {tau}")));
    }
    let Some(first) = instances.first() else {
        return Ok(Vec::new());
    };
    if let Some(other) = instances.iter().find(|i| i.image_id != first.image_id) {
        return Err(Error::invalid(format!(
            "group_instances received mixed image ids {:?} and {:?}",
            first.image_id, other.image_id
        )));
    }

    let mut order: Vec<&ScoredInstance> = instances.iter().collect();
    order.sort_by(|a, b| canonical_order(a, b));

    // Each live set is a list of indices into `order`, in visiting order.
    let mut sets: Vec<Option<Vec<usize>>> = Vec::new();
    for (idx, inst) in order.iter().enumerate() {
        // (set index, best IoU within that set) for every set exceeding tau
        let mut hits: Vec<(usize, f64)> = Vec::new();
        for (si, set) in sets.iter().enumerate() {
            let Some(members) = set else { continue };
            let mut best = f64::NEG_INFINITY;
            for &m in members {
                if !boxes_touch(&order[m].bbox, &inst.bbox) {
                    continue;
                }
                let iou = iou_masks(&order[m].mask, &inst.mask)?;
                if iou > best {
                    best = iou;
                }
            }
            if best > tau {
                hits.push((si, best));
            }
        }
        // Highest IoU wins, earlier-created set on ties.
        let host = hits
            .iter()
            .copied()
            .reduce(|a, b| if b.1 > a.1 { b } else { a })
            .map(|(si, _)| si);
        match host {
            None => sets.push(Some(vec![idx])),
            Some(h) => {
                for &(si, _) in &hits {
                    if si != h {
                        let absorbed = sets[si].take().unwrap_or_default();
                        sets[h].as_mut().expect("host set is live").extend(absorbed);
                    }
                }
                let host_members = sets[h].as_mut().expect("host set is live");
                host_members.push(idx);
                host_members.sort_unstable();
            }
        }
    }

    sets.into_iter()
        .flatten()
        .map(|members| {
            let members = members.into_iter().map(|i| order[i].clone()).collect();
            InstanceSet::from_members(members, params.vote_fraction, params.vote_rule)
        })
        .collect()
}

/// Masks lie inside their boxes, so disjoint boxes imply zero mask IoU.
fn boxes_touch(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.x1 <= b.x2 && b.x1 <= a.x2 && a.y1 <= b.y2 && b.y1 <= a.y2
}
