//! Pool-based active-learning loop.
//!
//! One run: random initial dataset, annotate, train, evaluate; then for each
//! sampling iteration select images (lowest Monte-Carlo certainty or at
//! random), annotate them, retrain from the previous detector, evaluate and
//! record. Annotation is a lookup into the world's stored ground truth.

mod config;
mod sampling;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub use config::{parse_config_lines, parse_value, EngineConfig, SamplingMethod};
pub use sampling::{initial_dataset, oversampling_weights, random_sample, uncertainty_sample};

use crate::certainty::{evaluate_image, CertaintyParams};
use crate::error::{Error, Result};
use crate::eval::{apply_nms, coco_iou_thresholds, mean_average_precision, GroundTruthInstance};
use crate::grouping::{GroupingParams, ScoredInstance};
use crate::mask::VoteRule;
use crate::seed;

/// Images with stored annotations, split into a training pool and a
/// held-out test set.
pub trait AnnotatedWorld: Sync {
    fn pool(&self) -> &[String];
    fn test_set(&self) -> &[String];
    fn annotations(&self, image_id: &str) -> &[GroundTruthInstance];
    fn num_classes(&self) -> usize;
    fn minority_classes(&self) -> Vec<usize>;
}

pub trait Detector: Sync {
    /// Single inference without dropout, used for evaluation.
    fn predict(&self, image_id: &str) -> Result<Vec<ScoredInstance>>;

    /// `forward_passes` stochastic passes over one image. Each returned
    /// instance is tagged with the pass that produced it.
    fn predict_mc(&self, image_id: &str, forward_passes: u32, seed: u64) -> Result<Vec<ScoredInstance>>;
}

/// Training budget that grows with the training-set size: a base of 2500
/// iterations plus 2500 for every full 500 images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainingEffort {
    pub iterations: u64,
}

impl TrainingEffort {
    pub fn for_train_size(num_images: usize) -> Self {
        Self {
            iterations: 2500 + 2500 * (num_images as u64 / 500),
        }
    }
}

pub struct TrainingRequest<'a> {
    pub iteration: usize,
    pub labelled: &'a BTreeSet<String>,
    pub repeat_factors: &'a BTreeMap<String, u32>,
    pub effort: TrainingEffort,
}

pub trait DetectorFactory {
    type Detector: Detector;

    /// Trains on the labelled set, starting from `previous` when given.
    fn train(&mut self, request: &TrainingRequest<'_>, previous: Option<&Self::Detector>) -> Result<Self::Detector>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub iteration: usize,
    pub num_train_images: usize,
    pub map: f64,
    /// Images added in this iteration (the initial dataset at iteration 0).
    pub sampled: Vec<String>,
}

impl CurvePoint {
    /// First 16 hex digits of SHA-256 over the sorted ids, newline-joined.
    pub fn sampled_digest(&self) -> String {
        let mut h = Sha256::new();
        for (i, id) in self.sampled.iter().enumerate() {
            if i > 0 {
                h.update(b"\n");
            }
            h.update(id.as_bytes());
        }
        hex::encode(h.finalize())[..16].to_string()
    }
}

/// Cumulative per-class instance counts over every image sampled so far.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTally {
    pub iteration: usize,
    pub counts: Vec<u64>,
}

impl ClassTally {
    pub fn fraction(&self, class: usize) -> f64 {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            0.0
        } else {
            self.counts[class] as f64 / total as f64
        }
    }

    pub fn fraction_of(&self, classes: &[usize]) -> f64 {
        classes.iter().map(|&c| self.fraction(c)).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolState {
    pub labelled: BTreeSet<String>,
    pub available: BTreeSet<String>,
    pub curve: Vec<CurvePoint>,
    pub tallies: Vec<ClassTally>,
    /// Set when the pool ran out before the requested iterations finished.
    pub truncated: bool,
    pub requested_iterations: usize,
    /// Monte-Carlo forward passes spent on pool images.
    pub pool_inference_passes: u64,
}

impl PoolState {
    pub fn completed_iterations(&self) -> usize {
        self.curve.len().saturating_sub(1)
    }

    pub fn maps(&self) -> Vec<f64> {
        self.curve.iter().map(|p| p.map).collect()
    }
}

fn certainty_params(config: &EngineConfig, num_classes: usize) -> CertaintyParams {
    CertaintyParams {
        forward_passes: config.forward_passes,
        num_classes,
        grouping: GroupingParams {
            iou_threshold: config.iou_threshold,
            vote_fraction: config.vote_fraction,
            vote_rule: VoteRule::AtLeast,
        },
        no_detection_certainty: config.no_detection_certainty,
    }
}

/// Confidence filter followed by NMS within each forward pass.
pub fn filter_detections(instances: Vec<ScoredInstance>, confidence_threshold: f64, nms_threshold: f64) -> Vec<ScoredInstance> {
    let mut by_pass: BTreeMap<u32, Vec<ScoredInstance>> = BTreeMap::new();
    for inst in instances {
        if inst.confidence() >= confidence_threshold {
            by_pass.entry(inst.forward_pass).or_default().push(inst);
        }
    }
    by_pass.into_values().flat_map(|v| apply_nms(&v, nms_threshold)).collect()
}

/// mAP of `detector` on the world's test set.
pub fn evaluate_detector<D: Detector, W: AnnotatedWorld>(detector: &D, world: &W, config: &EngineConfig) -> Result<f64> {
    let predictions = world
        .test_set()
        .par_iter()
        .map(|id| {
            detector
                .predict(id)
                .map(|p| filter_detections(p, config.confidence_threshold, config.nms_threshold))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    let gt: Vec<GroundTruthInstance> = world
        .test_set()
        .iter()
        .flat_map(|id| world.annotations(id).iter().cloned())
        .collect();
    Ok(mean_average_precision(&predictions, &gt, &coco_iou_thresholds())?.map_overall)
}

/// Image certainty of every available image under `detector`.
pub fn pool_certainties<D: Detector>(
    detector: &D,
    available: &BTreeSet<String>,
    config: &EngineConfig,
    num_classes: usize,
    iteration: usize,
) -> Result<BTreeMap<String, f64>> {
    let params = certainty_params(config, num_classes);
    available
        .par_iter()
        .map(|id| {
            let s = seed::derive(config.seed, &[0x4d43, seed::hash_str(id), iteration as u64]);
            let raw = detector.predict_mc(id, config.forward_passes, s)?;
            let dets = filter_detections(raw, config.confidence_threshold, config.nms_threshold);
            let cert = evaluate_image(id, &dets, &params)?;
            Ok((id.clone(), cert.value(config.certainty_method)))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

fn class_lists<W: AnnotatedWorld>(world: &W, ids: &BTreeSet<String>) -> BTreeMap<String, Vec<usize>> {
    ids.iter()
        .map(|id| (id.clone(), world.annotations(id).iter().map(|g| g.class).collect()))
        .collect()
}

/// Runs the full sampling loop and returns the final pool state with one
/// curve point per completed iteration plus the initial model.
pub fn run_active_learning<W, F>(config: &EngineConfig, world: &W, factory: &mut F) -> Result<PoolState>
where
    W: AnnotatedWorld,
    F: DetectorFactory,
{
    config.validate()?;
    let num_classes = world.num_classes();
    if num_classes < 2 {
        return Err(Error::invalid("world must have at least 2 classes"));
    }
    let minority = world.minority_classes();

    let initial = initial_dataset(world.pool(), config.initial_dataset_size, seed::derive(config.seed, &[0x1417]))?;
    let mut labelled = initial.clone();
    let mut available: BTreeSet<String> = world.pool().iter().filter(|id| !initial.contains(*id)).cloned().collect();

    let mut tally = vec![0u64; num_classes];
    let add_to_tally = |ids: &BTreeSet<String>, tally: &mut Vec<u64>| -> Result<()> {
        for id in ids {
            for g in world.annotations(id) {
                let slot = tally
                    .get_mut(g.class)
                    .ok_or_else(|| Error::invalid(format!("class {} out of range in {id}", g.class)))?;
                *slot += 1;
            }
        }
        Ok(())
    };
    add_to_tally(&initial, &mut tally)?;

    let weights = oversampling_weights(&class_lists(world, &labelled), &minority);
    let request = TrainingRequest {
        iteration: 0,
        labelled: &labelled,
        repeat_factors: &weights,
        effort: TrainingEffort::for_train_size(labelled.len()),
    };
    let mut model = factory.train(&request, None)?;
    let map = evaluate_detector(&model, world, config)?;

    let mut state = PoolState {
        labelled: BTreeSet::new(),
        available: BTreeSet::new(),
        curve: vec![CurvePoint {
            iteration: 0,
            num_train_images: labelled.len(),
            map,
            sampled: initial.iter().cloned().collect(),
        }],
        tallies: vec![ClassTally {
            iteration: 0,
            counts: tally.clone(),
        }],
        truncated: false,
        requested_iterations: config.sampling_iterations,
        pool_inference_passes: 0,
    };
    log::info!("iteration 0: {} train images, mAP {map:.3}", labelled.len());

    for i in 1..=config.sampling_iterations {
        if available.is_empty() {
            log::warn!("pool exhausted before iteration {i}; stopping");
            state.truncated = true;
            break;
        }
        let picked = match config.sampling_method {
            SamplingMethod::Uncertainty => {
                let certainties = pool_certainties(&model, &available, config, num_classes, i)?;
                state.pool_inference_passes += config.forward_passes as u64 * available.len() as u64;
                uncertainty_sample(&certainties, config.sample_size)?
            }
            SamplingMethod::Random => random_sample(&available, config.sample_size, seed::derive(config.seed, &[0x5a4d, i as u64]))?.0,
        };
        if picked.len() < config.sample_size {
            log::warn!("iteration {i} sampled only {} of {} images", picked.len(), config.sample_size);
            state.truncated = true;
        }

        add_to_tally(&picked, &mut tally)?;
        labelled.extend(picked.iter().cloned());
        let weights = oversampling_weights(&class_lists(world, &labelled), &minority);
        let request = TrainingRequest {
            iteration: i,
            labelled: &labelled,
            repeat_factors: &weights,
            effort: TrainingEffort::for_train_size(labelled.len()),
        };
        model = factory.train(&request, Some(&model))?;
        let map = evaluate_detector(&model, world, config)?;
        for id in &picked {
            available.remove(id);
        }
        log::info!("iteration {i}: {} train images, mAP {map:.3}", labelled.len());
        state.curve.push(CurvePoint {
            iteration: i,
            num_train_images: labelled.len(),
            map,
            sampled: picked.into_iter().collect(),
        });
        state.tallies.push(ClassTally {
            iteration: i,
            counts: tally.clone(),
        });
    }

    state.labelled = labelled;
    state.available = available;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_effort_schedule() {
        assert_eq!(TrainingEffort::for_train_size(100).iterations, 2500);
        assert_eq!(TrainingEffort::for_train_size(500).iterations, 5000);
        assert_eq!(TrainingEffort::for_train_size(2500).iterations, 15000);
    }

    #[test]
    fn digest_is_stable() {
        let p = CurvePoint {
            iteration: 1,
            num_train_images: 2,
            map: 0.0,
            sampled: vec!["a".into(), "b".into()],
        };
        // sha256("a\nb")
        assert_eq!(p.sampled_digest(), "7e18f737311b2dc3");
    }

    #[test]
    fn tally_fractions() {
        let t = ClassTally {
            iteration: 0,
            counts: vec![6, 1, 1],
        };
        assert_eq!(t.fraction(0), 0.75);
        assert_eq!(t.fraction_of(&[1, 2]), 0.25);
    }
}
