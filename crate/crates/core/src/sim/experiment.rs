//! End-to-end simulated experiments: the sampling loop on a synthetic world
//! and the forward-pass consistency sweep.

use std::collections::BTreeMap;
use std::str::FromStr;

use rayon::prelude::*;

use crate::active::{parse_config_lines, run_active_learning, EngineConfig, PoolState};
use crate::certainty::{consistency_delta, evaluate_image, CertaintyParams, ConsistencyRecord, SetCertainty};
use crate::error::{Error, Result};
use crate::grouping::GroupingParams;
use crate::mask::VoteRule;
use crate::seed;
use crate::sim::detector::{infer_mc, SimDetectorFactory, SimDetectorParams, SimDetectorState};
use crate::sim::world::{generate_world, SimWorld, WorldParams};

/// Everything a `simulate` run needs, read from one flat config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimulationConfig {
    pub engine: EngineConfig,
    pub world: WorldParams,
    pub detector: SimDetectorParams,
}

impl SimulationConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        Ok(self.engine.apply(key, value)? || self.world.apply(key, value)? || self.detector.apply(key, value)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.world.validate()?;
        self.detector.validate()
    }
}

impl FromStr for SimulationConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = SimulationConfig::default();
        for (line, key, value) in parse_config_lines(text)? {
            let known = cfg.apply(&key, &value).map_err(|e| Error::Config {
                line,
                message: e.to_string(),
            })?;
            if !known {
                return Err(Error::Config {
                    line,
                    message: format!("unknown key {key:?}"),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs the sampling loop on an already generated world. The evaluation
/// stream depends only on the engine seed, so uncertainty and random runs
/// with equal seeds are scored on identical noise.
pub fn run_on_world(world: &SimWorld, engine: &EngineConfig, detector: &SimDetectorParams) -> Result<PoolState> {
    let mut detector = detector.clone();
    detector.confidence_threshold = engine.confidence_threshold;
    detector.nms_threshold = engine.nms_threshold;
    let mut factory = SimDetectorFactory {
        world,
        params: detector,
        eval_seed: seed::derive(engine.seed, &[0xe7a1]),
    };
    run_active_learning(engine, world, &mut factory)
}

pub fn run_simulation(config: &SimulationConfig) -> Result<PoolState> {
    config.validate()?;
    let world = generate_world(&config.world)?;
    run_on_world(&world, &config.engine, &config.detector)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyParams {
    pub forward_passes: Vec<u32>,
    pub reference_fp: u32,
    pub iou_threshold: f64,
    pub vote_fraction: f64,
    pub no_detection_certainty: f64,
    pub seed: u64,
}

impl Default for ConsistencyParams {
    fn default() -> Self {
        Self {
            forward_passes: vec![5, 20, 40],
            reference_fp: 100,
            iou_threshold: 0.5,
            vote_fraction: 0.25,
            no_detection_certainty: 1.0,
            seed: 0,
        }
    }
}

/// Instance-set certainties of `images` under `state` for each forward-pass
/// count. Every count gets its own inference stream.
pub fn sweep_forward_passes(
    world: &SimWorld,
    state: &SimDetectorState,
    detector: &SimDetectorParams,
    images: &[String],
    params: &ConsistencyParams,
) -> Result<BTreeMap<u32, Vec<SetCertainty>>> {
    let mut counts = params.forward_passes.clone();
    counts.push(params.reference_fp);
    counts.sort_unstable();
    counts.dedup();
    let mut out = BTreeMap::new();
    for fp in counts {
        let cp = CertaintyParams {
            forward_passes: fp,
            num_classes: state.skill.len(),
            grouping: GroupingParams {
                iou_threshold: params.iou_threshold,
                vote_fraction: params.vote_fraction,
                vote_rule: VoteRule::AtLeast,
            },
            no_detection_certainty: params.no_detection_certainty,
        };
        let per_image = images
            .par_iter()
            .map(|id| {
                let image = world
                    .image(id)
                    .ok_or_else(|| Error::invalid(format!("unknown image id {id:?}")))?;
                let s = seed::derive(params.seed, &[0xa1, fp as u64, seed::hash_str(id)]);
                let dets = infer_mc(state, world, image, fp, s, detector);
                Ok(SetCertainty::from_image(&evaluate_image(id, &dets, &cp)?))
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(fp, per_image.into_iter().flatten().collect());
    }
    Ok(out)
}

pub fn run_consistency(
    world: &SimWorld,
    state: &SimDetectorState,
    detector: &SimDetectorParams,
    images: &[String],
    params: &ConsistencyParams,
) -> Result<Vec<ConsistencyRecord>> {
    if params.forward_passes.iter().chain([&params.reference_fp]).any(|&fp| fp == 0) {
        return Err(Error::invalid("forward-pass counts must be at least 1"));
    }
    let per_fp = sweep_forward_passes(world, state, detector, images, params)?;
    consistency_delta(&per_fp, params.reference_fp, params.iou_threshold)
}
