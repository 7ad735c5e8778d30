//! Parametric stand-in for a Monte-Carlo-dropout instance segmenter.
//!
//! Each ground-truth object yields at most one detection per forward pass.
//! Three independent noise axes degrade the detection, each scaled by
//! `1 - skill` of the object's true class:
//!
//! * occurrence: the object is missed with probability `miss_probability`;
//! * semantic: class scores are `softmax((onehot + confusion * eps) / temperature)`;
//! * spatial: the outline is translated and dilated by Gaussian `jitter` pixels.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::active::{filter_detections, AnnotatedWorld, Detector, DetectorFactory, TrainingEffort, TrainingRequest};
use crate::error::{Error, Result};
use crate::grouping::ScoredInstance;
use crate::seed;
use crate::sim::world::{Shape, SimImage, SimWorld};

/// Noise magnitudes of a completely untrained class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseScales {
    pub temperature: f64,
    pub confusion: f64,
    pub jitter: f64,
    pub miss_probability: f64,
}

impl NoiseScales {
    pub const NONE: NoiseScales = NoiseScales {
        temperature: 0.0,
        confusion: 0.0,
        jitter: 0.0,
        miss_probability: 0.0,
    };
}

impl Default for NoiseScales {
    fn default() -> Self {
        Self {
            temperature: 0.4,
            confusion: 0.6,
            jitter: 1.5,
            miss_probability: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimDetectorParams {
    /// Skill rate: `skill = 1 - exp(-rate * effective_count)`.
    pub skill_rate: f64,
    pub noise: NoiseScales,
    pub confidence_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for SimDetectorParams {
    fn default() -> Self {
        Self {
            // skill(500 instances) = 0.9
            skill_rate: std::f64::consts::LN_10 / 500.0,
            noise: NoiseScales::default(),
            confidence_threshold: 0.5,
            nms_threshold: 0.01,
        }
    }
}

impl SimDetectorParams {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::active::parse_value as p;
        match key {
            "skill_rate" => self.skill_rate = p(key, value)?,
            "temperature" => self.noise.temperature = p(key, value)?,
            "confusion" => self.noise.confusion = p(key, value)?,
            "jitter" => self.noise.jitter = p(key, value)?,
            "miss_probability" => self.noise.miss_probability = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.noise;
        if [self.skill_rate, n.temperature, n.confusion, n.jitter, n.miss_probability]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid("skill rate and noise scales must be finite and non-negative"));
        }
        if n.miss_probability > 1.0 {
            return Err(Error::invalid("miss_probability must be at most 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimDetectorState {
    pub skill: Vec<f64>,
    pub noise: NoiseScales,
    pub seed: u64,
}

impl SimDetectorState {
    pub fn untrained(num_classes: usize, noise: NoiseScales, seed: u64) -> Self {
        Self {
            skill: vec![0.0; num_classes],
            noise,
            seed,
        }
    }

    pub fn with_uniform_skill(num_classes: usize, skill: f64, noise: NoiseScales, seed: u64) -> Self {
        Self {
            skill: vec![skill.clamp(0.0, 1.0); num_classes],
            noise,
            seed,
        }
    }
}

/// Skill after training on `labelled`.
///
/// Per class, the effective count sums instances weighted by their image's
/// repeat factor and scaled by the exposure `1 - exp(-epochs)`, where
/// `epochs = 2 * effort.iterations / |labelled|` (batch size two). The
/// previous state acts as a floor.
pub fn train_sim_detector<W: AnnotatedWorld>(
    world: &W,
    labelled: &BTreeSet<String>,
    repeat_factors: &BTreeMap<String, u32>,
    effort: TrainingEffort,
    previous: Option<&SimDetectorState>,
    params: &SimDetectorParams,
    seed: u64,
) -> SimDetectorState {
    let k = world.num_classes();
    let mut effective = vec![0.0f64; k];
    for id in labelled {
        let rf = repeat_factors.get(id).copied().unwrap_or(1) as f64;
        for g in world.annotations(id) {
            if let Some(slot) = effective.get_mut(g.class) {
                *slot += rf;
            }
        }
    }
    let exposure = if labelled.is_empty() {
        0.0
    } else {
        let epochs = 2.0 * effort.iterations as f64 / labelled.len() as f64;
        1.0 - (-epochs).exp()
    };
    let skill = effective
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let s = 1.0 - (-params.skill_rate * exposure * n).exp();
            previous.and_then(|p| p.skill.get(c)).map_or(s, |&floor| s.max(floor))
        })
        .collect();
    SimDetectorState {
        skill,
        noise: params.noise,
        seed,
    }
}

fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        let mut out = vec![0.0; logits.len()];
        out[best] = 1.0;
        return out;
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One pass over one image. Every object draws the same number of random
/// variates whether or not it is emitted, so passes stay aligned across
/// noise settings.
fn sample_pass(state: &SimDetectorState, image: &SimImage, width: u32, height: u32, pass: u32, rng: &mut ChaCha8Rng) -> Vec<ScoredInstance> {
    let k = state.skill.len();
    let mut out = Vec::with_capacity(image.objects.len());
    for obj in &image.objects {
        let u: f64 = rng.random();
        let eps: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        let dr: f64 = rng.sample(StandardNormal);

        let weakness = 1.0 - state.skill.get(obj.class).copied().unwrap_or(0.0);
        let n = &state.noise;
        if u < n.miss_probability * weakness {
            continue;
        }
        let spread = n.confusion * weakness;
        let logits: Vec<f64> = eps
            .iter()
            .enumerate()
            .map(|(c, e)| if c == obj.class { 1.0 } else { 0.0 } + spread * e)
            .collect();
        let scores = softmax_scaled(&logits, n.temperature * weakness);

        let j = n.jitter * weakness;
        let s = obj.shape;
        let shape = Shape {
            cx: s.cx + j * dx,
            cy: s.cy + j * dy,
            rx: (s.rx + 0.5 * j * dr).max(0.5),
            ry: (s.ry + 0.5 * j * dr).max(0.5),
            ..s
        };
        let mask = shape.render(width, height);
        let Some(bbox) = mask.bounding_box() else { continue };
        out.push(ScoredInstance {
            image_id: image.id.clone(),
            forward_pass: pass,
            scores,
            bbox,
            mask,
        });
    }
    out
}

/// Raw Monte-Carlo output of `fp` passes, before confidence filtering.
pub fn infer_mc_raw(state: &SimDetectorState, world: &SimWorld, image: &SimImage, fp: u32, seed: u64) -> Vec<ScoredInstance> {
    let (w, h) = (world.params.width, world.params.height);
    (0..fp)
        .flat_map(|pass| {
            let mut rng = seed::rng(seed::derive(seed, &[pass as u64]));
            sample_pass(state, image, w, h, pass, &mut rng)
        })
        .collect()
}

/// Monte-Carlo inference: `fp` noisy passes, each confidence-filtered and
/// NMS-suppressed on its own.
pub fn infer_mc(
    state: &SimDetectorState,
    world: &SimWorld,
    image: &SimImage,
    fp: u32,
    seed: u64,
    params: &SimDetectorParams,
) -> Vec<ScoredInstance> {
    filter_detections(
        infer_mc_raw(state, world, image, fp, seed),
        params.confidence_threshold,
        params.nms_threshold,
    )
}

/// Detector handle bound to a world.
#[derive(Clone, Debug)]
pub struct SimDetector<'w> {
    pub world: &'w SimWorld,
    pub state: SimDetectorState,
    pub params: SimDetectorParams,
}

impl SimDetector<'_> {
    fn image(&self, image_id: &str) -> Result<&SimImage> {
        self.world
            .image(image_id)
            .ok_or_else(|| Error::invalid(format!("unknown image id {image_id:?}")))
    }
}

impl Detector for SimDetector<'_> {
    fn predict(&self, image_id: &str) -> Result<Vec<ScoredInstance>> {
        // A fixed per-image stream, shared by every model of one run.
        let s = seed::derive(self.state.seed, &[0xe7a1, seed::hash_str(image_id)]);
        Ok(infer_mc(&self.state, self.world, self.image(image_id)?, 1, s, &self.params))
    }

    fn predict_mc(&self, image_id: &str, forward_passes: u32, seed: u64) -> Result<Vec<ScoredInstance>> {
        Ok(infer_mc(&self.state, self.world, self.image(image_id)?, forward_passes, seed, &self.params))
    }
}

/// Trains simulated detectors for the active-learning loop.
pub struct SimDetectorFactory<'w> {
    pub world: &'w SimWorld,
    pub params: SimDetectorParams,
    /// Seed of the evaluation stream; keep equal across compared runs.
    pub eval_seed: u64,
}

impl<'w> DetectorFactory for SimDetectorFactory<'w> {
    type Detector = SimDetector<'w>;

    fn train(&mut self, request: &TrainingRequest<'_>, previous: Option<&SimDetector<'w>>) -> Result<SimDetector<'w>> {
        self.params.validate()?;
        let state = train_sim_detector(
            self.world,
            request.labelled,
            request.repeat_factors,
            request.effort,
            previous.map(|p| &p.state),
            &self.params,
            self.eval_seed,
        );
        Ok(SimDetector {
            world: self.world,
            state,
            params: self.params.clone(),
        })
    }
}
