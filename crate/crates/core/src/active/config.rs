//! Engine configuration and the flat `key = value` config-file format.

use std::fmt;
use std::str::FromStr;

use crate::certainty::CertaintyMethod;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SamplingMethod {
    #[default]
    Uncertainty,
    Random,
}

impl FromStr for SamplingMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uncertainty" => Ok(Self::Uncertainty),
            "random" => Ok(Self::Random),
            other => Err(Error::invalid(format!(
                "sampling method must be 'uncertainty' or 'random', got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for SamplingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uncertainty => "uncertainty",
            Self::Random => "random",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EngineConfig {
    pub sampling_method: SamplingMethod,
    pub sampling_iterations: usize,
    pub sample_size: usize,
    pub initial_dataset_size: usize,
    pub forward_passes: u32,
    pub certainty_method: CertaintyMethod,
    pub iou_threshold: f64,
    pub nms_threshold: f64,
    pub confidence_threshold: f64,
    pub no_detection_certainty: f64,
    /// Fraction of member masks a pixel needs to join the consensus mask.
    pub vote_fraction: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            sampling_method: SamplingMethod::Uncertainty,
            sampling_iterations: 12,
            sample_size: 200,
            initial_dataset_size: 100,
            forward_passes: 20,
            certainty_method: CertaintyMethod::Average,
            iou_threshold: 0.5,
            nms_threshold: 0.01,
            confidence_threshold: 0.5,
            no_detection_certainty: 1.0,
            vote_fraction: 0.25,
            seed: 0,
        }
    }
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be in (0,1), got {v}")))
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < 1 {
            return Err(Error::invalid("sample_size must be at least 1"));
        }
        if self.initial_dataset_size < 1 {
            return Err(Error::invalid("initial_dataset_size must be at least 1"));
        }
        if self.forward_passes < 2 {
            return Err(Error::invalid("forward_passes must be at least 2"));
        }
        open_unit("iou_threshold", self.iou_threshold)?;
        open_unit("nms_threshold", self.nms_threshold)?;
        open_unit("confidence_threshold", self.confidence_threshold)?;
        if !(0.0..=1.0).contains(&self.no_detection_certainty) {
            return Err(Error::invalid("no_detection_certainty must be in [0,1]"));
        }
        if !(self.vote_fraction > 0.0 && self.vote_fraction <= 1.0) {
            return Err(Error::invalid("vote_fraction must be in (0,1]"));
        }
        Ok(())
    }

    /// Applies one config key. Returns `Ok(false)` for keys this struct does
    /// not own so callers can layer several key spaces over one file.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "sampling_method" => self.sampling_method = value.parse()?,
            "sampling_iterations" => self.sampling_iterations = parse_value(key, value)?,
            "sample_size" => self.sample_size = parse_value(key, value)?,
            "initial_dataset_size" => self.initial_dataset_size = parse_value(key, value)?,
            "forward_passes" => self.forward_passes = parse_value(key, value)?,
            "certainty_method" => self.certainty_method = value.parse()?,
            "iou_threshold" => self.iou_threshold = parse_value(key, value)?,
            "nms_threshold" => self.nms_threshold = parse_value(key, value)?,
            "confidence_threshold" => self.confidence_threshold = parse_value(key, value)?,
            "no_detection_certainty" => self.no_detection_certainty = parse_value(key, value)?,
            "vote_fraction" => self.vote_fraction = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_config_text(&self) -> String {
        format!(
            "sampling_method = {}\nsampling_iterations = {}\nsample_size = {}\ninitial_dataset_size = {}\n\
             forward_passes = {}\ncertainty_method = {}\niou_threshold = {}\nnms_threshold = {}\n\
             confidence_threshold = {}\nno_detection_certainty = {}\nvote_fraction = {}\nseed = {}\n",
            self.sampling_method,
            self.sampling_iterations,
            self.sample_size,
            self.initial_dataset_size,
            self.forward_passes,
            self.certainty_method,
            self.iou_threshold,
            self.nms_threshold,
            self.confidence_threshold,
            self.no_detection_certainty,
            self.vote_fraction,
            self.seed
        )
    }
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::invalid(format!("bad value {value:?} for {key}: {e}")))
}

/// Splits config text into `(line number, key, value)` triples. Blank
/// lines and `#` comments are skipped; trailing comments are allowed.
pub fn parse_config_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
            line: i + 1,
            message: format!("expected 'key = value', got {raw:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Config {
                line: i + 1,
                message: "empty key".into(),
            });
        }
        out.push((i + 1, key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl FromStr for EngineConfig {
    type Err = Error;

    /// Parses a config file that only contains engine keys.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = EngineConfig::default();
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
