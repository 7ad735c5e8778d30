//! Per-image JSON dumps of Monte-Carlo detector output.
//!
//! ```json
//! {"schema_version":1,"image_id":"img_001","width":64,"height":64,"forward_passes":20,
//!  "instances":[{"forward_pass":0,"scores":[0.9,0.1],"box":[3,4,10,12],"mask_rle":"64,64:..."}]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certainty::normalize_scores;
use crate::error::{Error, Result};
use crate::grouping::ScoredInstance;
use crate::mask::{BinaryMask, BoundingBox};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Deserialize)]
struct Header {
    schema_version: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDump {
    schema_version: u32,
    image_id: String,
    width: u32,
    height: u32,
    forward_passes: u32,
    instances: Vec<RawInstance>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInstance {
    forward_pass: u32,
    scores: Vec<f64>,
    #[serde(rename = "box")]
    bbox: [u32; 4],
    mask_rle: String,
}

/// Validated Monte-Carlo output for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionDump {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub forward_passes: u32,
    pub instances: Vec<ScoredInstance>,
}

impl DetectionDump {
    /// Builds a dump from in-memory detections, checking the same
    /// invariants as [`DetectionDump::parse`].
    pub fn from_instances(image_id: &str, width: u32, height: u32, forward_passes: u32, instances: Vec<ScoredInstance>) -> Result<Self> {
        let dump = Self {
            image_id: image_id.to_string(),
            width,
            height,
            forward_passes,
            instances,
        };
        dump.validate()?;
        Ok(dump)
    }

    fn validate(&self) -> Result<()> {
        let id = &self.image_id;
        if self.forward_passes == 0 {
            return Err(Error::invalid(format!("{id}: forward_passes must be at least 1")));
        }
        let n = self.instances.first().map_or(0, |i| i.scores.len());
        for (k, inst) in self.instances.iter().enumerate() {
            if inst.image_id != *id {
                return Err(Error::invalid(format!("{id}: instance {k} belongs to image {:?}", inst.image_id)));
            }
            if inst.forward_pass >= self.forward_passes {
                return Err(Error::invalid(format!(
                    "{id}: instance {k} has forward_pass {} but the dump declares {} passes",
                    inst.forward_pass, self.forward_passes
                )));
            }
            if inst.scores.len() != n || n < 2 {
                return Err(Error::invalid(format!(
                    "{id}: instance {k} has {} scores, expected {} (at least 2)",
                    inst.scores.len(),
                    n.max(2)
                )));
            }
            if inst.mask.width() != self.width || inst.mask.height() != self.height {
                return Err(Error::invalid(format!(
                    "{id}: instance {k} mask is {}x{}, image is {}x{}",
                    inst.mask.width(),
                    inst.mask.height(),
                    self.width,
                    self.height
                )));
            }
            inst.bbox.validate()?;
            if !inst.bbox.fits_within(self.width, self.height) {
                return Err(Error::invalid(format!("{id}: instance {k} box lies outside the image")));
            }
        }
        Ok(())
    }

    /// Parses and validates one dump. `source` names the input in errors.
    pub fn parse(bytes: &[u8], source: &str) -> Result<Self> {
        let header: Header = serde_json::from_slice(bytes).map_err(|e| Error::format(source, e.to_string()))?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                source,
                format!("unsupported schema_version {}, expected {SCHEMA_VERSION}", header.schema_version),
            ));
        }
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let raw: RawDump = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::format(source, format!("{}: {}", e.path(), e.inner())))?;

        let id = raw.image_id;
        let instances = raw
            .instances
            .into_iter()
            .enumerate()
            .map(|(k, r)| {
                let field = |name: &str| format!("instances[{k}].{name}");
                let mask: BinaryMask = r
                    .mask_rle
                    .parse()
                    .map_err(|e| Error::format(source, format!("{id}: {}: {e}", field("mask_rle"))))?;
                let [x1, y1, x2, y2] = r.bbox;
                let mut scores = r.scores;
                normalize_scores(&mut scores).map_err(|e| Error::format(source, format!("{id}: {}: {e}", field("scores"))))?;
                Ok(ScoredInstance {
                    image_id: id.clone(),
                    forward_pass: r.forward_pass,
                    scores,
                    bbox: BoundingBox { x1, y1, x2, y2 },
                    mask,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dump = Self {
            image_id: id,
            width: raw.width,
            height: raw.height,
            forward_passes: raw.forward_passes,
            instances,
        };
        dump.validate().map_err(|e| Error::format(source, e.to_string()))?;
        Ok(dump)
    }

    /// Compact JSON in the canonical field order.
    pub fn to_json(&self) -> String {
        let raw = RawDump {
            schema_version: SCHEMA_VERSION,
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            forward_passes: self.forward_passes,
            instances: self
                .instances
                .iter()
                .map(|i| RawInstance {
                    forward_pass: i.forward_pass,
                    scores: i.scores.clone(),
                    bbox: i.bbox.as_array(),
                    mask_rle: i.mask.to_rle_string(),
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("dump serialization cannot fail")
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&bytes, &path.display().to_string())
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// `*.json` files directly inside `dir`, sorted by name.
pub fn dump_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir.display().to_string(), e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Reads every dump in `dir`, sorted by image id. Duplicate ids are rejected.
pub fn read_dump_dir(dir: &Path) -> Result<Vec<DetectionDump>> {
    let mut dumps = dump_files(dir)?
        .par_iter()
        .map(|p| DetectionDump::read_file(p))
        .collect::<Result<Vec<_>>>()?;
    dumps.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    if let Some(w) = dumps.windows(2).find(|w| w[0].image_id == w[1].image_id) {
        return Err(Error::invalid(format!("image id {:?} appears in more than one dump in {}", w[0].image_id, dir.display())));
    }
    Ok(dumps)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema_version":1,"image_id":"a","width":4,"height":2,"forward_passes":2,
        "instances":[{"forward_pass":1,"scores":[0.7,0.3],"box":[1,0,2,1],"mask_rle":"4,2:1 2 2 2 1"}]}"#;

    #[test]
    fn minimal_dump() {
        let d = DetectionDump::parse(MINIMAL.as_bytes(), "t").unwrap();
        assert_eq!(d.instances.len(), 1);
        let i = &d.instances[0];
        assert_eq!((i.forward_pass, i.class()), (1, 0));
        assert_eq!(i.mask.area(), 4);
        assert_eq!(i.bbox, BoundingBox { x1: 1, y1: 0, x2: 2, y2: 1 });
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let d = DetectionDump::parse(MINIMAL.as_bytes(), "t").unwrap();
        let once = d.to_json();
        let again = DetectionDump::parse(once.as_bytes(), "t").unwrap();
        assert_eq!(again, d);
        assert_eq!(again.to_json(), once);
        assert!(once.starts_with(r#"{"schema_version":1,"image_id":"a","width":4"#));
    }

    #[test]
    fn near_unit_scores_are_renormalized() {
        let text = MINIMAL.replace("[0.7,0.3]", "[0.7,0.299]");
        let d = DetectionDump::parse(text.as_bytes(), "t").unwrap();
        let sum: f64 = d.instances[0].scores.iter().sum();
        assert!((sum - 1.0).abs() < 1e-15);
        assert!(DetectionDump::parse(MINIMAL.replace("[0.7,0.3]", "[0.7,0.29]").as_bytes(), "t").is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let err = |text: String| DetectionDump::parse(text.as_bytes(), "t").unwrap_err().to_string();
        let e = err(MINIMAL.replace("1 2 2 2 1", "1 2 2 2 2"));
        assert!(e.contains("a:") && e.contains("mask_rle"), "{e}");
        assert!(err(MINIMAL.replace("\"schema_version\":1", "\"schema_version\":2")).contains("schema_version"));
        assert!(err(MINIMAL.replace("\"forward_pass\":1", "\"forward_pass\":2")).contains("forward_pass"));
        let e = err(MINIMAL.replace("\"width\":4", "\"width\":\"4\""));
        assert!(e.contains("width"), "{e}");
        let e = err(MINIMAL.replace("[1,0,2,1]", "[1,0,2]"));
        assert!(e.contains("instances[0].box"), "{e}");
        assert!(err(MINIMAL.replace("\"mask_rle\"", "\"extra\":0,\"mask_rle\"")).contains("extra"));
        assert!(err(MINIMAL.replace("\"4,2:", "\"4,3:")).contains("mask"));
    }
}
