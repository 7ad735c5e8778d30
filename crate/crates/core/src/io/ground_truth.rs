//! Ground-truth annotation file used by `eval`.
//!
//! ```json
//! {"schema_version":1,"images":[{"image_id":"a","width":64,"height":64,
//!   "annotations":[{"class":0,"box":[3,4,10,12],"mask_rle":"64,64:..."}]}]}
//! ```
//!
//! `box` may be omitted, in which case the mask's bounding box is used.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::GroundTruthInstance;
use crate::mask::{BinaryMask, BoundingBox};

use super::dump::SCHEMA_VERSION;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    schema_version: u32,
    images: Vec<RawImage>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    image_id: String,
    width: u32,
    height: u32,
    annotations: Vec<RawAnnotation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnnotation {
    class: usize,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[u32; 4]>,
    mask_rle: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthFile {
    /// Every annotated image id, including images without instances.
    pub image_ids: BTreeSet<String>,
    pub instances: Vec<GroundTruthInstance>,
}

impl GroundTruthFile {
    pub fn parse(bytes: &[u8], source: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let raw: RawFile = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::format(source, format!("{}: {}", e.path(), e.inner())))?;
        if raw.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                source,
                format!("unsupported schema_version {}, expected {SCHEMA_VERSION}", raw.schema_version),
            ));
        }
        let mut image_ids = BTreeSet::new();
        let mut instances = Vec::new();
        for (i, img) in raw.images.into_iter().enumerate() {
            if !image_ids.insert(img.image_id.clone()) {
                return Err(Error::format(source, format!("images[{i}]: duplicate image id {:?}", img.image_id)));
            }
            for (k, a) in img.annotations.into_iter().enumerate() {
                let at = |msg: String| Error::format(source, format!("{}: images[{i}].annotations[{k}]: {msg}", img.image_id));
                let mask: BinaryMask = a.mask_rle.parse().map_err(|e: Error| at(e.to_string()))?;
                if mask.width() != img.width || mask.height() != img.height {
                    return Err(at(format!("mask is {}x{}, image is {}x{}", mask.width(), mask.height(), img.width, img.height)));
                }
                let bbox = match a.bbox {
                    Some([x1, y1, x2, y2]) => {
                        let b = BoundingBox { x1, y1, x2, y2 };
                        b.validate().map_err(|e| at(e.to_string()))?;
                        b
                    }
                    None => mask.bounding_box().ok_or_else(|| at("empty mask and no box".into()))?,
                };
                instances.push(GroundTruthInstance {
                    image_id: img.image_id.clone(),
                    class: a.class,
                    mask,
                    bbox,
                });
            }
        }
        Ok(Self { image_ids, instances })
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&bytes, &path.display().to_string())
    }

    /// Serializes annotations grouped by image; image dimensions come from
    /// the masks, and images without instances are written empty using
    /// `default_dims`.
    pub fn to_json(&self, default_dims: (u32, u32)) -> String {
        let images = self
            .image_ids
            .iter()
            .map(|id| {
                let own: Vec<&GroundTruthInstance> = self.instances.iter().filter(|g| &g.image_id == id).collect();
                let (width, height) = own.first().map_or(default_dims, |g| (g.mask.width(), g.mask.height()));
                RawImage {
                    image_id: id.clone(),
                    width,
                    height,
                    annotations: own
                        .into_iter()
                        .map(|g| RawAnnotation {
                            class: g.class,
                            bbox: Some(g.bbox.as_array()),
                            mask_rle: g.mask.to_rle_string(),
                        })
                        .collect(),
                }
            })
            .collect();
        serde_json::to_string(&RawFile {
            schema_version: SCHEMA_VERSION,
            images,
        })
        .expect("ground-truth serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_round_trip() {
        let text = r#"{"schema_version":1,"images":[
            {"image_id":"b","width":4,"height":2,"annotations":[]},
            {"image_id":"a","width":4,"height":2,"annotations":[{"class":1,"mask_rle":"4,2:1 2 5"}]}]}"#;
        let gt = GroundTruthFile::parse(text.as_bytes(), "gt").unwrap();
        assert_eq!(gt.image_ids.len(), 2);
        assert_eq!(gt.instances[0].bbox, BoundingBox { x1: 1, y1: 0, x2: 2, y2: 0 });
        let back = GroundTruthFile::parse(gt.to_json((4, 2)).as_bytes(), "gt").unwrap();
        assert_eq!(back, gt);
    }

    #[test]
    fn errors_name_the_location() {
        let bad = r#"{"schema_version":1,"images":[{"image_id":"a","width":4,"height":2,"annotations":[{"class":1,"mask_rle":"4,2:9"}]}]}"#;
        let e = GroundTruthFile::parse(bad.as_bytes(), "gt").unwrap_err().to_string();
        assert!(e.contains("images[0].annotations[0]"), "{e}");
        let bad = r#"{"schema_version":1,"images":[{"image_id":"a","width":"4"}]}"#;
        let e = GroundTruthFile::parse(bad.as_bytes(), "gt").unwrap_err().to_string();
        assert!(e.contains("images[0].width"), "{e}");
    }
}
