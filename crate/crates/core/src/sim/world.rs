//! Synthetic annotated worlds: small grids with a few non-overlapping
//! ellipses and rectangles per image and a configurable class imbalance.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use crate::active::AnnotatedWorld;
use crate::error::{Error, Result};
use crate::eval::GroundTruthInstance;
use crate::mask::BinaryMask;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
}

/// Continuous object outline; rendered by pixel-centre inclusion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Shape {
    pub fn render(&self, width: u32, height: u32) -> BinaryMask {
        let (rx, ry) = (self.rx.max(0.0), self.ry.max(0.0));
        let y_lo = (self.cy - ry - 0.5).floor().max(0.0) as i64;
        let y_hi = ((self.cy + ry - 0.5).ceil() as i64).min(height as i64 - 1);
        let spans = (y_lo..=y_hi).filter_map(|y| {
            let dy = y as f64 + 0.5 - self.cy;
            if dy.abs() > ry {
                return None;
            }
            let half = match self.kind {
                ShapeKind::Ellipse => rx * (1.0 - (dy / ry).powi(2)).max(0.0).sqrt(),
                ShapeKind::Rectangle => rx,
            };
            let x0 = (self.cx - half - 0.5).ceil() as i64;
            let x1 = (self.cx + half - 0.5).floor() as i64;
            (x0 <= x1).then_some((y, x0, x1))
        });
        BinaryMask::from_row_spans(width, height, spans)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimObject {
    pub class: usize,
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimImage {
    pub id: String,
    pub objects: Vec<SimObject>,
    pub annotations: Vec<GroundTruthInstance>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldParams {
    pub num_images: usize,
    pub num_test_images: usize,
    pub num_classes: usize,
    /// Instances of class 0 per instance of each other class.
    pub imbalance_ratio: f64,
    pub test_imbalance_ratio: f64,
    pub instances_per_image_mean: f64,
    pub width: u32,
    pub height: u32,
    pub min_radius: f64,
    pub max_radius: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            num_images: 2000,
            num_test_images: 300,
            num_classes: 5,
            imbalance_ratio: 27.0,
            test_imbalance_ratio: 5.0,
            instances_per_image_mean: 2.0,
            width: 64,
            height: 64,
            min_radius: 5.0,
            max_radius: 10.0,
            seed: 2022,
        }
    }
}

impl WorldParams {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::active::parse_value as p;
        match key {
            "num_images" => self.num_images = p(key, value)?,
            "num_test_images" => self.num_test_images = p(key, value)?,
            "num_classes" => self.num_classes = p(key, value)?,
            "imbalance_ratio" => self.imbalance_ratio = p(key, value)?,
            "test_imbalance_ratio" => self.test_imbalance_ratio = p(key, value)?,
            "instances_per_image_mean" => self.instances_per_image_mean = p(key, value)?,
            "grid_width" => self.width = p(key, value)?,
            "grid_height" => self.height = p(key, value)?,
            "min_radius" => self.min_radius = p(key, value)?,
            "max_radius" => self.max_radius = p(key, value)?,
            "world_seed" => self.seed = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a world needs at least 2 classes"));
        }
        if self.num_images == 0 {
            return Err(Error::invalid("num_images must be at least 1"));
        }
        if self.imbalance_ratio.is_nan() || self.imbalance_ratio <= 0.0 || self.test_imbalance_ratio.is_nan() || self.test_imbalance_ratio <= 0.0 {
            return Err(Error::invalid("imbalance ratios must be positive"));
        }
        if self.instances_per_image_mean.is_nan() || self.instances_per_image_mean < 1.0 {
            return Err(Error::invalid("instances_per_image_mean must be at least 1"));
        }
        if !(self.min_radius >= 1.0 && self.max_radius >= self.min_radius) {
            return Err(Error::invalid("radii must satisfy 1 <= min_radius <= max_radius"));
        }
        if (self.width as f64) < 2.0 * self.max_radius + 2.0 || (self.height as f64) < 2.0 * self.max_radius + 2.0 {
            return Err(Error::invalid("grid too small for max_radius"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SimWorld {
    pub params: WorldParams,
    pub images: BTreeMap<String, SimImage>,
    pub pool: Vec<String>,
    pub test: Vec<String>,
    /// Instance count per class over the training pool.
    pub class_frequencies: Vec<usize>,
}

impl SimWorld {
    pub fn image(&self, id: &str) -> Option<&SimImage> {
        self.images.get(id)
    }
}

impl AnnotatedWorld for SimWorld {
    fn pool(&self) -> &[String] {
        &self.pool
    }

    fn test_set(&self) -> &[String] {
        &self.test
    }

    fn annotations(&self, image_id: &str) -> &[GroundTruthInstance] {
        self.images.get(image_id).map_or(&[], |i| i.annotations.as_slice())
    }

    fn num_classes(&self) -> usize {
        self.params.num_classes
    }

    fn minority_classes(&self) -> Vec<usize> {
        (1..self.params.num_classes).collect()
    }
}

/// Exact per-class counts for `total` instances: class 0 weighted by
/// `ratio`, every other class by 1, largest-remainder rounding.
fn class_counts(total: usize, classes: usize, ratio: f64) -> Result<Vec<usize>> {
    let denom = ratio + (classes - 1) as f64;
    let minority_mass = total as f64 * (classes - 1) as f64 / denom;
    if minority_mass < 1.0 {
        return Err(Error::invalid(format!(
            "imbalance {ratio}:1 over {total} instances leaves fewer than one minority instance"
        )));
    }
    let exact: Vec<f64> = (0..classes)
        .map(|c| total as f64 * if c == 0 { ratio } else { 1.0 } / denom)
        .collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..classes).collect();
    rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = total - counts.iter().sum::<usize>();
    for &c in rest.iter().take(short) {
        counts[c] += 1;
    }
    Ok(counts)
}

fn place_objects<R: Rng>(rng: &mut R, count: usize, p: &WorldParams) -> Vec<Shape> {
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..200 {
            let r = rng.random_range(p.min_radius..=p.max_radius);
            let aspect = rng.random_range(0.8..=1.2);
            let (rx, ry) = (r * aspect, r / aspect);
            let kind = if rng.random_bool(0.75) { ShapeKind::Ellipse } else { ShapeKind::Rectangle };
            let reach = rx.max(ry);
            let cx = rng.random_range(reach + 1.0..=p.width as f64 - reach - 1.0);
            let cy = rng.random_range(reach + 1.0..=p.height as f64 - reach - 1.0);
            let clear = shapes.iter().all(|s| {
                let gap = s.rx.max(s.ry) + reach + 3.0;
                (s.cx - cx).powi(2) + (s.cy - cy).powi(2) > gap * gap
            });
            if clear {
                shapes.push(Shape { kind, cx, cy, rx, ry });
                break;
            }
        }
    }
    shapes
}

fn generate_split(
    prefix: &str,
    n: usize,
    ratio: f64,
    p: &WorldParams,
    stream: u64,
) -> Result<(Vec<SimImage>, Vec<usize>)> {
    let mut rng = seed::rng(seed::derive(p.seed, &[stream]));
    let trials = (2.0 * (p.instances_per_image_mean - 1.0)).round() as u64;
    let extra = Binomial::new(trials, 0.5).map_err(|e| Error::invalid(e.to_string()))?;

    let layouts: Vec<Vec<Shape>> = (0..n)
        .map(|_| {
            let count = 1 + extra.sample(&mut rng) as usize;
            place_objects(&mut rng, count, p)
        })
        .collect();
    let total: usize = layouts.iter().map(Vec::len).sum();
    let counts = class_counts(total, p.num_classes, ratio)?;
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &k)| std::iter::repeat_n(c, k))
        .collect();
    labels.shuffle(&mut rng);

    let mut labels = labels.into_iter();
    let images = layouts
        .into_iter()
        .enumerate()
        .map(|(i, shapes)| {
            let id = format!("{prefix}_{i:05}");
            let objects: Vec<SimObject> = shapes
                .into_iter()
                .map(|shape| SimObject {
                    class: labels.next().expect("one label per object"),
                    shape,
                })
                .collect();
            let annotations = objects
                .iter()
                .map(|o| {
                    let mask = o.shape.render(p.width, p.height);
                    GroundTruthInstance {
                        image_id: id.clone(),
                        class: o.class,
                        bbox: mask.bounding_box().expect("placed shapes are never empty"),
                        mask,
                    }
                })
                .collect();
            SimImage { id, objects, annotations }
        })
        .collect();
    Ok((images, counts))
}

/// Builds a reproducible world from `params`.
pub fn generate_world(params: &WorldParams) -> Result<SimWorld> {
    params.validate()?;
    let (pool_images, class_frequencies) = generate_split("img", params.num_images, params.imbalance_ratio, params, 1)?;
    let (test_images, _) = if params.num_test_images > 0 {
        generate_split("test", params.num_test_images, params.test_imbalance_ratio, params, 2)?
    } else {
        (Vec::new(), Vec::new())
    };
    let pool = pool_images.iter().map(|i| i.id.clone()).collect();
    let test = test_images.iter().map(|i| i.id.clone()).collect();
    let images = pool_images
        .into_iter()
        .chain(test_images)
        .map(|i| (i.id.clone(), i))
        .collect();
    Ok(SimWorld {
        params: params.clone(),
        images,
        pool,
        test,
        class_frequencies,
    })
}
