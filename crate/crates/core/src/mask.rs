//! Run-length encoded binary masks and axis-aligned boxes.
//!
//! Masks are stored row-major: pixel `(x, y)` has flat index `y * width + x`.
//! The run list alternates background and foreground lengths and always
//! starts with a (possibly empty) background run, the same layout as the
//! COCO encoder except for the scan order.
//!
//! Text form used by the dump files: `"w,h:r0 r1 r2 ..."`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel set of one instance on a fixed `width x height` grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl BinaryMask {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as u64 * height as u64;
        Self {
            width,
            height,
            runs: vec![u32::try_from(n).expect("grid too large for u32 runs")],
        }
    }

    /// Builds a mask from raw alternating run lengths.
    ///
    /// Zero-length interior runs are merged away so equal pixel sets always
    /// compare equal.
    pub fn from_runs(width: u32, height: u32, runs: &[u32]) -> Result<Self> {
        let total: u64 = runs.iter().map(|&r| r as u64).sum();
        let expected = width as u64 * height as u64;
        if total != expected {
            return Err(Error::invalid(format!(
                "run lengths sum to {total}, expected {expected} for a {width}x{height} mask"
            )));
        }
        let mut intervals = Vec::new();
        let mut pos = 0u64;
        for (i, &r) in runs.iter().enumerate() {
            if i % 2 == 1 && r > 0 {
                intervals.push((pos, pos + r as u64));
            }
            pos += r as u64;
        }
        Ok(Self::from_sorted_intervals(width, height, intervals))
    }

    /// Builds a mask from a dense row-major pixel buffer.
    pub fn from_dense(width: u32, height: u32, pixels: &[bool]) -> Result<Self> {
        let n = width as usize * height as usize;
        if pixels.len() != n {
            return Err(Error::invalid(format!(
                "dense buffer has {} pixels, expected {n}",
                pixels.len()
            )));
        }
        let mut intervals = Vec::new();
        let mut start = None;
        for (i, &p) in pixels.iter().enumerate() {
            match (p, start) {
                (true, None) => start = Some(i as u64),
                (false, Some(s)) => {
                    intervals.push((s, i as u64));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            intervals.push((s, n as u64));
        }
        Ok(Self::from_sorted_intervals(width, height, intervals))
    }

    /// Builds a mask from per-row inclusive spans `(row, x_start, x_end)`.
    ///
    /// Spans must be sorted by row and non-overlapping; out-of-grid parts
    /// are clipped.
    pub fn from_row_spans<I>(width: u32, height: u32, spans: I) -> Self
    where
        I: IntoIterator<Item = (i64, i64, i64)>,
    {
        let w = width as i64;
        let h = height as i64;
        let mut intervals = Vec::new();
        for (row, x0, x1) in spans {
            if row < 0 || row >= h {
                continue;
            }
            let x0 = x0.max(0);
            let x1 = x1.min(w - 1);
            if x0 > x1 {
                continue;
            }
            let base = (row * w) as u64;
            intervals.push((base + x0 as u64, base + x1 as u64 + 1));
        }
        intervals.sort_unstable();
        Self::from_sorted_intervals(width, height, intervals)
    }

    /// `intervals` are half-open flat-index ranges in ascending order.
    /// Touching or overlapping ranges are merged.
    fn from_sorted_intervals(width: u32, height: u32, intervals: Vec<(u64, u64)>) -> Self {
        let n = width as u64 * height as u64;
        let mut runs = Vec::with_capacity(intervals.len() * 2 + 1);
        let mut cursor = 0u64;
        let mut open: Option<(u64, u64)> = None;
        let flush = |(s, e): (u64, u64), cursor: &mut u64, runs: &mut Vec<u32>| {
            runs.push((s - *cursor) as u32);
            runs.push((e - s) as u32);
            *cursor = e;
        };
        for (s, e) in intervals {
            if s >= e {
                continue;
            }
            match open {
                Some((os, oe)) if s <= oe => open = Some((os, oe.max(e))),
                Some(iv) => {
                    flush(iv, &mut cursor, &mut runs);
                    open = Some((s, e));
                }
                None => open = Some((s, e)),
            }
        }
        if let Some(iv) = open {
            flush(iv, &mut cursor, &mut runs);
        }
        if cursor < n || runs.is_empty() {
            runs.push((n - cursor) as u32);
        }
        Self {
            width,
            height,
            runs,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn runs(&self) -> &[u32] {
        &self.runs
    }

    pub fn same_grid(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_grid(&self, other: &BinaryMask) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: other.width,
                right_h: other.height,
            })
        }
    }

    /// Foreground pixel count.
    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Half-open flat-index ranges of foreground pixels, ascending.
    pub fn intervals(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.runs.iter().enumerate().filter_map(move |(i, &r)| {
            let start = pos;
            pos += r as u64;
            (i % 2 == 1).then_some((start, pos))
        })
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let idx = y as u64 * self.width as u64 + x as u64;
        self.intervals().any(|(s, e)| s <= idx && idx < e)
    }

    pub fn to_dense(&self) -> Vec<bool> {
        let n = self.width as usize * self.height as usize;
        let mut out = vec![false; n];
        for (s, e) in self.intervals() {
            out[s as usize..e as usize].fill(true);
        }
        out
    }

    /// Tight inclusive bounding box of the foreground, `None` when empty.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        let w = self.width as u64;
        let mut bounds: Option<(u64, u64, u64, u64)> = None;
        for (s, e) in self.intervals() {
            let last = e - 1;
            let (y0, y1) = (s / w, last / w);
            let (x0, x1) = if y0 == y1 { (s % w, last % w) } else { (0, w - 1) };
            bounds = Some(match bounds {
                None => (x0, y0, x1, y1),
                Some((a, b, c, d)) => (a.min(x0), b.min(y0), c.max(x1), d.max(y1)),
            });
        }
        bounds.map(|(x1, y1, x2, y2)| BoundingBox::new(x1 as u32, y1 as u32, x2 as u32, y2 as u32))
    }

    /// Number of pixels set in both masks.
    pub fn intersection_area(&self, other: &BinaryMask) -> Result<u64> {
        self.check_grid(other)?;
        let a: Vec<_> = self.intervals().collect();
        let b: Vec<_> = other.intervals().collect();
        let (mut i, mut j, mut acc) = (0, 0, 0u64);
        while i < a.len() && j < b.len() {
            let lo = a[i].0.max(b[j].0);
            let hi = a[i].1.min(b[j].1);
            if lo < hi {
                acc += hi - lo;
            }
            if a[i].1 < b[j].1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        Ok(acc)
    }

    pub fn to_rle_string(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BinaryMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}:", self.width, self.height)?;
        for (i, r) in self.runs.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

impl FromStr for BinaryMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dims, body) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("mask RLE missing ':' in {s:?}")))?;
        let (w, h) = dims
            .split_once(',')
            .ok_or_else(|| Error::invalid(format!("mask RLE header must be 'w,h', got {dims:?}")))?;
        let parse_dim = |v: &str| {
            v.trim()
                .parse::<u32>()
                .map_err(|e| Error::invalid(format!("bad mask dimension {v:?}: {e}")))
        };
        let (width, height) = (parse_dim(w)?, parse_dim(h)?);
        let runs = body
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| Error::invalid(format!("bad run length {t:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        BinaryMask::from_runs(width, height, &runs)
    }
}

/// Axis-aligned box with inclusive pixel corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BoundingBox {
    pub const fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::invalid(format!("invalid box {self:?}: corners out of order")));
        }
        Ok(())
    }

    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.x2 < width && self.y2 < height
    }

    /// Inclusive pixel area, so a single-pixel box has area 1.
    pub fn area(&self) -> u64 {
        (self.x2 - self.x1 + 1) as u64 * (self.y2 - self.y1 + 1) as u64
    }

    pub fn as_array(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    fn overlap_area(&self, other: &BoundingBox) -> u64 {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        if x1 > x2 || y1 > y2 {
            0
        } else {
            BoundingBox::new(x1, y1, x2, y2).area()
        }
    }
}

/// Mask IoU, `|a ∩ b| / |a ∪ b|`. Two empty masks give 0.
pub fn iou_masks(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_area(b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Box IoU over inclusive pixel areas.
pub fn iou_boxes(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let inter = a.overlap_area(b);
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

/// Corner-wise arithmetic mean, rounded to the nearest pixel with ties away
/// from zero.
pub fn mean_box(boxes: &[BoundingBox]) -> Result<BoundingBox> {
    if boxes.is_empty() {
        return Err(Error::invalid("mean_box of an empty box list"));
    }
    let r = boxes.len() as u64;
    let mut sums = [0u64; 4];
    for b in boxes {
        b.validate()?;
        for (acc, v) in sums.iter_mut().zip(b.as_array()) {
            *acc += v as u64;
        }
    }
    // Coordinates are non-negative, so floor((2s + r) / 2r) is round-half-up.
    let round = |s: u64| ((2 * s + r) / (2 * r)) as u32;
    Ok(BoundingBox::new(round(sums[0]), round(sums[1]), round(sums[2]), round(sums[3])))
}

/// How a pixel's vote count is compared against `vote_fraction * r`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteRule {
    /// count >= fraction * r
    #[default]
    AtLeast,
    /// count > fraction * r
    MoreThan,
}

impl VoteRule {
    /// Minimum number of votes a pixel needs out of `r` masks.
    pub fn min_votes(self, vote_fraction: f64, r: usize) -> usize {
        // The epsilon absorbs representation error such as 0.3 * 10 = 3.0000000000000004.
        let target = vote_fraction * r as f64;
        let k = match self {
            VoteRule::AtLeast => (target - 1e-9).ceil(),
            VoteRule::MoreThan => (target + 1e-9).floor() + 1.0,
        };
        k.max(1.0) as usize
    }
}

/// Pixels present in at least `vote_fraction` of the input masks.
pub fn consensus_mask(masks: &[BinaryMask], vote_fraction: f64) -> Result<BinaryMask> {
    consensus_mask_with(masks, vote_fraction, VoteRule::AtLeast)
}

pub fn consensus_mask_with(masks: &[BinaryMask], vote_fraction: f64, rule: VoteRule) -> Result<BinaryMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::invalid("consensus_mask of an empty mask list"))?;
    if !(vote_fraction > 0.0 && vote_fraction <= 1.0) {
        return Err(Error::invalid(format!("vote_fraction must be in (0,1], got {vote_fraction}")));
    }
    for m in &masks[1..] {
        first.check_grid(m)?;
    }
    let need = rule.min_votes(vote_fraction, masks.len()) as i64;

    let mut events: Vec<(u64, i64)> = Vec::new();
    for m in masks {
        for (s, e) in m.intervals() {
            events.push((s, 1));
            events.push((e, -1));
        }
    }
    events.sort_unstable();

    let mut intervals = Vec::new();
    let mut count = 0i64;
    let mut i = 0;
    while i < events.len() {
        let pos = events[i].0;
        while i < events.len() && events[i].0 == pos {
            count += events[i].1;
            i += 1;
        }
        if count >= need {
            if let Some(&(next, _)) = events.get(i) {
                intervals.push((pos, next));
            }
        }
    }
    Ok(BinaryMask::from_sorted_intervals(first.width, first.height, intervals))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(w: u32, h: u32, x0: u32, y0: u32, bw: u32, bh: u32) -> BinaryMask {
        let spans = (y0..y0 + bh).map(|y| (y as i64, x0 as i64, (x0 + bw - 1) as i64));
        BinaryMask::from_row_spans(w, h, spans)
    }

    #[test]
    fn identical_masks_have_unit_iou() {
        let m = block(8, 8, 1, 1, 3, 3);
        assert_eq!(iou_masks(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_masks_have_zero_iou() {
        let a = block(8, 8, 0, 0, 2, 2);
        let b = block(8, 8, 5, 5, 2, 2);
        assert_eq!(iou_masks(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn offset_blocks_share_one_pixel() {
        let a = block(4, 4, 0, 0, 2, 2);
        let b = block(4, 4, 1, 1, 2, 2);
        assert_eq!(iou_masks(&a, &b).unwrap(), 1.0 / 7.0);
    }

    #[test]
    fn empty_masks_have_zero_iou() {
        let e = BinaryMask::empty(4, 4);
        assert_eq!(iou_masks(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = BinaryMask::empty(4, 4);
        let b = BinaryMask::empty(4, 5);
        assert!(matches!(iou_masks(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn box_iou_examples() {
        let a = BoundingBox::new(0, 0, 9, 9);
        assert_eq!(iou_boxes(&a, &a).unwrap(), 1.0);
        assert_eq!(iou_boxes(&a, &BoundingBox::new(20, 20, 29, 29)).unwrap(), 0.0);
        assert_eq!(iou_boxes(&a, &BoundingBox::new(5, 0, 14, 9)).unwrap(), 50.0 / 150.0);
        assert!(iou_boxes(&a, &BoundingBox::new(5, 0, 4, 9)).is_err());
    }

    #[test]
    fn mean_box_examples() {
        let b = |a, c| BoundingBox::new(0, 0, a, c);
        assert_eq!(mean_box(&[b(10, 10)]).unwrap(), b(10, 10));
        assert_eq!(
            mean_box(&[b(10, 10), BoundingBox::new(2, 2, 12, 12)]).unwrap(),
            BoundingBox::new(1, 1, 11, 11)
        );
        assert_eq!(mean_box(&[b(10, 10), b(11, 10), b(13, 10)]).unwrap(), b(11, 10));
        // 0.5 rounds away from zero
        assert_eq!(mean_box(&[b(10, 10), b(11, 10)]).unwrap(), b(11, 10));
        assert!(mean_box(&[]).is_err());
    }

    #[test]
    fn consensus_quarter_vote_is_inclusive() {
        let a = block(4, 4, 0, 0, 1, 1);
        let e = BinaryMask::empty(4, 4);
        let masks = [a.clone(), e.clone(), e.clone(), e];
        assert_eq!(consensus_mask(&masks, 0.25).unwrap(), a);
        let strict = consensus_mask_with(&masks, 0.25, VoteRule::MoreThan).unwrap();
        assert!(strict.is_empty());
    }

    #[test]
    fn consensus_of_one_mask_is_itself() {
        let a = block(6, 5, 1, 2, 3, 2);
        assert_eq!(consensus_mask(std::slice::from_ref(&a), 0.25).unwrap(), a);
        assert!(consensus_mask(&[], 0.25).is_err());
        assert!(consensus_mask(std::slice::from_ref(&a), 0.0).is_err());
        assert!(consensus_mask(&[a, BinaryMask::empty(5, 5)], 0.5).is_err());
    }

    #[test]
    fn min_votes_handles_float_products() {
        assert_eq!(VoteRule::AtLeast.min_votes(0.3, 10), 3);
        assert_eq!(VoteRule::AtLeast.min_votes(0.25, 4), 1);
        assert_eq!(VoteRule::AtLeast.min_votes(0.25, 5), 2);
        assert_eq!(VoteRule::AtLeast.min_votes(1e-6, 5), 1);
        assert_eq!(VoteRule::MoreThan.min_votes(0.25, 4), 2);
    }

    #[test]
    fn rle_text_round_trip_and_validation() {
        let m = block(5, 3, 1, 1, 2, 2);
        let text = m.to_rle_string();
        assert_eq!(text, "5,3:6 2 3 2 2");
        assert_eq!(text.parse::<BinaryMask>().unwrap(), m);
        assert!("5,3:6 2 3 2 3".parse::<BinaryMask>().is_err());
        assert!("5x3:15".parse::<BinaryMask>().is_err());
        // leading foreground and interior zero runs are canonicalized
        let lead = "2,2:0 1 0 2 1".parse::<BinaryMask>().unwrap();
        assert_eq!(lead.runs(), &[0, 3, 1]);
    }

    #[test]
    fn bounding_box_of_multi_row_runs() {
        let m = BinaryMask::from_row_spans(10, 10, [(2, 3, 9), (3, 0, 4)]);
        assert_eq!(m.bounding_box(), Some(BoundingBox::new(0, 2, 9, 3)));
        assert_eq!(BinaryMask::empty(3, 3).bounding_box(), None);
    }
}
