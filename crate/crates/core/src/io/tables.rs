//! CSV outputs. Floats are written with six decimals; rows are ordered by
//! image id, iteration or class so output is a pure function of the input.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::active::{ClassTally, CurvePoint};
use crate::certainty::{CertaintyMethod, ConsistencyRecord, ImageCertainty};
use crate::error::{Error, Result};
use crate::eval::EvaluationReport;

fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

fn render<I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for row in rows {
        w.write_record(&row).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv output is utf-8")
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// `image_id,t,c_avg,c_min`; `t` is the certainty under `mode`.
pub fn certainty_report_csv(images: &[ImageCertainty], mode: CertaintyMethod) -> String {
    let mut sorted: Vec<&ImageCertainty> = images.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    render(
        &["image_id", "t", "c_avg", "c_min"],
        sorted.into_iter().map(|i| {
            vec![
                i.image_id.clone(),
                fmt6(i.value(mode)),
                fmt6(i.value_avg),
                fmt6(i.value_min),
            ]
        }),
    )
}

/// `image_id,set_index,c_sem,c_box,c_mask,c_spl,c_occ,c_h`.
pub fn certainty_sets_csv(images: &[ImageCertainty]) -> String {
    let mut sorted: Vec<&ImageCertainty> = images.iter().collect();
    sorted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    render(
        &["image_id", "set_index", "c_sem", "c_box", "c_mask", "c_spl", "c_occ", "c_h"],
        sorted.into_iter().flat_map(|i| {
            i.sets.iter().enumerate().map(move |(k, (_, b))| {
                vec![
                    i.image_id.clone(),
                    k.to_string(),
                    fmt6(b.c_sem),
                    fmt6(b.c_box),
                    fmt6(b.c_mask),
                    fmt6(b.c_spl),
                    fmt6(b.c_occ),
                    fmt6(b.c_h),
                ]
            })
        }),
    )
}

/// Reads the `image_id` and `t` columns of a certainty report.
pub fn read_certainty_report(text: &str, source: &str) -> Result<BTreeMap<String, f64>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::format(source, e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::format(source, format!("missing column {name:?}")))
    };
    let (id_col, t_col) = (col("image_id")?, col("t")?);
    let mut out = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::format(source, format!("line {line}: {e}")))?;
        let id = rec.get(id_col).unwrap_or_default().to_string();
        let raw = rec.get(t_col).unwrap_or_default();
        let t: f64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::format(source, format!("line {line}: bad certainty {raw:?}")))?;
        if !t.is_finite() {
            return Err(Error::format(source, format!("line {line}: certainty must be finite")));
        }
        if out.insert(id.clone(), t).is_some() {
            return Err(Error::format(source, format!("line {line}: duplicate image id {id:?}")));
        }
    }
    Ok(out)
}

/// `class,ap` rows followed by `ALL,map`.
pub fn evaluation_csv(report: &EvaluationReport) -> String {
    render(
        &["class", "ap"],
        report
            .ap_per_class
            .iter()
            .map(|(c, ap)| vec![c.to_string(), fmt6(*ap)])
            .chain([vec!["ALL".to_string(), fmt6(report.map_overall)]]),
    )
}

/// `iteration,num_train_images,map,sampled_ids_digest`.
pub fn learning_curve_csv(curve: &[CurvePoint]) -> String {
    render(
        &["iteration", "num_train_images", "map", "sampled_ids_digest"],
        curve.iter().map(|p| {
            vec![
                p.iteration.to_string(),
                p.num_train_images.to_string(),
                fmt6(p.map),
                p.sampled_digest(),
            ]
        }),
    )
}

/// `iteration,class,cumulative_fraction`.
pub fn class_tally_csv(tallies: &[ClassTally]) -> String {
    render(
        &["iteration", "class", "cumulative_fraction"],
        tallies.iter().flat_map(|t| {
            (0..t.counts.len()).map(move |c| vec![t.iteration.to_string(), c.to_string(), fmt6(t.fraction(c))])
        }),
    )
}

/// `fp,delta,matched,unmatched`.
pub fn consistency_csv(records: &[ConsistencyRecord]) -> String {
    render(
        &["fp", "delta", "matched", "unmatched"],
        records
            .iter()
            .map(|r| vec![r.fp.to_string(), fmt6(r.delta), r.matched.to_string(), r.unmatched.to_string()]),
    )
}
