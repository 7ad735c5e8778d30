//! Image selection: random subsets, lowest-certainty selection and
//! minority-class repeat factors.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;

use crate::error::{Error, Result};
use crate::seed;

/// Uniform random subset of `pool` without replacement.
pub fn initial_dataset(pool: &[String], size: usize, seed: u64) -> Result<BTreeSet<String>> {
    if size == 0 {
        return Err(Error::invalid("initial dataset size must be at least 1"));
    }
    if size > pool.len() {
        return Err(Error::invalid(format!(
            "initial dataset size {size} exceeds pool of {} images",
            pool.len()
        )));
    }
    let mut sorted: Vec<&String> = pool.iter().collect();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != pool.len() {
        return Err(Error::invalid("pool contains duplicate image ids"));
    }
    Ok(draw(&sorted, size, seed))
}

fn draw(sorted: &[&String], n: usize, seed: u64) -> BTreeSet<String> {
    let mut rng = seed::rng(seed);
    index::sample(&mut rng, sorted.len(), n)
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect()
}

/// Uniform random selection of up to `n` ids. When fewer than `n` remain,
/// all of them are returned and the second value is `true`.
pub fn random_sample(available: &BTreeSet<String>, n: usize, seed: u64) -> Result<(BTreeSet<String>, bool)> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    if n > available.len() {
        log::warn!(
            "requested {n} images but only {} remain; taking all of them",
            available.len()
        );
        return Ok((available.clone(), true));
    }
    let sorted: Vec<&String> = available.iter().collect();
    Ok((draw(&sorted, n, seed), false))
}

/// The `n` least certain images; equal certainties fall back to id order.
pub fn uncertainty_sample(certainties: &BTreeMap<String, f64>, n: usize) -> Result<BTreeSet<String>> {
    if n == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    if certainties.is_empty() {
        return Err(Error::invalid("no certainty values to sample from"));
    }
    let mut ranked: Vec<(&String, f64)> = certainties.iter().map(|(k, &v)| (k, v)).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    Ok(ranked.into_iter().take(n).map(|(k, _)| k.clone()).collect())
}

/// Repeat factor per labelled image.
///
/// With `maj` the instance count of the most frequent non-minority class and
/// `min` the count of the rarest minority class present in an image, the
/// factor is `ceil(sqrt(maj / min))`, at least 1. Images without minority
/// instances get 1.
pub fn oversampling_weights(
    labelled_annotations: &BTreeMap<String, Vec<usize>>,
    minority_classes: &[usize],
) -> BTreeMap<String, u32> {
    let minority: BTreeSet<usize> = minority_classes.iter().copied().collect();
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for classes in labelled_annotations.values() {
        for &c in classes {
            *counts.entry(c).or_default() += 1;
        }
    }
    let majority = counts
        .iter()
        .filter(|(c, _)| !minority.contains(c))
        .map(|(_, &n)| n)
        .max()
        .or_else(|| counts.values().copied().max())
        .unwrap_or(0);

    labelled_annotations
        .iter()
        .map(|(id, classes)| {
            let rarest = classes
                .iter()
                .filter(|c| minority.contains(c))
                .map(|c| counts[c])
                .min();
            let factor = rarest.map_or(1, |m| ceil_sqrt_ratio(majority, m));
            (id.clone(), factor)
        })
        .collect()
}

/// Smallest `f >= 1` with `f^2 * den >= num`, i.e. `ceil(sqrt(num / den))`.
fn ceil_sqrt_ratio(num: u64, den: u64) -> u32 {
    let mut f = ((num as f64 / den as f64).sqrt().floor() as u64).max(1);
    while f * f * den < num {
        f += 1;
    }
    while f > 1 && (f - 1) * (f - 1) * den >= num {
        f -= 1;
    }
    f as u32
}
