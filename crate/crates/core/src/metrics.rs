//! Retrieval quality: AP / mAP, CMC top-1, negative flips, and the area
//! under a backfill curve.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::store::LabeledEmbeddings;

/// Backfill fractions evaluated on every curve.
pub const SLICES: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Average precision of one ranking over the full gallery.
///
/// `relevance[k]` flags whether the item at rank `k + 1` shares the query
/// label; `num_relevant` is the total number of such items in the gallery.
pub fn average_precision(relevance: &[bool], num_relevant: usize) -> Result<f64> {
    if num_relevant == 0 {
        return Err(Error::invalid("average precision needs at least one relevant item"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits > num_relevant {
        return Err(Error::invalid(format!(
            "{hits} relevant flags but only {num_relevant} relevant items"
        )));
    }
    Ok(sum / num_relevant as f64)
}

/// Label lookup and per-label counts for one logical gallery.
#[derive(Debug, Clone)]
pub struct GalleryLabels {
    by_id: HashMap<u64, u32>,
    counts: HashMap<u32, usize>,
}

impl GalleryLabels {
    pub fn new(gallery: &LabeledEmbeddings) -> Self {
        Self::from_pairs(gallery.ids().iter().copied().zip(gallery.labels().iter().copied()))
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (u64, u32)>) -> Self {
        let mut by_id = HashMap::new();
        let mut counts = HashMap::new();
        for (id, label) in pairs {
            by_id.insert(id, label);
            *counts.entry(label).or_insert(0) += 1;
        }
        Self { by_id, counts }
    }

    pub fn label(&self, id: u64) -> Result<u32> {
        self.by_id
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("gallery id {id} has no label")))
    }

    pub fn count(&self, label: u32) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map_value: f64,
    pub cmc_top1: f64,
    /// AP of each scored query, in query order.
    pub per_query_ap: Vec<f64>,
    /// Rank-1 correctness for every query (excluded queries count as wrong).
    pub top1_correct: Vec<bool>,
    pub num_queries_scored: usize,
    /// Queries whose label has no gallery instance.
    pub num_queries_excluded: usize,
}

/// Scores full rankings (gallery id sequences) against query labels.
pub fn evaluate<R, I>(rankings: R, query_labels: &[u32], gallery: &GalleryLabels) -> Result<EvalReport>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = u64>,
{
    let mut per_query_ap = Vec::with_capacity(query_labels.len());
    let mut top1_correct = Vec::with_capacity(query_labels.len());
    let mut excluded = 0usize;
    let mut seen = 0usize;
    for (ranking, &label) in rankings.into_iter().zip(query_labels) {
        seen += 1;
        let relevance = ranking
            .into_iter()
            .map(|id| gallery.label(id).map(|l| l == label))
            .collect::<Result<Vec<bool>>>()?;
        let r = gallery.count(label);
        if r == 0 {
            excluded += 1;
            top1_correct.push(false);
            continue;
        }
        per_query_ap.push(average_precision(&relevance, r)?);
        top1_correct.push(relevance.first().copied().unwrap_or(false));
    }
    if seen != query_labels.len() {
        return Err(Error::invalid(format!(
            "{seen} rankings for {} queries",
            query_labels.len()
        )));
    }
    let scored = per_query_ap.len();
    if scored == 0 {
        return Err(Error::invalid("no query could be scored"));
    }
    let map_value = per_query_ap.iter().sum::<f64>() / scored as f64;
    let hits = top1_correct.iter().filter(|&&c| c).count();
    Ok(EvalReport {
        map_value,
        cmc_top1: hits as f64 / scored as f64,
        per_query_ap,
        top1_correct,
        num_queries_scored: scored,
        num_queries_excluded: excluded,
    })
}

/// Fraction of queries whose rank-1 item shares the query label.
pub fn cmc_top1<R, I>(rankings: R, query_labels: &[u32], gallery: &GalleryLabels) -> Result<f64>
where
    R: IntoIterator<Item = I>,
    I: IntoIterator<Item = u64>,
{
    if query_labels.is_empty() {
        return Err(Error::invalid("cmc over an empty query set"));
    }
    let mut hits = 0usize;
    let mut n = 0usize;
    for (ranking, &label) in rankings.into_iter().zip(query_labels) {
        n += 1;
        if let Some(first) = ranking.into_iter().next() {
            if gallery.label(first)? == label {
                hits += 1;
            }
        }
    }
    if n != query_labels.len() {
        return Err(Error::invalid("rankings and labels differ in length"));
    }
    Ok(hits as f64 / n as f64)
}

/// Composite trapezoid over the 11-point grid `t = 0.0, 0.1, ..., 1.0`.
pub fn auc(values: &[f64]) -> Result<f64> {
    if values.len() != SLICES.len() {
        return Err(Error::invalid(format!(
            "auc needs {} values, got {}",
            SLICES.len(),
            values.len()
        )));
    }
    // Endpoints weighted by one half, interior points by one, then a single
    // division by the number of intervals.
    let n = values.len() - 1;
    let interior: f64 = values[1..n].iter().sum();
    Ok(((values[0] + values[n]) / 2.0 + interior) / n as f64)
}

/// Fraction of queries the old system answered correctly at rank 1 that the
/// merged system gets wrong.
pub fn negative_flips(old_top1_correct: &[bool], merged_top1_correct: &[bool]) -> Result<f64> {
    if old_top1_correct.len() != merged_top1_correct.len() {
        return Err(Error::invalid(format!(
            "flip inputs differ in length: {} vs {}",
            old_top1_correct.len(),
            merged_top1_correct.len()
        )));
    }
    if old_top1_correct.is_empty() {
        return Ok(0.0);
    }
    let flips = old_top1_correct
        .iter()
        .zip(merged_top1_correct)
        .filter(|(&old, &merged)| old && !merged)
        .count();
    Ok(flips as f64 / old_top1_correct.len() as f64)
}

/// Merge quality across the backfill grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BackfillCurve {
    pub slices: Vec<f64>,
    pub map_at: Vec<f64>,
    pub cmc_at: Vec<f64>,
    pub neg_flip_at: Vec<f64>,
    /// Fraction of queries whose rank-1 item came from the new system.
    pub source_new_fraction: Vec<f64>,
    pub auc_map: f64,
    pub auc_cmc: f64,
}

impl BackfillCurve {
    pub fn max_neg_flip(&self) -> f64 {
        self.neg_flip_at.iter().copied().fold(0.0, f64::max)
    }
}
