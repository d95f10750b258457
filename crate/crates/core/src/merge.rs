//! Distance rank merge over a partially backfilled gallery.
//!
//! A logical gallery is split into items still embedded by the old model and
//! items already re-embedded by the new model. Each query is answered by both
//! retrieval systems over their own part, and the two ranked lists are merged
//! by raw distance.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{self, BackfillCurve, EvalReport, GalleryLabels, SLICES};
use crate::nn::{Matrix, MlpTransform};
use crate::retrieval::{rank_all, DistanceKind, RankedList};
use crate::store::LabeledEmbeddings;

/// A frozen backfill order: a seeded permutation of the gallery ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackfillOrder {
    order: Vec<u64>,
}

impl BackfillOrder {
    pub fn new(gallery_ids: &[u64], seed: u64) -> Self {
        let mut order = gallery_ids.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { order }
    }

    pub fn order(&self) -> &[u64] {
        &self.order
    }

    pub fn at(&self, t: f64) -> Result<GalleryPartition> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("backfill fraction {t} outside [0, 1]")));
        }
        Ok(GalleryPartition {
            boundary: backfilled_count(t, self.order.len()),
            order: self.order.clone(),
            t,
        })
    }
}

/// `round(t·n)`, half away from zero. Products within 1e-9 of a half are
/// treated as exact halves so that grid points like 0.35·10 round up.
pub fn backfilled_count(t: f64, n: usize) -> usize {
    let x = t * n as f64;
    let floor = x.floor();
    if (x - floor - 0.5).abs() <= 1e-9 * (n.max(1) as f64) {
        (floor + 1.0) as usize
    } else {
        x.round() as usize
    }
    .min(n)
}

/// The first `boundary` ids of the order are backfilled, the rest are old.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryPartition {
    order: Vec<u64>,
    t: f64,
    boundary: usize,
}

impl GalleryPartition {
    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn boundary(&self) -> usize {
        self.boundary
    }

    pub fn order(&self) -> &[u64] {
        &self.order
    }

    pub fn new_ids(&self) -> &[u64] {
        &self.order[..self.boundary]
    }

    pub fn old_ids(&self) -> &[u64] {
        &self.order[self.boundary..]
    }
}

pub fn make_partition(gallery_ids: &[u64], t: f64, seed: u64) -> Result<GalleryPartition> {
    BackfillOrder::new(gallery_ids, seed).at(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    OldSystem,
    NewSystem,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergedEntry {
    pub gallery_id: u64,
    pub distance: f32,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MergedRanking {
    entries: Vec<MergedEntry>,
}

impl MergedRanking {
    pub fn entries(&self) -> &[MergedEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.gallery_id)
    }

    pub fn top(&self) -> Option<&MergedEntry> {
        self.entries.first()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Sorted union of two disjoint ranked lists. On equal distance the
/// new-system entry goes first.
pub fn merge(old_list: &RankedList, new_list: &RankedList) -> Result<MergedRanking> {
    let new_ids: HashSet<u64> = new_list.ids().collect();
    if let Some(id) = old_list.ids().find(|id| new_ids.contains(id)) {
        return Err(Error::OverlappingIds(id));
    }
    let (old, new) = (old_list.entries(), new_list.entries());
    let mut entries = Vec::with_capacity(old.len() + new.len());
    let (mut i, mut j) = (0, 0);
    while i < old.len() || j < new.len() {
        let take_new = match (old.get(i), new.get(j)) {
            (Some(o), Some(n)) => n.distance <= o.distance,
            (None, Some(_)) => true,
            _ => false,
        };
        let (e, source) = if take_new {
            j += 1;
            (new[j - 1], Source::NewSystem)
        } else {
            i += 1;
            (old[i - 1], Source::OldSystem)
        };
        entries.push(MergedEntry {
            gallery_id: e.gallery_id,
            distance: e.distance,
            source,
        });
    }
    Ok(MergedRanking { entries })
}

/// Both gallery halves materialized for one partition.
#[derive(Debug, Clone)]
pub struct MergeEngine {
    old_part: LabeledEmbeddings,
    new_part: LabeledEmbeddings,
    kind: DistanceKind,
}

impl MergeEngine {
    /// `old_gallery` and `new_gallery` hold the same ids embedded by the two
    /// gallery-side models.
    pub fn new(
        partition: &GalleryPartition,
        old_gallery: &LabeledEmbeddings,
        new_gallery: &LabeledEmbeddings,
        kind: DistanceKind,
    ) -> Result<Self> {
        Ok(Self {
            old_part: subset(old_gallery, partition.old_ids())?,
            new_part: subset(new_gallery, partition.new_ids())?,
            kind,
        })
    }

    pub fn query(&self, query_old: &[f32], query_new: &[f32]) -> Result<MergedRanking> {
        let old_list = rank_all(query_old, &self.old_part, self.kind)?;
        let new_list = rank_all(query_new, &self.new_part, self.kind)?;
        merge(&old_list, &new_list)
    }
}

fn subset(gallery: &LabeledEmbeddings, ids: &[u64]) -> Result<LabeledEmbeddings> {
    let pos: std::collections::HashMap<u64, usize> =
        gallery.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let rows = ids
        .iter()
        .map(|id| {
            pos.get(id)
                .copied()
                .ok_or_else(|| Error::invalid(format!("partition id {id} missing from gallery")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gallery.select(&rows))
}

/// Two-extraction merge: the old model embeds the query for the old part,
/// the new model embeds it for the backfilled part.
pub fn query_merged(
    query_old_emb: &[f32],
    query_new_emb: &[f32],
    partition: &GalleryPartition,
    old_gallery: &LabeledEmbeddings,
    new_gallery: &LabeledEmbeddings,
    kind: DistanceKind,
) -> Result<MergedRanking> {
    MergeEngine::new(partition, old_gallery, new_gallery, kind)?.query(query_old_emb, query_new_emb)
}

/// Query-side features for the single-extraction merge: `(backward, new)`.
///
/// The new-side query is `ρ(q)` when ρ is present, else `q`; the backward
/// query is ψ applied to the new-side query.
pub fn transform_query(
    query_new_emb: &[f32],
    psi: &MlpTransform,
    rho: Option<&MlpTransform>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let input = Matrix::from_f32_rows(query_new_emb.len(), query_new_emb)?;
    let new_side = match rho {
        Some(rho) => rho.infer(&input)?,
        None => input,
    };
    let backward = psi.infer(&new_side)?;
    Ok((backward.to_f32(), new_side.to_f32()))
}

/// Single-extraction merge through the reverse query transform.
///
/// With ρ present, `new_gallery` must already hold ρ-transformed embeddings.
pub fn query_merged_rqt(
    query_new_emb: &[f32],
    psi: &MlpTransform,
    rho: Option<&MlpTransform>,
    partition: &GalleryPartition,
    old_gallery: &LabeledEmbeddings,
    new_gallery: &LabeledEmbeddings,
    kind: DistanceKind,
) -> Result<MergedRanking> {
    let (backward, new_side) = transform_query(query_new_emb, psi, rho)?;
    query_merged(&backward, &new_side, partition, old_gallery, new_gallery, kind)
}

/// Everything a backfill curve needs, already embedded.
///
/// The two query sets share ids and order; so do the two galleries.
#[derive(Debug, Clone, Copy)]
pub struct MergeInputs<'a> {
    /// Queries of the backward system: φ^old(Q), or ψ(·) of the new-side query.
    pub backward_queries: &'a LabeledEmbeddings,
    /// Queries of the new system: φ^new(Q) or ρ(φ^new(Q)).
    pub new_queries: &'a LabeledEmbeddings,
    pub old_gallery: &'a LabeledEmbeddings,
    /// φ^new(G) or ρ(φ^new(G)).
    pub new_gallery: &'a LabeledEmbeddings,
}

impl MergeInputs<'_> {
    fn check(&self) -> Result<()> {
        if self.backward_queries.ids() != self.new_queries.ids() {
            return Err(Error::invalid("backward and new query sets are not paired"));
        }
        if self.old_gallery.ids() != self.new_gallery.ids() {
            return Err(Error::invalid("old and new gallery sets are not paired"));
        }
        Ok(())
    }
}

/// Merged rankings of every query at one partition, in query order.
pub fn merged_rankings(
    inputs: &MergeInputs<'_>,
    partition: &GalleryPartition,
    kind: DistanceKind,
) -> Result<Vec<MergedRanking>> {
    inputs.check()?;
    let engine = MergeEngine::new(partition, inputs.old_gallery, inputs.new_gallery, kind)?;
    (0..inputs.new_queries.len())
        .into_par_iter()
        .map(|i| engine.query(inputs.backward_queries.row(i), inputs.new_queries.row(i)))
        .collect()
}

/// One evaluated slice of a backfill curve.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceEval {
    pub t: f64,
    pub report: EvalReport,
    pub neg_flip_rate: f64,
    pub source_new_fraction: f64,
}

pub fn evaluate_slice(
    inputs: &MergeInputs<'_>,
    partition: &GalleryPartition,
    kind: DistanceKind,
    old_reference_top1: &[bool],
) -> Result<SliceEval> {
    let rankings = merged_rankings(inputs, partition, kind)?;
    let labels = GalleryLabels::new(inputs.old_gallery);
    let report = metrics::evaluate(
        rankings.iter().map(|r| r.ids()),
        inputs.new_queries.labels(),
        &labels,
    )?;
    let neg_flip_rate = metrics::negative_flips(old_reference_top1, &report.top1_correct)?;
    let from_new = rankings
        .iter()
        .filter(|r| matches!(r.top(), Some(e) if e.source == Source::NewSystem))
        .count();
    Ok(SliceEval {
        t: partition.t(),
        report,
        neg_flip_rate,
        source_new_fraction: from_new as f64 / rankings.len().max(1) as f64,
    })
}

/// Evaluates the merge at every slice of the standard grid under one frozen
/// backfill order, so partitions are nested across slices.
///
/// `old_reference_top1` holds the old model's own rank-1 correctness per
/// query; negative flips are counted against it.
pub fn backfill_curve(
    inputs: &MergeInputs<'_>,
    kind: DistanceKind,
    order_seed: u64,
    old_reference_top1: &[bool],
) -> Result<(BackfillCurve, Vec<SliceEval>)> {
    let order = BackfillOrder::new(inputs.old_gallery.ids(), order_seed);
    let slices = SLICES
        .iter()
        .map(|&t| evaluate_slice(inputs, &order.at(t)?, kind, old_reference_top1))
        .collect::<Result<Vec<_>>>()?;
    let map_at: Vec<f64> = slices.iter().map(|s| s.report.map_value).collect();
    let cmc_at: Vec<f64> = slices.iter().map(|s| s.report.cmc_top1).collect();
    let curve = BackfillCurve {
        slices: SLICES.to_vec(),
        auc_map: metrics::auc(&map_at)?,
        auc_cmc: metrics::auc(&cmc_at)?,
        map_at,
        cmc_at,
        neg_flip_at: slices.iter().map(|s| s.neg_flip_rate).collect(),
        source_new_fraction: slices.iter().map(|s| s.source_new_fraction).collect(),
    };
    Ok((curve, slices))
}
