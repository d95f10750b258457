//! Exact brute-force ranking for one retrieval system.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::LabeledEmbeddings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    #[default]
    Cosine,
    L2,
}

impl fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceKind::Cosine => "cosine",
            DistanceKind::L2 => "l2",
        })
    }
}

impl FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(DistanceKind::Cosine),
            "l2" => Ok(DistanceKind::L2),
            other => Err(Error::Config(format!("unknown distance kind `{other}`"))),
        }
    }
}

/// Distance between two vectors, accumulated in f64.
///
/// Cosine distance is `1 - <a,b>/(|a||b|)` clamped to `[0, 2]`.
pub fn distance(a: &[f32], b: &[f32], kind: DistanceKind) -> Result<f64> {
    Error::check_dim(a.len(), b.len())?;
    match kind {
        DistanceKind::L2 => {
            let sq: f64 = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum();
            Ok(sq.sqrt())
        }
        DistanceKind::Cosine => {
            let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
            for (&x, &y) in a.iter().zip(b) {
                let (x, y) = (x as f64, y as f64);
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok((1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedEntry {
    pub gallery_id: u64,
    pub distance: f32,
}

/// Gallery items sorted by ascending distance, ties broken by smaller id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankedList {
    entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Sorts arbitrary entries into ranking order.
    pub fn from_unsorted(mut entries: Vec<RankedEntry>) -> Self {
        entries.sort_by(|a, b| {
            a.distance
                .total_cmp(&b.distance)
                .then(a.gallery_id.cmp(&b.gallery_id))
        });
        Self { entries }
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.gallery_id)
    }
}

pub fn rank_all(query: &[f32], gallery: &LabeledEmbeddings, kind: DistanceKind) -> Result<RankedList> {
    if gallery.is_empty() {
        return Ok(RankedList::default());
    }
    Error::check_dim(gallery.dim(), query.len())?;
    let entries = gallery
        .rows()
        .zip(gallery.ids())
        .map(|(row, &id)| {
            Ok(RankedEntry {
                gallery_id: id,
                distance: distance(query, row, kind)? as f32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedList::from_unsorted(entries))
}

/// Ranks every query row against the gallery. Parallel over queries; the
/// output order follows the query order.
pub fn rank_queries(
    queries: &LabeledEmbeddings,
    gallery: &LabeledEmbeddings,
    kind: DistanceKind,
) -> Result<Vec<RankedList>> {
    (0..queries.len())
        .into_par_iter()
        .map(|i| rank_all(queries.row(i), gallery, kind))
        .collect()
}
