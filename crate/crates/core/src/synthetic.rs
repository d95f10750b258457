//! Seeded old/new embedding pairs that emulate a model upgrade.
//!
//! Class prototypes live on the unit sphere of the new space. A new-side
//! sample is `normalize(prototype + noise_new)`; an old-side sample is
//! `normalize(P · prototype + noise_old)` with a fixed map `P` from the new
//! space to the old one. `sigma_*` is the expected norm of the noise vector,
//! so each coordinate has standard deviation `sigma / sqrt(dim)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, GalleryLabels};
use crate::retrieval::{rank_queries, DistanceKind};
use crate::store::{EmbeddingPairSet, LabeledEmbeddings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CrossSpaceMap {
    /// Rows of a random orthogonal matrix; needs `d_old <= d_new`.
    Rotation,
    /// Gaussian entries with variance `1 / d_old`.
    #[default]
    RandomLinear,
}

impl fmt::Display for CrossSpaceMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossSpaceMap::Rotation => "rotation",
            CrossSpaceMap::RandomLinear => "random_linear",
        })
    }
}

impl FromStr for CrossSpaceMap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(CrossSpaceMap::Rotation),
            "random_linear" => Ok(CrossSpaceMap::RandomLinear),
            other => Err(Error::Config(format!("unknown cross_space_map `{other}`"))),
        }
    }
}

/// Defaults to the desk scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpgradeScenario {
    pub num_classes: usize,
    pub per_class_gallery: usize,
    pub per_class_train: usize,
    pub num_queries: usize,
    pub d_old: usize,
    pub d_new: usize,
    pub sigma_old: f64,
    pub sigma_new: f64,
    pub cross_space_map: CrossSpaceMap,
    pub seed: u64,
}

impl Default for UpgradeScenario {
    fn default() -> Self {
        Self {
            num_classes: 50,
            per_class_gallery: 20,
            per_class_train: 20,
            num_queries: 500,
            d_old: 32,
            d_new: 64,
            sigma_old: 0.9,
            sigma_new: 0.45,
            cross_space_map: CrossSpaceMap::RandomLinear,
            seed: 7,
        }
    }
}

impl UpgradeScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("per_class_gallery", self.per_class_gallery),
            ("per_class_train", self.per_class_train),
            ("num_queries", self.num_queries),
            ("d_old", self.d_old),
            ("d_new", self.d_new),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(self.sigma_new.is_finite() && self.sigma_new > 0.0) {
            return bad(format!("sigma_new must be positive, got {}", self.sigma_new));
        }
        if !(self.sigma_old.is_finite() && self.sigma_old > self.sigma_new) {
            return bad(format!(
                "sigma_old ({}) must exceed sigma_new ({})",
                self.sigma_old, self.sigma_new
            ));
        }
        if self.cross_space_map == CrossSpaceMap::Rotation && self.d_old > self.d_new {
            return bad(format!(
                "rotation map needs d_old <= d_new, got {} > {}",
                self.d_old, self.d_new
            ));
        }
        Ok(())
    }
}

/// Id-disjoint train, query and gallery pair sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: EmbeddingPairSet,
    pub query: EmbeddingPairSet,
    pub gallery: EmbeddingPairSet,
}

/// Ids run consecutively from 0 over train, then queries, then gallery.
/// Query `i` has label `i mod num_classes`; train and gallery are grouped by
/// class.
pub fn generate(scenario: &UpgradeScenario) -> Result<Benchmark> {
    scenario.validate()?;
    let s = scenario;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);

    let prototypes: Vec<Vec<f64>> = (0..s.num_classes)
        .map(|_| normalized(gaussian(&mut rng, s.d_new, 1.0)))
        .collect::<Result<_>>()?;
    let map = cross_map(&mut rng, s)?;
    let mapped: Vec<Vec<f64>> = prototypes
        .iter()
        .map(|p| map.iter().map(|row| row.iter().zip(p).map(|(a, b)| a * b).sum()).collect())
        .collect();

    let train_labels: Vec<u32> = grouped_labels(s.num_classes, s.per_class_train);
    let query_labels: Vec<u32> = (0..s.num_queries).map(|i| (i % s.num_classes) as u32).collect();
    let gallery_labels: Vec<u32> = grouped_labels(s.num_classes, s.per_class_gallery);

    let mut next_id = 0u64;
    let mut make = |labels: Vec<u32>, rng: &mut ChaCha8Rng| -> Result<EmbeddingPairSet> {
        let ids: Vec<u64> = (next_id..next_id + labels.len() as u64).collect();
        next_id += labels.len() as u64;
        let sd_new = s.sigma_new / (s.d_new as f64).sqrt();
        let sd_old = s.sigma_old / (s.d_old as f64).sqrt();
        let mut new_vecs = Vec::with_capacity(labels.len() * s.d_new);
        let mut old_vecs = Vec::with_capacity(labels.len() * s.d_old);
        for &l in &labels {
            let noisy = add(&prototypes[l as usize], &gaussian(rng, s.d_new, sd_new));
            new_vecs.extend(normalized(noisy)?.into_iter().map(|v| v as f32));
            let noisy = add(&mapped[l as usize], &gaussian(rng, s.d_old, sd_old));
            old_vecs.extend(normalized(noisy)?.into_iter().map(|v| v as f32));
        }
        let old = LabeledEmbeddings::new(s.d_old, old_vecs, labels.clone(), ids.clone())?;
        let new = LabeledEmbeddings::new(s.d_new, new_vecs, labels, ids)?;
        EmbeddingPairSet::new(old, new)
    };
    let train = make(train_labels, &mut rng)?;
    let query = make(query_labels, &mut rng)?;
    let gallery = make(gallery_labels, &mut rng)?;
    Ok(Benchmark { train, query, gallery })
}

fn grouped_labels(classes: usize, per_class: usize) -> Vec<u32> {
    (0..classes as u32)
        .flat_map(|c| std::iter::repeat_n(c, per_class))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Numeric("cannot normalize a degenerate sample".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// `d_old × d_new` map from the new space to the old one.
fn cross_map(rng: &mut ChaCha8Rng, s: &UpgradeScenario) -> Result<Vec<Vec<f64>>> {
    match s.cross_space_map {
        CrossSpaceMap::RandomLinear => {
            let sd = 1.0 / (s.d_old as f64).sqrt();
            Ok((0..s.d_old).map(|_| gaussian(rng, s.d_new, sd)).collect())
        }
        CrossSpaceMap::Rotation => {
            // Gram–Schmidt on Gaussian rows; redraw the rare near-dependent row.
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(s.d_old);
            while rows.len() < s.d_old {
                let mut v = gaussian(rng, s.d_new, 1.0);
                for r in &rows {
                    let p: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
                }
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 1e-6 {
                    rows.push(v.into_iter().map(|x| x / n).collect());
                }
            }
            Ok(rows)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Old,
    New,
}

impl Side {
    pub fn pick(self, pairs: &EmbeddingPairSet) -> &LabeledEmbeddings {
        match self {
            Side::Old => pairs.old_side(),
            Side::New => pairs.new_side(),
        }
    }
}

/// Full-ranking evaluation of one model against its own gallery embeddings.
pub fn self_test(side: Side, query: &EmbeddingPairSet, gallery: &EmbeddingPairSet, kind: DistanceKind) -> Result<EvalReport> {
    let q = side.pick(query);
    let g = side.pick(gallery);
    Error::check_dim(g.dim(), q.dim())?;
    let rankings = rank_queries(q, g, kind)?;
    evaluate(
        rankings.iter().map(|r| r.ids()),
        q.labels(),
        &GalleryLabels::new(g),
    )
}
