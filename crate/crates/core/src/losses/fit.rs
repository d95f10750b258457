use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{evaluate_loss, TrainBatch};
use super::LossKind;
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, Adam, AdamConfig, BatchNormConfig, Matrix, MlpTransform, Mode, MAX_BLOCKS};
use crate::retrieval::DistanceKind;
use crate::store::EmbeddingPairSet;

const PSI_STREAM: u64 = 1;
const RHO_STREAM: u64 = 2;
const SAMPLER_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    /// Classes per batch for contrastive kinds; each contributes
    /// `batch_size / classes_per_batch` instances.
    pub classes_per_batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub psi_blocks: usize,
    pub rho_blocks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let bn = BatchNormConfig::default();
        Self {
            epochs: 50,
            lr0: 1e-4,
            batch_size: 64,
            classes_per_batch: 8,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            bn_momentum: bn.momentum,
            bn_eps: bn.eps,
            psi_blocks: 2,
            rho_blocks: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.classes_per_batch < 2 || self.batch_size / self.classes_per_batch < 2 {
            return bad(format!(
                "batch_size {} with {} classes per batch leaves fewer than 2 instances per class",
                self.batch_size, self.classes_per_batch
            ));
        }
        for (name, b) in [("psi_blocks", self.psi_blocks), ("rho_blocks", self.rho_blocks)] {
            if !(1..=MAX_BLOCKS).contains(&b) {
                return bad(format!("{name} must be in 1..={MAX_BLOCKS}, got {b}"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0 && self.bn_eps > 0.0) {
            return bad("adam_eps and bn_eps must be positive".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn batch_norm(&self) -> BatchNormConfig {
        BatchNormConfig {
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        }
    }

    /// Freshly initialized ψ (`d_new → d_old`). Every loss kind trained with
    /// the same seed starts from these weights.
    pub fn init_psi(&self, d_new: usize, d_old: usize) -> Result<MlpTransform> {
        let mut rng = stream(self.seed, PSI_STREAM);
        MlpTransform::new(d_new, d_old, self.psi_blocks, self.batch_norm(), &mut rng)
    }

    /// Freshly initialized ρ (`d_new → d_new`).
    pub fn init_rho(&self, d_new: usize) -> Result<MlpTransform> {
        let mut rng = stream(self.seed, RHO_STREAM);
        MlpTransform::new(d_new, d_new, self.rho_blocks, self.batch_norm(), &mut rng)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub skipped_anchors: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub psi: MlpTransform,
    pub rho: Option<MlpTransform>,
    pub history: Vec<EpochLog>,
}

impl FitOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.mean_loss).collect()
    }
}

/// Row indices of every batch in one epoch.
///
/// `rqt` walks a fresh permutation in chunks of `batch_size` (a trailing
/// chunk of one row is dropped). Contrastive kinds draw
/// `⌊n / batch_size⌋` class-balanced batches: `classes_per_batch` distinct
/// classes, each with up to `batch_size / classes_per_batch` distinct rows.
pub fn fit_batches(kind: LossKind, labels: &[u32], config: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = labels.len();
    if kind.contrastive().is_none() {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        return perm
            .chunks(config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect();
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let p = config.classes_per_batch.min(classes.len());
    let k = config.batch_size / config.classes_per_batch;
    let count = (n / config.batch_size).max(1);
    (0..count)
        .map(|_| {
            let mut batch = Vec::with_capacity(p * k);
            for c in sample(rng, classes.len(), p).into_iter() {
                let rows = classes[c];
                let take = k.min(rows.len());
                batch.extend(sample(rng, rows.len(), take).into_iter().map(|r| rows[r]));
            }
            batch
        })
        .collect()
}

/// Trains ψ (and ρ for `cmcl_with_rho`) on frozen old/new features.
///
/// Fails with a numeric error naming the epoch and batch if the loss or any
/// gradient turns non-finite. The returned networks are in eval mode.
pub fn fit(kind: LossKind, train: &EmbeddingPairSet, config: &TrainConfig, dist: DistanceKind) -> Result<FitOutcome> {
    config.validate()?;
    if train.len() < 2 {
        return Err(Error::invalid("training needs at least 2 pairs"));
    }
    let labels = train.labels();
    if kind.contrastive().is_some() {
        let first = labels[0];
        if labels.iter().all(|&l| l == first) {
            return Err(Error::invalid("contrastive training needs at least 2 classes"));
        }
    }
    let d_old = train.old_side().dim();
    let d_new = train.new_side().dim();
    let old = Matrix::from_f32_rows(d_old, train.old_side().vectors())?;
    let new = Matrix::from_f32_rows(d_new, train.new_side().vectors())?;

    let mut psi = config.init_psi(d_new, d_old)?;
    let mut rho = if kind.uses_rho() {
        Some(config.init_rho(d_new)?)
    } else {
        None
    };
    let mut psi_opt = Adam::new(&psi, config.adam());
    let mut rho_opt = rho.as_ref().map(|r| Adam::new(r, config.adam()));
    let mut sampler = stream(config.seed, SAMPLER_STREAM);

    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.lr0, epoch, config.epochs);
        psi.set_mode(Mode::Train);
        if let Some(r) = rho.as_mut() {
            r.set_mode(Mode::Train);
        }
        let mut total = 0.0;
        let mut scored_batches = 0usize;
        let mut skipped = 0usize;
        for (b, rows) in fit_batches(kind, labels, config, &mut sampler).into_iter().enumerate() {
            let batch = TrainBatch {
                old: old.select_rows(&rows),
                new: new.select_rows(&rows),
                labels: rows.iter().map(|&r| labels[r]).collect(),
            };
            let tag = |e: Error| match e {
                Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            };
            let out = match evaluate_loss(kind, &mut psi, rho.as_mut(), &batch, dist, None) {
                Ok(out) => out,
                Err(Error::DegenerateBatch) => {
                    skipped += rows.len();
                    continue;
                }
                Err(e) => return Err(tag(e)),
            };
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {b}: loss is {}",
                    out.loss
                )));
            }
            step += 1;
            psi_opt.step(&mut psi, &out.psi, step, lr).map_err(tag)?;
            if let (Some(r), Some(opt), Some(g)) = (rho.as_mut(), rho_opt.as_mut(), out.rho.as_ref()) {
                opt.step(r, g, step, lr).map_err(tag)?;
            }
            total += out.loss;
            scored_batches += 1;
            skipped += out.skipped_anchors;
        }
        if scored_batches == 0 {
            return Err(Error::DegenerateBatch);
        }
        history.push(EpochLog {
            epoch,
            mean_loss: total / scored_batches as f64,
            skipped_anchors: skipped,
            lr,
        });
    }
    psi.set_mode(Mode::Eval);
    if let Some(r) = rho.as_mut() {
        r.set_mode(Mode::Eval);
    }
    Ok(FitOutcome { psi, rho, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_batches_are_class_balanced() {
        let labels: Vec<u32> = (0..200).map(|i| i % 20).collect();
        let cfg = TrainConfig::default();
        let mut rng = stream(3, SAMPLER_STREAM);
        let batches = fit_batches(LossKind::Cmcl, &labels, &cfg, &mut rng);
        assert_eq!(batches.len(), 3);
        for b in &batches {
            assert_eq!(b.len(), 64);
            let mut counts = BTreeMap::new();
            for &r in b {
                *counts.entry(labels[r]).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 8);
            assert!(counts.values().all(|&c| c == 8));
            let mut uniq = b.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), 64);
        }
    }

    #[test]
    fn rqt_batches_cover_every_row_once() {
        let labels = vec![0u32; 129];
        let cfg = TrainConfig::default();
        let mut rng = stream(3, SAMPLER_STREAM);
        let batches = fit_batches(LossKind::Rqt, &labels, &cfg, &mut rng);
        // 64 + 64 + a dropped single row
        assert_eq!(batches.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 64]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cases = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { batch_size: 8, classes_per_batch: 8, ..Default::default() },
            TrainConfig { psi_blocks: 6, ..Default::default() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn shared_seed_gives_shared_psi_init() {
        let cfg = TrainConfig { seed: 5, ..Default::default() };
        assert_eq!(cfg.init_psi(6, 4).unwrap().blocks(), cfg.init_psi(6, 4).unwrap().blocks());
        let other = TrainConfig { seed: 6, ..Default::default() };
        assert_ne!(cfg.init_psi(6, 4).unwrap().blocks(), other.init_psi(6, 4).unwrap().blocks());
    }
}
