#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rankmerge::losses::{evaluate_loss, LossKind, TrainBatch};
use rankmerge::merge::GalleryPartition;
use rankmerge::nn::{BatchNormConfig, Matrix, MlpTransform};
use rankmerge::retrieval::{distance, DistanceKind};
use rankmerge::store::LabeledEmbeddings;

/// Precision-at-k formulation of average precision, normalized by `r`.
pub fn ap_oracle(relevance: &[bool], r: usize) -> f64 {
    let mut sum = 0.0;
    for k in 0..relevance.len() {
        if relevance[k] {
            let hits = relevance[..=k].iter().filter(|&&x| x).count();
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / r as f64
}

/// Merged ranking by sorting the union of per-system distances directly.
/// Ties: smaller distance first, then new-system items, then smaller id.
pub fn merge_oracle(
    q_old: &[f32],
    q_new: &[f32],
    partition: &GalleryPartition,
    old_gallery: &LabeledEmbeddings,
    new_gallery: &LabeledEmbeddings,
    kind: DistanceKind,
) -> Vec<u64> {
    let backfilled: std::collections::HashSet<u64> = partition.new_ids().iter().copied().collect();
    let mut all: Vec<(f32, u8, u64)> = Vec::new();
    for i in 0..old_gallery.len() {
        let id = old_gallery.ids()[i];
        if backfilled.contains(&id) {
            let d = distance(q_new, new_gallery.row(i), kind).unwrap() as f32;
            all.push((d, 0, id));
        } else {
            let d = distance(q_old, old_gallery.row(i), kind).unwrap() as f32;
            all.push((d, 1, id));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().map(|e| e.2).collect()
}

/// mAP and CMC@1 of id rankings, computed from scratch.
pub fn map_cmc_oracle(rankings: &[Vec<u64>], query_labels: &[u32], gallery: &LabeledEmbeddings) -> (f64, f64) {
    let label_of: std::collections::HashMap<u64, u32> =
        gallery.ids().iter().copied().zip(gallery.labels().iter().copied()).collect();
    let mut ap = 0.0;
    let mut top1 = 0usize;
    for (ranking, &l) in rankings.iter().zip(query_labels) {
        let rel: Vec<bool> = ranking.iter().map(|id| label_of[id] == l).collect();
        let r = gallery.labels().iter().filter(|&&g| g == l).count();
        ap += ap_oracle(&rel, r);
        top1 += rel[0] as usize;
    }
    let n = rankings.len() as f64;
    (ap / n, top1 as f64 / n)
}

/// One randomized gradient-check problem.
pub struct GradCase {
    pub kind: LossKind,
    pub dist: DistanceKind,
    pub psi: MlpTransform,
    pub rho: Option<MlpTransform>,
    pub batch: TrainBatch,
}

impl GradCase {
    pub fn random(kind: LossKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = if rng.random_bool(0.5) {
            DistanceKind::Cosine
        } else {
            DistanceKind::L2
        };
        let classes = rng.random_range(2..=3usize);
        let per_class = rng.random_range(2..=3usize);
        let n = classes * per_class;
        let d_new = rng.random_range(2..=5usize);
        let d_old = rng.random_range(2..=5usize);
        let mut labels: Vec<u32> = (0..n).map(|i| (i / per_class) as u32).collect();
        // Interleave classes so anchors are not grouped.
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        let mut gauss = |rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let old = gauss(n, d_old);
        let new = gauss(n, d_new);
        let norm = BatchNormConfig::default();
        let psi_blocks = rng.random_range(1..=3usize);
        let mut psi = MlpTransform::new(d_new, d_old, psi_blocks, norm, &mut rng).unwrap();
        perturb_affine(&mut psi, &mut rng);
        let rho = kind.uses_rho().then(|| {
            let blocks = rng.random_range(1..=2usize);
            let mut r = MlpTransform::new(d_new, d_new, blocks, norm, &mut rng).unwrap();
            perturb_affine(&mut r, &mut rng);
            r
        });
        Self {
            kind,
            dist,
            psi,
            rho,
            batch: TrainBatch { old, new, labels },
        }
    }

    /// Compares the analytic gradient `a` over all ψ and ρ parameters with
    /// central differences `n` taken under the base point's mining.
    ///
    /// Returns the relative error `‖a − n‖ / max(‖a‖, ‖n‖)` and whether every
    /// entry satisfies `|a − n| ≤ 1e-4·max(|a|, |n|) + 1e-8`. The absolute term
    /// covers entries whose true gradient is zero, such as biases feeding a
    /// batchnorm, where the difference quotient is pure rounding noise.
    pub fn check(&mut self) -> (f64, bool) {
        let base = evaluate_loss(self.kind, &mut self.psi, self.rho.as_mut(), &self.batch, self.dist, None).unwrap();
        let mining = base.mining.clone();
        let mut analytic = base.psi.flatten();
        if let Some(g) = &base.rho {
            analytic.extend(g.flatten());
        }
        let h = 1e-6;
        let mut numeric = Vec::with_capacity(analytic.len());
        let psi_len = self.psi.flat_params().len();
        let rho_len = self.rho.as_ref().map_or(0, |r| r.flat_params().len());
        for p in 0..psi_len + rho_len {
            let at = |delta: f64, case: &mut GradCase| -> f64 {
                nudge(case, p, psi_len, delta);
                let v = evaluate_loss(case.kind, &mut case.psi, case.rho.as_mut(), &case.batch, case.dist, mining.as_ref())
                    .unwrap()
                    .loss;
                nudge(case, p, psi_len, -delta);
                v
            };
            let plus = at(h, self);
            let minus = at(-h, self);
            numeric.push((plus - minus) / (2.0 * h));
        }
        let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
        let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
        let overall = if scale == 0.0 { diff } else { diff / scale };
        let entrywise = analytic
            .iter()
            .zip(&numeric)
            .all(|(a, n)| (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-8);
        (overall, entrywise)
    }
}

/// Random biases and BN affine parameters, so no gradient is trivially zero.
fn perturb_affine(net: &mut MlpTransform, rng: &mut ChaCha8Rng) {
    for s in net.param_slices_mut() {
        for v in s.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

fn nudge(case: &mut GradCase, p: usize, psi_len: usize, delta: f64) {
    let (net, mut idx) = if p < psi_len {
        (&mut case.psi, p)
    } else {
        (case.rho.as_mut().unwrap(), p - psi_len)
    };
    for s in net.param_slices_mut() {
        if idx < s.len() {
            s[idx] += delta;
            return;
        }
        idx -= s.len();
    }
    panic!("parameter index out of range");
}
