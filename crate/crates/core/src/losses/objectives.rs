//! Embedding-level objectives and their gradients.
//!
//! Similarities are `s = exp(-dist)`. The backward system compares reverse
//! transformed queries with old-model embeddings, `s_old[i][k] = exp(-d(rev_i, old_k))`;
//! the new system compares new-side embeddings with each other,
//! `s_new[i][k] = exp(-d(new_i, new_k))`.

use crate::error::{Error, Result};
use crate::nn::{dot, Matrix};
use crate::retrieval::DistanceKind;

/// Distance between two f64 rows and its gradients with respect to both.
pub fn distance_with_grads(a: &[f64], b: &[f64], kind: DistanceKind) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    Error::check_dim(a.len(), b.len())?;
    match kind {
        DistanceKind::L2 => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let d = dot(&diff, &diff).sqrt();
            if d == 0.0 {
                return Ok((0.0, vec![0.0; a.len()], vec![0.0; a.len()]));
            }
            let ga: Vec<f64> = diff.iter().map(|v| v / d).collect();
            let gb = ga.iter().map(|v| -v).collect();
            Ok((d, ga, gb))
        }
        DistanceKind::Cosine => {
            let na = dot(a, a).sqrt();
            let nb = dot(b, b).sqrt();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroVector);
            }
            let cos = dot(a, b) / (na * nb);
            let ga = a
                .iter()
                .zip(b)
                .map(|(x, y)| -(y / (na * nb) - cos * x / (na * na)))
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(x, y)| -(x / (na * nb) - cos * y / (nb * nb)))
                .collect();
            Ok((1.0 - cos, ga, gb))
        }
    }
}

/// Pairwise distances `d(left_i, right_k)`.
pub fn distance_matrix(left: &Matrix, right: &Matrix, kind: DistanceKind) -> Result<Matrix> {
    Error::check_dim(left.cols(), right.cols())?;
    let mut d = Matrix::zeros(left.rows(), right.rows());
    for i in 0..left.rows() {
        for k in 0..right.rows() {
            d[(i, k)] = distance_with_grads(left.row(i), right.row(k), kind)?.0;
        }
    }
    Ok(d)
}

/// Mean alignment distance `mean_i d(rev_i, old_i)` and its gradient in `rev`.
pub fn rqt_loss(rev: &Matrix, old: &Matrix, kind: DistanceKind) -> Result<(f64, Matrix)> {
    Error::check_dim(old.cols(), rev.cols())?;
    Error::check_dim(old.rows(), rev.rows())?;
    if rev.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let n = rev.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(rev.rows(), rev.cols());
    for i in 0..rev.rows() {
        let (d, ga, _) = distance_with_grads(rev.row(i), old.row(i), kind)?;
        loss += d;
        for (g, v) in grad.row_mut(i).iter_mut().zip(ga) {
            *g = v / n;
        }
    }
    Ok((loss / n, grad))
}

/// Hardest-half selection for one anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mined {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Keeps the farthest `ceil(p/2)` positives and the nearest `ceil(q/2)`
/// negatives of `anchor`, ties broken by smaller index. Positives exclude
/// the anchor itself. Returns `None` when the anchor has no positive.
pub fn mine_hard(anchor: usize, distances: &[f64], labels: &[u32]) -> Option<Mined> {
    let label = labels[anchor];
    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&k| k != anchor && labels[k] == label)
        .collect();
    if pos.is_empty() {
        return None;
    }
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] != label).collect();
    pos.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    neg.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    pos.truncate(pos.len().div_ceil(2));
    neg.truncate(neg.len().div_ceil(2));
    Some(Mined {
        positives: pos,
        negatives: neg,
    })
}

/// Mined sets for every anchor in both systems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchMining {
    pub backward: Vec<Option<Mined>>,
    pub new: Vec<Option<Mined>>,
}

/// A batch as seen by the contrastive objectives.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    /// ψ(new) or ψ(ρ(new)), `n × d_old`.
    pub rev: &'a Matrix,
    /// φ^old, `n × d_old`.
    pub old: &'a Matrix,
    /// φ^new or ρ(φ^new), `n × d_new`; serves as both query and gallery side.
    pub new: &'a Matrix,
    pub labels: &'a [u32],
}

impl ContrastiveBatch<'_> {
    fn check(&self) -> Result<()> {
        let n = self.labels.len();
        for m in [self.rev, self.old, self.new] {
            Error::check_dim(n, m.rows())?;
        }
        Error::check_dim(self.old.cols(), self.rev.cols())
    }

    /// Backward and new-system distance matrices.
    pub fn distances(&self, kind: DistanceKind) -> Result<(Matrix, Matrix)> {
        Ok((
            distance_matrix(self.rev, self.old, kind)?,
            distance_matrix(self.new, self.new, kind)?,
        ))
    }

    /// Mines each system from its own distances.
    pub fn mine(&self, kind: DistanceKind) -> Result<BatchMining> {
        let (d_old, d_new) = self.distances(kind)?;
        Ok(mine_from(&d_old, &d_new, self.labels))
    }
}

fn mine_from(d_old: &Matrix, d_new: &Matrix, labels: &[u32]) -> BatchMining {
    BatchMining {
        backward: (0..labels.len()).map(|i| mine_hard(i, d_old.row(i), labels)).collect(),
        new: (0..labels.len()).map(|i| mine_hard(i, d_new.row(i), labels)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Contrastive {
    /// Backward system only.
    Cl,
    /// Both systems, each against its own negatives.
    ClM,
    /// Both systems, each also against the other system's negatives.
    Cmcl,
}

#[derive(Debug, Clone, Copy)]
struct Terms {
    new_term: bool,
    cross_negatives: bool,
}

impl Contrastive {
    fn terms(self) -> Terms {
        match self {
            Contrastive::Cl => Terms {
                new_term: false,
                cross_negatives: false,
            },
            Contrastive::ClM => Terms {
                new_term: true,
                cross_negatives: false,
            },
            Contrastive::Cmcl => Terms {
                new_term: true,
                cross_negatives: true,
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbeddingLoss {
    /// Mean over scored anchors.
    pub loss: f64,
    pub grad_rev: Matrix,
    pub grad_new: Matrix,
    pub scored_anchors: usize,
    pub skipped_anchors: usize,
    pub mining: BatchMining,
}

/// Contrastive objective over a batch. With `mining` given, those sets are
/// used as-is instead of being mined from the current distances.
pub fn contrastive_loss(
    objective: Contrastive,
    batch: &ContrastiveBatch<'_>,
    kind: DistanceKind,
    mining: Option<&BatchMining>,
) -> Result<EmbeddingLoss> {
    contrastive_with_terms(objective.terms(), batch, kind, mining)
}

fn contrastive_with_terms(
    terms: Terms,
    batch: &ContrastiveBatch<'_>,
    kind: DistanceKind,
    mining: Option<&BatchMining>,
) -> Result<EmbeddingLoss> {
    batch.check()?;
    let n = batch.labels.len();
    let (d_old, d_new) = batch.distances(kind)?;
    let mining = match mining {
        Some(m) => {
            if m.backward.len() != n || m.new.len() != n {
                return Err(Error::invalid("mining does not match the batch"));
            }
            m.clone()
        }
        None => mine_from(&d_old, &d_new, batch.labels),
    };
    let s_old = exp_neg(&d_old);
    let s_new = exp_neg(&d_new);
    let mut ds_old = Matrix::zeros(n, n);
    let mut ds_new = Matrix::zeros(n, n);

    let mut loss = 0.0;
    let mut scored = 0usize;
    for i in 0..n {
        let Some(mo) = &mining.backward[i] else { continue };
        let mn = if terms.new_term || terms.cross_negatives {
            match &mining.new[i] {
                Some(mn) => Some(mn),
                None => continue,
            }
        } else {
            None
        };
        scored += 1;
        let sum = |s: &Matrix, idx: &[usize]| idx.iter().map(|&k| s[(i, k)]).sum::<f64>();
        let pos_old = sum(&s_old, &mo.positives);
        let neg_old = sum(&s_old, &mo.negatives);
        let (pos_new, neg_new) = mn.map_or((0.0, 0.0), |mn| {
            (sum(&s_new, &mn.positives), sum(&s_new, &mn.negatives))
        });

        // backward-system term
        let cross = if terms.cross_negatives { neg_new } else { 0.0 };
        let den = pos_old + neg_old + cross;
        loss += -(pos_old / den).ln();
        for &k in &mo.positives {
            ds_old[(i, k)] += 1.0 / den - 1.0 / pos_old;
        }
        for &k in &mo.negatives {
            ds_old[(i, k)] += 1.0 / den;
        }
        if terms.cross_negatives {
            for &k in &mn.unwrap().negatives {
                ds_new[(i, k)] += 1.0 / den;
            }
        }

        if terms.new_term {
            let mn = mn.unwrap();
            let cross = if terms.cross_negatives { neg_old } else { 0.0 };
            let den = pos_new + neg_new + cross;
            loss += -(pos_new / den).ln();
            for &k in &mn.positives {
                ds_new[(i, k)] += 1.0 / den - 1.0 / pos_new;
            }
            for &k in &mn.negatives {
                ds_new[(i, k)] += 1.0 / den;
            }
            if terms.cross_negatives {
                for &k in &mo.negatives {
                    ds_old[(i, k)] += 1.0 / den;
                }
            }
        }
    }
    if scored == 0 {
        return Err(Error::DegenerateBatch);
    }
    let scale = 1.0 / scored as f64;

    let mut grad_rev = Matrix::zeros(n, batch.rev.cols());
    let mut grad_new = Matrix::zeros(n, batch.new.cols());
    for i in 0..n {
        for k in 0..n {
            // d(loss)/d(dist) = -s · d(loss)/ds
            let g_old = -s_old[(i, k)] * ds_old[(i, k)] * scale;
            if g_old != 0.0 {
                let (_, ga, _) = distance_with_grads(batch.rev.row(i), batch.old.row(k), kind)?;
                axpy(grad_rev.row_mut(i), g_old, &ga);
            }
            let g_new = -s_new[(i, k)] * ds_new[(i, k)] * scale;
            if g_new != 0.0 {
                let (_, ga, gb) = distance_with_grads(batch.new.row(i), batch.new.row(k), kind)?;
                axpy(grad_new.row_mut(i), g_new, &ga);
                axpy(grad_new.row_mut(k), g_new, &gb);
            }
        }
    }
    Ok(EmbeddingLoss {
        loss: loss * scale,
        grad_rev,
        grad_new,
        scored_anchors: scored,
        skipped_anchors: n - scored,
        mining,
    })
}

fn exp_neg(d: &Matrix) -> Matrix {
    let data = d.as_slice().iter().map(|v| (-v).exp()).collect();
    Matrix::from_vec(d.rows(), d.cols(), data).expect("same shape")
}

fn axpy(dst: &mut [f64], alpha: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += alpha * v;
    }
}
