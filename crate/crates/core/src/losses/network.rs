//! Losses evaluated through the trainable transforms, with gradients
//! back-propagated into ψ (and ρ when present).

use super::objectives::{contrastive_loss, rqt_loss, BatchMining, ContrastiveBatch};
use super::LossKind;
use crate::error::{Error, Result};
use crate::nn::{Gradients, Matrix, MlpTransform};
use crate::retrieval::DistanceKind;

/// Frozen old/new model features of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub old: Matrix,
    pub new: Matrix,
    pub labels: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub psi: Gradients,
    pub rho: Option<Gradients>,
    pub scored_anchors: usize,
    pub skipped_anchors: usize,
    /// Mining used by contrastive kinds.
    pub mining: Option<BatchMining>,
}

/// Runs the forward passes in the networks' current mode, evaluates `kind`,
/// and back-propagates. With `mining` given, contrastive kinds reuse it.
pub fn evaluate_loss(
    kind: LossKind,
    psi: &mut MlpTransform,
    mut rho: Option<&mut MlpTransform>,
    batch: &TrainBatch,
    dist: DistanceKind,
    mining: Option<&BatchMining>,
) -> Result<LossEval> {
    if kind.uses_rho() != rho.is_some() {
        return Err(Error::invalid(format!(
            "loss `{kind}` {} a ρ network",
            if kind.uses_rho() { "requires" } else { "does not take" }
        )));
    }
    Error::check_dim(batch.old.rows(), batch.new.rows())?;
    Error::check_dim(batch.old.rows(), batch.labels.len())?;

    let (new_side, rho_cache) = match rho.as_deref_mut() {
        Some(r) => {
            let (out, cache) = r.forward(&batch.new)?;
            (out, Some(cache))
        }
        None => (batch.new.clone(), None),
    };
    let (rev, psi_cache) = psi.forward(&new_side)?;
    Error::check_dim(batch.old.cols(), rev.cols())?;

    let (loss, grad_rev, grad_new, scored, skipped, mining) = match kind.contrastive() {
        None => {
            let (loss, grad) = rqt_loss(&rev, &batch.old, dist)?;
            let n = rev.rows();
            (loss, grad, None, n, 0, None)
        }
        Some(objective) => {
            let cb = ContrastiveBatch {
                rev: &rev,
                old: &batch.old,
                new: &new_side,
                labels: &batch.labels,
            };
            let out = contrastive_loss(objective, &cb, dist, mining)?;
            (
                out.loss,
                out.grad_rev,
                Some(out.grad_new),
                out.scored_anchors,
                out.skipped_anchors,
                Some(out.mining),
            )
        }
    };

    let psi_grads = psi.backward(&psi_cache, &grad_rev)?;
    let rho_grads = match (rho.as_deref(), rho_cache) {
        (Some(r), Some(cache)) => {
            let mut upstream = psi_grads.input.clone();
            if let Some(g) = &grad_new {
                upstream.add_assign(g)?;
            }
            Some(r.backward(&cache, &upstream)?)
        }
        _ => None,
    };
    Ok(LossEval {
        loss,
        psi: psi_grads,
        rho: rho_grads,
        scored_anchors: scored,
        skipped_anchors: skipped,
        mining,
    })
}

/// Alignment loss `mean d(ψ(φ^new), φ^old)`.
pub fn loss_rqt(psi: &mut MlpTransform, batch: &TrainBatch, dist: DistanceKind) -> Result<(f64, Gradients)> {
    let out = evaluate_loss(LossKind::Rqt, psi, None, batch, dist, None)?;
    Ok((out.loss, out.psi))
}

/// Supervised contrastive loss on the backward system.
pub fn loss_cl(psi: &mut MlpTransform, batch: &TrainBatch, dist: DistanceKind) -> Result<(f64, Gradients)> {
    let out = evaluate_loss(LossKind::Cl, psi, None, batch, dist, None)?;
    Ok((out.loss, out.psi))
}

/// Independent contrastive terms for the backward and the new system.
pub fn loss_cl_m(psi: &mut MlpTransform, batch: &TrainBatch, dist: DistanceKind) -> Result<(f64, Gradients)> {
    let out = evaluate_loss(LossKind::ClM, psi, None, batch, dist, None)?;
    Ok((out.loss, out.psi))
}

/// Cross-model contrastive loss; with ρ the new system is `{ρ, ρ}` and the
/// backward queries are `ψ(ρ(·))`.
pub fn loss_cmcl(
    psi: &mut MlpTransform,
    rho: Option<&mut MlpTransform>,
    batch: &TrainBatch,
    dist: DistanceKind,
) -> Result<(f64, Gradients, Option<Gradients>)> {
    let kind = if rho.is_some() {
        LossKind::CmclWithRho
    } else {
        LossKind::Cmcl
    };
    let out = evaluate_loss(kind, psi, rho, batch, dist, None)?;
    Ok((out.loss, out.psi, out.rho))
}
