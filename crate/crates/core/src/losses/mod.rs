//! Training objectives for the reverse query transform and the loops that fit them.

mod fit;
mod network;
mod objectives;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use fit::{fit, fit_batches, EpochLog, FitOutcome, TrainConfig};
pub use network::{evaluate_loss, loss_cl, loss_cl_m, loss_cmcl, loss_rqt, LossEval, TrainBatch};
pub use objectives::{
    contrastive_loss, distance_matrix, distance_with_grads, mine_hard, rqt_loss, BatchMining,
    Contrastive, ContrastiveBatch, EmbeddingLoss, Mined,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Rqt,
    Cl,
    ClM,
    Cmcl,
    CmclWithRho,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Rqt,
        LossKind::Cl,
        LossKind::ClM,
        LossKind::Cmcl,
        LossKind::CmclWithRho,
    ];

    pub fn uses_rho(self) -> bool {
        self == LossKind::CmclWithRho
    }

    pub fn contrastive(self) -> Option<Contrastive> {
        match self {
            LossKind::Rqt => None,
            LossKind::Cl => Some(Contrastive::Cl),
            LossKind::ClM => Some(Contrastive::ClM),
            LossKind::Cmcl | LossKind::CmclWithRho => Some(Contrastive::Cmcl),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Rqt => "rqt",
            LossKind::Cl => "cl",
            LossKind::ClM => "cl_m",
            LossKind::Cmcl => "cmcl",
            LossKind::CmclWithRho => "cmcl_with_rho",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss kind `{s}`")))
    }
}
