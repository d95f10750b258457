use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossKind, TrainConfig};
use crate::retrieval::DistanceKind;
use crate::synthetic::{CrossSpaceMap, UpgradeScenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Old-model query against the old part, new-model query against the new part.
    RmNaive,
    RmRqt,
    RmCl,
    RmClM,
    RmCmcl,
    RmCmclRho,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::RmNaive,
        Method::RmRqt,
        Method::RmCl,
        Method::RmClM,
        Method::RmCmcl,
        Method::RmCmclRho,
    ];

    /// The objective ψ is trained with, if any.
    pub fn loss(self) -> Option<LossKind> {
        match self {
            Method::RmNaive => None,
            Method::RmRqt => Some(LossKind::Rqt),
            Method::RmCl => Some(LossKind::Cl),
            Method::RmClM => Some(LossKind::ClM),
            Method::RmCmcl => Some(LossKind::Cmcl),
            Method::RmCmclRho => Some(LossKind::CmclWithRho),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::RmNaive => "rm_naive",
            Method::RmRqt => "rm_rqt",
            Method::RmCl => "rm_cl",
            Method::RmClM => "rm_cl_m",
            Method::RmCmcl => "rm_cmcl",
            Method::RmCmclRho => "rm_cmcl_rho",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Flat experiment configuration, read from a TOML file of `key = value`
/// lines. Every key is optional; missing keys take the desk defaults.
///
/// ```toml
/// methods = ["rm_naive", "rm_cmcl"]
/// seeds = [7, 8, 9]
/// distance = "cosine"
/// num_classes = 50
/// lr0 = 1e-3
/// ```
///
/// Each seed drives the scenario, the ψ/ρ initialization, the batch sampler
/// and the backfill order of its run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub distance: DistanceKind,
    pub output_dir: PathBuf,

    pub num_classes: usize,
    pub per_class_gallery: usize,
    pub per_class_train: usize,
    pub num_queries: usize,
    pub d_old: usize,
    pub d_new: usize,
    pub sigma_old: f64,
    pub sigma_new: f64,
    pub cross_space_map: CrossSpaceMap,

    pub epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub psi_blocks: usize,
    pub rho_blocks: usize,
}

/// Learning rate of the desk configuration. The desk train split has 1000
/// pairs, so 50 epochs are only ~750 Adam steps.
pub const DESK_LR0: f64 = 1e-3;

impl Default for ExperimentConfig {
    fn default() -> Self {
        let s = UpgradeScenario::default();
        let t = TrainConfig::default();
        Self {
            methods: Method::ALL.to_vec(),
            seeds: vec![s.seed],
            distance: DistanceKind::Cosine,
            output_dir: PathBuf::from("runs"),
            num_classes: s.num_classes,
            per_class_gallery: s.per_class_gallery,
            per_class_train: s.per_class_train,
            num_queries: s.num_queries,
            d_old: s.d_old,
            d_new: s.d_new,
            sigma_old: s.sigma_old,
            sigma_new: s.sigma_new,
            cross_space_map: s.cross_space_map,
            epochs: t.epochs,
            lr0: DESK_LR0,
            batch_size: t.batch_size,
            classes_per_batch: t.classes_per_batch,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            bn_momentum: t.bn_momentum,
            bn_eps: t.bn_eps,
            psi_blocks: t.psi_blocks,
            rho_blocks: t.rho_blocks,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let mut methods = self.methods.clone();
        methods.sort_unstable();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return Err(Error::Config("methods must be distinct".into()));
        }
        self.scenario(self.seeds[0]).validate()?;
        if self.methods.iter().any(|m| m.loss().is_some()) {
            self.train(self.seeds[0]).validate()?;
        }
        Ok(())
    }

    pub fn scenario(&self, seed: u64) -> UpgradeScenario {
        UpgradeScenario {
            num_classes: self.num_classes,
            per_class_gallery: self.per_class_gallery,
            per_class_train: self.per_class_train,
            num_queries: self.num_queries,
            d_old: self.d_old,
            d_new: self.d_new,
            sigma_old: self.sigma_old,
            sigma_new: self.sigma_new,
            cross_space_map: self.cross_space_map,
            seed,
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr0: self.lr0,
            batch_size: self.batch_size,
            classes_per_batch: self.classes_per_batch,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            psi_blocks: self.psi_blocks,
            rho_blocks: self.rho_blocks,
            seed,
        }
    }

    /// SHA-256 of the canonical serialization (the output directory excluded).
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        sha256_hex(canonical.to_toml().as_bytes())
    }

    /// Hash of everything that determines the evaluation data: scenario
    /// fields, seeds and distance.
    pub fn scenario_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            scenario: UpgradeScenario,
            seeds: &'a [u64],
            distance: DistanceKind,
        }
        let key = Key {
            scenario: self.scenario(0),
            seeds: &self.seeds,
            distance: self.distance,
        };
        sha256_hex(toml::to_string(&key).expect("scenario key serializes").as_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_file_overrides_keys() {
        let cfg = ExperimentConfig::from_toml("methods = [\"rm_naive\"]\nseeds = [1, 2]\nd_old = 16\n").unwrap();
        assert_eq!(cfg.methods, vec![Method::RmNaive]);
        assert_eq!(cfg.scenario(2).d_old, 16);
        assert_eq!(cfg.scenario(2).seed, 2);
    }

    #[test]
    fn bad_files_are_config_errors() {
        for text in [
            "unknown_key = 1",
            "methods = [\"rm_magic\"]",
            "seeds = []",
            "seeds = [1, 1]",
            "sigma_old = 0.1",
            "lr0 = -1.0",
            "d_old = \"wide\"",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn naive_only_ignores_training_keys() {
        assert!(ExperimentConfig::from_toml("methods = [\"rm_naive\"]\nlr0 = -1.0").is_ok());
    }

    #[test]
    fn hashes() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = ExperimentConfig { lr0: 0.5, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.scenario_hash(), c.scenario_hash());
        let d = ExperimentConfig { seeds: vec![1], ..a.clone() };
        assert_ne!(a.scenario_hash(), d.scenario_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!(Method::RmCmclRho.loss(), Some(LossKind::CmclWithRho));
        assert_eq!(Method::RmNaive.loss(), None);
    }
}
