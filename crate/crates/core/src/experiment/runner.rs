use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::FitOutcome;
use crate::metrics::EvalReport;
use crate::store::EmbeddingPairSet;

use super::config::{ExperimentConfig, Method};
use super::output::{num, write_atomic, CsvTable};
use super::pipeline::{evaluate_method, prepare_seed, train_method, MethodRun, SeedData};

/// How far a run goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scope {
    /// Data files only.
    Generate,
    /// Data files, checkpoints and training logs.
    Train,
    /// Everything, including curves and summaries.
    Evaluate,
}

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Debug, Clone)]
pub struct SeedReport {
    pub seed: u64,
    pub old_selftest: EvalReport,
    pub new_selftest: EvalReport,
    pub methods: Vec<MethodRun>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: Method,
    pub seeds: usize,
    pub auc_map_mean: f64,
    pub auc_map_std: f64,
    pub auc_cmc_mean: f64,
    pub auc_cmc_std: f64,
    /// Largest negative-flip rate over every slice and seed.
    pub max_neg_flip: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub scenario_hash: String,
    pub seeds: Vec<SeedReport>,
    pub aggregate: Vec<AggregateRow>,
}

impl ExperimentReport {
    pub fn aggregate_for(&self, method: Method) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.method == method)
    }
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

/// Runs every configured seed (in parallel) and method up to `scope`,
/// writing artifacts under `out`.
///
/// `out/INCOMPLETE` exists while the run is in progress and is left behind,
/// holding the failing stage, if the run aborts.
pub fn run(config: &ExperimentConfig, out: &Path, scope: Scope) -> Result<ExperimentReport> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"running\n")?;
    match run_inner(config, out, scope) {
        Ok(report) => {
            fs::remove_file(&marker)?;
            Ok(report)
        }
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}

fn run_inner(config: &ExperimentConfig, out: &Path, scope: Scope) -> Result<ExperimentReport> {
    let config_hash = config.config_hash();
    let scenario_hash = config.scenario_hash();
    let meta = [("config_hash", config_hash.as_str()), ("scenario_hash", scenario_hash.as_str())];
    write_atomic(&out.join("config.toml"), config.to_toml().as_bytes())?;

    let seeds = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed(config, &seed_dir(out, seed), seed, scope, &meta))
        .collect::<Result<Vec<_>>>()?;

    let aggregate = if scope == Scope::Evaluate {
        let rows = aggregate(config, &seeds);
        write_aggregate(&out.join("aggregate.csv"), &rows, &meta)?;
        rows
    } else {
        Vec::new()
    };
    Ok(ExperimentReport {
        out_dir: out.to_path_buf(),
        config_hash,
        scenario_hash,
        seeds,
        aggregate,
    })
}

fn run_seed(
    config: &ExperimentConfig,
    dir: &Path,
    seed: u64,
    scope: Scope,
    meta: &[(&str, &str)],
) -> Result<SeedReport> {
    let data = prepare_seed(config, seed)?;
    let io = |stage: &str| {
        let stage = format!("seed {seed}: {stage}");
        move |e: Error| e.at_stage(stage)
    };
    write_data(&dir.join("data"), &data).map_err(io("write data"))?;
    let mut methods = Vec::new();
    if scope >= Scope::Train {
        for &method in &config.methods {
            let trained = train_method(config, &data, method)?;
            let mdir = dir.join(method.as_str());
            if let Some(out) = &trained {
                write_training(&mdir, out, meta).map_err(io("write checkpoints"))?;
            }
            if scope == Scope::Evaluate {
                let run = evaluate_method(config, &data, method, trained.as_ref())?;
                write_curve(&mdir.join("curve.csv"), &run, meta).map_err(io("write curve"))?;
                methods.push(run);
            }
        }
    }
    if scope == Scope::Evaluate {
        write_summary(&dir.join("summary.csv"), &data, &methods, meta).map_err(io("write summary"))?;
    }
    Ok(SeedReport {
        seed,
        old_selftest: data.old_selftest,
        new_selftest: data.new_selftest,
        methods,
    })
}

fn write_data(dir: &Path, data: &SeedData) -> Result<()> {
    let b = &data.benchmark;
    let sets: [(&str, &EmbeddingPairSet); 3] = [("train", &b.train), ("query", &b.query), ("gallery", &b.gallery)];
    for (name, set) in sets {
        write_atomic(&dir.join(format!("{name}_old.bmeb")), &set.old_side().to_bytes()?)?;
        write_atomic(&dir.join(format!("{name}_new.bmeb")), &set.new_side().to_bytes()?)?;
    }
    Ok(())
}

fn write_training(dir: &Path, out: &FitOutcome, meta: &[(&str, &str)]) -> Result<()> {
    write_atomic(&dir.join("psi.bmck"), &out.psi.to_checkpoint_bytes())?;
    if let Some(rho) = &out.rho {
        write_atomic(&dir.join("rho.bmck"), &rho.to_checkpoint_bytes())?;
    }
    let mut log = CsvTable::new(meta, &["epoch", "mean_loss", "skipped_anchors", "lr"]);
    for e in &out.history {
        log.push(vec![
            e.epoch.to_string(),
            num(e.mean_loss),
            e.skipped_anchors.to_string(),
            num(e.lr),
        ]);
    }
    log.write(&dir.join("train_log.csv"))
}

pub const CURVE_HEADER: [&str; 5] = ["t", "mAP", "CMC1", "neg_flip_rate", "source_new_fraction"];

fn write_curve(path: &Path, run: &MethodRun, meta: &[(&str, &str)]) -> Result<()> {
    let c = &run.curve;
    let mut t = CsvTable::new(meta, &CURVE_HEADER);
    for i in 0..c.slices.len() {
        t.push(vec![
            num(c.slices[i]),
            num(c.map_at[i]),
            num(c.cmc_at[i]),
            num(c.neg_flip_at[i]),
            num(c.source_new_fraction[i]),
        ]);
    }
    t.write(path)
}

pub const SUMMARY_HEADER: [&str; 16] = [
    "method",
    "AUC_mAP",
    "AUC_CMC",
    "max_neg_flip",
    "mAP_0",
    "mAP_1",
    "CMC1_0",
    "CMC1_1",
    "backward_selftest_mAP",
    "new_system_selftest_mAP",
    "old_selftest_mAP",
    "old_selftest_CMC1",
    "new_selftest_mAP",
    "new_selftest_CMC1",
    "old_model_query_extractions",
    "new_model_query_extractions",
];

fn write_summary(path: &Path, data: &SeedData, runs: &[MethodRun], meta: &[(&str, &str)]) -> Result<()> {
    let mut t = CsvTable::new(meta, &SUMMARY_HEADER);
    for r in runs {
        let c = &r.curve;
        let last = c.map_at.len() - 1;
        t.push(vec![
            r.method.to_string(),
            num(c.auc_map),
            num(c.auc_cmc),
            num(c.max_neg_flip()),
            num(c.map_at[0]),
            num(c.map_at[last]),
            num(c.cmc_at[0]),
            num(c.cmc_at[last]),
            num(r.backward_selftest.map_value),
            num(r.new_system_selftest.map_value),
            num(data.old_selftest.map_value),
            num(data.old_selftest.cmc_top1),
            num(data.new_selftest.map_value),
            num(data.new_selftest.cmc_top1),
            r.extractions.old_model.to_string(),
            r.extractions.new_model.to_string(),
        ]);
    }
    t.write(path)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(config: &ExperimentConfig, seeds: &[SeedReport]) -> Vec<AggregateRow> {
    config
        .methods
        .iter()
        .map(|&method| {
            let runs: Vec<&MethodRun> = seeds
                .iter()
                .filter_map(|s| s.methods.iter().find(|r| r.method == method))
                .collect();
            let maps: Vec<f64> = runs.iter().map(|r| r.curve.auc_map).collect();
            let cmcs: Vec<f64> = runs.iter().map(|r| r.curve.auc_cmc).collect();
            let (auc_map_mean, auc_map_std) = mean_std(&maps);
            let (auc_cmc_mean, auc_cmc_std) = mean_std(&cmcs);
            AggregateRow {
                method,
                seeds: runs.len(),
                auc_map_mean,
                auc_map_std,
                auc_cmc_mean,
                auc_cmc_std,
                max_neg_flip: runs.iter().map(|r| r.curve.max_neg_flip()).fold(0.0, f64::max),
            }
        })
        .collect()
}

pub const AGGREGATE_HEADER: [&str; 7] = [
    "method",
    "seeds",
    "AUC_mAP_mean",
    "AUC_mAP_std",
    "AUC_CMC_mean",
    "AUC_CMC_std",
    "max_neg_flip",
];

fn write_aggregate(path: &Path, rows: &[AggregateRow], meta: &[(&str, &str)]) -> Result<()> {
    let mut t = CsvTable::new(meta, &AGGREGATE_HEADER);
    for r in rows {
        t.push(vec![
            r.method.to_string(),
            r.seeds.to_string(),
            num(r.auc_map_mean),
            num(r.auc_map_std),
            num(r.auc_cmc_mean),
            num(r.auc_cmc_std),
            num(r.max_neg_flip),
        ]);
    }
    t.write(path)
}
