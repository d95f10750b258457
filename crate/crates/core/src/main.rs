use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rankmerge::experiment::{self, ExperimentConfig, ExperimentReport, Method, Scope};
use rankmerge::synthetic::{generate, self_test, Side};
use rankmerge::{Error, Result};

#[derive(Parser)]
#[command(name = "rankmerge", version, about = "Backfilling experiments with distance rank merge")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the scenario data files for each seed.
    Gen(RunArgs),
    /// Generate data and train the transforms of each method.
    Train(RunArgs),
    /// Full pipeline: train, evaluate backfill curves, write summaries.
    EvalCurve(RunArgs),
    /// Tabulate several runs of the same scenario against the first one.
    Compare {
        /// Run directories or their aggregate.csv files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Output CSV path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Old- and new-model self-test scores of the scenario.
    Selftest(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat TOML config; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run this method only.
    #[arg(long)]
    method: Option<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(|e| e.at_stage(format!("config {}", path.display())))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(m) = &self.method {
            cfg.methods = vec![m.parse::<Method>()?];
        }
        cfg.validate()?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Invalid(_) | Error::DimensionMismatch { .. } | Error::OverlappingIds(_) => 2,
        Error::Numeric(_) | Error::DegenerateBatch | Error::StaleCache | Error::ZeroVector => 3,
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::UnsupportedVersion(_)
        | Error::PayloadSize { .. }
        | Error::DuplicateId(_)
        | Error::NonFinite { .. } => 4,
        Error::Stage { .. } => unreachable!("root strips stage tags"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => {
            let (cfg, out) = args.resolve()?;
            experiment::run(&cfg, &out, Scope::Generate)?;
            println!("wrote data for {} seed(s) to {}", cfg.seeds.len(), out.display());
        }
        Command::Train(args) => {
            let (cfg, out) = args.resolve()?;
            experiment::run(&cfg, &out, Scope::Train)?;
            println!("wrote checkpoints to {}", out.display());
        }
        Command::EvalCurve(args) => {
            let (cfg, out) = args.resolve()?;
            let report = experiment::run(&cfg, &out, Scope::Evaluate)?;
            print_aggregate(&report);
        }
        Command::Compare { reports, out } => {
            let table = experiment::compare(&reports)?;
            match out {
                Some(path) => table.write(&path)?,
                None => print!("{}", table.render()),
            }
        }
        Command::Selftest(args) => {
            let (cfg, out) = args.resolve()?;
            selftest(&cfg, args.out.as_deref().map(|_| out.as_path()))?;
        }
    }
    Ok(())
}

fn print_aggregate(report: &ExperimentReport) {
    println!("{:<12} {:>5} {:>22} {:>22} {:>12}", "method", "seeds", "AUC_mAP", "AUC_CMC", "max_flip");
    for r in &report.aggregate {
        println!(
            "{:<12} {:>5} {:>13.4} ± {:<6.4} {:>13.4} ± {:<6.4} {:>12.4}",
            r.method.as_str(),
            r.seeds,
            r.auc_map_mean,
            r.auc_map_std,
            r.auc_cmc_mean,
            r.auc_cmc_std,
            r.max_neg_flip
        );
    }
    println!("artifacts in {}", report.out_dir.display());
}

fn selftest(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let hash = cfg.config_hash();
    let scenario_hash = cfg.scenario_hash();
    let mut table = experiment::CsvTable::new(
        &[("config_hash", &hash), ("scenario_hash", &scenario_hash)],
        &["seed", "side", "mAP", "CMC1"],
    );
    for &seed in &cfg.seeds {
        let b = generate(&cfg.scenario(seed))?;
        for side in [Side::Old, Side::New] {
            let r = self_test(side, &b.query, &b.gallery, cfg.distance)?;
            let name = match side {
                Side::Old => "old",
                Side::New => "new",
            };
            println!("seed {seed:>4} {name:<3} mAP {:.6} CMC@1 {:.6}", r.map_value, r.cmc_top1);
            table.push(vec![
                seed.to_string(),
                name.to_string(),
                experiment::num(r.map_value),
                experiment::num(r.cmc_top1),
            ]);
        }
    }
    if let Some(dir) = out {
        table.write(&dir.join("selftest.csv"))?;
    }
    Ok(())
}
