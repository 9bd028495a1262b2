use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use pderl::config::RunConfig;
use pderl::env::EnvId;
use pderl::evolution::Mode;
use pderl::experiment;

#[derive(Parser, Debug)]
#[command(name = "pderl", version, about = "Evolutionary RL with genetic-memory operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one or more seeds and write per-generation logs.
    Train(Common),
    /// Compare distillation and N-point crossover on trained parent pairs.
    CrossoverBench {
        #[command(flatten)]
        common: Common,
        /// Directory of saved parents (`parent_<i>/`, optional `critic.json`).
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Compare proximal and Gaussian mutation and sweep the mutation magnitude.
    MutationBench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fixtures: Option<PathBuf>,
    },
    /// Greedy vs distance-based parent selection on the same seeds.
    SelectionCompare(Common),
    /// Collect learning curves and RL-status rates from a run directory.
    ExportPlots {
        /// Run directory to scan for generation logs.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of repetitions (seeds `seed`, `seed + 1`, ...).
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    env: Option<EnvId>,
    /// Environment frame budget per run.
    #[arg(long)]
    frames: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    /// Loads the config file (if any), applies flag overrides and validates.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.evolution.seed = s;
        }
        if let Some(k) = self.seeds {
            cfg.run.seeds = k;
        }
        if let Some(m) = self.mode {
            cfg.evolution.mode = m;
        }
        if let Some(e) = self.env {
            cfg.env.id = e;
        }
        if let Some(f) = self.frames {
            cfg.evolution.frame_budget = f;
        }
        if let Some(o) = &self.out {
            cfg.run.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let out = cfg.run.out_dir.clone();
            match experiment::train(&cfg, &out).context("training failed")? {
                Some(summary) => {
                    println!(
                        "{} on {}: test fitness mean {:.3} (std {:.3}) over {} seed(s) -> {}",
                        cfg.evolution.mode,
                        cfg.env.id,
                        summary.test_fitness.mean,
                        summary.test_fitness.std,
                        summary.runs.len(),
                        out.display()
                    );
                }
                None => println!("frame budget is zero; wrote config echo to {}", out.display()),
            }
        }
        Command::CrossoverBench { common, fixtures } => {
            let cfg = common.resolve()?;
            let out = cfg.run.out_dir.clone();
            let report = experiment::crossover_bench_cmd(&cfg, fixtures.as_deref(), &out)
                .context("crossover bench failed")?;
            for s in &report.summaries {
                println!(
                    "{:<14} >=80% of best parent: {:.2}  <40%: {:.2}  median ratio: {:.3}",
                    s.operator, s.at_least_80, s.below_40, s.median_ratio_to_best
                );
            }
            println!("wrote {}", out.display());
        }
        Command::MutationBench { common, fixtures } => {
            let cfg = common.resolve()?;
            let out = cfg.run.out_dir.clone();
            let report = experiment::mutation_bench_cmd(&cfg, fixtures.as_deref(), &out)
                .context("mutation bench failed")?;
            for s in &report.summaries {
                println!(
                    "{:<10} median retention {:.3}  median KL {:.4}  median action gap {:.4}",
                    s.operator, s.median_retention, s.median_kl, s.median_action_gap
                );
            }
            println!("wrote {}", out.display());
        }
        Command::SelectionCompare(common) => {
            let cfg = common.resolve()?;
            let out = cfg.run.out_dir.clone();
            let cmp = experiment::selection_compare(&cfg, &out).context("selection comparison failed")?;
            println!(
                "early-phase mean best fitness: greedy {:.3}, distance {:.3} -> {}",
                cmp.greedy.early_mean, cmp.distance.early_mean, cmp.better_early
            );
        }
        Command::ExportPlots { out } => {
            let dir = experiment::export_plots(&out).context("export failed")?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}
