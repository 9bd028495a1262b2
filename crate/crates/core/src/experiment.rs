//! Experiment drivers: seeded training runs, multi-seed summaries, the
//! greedy-vs-distance selection comparison, and plot-data export.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/config.toml            effective configuration
//! <out>/summary.json           final fitness over seeds (mean/std/median)
//! <out>/seed_<s>/generations.jsonl
//! <out>/seed_<s>/final.json
//! <out>/seed_<s>/champion/{policy.json, memory.jsonl, fitness.json}
//! <out>/seed_<s>/rl_agent.json
//! ```
//!
//! `generations.jsonl` holds one [`GenerationReport`] per line with fields in
//! declaration order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::bench::{self, BenchError};
use crate::config::{ConfigError, RunConfig};
use crate::env;
use crate::evolution::{self, Evolution, EvolutionError, GenerationReport, RlStatus, RlStatusRates};
use crate::operators::SelectionMode;
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed record in {path} line {line}: {source}")]
    Record {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("no generation reports found under {0}")]
    NoReports(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// Outcome of one seeded run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub seed: u64,
    pub generations: u64,
    pub frames: u64,
    /// Best fitness in the last generation.
    pub last_best: f64,
    /// The last generation's champion scored on held-out episodes.
    pub test_fitness: f64,
    pub rl_rates: RlStatusRates,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub reports: Vec<GenerationReport>,
    /// `None` when the run had no generations (zero frame budget).
    pub result: Option<FinalEval>,
}

/// Seed of the held-out test episodes of a run.
pub fn test_seed(seed: u64) -> u64 {
    derive_seed(seed, &[0x7E57])
}

/// Runs one seed of `cfg` (using `cfg.evolution.seed` as is). With `out`,
/// streams reports to `generations.jsonl` and saves the champion, the RL
/// agent and `final.json` there.
pub fn run_single(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome, ExperimentError> {
    cfg.validate()?;
    let mut evo = Evolution::new(cfg.setup())?;
    let mut sink = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("generations.jsonl");
            Some((BufWriter::new(File::create(&path).map_err(io_err(&path))?), path))
        }
        None => None,
    };
    let mut reports = Vec::new();
    while let Some(r) = evo.step()? {
        if let Some((w, path)) = sink.as_mut() {
            let line = serde_json::to_string(&r).expect("report serializes");
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        reports.push(r);
    }
    if let Some((mut w, path)) = sink {
        w.flush().map_err(io_err(&path))?;
    }
    let Some(last) = reports.last() else {
        return Ok(RunOutcome { reports, result: None });
    };
    let champion = &evo.population()[last.champion];
    let mut test_env = env::make(cfg.env.id);
    let test_fitness = bench::evaluate(
        test_env.as_mut(),
        &champion.policy,
        cfg.run.test_episodes,
        test_seed(cfg.evolution.seed),
    )?;
    let result = FinalEval {
        seed: cfg.evolution.seed,
        generations: last.generation,
        frames: last.frames,
        last_best: last.best_fitness,
        test_fitness,
        rl_rates: evolution::track_rl_status(reports.iter().map(|r| &r.rl_status)),
    };
    if let Some(dir) = out {
        bench::save_agent(champion, &dir.join("champion"))?;
        let rl_path = dir.join("rl_agent.json");
        evo.rl_agent()
            .save(&rl_path)
            .map_err(EvolutionError::from)?;
        write_json(&dir.join("final.json"), &result)?;
    }
    Ok(RunOutcome {
        reports,
        result: Some(result),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn stats(values: &[f64]) -> Stats {
    if values.is_empty() {
        return Stats {
            mean: f64::NAN,
            std: f64::NAN,
            median: f64::NAN,
            min: f64::NAN,
            max: f64::NAN,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Stats {
        mean,
        std: var.sqrt(),
        median: bench::median(values),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub env: String,
    pub mode: String,
    pub frame_budget: u64,
    pub seeds: Vec<u64>,
    pub runs: Vec<FinalEval>,
    /// Statistics of `test_fitness` over seeds.
    pub test_fitness: Stats,
    /// Statistics of `last_best` over seeds.
    pub last_best: Stats,
}

/// Seeds of the repetitions of `cfg`.
pub fn seed_list(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.run.seeds as u64)
        .map(|i| cfg.evolution.seed.wrapping_add(i))
        .collect()
}

/// `train`: runs every seed into `<out>/seed_<s>/` and writes the config echo
/// and `summary.json`. A zero frame budget only writes the config echo.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<Option<TrainSummary>, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let echo = out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml_string()).map_err(io_err(&echo))?;
    if cfg.evolution.frame_budget == 0 {
        return Ok(None);
    }
    let seeds = seed_list(cfg);
    let mut runs = Vec::new();
    for &s in &seeds {
        let mut c = cfg.clone();
        c.evolution.seed = s;
        let o = run_single(&c, Some(&out.join(format!("seed_{s}"))))?;
        runs.extend(o.result);
    }
    let summary = TrainSummary {
        env: cfg.env.id.to_string(),
        mode: cfg.evolution.mode.to_string(),
        frame_budget: cfg.evolution.frame_budget,
        seeds,
        test_fitness: stats(&runs.iter().map(|r| r.test_fitness).collect::<Vec<_>>()),
        last_best: stats(&runs.iter().map(|r| r.last_best).collect::<Vec<_>>()),
        runs,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(Some(summary))
}

/// Reads a `generations.jsonl` stream.
pub fn read_reports(path: &Path) -> Result<Vec<GenerationReport>, ExperimentError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| ExperimentError::Record {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// One point of a learning curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub label: String,
    pub seed: u64,
    pub generation: u64,
    pub frames: u64,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub rl_episode_reward: f64,
    pub rl_status: String,
}

fn status_name(s: RlStatus) -> &'static str {
    match s {
        RlStatus::Elite => "elite",
        RlStatus::Selected => "selected",
        RlStatus::Discarded => "discarded",
        RlStatus::NotSynced => "not_synced",
    }
}

pub fn curve(label: &str, seed: u64, reports: &[GenerationReport]) -> Vec<CurvePoint> {
    reports
        .iter()
        .map(|r| CurvePoint {
            label: label.into(),
            seed,
            generation: r.generation,
            frames: r.frames,
            best_fitness: r.best_fitness,
            mean_fitness: r.mean_fitness,
            rl_episode_reward: r.rl_episode_reward,
            rl_status: status_name(r.rl_status).into(),
        })
        .collect()
}

/// Mean best fitness over the generations that end within the first third
/// of the frame budget (at least the first generation).
pub fn early_phase_mean(reports: &[GenerationReport], frame_budget: u64) -> f64 {
    let cut = frame_budget / 3;
    let early: Vec<f64> = reports
        .iter()
        .enumerate()
        .filter(|(i, r)| *i == 0 || r.frames <= cut)
        .map(|(_, r)| r.best_fitness)
        .collect();
    early.iter().sum::<f64>() / early.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionModeResult {
    pub selection: String,
    /// Per seed, mean best fitness over the first third of the budget.
    pub early_means: Vec<f64>,
    /// Per seed, champion fitness on held-out episodes.
    pub final_test: Vec<f64>,
    pub early_mean: f64,
    pub final_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionComparison {
    pub env: String,
    pub mode: String,
    pub frame_budget: u64,
    pub early_phase_frames: u64,
    pub seeds: Vec<u64>,
    pub greedy: SelectionModeResult,
    pub distance: SelectionModeResult,
    /// "greedy", "distance" or "tie" on the early-phase mean.
    pub better_early: String,
}

/// `selection-compare`: paired greedy and distance runs on the same seeds.
/// Writes `curves.csv`, `selection_compare.json` and the config echo.
pub fn selection_compare(cfg: &RunConfig, out: &Path) -> Result<SelectionComparison, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let echo = out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml_string()).map_err(io_err(&echo))?;
    let seeds = seed_list(cfg);
    let mut curves = Vec::new();
    let mut per_mode = Vec::new();
    for sel in [SelectionMode::Greedy, SelectionMode::Distance] {
        let label = match sel {
            SelectionMode::Greedy => "greedy",
            SelectionMode::Distance => "distance",
        };
        let (mut early, mut fin) = (Vec::new(), Vec::new());
        for &s in &seeds {
            let mut c = cfg.clone();
            c.evolution.seed = s;
            c.evolution.selection = sel;
            let o = run_single(&c, Some(&out.join(format!("{label}/seed_{s}"))))?;
            early.push(early_phase_mean(&o.reports, cfg.evolution.frame_budget));
            fin.push(o.result.map_or(f64::NAN, |r| r.test_fitness));
            curves.extend(curve(label, s, &o.reports));
        }
        per_mode.push(SelectionModeResult {
            selection: label.into(),
            early_mean: stats(&early).mean,
            final_mean: stats(&fin).mean,
            early_means: early,
            final_test: fin,
        });
    }
    analysis::write_rows_csv(&out.join("curves.csv"), &curves)?;
    let distance = per_mode.pop().expect("two modes");
    let greedy = per_mode.pop().expect("two modes");
    let better_early = if greedy.early_mean > distance.early_mean {
        "greedy"
    } else if distance.early_mean > greedy.early_mean {
        "distance"
    } else {
        "tie"
    };
    let report = SelectionComparison {
        env: cfg.env.id.to_string(),
        mode: cfg.evolution.mode.to_string(),
        frame_budget: cfg.evolution.frame_budget,
        early_phase_frames: cfg.evolution.frame_budget / 3,
        seeds,
        better_early: better_early.into(),
        greedy,
        distance,
    };
    write_json(&out.join("selection_compare.json"), &report)?;
    Ok(report)
}

/// Cumulative RL-clone outcome rates after each generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub seed: String,
    pub generation: u64,
    pub frames: u64,
    pub synced: usize,
    pub elite: f64,
    pub selected: f64,
    pub discarded: f64,
}

/// `export-plots`: finds every `generations.jsonl` below `run_dir` and writes
/// `learning_curve.csv` and `rl_rates.csv` into `<run_dir>/plots/`.
pub fn export_plots(run_dir: &Path) -> Result<PathBuf, ExperimentError> {
    let mut streams = Vec::new();
    collect_streams(run_dir, &mut streams)?;
    streams.sort();
    if streams.is_empty() {
        return Err(ExperimentError::NoReports(run_dir.to_path_buf()));
    }
    let mut points = Vec::new();
    let mut rates = Vec::new();
    for path in &streams {
        let rel = path
            .parent()
            .and_then(|p| p.strip_prefix(run_dir).ok())
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let label = if rel.is_empty() { ".".to_string() } else { rel };
        let reports = read_reports(path)?;
        for (i, r) in reports.iter().enumerate() {
            let rr = evolution::track_rl_status(reports[..=i].iter().map(|r| &r.rl_status));
            rates.push(RatePoint {
                seed: label.clone(),
                generation: r.generation,
                frames: r.frames,
                synced: rr.synced,
                elite: rr.elite,
                selected: rr.selected,
                discarded: rr.discarded,
            });
        }
        let mut c = curve(&label, 0, &reports);
        for p in &mut c {
            p.seed = label_seed(&label);
        }
        points.extend(c);
    }
    let plots = run_dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(io_err(&plots))?;
    analysis::write_rows_csv(&plots.join("learning_curve.csv"), &points)?;
    analysis::write_rows_csv(&plots.join("rl_rates.csv"), &rates)?;
    Ok(plots)
}

/// Seed number from a `seed_<s>` path component, 0 when absent.
fn label_seed(label: &str) -> u64 {
    label
        .rsplit('/')
        .find_map(|c| c.strip_prefix("seed_").and_then(|s| s.parse().ok()))
        .unwrap_or(0)
}

fn collect_streams(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        if path.is_dir() {
            if path.file_name().is_some_and(|n| n == "plots") {
                continue;
            }
            collect_streams(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "generations.jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

/// Parents (and optionally a critic) for the operator benches: loaded from
/// `fixtures` when given, otherwise trained fresh and saved under
/// `<out>/parents/` so the bench can be replayed.
pub fn bench_parents(
    cfg: &RunConfig,
    count: usize,
    fixtures: Option<&Path>,
    out: &Path,
) -> Result<Vec<crate::operators::Agent>, ExperimentError> {
    if let Some(dir) = fixtures {
        let mut parents = Vec::new();
        for i in 0.. {
            let d = dir.join(format!("parent_{i}"));
            if !d.exists() {
                break;
            }
            parents.push(bench::load_agent(&d)?);
        }
        if parents.len() < count {
            return Err(BenchError::TooFewParents {
                needed: count,
                got: parents.len(),
            }
            .into());
        }
        parents.truncate(count);
        return Ok(parents);
    }
    let parents = bench::trained_parents(
        cfg.env.id,
        &cfg.network.hidden,
        cfg.evolution.memory_capacity,
        &cfg.bench,
        cfg.evolution.seed,
        count,
    )?;
    for (i, p) in parents.iter().enumerate() {
        bench::save_agent(p, &out.join(format!("parents/parent_{i}")))?;
    }
    Ok(parents)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossoverBenchSummary {
    pub env: String,
    pub pairs: usize,
    pub summaries: Vec<bench::OperatorSummary>,
    pub identical_pair_ratio: Option<f64>,
}

/// Normalized-fitness row with its pair index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFitnessRow {
    pub pair: usize,
    pub label: String,
    pub operator: String,
    pub fitness: f64,
    pub normalized: f64,
    pub absolute: bool,
}

/// `crossover-bench`: both crossovers on `bench.pairs` random pairs.
/// Writes `crossover_rows.csv`, `normalized_fitness.csv`,
/// `crossover_summary.json` and, per pair, visitation points and density
/// grids under `visitation/`.
pub fn crossover_bench_cmd(
    cfg: &RunConfig,
    fixtures: Option<&Path>,
    out: &Path,
) -> Result<bench::CrossoverReport, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let echo = out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml_string()).map_err(io_err(&echo))?;
    let pool = cfg.bench.parents.max(2);
    let parents = bench_parents(cfg, pool, fixtures, out)?;
    let critic_path = fixtures.map(|d| d.join("critic.json")).filter(|p| p.exists());
    let critic = match critic_path {
        Some(p) => crate::rl::RlAgent::load(&p, 1).map_err(EvolutionError::from)?,
        None => {
            let c = bench::train_critic(cfg.env.id, &cfg.network.hidden, &parents, &cfg.rl, &cfg.bench, cfg.evolution.seed)?;
            let p = out.join("parents/critic.json");
            std::fs::create_dir_all(out.join("parents")).map_err(io_err(out))?;
            c.save(&p).map_err(EvolutionError::from)?;
            c
        }
    };
    let report = bench::crossover_bench(
        cfg.env.id,
        &parents,
        &critic,
        &cfg.crossover,
        &cfg.bench,
        cfg.evolution.seed,
        true,
        true,
    )?;
    analysis::write_rows_csv(&out.join("crossover_rows.csv"), &report.rows)?;

    let mut table = Vec::new();
    for p in 0..cfg.bench.pairs {
        let rows: Vec<&bench::CrossoverRow> = report.rows.iter().filter(|r| r.pair == p).collect();
        let Some(first) = rows.first() else { continue };
        let children: Vec<(String, f64)> = rows.iter().map(|r| (r.operator.clone(), r.child_fitness)).collect();
        let t = analysis::normalized_offspring_fitness(first.parent1_fitness, first.parent2_fitness, &children);
        table.extend(t.rows.into_iter().map(|r| PairFitnessRow {
            pair: p,
            label: r.label,
            operator: r.operator,
            fitness: r.fitness,
            normalized: r.normalized,
            absolute: t.absolute,
        }));
    }
    analysis::write_rows_csv(&out.join("normalized_fitness.csv"), &table)?;

    let vis = out.join("visitation");
    std::fs::create_dir_all(&vis).map_err(io_err(&vis))?;
    for p in 0..cfg.bench.pairs {
        let samples: Vec<&(usize, String, analysis::VisitationSample)> =
            report.visitation.iter().filter(|v| v.0 == p).collect();
        let models = samples
            .iter()
            .map(|(_, _, s)| analysis::Kde::from_sample(s, None))
            .collect::<Result<Vec<_>, _>>()?;
        if models.is_empty() {
            continue;
        }
        let refs: Vec<&analysis::Kde> = models.iter().collect();
        let grid = analysis::Grid2d::covering(&refs, cfg.bench.grid_cells)?;
        for ((_, role, sample), model) in samples.iter().zip(&models) {
            analysis::write_visitation_csv(&vis.join(format!("pair_{p}_{role}_states.csv")), sample)?;
            analysis::write_density_csv(&vis.join(format!("pair_{p}_{role}_density.csv")), &grid, &grid.evaluate(model))?;
        }
    }
    write_json(
        &out.join("crossover_summary.json"),
        &CrossoverBenchSummary {
            env: cfg.env.id.to_string(),
            pairs: cfg.bench.pairs,
            summaries: report.summaries.clone(),
            identical_pair_ratio: report.identical_pair_ratio,
        },
    )?;
    Ok(report)
}

/// `mutation-bench`: proximal vs Gaussian mutants of `bench.parents` parents
/// plus the magnitude sweep. Writes `mutation_rows.csv`, `sweep.csv` and
/// `mutation_summary.json`.
pub fn mutation_bench_cmd(
    cfg: &RunConfig,
    fixtures: Option<&Path>,
    out: &Path,
) -> Result<bench::MutationReport, ExperimentError> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let echo = out.join("config.toml");
    std::fs::write(&echo, cfg.to_toml_string()).map_err(io_err(&echo))?;
    let parents = bench_parents(cfg, cfg.bench.parents, fixtures, out)?;
    let report = bench::mutation_bench(cfg.env.id, &parents, &cfg.mutation, &cfg.bench, cfg.evolution.seed)?;
    analysis::write_rows_csv(&out.join("mutation_rows.csv"), &report.rows)?;
    analysis::write_rows_csv(&out.join("sweep.csv"), &report.sweep)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        env: String,
        parents: usize,
        sigma: f64,
        summaries: &'a [bench::MutationSummary],
        sweep: &'a [bench::SweepSummary],
    }
    write_json(
        &out.join("mutation_summary.json"),
        &Summary {
            env: cfg.env.id.to_string(),
            parents: parents.len(),
            sigma: cfg.mutation.sigma,
            summaries: &report.summaries,
            sweep: &report.sweep_summary,
        },
    )?;
    Ok(report)
}
