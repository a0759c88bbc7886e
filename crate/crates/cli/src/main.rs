//! `dfgr`: prepare data, run class-incremental replay experiments, and
//! render reports from persisted run records.

mod config;
mod report;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use config::{parse_config, serialize_config, Balance, ExperimentConfig, Method};
use dfgr_core::dataset::{self, DatasetSplit, TaskSchedule};
use dfgr_core::trainer::{self, TaskResult};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "dfgr",
    about = "Data-free generative replay for class-incremental learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check dataset files and write a preprocessed split cache.
    Prepare {
        /// Dataset name (mnist or fashion_mnist).
        #[arg(long, default_value = "mnist")]
        dataset: String,
        /// Directory holding the IDX files.
        #[arg(long)]
        data_dir: PathBuf,
        /// Where to put the cache (defaults to `<data_dir>/cache`).
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Seed recorded in the cache manifest.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the experiment described by a config file.
    Run {
        /// Path to a `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's repeat count.
        #[arg(long)]
        repeats: Option<usize>,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the small CPU-scale profile regardless of the config.
        #[arg(long)]
        desk_scale: bool,
    },
    /// Render tables and plots from completed run directories.
    Report {
        /// One or more run directories written by `run`.
        #[arg(long, required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Output directory for tables and plots.
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn resolve_data_dir(configured: &Path) -> PathBuf {
    match std::env::var("DFGR_DATA_DIR") {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => configured.to_path_buf(),
    }
}

fn load_dataset(data_dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let (ti, tl) = dataset::mnist_paths(data_dir, true)
        .with_context(|| format!("training files under {}", data_dir.display()))?;
    let train = dataset::preprocess(&dataset::load_idx(&ti, &tl)?)?;
    let (ei, el) = dataset::mnist_paths(data_dir, false)
        .with_context(|| format!("test files under {}", data_dir.display()))?;
    let test = dataset::preprocess(&dataset::load_idx(&ei, &el)?)?;
    Ok((train, test))
}

fn cmd_prepare(dataset_name: &str, data_dir: &Path, cache_dir: Option<PathBuf>, seed: u64) -> Result<()> {
    if !matches!(dataset_name, "mnist" | "fashion_mnist") {
        bail!("unknown dataset `{dataset_name}`; expected mnist or fashion_mnist");
    }
    let data_dir = resolve_data_dir(data_dir);
    let (train, test) = load_dataset(&data_dir)?;
    println!(
        "{dataset_name}: {} training images, {} test images, classes {:?}",
        train.len(),
        test.len(),
        train.classes()
    );
    let cache = cache_dir.unwrap_or_else(|| data_dir.join("cache"));
    let schedule_hash = TaskSchedule::balanced().content_hash();
    dataset::save_split_cache(&train, &cache.join("train"), dataset_name, seed, schedule_hash)?;
    dataset::save_split_cache(&test, &cache.join("test"), dataset_name, seed, schedule_hash)?;
    println!("cache written to {}", cache.display());
    Ok(())
}

fn run_once(
    config: &ExperimentConfig,
    train: &DatasetSplit,
    test: &DatasetSplit,
    schedule: &TaskSchedule,
    seed: u64,
    run_dir: &Path,
) -> Result<Vec<TaskResult>> {
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    let sizes = config.model_sizes();
    let results = match config.method {
        Method::Dfgr => trainer::run_schedule(train, test, schedule, &sizes, &train_cfg, Some(run_dir))?,
        Method::Naive => trainer::naive_baseline(
            train,
            test,
            schedule,
            &sizes.classifier,
            &train_cfg,
            Some(run_dir),
        )?,
    };
    Ok(results)
}

fn cmd_run(config_path: &Path, repeats: Option<usize>, seed: Option<u64>, desk: bool) -> Result<()> {
    let mut config = parse_config(config_path).map_err(|e| anyhow::anyhow!(e.to_string()))?;
    if desk && !config.desk_scale {
        // same switch the config key makes, from the command line
        let text = format!("desk_scale = true\n{}", fs::read_to_string(config_path)?);
        config = config::parse_config_text(&text).map_err(|e| anyhow::anyhow!(e.to_string()))?;
        config.desk_scale = true;
    }
    if let Some(r) = repeats {
        config.repeats = r;
    }
    if let Some(s) = seed {
        config.train.seed = s;
    }

    let run_dir = config.run_dir.clone();
    fs::create_dir_all(&run_dir)?;
    fs::write(run_dir.join("config.txt"), serialize_config(&config))?;

    match execute(&config, &run_dir) {
        Ok(()) => Ok(()),
        Err(e) => {
            // leave partial logs in place and mark the run as failed
            let _ = fs::write(run_dir.join("FAILED"), format!("{e:#}\n"));
            Err(e)
        }
    }
}

fn execute(config: &ExperimentConfig, run_dir: &Path) -> Result<()> {
    let data_dir = resolve_data_dir(&config.data_dir);
    let (mut train, test) = load_dataset(&data_dir)?;
    if config.train_cap_per_class > 0 {
        train = dataset::subsample_per_class(&train, config.train_cap_per_class, config.train.seed)?;
    }
    let schedule = match config.balance {
        Balance::Balanced => TaskSchedule::balanced(),
        Balance::Imbalanced => TaskSchedule::imbalanced(),
    };

    let start = Instant::now();
    let mut finals = Vec::new();
    let mut runtimes = Vec::new();
    for repeat in 0..config.repeats {
        let seed = config.train.seed + repeat as u64;
        let repeat_dir = run_dir.join(format!("repeat_{repeat}"));
        let t0 = Instant::now();
        let results = run_once(config, &train, &test, &schedule, seed, &repeat_dir)?;
        let secs = t0.elapsed().as_secs_f64();
        let last = results.last().expect("at least one task");
        println!(
            "repeat {repeat} (seed {seed}): final accuracy {:.4} over {} tasks in {:.1}s",
            last.average_accuracy,
            results.len(),
            secs
        );
        for r in &results {
            println!(
                "  task {}: avg {:.4}, classifier epochs {}, generator epochs {}",
                r.task_index, r.average_accuracy, r.classifier_epochs, r.generator_epochs
            );
        }
        finals.push(last.average_accuracy);
        runtimes.push(secs);
    }

    let mean = finals.iter().sum::<f64>() / finals.len() as f64;
    let mean_runtime = runtimes.iter().sum::<f64>() / runtimes.len() as f64;
    let label = match config.method {
        Method::Dfgr => config.ablation.name().to_string(),
        Method::Naive => "naive".to_string(),
    };
    let mut report = String::from("run_report v1\n");
    let _ = writeln!(report, "label = {label}");
    let _ = writeln!(report, "method = {}", config.method.as_str());
    let _ = writeln!(report, "dataset = {}", config.dataset.as_str());
    let _ = writeln!(report, "balance = {}", config.balance.as_str());
    let _ = writeln!(report, "repeats = {}", config.repeats);
    let _ = writeln!(report, "final_accuracy = {mean:.6}");
    for (i, acc) in finals.iter().enumerate() {
        let _ = writeln!(report, "final_accuracy_repeat_{i} = {acc:.6}");
    }
    let _ = writeln!(report, "average_runtime_secs = {mean_runtime:.1}");
    let _ = writeln!(
        report,
        "config_hash = {:016x}",
        trainer::config_hash(&config.train)
    );
    fs::write(run_dir.join("report.txt"), report)?;
    println!(
        "mean final accuracy {:.4} ({} repeats) in {:.1}s total; artifacts in {}",
        mean,
        config.repeats,
        start.elapsed().as_secs_f64(),
        run_dir.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Prepare {
            dataset,
            data_dir,
            cache_dir,
            seed,
        } => cmd_prepare(&dataset, &data_dir, cache_dir, seed),
        Command::Run {
            config,
            repeats,
            seed,
            desk_scale,
        } => cmd_run(&config, repeats, seed, desk_scale),
        Command::Report { runs, out } => report::write_report(&runs, &out),
    }
}
