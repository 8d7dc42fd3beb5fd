use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use moma::config::ExperimentConfig;
use moma::harness::ablation::{run_ablation, AblationMatrix};
use moma::harness::bench::{bench_scaling, BenchConfig, BenchMethod, CostMetric};
use moma::harness::data::{gen_task, ClipShape};
use moma::harness::report::{ablation_csv, bench_csv, metrics_csv, write_report};
use moma::harness::{gradcheck, oracle};
use moma::model::train::{accuracy, fit};
use moma::model::{load_checkpoint, save_checkpoint, MoMaModel};
use moma::Error;

#[derive(Parser)]
#[command(name = "moma", version, about = "Frozen video transformer with SSM modulation adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the adapters and head; writes a checkpoint and a metrics CSV.
    Train {
        /// Experiment config (TOML); defaults to the small desk configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Accuracy of a checkpoint on its task's data.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Data seed; defaults to the seed the checkpoint was trained with.
        #[arg(long)]
        data_seed: Option<u64>,
    },
    /// Train every cell of an ablation matrix and write a CSV.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// fusion, window, pattern or all.
        #[arg(long, default_value = "all")]
        matrix: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "runs/ablation.csv")]
        out: PathBuf,
    },
    /// Forward cost against clip length; writes a CSV to stdout or `--out`.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "full,per-frame,divide")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        frames: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Report runs whose tensor peak exceeds this many MiB as out of memory.
        #[arg(long)]
        memory_limit_mb: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Chunked scan against the sequential reference on random problems.
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

fn load_config(path: Option<&Path>) -> moma::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::desk_small()),
    }
}

/// Outcome of a subcommand that ran to completion: whether its checks passed.
type Outcome = moma::Result<bool>;

fn train(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Outcome {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let data = gen_task(&cfg.task, ClipShape::of(&cfg.model), cfg.train.seed)?;
    let mut model = MoMaModel::new(&cfg.model, cfg.train.seed)?;
    let (trainable, frozen) = model.parameter_counts();
    eprintln!("training {trainable} of {} parameters on {} clips", trainable + frozen, data.train.len());
    let report = fit(&mut model, &cfg.train, &data.train, &data.val)?;
    for e in &report.epochs {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}",
            e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy
        );
    }
    write_report(&out.join("metrics.csv"), &metrics_csv(&report.epochs)?)?;
    save_checkpoint(&out.join("checkpoint"), &model, &cfg)?;
    println!("val_accuracy {}", report.final_val_accuracy());
    println!("wrote {}", out.display());
    Ok(true)
}

fn eval(checkpoint: &Path, split: Split, data_seed: Option<u64>) -> Outcome {
    let (model, cfg) = load_checkpoint(checkpoint)?;
    let data = gen_task(&cfg.task, ClipShape::of(&cfg.model), data_seed.unwrap_or(cfg.train.seed))?;
    let samples = match split {
        Split::Train => &data.train,
        Split::Val => &data.val,
    };
    println!("accuracy {} on {} clips", accuracy(&model, samples)?, samples.len());
    Ok(true)
}

fn ablate(config: Option<&Path>, matrix: &str, seeds: &[u64], out: &Path) -> Outcome {
    let cfg = load_config(config)?;
    let matrices = if matrix == "all" {
        vec![AblationMatrix::Fusion, AblationMatrix::Window, AblationMatrix::Pattern]
    } else {
        vec![matrix.parse()?]
    };
    let mut rows = Vec::new();
    for m in matrices {
        rows.extend(run_ablation(&cfg, m, seeds, |row| match (row.val_accuracy, &row.error) {
            (Some(acc), _) => eprintln!("{} {} seed {}: val {acc:.3}", row.matrix, row.label, row.seed),
            (None, e) => eprintln!("{} {} seed {}: failed: {}", row.matrix, row.label, row.seed, e.as_deref().unwrap_or("")),
        }));
    }
    write_report(out, &ablation_csv(&rows)?)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(true)
}

fn bench(methods: &[String], frames: &[usize], repeats: usize, limit_mb: Option<f64>, out: Option<&Path>) -> Outcome {
    let methods = methods.iter().map(|m| m.parse()).collect::<moma::Result<Vec<BenchMethod>>>()?;
    let cfg = BenchConfig {
        repeats,
        memory_limit: limit_mb.map(|mb| (mb * 1024.0 * 1024.0) as usize),
        ..BenchConfig::default()
    };
    let report = bench_scaling(&cfg, &methods, frames)?;
    let csv = bench_csv(&report)?;
    match out {
        Some(path) => write_report(path, &csv)?,
        None => print!("{csv}"),
    }
    for &m in &methods {
        for (metric, name) in [(CostMetric::PeakBytes, "memory"), (CostMetric::Seconds, "time")] {
            if let Some(fit) = report.slope(m, metric) {
                eprintln!("{m} {name} slope {:.3} (R² {:.4})", fit.slope, fit.r_squared);
            }
        }
    }
    Ok(true)
}

fn run_gradcheck(seed: u64) -> Outcome {
    let results = gradcheck::run_suite(seed)?;
    for r in &results {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {:<20} max_rel_err {:.3e} ({} coordinates)", r.name, r.max_rel_err, r.coordinates);
    }
    Ok(results.iter().all(|r| r.passed()))
}

fn run_oracle(seed: u64, cases: usize, max_len: usize) -> Outcome {
    let report = oracle::run_scan_oracle(seed, cases, max_len)?;
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("{verdict} {} cases, max_rel_err {:.3e}", report.cases.len(), report.max_rel_err());
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train { config, seed, out } => train(config.as_deref(), *seed, out),
        Command::Eval { checkpoint, split, data_seed } => eval(checkpoint, *split, *data_seed),
        Command::Ablate { config, matrix, seeds, out } => ablate(config.as_deref(), matrix, seeds, out),
        Command::Bench { methods, frames, repeats, memory_limit_mb, out } => {
            bench(methods, frames, *repeats, *memory_limit_mb, out.as_deref())
        }
        Command::Gradcheck { seed } => run_gradcheck(*seed),
        Command::Oracle { seed, cases, max_len } => run_oracle(*seed, *cases, *max_len),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ (Error::ConfigNotFound(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
