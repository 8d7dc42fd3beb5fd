//! CSV emission. Every file starts with a `# moma <schema> csv v1` comment so
//! readers can tell the layout apart; floats use Rust's shortest round-trip
//! formatting, which keeps reruns byte-identical.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::model::train::EpochMetrics;

use super::ablation::AblationRow;
use super::bench::BenchReport;

pub const SCHEMA_VERSION: u32 = 1;

fn to_csv<R: Serialize>(schema: &str, rows: impl IntoIterator<Item = R>, empty_header: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut any = false;
    for row in rows {
        w.serialize(row)?;
        any = true;
    }
    if !any {
        w.write_record(empty_header)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is UTF-8");
    Ok(format!("# moma {schema} csv v{SCHEMA_VERSION}\n{body}"))
}

#[derive(Serialize)]
struct MetricsRecord {
    epoch: usize,
    train_loss: f64,
    train_accuracy: f64,
    val_accuracy: f64,
    grad_norm: f64,
}

const METRICS_HEADER: [&str; 5] = ["epoch", "train_loss", "train_accuracy", "val_accuracy", "grad_norm"];

pub fn metrics_csv(epochs: &[EpochMetrics]) -> Result<String> {
    let rows = epochs.iter().map(|e| MetricsRecord {
        epoch: e.epoch,
        train_loss: e.train_loss,
        train_accuracy: e.train_accuracy,
        val_accuracy: e.val_accuracy,
        grad_norm: e.grad_norm,
    });
    to_csv("metrics", rows, &METRICS_HEADER)
}

#[derive(Serialize)]
struct BenchRecord {
    method: &'static str,
    frames: usize,
    tokens: usize,
    flops: u64,
    peak_bytes: Option<usize>,
    seconds_median: Option<f64>,
    oom: bool,
}

const BENCH_HEADER: [&str; 7] = ["method", "frames", "tokens", "flops", "peak_bytes", "seconds_median", "oom"];

pub fn bench_csv(report: &BenchReport) -> Result<String> {
    let rows = report.rows.iter().map(|r| BenchRecord {
        method: r.method.as_str(),
        frames: r.frames,
        tokens: r.tokens,
        flops: r.flops,
        peak_bytes: r.peak_bytes,
        seconds_median: r.seconds,
        oom: r.oom,
    });
    to_csv("bench", rows, &BENCH_HEADER)
}

#[derive(Serialize)]
struct AblationRecord<'a> {
    matrix: &'static str,
    label: &'a str,
    setting: &'a str,
    seed: u64,
    val_accuracy: Option<f64>,
    trainable_params: Option<usize>,
    flops: Option<u64>,
    error: Option<&'a str>,
}

const ABLATION_HEADER: [&str; 8] =
    ["matrix", "label", "setting", "seed", "val_accuracy", "trainable_params", "flops", "error"];

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let records = rows.iter().map(|r| AblationRecord {
        matrix: r.matrix.as_str(),
        label: &r.label,
        setting: &r.setting,
        seed: r.seed,
        val_accuracy: r.val_accuracy,
        trainable_params: r.trainable_params,
        flops: r.flops,
        error: r.error.as_deref(),
    });
    to_csv("ablation", records, &ABLATION_HEADER)
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_report(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}
