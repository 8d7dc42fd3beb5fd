//! Cost-versus-frames benchmarks of the three attention layouts.
//!
//! Each configuration runs a one-layer model forward on a fixed spatial grid
//! while the number of frames grows. Wall-clock is the median of repeated
//! runs; memory is the tensor-byte high-water mark of the calling thread.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use crate::attention::VideoTensor;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::model::{MoMaModel, Mode};
use crate::tensor::{memory, seeded_rng, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchMethod {
    /// One attention window spanning every token of the clip.
    FullAttention,
    /// Attention restricted to each frame.
    PerFrame,
    /// Small spatial windows plus the SSM adapter.
    DivideModulate,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 3] = [BenchMethod::FullAttention, BenchMethod::PerFrame, BenchMethod::DivideModulate];

    pub fn as_str(&self) -> &'static str {
        match self {
            BenchMethod::FullAttention => "full-attn",
            BenchMethod::PerFrame => "per-frame-attn",
            BenchMethod::DivideModulate => "divide+modulate",
        }
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" | "full-attn" => Ok(BenchMethod::FullAttention),
            "per-frame" | "per-frame-attn" | "frame" => Ok(BenchMethod::PerFrame),
            "divide" | "divide+modulate" | "moma" => Ok(BenchMethod::DivideModulate),
            other => Err(Error::Config(format!(
                "unknown bench method {other:?}; expected full, per-frame or divide"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Token grid height and width (the model uses one-pixel patches).
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    /// Square spatial window of the divide+modulate layout.
    pub window: usize,
    pub ssm_state: usize,
    pub repeats: usize,
    /// Tensor-byte budget; a run whose peak exceeds it is reported as out of memory.
    pub memory_limit: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 8,
            width: 8,
            channels: 16,
            heads: 2,
            window: 4,
            ssm_state: 8,
            repeats: 3,
            memory_limit: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    fn model_config(&self, method: BenchMethod, frames: usize) -> ModelConfig {
        let window = match method {
            BenchMethod::FullAttention => format!("{frames}x{}x{}", self.height, self.width),
            _ => format!("{0}x{0}", self.window),
        };
        ModelConfig {
            channels: self.channels,
            heads: self.heads,
            layers: 1,
            patch: 1,
            frames,
            height: self.height,
            width: self.width,
            in_channels: 1,
            classes: 2,
            pattern: "[TM]1".into(),
            window,
            fusion: FusionKind::SeqMod,
            ssm_state: self.ssm_state,
            ..ModelConfig::default()
        }
    }

    fn mode(method: BenchMethod) -> Mode {
        match method {
            BenchMethod::FullAttention => Mode::Backbone,
            BenchMethod::PerFrame => Mode::Teacher,
            BenchMethod::DivideModulate => Mode::Adapted,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: BenchMethod,
    pub frames: usize,
    pub tokens: usize,
    /// Closed-form multiply-accumulate count of one forward pass.
    pub flops: u64,
    /// Tensor-byte high-water mark of one forward pass; `None` when skipped.
    pub peak_bytes: Option<usize>,
    /// Median forward wall-clock in seconds; `None` when out of memory.
    pub seconds: Option<f64>,
    pub oom: bool,
}

/// A straight-line fit of `ln y` against `ln x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares log-log fit; `None` with fewer than two usable points.
pub fn fit_loglog(points: &[(f64, f64)]) -> Option<LogLogFit> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LogLogFit { slope, intercept: my - slope * mx, r_squared })
}

/// Which column a slope is fitted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMetric {
    Seconds,
    PeakBytes,
    Flops,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn rows_for(&self, method: BenchMethod) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Log-log slope of `metric` against frames over the rows that completed.
    pub fn slope(&self, method: BenchMethod, metric: CostMetric) -> Option<LogLogFit> {
        let points: Vec<(f64, f64)> = self
            .rows_for(method)
            .filter(|r| !r.oom)
            .filter_map(|r| {
                let y = match metric {
                    CostMetric::Seconds => r.seconds?,
                    CostMetric::PeakBytes => r.peak_bytes? as f64,
                    CostMetric::Flops => r.flops as f64,
                };
                Some((r.frames as f64, y))
            })
            .collect();
        fit_loglog(&points)
    }
}

/// Closed-form forward MAC count of `method` at `frames` frames.
pub fn bench_flops(cfg: &BenchConfig, method: BenchMethod, frames: usize) -> Result<u64> {
    let model = MoMaModel::new(&cfg.model_config(method, frames), cfg.seed)?;
    Ok(model.flop_count_in(BenchConfig::mode(method)))
}

/// One forward pass; returns elapsed seconds and the tensor-byte peak.
fn measure(model: &MoMaModel, video: &VideoTensor, mode: Mode) -> Result<(f64, usize)> {
    memory::reset_peak();
    let base = memory::live_bytes();
    let start = Instant::now();
    {
        let tape = Tape::new();
        let p = model.store().bind_constant(&tape);
        let out = model.forward(&p, &tape, video, mode)?;
        std::hint::black_box(out.logits.value());
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok((seconds, memory::peak_bytes().saturating_sub(base)))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Benchmarks every method at every frame count in `frames` (ascending).
///
/// Once a method exceeds the memory budget, it and every longer clip for
/// that method are reported as out of memory without running.
pub fn bench_scaling(cfg: &BenchConfig, methods: &[BenchMethod], frames: &[usize]) -> Result<BenchReport> {
    if frames.is_empty() || frames.windows(2).any(|w| w[0] >= w[1]) || frames[0] == 0 {
        return Err(Error::Config(format!("frame list must be positive and strictly ascending, got {frames:?}")));
    }
    if cfg.repeats == 0 {
        return Err(Error::Config("bench needs at least one repeat".into()));
    }
    let mut rows = Vec::with_capacity(methods.len() * frames.len());
    for &method in methods {
        let mut out_of_memory = false;
        for &t in frames {
            let model = MoMaModel::new(&cfg.model_config(method, t), cfg.seed)?;
            let mode = BenchConfig::mode(method);
            let grid = model.grid();
            let mut row = BenchRow {
                method,
                frames: t,
                tokens: grid.tokens(),
                flops: model.flop_count_in(mode),
                peak_bytes: None,
                seconds: None,
                oom: out_of_memory,
            };
            if !out_of_memory {
                let pixels = Tensor::uniform(&[grid.tokens(), 1], -1.0, 1.0, &mut seeded_rng(cfg.seed, 30 + t as u64));
                let video = VideoTensor::new(grid, pixels)?;
                // The first run also warms caches and is not timed.
                let (_, peak) = measure(&model, &video, mode)?;
                row.peak_bytes = Some(peak);
                if cfg.memory_limit.is_some_and(|limit| peak > limit) {
                    out_of_memory = true;
                    row.oom = true;
                } else {
                    let times = (0..cfg.repeats)
                        .map(|_| measure(&model, &video, mode).map(|m| m.0))
                        .collect::<Result<Vec<_>>>()?;
                    row.seconds = Some(median(times));
                }
            }
            rows.push(row);
        }
    }
    Ok(BenchReport { rows })
}

/// Chunked selective-scan time for each sequence length (hidden width 16, state 8).
///
/// Reports the fastest of `repeats` timed runs after one untimed warm-up; on
/// a shared core the minimum is far less sensitive to preemption than the median.
pub fn bench_scan_lengths(lengths: &[usize], chunk: usize, repeats: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let (e, s) = (16, 8);
    let mut rng = seeded_rng(seed, 31);
    lengths
        .iter()
        .map(|&l| {
            let u = Tensor::uniform(&[l, e], -1.0, 1.0, &mut rng);
            let delta = Tensor::uniform(&[l, e], 0.01, 0.5, &mut rng);
            let a = Tensor::uniform(&[e, s], -2.0, -0.1, &mut rng);
            let b = Tensor::uniform(&[l, s], -1.0, 1.0, &mut rng);
            let c = Tensor::uniform(&[l, s], -1.0, 1.0, &mut rng);
            let d = Tensor::uniform(&[e], -1.0, 1.0, &mut rng);
            let run = || crate::ssm::selective_scan_chunked(&u, &delta, &a, &b, &c, &d, chunk);
            run()?;
            let mut best = f64::INFINITY;
            for _ in 0..repeats.max(1) {
                let start = Instant::now();
                std::hint::black_box(run()?);
                best = best.min(start.elapsed().as_secs_f64());
            }
            Ok((l, best))
        })
        .collect()
}
