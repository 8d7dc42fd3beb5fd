//! End-to-end acceptance run: one PASS/FAIL line per criterion, non-zero exit
//! if any fails. Built without the libtest harness so the lines always print.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use moma::attention::{
    divide, merge_windows, split_windows, window_attention, AttentionWeights, Grid, VideoTensor, WindowSpec,
};
use moma::config::{ExperimentConfig, TaskKind};
use moma::error::Error;
use moma::fusion::FusionKind;
use moma::harness::bench::{bench_scaling, BenchConfig, BenchMethod, CostMetric};
use moma::harness::data::{gen_task, ClipShape, Dataset};
use moma::harness::gradcheck::run_suite;
use moma::harness::oracle::run_scan_oracle;
use moma::model::train::{teacher_features, train_step, AdamW, Sample};
use moma::model::{LayerPattern, LayerSlot, MoMaModel, Mode};
use moma::params::ParamStore;
use moma::ssm::selective_scan_chunked;
use moma::tensor::{seeded_rng, Tensor};
use rand::Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget_secs: u64) -> Result<(), String> {
    if elapsed.as_secs_f64() < budget_secs as f64 {
        Ok(())
    } else {
        Err(format!("took {:.1}s, budget {budget_secs}s", elapsed.as_secs_f64()))
    }
}

fn random_video(grid: Grid, channels: usize, seed: u64) -> VideoTensor {
    VideoTensor::new(grid, Tensor::uniform(&[grid.tokens(), channels], -1.0, 1.0, &mut seeded_rng(seed, 90))).unwrap()
}

/// Straight-line recurrence with the library exponential, independent of the
/// scan kernels under test.
fn sequential_scan(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Vec<f64> {
    let (len, e) = u.dims2().unwrap();
    let s = b.dims2().unwrap().1;
    let (u, delta, a, b, c, d) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let mut h = vec![0.0; e * s];
    let mut y = vec![0.0; len * e];
    for t in 0..len {
        for ch in 0..e {
            let dt = delta[t * e + ch];
            let mut acc = d[ch] * u[t * e + ch];
            for k in 0..s {
                let state = &mut h[ch * s + k];
                *state = (dt * a[ch * s + k]).exp() * *state + dt * b[t * s + k] * u[t * e + ch];
                acc += c[t * s + k] * *state;
            }
            y[t * e + ch] = acc;
        }
    }
    y
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let report = run_scan_oracle(0, 100, 64).map_err(|e| e.to_string())?;
    let kernel_err = report.max_rel_err();
    // The same case mix again, now against the hand-written recurrence.
    let mut rng = seeded_rng(1, 91);
    let mut recurrence_err = 0.0f64;
    for _ in 0..100 {
        let (len, e, s) = (rng.random_range(1..=64), rng.random_range(1..=8), rng.random_range(1..=8));
        let chunk = rng.random_range(1..=len + 2);
        let mut draw = |shape: &[usize], lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, &mut rng);
        let u = draw(&[len, e], -1.0, 1.0);
        let delta = draw(&[len, e], 1e-3, 1.0);
        let a = draw(&[e, s], -2.0, 1.0).map(|v| -v.exp());
        let (b, c, d) = (draw(&[len, s], -1.0, 1.0), draw(&[len, s], -1.0, 1.0), draw(&[e], -1.0, 1.0));
        let fast = selective_scan_chunked(&u, &delta, &a, &b, &c, &d, chunk).map_err(|e| e.to_string())?;
        let slow = sequential_scan(&u, &delta, &a, &b, &c, &d);
        let scale = slow.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let diff = fast.data().iter().zip(&slow).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        recurrence_err = recurrence_err.max(diff / scale);
    }
    within(start.elapsed(), 10)?;
    ensure(
        report.cases.len() == 100 && kernel_err < 1e-10 && recurrence_err < 1e-10,
        format!(
            "100+100 cases, chunked vs reference {kernel_err:.1e}, vs recurrence {recurrence_err:.1e}, {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let results = run_suite(0).map_err(|e| e.to_string())?;
    within(start.elapsed(), 60)?;
    let required = ["matmul", "softmax", "attention", "scan", "ssm_forward", "seqmod", "full_layer"];
    let missing: Vec<&str> = required.iter().copied().filter(|r| !results.iter().any(|c| c.name == *r)).collect();
    let fusions = results.iter().filter(|c| c.name.starts_with("fusion_")).count();
    let failed: Vec<String> = results.iter().filter(|c| !c.passed()).map(|c| format!("{} {:.1e}", c.name, c.max_rel_err)).collect();
    let worst = results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).unwrap();
    ensure(
        missing.is_empty() && fusions == FusionKind::ALL.len() && failed.is_empty(),
        format!(
            "{} checks, worst {} {:.1e}, missing {missing:?}, failed {failed:?}, {:.1}s",
            results.len(),
            worst.name,
            worst.max_rel_err,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_3() -> Check {
    let mut store = ParamStore::new();
    let weights = AttentionWeights::init(&mut store, "attn", 8, 2, &mut seeded_rng(3, 92)).map_err(|e| e.to_string())?;
    let randomize = |store: &mut ParamStore| {
        let mut rng = seeded_rng(3, 93);
        for id in store.trainable_ids().into_iter().chain(store.frozen_ids()) {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::uniform(&shape, -0.5, 0.5, &mut rng)).unwrap();
        }
    };
    randomize(&mut store);

    let grid = Grid::new(3, 4, 6);
    let video = random_video(grid, 8, 1);
    let divided = divide(&video, WindowSpec::frame(grid), &weights, &store).map_err(|e| e.to_string())?;
    let rows = grid.frame_tokens() * 8;
    let mut frame_diff = 0.0f64;
    for t in 0..grid.frames {
        let frame = Tensor::new(&[grid.frame_tokens(), 8], video.data().data()[t * rows..(t + 1) * rows].to_vec()).unwrap();
        let direct = window_attention(&frame, &weights, &store).map_err(|e| e.to_string())?;
        let got = &divided.data().data()[t * rows..(t + 1) * rows];
        frame_diff = direct.data().iter().zip(got).fold(frame_diff, |m, (a, b)| m.max((a - b).abs()));
    }

    // Perturb one 2x2 window and count changed outputs outside it.
    let grid = Grid::new(2, 4, 4);
    let spec = WindowSpec::square(2);
    let video = random_video(grid, 8, 2);
    let before = divide(&video, spec, &weights, &store).map_err(|e| e.to_string())?;
    let mut data = video.data().clone();
    let inside = |t: usize, h: usize, w: usize| t == 1 && h >= 2 && w < 2;
    for (t, h, w) in (0..2).flat_map(|t| (0..4).flat_map(move |h| (0..4).map(move |w| (t, h, w)))) {
        if inside(t, h, w) {
            let i = grid.index(t, h, w);
            data.data_mut()[i * 8..(i + 1) * 8].iter_mut().for_each(|v| *v += 0.75);
        }
    }
    let after = divide(&VideoTensor::new(grid, data).unwrap(), spec, &weights, &store).map_err(|e| e.to_string())?;
    let (mut leaked, mut moved) = (0, 0);
    for (t, h, w) in (0..2).flat_map(|t| (0..4).flat_map(move |h| (0..4).map(move |w| (t, h, w)))) {
        let i = grid.index(t, h, w);
        let same = before.data().data()[i * 8..(i + 1) * 8] == after.data().data()[i * 8..(i + 1) * 8];
        match (inside(t, h, w), same) {
            (false, false) => leaked += 1,
            (true, false) => moved += 1,
            _ => {}
        }
    }

    let mut round_trips = 0;
    for (grid, spec) in [
        (Grid::new(4, 8, 8), WindowSpec::square(4)),
        (Grid::new(3, 6, 4), WindowSpec::Planar { height: 3, width: 2 }),
        (Grid::new(4, 4, 6), WindowSpec::Cubic { frames: 2, height: 2, width: 3 }),
        (Grid::new(2, 5, 5), WindowSpec::frame(Grid::new(2, 5, 5))),
    ] {
        let video = random_video(grid, 5, round_trips);
        let merged = merge_windows(&split_windows(&video, spec).map_err(|e| e.to_string())?, grid, spec)
            .map_err(|e| e.to_string())?;
        if merged.data().data() == video.data().data() {
            round_trips += 1;
        }
    }
    ensure(
        frame_diff < 1e-10 && leaked == 0 && moved == 4 && round_trips == 4,
        format!(
            "frame window diff {frame_diff:.1e}; perturbed window changed {moved}/4 tokens, \
             tokens outside it {leaked}; exact round trips {round_trips}/4"
        ),
    )
}

/// Desk model with a random head so every pooled feature reaches the logits.
fn desk_model(seed: u64) -> MoMaModel {
    let mut model = MoMaModel::new(&ExperimentConfig::desk_small().model, seed).unwrap();
    let (w, b) = model.head();
    let mut rng = seeded_rng(seed, 94);
    for id in [w, b] {
        let shape = model.store().get(id).shape().to_vec();
        model.store_mut().set(id, Tensor::uniform(&shape, -1.0, 1.0, &mut rng)).unwrap();
    }
    model
}

fn criterion_4() -> Check {
    let mut identity_gap = 0.0f64;
    let mut permutation_gap = 0.0f64;
    let cfg = ExperimentConfig::desk_small().model;
    for seed in 0..3 {
        let model = desk_model(seed);
        let video = random_video(Grid::new(cfg.frames, cfg.height, cfg.width), cfg.in_channels, seed);
        let adapted = model.logits(&video, Mode::Adapted).map_err(|e| e.to_string())?;
        let backbone = model.logits(&video, Mode::Backbone).map_err(|e| e.to_string())?;
        identity_gap = identity_gap.max(adapted.max_abs_diff(&backbone));
        let reversed: Vec<usize> = (0..cfg.frames).rev().collect();
        let mut shuffled: Vec<usize> = (0..cfg.frames).collect();
        shuffled.rotate_left(3);
        for order in [reversed, shuffled] {
            let permuted = model.logits(&video.permute_frames(&order).unwrap(), Mode::Adapted).map_err(|e| e.to_string())?;
            permutation_gap = permutation_gap.max(adapted.max_abs_diff(&permuted));
        }
    }
    ensure(
        identity_gap < 1e-10 && permutation_gap < 1e-10,
        format!("adapted vs backbone {identity_gap:.1e}, frame permutations {permutation_gap:.1e} (3 seeds)"),
    )
}

fn criterion_5() -> Check {
    let cfg = ExperimentConfig::desk_small();
    let data = gen_task(&cfg.task, ClipShape::of(&cfg.model), 0).map_err(|e| e.to_string())?;
    let mut model = MoMaModel::new(&cfg.model, 0).map_err(|e| e.to_string())?;
    let before = model.store().frozen_hash();
    let teachers = teacher_features(&model, &data.train).map_err(|e| e.to_string())?;
    let mut opt = AdamW::new(&model, &cfg.train);
    let batch = cfg.train.batch_size;
    let n = data.train.len();
    for step in 0..100 {
        let items: Vec<(&Sample, &Tensor)> =
            (0..batch).map(|j| (step * batch + j) % n).map(|i| (&data.train[i], &teachers[i])).collect();
        train_step(&mut model, &mut opt, &items, cfg.train.distill_weight).map_err(|e| e.to_string())?;
    }
    let after = model.store().frozen_hash();
    ensure(before == after && opt.steps() == 100, format!("{} steps, frozen sha256 {before} -> {after}", opt.steps()))
}

/// Forward MACs written out from the layer shapes, for comparison with the model's counter.
fn closed_form_flops(cfg: &BenchConfig, method: BenchMethod, frames: usize) -> u64 {
    let n = (frames * cfg.height * cfg.width) as u64;
    let c = cfg.channels as u64;
    let span = match method {
        BenchMethod::FullAttention => n,
        BenchMethod::PerFrame => (cfg.height * cfg.width) as u64,
        BenchMethod::DivideModulate => (cfg.window * cfg.window) as u64,
    };
    let embed_and_head = n * c + c * 2;
    let transformer = 4 * n * c * c + 2 * n * span * c + 8 * n * c * c;
    let ssm = match method {
        BenchMethod::DivideModulate => {
            let (e, s, k, dirs) = (2 * c, cfg.ssm_state as u64, 4, 4);
            n * c * 2 * e + dirs * n * (e * k + e * e + 4 * e * s) + n * e * 2 * c
        }
        _ => 0,
    };
    embed_and_head + transformer + ssm
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let cfg = BenchConfig::default();
    let frames = [4, 8, 16, 32];
    let report = bench_scaling(&cfg, &BenchMethod::ALL, &frames).map_err(|e| e.to_string())?;
    within(start.elapsed(), 300)?;
    let mismatched: Vec<String> = report
        .rows
        .iter()
        .filter(|r| r.flops != closed_form_flops(&cfg, r.method, r.frames))
        .map(|r| format!("{}@{}", r.method.as_str(), r.frames))
        .collect();
    let slope = |m, metric| report.slope(m, metric).map(|f| f.slope).unwrap_or(f64::NAN);
    let full = slope(BenchMethod::FullAttention, CostMetric::PeakBytes);
    let frame = slope(BenchMethod::PerFrame, CostMetric::PeakBytes);
    let ours = slope(BenchMethod::DivideModulate, CostMetric::PeakBytes);
    let timed = (
        slope(BenchMethod::FullAttention, CostMetric::Seconds),
        slope(BenchMethod::DivideModulate, CostMetric::Seconds),
    );
    ensure(
        (1.7..=2.3).contains(&full) && (0.8..=1.2).contains(&ours) && mismatched.is_empty(),
        format!(
            "peak-memory slopes: full {full:.2}, per-frame {frame:.2}, divide+modulate {ours:.2}; \
             wall-clock slopes {:.2} / {:.2}; flop mismatches {mismatched:?}; {:.1}s",
            timed.0,
            timed.1,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn train_once(kind: FusionKind, task: TaskKind, seed: u64) -> Result<f64, String> {
    let mut cfg = ExperimentConfig::desk_small();
    cfg.model.fusion = kind;
    cfg.task.kind = task;
    cfg.train.seed = seed;
    let data: Dataset = gen_task(&cfg.task, ClipShape::of(&cfg.model), seed).map_err(|e| e.to_string())?;
    let mut model = MoMaModel::new(&cfg.model, seed).map_err(|e| e.to_string())?;
    let report = moma::model::train::fit(&mut model, &cfg.train, &data.train, &data.val).map_err(|e| e.to_string())?;
    Ok(report.final_val_accuracy())
}

fn median3(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn criterion_7() -> Check {
    let start = Instant::now();
    let epochs = ExperimentConfig::desk_small().train.epochs;
    let runs = |kind, task| -> Result<Vec<f64>, String> { (0..3).map(|seed| train_once(kind, task, seed)).collect() };
    let skip_motion = runs(FusionKind::Skip, TaskKind::MotionDirection)?;
    let skip_static = runs(FusionKind::Skip, TaskKind::StaticTexture)?;
    let seqmod = runs(FusionKind::SeqMod, TaskKind::MotionDirection)?;
    let add = runs(FusionKind::Add, TaskKind::MotionDirection)?;
    let max = runs(FusionKind::Max, TaskKind::MotionDirection)?;
    within(start.elapsed(), 1800)?;
    let [sm, ss, q, a, m] = [&skip_motion, &skip_static, &seqmod, &add, &max].map(|v| median3(v.to_vec()));
    let show = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    ensure(
        epochs <= 30 && sm <= 0.35 && q >= 0.70 && q >= a && q >= m && ss >= 0.80,
        format!(
            "{epochs} epochs, median val acc over seeds 0-2: motion skip {sm:.3} ({}), seqmod {q:.3} ({}), \
             add {a:.3} ({}), max {m:.3} ({}); static skip {ss:.3} ({}); {:.0}s",
            show(&skip_motion),
            show(&seqmod),
            show(&add),
            show(&max),
            show(&skip_static),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_8() -> Check {
    use LayerSlot::*;
    let plain = Transformer { modulations: 0 };
    let one = Transformer { modulations: 1 };
    let two = Transformer { modulations: 2 };
    let expected: [(&str, Vec<LayerSlot>); 4] = [
        ("[TM]12", vec![one; 12]),
        ("[T]12[M]12", [vec![plain; 12], vec![Standalone; 12]].concat()),
        ("[T]6[TMM]6", [vec![plain; 6], vec![two; 6]].concat()),
        ("[TTMM]6", [plain, two].repeat(6)),
    ];
    let mut parsed = 0;
    for (src, slots) in &expected {
        match LayerPattern::parse(src, 12) {
            Ok(p) if p.slots() == slots.as_slice() => parsed += 1,
            Ok(p) => return Err(format!("{src} expanded to {:?}", p.slots())),
            Err(e) => return Err(format!("{src} rejected: {e}")),
        }
    }
    let malformed = [("[MT]12", 12, 1), ("[M]12[T]12", 12, 1), ("[TM]11", 12, 6), ("[TM]12x", 12, 6)];
    let mut rejected = Vec::new();
    for (src, depth, position) in malformed {
        match LayerPattern::parse(src, depth) {
            Err(Error::Parse { position: p, .. }) if p == position => rejected.push(format!("{src}@{p}")),
            other => return Err(format!("{src}: expected a parse error at {position}, got {other:?}")),
        }
    }
    ensure(parsed == 4, format!("{parsed}/4 reference patterns expand as documented; rejected {}", rejected.join(", ")))
}

const DETERMINISM_CONFIG: &str = r#"
[model]
channels = 8
heads = 2
layers = 1
patch = 4
pattern = "[TM]1"
window = "1x2"
ssm_state = 4

[train]
epochs = 3
batch_size = 4
seed = 11

[task]
samples = 40
"#;

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("determinism.toml");
    std::fs::write(&config, DETERMINISM_CONFIG).map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_moma"))
            .args(["train", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        std::fs::read(Path::new(&out).join("metrics.csv")).map_err(|e| e.to_string())
    };
    let (first, second) = (run("a")?, run("b")?);
    let rows = first.iter().filter(|&&b| b == b'\n').count();
    ensure(first == second && rows > 2, format!("metrics.csv {} bytes, {rows} lines, identical: {}", first.len(), first == second))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("chunked scan oracle", criterion_1),
        ("gradient suite", criterion_2),
        ("divide correctness", criterion_3),
        ("identity at init and frame permutation", criterion_4),
        ("freeze contract", criterion_5),
        ("complexity trend", criterion_6),
        ("temporal-learning separation", criterion_7),
        ("pattern DSL", criterion_8),
        ("determinism", criterion_9),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.is_some_and(|n| n != number) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS criterion {number} ({name}): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {number} ({name}): {detail}");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
