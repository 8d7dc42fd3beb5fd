//! Synthetic clips: a temporally defined task and a static control task.
//!
//! In the motion task a Gaussian blob drifts one pixel per frame on a torus
//! (positions wrap at the borders). The start point is uniform, so every
//! single frame has the same distribution in every class and only the order
//! of frames reveals the direction.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{Grid, VideoTensor};
use crate::config::{ModelConfig, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::model::train::Sample;
use crate::tensor::{seeded_rng, Tensor};

/// Both tasks have four classes.
pub const TASK_CLASSES: usize = 4;

/// Class order of the motion task: (row step, column step) per frame.
pub const DIRECTIONS: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
pub const DIRECTION_NAMES: [&str; 4] = ["up", "down", "left", "right"];

const BLOB_SIGMA: f64 = 1.5;
const TEXTURE_PERIOD: f64 = 6.0;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Clip geometry in pixels, taken from the model configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ClipShape {
    pub fn of(model: &ModelConfig) -> Self {
        Self { frames: model.frames, height: model.height, width: model.width, channels: model.in_channels }
    }

    fn grid(&self) -> Grid {
        Grid::new(self.frames, self.height, self.width)
    }
}

/// Noise-free motion clip of class `label` starting at pixel `(r0, c0)`.
pub fn motion_clip(shape: ClipShape, label: usize, r0: f64, c0: f64) -> Result<VideoTensor> {
    let (dr, dc) = DIRECTIONS[label];
    let (h, w) = (shape.height as f64, shape.width as f64);
    let wrap = |d: f64, n: f64| {
        let d = d.rem_euclid(n);
        d.min(n - d)
    };
    render(shape, |t, y, x| {
        let cy = r0 + dr as f64 * t as f64;
        let cx = c0 + dc as f64 * t as f64;
        let ry = wrap(y as f64 - cy, h);
        let rx = wrap(x as f64 - cx, w);
        (-(ry * ry + rx * rx) / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
    })
}

/// Noise-free texture clip; identical in every frame.
pub fn texture_clip(shape: ClipShape, label: usize, phase_y: f64, phase_x: f64) -> Result<VideoTensor> {
    let k = std::f64::consts::TAU / TEXTURE_PERIOD;
    render(shape, |_, y, x| {
        let (y, x) = (y as f64 + phase_y, x as f64 + phase_x);
        match label {
            0 => (k * y).sin(),
            1 => (k * x).sin(),
            2 => (k * y).sin() * (k * x).sin(),
            _ => (k * (x + y) / std::f64::consts::SQRT_2).sin(),
        }
    })
}

fn render(shape: ClipShape, f: impl Fn(usize, usize, usize) -> f64) -> Result<VideoTensor> {
    let mut data = Vec::with_capacity(shape.frames * shape.height * shape.width * shape.channels);
    for t in 0..shape.frames {
        for y in 0..shape.height {
            for x in 0..shape.width {
                let v = f(t, y, x);
                data.extend(std::iter::repeat_n(v, shape.channels));
            }
        }
    }
    let grid = shape.grid();
    VideoTensor::new(grid, Tensor::new(&[grid.tokens(), shape.channels], data)?)
}

/// Deterministic dataset for `task`, split 80/20 into train and validation.
///
/// Labels cycle through the classes before shuffling, so a sample count
/// divisible by four gives exactly balanced classes.
pub fn gen_task(task: &TaskConfig, shape: ClipShape, seed: u64) -> Result<Dataset> {
    if task.samples < 2 {
        return Err(Error::Data(format!("need at least 2 samples, got {}", task.samples)));
    }
    if !(task.noise >= 0.0 && task.noise.is_finite()) {
        return Err(Error::Data(format!("noise must be a finite non-negative value, got {}", task.noise)));
    }
    let mut rng = seeded_rng(seed, 100 + task.kind as u64);
    let noise = Normal::new(0.0, task.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut samples = Vec::with_capacity(task.samples);
    for i in 0..task.samples {
        let label = i % TASK_CLASSES;
        let clip = match task.kind {
            TaskKind::MotionDirection => {
                let r0 = rng.random_range(0.0..shape.height as f64);
                let c0 = rng.random_range(0.0..shape.width as f64);
                motion_clip(shape, label, r0, c0)?
            }
            TaskKind::StaticTexture => {
                let py = rng.random_range(0.0..TEXTURE_PERIOD);
                let px = rng.random_range(0.0..TEXTURE_PERIOD);
                texture_clip(shape, label, py, px)?
            }
        };
        let clip = if task.noise > 0.0 {
            let grid = clip.grid();
            let data = clip.data().data().iter().map(|&v| v + noise.sample(&mut rng)).collect();
            VideoTensor::new(grid, Tensor::new(clip.data().shape(), data)?)?
        } else {
            clip
        };
        samples.push(Sample { video: clip, label });
    }
    samples.shuffle(&mut rng);
    let n_train = (task.samples * 4).div_ceil(5).min(task.samples - 1);
    let val = samples.split_off(n_train);
    Ok(Dataset { train: samples, val })
}
