//! Experiment configuration, stored as TOML (`key = value` lines under sections).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{Grid, WindowSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionSettings};
use crate::model::LayerPattern;
use crate::ssm::{Activation, ScanPlan, SsmConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub heads: usize,
    /// Backbone depth: number of transformer layers.
    pub layers: usize,
    /// Patch edge in pixels.
    pub patch: usize,
    pub frames: usize,
    /// Input height in pixels.
    pub height: usize,
    /// Input width in pixels.
    pub width: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub pattern: String,
    /// `HxW` planar or `TxHxW` cubic window, in tokens.
    pub window: String,
    pub fusion: FusionKind,
    pub add_weights: [f64; 2],
    pub scan_plan: Vec<String>,
    pub ssm_state: usize,
    /// SSM inner width; 0 means `2 × channels`.
    pub ssm_hidden: usize,
    pub conv_width: usize,
    pub gate: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            heads: 4,
            layers: 4,
            patch: 4,
            frames: 8,
            height: 32,
            width: 32,
            in_channels: 1,
            classes: 4,
            pattern: "[TM]4".into(),
            window: "4x4".into(),
            fusion: FusionKind::SeqMod,
            add_weights: [1.0, 1.0],
            scan_plan: ScanPlan::four_way().to_strings(),
            ssm_state: 8,
            ssm_hidden: 0,
            conv_width: 4,
            gate: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    /// Token grid after patch embedding.
    pub fn grid(&self) -> Result<Grid> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::dim(format!(
                "input {}x{} is not divisible by patch size {}",
                self.height, self.width, self.patch
            )));
        }
        Ok(Grid::new(self.frames, self.height / self.patch, self.width / self.patch))
    }

    pub fn window_spec(&self) -> Result<WindowSpec> {
        let spec: WindowSpec = self.window.parse()?;
        spec.validate(self.grid()?)?;
        Ok(spec)
    }

    pub fn layer_pattern(&self) -> Result<LayerPattern> {
        LayerPattern::parse(&self.pattern, self.layers)
    }

    pub fn scan(&self) -> Result<ScanPlan> {
        ScanPlan::parse_list(&self.scan_plan)
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            channels: self.channels,
            hidden: if self.ssm_hidden == 0 { 2 * self.channels } else { self.ssm_hidden },
            state: self.ssm_state,
            conv_width: self.conv_width,
            gate: self.gate,
        }
    }

    pub fn fusion_settings(&self) -> FusionSettings {
        FusionSettings { kind: self.fusion, add_weights: (self.add_weights[0], self.add_weights[1]) }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.window_spec()?;
        self.layer_pattern()?;
        self.scan()?;
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.classes < 2 || self.in_channels == 0 || self.ssm_state == 0 || self.conv_width == 0 {
            return Err(Error::Config("classes >= 2 and positive in_channels, ssm_state, conv_width required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Weight of the feature distillation term.
    pub distill_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 8,
            lr: 3e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            distill_weight: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// A blob drifting up, down, left or right.
    MotionDirection,
    /// Four temporally constant textures.
    StaticTexture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub samples: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self { kind: TaskKind::MotionDirection, samples: 400, noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
}

impl ExperimentConfig {
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.model.validate()?;
        if cfg.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::ConfigNotFound(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Small configuration used by the acceptance suite and quick runs:
    /// 16×16 pixel frames, 4×4 patches, 8 frames, 16 channels, two layers.
    /// The learning rate is ten times the default because the adapters here
    /// are tiny and train for only a few hundred steps.
    pub fn desk_small() -> Self {
        Self {
            model: ModelConfig {
                channels: 16,
                heads: 2,
                layers: 2,
                height: 16,
                width: 16,
                pattern: "[TM]2".into(),
                window: "2x2".into(),
                ..ModelConfig::default()
            },
            train: TrainConfig { lr: 3e-3, ..TrainConfig::default() },
            ..Self::default()
        }
    }
}
