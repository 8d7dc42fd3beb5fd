//! Full network: patch embedding, a pattern of frozen transformer layers with
//! optional Divide+Modulate adapters, average pooling and a linear classifier.

mod checkpoint;
mod pattern;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use pattern::{Group, LayerPattern, LayerSlot, Symbol};

use rand::Rng;

use crate::attention::{count_flops, divide_tokens, AttentionScope, AttentionWeights, Grid, VideoTensor, WindowSpec};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionParams, FusionSettings};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::{ssm_forward, ssm_macs, ScanPlan, SsmParams};
use crate::tensor::{seeded_rng, Tape, Tensor, Var};

/// Which parts of the network run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// The trained model: windowed attention and adapters on modulated layers.
    Adapted,
    /// Adapters removed; modulated layers keep windowed attention.
    Backbone,
    /// Adapters removed and every layer attends over whole frames.
    Teacher,
}

#[derive(Debug, Clone)]
pub struct Adapter {
    pub ssm: Option<SsmParams>,
    pub fusion: FusionParams,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Transformer { attn: AttentionWeights, adapters: Vec<Adapter> },
    Standalone { ssm: SsmParams },
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub w: ParamId,
    pub b: ParamId,
    /// Per spatial position, shared by all frames.
    pub pos: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Output<'t> {
    /// `[1, K]`.
    pub logits: Var<'t>,
    /// Token-averaged final features, `[1, C]`.
    pub pooled: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct MoMaModel {
    config: ModelConfig,
    grid: Grid,
    window: WindowSpec,
    plan: ScanPlan,
    fusion: FusionSettings,
    pattern: LayerPattern,
    store: ParamStore,
    patch: PatchEmbed,
    layers: Vec<Layer>,
    head_w: ParamId,
    head_b: ParamId,
}

// RNG streams; the backbone stream never depends on adapter settings.
const STREAM_BACKBONE: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_ADAPTER_BASE: u64 = 1000;

impl MoMaModel {
    /// Builds a model whose frozen backbone depends only on `seed` and the backbone dimensions.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let window = config.window_spec()?;
        let plan = config.scan()?;
        let pattern = config.layer_pattern()?;
        let fusion = config.fusion_settings();
        let c = config.channels;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed, STREAM_BACKBONE);

        let patch_dim = config.patch * config.patch * config.in_channels;
        let patch = PatchEmbed {
            w: store.add("patch.w", Tensor::randn(&[patch_dim, c], 1.0 / (patch_dim as f64).sqrt(), &mut rng), false),
            b: store.add("patch.b", Tensor::zeros(&[c]), false),
            pos: store.add("patch.pos", Tensor::randn(&[grid.frame_tokens(), c], 1.0 / (c as f64).sqrt(), &mut rng), false),
        };

        let mut layers = Vec::with_capacity(pattern.slots().len());
        let mut ssm_index = 0u64;
        let mut transformer_index = 0;
        for slot in pattern.slots() {
            match *slot {
                LayerSlot::Transformer { modulations } => {
                    let prefix = format!("layer{transformer_index}");
                    let attn = AttentionWeights::init(&mut store, &prefix, c, config.heads, &mut rng)?;
                    let adapters = (0..modulations)
                        .map(|_| {
                            let mut arng = seeded_rng(seed, STREAM_ADAPTER_BASE + ssm_index);
                            let name = format!("adapter{ssm_index}");
                            ssm_index += 1;
                            let ssm = fusion.kind.uses_ssm().then(|| {
                                SsmParams::init(&mut store, &format!("{name}.ssm"), config.ssm(), plan.len(), &mut arng)
                            });
                            let fusion = FusionParams::init(&mut store, &name, fusion.kind, c, &mut arng);
                            Adapter { ssm, fusion }
                        })
                        .collect();
                    transformer_index += 1;
                    layers.push(Layer::Transformer { attn, adapters });
                }
                LayerSlot::Standalone => {
                    let mut arng = seeded_rng(seed, STREAM_ADAPTER_BASE + ssm_index);
                    let name = format!("standalone{ssm_index}.ssm");
                    ssm_index += 1;
                    let ssm = SsmParams::init(&mut store, &name, config.ssm(), plan.len(), &mut arng);
                    layers.push(Layer::Standalone { ssm });
                }
            }
        }

        let _ = seeded_rng(seed, STREAM_HEAD).random::<u64>();
        let head_w = store.add("head.w", Tensor::zeros(&[c, config.classes]), true);
        let head_b = store.add("head.b", Tensor::zeros(&[config.classes]), true);

        Ok(Self {
            config: config.clone(),
            grid,
            window,
            plan,
            fusion,
            pattern,
            store,
            patch,
            layers,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn pattern(&self) -> &LayerPattern {
        &self.pattern
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn scan_plan(&self) -> &ScanPlan {
        &self.plan
    }

    pub fn fusion(&self) -> FusionSettings {
        self.fusion
    }

    pub fn window(&self) -> WindowSpec {
        self.window
    }

    /// Pixel video `(T, H, W)` with `in_channels` channels to `[T·h·w, p²·c_in]` patch rows.
    pub fn patchify(&self, video: &VideoTensor) -> Result<Tensor> {
        let cfg = &self.config;
        let g = video.grid();
        if g != Grid::new(cfg.frames, cfg.height, cfg.width) || video.channels() != cfg.in_channels {
            return Err(Error::dim(format!(
                "model expects {}x{}x{} pixels with {} channels, got {}x{}x{} with {}",
                cfg.frames,
                cfg.height,
                cfg.width,
                cfg.in_channels,
                g.frames,
                g.height,
                g.width,
                video.channels()
            )));
        }
        let p = cfg.patch;
        let ci = cfg.in_channels;
        let tokens = self.grid;
        let mut out = Vec::with_capacity(tokens.tokens() * p * p * ci);
        for t in 0..tokens.frames {
            for ph in 0..tokens.height {
                for pw in 0..tokens.width {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..ci {
                                out.push(video.get(t, ph * p + dy, pw * p + dx, ch));
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(&[tokens.tokens(), p * p * ci], out)
    }

    fn embed<'t>(&self, p: &Bound<'t>, tape: &'t Tape, video: &VideoTensor) -> Result<Var<'t>> {
        let patches = tape.constant(self.patchify(video)?);
        let per_frame = self.grid.frame_tokens();
        let pos_index: Vec<usize> = (0..self.grid.tokens()).map(|i| i % per_frame).collect();
        let pos = p[self.patch.pos].gather_rows(pos_index.into())?;
        patches.linear(p[self.patch.w], Some(p[self.patch.b]))?.add(pos)
    }

    /// Runs the model on `tape`; `p` must come from [`ParamStore::bind`] on the same tape.
    pub fn forward<'t>(&self, p: &Bound<'t>, tape: &'t Tape, video: &VideoTensor, mode: Mode) -> Result<Output<'t>> {
        let mut x = self.embed(p, tape, video)?;
        x = self.forward_tokens(p, x, mode)?;
        let c = self.config.channels;
        let pooled = x.mean_axis(0)?.reshape(&[1, c])?;
        let logits = pooled.linear(p[self.head_w], Some(p[self.head_b]))?;
        Ok(Output { logits, pooled })
    }

    /// Transformer and SSM stack over embedded tokens `[T·H·W, C]`.
    pub fn forward_tokens<'t>(&self, p: &Bound<'t>, mut x: Var<'t>, mode: Mode) -> Result<Var<'t>> {
        let grid = self.grid;
        let frame = WindowSpec::frame(grid);
        for layer in &self.layers {
            match layer {
                Layer::Transformer { attn, adapters } => {
                    let h = attn.norm1(p, x)?;
                    let mut a = if adapters.is_empty() || mode == Mode::Teacher {
                        divide_tokens(p, attn, h, grid, frame)?
                    } else {
                        divide_tokens(p, attn, h, grid, self.window)?
                    };
                    if mode == Mode::Adapted {
                        for adapter in adapters {
                            let m = match &adapter.ssm {
                                Some(ssm) => Some(ssm_forward(p, ssm, &self.plan, a, grid)?),
                                None => None,
                            };
                            a = fuse(p, &self.fusion, &adapter.fusion, a, m.as_ref())?;
                        }
                    }
                    x = x.add(a)?;
                    let f = attn.ffn(p, attn.norm2(p, x)?)?;
                    x = x.add(f)?;
                }
                Layer::Standalone { ssm } => {
                    if mode == Mode::Adapted {
                        let m = ssm_forward(p, ssm, &self.plan, x, grid)?;
                        x = x.add(m.scale)?;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Logits `[K]` of one video in `mode`.
    pub fn logits(&self, video: &VideoTensor, mode: Mode) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_constant(&tape);
        let out = self.forward(&p, &tape, video, mode)?;
        out.logits.value().reshape(&[self.config.classes])
    }

    /// Pooled features `[1, C]` of one video in `mode`.
    pub fn features(&self, video: &VideoTensor, mode: Mode) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_constant(&tape);
        Ok(self.forward(&p, &tape, video, mode)?.pooled.value().as_ref().clone())
    }

    pub fn predict(&self, video: &VideoTensor) -> Result<usize> {
        Ok(argmax(self.logits(video, Mode::Adapted)?.data()))
    }

    /// Cross-entropy plus `distill_weight` × mean-squared distance between the
    /// pooled features and the teacher's pooled features.
    pub fn loss<'t>(
        &self,
        out: &Output<'t>,
        label: usize,
        teacher: &Tensor,
        distill_weight: f64,
    ) -> Result<Var<'t>> {
        if label >= self.config.classes {
            return Err(Error::Data(format!("label {label} out of range for {} classes", self.config.classes)));
        }
        let ce = out.logits.cross_entropy(label)?;
        if distill_weight == 0.0 {
            return Ok(ce);
        }
        let target = out.pooled.tape().constant(teacher.clone());
        let diff = out.pooled.sub(target)?;
        let mse = diff.mul(diff)?.mean();
        ce.add(mse.scale(distill_weight))
    }

    /// Trainable and frozen scalar counts.
    pub fn parameter_counts(&self) -> (usize, usize) {
        (self.store.count(true), self.store.count(false))
    }

    /// Closed-form forward multiply-accumulate count of the adapted model.
    pub fn flop_count(&self) -> u64 {
        self.flop_count_in(Mode::Adapted)
    }

    /// Closed-form forward multiply-accumulate count in `mode`.
    ///
    /// Matrix products, scan updates and convolution taps are counted;
    /// elementwise activations, norms and the fusion arithmetic are not.
    pub fn flop_count_in(&self, mode: Mode) -> u64 {
        let cfg = &self.config;
        let g = self.grid;
        let n = g.tokens() as u64;
        let c = cfg.channels as u64;
        let ssm = ssm_macs(g.tokens(), &cfg.ssm(), self.plan.len());
        let patch = n * (cfg.patch * cfg.patch * cfg.in_channels) as u64 * c;
        let mut total = patch + c * cfg.classes as u64;
        for layer in &self.layers {
            match layer {
                Layer::Transformer { adapters, .. } => {
                    let scope = if adapters.is_empty() || mode == Mode::Teacher {
                        AttentionScope::PerFrame
                    } else {
                        AttentionScope::Windowed(self.window)
                    };
                    total += count_flops(g, cfg.channels, scope).total() + 8 * n * c * c;
                    if mode != Mode::Adapted {
                        continue;
                    }
                    for a in adapters {
                        if a.ssm.is_some() {
                            total += ssm;
                        }
                        if let FusionParams::Concat { .. } = a.fusion {
                            total += n * 2 * c * c;
                        }
                    }
                }
                Layer::Standalone { .. } if mode == Mode::Adapted => total += ssm,
                Layer::Standalone { .. } => {}
            }
        }
        total
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
