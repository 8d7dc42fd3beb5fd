//! Frozen transformer primitives and the window-partitioned attention stage.
//!
//! Token order of a video grid is always `(t·H + h)·W + w`.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Token-grid extents of a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Self { frames, height, width }
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.height * self.width
    }

    pub fn frame_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.height + h) * self.width + w
    }
}

/// Dense `(T, H, W, C)` token grid stored as `[T·H·W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    grid: Grid,
    data: Tensor,
}

impl VideoTensor {
    pub fn new(grid: Grid, data: Tensor) -> Result<Self> {
        let (rows, _) = data.dims2()?;
        if rows != grid.tokens() {
            return Err(Error::dim(format!(
                "grid {}x{}x{} needs {} rows, got {rows}",
                grid.frames,
                grid.height,
                grid.width,
                grid.tokens()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn get(&self, t: usize, h: usize, w: usize, c: usize) -> f64 {
        self.data.get2(self.grid.index(t, h, w), c)
    }

    /// Frames reordered so that output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Result<Self> {
        let g = self.grid;
        if order.len() != g.frames {
            return Err(Error::dim(format!("frame order of length {} for {} frames", order.len(), g.frames)));
        }
        let idx: Vec<usize> = order
            .iter()
            .flat_map(|&t| (0..g.frame_tokens()).map(move |i| t * g.frame_tokens() + i))
            .collect();
        Self::new(g, self.data.gather_rows(&idx)?)
    }
}

/// Non-overlapping attention window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WindowSpec {
    /// `height × width` window inside each frame.
    Planar { height: usize, width: usize },
    /// `frames × height × width` spatiotemporal block.
    Cubic { frames: usize, height: usize, width: usize },
}

impl WindowSpec {
    pub fn square(w: usize) -> Self {
        WindowSpec::Planar { height: w, width: w }
    }

    /// Window covering a whole frame (per-frame attention).
    pub fn frame(grid: Grid) -> Self {
        WindowSpec::Planar { height: grid.height, width: grid.width }
    }

    /// Window covering the whole video (full spatiotemporal attention).
    pub fn video(grid: Grid) -> Self {
        WindowSpec::Cubic { frames: grid.frames, height: grid.height, width: grid.width }
    }

    fn extents(&self) -> (usize, usize, usize) {
        match *self {
            WindowSpec::Planar { height, width } => (1, height, width),
            WindowSpec::Cubic { frames, height, width } => (frames, height, width),
        }
    }

    pub fn tokens(&self) -> usize {
        let (t, h, w) = self.extents();
        t * h * w
    }

    pub fn validate(&self, grid: Grid) -> Result<()> {
        let (wt, wh, ww) = self.extents();
        for (dim, extent, window) in [("T", grid.frames, wt), ("H", grid.height, wh), ("W", grid.width, ww)] {
            if window == 0 || extent % window != 0 {
                return Err(Error::Window { dim, extent, window });
            }
        }
        Ok(())
    }

    pub fn count(&self, grid: Grid) -> Result<usize> {
        self.validate(grid)?;
        Ok(grid.tokens() / self.tokens())
    }

    /// Source token index of each position in the window-concatenated sequence.
    ///
    /// Windows are enumerated block-raster over `(t, h, w)` (for planar windows:
    /// per frame, window rows then columns); tokens inside a window are raster
    /// over `(t, h, w)`.
    pub fn order(&self, grid: Grid) -> Result<Vec<usize>> {
        self.validate(grid)?;
        let (wt, wh, ww) = self.extents();
        let mut idx = Vec::with_capacity(grid.tokens());
        for bt in (0..grid.frames).step_by(wt) {
            for bh in (0..grid.height).step_by(wh) {
                for bw in (0..grid.width).step_by(ww) {
                    for t in bt..bt + wt {
                        for h in bh..bh + wh {
                            for w in bw..bw + ww {
                                idx.push(grid.index(t, h, w));
                            }
                        }
                    }
                }
            }
        }
        Ok(idx)
    }

    /// True when [`order`](Self::order) is the identity permutation.
    pub fn is_contiguous(&self, grid: Grid) -> bool {
        let (wt, wh, ww) = self.extents();
        ww == grid.width && (wt == 1 || wh == grid.height)
    }
}

impl fmt::Display for WindowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            WindowSpec::Planar { height, width } => write!(f, "{height}x{width}"),
            WindowSpec::Cubic { frames, height, width } => write!(f, "{frames}x{height}x{width}"),
        }
    }
}

/// `"8x8"` is planar, `"4x4x4"` is a `frames × height × width` cube.
impl FromStr for WindowSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: std::result::Result<Vec<usize>, _> = s.trim().split('x').map(str::parse).collect();
        match parts.as_deref() {
            Ok([h, w]) if *h > 0 && *w > 0 => Ok(WindowSpec::Planar { height: *h, width: *w }),
            Ok([t, h, w]) if *t > 0 && *h > 0 && *w > 0 => {
                Ok(WindowSpec::Cubic { frames: *t, height: *h, width: *w })
            }
            _ => Err(Error::Config(format!("invalid window spec {s:?}; expected HxW or TxHxW"))),
        }
    }
}

/// Splits a video into its windows, each `[window tokens, C]`.
pub fn split_windows(v: &VideoTensor, spec: WindowSpec) -> Result<Vec<Tensor>> {
    let order = spec.order(v.grid)?;
    order
        .chunks(spec.tokens())
        .map(|idx| v.data.gather_rows(idx))
        .collect()
}

/// Inverse of [`split_windows`].
pub fn merge_windows(windows: &[Tensor], grid: Grid, spec: WindowSpec) -> Result<VideoTensor> {
    let order = spec.order(grid)?;
    let n = spec.tokens();
    if windows.len() * n != grid.tokens() {
        return Err(Error::dim(format!(
            "{} windows of {n} tokens do not fill {} tokens",
            windows.len(),
            grid.tokens()
        )));
    }
    let c = windows[0].dims2()?.1;
    let mut data = Tensor::zeros(&[grid.tokens(), c]);
    for (win, idx) in windows.iter().zip(order.chunks(n)) {
        if win.shape() != [n, c] {
            return Err(Error::dim(format!("window shape {:?}, expected [{n}, {c}]", win.shape())));
        }
        for (r, &dst) in idx.iter().enumerate() {
            data.data_mut()[dst * c..(dst + 1) * c].copy_from_slice(win.row(r));
        }
    }
    VideoTensor::new(grid, data)
}

pub(crate) fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &src) in order.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// Frozen weights of one pre-norm transformer layer.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub channels: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

impl AttentionWeights {
    /// Random "pretrained" weights, scaled-normal with variance `1/fan_in`, all frozen.
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!("{channels} channels do not split into {heads} heads")));
        }
        let c = channels;
        let hidden = 4 * c;
        let std_c = 1.0 / (c as f64).sqrt();
        let std_h = 1.0 / (hidden as f64).sqrt();
        let mut add = |name: &str, t: Tensor| store.add(format!("{prefix}.{name}"), t, false);
        Ok(Self {
            channels,
            heads,
            wq: add("wq", Tensor::randn(&[c, c], std_c, rng)),
            bq: add("bq", Tensor::zeros(&[c])),
            wk: add("wk", Tensor::randn(&[c, c], std_c, rng)),
            bk: add("bk", Tensor::zeros(&[c])),
            wv: add("wv", Tensor::randn(&[c, c], std_c, rng)),
            bv: add("bv", Tensor::zeros(&[c])),
            wo: add("wo", Tensor::randn(&[c, c], std_c, rng)),
            bo: add("bo", Tensor::zeros(&[c])),
            ln1_gain: add("ln1.gain", Tensor::full(&[c], 1.0)),
            ln1_bias: add("ln1.bias", Tensor::zeros(&[c])),
            ln2_gain: add("ln2.gain", Tensor::full(&[c], 1.0)),
            ln2_bias: add("ln2.bias", Tensor::zeros(&[c])),
            ffn_w1: add("ffn.w1", Tensor::randn(&[c, hidden], std_c, rng)),
            ffn_b1: add("ffn.b1", Tensor::zeros(&[hidden])),
            ffn_w2: add("ffn.w2", Tensor::randn(&[hidden, c], std_h, rng)),
            ffn_b2: add("ffn.b2", Tensor::zeros(&[c])),
        })
    }

    fn check_width<'t>(&self, x: Var<'t>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(Error::dim(format!(
                "attention weights expect width {}, got input {shape:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Self-attention plus output projection where consecutive blocks of
    /// `window` rows attend only within themselves.
    pub fn attend<'t>(&self, p: &Bound<'t>, x: Var<'t>, window: usize) -> Result<Var<'t>> {
        self.check_width(x)?;
        let q = x.linear(p[self.wq], Some(p[self.bq]))?;
        let k = x.linear(p[self.wk], Some(p[self.bk]))?;
        let v = x.linear(p[self.wv], Some(p[self.bv]))?;
        let o = Var::block_attention(q, k, v, window, self.heads)?;
        o.linear(p[self.wo], Some(p[self.bo]))
    }

    pub fn norm1<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[self.ln1_gain], p[self.ln1_bias])
    }

    pub fn norm2<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(p[self.ln2_gain], p[self.ln2_bias])
    }

    pub fn ffn<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(p[self.ffn_w1], Some(p[self.ffn_b1]))?
            .gelu()
            .linear(p[self.ffn_w2], Some(p[self.ffn_b2]))
    }
}

/// Attention restricted to windows of `spec`, on a `[T·H·W, C]` token sequence.
///
/// Split, per-window attention and merge expressed as two row gathers around
/// one block-attention call; contiguous windows skip the gathers.
pub fn divide_tokens<'t>(
    p: &Bound<'t>,
    weights: &AttentionWeights,
    x: Var<'t>,
    grid: Grid,
    spec: WindowSpec,
) -> Result<Var<'t>> {
    let rows = x.shape()[0];
    if rows != grid.tokens() {
        return Err(Error::dim(format!("{rows} tokens for a grid of {}", grid.tokens())));
    }
    spec.validate(grid)?;
    if spec.is_contiguous(grid) {
        return weights.attend(p, x, spec.tokens());
    }
    let order = spec.order(grid)?;
    let inverse: Rc<[usize]> = inverse_permutation(&order).into();
    let windows = x.gather_rows(order.into())?;
    weights.attend(p, windows, spec.tokens())?.gather_rows(inverse)
}

/// Attention over a single window `[n, C]` (no FFN, no residual).
pub fn window_attention(s: &Tensor, weights: &AttentionWeights, store: &ParamStore) -> Result<Tensor> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(s.clone());
    let n = s.dims2()?.0;
    Ok(weights.attend(&p, x, n)?.value().as_ref().clone())
}

/// Window split, independent per-window attention, merge back into grid order.
pub fn divide(v: &VideoTensor, spec: WindowSpec, weights: &AttentionWeights, store: &ParamStore) -> Result<VideoTensor> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(v.data.clone());
    let out = divide_tokens(&p, weights, x, v.grid, spec)?;
    VideoTensor::new(v.grid, out.value().as_ref().clone())
}

/// Which tokens may attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScope {
    /// Every token of the video attends to every other.
    Full,
    /// Tokens attend within their frame.
    PerFrame,
    Windowed(WindowSpec),
}

impl AttentionScope {
    pub fn window(&self, grid: Grid) -> WindowSpec {
        match *self {
            AttentionScope::Full => WindowSpec::video(grid),
            AttentionScope::PerFrame => WindowSpec::frame(grid),
            AttentionScope::Windowed(spec) => spec,
        }
    }
}

/// Multiply-accumulate counts of one attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopCount {
    /// Q, K, V and output projections: `4·N·C²`.
    pub projections: u64,
    /// `Q·Kᵀ` over all windows and heads.
    pub scores: u64,
    /// Probability-weighted sum of values.
    pub weighted_values: u64,
}

impl FlopCount {
    /// Score and weighted-value MACs, the part that depends on the scope.
    pub fn attention(&self) -> u64 {
        self.scores + self.weighted_values
    }

    pub fn total(&self) -> u64 {
        self.projections + self.attention()
    }
}

/// Closed-form MAC count for one attention layer over a `grid` with `channels` width.
///
/// A window of `n` tokens costs `n²·C` for scores and again for the weighted
/// values, so windowed attention totals `N·n·C` each with `N = H·W·T`
/// (linear in `T` at fixed window), per-frame attention `(H·W)²·T·C`, and
/// full attention `(H·W·T)²·C`. The closed form is returned even when the
/// window does not tile the grid.
pub fn count_flops(grid: Grid, channels: usize, scope: AttentionScope) -> FlopCount {
    let tokens = grid.tokens() as u64;
    let c = channels as u64;
    let span = match scope {
        AttentionScope::Full => tokens,
        AttentionScope::PerFrame => grid.frame_tokens() as u64,
        AttentionScope::Windowed(spec) => spec.tokens() as u64,
    };
    FlopCount {
        projections: 4 * tokens * c * c,
        scores: tokens * span * c,
        weighted_values: tokens * span * c,
    }
}
