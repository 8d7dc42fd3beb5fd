//! Selective state-space forwarding layer with multi-directional scans.
//!
//! The output projection is twice the model width; its two halves are the
//! scale and bias sequences consumed by the modulation step.

pub mod scan;

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{inverse_permutation, Grid};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{tape::selective_scan, Tensor, Var};

pub use scan::{selective_scan_chunked, selective_scan_ref};

/// Token traversal order of one scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScanAxis {
    /// `(t, h, w)` raster, the storage order.
    SpatialRaster,
    /// `(h, w, t)`: each spatial position's frames are consecutive.
    TemporalMajor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Orientation {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ScanDirection {
    pub axis: ScanAxis,
    pub orientation: Orientation,
}

impl ScanDirection {
    pub const fn new(axis: ScanAxis, orientation: Orientation) -> Self {
        Self { axis, orientation }
    }

    /// `order[i]` is the storage index of the `i`-th token visited.
    pub fn order(&self, grid: Grid) -> Vec<usize> {
        let mut order: Vec<usize> = match self.axis {
            ScanAxis::SpatialRaster => (0..grid.tokens()).collect(),
            ScanAxis::TemporalMajor => {
                let mut idx = Vec::with_capacity(grid.tokens());
                for h in 0..grid.height {
                    for w in 0..grid.width {
                        for t in 0..grid.frames {
                            idx.push(grid.index(t, h, w));
                        }
                    }
                }
                idx
            }
        };
        if self.orientation == Orientation::Backward {
            order.reverse();
        }
        order
    }
}

impl fmt::Display for ScanDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let axis = match self.axis {
            ScanAxis::SpatialRaster => "spatial",
            ScanAxis::TemporalMajor => "temporal",
        };
        let orientation = match self.orientation {
            Orientation::Forward => "forward",
            Orientation::Backward => "backward",
        };
        write!(f, "{axis}-{orientation}")
    }
}

impl FromStr for ScanDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (axis, orientation) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("scan direction {s:?} is not axis-orientation")))?;
        let axis = match axis {
            "spatial" => ScanAxis::SpatialRaster,
            "temporal" => ScanAxis::TemporalMajor,
            other => return Err(Error::Config(format!("unknown scan axis {other:?} (spatial|temporal)"))),
        };
        let orientation = match orientation {
            "forward" => Orientation::Forward,
            "backward" => Orientation::Backward,
            other => {
                return Err(Error::Config(format!("unknown scan orientation {other:?} (forward|backward)")))
            }
        };
        Ok(Self { axis, orientation })
    }
}

/// Ordered, non-empty list of scan directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPlan {
    directions: Vec<ScanDirection>,
}

impl ScanPlan {
    pub fn new(directions: Vec<ScanDirection>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Config("scan plan needs at least one direction".into()));
        }
        Ok(Self { directions })
    }

    /// Spatial and temporal traversal, each forward and backward.
    pub fn four_way() -> Self {
        use Orientation::*;
        use ScanAxis::*;
        Self {
            directions: vec![
                ScanDirection::new(SpatialRaster, Forward),
                ScanDirection::new(SpatialRaster, Backward),
                ScanDirection::new(TemporalMajor, Forward),
                ScanDirection::new(TemporalMajor, Backward),
            ],
        }
    }

    pub fn directions(&self) -> &[ScanDirection] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn parse_list(items: &[String]) -> Result<Self> {
        Self::new(items.iter().map(|s| s.parse()).collect::<Result<_>>()?)
    }

    pub fn to_strings(&self) -> Vec<String> {
        self.directions.iter().map(ToString::to_string).collect()
    }
}

/// Reorders tokens into the traversal order of `direction`.
pub fn reindex(x: &Tensor, direction: ScanDirection, grid: Grid) -> Result<Tensor> {
    check_rows(x, grid)?;
    x.gather_rows(&direction.order(grid))
}

/// Undoes [`reindex`].
pub fn inverse_reindex(x: &Tensor, direction: ScanDirection, grid: Grid) -> Result<Tensor> {
    check_rows(x, grid)?;
    x.gather_rows(&inverse_permutation(&direction.order(grid)))
}

fn check_rows(x: &Tensor, grid: Grid) -> Result<()> {
    let (rows, _) = x.dims2()?;
    if rows != grid.tokens() {
        return Err(Error::dim(format!("{rows} tokens for a grid of {}", grid.tokens())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Silu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Gelu => x.gelu(),
            Activation::Silu => x.silu(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsmConfig {
    /// Model width `C`.
    pub channels: usize,
    /// Inner width `E`.
    pub hidden: usize,
    /// State size `S`.
    pub state: usize,
    pub conv_width: usize,
    /// Activation applied to the gate branch.
    pub gate: Activation,
}

impl SsmConfig {
    /// Defaults used at desk scale: `E = 2C`, `S = 8`, conv width 4, gelu gate.
    pub fn desk(channels: usize) -> Self {
        Self { channels, hidden: 2 * channels, state: 8, conv_width: 4, gate: Activation::Gelu }
    }
}

/// Parameters private to one scan direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectionParams {
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub delta_w: ParamId,
    pub delta_b: ParamId,
    pub b_w: ParamId,
    pub b_b: ParamId,
    pub c_w: ParamId,
    pub c_b: ParamId,
    pub a_log: ParamId,
    pub d: ParamId,
}

/// One SSM forwarding layer.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub config: SsmConfig,
    pub in_w: ParamId,
    pub in_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    /// One entry per scan direction; entries may share ids to tie directions.
    pub directions: Vec<DirectionParams>,
}

impl SsmParams {
    /// Trainable parameters for `directions` scans.
    ///
    /// The output projection starts at zero so both modulation sequences are
    /// zero at initialization.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: SsmConfig,
        directions: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let SsmConfig { channels: c, hidden: e, state: s, conv_width: k, .. } = config;
        let mut add = |name: String, t: Tensor| store.add(format!("{prefix}.{name}"), t, true);
        let in_w = add("in.w".into(), Tensor::randn(&[c, 2 * e], 1.0 / (c as f64).sqrt(), rng));
        let in_b = add("in.b".into(), Tensor::zeros(&[2 * e]));
        let out_w = add("out.w".into(), Tensor::zeros(&[e, 2 * c]));
        let out_b = add("out.b".into(), Tensor::zeros(&[2 * c]));
        let std_e = 1.0 / (e as f64).sqrt();
        let directions = (0..directions)
            .map(|i| {
                let bound = 1.0 / (k as f64).sqrt();
                // softplus(bias) log-uniform in [1e-3, 1e-1]
                let dt: Vec<f64> = (0..e)
                    .map(|_| rng.random_range(1e-3f64.ln()..1e-1f64.ln()).exp())
                    .collect();
                let dt_bias = dt.iter().map(|&d| d + (-(-d).exp_m1()).ln()).collect();
                let a_log = (0..e).flat_map(|_| (1..=s).map(|v| (v as f64).ln())).collect();
                DirectionParams {
                    conv_w: add(format!("dir{i}.conv.w"), Tensor::uniform(&[e, k], -bound, bound, rng)),
                    conv_b: add(format!("dir{i}.conv.b"), Tensor::zeros(&[e])),
                    delta_w: add(format!("dir{i}.delta.w"), Tensor::randn(&[e, e], 0.1 * std_e, rng)),
                    delta_b: add(format!("dir{i}.delta.b"), Tensor::from_vec(dt_bias)),
                    b_w: add(format!("dir{i}.b.w"), Tensor::randn(&[e, s], std_e, rng)),
                    b_b: add(format!("dir{i}.b.b"), Tensor::zeros(&[s])),
                    c_w: add(format!("dir{i}.c.w"), Tensor::randn(&[e, s], std_e, rng)),
                    c_b: add(format!("dir{i}.c.b"), Tensor::zeros(&[s])),
                    a_log: add(format!("dir{i}.a_log"), Tensor::new(&[e, s], a_log).expect("e*s values")),
                    d: add(format!("dir{i}.d"), Tensor::full(&[e], 1.0)),
                }
            })
            .collect();
        Self { config, in_w, in_b, out_w, out_b, directions }
    }
}

/// Scale and bias sequences, each shaped like the modulated sequence.
#[derive(Debug, Clone, Copy)]
pub struct ModulationPair<'t> {
    pub scale: Var<'t>,
    pub bias: Var<'t>,
}

/// Runs the SSM forwarding layer over `x: [T·H·W, C]`.
///
/// In-projection to a main and a gate branch; per direction the main branch
/// is reordered, passed through a causal depthwise convolution and silu,
/// scanned with input-dependent Δ, B, C, and restored to storage order.
/// Direction outputs are summed, gated, projected to `2C` and split.
pub fn ssm_forward<'t>(
    p: &Bound<'t>,
    params: &SsmParams,
    plan: &ScanPlan,
    x: Var<'t>,
    grid: Grid,
) -> Result<ModulationPair<'t>> {
    let shape = x.shape();
    let c = params.config.channels;
    if shape.len() != 2 || shape[0] != grid.tokens() || shape[1] != c {
        return Err(Error::dim(format!(
            "ssm_forward expects [{}, {c}] for grid {}x{}x{}, got {shape:?}",
            grid.tokens(),
            grid.frames,
            grid.height,
            grid.width
        )));
    }
    if plan.len() != params.directions.len() {
        return Err(Error::Config(format!(
            "scan plan has {} directions but parameters exist for {}",
            plan.len(),
            params.directions.len()
        )));
    }
    let e = params.config.hidden;
    let projected = x.linear(p[params.in_w], Some(p[params.in_b]))?;
    let main = projected.slice_cols(0, e)?;
    let gate = projected.slice_cols(e, e)?;

    let mut merged: Option<Var<'t>> = None;
    for (direction, dp) in plan.directions().iter().zip(&params.directions) {
        let order = direction.order(grid);
        let identity = order.iter().enumerate().all(|(i, &j)| i == j);
        let inverse: Rc<[usize]> = inverse_permutation(&order).into();
        let seq = if identity { main } else { main.gather_rows(order.into())? };
        let u = seq.causal_conv(p[dp.conv_w], p[dp.conv_b])?.silu();
        let delta = u.linear(p[dp.delta_w], Some(p[dp.delta_b]))?.softplus();
        let b = u.linear(p[dp.b_w], Some(p[dp.b_b]))?;
        let cc = u.linear(p[dp.c_w], Some(p[dp.c_b]))?;
        let a = p[dp.a_log].exp().scale(-1.0);
        let y = selective_scan(u, delta, a, b, cc, p[dp.d])?;
        let y = if identity { y } else { y.gather_rows(inverse)? };
        merged = Some(match merged {
            Some(acc) => acc.add(y)?,
            None => y,
        });
    }
    let merged = merged.expect("plan is non-empty");
    let gated = merged.mul(params.config.gate.apply(gate))?;
    let out = gated.linear(p[params.out_w], Some(p[params.out_b]))?;
    Ok(ModulationPair { scale: out.slice_cols(0, c)?, bias: out.slice_cols(c, c)? })
}

/// Closed-form multiply-accumulate count of [`ssm_forward`] over `tokens` tokens.
///
/// Per token: the in-projection `C·2E`, then per direction the convolution
/// `E·K`, the Δ projection `E²`, the B and C projections `2·E·S` and the scan
/// itself `2·E·S` (state update and readout), and finally the out-projection `E·2C`.
pub fn ssm_macs(tokens: usize, config: &SsmConfig, directions: usize) -> u64 {
    let (n, c) = (tokens as u64, config.channels as u64);
    let (e, s, k) = (config.hidden as u64, config.state as u64, config.conv_width as u64);
    n * c * 2 * e + directions as u64 * n * (e * k + e * e + 4 * e * s) + n * e * 2 * c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, Tape};

    #[test]
    fn temporal_major_order_enumerates_hwt() {
        let g = Grid::new(2, 1, 2);
        let dir = ScanDirection::new(ScanAxis::TemporalMajor, Orientation::Forward);
        assert_eq!(dir.order(g), vec![0, 2, 1, 3]);
        let x = Tensor::new(&[4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reindex(&x, dir, g).unwrap().data(), &[0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn spatial_forward_is_identity_and_backward_reverses() {
        let g = Grid::new(2, 2, 3);
        let fwd = ScanDirection::new(ScanAxis::SpatialRaster, Orientation::Forward);
        let bwd = ScanDirection::new(ScanAxis::SpatialRaster, Orientation::Backward);
        assert_eq!(fwd.order(g), (0..12).collect::<Vec<_>>());
        assert_eq!(bwd.order(g), (0..12).rev().collect::<Vec<_>>());
    }

    #[test]
    fn every_direction_is_a_bijection() {
        let g = Grid::new(3, 2, 4);
        let x = Tensor::uniform(&[g.tokens(), 2], -1.0, 1.0, &mut seeded_rng(1, 1));
        for dir in ScanPlan::four_way().directions() {
            let mut sorted = dir.order(g);
            sorted.sort_unstable();
            assert_eq!(sorted, (0..g.tokens()).collect::<Vec<_>>());
            let back = inverse_reindex(&reindex(&x, *dir, g).unwrap(), *dir, g).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn direction_strings_round_trip() {
        let plan = ScanPlan::four_way();
        assert_eq!(ScanPlan::parse_list(&plan.to_strings()).unwrap(), plan);
        assert!("diagonal-forward".parse::<ScanDirection>().is_err());
        assert!(ScanPlan::parse_list(&[]).is_err());
    }

    fn setup(grid: Grid, c: usize) -> (ParamStore, SsmParams, Tensor) {
        let mut store = ParamStore::new();
        let cfg = SsmConfig { channels: c, hidden: 4, state: 2, conv_width: 4, gate: Activation::Gelu };
        let params = SsmParams::init(&mut store, "ssm", cfg, 4, &mut seeded_rng(11, 0));
        let x = Tensor::uniform(&[grid.tokens(), c], -1.0, 1.0, &mut seeded_rng(11, 1));
        (store, params, x)
    }

    #[test]
    fn zero_output_projection_gives_zero_modulation() {
        let g = Grid::new(2, 2, 2);
        let (store, params, x) = setup(g, 3);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let pair = ssm_forward(&p, &params, &ScanPlan::four_way(), tape.constant(x), g).unwrap();
        assert!(pair.scale.value().data().iter().all(|&v| v == 0.0));
        assert!(pair.bias.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(pair.scale.shape(), vec![8, 3]);
    }

    #[test]
    fn initial_parameters_satisfy_invariants() {
        let g = Grid::new(1, 1, 1);
        let (store, params, _) = setup(g, 3);
        for dp in &params.directions {
            assert!(store.get(dp.a_log).data().iter().all(|a| (-a.exp()) < 0.0));
            for &bias in store.get(dp.delta_b).data() {
                let dt = crate::tensor::tape::softplus(bias);
                assert!((1e-3 * (1.0 - 1e-9)..=1e-1 * (1.0 + 1e-9)).contains(&dt), "{dt}");
            }
        }
        assert_eq!(store.get(params.out_w).shape(), [4, 6]);
    }

    #[test]
    fn grid_mismatch_is_dimension_error() {
        let g = Grid::new(2, 2, 2);
        let (store, params, x) = setup(g, 3);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let err = ssm_forward(&p, &params, &ScanPlan::four_way(), tape.constant(x), Grid::new(1, 2, 2)).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
