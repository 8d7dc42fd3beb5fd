//! Ways of merging the SSM output back into the frozen attention stream.
//!
//! Every kind starts as the identity on `x` except `max`, where a zero
//! second operand clamps negative activations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::ModulationPair;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FusionKind {
    /// Drop the SSM branch: `x`.
    Skip,
    /// Weighted sum `w₁·x + w₂·y` (1:1 by default).
    Add,
    /// Elementwise `max(x, y)`.
    Max,
    /// `Linear([x; y])` from `2C` back to `C`.
    Concat,
    /// Scalar adaptive normalization `α·γ·x + α·β + x`.
    RawAdan,
    /// Sequence modulation `y₁ ⊙ x + x + y₂`.
    SeqMod,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        FusionKind::Skip,
        FusionKind::Add,
        FusionKind::Max,
        FusionKind::Concat,
        FusionKind::RawAdan,
        FusionKind::SeqMod,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionKind::Skip => "skip",
            FusionKind::Add => "add",
            FusionKind::Max => "max",
            FusionKind::Concat => "concat",
            FusionKind::RawAdan => "raw_adan",
            FusionKind::SeqMod => "seqmod",
        }
    }

    /// Whether the SSM branch is evaluated at all.
    pub fn uses_ssm(&self) -> bool {
        *self != FusionKind::Skip
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.trim())
            .ok_or_else(|| {
                let valid: Vec<_> = FusionKind::ALL.iter().map(FusionKind::as_str).collect();
                Error::Config(format!("unknown fusion kind {s:?}; valid: {}", valid.join(", ")))
            })
    }
}

impl TryFrom<String> for FusionKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FusionKind> for String {
    fn from(k: FusionKind) -> String {
        k.as_str().to_string()
    }
}

/// Learnable parts of a fusion operator, if the kind has any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FusionParams {
    None,
    /// `[2C, C]` weight initialized to `[I; 0]`, and a zero bias.
    Concat { w: ParamId, b: ParamId },
    /// Head from the pooled `2C` SSM output to `(α, β, γ)`.
    RawAdan { w: ParamId, b: ParamId },
}

impl FusionParams {
    pub fn init(store: &mut ParamStore, prefix: &str, kind: FusionKind, channels: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        match kind {
            FusionKind::Concat => {
                let mut w = Tensor::zeros(&[2 * c, c]);
                for i in 0..c {
                    w.data_mut()[i * c + i] = 1.0;
                }
                FusionParams::Concat {
                    w: store.add(format!("{prefix}.concat.w"), w, true),
                    b: store.add(format!("{prefix}.concat.b"), Tensor::zeros(&[c]), true),
                }
            }
            FusionKind::RawAdan => {
                // Small random weights: the pooled input is zero at init, so the
                // output is still (1, 0, 0) but gradients reach the SSM.
                let w = Tensor::randn(&[2 * c, 3], 0.1 / (2.0 * c as f64).sqrt(), rng);
                FusionParams::RawAdan {
                    w: store.add(format!("{prefix}.adan.w"), w, true),
                    b: store.add(format!("{prefix}.adan.b"), Tensor::from_vec(vec![1.0, 0.0, 0.0]), true),
                }
            }
            _ => FusionParams::None,
        }
    }
}

/// Per-kind settings that are not learned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionSettings {
    pub kind: FusionKind,
    /// Weights `(w₁, w₂)` of the `add` kind.
    pub add_weights: (f64, f64),
}

impl FusionSettings {
    pub fn new(kind: FusionKind) -> Self {
        Self { kind, add_weights: (1.0, 1.0) }
    }
}

/// `y₁ ⊙ x + x + y₂`.
pub fn seqmod<'t>(x: Var<'t>, m: &ModulationPair<'t>) -> Result<Var<'t>> {
    if m.scale.shape() != x.shape() || m.bias.shape() != x.shape() {
        return Err(Error::dim(format!(
            "seqmod: x {:?}, scale {:?}, bias {:?}",
            x.shape(),
            m.scale.shape(),
            m.bias.shape()
        )));
    }
    m.scale.mul(x)?.add(x)?.add(m.bias)
}

/// [`seqmod`] on plain tensors.
pub fn seqmod_tensor(x: &Tensor, scale: &Tensor, bias: &Tensor) -> Result<Tensor> {
    x.same_shape(scale, "seqmod scale")?;
    x.same_shape(bias, "seqmod bias")?;
    let data = x
        .data()
        .iter()
        .zip(scale.data())
        .zip(bias.data())
        .map(|((&x, &s), &b)| s * x + x + b)
        .collect();
    Tensor::new(x.shape(), data)
}

/// Scalars `(α, β, γ)` from the token-averaged SSM output.
pub fn raw_adan_scalars<'t>(
    p: &Bound<'t>,
    params: &FusionParams,
    m: &ModulationPair<'t>,
) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
    let FusionParams::RawAdan { w, b } = *params else {
        return Err(Error::Config("raw_adan fusion without its head parameters".into()));
    };
    let both = Var::concat_cols(&[m.scale, m.bias])?;
    let width = both.shape()[1];
    let pooled = both.mean_axis(0)?.reshape(&[1, width])?;
    let abg = pooled.linear(p[w], Some(p[b]))?;
    Ok((abg.slice_cols(0, 1)?, abg.slice_cols(1, 1)?, abg.slice_cols(2, 1)?))
}

/// Merges the frozen stream `x` with the SSM output according to `settings.kind`.
///
/// `m` may be `None` only for [`FusionKind::Skip`]. The add and max kinds
/// consume the scale half of the SSM output.
pub fn fuse<'t>(
    p: &Bound<'t>,
    settings: &FusionSettings,
    params: &FusionParams,
    x: Var<'t>,
    m: Option<&ModulationPair<'t>>,
) -> Result<Var<'t>> {
    let need = || m.ok_or_else(|| Error::Config(format!("fusion {} needs the SSM output", settings.kind)));
    match settings.kind {
        FusionKind::Skip => Ok(x),
        FusionKind::SeqMod => seqmod(x, need()?),
        FusionKind::Add => {
            let y = need()?.scale;
            let (w1, w2) = settings.add_weights;
            let (xs, ys) = if (w1, w2) == (1.0, 1.0) { (x, y) } else { (x.scale(w1), y.scale(w2)) };
            xs.add(ys)
        }
        FusionKind::Max => x.maximum(need()?.scale),
        FusionKind::Concat => {
            let FusionParams::Concat { w, b } = *params else {
                return Err(Error::Config("concat fusion without its projection".into()));
            };
            Var::concat_cols(&[x, need()?.scale])?.linear(p[w], Some(p[b]))
        }
        FusionKind::RawAdan => {
            let (alpha, beta, gamma) = raw_adan_scalars(p, params, need()?)?;
            let scale = alpha.mul(gamma)?;
            let bias = alpha.mul(beta)?;
            x.mul_scalar(scale)?.add_scalar(bias)?.add(x)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, Tape};

    #[test]
    fn seqmod_direct_evaluation() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let s = Tensor::from_vec(vec![0.5, 1.0]);
        let b = Tensor::from_vec(vec![0.1, -0.2]);
        let out = seqmod_tensor(&x, &s, &b).unwrap();
        assert!((out.data()[0] - 1.6).abs() < 1e-15);
        assert!((out.data()[1] - 3.8).abs() < 1e-15);
    }

    #[test]
    fn seqmod_with_zero_modulation_is_identity() {
        let x = Tensor::uniform(&[5, 3], -2.0, 2.0, &mut seeded_rng(1, 0));
        let z = Tensor::zeros(&[5, 3]);
        assert_eq!(seqmod_tensor(&x, &z, &z).unwrap(), x);
    }

    #[test]
    fn seqmod_shape_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2]));
        let m = ModulationPair { scale: tape.constant(Tensor::zeros(&[2, 3])), bias: tape.constant(Tensor::zeros(&[2, 2])) };
        assert!(matches!(seqmod(x, &m), Err(Error::Dimension(_))));
    }

    fn run(kind: FusionKind, x: &[f64], y: &[f64]) -> Vec<f64> {
        let mut store = ParamStore::new();
        let params = FusionParams::init(&mut store, "f", kind, x.len(), &mut seeded_rng(0, 0));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let xv = tape.constant(Tensor::new(&[1, x.len()], x.to_vec()).unwrap());
        let m = ModulationPair {
            scale: tape.constant(Tensor::new(&[1, y.len()], y.to_vec()).unwrap()),
            bias: tape.constant(Tensor::zeros(&[1, y.len()])),
        };
        fuse(&p, &FusionSettings::new(kind), &params, xv, Some(&m)).unwrap().value().data().to_vec()
    }

    #[test]
    fn baseline_kinds() {
        assert_eq!(run(FusionKind::Skip, &[1.0, -2.0], &[9.0, 9.0]), vec![1.0, -2.0]);
        assert_eq!(run(FusionKind::Max, &[1.0, -2.0], &[0.0, 3.0]), vec![1.0, 3.0]);
        assert_eq!(run(FusionKind::Add, &[1.0, -2.0], &[0.5, 3.0]), vec![1.5, 1.0]);
        // [I; 0] projection ignores y at init
        assert_eq!(run(FusionKind::Concat, &[1.0, -2.0], &[0.5, 3.0]), vec![1.0, -2.0]);
    }

    #[test]
    fn identity_at_zero_ssm_output() {
        let x = [0.3, -1.2, 2.0];
        for kind in FusionKind::ALL {
            if kind == FusionKind::Max {
                continue;
            }
            assert_eq!(run(kind, &x, &[0.0; 3]), x.to_vec(), "{kind}");
        }
    }

    #[test]
    fn raw_adan_on_one_token_is_seqmod_under_a_pass_through_head() {
        let mut store = ParamStore::new();
        let params = FusionParams::init(&mut store, "f", FusionKind::RawAdan, 1, &mut seeded_rng(0, 0));
        let FusionParams::RawAdan { w, .. } = params else { unreachable!() };
        // Rows read (scale, bias); columns produce (α, β, γ). The bias keeps α = 1.
        store.set(w, Tensor::new(&[2, 3], vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::new(&[1, 1], vec![1.7]).unwrap());
        let m = ModulationPair {
            scale: tape.constant(Tensor::new(&[1, 1], vec![-0.4]).unwrap()),
            bias: tape.constant(Tensor::new(&[1, 1], vec![0.25]).unwrap()),
        };
        let adan = fuse(&p, &FusionSettings::new(FusionKind::RawAdan), &params, x, Some(&m)).unwrap();
        let modulated = seqmod(x, &m).unwrap();
        assert!(adan.value().max_abs_diff(&modulated.value()) < 1e-15);
    }

    #[test]
    fn kind_strings() {
        for kind in FusionKind::ALL {
            assert_eq!(kind.as_str().parse::<FusionKind>().unwrap(), kind);
        }
        let err = "mean".parse::<FusionKind>().unwrap_err().to_string();
        assert!(err.contains("seqmod"), "{err}");
    }

    #[test]
    fn weighted_add() {
        let mut store = ParamStore::new();
        let params = FusionParams::init(&mut store, "f", FusionKind::Add, 1, &mut seeded_rng(0, 0));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::full(&[1, 1], 2.0));
        let m = ModulationPair { scale: tape.constant(Tensor::full(&[1, 1], 3.0)), bias: x };
        let settings = FusionSettings { kind: FusionKind::Add, add_weights: (0.5, 2.0) };
        assert_eq!(fuse(&p, &settings, &params, x, Some(&m)).unwrap().value().data(), &[7.0]);
    }
}
