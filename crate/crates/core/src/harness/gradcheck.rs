//! Central finite-difference checks of every differentiable operation.
//!
//! Each check builds a scalar `Σ out ⊙ R` with a fixed random `R`, takes the
//! tape gradient, and compares it with `(f(x+ε) − f(x−ε)) / 2ε` element by
//! element. The reported error for one tensor is
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-10)`, and a
//! check's error is the worst over its inputs.

use rand::Rng;

use crate::attention::{divide_tokens, AttentionWeights, Grid, VideoTensor, WindowSpec};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::fusion::{fuse, seqmod, FusionKind, FusionParams, FusionSettings};
use crate::model::{MoMaModel, Mode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::ssm::{ssm_forward, Activation, ModulationPair, ScanPlan, SsmConfig, SsmParams};
use crate::tensor::tape::selective_scan;
use crate::tensor::{seeded_rng, Tape, Tensor, Var};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of scalar inputs perturbed.
    pub coordinates: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-10)
}

/// Forward closure: parameters bound on a tape plus free inputs to one output.
type Forward<'a> = dyn for<'t> Fn(&Bound<'t>, &'t Tape, &[Var<'t>]) -> Result<Var<'t>> + 'a;

/// Compares tape and finite-difference gradients with respect to `inputs`
/// and the store parameters `params` (which must be trainable).
pub fn check(
    name: &str,
    store: &mut ParamStore,
    params: &[ParamId],
    inputs: &[Tensor],
    seed: u64,
    f: &Forward<'_>,
) -> Result<CheckResult> {
    let projection = {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let shape = f(&p, &tape, &vars)?.shape();
        Tensor::uniform(&shape, -1.0, 1.0, &mut seeded_rng(seed, 900))
    };
    let objective = |store: &ParamStore, inputs: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&p, &tape, &vars)?;
        let loss = out.mul(tape.constant(projection.clone()))?.sum();
        let value = loss.value().data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| (v, v.shape()))
            .chain(params.iter().map(|&id| (p[id], store.get(id).shape().to_vec())))
            .map(|(v, shape)| g.take(v).unwrap_or_else(|| Tensor::zeros(&shape)))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = objective(store, inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut coordinates = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, analytic_i) in analytic.iter().enumerate().take(inputs.len()) {
        let mut numeric = vec![0.0; analytic_i.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + EPSILON;
            let plus = objective(store, &work, false)?.0;
            work[i].data_mut()[j] = orig - EPSILON;
            let minus = objective(store, &work, false)?.0;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * EPSILON);
        }
        coordinates += numeric.len();
        worst = worst.max(relative_error(analytic_i.data(), &numeric));
    }
    for (k, &id) in params.iter().enumerate() {
        let analytic_k = &analytic[inputs.len() + k];
        let mut numeric = vec![0.0; analytic_k.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = orig + EPSILON;
            let plus = objective(store, inputs, false)?.0;
            store.get_mut(id).data_mut()[j] = orig - EPSILON;
            let minus = objective(store, inputs, false)?.0;
            store.get_mut(id).data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * EPSILON);
        }
        coordinates += numeric.len();
        worst = worst.max(relative_error(analytic_k.data(), &numeric));
    }
    Ok(CheckResult { name: name.to_string(), max_rel_err: worst, coordinates })
}

fn unit(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Check of a pure function of free inputs.
fn check_fn(
    name: &str,
    inputs: &[Tensor],
    seed: u64,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
) -> Result<CheckResult> {
    check(name, &mut ParamStore::new(), &[], inputs, seed, &|_, tape, v| f(tape, v))
}

/// Redraws every trainable parameter uniformly in [-1, 1].
///
/// Initial values are a poor place to check gradients: the zero output
/// projection hides everything upstream, and the small initial step sizes
/// leave some gradients near the finite-difference noise floor.
fn randomize_trainable(store: &mut ParamStore, rng: &mut impl Rng) {
    for id in store.trainable_ids() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, unit(&shape, rng)).expect("same shape");
    }
}

fn tiny_ssm(store: &mut ParamStore, channels: usize, plan: &ScanPlan, seed: u64) -> SsmParams {
    let config = SsmConfig { channels, hidden: 2 * channels, state: 2, conv_width: 4, gate: Activation::Gelu };
    let mut rng = seeded_rng(seed, 11);
    let params = SsmParams::init(store, "ssm", config, plan.len(), &mut rng);
    randomize_trainable(store, &mut rng);
    params
}

/// The full suite, in a fixed order.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = seeded_rng(seed, 10);
    let mut out = Vec::new();

    let (a, b) = (unit(&[5, 7], &mut rng), unit(&[7, 3], &mut rng));
    out.push(check_fn("matmul", &[a, b], seed, |_, v| v[0].matmul(v[1]))?);
    out.push(check_fn("softmax", &[unit(&[1, 6], &mut rng)], seed, |_, v| Ok(v[0].softmax()))?);
    out.push(check_fn("softmax_rows", &[unit(&[3, 6], &mut rng)], seed, |_, v| Ok(v[0].softmax()))?);
    let (x, y) = (unit(&[4, 3], &mut rng), unit(&[4, 3], &mut rng));
    out.push(check_fn("add", &[x.clone(), y.clone()], seed, |_, v| v[0].add(v[1]))?);
    out.push(check_fn("sub", &[x.clone(), y.clone()], seed, |_, v| v[0].sub(v[1]))?);
    out.push(check_fn("mul", &[x.clone(), y.clone()], seed, |_, v| v[0].mul(v[1]))?);
    out.push(check_fn("max", &[x.clone(), y.clone()], seed, |_, v| v[0].maximum(v[1]))?);
    out.push(check_fn("scale_offset", std::slice::from_ref(&x), seed, |_, v| Ok(v[0].scale(-1.5).offset(0.3)))?);
    out.push(check_fn("gelu", std::slice::from_ref(&x), seed, |_, v| Ok(v[0].gelu()))?);
    out.push(check_fn("exp", std::slice::from_ref(&x), seed, |_, v| Ok(v[0].exp()))?);
    out.push(check_fn("sigmoid", std::slice::from_ref(&x), seed, |_, v| Ok(v[0].sigmoid()))?);
    out.push(check_fn("silu", std::slice::from_ref(&x), seed, |_, v| Ok(v[0].silu()))?);
    out.push(check_fn("softplus", std::slice::from_ref(&x), seed, |_, v| Ok(v[0].softplus()))?);
    let (gain, bias) = (unit(&[3], &mut rng), unit(&[3], &mut rng));
    out.push(check_fn("layer_norm", &[x.clone(), gain, bias.clone()], seed, |_, v| v[0].layer_norm(v[1], v[2]))?);
    let w = unit(&[3, 5], &mut rng);
    let wb = unit(&[5], &mut rng);
    out.push(check_fn("linear", &[x.clone(), w, wb], seed, |_, v| v[0].linear(v[1], Some(v[2])))?);
    out.push(check_fn("reshape_transpose", std::slice::from_ref(&x), seed, |_, v| v[0].transpose()?.reshape(&[2, 6]))?);
    out.push(check_fn("mean_axis_rows", std::slice::from_ref(&x), seed, |_, v| v[0].mean_axis(0))?);
    out.push(check_fn("mean_axis_cols", std::slice::from_ref(&x), seed, |_, v| v[0].mean_axis(1))?);
    out.push(check_fn("sum_mean", std::slice::from_ref(&x), seed, |_, v| v[0].sum().add(v[0].mean().scale(3.0)))?);
    out.push(check_fn("gather_rows", std::slice::from_ref(&x), seed, |_, v| v[0].gather_rows(vec![3, 0, 0, 2].into()))?);
    out.push(check_fn("slice_concat", &[x.clone(), y.clone()], seed, |_, v| {
        Var::concat_cols(&[v[0].slice_cols(1, 2)?, v[1]])
    })?);
    let s = unit(&[1], &mut rng);
    out.push(check_fn("scalar_broadcast", &[x.clone(), s], seed, |_, v| v[0].mul_scalar(v[1])?.add_scalar(v[1]))?);
    out.push(check_fn("cross_entropy", &[unit(&[1, 4], &mut rng)], seed, |_, v| v[0].cross_entropy(2))?);
    let (cx, cw, cb) = (unit(&[6, 3], &mut rng), unit(&[3, 4], &mut rng), unit(&[3], &mut rng));
    out.push(check_fn("causal_conv", &[cx, cw, cb], seed, |_, v| v[0].causal_conv(v[1], v[2]))?);

    let (q, k, v) = (unit(&[8, 4], &mut rng), unit(&[8, 4], &mut rng), unit(&[8, 4], &mut rng));
    out.push(check_fn("attention", &[q, k, v], seed, |_, v| Var::block_attention(v[0], v[1], v[2], 4, 2))?);
    out.push(divide_check(seed, &mut rng)?);

    let (len, e, st) = (7, 3, 2);
    let scan_inputs = [
        unit(&[len, e], &mut rng),
        Tensor::uniform(&[len, e], 0.1, 1.0, &mut rng),
        Tensor::uniform(&[e, st], -1.5, -0.2, &mut rng),
        unit(&[len, st], &mut rng),
        unit(&[len, st], &mut rng),
        unit(&[e], &mut rng),
    ];
    out.push(check_fn("scan", &scan_inputs, seed, |_, v| selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]))?);

    out.push(ssm_check(seed, &mut rng)?);

    let (sx, s1, s2) = (unit(&[4, 3], &mut rng), unit(&[4, 3], &mut rng), unit(&[4, 3], &mut rng));
    out.push(check_fn("seqmod", &[sx, s1, s2], seed, |_, v| {
        seqmod(v[0], &ModulationPair { scale: v[1], bias: v[2] })
    })?);
    for kind in FusionKind::ALL {
        out.push(fusion_check(kind, seed, &mut rng)?);
    }
    out.push(full_layer_check(seed)?);
    Ok(out)
}

fn divide_check(seed: u64, rng: &mut impl Rng) -> Result<CheckResult> {
    let grid = Grid::new(2, 2, 4);
    let mut store = ParamStore::new();
    let weights = AttentionWeights::init(&mut store, "attn", 4, 2, rng)?;
    let x = unit(&[grid.tokens(), 4], rng);
    check("divide", &mut store, &[], &[x], seed, &|p, _, v| divide_tokens(p, &weights, v[0], grid, WindowSpec::square(2)))
}

fn ssm_check(seed: u64, rng: &mut impl Rng) -> Result<CheckResult> {
    let grid = Grid::new(2, 2, 2);
    let plan = ScanPlan::four_way();
    let mut store = ParamStore::new();
    let params = tiny_ssm(&mut store, 3, &plan, seed);
    let ids = store.trainable_ids();
    let x = unit(&[grid.tokens(), 3], rng);
    check("ssm_forward", &mut store, &ids, &[x], seed, &|p, _, v| {
        let m = ssm_forward(p, &params, &plan, v[0], grid)?;
        Var::concat_cols(&[m.scale, m.bias])
    })
}

fn fusion_check(kind: FusionKind, seed: u64, rng: &mut impl Rng) -> Result<CheckResult> {
    let c = 3;
    let mut store = ParamStore::new();
    let params = FusionParams::init(&mut store, "fusion", kind, c, rng);
    if let FusionParams::RawAdan { w, .. } = params {
        // Larger head weights so the pooled path carries visible gradient.
        store.set(w, Tensor::randn(&[2 * c, 3], 0.5, rng))?;
    }
    let ids = store.trainable_ids();
    let settings = FusionSettings { kind, add_weights: (0.7, 1.3) };
    let inputs = [unit(&[4, c], rng), unit(&[4, c], rng), unit(&[4, c], rng)];
    check(&format!("fusion_{kind}"), &mut store, &ids, &inputs, seed, &|p, _, v| {
        let m = ModulationPair { scale: v[1], bias: v[2] };
        let fused = fuse(p, &settings, &params, v[0], Some(&m))?;
        // Skip ignores the SSM branch; keep the check meaningful by adding it back.
        if kind == FusionKind::Skip {
            fused.add(v[1].mul(v[2])?)
        } else {
            Ok(fused)
        }
    })
}

/// End-to-end loss of a one-layer modulated model against every trainable parameter.
fn full_layer_check(seed: u64) -> Result<CheckResult> {
    let cfg = ModelConfig {
        channels: 4,
        heads: 2,
        layers: 1,
        patch: 1,
        frames: 2,
        height: 2,
        width: 2,
        classes: 3,
        pattern: "[TM]1".into(),
        window: "1x2".into(),
        ssm_state: 2,
        ..ModelConfig::default()
    };
    let mut model = MoMaModel::new(&cfg, seed)?;
    let mut rng = seeded_rng(seed, 12);
    randomize_trainable(model.store_mut(), &mut rng);
    let grid = Grid::new(cfg.frames, cfg.height, cfg.width);
    let video = VideoTensor::new(grid, unit(&[grid.tokens(), 1], &mut rng))?;
    let teacher = unit(&[1, cfg.channels], &mut rng);
    let ids = model.store().trainable_ids();
    let mut store = model.store().clone();
    check("full_layer", &mut store, &ids, &[], seed, &|p, tape, _| {
        let out = model.forward(p, tape, &video, Mode::Adapted)?;
        model.loss(&out, 1, &teacher, 0.1)
    })
}
