mod common;

use common::*;
use moma::attention::{Grid, VideoTensor};
use moma::config::ModelConfig;
use moma::fusion::FusionKind;
use moma::model::{MoMaModel, Mode};
use moma::params::ParamStore;
use moma::ssm::{selective_scan_ref, ssm_forward, Activation, ScanPlan, SsmConfig, SsmParams};
use moma::tensor::{seeded_rng, Tape, Tensor};

#[test]
fn ssm_forward_matches_hand_recurrence() {
    let grid = Grid::new(2, 2, 2);
    let plan = ScanPlan::four_way();
    for (seed, gate) in [(1, Activation::Gelu), (2, Activation::Silu)] {
        let config = SsmConfig { channels: 2, hidden: 4, state: 2, conv_width: 4, gate };
        let mut store = ParamStore::new();
        let params = SsmParams::init(&mut store, "ssm", config, plan.len(), &mut seeded_rng(seed, 0));
        randomize_trainable(&mut store, -1.0, 1.0, seed);
        let x = Tensor::uniform(&[grid.tokens(), 2], -1.0, 1.0, &mut seeded_rng(seed, 1));

        let tape = Tape::new();
        let p = store.bind(&tape);
        let m = ssm_forward(&p, &params, &plan, tape.constant(x.clone()), grid).unwrap();
        let (scale, bias) = ssm(&store, "ssm", &plan, &mat(&x), grid, gate == Activation::Gelu);
        let e1 = max_rel_err(&scale, m.scale.value().data());
        let e2 = max_rel_err(&bias, m.bias.value().data());
        assert!(e1 < 1e-9 && e2 < 1e-9, "seed {seed}: scale {e1:e}, bias {e2:e}");
    }
}

fn scan_inputs(len: usize, e: usize, s: usize, seed: u64) -> [Tensor; 6] {
    let mut rng = seeded_rng(seed, 2);
    [
        Tensor::uniform(&[len, e], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[len, e], 0.1, 1.0, &mut rng),
        Tensor::uniform(&[e, s], -2.0, -0.5, &mut rng),
        Tensor::uniform(&[len, s], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[len, s], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[e], -1.0, 1.0, &mut rng),
    ]
}

/// `y_t = C_t · (Δ_t B_t u_t) + D u_t` when nothing carries over between steps.
fn memoryless(u: &Tensor, delta: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor, t: usize, e: usize) -> f64 {
    let (ue, s) = (u.dims2().unwrap().1, b.dims2().unwrap().1);
    let du = delta.data()[t * ue + e] * u.data()[t * ue + e];
    (0..s).map(|k| c.data()[t * s + k] * b.data()[t * s + k] * du).sum::<f64>() + d.data()[e] * u.data()[t * ue + e]
}

#[test]
fn single_step_closed_form() {
    let [u, delta, a, b, c, d] = scan_inputs(1, 3, 2, 5);
    let y = selective_scan_ref(&u, &delta, &a, &b, &c, &d).unwrap();
    for e in 0..3 {
        let expect = memoryless(&u, &delta, &b, &c, &d, 0, e);
        assert!((y.data()[e] - expect).abs() < 1e-15);
    }
}

#[test]
fn strongly_decaying_state_forgets_the_past() {
    let [u, delta, _, b, c, d] = scan_inputs(6, 3, 2, 6);
    let a = Tensor::full(&[3, 2], -1e4);
    let y = selective_scan_ref(&u, &delta, &a, &b, &c, &d).unwrap();
    for t in 0..6 {
        for e in 0..3 {
            assert!((y.data()[t * 3 + e] - memoryless(&u, &delta, &b, &c, &d, t, e)).abs() < 1e-12);
        }
    }
}

#[test]
fn modulated_layer_matches_straight_line_composition() {
    let cfg = ModelConfig {
        channels: 4,
        heads: 2,
        layers: 1,
        patch: 1,
        frames: 2,
        height: 2,
        width: 2,
        in_channels: 1,
        classes: 3,
        pattern: "[TM]1".into(),
        window: "1x2".into(),
        fusion: FusionKind::SeqMod,
        ssm_state: 2,
        ..ModelConfig::default()
    };
    let mut model = MoMaModel::new(&cfg, 4).unwrap();
    randomize_trainable(model.store_mut(), -1.0, 1.0, 4);
    let grid = Grid::new(2, 2, 2);
    let pixels = Tensor::uniform(&[8, 1], -1.0, 1.0, &mut seeded_rng(4, 3));
    let video = VideoTensor::new(grid, pixels.clone()).unwrap();
    let logits = model.logits(&video, Mode::Adapted).unwrap();

    let store = model.store();
    let pos = param(store, "patch.pos");
    let embedded = linear(&mat(&pixels), &param(store, "patch.w"), &pvec(store, "patch.b"));
    let x: Mat = embedded.iter().enumerate().map(|(i, r)| r.iter().zip(&pos[i % 4]).map(|(a, b)| a + b).collect()).collect();
    let h = layer_norm(&x, &pvec(store, "layer0.ln1.gain"), &pvec(store, "layer0.ln1.bias"));
    // 1x2 windows: token (t, row, col) belongs to window (t, row).
    let window_of: Vec<usize> = (0..8).map(|i| i / 2).collect();
    let a = attention(store, "layer0", &h, 2, &window_of);
    let (scale, bias) = ssm(store, "adapter0.ssm", model.scan_plan(), &a, grid, true);
    let modulated = zip(&zip(&scale, &a, |s, v| s * v + v), &bias, |v, b| v + b);
    let x = zip(&x, &modulated, |u, v| u + v);
    let h2 = layer_norm(&x, &pvec(store, "layer0.ln2.gain"), &pvec(store, "layer0.ln2.bias"));
    let f = map(&linear(&h2, &param(store, "layer0.ffn.w1"), &pvec(store, "layer0.ffn.b1")), gelu);
    let f = linear(&f, &param(store, "layer0.ffn.w2"), &pvec(store, "layer0.ffn.b2"));
    let x = zip(&x, &f, |u, v| u + v);
    let pooled: Vec<f64> = (0..4).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / 8.0).collect();
    let expect = linear(&vec![pooled], &param(store, "head.w"), &pvec(store, "head.b"));
    let err = max_rel_err(&expect, logits.data());
    assert!(err < 1e-9, "composition rel err {err:e}");
}
