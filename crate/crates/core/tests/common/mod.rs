//! Straight-line reference evaluation on nested `Vec`s, written without the
//! tape so integration tests can compare whole compositions against it.

#![allow(dead_code)]

use moma::attention::Grid;
use moma::params::ParamStore;
use moma::ssm::{Orientation, ScanAxis, ScanPlan};
use moma::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vector(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

/// Named parameter as a matrix (vectors become one row).
pub fn param(store: &ParamStore, name: &str) -> Mat {
    let t = store.get(store.find(name).unwrap_or_else(|| panic!("no parameter {name}")));
    if t.rank() == 1 {
        vec![t.data().to_vec()]
    } else {
        mat(t)
    }
}

pub fn pvec(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(store.find(name).unwrap()).data().to_vec()
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn map(x: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    x.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
}

pub fn zip(x: &Mat, y: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
    x.iter().zip(y).map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| f(u, v)).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    (1.0 + x.exp()).ln()
}

pub fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
        })
        .collect()
}

/// Multi-head attention plus output projection where each token attends to
/// the tokens sharing its window id.
pub fn attention(store: &ParamStore, prefix: &str, x: &Mat, heads: usize, window_of: &[usize]) -> Mat {
    let p = |n: &str| param(store, &format!("{prefix}.{n}"));
    let q = linear(x, &p("wq"), &p("bq")[0]);
    let k = linear(x, &p("wk"), &p("bk")[0]);
    let v = linear(x, &p("wv"), &p("bv")[0]);
    let (n, c) = (x.len(), x[0].len());
    let d = c / heads;
    let mut out = vec![vec![0.0; c]; n];
    for i in 0..n {
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let peers: Vec<usize> = (0..n).filter(|&j| window_of[j] == window_of[i]).collect();
            let scores: Vec<f64> = peers
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (s, &j) in scores.iter().zip(&peers) {
                let w = (s - m).exp() / z;
                for c in cols.clone() {
                    out[i][c] += w * v[j][c];
                }
            }
        }
    }
    linear(&out, &p("wo"), &p("bo")[0])
}

/// Visiting order of a scan direction, built from the grid directly.
pub fn scan_order(axis: ScanAxis, orientation: Orientation, grid: Grid) -> Vec<usize> {
    let mut order = Vec::new();
    match axis {
        ScanAxis::SpatialRaster => {
            for t in 0..grid.frames {
                for h in 0..grid.height {
                    for w in 0..grid.width {
                        order.push((t * grid.height + h) * grid.width + w);
                    }
                }
            }
        }
        ScanAxis::TemporalMajor => {
            for h in 0..grid.height {
                for w in 0..grid.width {
                    for t in 0..grid.frames {
                        order.push((t * grid.height + h) * grid.width + w);
                    }
                }
            }
        }
    }
    if orientation == Orientation::Backward {
        order.reverse();
    }
    order
}

/// The SSM forwarding layer, one token at a time; returns (scale, bias).
pub fn ssm(store: &ParamStore, prefix: &str, plan: &ScanPlan, x: &Mat, grid: Grid, gelu_gate: bool) -> (Mat, Mat) {
    let p = |n: &str| param(store, &format!("{prefix}.{n}"));
    let c = x[0].len();
    let projected = linear(x, &p("in.w"), &p("in.b")[0]);
    let e = projected[0].len() / 2;
    let main: Mat = projected.iter().map(|r| r[..e].to_vec()).collect();
    let gate: Mat = projected.iter().map(|r| r[e..].to_vec()).collect();
    let n = x.len();
    let mut merged = vec![vec![0.0; e]; n];
    for (i, dir) in plan.directions().iter().enumerate() {
        let dp = |name: &str| p(&format!("dir{i}.{name}"));
        let order = scan_order(dir.axis, dir.orientation, grid);
        let seq: Mat = order.iter().map(|&j| main[j].clone()).collect();
        let (conv_w, conv_b) = (dp("conv.w"), dp("conv.b")[0].clone());
        let k = conv_w[0].len();
        let u: Mat = (0..n)
            .map(|t| {
                (0..e)
                    .map(|ch| {
                        let mut acc = conv_b[ch];
                        for (j, w) in conv_w[ch].iter().enumerate() {
                            let src = t as isize - (k as isize - 1) + j as isize;
                            if src >= 0 {
                                acc += w * seq[src as usize][ch];
                            }
                        }
                        silu(acc)
                    })
                    .collect()
            })
            .collect();
        let delta = map(&linear(&u, &dp("delta.w"), &dp("delta.b")[0]), softplus);
        let bm = linear(&u, &dp("b.w"), &dp("b.b")[0]);
        let cm = linear(&u, &dp("c.w"), &dp("c.b")[0]);
        let a = map(&dp("a_log"), |v| -v.exp());
        let d = dp("d")[0].clone();
        let s = a[0].len();
        let mut h = vec![vec![0.0; s]; e];
        for t in 0..n {
            for ch in 0..e {
                let mut y = d[ch] * u[t][ch];
                for st in 0..s {
                    h[ch][st] = (delta[t][ch] * a[ch][st]).exp() * h[ch][st] + delta[t][ch] * bm[t][st] * u[t][ch];
                    y += cm[t][st] * h[ch][st];
                }
                merged[order[t]][ch] += y;
            }
        }
    }
    let act = if gelu_gate { gelu } else { silu };
    let gated = zip(&merged, &map(&gate, act), |a, b| a * b);
    let out = linear(&gated, &p("out.w"), &p("out.b")[0]);
    let scale = out.iter().map(|r| r[..c].to_vec()).collect();
    let bias = out.iter().map(|r| r[c..].to_vec()).collect();
    (scale, bias)
}

pub fn max_rel_err(a: &Mat, b: &[f64]) -> f64 {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    assert_eq!(flat.len(), b.len());
    let scale = flat.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    flat.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Overwrites every trainable parameter with uniform values in `[lo, hi]`.
pub fn randomize_trainable(store: &mut ParamStore, lo: f64, hi: f64, seed: u64) {
    let mut rng = moma::tensor::seeded_rng(seed, 500);
    for id in store.trainable_ids() {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::uniform(&shape, lo, hi, &mut rng)).unwrap();
    }
}
