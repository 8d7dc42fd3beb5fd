//! Selective scan kernels over plain tensors.
//!
//! Shapes throughout: `u, delta: [L, E]`, `a: [E, S]` (already negative),
//! `b, c: [L, S]`, `d: [E]`. Discretization is `Ā = exp(Δ·A)`, `B̄ = Δ·B`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{exp_nonpositive, Tensor};

#[derive(Debug, Clone, Copy)]
struct Dims {
    len: usize,
    hidden: usize,
    state: usize,
}

fn check(u: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, d: &Tensor) -> Result<Dims> {
    let (len, hidden) = u.dims2()?;
    let (ae, state) = a.dims2()?;
    let ok = delta.shape() == [len, hidden]
        && ae == hidden
        && b.shape() == [len, state]
        && c.shape() == [len, state]
        && d.shape() == [hidden];
    if !ok {
        return Err(Error::dim(format!(
            "selective scan shapes: u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
            u.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape(),
            d.shape()
        )));
    }
    if let Some(bad) = delta.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
        return Err(Error::contract(format!("selective scan needs delta > 0, found {bad}")));
    }
    Ok(Dims { len, hidden, state })
}

/// Advances `h` (`[E, S]`) by one step and writes `y_t` into `y_row`.
///
/// `dec` is scratch space of `E·S` values for the step's decays. Every scan
/// variant goes through this function, so they agree bit for bit.
#[inline]
#[allow(clippy::too_many_arguments)]
fn step(
    dims: Dims,
    t: usize,
    h: &mut [f64],
    dec: &mut [f64],
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    y_row: &mut [f64],
) {
    let Dims { hidden, state, .. } = dims;
    let (u_t, dt_t) = (&u[t * hidden..(t + 1) * hidden], &delta[t * hidden..(t + 1) * hidden]);
    let b_t = &b[t * state..(t + 1) * state];
    let c_t = &c[t * state..(t + 1) * state];
    fill_decays(dt_t, a, state, dec);
    for (e, (hrow, drow)) in h.chunks_exact_mut(state).zip(dec.chunks_exact(state)).enumerate() {
        let du = dt_t[e] * u_t[e];
        let mut acc = 0.0;
        for ((hv, &dv), (&bv, &cv)) in hrow.iter_mut().zip(drow).zip(b_t.iter().zip(c_t)) {
            *hv = dv * *hv + du * bv;
            acc += cv * *hv;
        }
        y_row[e] = acc + d[e] * u_t[e];
    }
}

/// Sequential reference recurrence; the oracle for every other scan variant.
pub fn selective_scan_ref(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<Tensor> {
    let dims = check(u, delta, a, b, c, d)?;
    let mut h = vec![0.0; dims.hidden * dims.state];
    let mut dec = h.clone();
    let mut y = Tensor::zeros(&[dims.len, dims.hidden]);
    for (t, y_row) in y.data_mut().chunks_mut(dims.hidden).enumerate() {
        step(dims, t, &mut h, &mut dec, u.data(), delta.data(), a.data(), b.data(), c.data(), d.data(), y_row);
    }
    Ok(y)
}

/// Chunked scan with carried state.
///
/// Pass one runs every chunk from a zero state and records its end state and
/// the product of its decays; those are combined sequentially into each
/// chunk's true initial state; pass two reruns every chunk from that state.
/// Both per-chunk passes are independent across chunks.
#[allow(clippy::too_many_arguments)]
pub fn selective_scan_chunked(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    chunk_size: usize,
) -> Result<Tensor> {
    if chunk_size == 0 {
        return Err(Error::contract("chunk_size must be at least 1"));
    }
    let dims = check(u, delta, a, b, c, d)?;
    if chunk_size >= dims.len {
        return selective_scan_ref(u, delta, a, b, c, d);
    }
    let (ud, dd, ad, bd, cd, skip) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let hs = dims.hidden * dims.state;
    let starts: Vec<usize> = (0..dims.len).step_by(chunk_size).collect();

    let summaries: Vec<(Vec<f64>, Vec<f64>)> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + chunk_size).min(dims.len);
            let mut h = vec![0.0; hs];
            let mut dec = vec![0.0; hs];
            let mut decay = vec![1.0; hs];
            let mut scratch = vec![0.0; dims.hidden];
            for t in start..end {
                step(dims, t, &mut h, &mut dec, ud, dd, ad, bd, cd, skip, &mut scratch);
                for (acc, &dv) in decay.iter_mut().zip(&dec) {
                    *acc *= dv;
                }
            }
            (h, decay)
        })
        .collect();

    let mut carried = Vec::with_capacity(starts.len());
    let mut h_in = vec![0.0; hs];
    for (local, decay) in &summaries {
        carried.push(h_in.clone());
        for i in 0..hs {
            h_in[i] = decay[i] * h_in[i] + local[i];
        }
    }

    let mut y = Tensor::zeros(&[dims.len, dims.hidden]);
    y.data_mut()
        .par_chunks_mut(chunk_size * dims.hidden)
        .zip(carried.into_par_iter())
        .enumerate()
        .for_each(|(k, (out, mut h))| {
            let start = k * chunk_size;
            let mut dec = vec![0.0; hs];
            for (i, y_row) in out.chunks_mut(dims.hidden).enumerate() {
                step(dims, start + i, &mut h, &mut dec, ud, dd, ad, bd, cd, skip, y_row);
            }
        });
    Ok(y)
}

/// Hidden states of one scan, kept for the backward pass.
#[derive(Debug)]
pub(crate) struct ScanTrace {
    /// `[L + 1, E·S]`; row 0 is the zero initial state.
    states: Tensor,
}

/// `out[e·S + s] = exp(Δ_e · A[e, s])` for one time step.
#[inline]
fn fill_decays(delta_t: &[f64], a: &[f64], state: usize, out: &mut [f64]) {
    for ((orow, arow), &dt) in out.chunks_exact_mut(state).zip(a.chunks_exact(state)).zip(delta_t) {
        for (o, &av) in orow.iter_mut().zip(arow) {
            *o = exp_nonpositive(dt * av);
        }
    }
}

/// Reference scan that also records its trace.
pub(crate) fn selective_scan_traced(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
) -> Result<(Tensor, ScanTrace)> {
    let Dims { len, hidden, state } = check(u, delta, a, b, c, d)?;
    let hs = hidden * state;
    let (ud, dd, ad, bd, cd, skip) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data());
    let mut states = Vec::with_capacity((len + 1) * hs);
    let mut h = vec![0.0; hs];
    let mut dec = vec![0.0; hs];
    states.extend_from_slice(&h);
    let dims = Dims { len, hidden, state };
    let mut y = vec![0.0; len * hidden];
    for (t, y_row) in y.chunks_exact_mut(hidden).enumerate() {
        step(dims, t, &mut h, &mut dec, ud, dd, ad, bd, cd, skip, y_row);
        states.extend_from_slice(&h);
    }
    Ok((Tensor::new(&[len, hidden], y)?, ScanTrace { states: Tensor::new(&[len + 1, hs], states)? }))
}

/// Gradients of `Σ g ⊙ scan(u, Δ, A, B, C, D)` for all six inputs, in that order.
///
/// Uses `trace` from the forward pass when given, otherwise recomputes it.
#[allow(clippy::too_many_arguments)]
pub(crate) fn selective_scan_vjp(
    u: &Tensor,
    delta: &Tensor,
    a: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d: &Tensor,
    g: &Tensor,
    trace: Option<&ScanTrace>,
) -> Result<[Tensor; 6]> {
    let owned;
    let trace = match trace {
        Some(t) => t,
        None => {
            owned = selective_scan_traced(u, delta, a, b, c, d)?.1;
            &owned
        }
    };
    let (len, hidden) = u.dims2()?;
    let state = a.shape()[1];
    let hs = hidden * state;
    let (ud, dd, ad, bd, cd, skip, gd) = (u.data(), delta.data(), a.data(), b.data(), c.data(), d.data(), g.data());
    let states = trace.states.data();
    let mut dec_t = vec![0.0; hs];

    let mut du = Tensor::zeros(&[len, hidden]);
    let mut ddelta = Tensor::zeros(&[len, hidden]);
    let mut da = Tensor::zeros(&[hidden, state]);
    let mut db = Tensor::zeros(&[len, state]);
    let mut dc = Tensor::zeros(&[len, state]);
    let mut dskip = Tensor::zeros(&[hidden]);
    {
        let (du_d, ddelta_d, da_d, db_d, dc_d, dskip_d) =
            (du.data_mut(), ddelta.data_mut(), da.data_mut(), db.data_mut(), dc.data_mut(), dskip.data_mut());
        // Adjoint of h_t accumulated from later steps.
        let mut carry = vec![0.0; hs];
        for t in (0..len).rev() {
            let h_t = &states[(t + 1) * hs..(t + 2) * hs];
            let h_prev = &states[t * hs..(t + 1) * hs];
            fill_decays(&dd[t * hidden..(t + 1) * hidden], ad, state, &mut dec_t);
            let b_t = &bd[t * state..(t + 1) * state];
            let c_t = &cd[t * state..(t + 1) * state];
            let db_t = &mut db_d[t * state..(t + 1) * state];
            let dc_t = &mut dc_d[t * state..(t + 1) * state];
            for e in 0..hidden {
                let idx = t * hidden + e;
                let (ut, dt, gy) = (ud[idx], dd[idx], gd[idx]);
                dskip_d[e] += gy * ut;
                let mut du_acc = gy * skip[e];
                let mut ddt_acc = 0.0;
                let r = e * state..(e + 1) * state;
                let (arow, ht, hp, dec, cr, da_row) =
                    (&ad[r.clone()], &h_t[r.clone()], &h_prev[r.clone()], &dec_t[r.clone()], &mut carry[r.clone()], &mut da_d[r]);
                for s in 0..state {
                    dc_t[s] += gy * ht[s];
                    let gh = cr[s] + gy * c_t[s];
                    let d_decay = gh * hp[s] * dec[s];
                    ddt_acc += d_decay * arow[s] + gh * b_t[s] * ut;
                    da_row[s] += d_decay * dt;
                    db_t[s] += gh * dt * ut;
                    du_acc += gh * dt * b_t[s];
                    cr[s] = gh * dec[s];
                }
                du_d[idx] = du_acc;
                ddelta_d[idx] = ddt_acc;
            }
        }
    }
    Ok([du, ddelta, da, db, dc, dskip])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    struct Case {
        u: Tensor,
        delta: Tensor,
        a: Tensor,
        b: Tensor,
        c: Tensor,
        d: Tensor,
    }

    fn case(len: usize, hidden: usize, state: usize, seed: u64) -> Case {
        let mut rng = seeded_rng(seed, 0);
        Case {
            u: Tensor::uniform(&[len, hidden], -1.0, 1.0, &mut rng),
            delta: Tensor::uniform(&[len, hidden], 0.01, 1.0, &mut rng),
            a: Tensor::uniform(&[hidden, state], -2.0, -0.1, &mut rng),
            b: Tensor::uniform(&[len, state], -1.0, 1.0, &mut rng),
            c: Tensor::uniform(&[len, state], -1.0, 1.0, &mut rng),
            d: Tensor::uniform(&[hidden], -1.0, 1.0, &mut rng),
        }
    }

    #[test]
    fn single_step_closed_form() {
        let k = case(1, 3, 2, 1);
        let y = selective_scan_ref(&k.u, &k.delta, &k.a, &k.b, &k.c, &k.d).unwrap();
        for e in 0..3 {
            let (u, dt) = (k.u.data()[e], k.delta.data()[e]);
            let cb: f64 = (0..2).map(|s| k.c.data()[s] * dt * k.b.data()[s] * u).sum();
            let expected = cb + k.d.data()[e] * u;
            assert!((y.data()[e] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn memoryless_when_decay_vanishes() {
        let mut k = case(5, 2, 3, 2);
        k.a = Tensor::full(&[2, 3], -1e6);
        let full = selective_scan_ref(&k.u, &k.delta, &k.a, &k.b, &k.c, &k.d).unwrap();
        for t in 0..5 {
            let pick = |x: &Tensor, w: usize| Tensor::new(&[1, w], x.row(t).to_vec()).unwrap();
            let y = selective_scan_ref(
                &pick(&k.u, 2),
                &pick(&k.delta, 2),
                &k.a,
                &pick(&k.b, 3),
                &pick(&k.c, 3),
                &k.d,
            )
            .unwrap();
            assert_eq!(y.row(0), full.row(t));
        }
    }

    #[test]
    fn chunked_matches_reference_for_all_chunk_sizes() {
        let k = case(17, 3, 4, 3);
        let reference = selective_scan_ref(&k.u, &k.delta, &k.a, &k.b, &k.c, &k.d).unwrap();
        for chunk in [1, 2, 5, 16, 17, 40] {
            let y = selective_scan_chunked(&k.u, &k.delta, &k.a, &k.b, &k.c, &k.d, chunk).unwrap();
            let rel = y.max_abs_diff(&reference) / reference.max_abs();
            assert!(rel < 1e-12, "chunk {chunk}: rel err {rel}");
        }
    }

    #[test]
    fn rejects_nonpositive_delta_and_zero_chunk() {
        let mut k = case(4, 2, 2, 4);
        k.delta.data_mut()[3] = 0.0;
        let err = selective_scan_ref(&k.u, &k.delta, &k.a, &k.b, &k.c, &k.d).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        let k = case(4, 2, 2, 4);
        assert!(selective_scan_chunked(&k.u, &k.delta, &k.a, &k.b, &k.c, &k.d, 0).is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let k = case(4, 2, 2, 5);
        let bad_b = Tensor::zeros(&[3, 2]);
        let err = selective_scan_ref(&k.u, &k.delta, &k.a, &bad_b, &k.c, &k.d).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
