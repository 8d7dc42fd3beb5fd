//! Randomized equivalence of the chunked scan against the sequential reference.

use rand::Rng;

use crate::error::Result;
use crate::ssm::{selective_scan_chunked, selective_scan_ref};
use crate::tensor::{seeded_rng, Tensor};

pub const TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCase {
    pub len: usize,
    pub hidden: usize,
    pub state: usize,
    pub chunk: usize,
    /// `max |chunked − ref| / max |ref|`.
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
}

impl OracleReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

/// `cases` random problems with `L ≤ max_len`, `E, S ≤ 8` and random chunk sizes.
pub fn run_scan_oracle(seed: u64, cases: usize, max_len: usize) -> Result<OracleReport> {
    let mut rng = seeded_rng(seed, 20);
    let mut out = Vec::with_capacity(cases);
    for _ in 0..cases {
        let len = rng.random_range(1..=max_len.max(1));
        let hidden = rng.random_range(1..=8);
        let state = rng.random_range(1..=8);
        let chunk = rng.random_range(1..=len + 2);
        let mut draw = |shape: &[usize], lo: f64, hi: f64| Tensor::uniform(shape, lo, hi, &mut rng);
        let u = draw(&[len, hidden], -1.0, 1.0);
        let delta = draw(&[len, hidden], 1e-3, 1.0);
        let a = draw(&[hidden, state], -2.0, 1.0).map(|v| -v.exp());
        let b = draw(&[len, state], -1.0, 1.0);
        let c = draw(&[len, state], -1.0, 1.0);
        let d = draw(&[hidden], -1.0, 1.0);
        let reference = selective_scan_ref(&u, &delta, &a, &b, &c, &d)?;
        let fast = selective_scan_chunked(&u, &delta, &a, &b, &c, &d, chunk)?;
        let rel_err = fast.max_abs_diff(&reference) / reference.max_abs().max(f64::MIN_POSITIVE);
        out.push(OracleCase { len, hidden, state, chunk, rel_err });
    }
    Ok(OracleReport { cases: out })
}
