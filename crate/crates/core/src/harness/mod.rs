//! Synthetic data, verification suites, ablations and benchmarks.

pub mod ablation;
pub mod bench;
pub mod data;
pub mod gradcheck;
pub mod oracle;
pub mod report;
