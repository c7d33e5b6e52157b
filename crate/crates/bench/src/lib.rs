//! Deterministic inputs shared by the benchmarks in `benches/`.

use rgmps_core::harness::dataset;
use rgmps_core::model::Sample;
use rgmps_core::spatial::PatchSequence;
use rgmps_core::Tensor;

/// A smooth, non-constant fill in `[-1, 1]`.
pub fn pattern(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |i| ((i as f64) * 0.618_034).sin())
}

/// Scan input of `len` patches by `c` channels with positive keys.
pub fn scan_input(len: usize, c: usize) -> PatchSequence {
    let rows = |f: &dyn Fn(usize) -> f64| (0..len).map(|i| (0..c).map(|ch| f(i * c + ch)).collect()).collect();
    PatchSequence {
        keys: rows(&|k| 0.5 + 0.4 * (k as f64 * 0.37).sin()),
        values: rows(&|k| (k as f64 * 0.11).cos()),
        decays: rows(&|k| 0.3 + 0.2 * (k as f64 * 0.73).sin()),
        u: (0..c).map(|ch| 0.1 + 0.05 * ch as f64).collect(),
    }
}

pub fn demos(n: usize) -> Vec<Sample> {
    dataset::generate(n, 0).expect("synthetic demos").iter().map(dataset::to_sample).collect()
}
