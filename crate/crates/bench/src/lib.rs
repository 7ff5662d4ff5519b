//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use rfalcf_core::data;

/// Nonnegative three-blob data with `n` samples of dimension `d`, shifted so
/// every entry is nonnegative.
pub fn blobs(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut dm = data::make_blobs(n.div_ceil(3), 3, d, 3.0, seed).expect("valid blob sizes");
    dm.shift_nonnegative();
    dm.x
}
