//! Shared inputs for the benchmarks.

use drtk::data::Dataset;
use drtk::dgm::{generate, DgmSpec};
use drtk::rng::RngStream;

/// A dataset drawn from a shipped mechanism with a fixed seed.
pub fn dataset(spec: &str, n: usize) -> Dataset {
    let spec = DgmSpec::builtin(spec).expect("shipped spec");
    generate(&spec, n, &RngStream::new(1, 0)).expect("generation succeeds")
}
