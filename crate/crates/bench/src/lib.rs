//! Shared fixtures for the benchmarks.

use otlab::data::gen_blobs;
use otlab::nets::Architecture;
use otlab::{Dataset, Pipeline};

/// An MNIST-shaped synthetic batch and a freshly initialized pipeline.
pub fn mnist_shaped(n: usize) -> (Pipeline, Dataset) {
    let ds = gen_blobs(10, n.div_ceil(10), 784, 10.0, 1).unwrap().take_first(n).unwrap();
    let p = Pipeline::init(&Architecture::desk(784, 4, 10), 1).unwrap();
    (p, ds)
}
