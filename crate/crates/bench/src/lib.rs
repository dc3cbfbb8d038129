//! Shared fixtures for the benchmarks.

use spd_core::model::init_model;
use spd_core::{Model, ModelConfig, Tensor};

/// Default-sized toy model with a fixed seed.
pub fn bench_model(n_layers: usize) -> Model {
    init_model(&ModelConfig { n_layers, ..ModelConfig::default() }, 0).expect("default config is valid")
}

/// Deterministic token ids cycling through the vocabulary.
pub fn bench_tokens(n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|i| ((i * 31 + 7) % vocab) as u32).collect()
}

/// Hidden-state matrix with smooth deterministic entries.
pub fn bench_hidden(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i as f64) * 0.37).sin()).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Per-head signature vectors spread on a circle with a little jitter.
pub fn bench_signatures(n_heads: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n_heads)
        .map(|h| (0..dim).map(|k| ((h * dim + k) as f64 * 1.7).cos() + (h as f64 * 0.3).sin()).collect())
        .collect()
}
