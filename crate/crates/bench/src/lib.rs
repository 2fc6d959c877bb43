//! Shared fixtures for the benchmarks.

use fedsparse::dataset::{generate, Dataset, SceneSpec};
use fedsparse::detector::{build_model, GridTarget};
use fedsparse::{DetectorConfig, ModelParams, Tensor};

/// A default-sized model and one batch of synthetic images with targets.
pub fn training_batch(batch: usize) -> (ModelParams, Tensor, Vec<GridTarget>) {
    let config = DetectorConfig::default();
    let samples = generate(&SceneSpec::default(), batch).expect("default scene is valid");
    let data = Dataset::new(samples, config.grid_size, config.num_classes).expect("consistent dataset");
    let indices: Vec<usize> = (0..batch).collect();
    let (images, targets) = data.batch(&indices);
    (build_model(&config, 1).expect("default config is valid"), images, targets)
}

/// `count` copies of a default model with distinct seeds.
pub fn models(count: usize) -> Vec<ModelParams> {
    (0..count as u64).map(|s| build_model(&DetectorConfig::default(), s).expect("valid")).collect()
}
