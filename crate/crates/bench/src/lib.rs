//! Shared fixtures for the benchmarks.

use etsc_core::data::{generate_synthetic, SynthConfig};
use etsc_core::model::InputDims;
use etsc_core::shapelet::ShapeletConfig;
use etsc_core::{Model, ModelConfig, SeriesBatch};

/// First `batch` samples of the default synthetic task.
pub fn default_batch(batch: usize) -> SeriesBatch {
    let data = generate_synthetic(&SynthConfig::default()).expect("default synth config is valid");
    let idx: Vec<usize> = (0..batch).collect();
    data.select(&idx).expect("batch within dataset")
}

/// Default model for `data`.
pub fn default_model(data: &SeriesBatch, config: ModelConfig) -> Model {
    let dims = InputDims {
        channels: data.channels(),
        length: data.length(),
        classes: data.num_classes,
    };
    Model::new(config, ShapeletConfig::default(), dims, 0).expect("default model builds")
}
