//! Small configurations that keep integration tests fast.

#![allow(dead_code)]

use layerseg::dataset::Dataset;
use layerseg::nn::ModelConfig;
use layerseg::synth::{generate_corpus, SynthConfig};
use layerseg::train::TrainConfig;

pub fn tiny_synth(seed: u64) -> SynthConfig {
    SynthConfig {
        surfaces: 3,
        height: 32,
        width: 32,
        max_amplitude: 2.0,
        labeled_fraction: 0.3,
        samples: 20,
        val_samples: 4,
        test_samples: 4,
        per_volume: 5,
        seed,
        ..SynthConfig::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        height: 32,
        width: 32,
        surfaces: 3,
        stages: 2,
        base_channels: 4,
        style_dim: 4,
        decoder_channels: 4,
        film_hidden: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_labeled: 2,
        batch_unlabeled: 2,
        iterations: 6,
        val_every: 3,
        learning_rate: 1e-3,
        delta: 4,
        seed,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}

pub fn tiny_corpus(seed: u64) -> [Dataset; 3] {
    generate_corpus(&tiny_synth(seed)).unwrap()
}
