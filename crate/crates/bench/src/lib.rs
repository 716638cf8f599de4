//! Shared fixtures for the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanloc::data::generate_dataset;
use spanloc::{Model, RunConfig, Sample};

/// Uniform `[n × n]` cost matrix.
pub fn random_cost(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, n), |_| rng.gen_range(0.0..10.0))
}

/// A freshly initialized model and one sample for a preset.
pub fn model_and_sample(preset: &str) -> (RunConfig, Model<f32>, Sample) {
    let cfg = RunConfig::preset(preset).expect("known preset");
    let model = Model::new(cfg.model_config(), cfg.seed).expect("valid preset");
    let data = spanloc::DatasetConfig {
        num_samples: 1,
        ..cfg.val_data_config()
    };
    let sample = generate_dataset(&data).expect("generates").remove(0);
    (cfg, model, sample)
}
