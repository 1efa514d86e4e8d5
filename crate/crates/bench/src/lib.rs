//! Fixtures shared by the benchmarks.

use at2_core::at2::{TrainCache, TrainConfig};
use at2_core::backend::{planted_generate, PlantedBackend, PlantedConfig};
use at2_core::rng::StreamKey;
use at2_core::toy::{toy_generate, MaskMode, ToyBackend, ToyConfig, ToyDataConfig, ToyModel};
use at2_core::Example;

pub fn toy_fixture(n: usize) -> (ToyBackend, Vec<Example>) {
    let model = ToyModel::new(ToyConfig::default()).expect("default toy config is valid");
    let data = toy_generate(&model, &ToyDataConfig::default(), n).expect("toy generation");
    (ToyBackend::new(model, MaskMode::PreSoftmaxNegInf), data)
}

pub fn planted_fixture(n: usize) -> (PlantedBackend, Vec<Example>) {
    let config = PlantedConfig {
        noise_sigma: 0.3,
        ..PlantedConfig::default()
    };
    let samples = planted_generate(&config, n).expect("planted generation");
    let backend = PlantedBackend::new(config, &samples).expect("planted backend");
    (backend, samples.into_iter().map(|s| s.example).collect())
}

/// Random binary design with `m` rows and `d` columns plus a noisy linear response.
pub fn lasso_fixture(m: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let key = StreamKey::new(seed);
    let w: Vec<f64> = (0..d as u64).map(|j| key.derive(0).gaussian_at(j)).collect();
    let rows: Vec<Vec<f64>> = (0..m as u64)
        .map(|i| (0..d as u64).map(|j| f64::from(key.derive(1 + i).bit_at(j) as u8)).collect())
        .collect();
    let y = rows
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.1 * key.derive(u64::MAX).gaussian_at(i as u64)
        })
        .collect();
    (rows, y)
}

/// Phase-one cache for `n` planted examples, ready for `optimize`.
pub fn train_cache(n: usize) -> TrainCache {
    let (backend, data) = planted_fixture(n);
    TrainCache::build(&backend, &data, &TrainConfig::default()).expect("cache")
}
