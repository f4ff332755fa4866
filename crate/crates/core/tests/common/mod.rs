//! Shared helpers for the integration tests: literal metric oracles, random
//! instance generators and small training fixtures.

#![allow(dead_code)]

pub mod oracle;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A random prediction in `[0, 1]`.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random())
}

/// A random binary mask. Alternates between a filled rectangle, scattered
/// pixels and the two constant masks so the degenerate branches get hit too.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    match rng.random_range(0..10) {
        0 => Array2::zeros((h, w)),
        1 => Array2::ones((h, w)),
        2..=5 => {
            let y0 = rng.random_range(0..h);
            let x0 = rng.random_range(0..w);
            let y1 = rng.random_range(y0..h) + 1;
            let x1 = rng.random_range(x0..w) + 1;
            Array2::from_shape_fn((h, w), |(y, x)| ((y0..y1).contains(&y) && (x0..x1).contains(&x)) as u8 as f64)
        }
        _ => {
            let p = rng.random_range(0.1..0.7);
            Array2::from_shape_fn((h, w), |_| rng.random_bool(p) as u8 as f64)
        }
    }
}

use unisod::backbone::{BackboneConfig, BackboneVariant};
use unisod::config::ModelConfig;
use unisod::params::ParamStore;
use unisod::trainer::{RunOutput, Trainer};
use unisod::{Modality, TrainConfig, TrainMode, UniSod};

/// A model small enough to train for a few steps in well under a second.
pub fn tiny_model() -> UniSod {
    UniSod::new(ModelConfig {
        backbone: BackboneConfig {
            channels: [4, 8, 8, 16],
            variant: BackboneVariant::ToyConv,
        },
        layers: 1,
        decoder_width: 8,
        input_hw: (32, 32),
    })
    .unwrap()
}

pub fn tiny_config(mode: TrainMode, task: Modality, steps: u64) -> TrainConfig {
    let mut c = TrainConfig::toy(mode, task);
    c.max_steps = Some(steps);
    c.batch_size = 2;
    c
}

/// Base parameters after a short RGB pre-training run.
pub fn pretrained(model: &UniSod, samples: &[unisod::data::Sample], steps: u64, seed: u64) -> ParamStore {
    let mut cfg = TrainConfig::toy(TrainMode::Pretrain, Modality::Rgb);
    cfg.max_steps = Some(steps);
    cfg.seed = seed;
    let mut t = Trainer::from_scratch(model, cfg).unwrap();
    t.run(samples, &RunOutput::default()).unwrap();
    t.params().clone()
}

/// Bitwise equality of two parameter stores, naming the first difference.
pub fn assert_bitwise_eq(a: &ParamStore, b: &ParamStore) {
    assert_eq!(a.names().collect::<Vec<_>>(), b.names().collect::<Vec<_>>());
    for (name, t) in a.iter() {
        let u = b.get(name).unwrap();
        let same = t.iter().zip(u.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "`{name}` differs");
    }
}
