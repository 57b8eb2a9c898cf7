//! The desk-scale toy task: a three-layer CNN and seeded image blobs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::io::{BlobConfig, BlobGenerator, Dataset};
use crate::model::{Activation, Layer, Model};
use crate::train::{sgd_finetune, Accuracy, LrSchedule, TrainConfig, evaluate};

/// Per-sample input shape of the toy CNN.
pub const TOY_INPUT: [usize; 3] = [3, 8, 8];

/// conv 3→8 k3 (uncompressed) → conv 8→8 k3 → fc 128→`num_classes`.
pub fn toy_cnn(num_classes: usize, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        Layer::conv_random("conv1", 8, 3, 3, 1, 0, Activation::Relu, &mut rng)?.with_compress(false),
        Layer::conv_random("conv2", 8, 8, 3, 1, 0, Activation::Relu, &mut rng)?,
        Layer::fc_random("fc", num_classes, 128, Activation::Identity, &mut rng)?,
    ];
    Model::new(layers, Some(TOY_INPUT.to_vec()))
}

/// Train and test splits of the two-class blob task.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub train: Dataset,
    pub test: Dataset,
}

pub const TOY_TRAIN_SAMPLES: usize = 512;
pub const TOY_TEST_SAMPLES: usize = 512;

impl ToyTask {
    /// The two-class task.
    pub fn generate(seed: u64) -> Result<Self> {
        Self::with_classes(2, seed)
    }

    pub fn with_classes(num_classes: usize, seed: u64) -> Result<Self> {
        let config = BlobConfig {
            num_classes,
            ..BlobConfig::default()
        };
        let generator = BlobGenerator::new(config, seed)?;
        Ok(Self {
            train: generator.generate(TOY_TRAIN_SAMPLES, seed.wrapping_mul(2).wrapping_add(1))?,
            test: generator.generate(TOY_TEST_SAMPLES, seed.wrapping_mul(2).wrapping_add(2))?,
        })
    }
}

/// Baseline training recipe for the toy CNN.
pub fn baseline_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        lr: LrSchedule::constant(0.01),
        seed,
        ..TrainConfig::default()
    }
}

/// Fresh toy CNN trained on `task.train`, with its test accuracy.
pub fn train_baseline(task: &ToyTask, seed: u64) -> Result<(Model, Accuracy)> {
    let mut model = toy_cnn(task.train.num_classes(), seed)?;
    sgd_finetune(&mut model, &task.train, &baseline_config(seed))?;
    let acc = evaluate(&model, &task.test)?;
    Ok((model, acc))
}
