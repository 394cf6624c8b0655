//! Supervised source training.

use cafa::align::LossSpec;
use cafa::nn::{self, AdaptiveModel, Architecture, StatMode};
use cafa::tta::{adam_step, AdamHyper, AdamState, LabeledBatch};
use cafa::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::synthetic::SourceData;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Drives weight init and minibatch order.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::ConfigInvalid(format!(
                "pretraining needs epochs >= 1 and batch_size >= 2, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "learning_rate {} must be > 0",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: AdaptiveModel,
    /// Accuracy on the held-out source test set, running statistics.
    pub source_accuracy: f64,
    /// Mean minibatch loss of the last epoch.
    pub final_loss: f64,
}

/// Trains every parameter with cross-entropy, updating running BN
/// statistics after each minibatch.
pub fn pretrain_source(arch: &Architecture, data: &SourceData, config: &PretrainConfig) -> Result<Pretrained> {
    if arch.n_classes < 2 {
        return Err(Error::ConfigInvalid(format!(
            "classification needs at least 2 classes, got {}",
            arch.n_classes
        )));
    }
    config.validate()?;
    let train = &data.train;
    if train.inputs.cols() != arch.input_dim || train.labels.iter().any(|&y| y >= arch.n_classes) {
        return Err(Error::ConfigInvalid(format!(
            "architecture ({} inputs, {} classes) does not fit the source data",
            arch.input_dim, arch.n_classes
        )));
    }
    let mut model = AdaptiveModel::new(arch, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let hyper = AdamHyper {
        lr: config.learning_rate,
        ..AdamHyper::default()
    };
    let mut adam = AdamState::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for idx in order.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let x = train.inputs.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let g = match nn::grad_all(&model, &x, StatMode::TrainUpdate, &LossSpec::SupervisedCe(&y)) {
                Err(Error::NonFiniteLoss(loss)) => return Err(Error::TrainingDiverged { epoch, loss }),
                Err(Error::NonFinite) => return Err(Error::TrainingDiverged { epoch, loss: f64::NAN }),
                other => other?,
            };
            adam_step(&mut model, &g.grads, &mut adam, &hyper)?;
            model.commit_batch_stats(&g.batch_stats)?;
            total += g.loss;
            count += 1;
        }
        final_loss = total / count as f64;
        if !final_loss.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                loss: final_loss,
            });
        }
    }
    let source_accuracy = accuracy(&model, &data.test)?;
    Ok(Pretrained {
        model,
        source_accuracy,
        final_loss,
    })
}

/// Fraction of `batch` classified correctly with running statistics.
pub fn accuracy(model: &AdaptiveModel, batch: &LabeledBatch) -> Result<f64> {
    let pred = model.predict(&batch.inputs, StatMode::RunningEval)?;
    let hits = pred.iter().zip(&batch.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / batch.len() as f64)
}
