//! Mini-batch training with per-epoch shuffling, step-decay learning rates,
//! optional global-norm gradient clipping and optional augmentation.

use crate::data::{augment_batch, cast_batch, ImageDataset};
use crate::error::{Error, Result};
use crate::nn::layers::{Mode, BN_MOMENTUM};
use crate::nn::optim::{clip_global_norm, OptimizerKind, OptimizerState};
use crate::nn::{loss_grad_mode, Model};
use crate::rng;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// SGD momentum coefficient; ignored by Adam.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs (0-indexed) at which the learning rate is multiplied by
    /// `lr_decay_factor`; e.g. `[40, 50, 60]` scales epochs 40+, 50+, 60+.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    /// Clip gradients to this global L2 norm before each step.
    pub grad_clip: Option<f64>,
    /// Pad-and-crop plus horizontal-flip augmentation (color sets).
    pub augment: bool,
    /// Seed for the shuffle and augmentation streams.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            momentum: 0.9,
            epochs: 70,
            batch_size: 128,
            lr_decay_epochs: vec![40, 50, 60],
            lr_decay_factor: 0.1,
            grad_clip: None,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }
}

/// Trains `model` in place for `cfg.epochs` epochs; evaluates test accuracy
/// after each epoch when a test set is supplied.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    train_set: &ImageDataset,
    test_set: Option<&ImageDataset>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if train_set.input_shape() != model.spec.input_shape {
        return Err(Error::Shape(format!(
            "dataset images {:?} do not match model input {:?}",
            train_set.input_shape(),
            model.spec.input_shape
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Degenerate("cannot train on an empty dataset".into()));
    }

    let mut shuffle_rng = rng::stream(cfg.seed, "train/shuffle");
    let mut augment_rng = rng::stream(cfg.seed, "train/augment");
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        rng::shuffle(&mut shuffle_rng, &mut order);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (mut batch, labels) = train_set.gather(chunk);
            if cfg.augment {
                augment_batch(&mut batch, &mut augment_rng);
            }
            let x = cast_batch::<F>(batch);
            let (loss, mut grads, bn_updates) = loss_grad_mode(model, &x, &labels, Mode::Train)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, message: format!("batch loss is {loss}") });
            }
            if let Some(max_norm) = cfg.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            opt.step(&mut model.params, &grads, lr, cfg.momentum);
            for u in bn_updates {
                blend(model, &format!("{}.mean", u.name), &u.mean);
                blend(model, &format!("{}.var", u.name), &u.var);
            }
            loss_sum += loss;
            batches += 1;
        }
        if !model.params.all_finite() {
            return Err(Error::Diverged { epoch, message: "non-finite parameter".into() });
        }
        let test_accuracy = match test_set {
            Some(ts) => Some(crate::metrics::accuracy(model, ts)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            test_accuracy,
        });
    }
    Ok(history)
}

fn blend<F: Scalar>(model: &mut Model<F>, buffer: &str, batch_stat: &ndarray::Array1<f64>) {
    let buf = model.buffers.get_mut(buffer).expect("batch-norm buffer");
    for (b, &s) in buf.iter_mut().zip(batch_stat) {
        *b = F::from_f64((1.0 - BN_MOMENTUM) * b.into_f64() + BN_MOMENTUM * s);
    }
}
