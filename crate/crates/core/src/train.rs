//! Adam with a multi-step learning-rate schedule, class-balanced batches,
//! per-epoch validation and best-checkpoint selection.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    augment, stack_images, substream, weighted_draws, AugmentConfig, DataError, Sample, Split,
    SplitDataset,
};
use crate::metrics::{self, MetricsError, DEFAULT_THRESHOLD};
use crate::model::{Model, ModelError};
use crate::tensor::{Real, Tensor};

pub use crate::metrics::time_improvement;

/// Key mixed into the data seed for augmentation substreams, so they never
/// coincide with the sampling streams.
const AUGMENT_KEY: u64 = 0x6175_676d_656e_7431;
const EVAL_BATCH: usize = 128;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss became {loss} in epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("non-finite gradient for parameter {param} in epoch {epoch}")]
    NonFiniteGradient { epoch: usize, param: usize },
    #[error("optimizer state has {expected} tensors, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("parameter {index}: shape {actual:?} does not match optimizer state {expected:?}")]
    ParamShape {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_floor: f64,
    /// Epochs at which the rate is multiplied by `decay`. `None` means 50%
    /// and 85% of `epochs`.
    pub milestones: Option<Vec<usize>>,
    pub decay: f64,
    pub batch_size: usize,
    /// Seed of batch sampling and augmentation.
    pub data_seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decision threshold of the validation F1 used to pick the best epoch.
    pub threshold: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            lr_initial: 3e-4,
            lr_floor: 1e-6,
            milestones: None,
            decay: 0.1,
            batch_size: 32,
            data_seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            threshold: DEFAULT_THRESHOLD,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn milestones(&self) -> Vec<usize> {
        self.milestones.clone().unwrap_or_else(|| {
            let at = |f: f64| (self.epochs as f64 * f).round() as usize;
            vec![at(0.5), at(0.85)]
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.lr_initial) {
            return bad(format!(
                "need 0 < lr_floor ({}) <= lr_initial ({})",
                self.lr_floor, self.lr_initial
            ));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad(format!("decay {} outside (0, 1]", self.decay));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        self.augment.validate()?;
        Ok(())
    }
}

/// Piecewise-constant rate: `lr_initial * decay^(milestones passed)`, never
/// below `lr_floor`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.milestones().iter().filter(|&&m| epoch >= m).count();
    (cfg.lr_initial * cfg.decay.powi(passed as i32)).max(cfg.lr_floor)
}

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &[&Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |p: &&Tensor<T>| Tensor::zeros(p.shape());
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// Number of scalars tracked, equal to the number of trainable scalars.
    pub fn state_len(&self) -> usize {
        self.m.iter().map(Tensor::len).sum()
    }

    /// One bias-corrected update. Nothing changes if any gradient is
    /// non-finite or mismatched.
    pub fn update(
        &mut self,
        params: Vec<&mut Tensor<T>>,
        grads: &[&Tensor<T>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::ParamCount {
                expected: self.m.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for (index, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            for shape in [p.shape(), g.shape()] {
                if shape != m.shape() {
                    return Err(TrainError::ParamShape {
                        index,
                        expected: m.shape().to_vec(),
                        actual: shape.to_vec(),
                    });
                }
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    epoch: 0,
                    param: index,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::of(1.0 - self.beta1.powi(t));
        let bc2 = T::of(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &gi), (mi, vi)) in iter {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Wall-clock measurements, kept apart so that records compare equal across
/// identical runs once this field is dropped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_auc: Option<f64>,
    pub sidecar: Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub data_seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Total training wall time.
    pub sidecar: Sidecar,
}

impl TrainRecord {
    /// The record with every wall-clock field zeroed.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.sidecar = Sidecar::default();
        r.epochs
            .iter_mut()
            .for_each(|e| e.sidecar = Sidecar::default());
        r
    }

    pub fn seconds(&self) -> f64 {
        self.sidecar.seconds
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in &self.epochs {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<EpochRecord>> {
        std::fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation F1.
    pub best: Model<f32>,
    pub record: TrainRecord,
}

/// Defect probabilities for `samples`, evaluated in batches.
pub fn predict_scores(model: &Model<f32>, samples: &[&Sample]) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let batch = stack_images(chunk.iter().map(|s| &s.image))?;
        scores.extend(model.predict_proba(&batch)?.into_iter().map(f64::from));
    }
    Ok(scores)
}

pub fn evaluate(
    model: &Model<f32>,
    samples: &[&Sample],
    threshold: f64,
) -> Result<metrics::EvalReport> {
    let scores = predict_scores(model, samples)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    Ok(metrics::report(&scores, &labels, threshold, None)?)
}

fn better(candidate: Option<f64>, best: Option<f64>) -> bool {
    match (candidate, best) {
        (Some(c), Some(b)) => c > b,
        (Some(_), None) => true,
        (None, _) => false,
    }
}

/// Trains `model` on the train split. Each epoch draws
/// `ceil(train / batch_size)` class-balanced batches with replacement,
/// augments every drawn image from its own substream, takes one Adam step
/// per batch and scores the validation split.
pub fn train(
    mut model: Model<f32>,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let train_set = data.split(Split::Train);
    let val_set = data.split(Split::Val);
    if train_set.is_empty() {
        return Err(TrainError::Config("empty train split".into()));
    }
    let batches = train_set.len().div_ceil(cfg.batch_size);
    let mut adam = Adam::new(&model.params(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut best: Option<(Model<f32>, usize, Option<f64>)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        let lr = lr_at(epoch, cfg);
        let draws = weighted_draws(
            &data.train_weights,
            batches * cfg.batch_size,
            &mut substream(cfg.data_seed, epoch as u64),
        )?;
        let mut loss_sum = 0.0;
        for (b, chunk) in draws.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<Sample> = chunk
                .iter()
                .enumerate()
                .map(|(j, &pos)| {
                    let stream = ((epoch as u64) << 32) | (b * cfg.batch_size + j) as u64;
                    let mut rng = substream(cfg.data_seed ^ AUGMENT_KEY, stream);
                    augment(train_set[pos], &cfg.augment, &mut rng)
                })
                .collect();
            let x = stack_images(augmented.iter().map(|s| &s.image))?;
            let labels: Vec<usize> = augmented.iter().map(|s| s.label as usize).collect();
            let (loss, grads) = model.loss_and_grads(&x, &labels)?;
            let loss = f64::from(loss);
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch, loss });
            }
            loss_sum += loss;
            let flat: Vec<&Tensor<f32>> = grads.iter().flat_map(|g| g.tensors.iter()).collect();
            adam.update(model.params_mut(), &flat, lr)
                .map_err(|e| match e {
                    TrainError::NonFiniteGradient { param, .. } => {
                        TrainError::NonFiniteGradient { epoch, param }
                    }
                    other => other,
                })?;
        }
        let val = evaluate(&model, &val_set, cfg.threshold)?;
        if best.as_ref().is_none_or(|b| better(val.f1, b.2)) {
            best = Some((model.clone(), epoch, val.f1));
        }
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_precision: val.precision,
            val_recall: val.recall,
            val_f1: val.f1,
            val_auc: val.auc,
            sidecar: Sidecar {
                seconds: epoch_start.elapsed().as_secs_f64(),
            },
        });
    }
    let (best, best_epoch, _) = best.expect("at least one epoch");
    let record = TrainRecord {
        seed: model.seed,
        data_seed: cfg.data_seed,
        epochs,
        best_epoch,
        sidecar: Sidecar {
            seconds: start.elapsed().as_secs_f64(),
        },
    };
    Ok(TrainOutcome { best, record })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.milestones(), vec![40, 68]);
        assert_eq!(lr_at(0, &cfg), 3e-4);
        assert!((lr_at(40, &cfg) - 3e-5).abs() < 1e-18);
        let cfg = TrainConfig {
            milestones: Some(vec![1, 2, 3, 4, 5]),
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(5, &cfg), 1e-6);
        let mut prev = f64::INFINITY;
        for e in 0..80 {
            assert!(lr_at(e, &cfg) <= prev);
            prev = lr_at(e, &cfg);
        }
        let cfg = TrainConfig {
            milestones: Some(Vec::new()),
            ..TrainConfig::default()
        };
        assert!((0..80).all(|e| lr_at(e, &cfg) == 3e-4));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::filled(&[3], 1.0);
        let g = Tensor::<f64>::filled(&[3], 1.0);
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        adam.update(vec![&mut p], &[&g], 0.01).unwrap();
        let expected = 1.0 - 0.01 / (1.0 + 1e-8);
        assert!(p.data().iter().all(|&v| (v - expected).abs() < 1e-15));
    }

    #[test]
    fn adam_zero_gradient_is_still() {
        let mut p = Tensor::<f32>::from_fn(&[2, 2], |i| i[0] as f32 - i[1] as f32 * 0.5);
        let before = p.clone();
        let g = Tensor::<f32>::zeros(&[2, 2]);
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        for _ in 0..10 {
            adam.update(vec![&mut p], &[&g], 1e-3).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_bad_gradients() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        let nan = Tensor::from_parts(vec![2], vec![f32::NAN, 0.0]);
        assert!(matches!(
            adam.update(vec![&mut p], &[&nan], 1e-3),
            Err(TrainError::NonFiniteGradient { .. })
        ));
        assert!(matches!(
            adam.update(vec![&mut p], &[&Tensor::zeros(&[3])], 1e-3),
            Err(TrainError::ParamShape { .. })
        ));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig {
            lr_floor: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn best_selection_rule() {
        assert!(better(Some(0.5), None));
        assert!(!better(Some(0.5), Some(0.5)));
        assert!(!better(None, Some(0.1)));
    }
}
