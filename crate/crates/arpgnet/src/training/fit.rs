//! The training loop: shuffled mini-batches, sparse frame sampling, focal
//! loss, and two-group Adam, with optional CSV/JSON logging.

use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, focal_loss, AdamConfig, OptimState, TrainingError};
use crate::data::{sample_sparse_test, sample_sparse_train, DataError, Dataset};
use crate::model::{ArpgNet, Mode, ModelError};
use crate::numerics::{Scalar, Tensor, TensorError};

impl From<DataError> for TrainingError {
    fn from(e: DataError) -> Self {
        TrainingError::Data {
            reason: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds both the data order (shuffling, sparse sampling) and the model
    /// noise (dropout). Two runs with equal seeds and equal initial weights
    /// produce bit-identical logs.
    pub seed: u64,
    pub adam: AdamConfig,
    /// Focal loss exponent; zero recovers plain cross entropy.
    pub gamma: f64,
    pub class_weights: Option<Vec<f64>>,
    /// When set, `train_log.csv` and `summary.json` are written here.
    pub log_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            gamma: 2.0,
            class_weights: None,
            log_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Deterministic-sampling accuracy over the training indices, measured
    /// in eval mode after the epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// The tape refuses to materialize non-finite values, so a diverging run
/// surfaces as a tensor error from inside the forward pass.
fn diverged(err: &TrainingError) -> bool {
    matches!(err, TrainingError::Tensor(TensorError::NonFinite { .. }))
        || matches!(
            err,
            TrainingError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))
        )
}

/// Index of the first maximum.
pub(crate) fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if (*v).to_f64() > values[best].to_f64() {
            best = i;
        }
    }
    best
}

fn check_args<T: Scalar>(
    model: &ArpgNet<T>,
    dataset: &Dataset,
    train_indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(), TrainingError> {
    let fail = |reason: String| Err(TrainingError::Config { reason });
    if cfg.epochs == 0 {
        return fail("need at least one epoch".to_string());
    }
    if cfg.batch_size == 0 {
        return fail("batch_size must be positive".to_string());
    }
    if train_indices.is_empty() {
        return fail("no training samples selected".to_string());
    }
    for &i in train_indices {
        if i >= dataset.len() {
            return fail(format!(
                "training index {i} out of range for {} samples",
                dataset.len()
            ));
        }
    }
    if model.config().n_classes != dataset.n_classes() {
        return fail(format!(
            "model predicts {} classes but the dataset defines {}",
            model.config().n_classes,
            dataset.n_classes()
        ));
    }
    Ok(())
}

/// Trains `model` in place on the given dataset rows and returns the loss
/// and accuracy history.
pub fn fit<T: Scalar>(
    model: &ArpgNet<T>,
    dataset: &Dataset,
    train_indices: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainLog, TrainingError> {
    check_args(model, dataset, train_indices, cfg)?;
    let t = model.config().t;
    let params = model.named_params();
    let mut state = OptimState::new(&params)?;
    // Separate streams so that the data order does not depend on how much
    // noise the model variant consumes.
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0000_da7a_0000);
    let mut model_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tape = model.tape();
    let mark = tape.mark();

    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let mut order = train_indices.to_vec();
        order.shuffle(&mut data_rng);
        let mut losses = Vec::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut run_batch = || -> Result<f64, TrainingError> {
                let mut per_sample = Vec::with_capacity(batch.len());
                for &index in batch {
                    let sample = &dataset.samples()[index];
                    let frames = sample_sparse_train(sample.n_frames, t, &mut data_rng)?;
                    let input = dataset.read_clip(&tape, index, &frames)?;
                    let (logits, _) = model.forward(
                        &input,
                        &mut Mode::Train {
                            dropout_rng: &mut model_rng,
                        },
                    )?;
                    let loss = focal_loss(
                        &logits,
                        sample.label,
                        cfg.gamma,
                        cfg.class_weights.as_deref(),
                    )?;
                    per_sample.push(loss.reshape(&[1])?);
                }
                let batch_loss = Tensor::stack_rows(&per_sample)?.mean_all()?;
                let loss = batch_loss.item()?.to_f64();
                batch_loss.backward()?;
                adam_step(&params, &mut state, &cfg.adam)?;
                Ok(loss)
            };
            let outcome = run_batch();
            tape.reset_to(mark);
            let loss = match outcome {
                Ok(loss) => loss,
                Err(err) if diverged(&err) => {
                    return Err(TrainingError::NonFiniteLoss {
                        epoch,
                        step,
                        loss: f64::NAN,
                    });
                }
                Err(err) => return Err(err),
            };
            losses.push(loss);
            log.steps.push(StepRecord { epoch, step, loss });
        }

        let mut correct = 0usize;
        for &index in train_indices {
            let sample = &dataset.samples()[index];
            let frames = sample_sparse_test(sample.n_frames, t)?;
            let input = dataset.read_clip(&tape, index, &frames)?;
            let (logits, _) = model.forward(&input, &mut Mode::Eval)?;
            if argmax(&logits.value()) == sample.label {
                correct += 1;
            }
            tape.reset_to(mark);
        }
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            train_accuracy: correct as f64 / train_indices.len() as f64,
        });
    }

    if let Some(dir) = &cfg.log_dir {
        write_logs(dir, cfg, &log)?;
    }
    Ok(log)
}

fn write_logs(dir: &PathBuf, cfg: &TrainConfig, log: &TrainLog) -> Result<(), TrainingError> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("epoch,step,loss\n");
    for s in &log.steps {
        csv.push_str(&format!("{},{},{}\n", s.epoch, s.step, s.loss));
    }
    fs::write(dir.join("train_log.csv"), csv)?;
    let summary = serde_json::json!({
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "gamma": cfg.gamma,
        "class_weights": cfg.class_weights,
        "adam": cfg.adam,
        "epoch_records": log.epochs,
        "final_train_accuracy": log.epochs.last().map(|e| e.train_accuracy),
        "total_steps": log.steps.len(),
    });
    fs::write(
        dir.join("summary.json"),
        serde_json::to_vec_pretty(&summary).expect("summaries serialize infallibly"),
    )?;
    Ok(())
}
