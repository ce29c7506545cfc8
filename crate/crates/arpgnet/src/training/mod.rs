//! Parameter initialization, classification losses, the Adam optimizer with
//! two learning-rate groups, and the training loop.

use rand::Rng;
use thiserror::Error;

use crate::model::ModelError;
use crate::numerics::{Scalar, Tape, Tensor, TensorError};

mod fit;

pub(crate) use fit::argmax;
pub use fit::{fit, EpochRecord, StepRecord, TrainConfig, TrainLog};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("invalid training configuration: {reason}")]
    Config { reason: String },
    #[error("invalid loss arguments: {reason}")]
    InvalidLoss { reason: String },
    #[error("optimizer state does not match the parameter list: {reason}")]
    StateMismatch { reason: String },
    #[error(
        "non-finite loss ({loss}) at epoch {epoch}, step {step}; \
         lower the learning rate or inspect the offending batch"
    )]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("training data: {reason}")]
    Data { reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training io: {0}")]
    Io(#[from] std::io::Error),
}

/// Draws a weight tensor from a zero-mean normal with variance `2 / fan_in`.
pub fn kaiming_init<T: Scalar, R: Rng + ?Sized>(
    tape: &Tape<T>,
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Result<Tensor<T>, TensorError> {
    let n: usize = shape.iter().product();
    let std = T::from_f64((2.0 / fan_in as f64).sqrt());
    let data: Vec<T> = (0..n).map(|_| T::standard_normal(rng) * std).collect();
    tape.param(shape, &data)
}

/// A parameter initialized to zero, used for every bias.
pub fn zeros_param<T: Scalar>(tape: &Tape<T>, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
    let n: usize = shape.iter().product();
    tape.param(shape, &vec![T::zero(); n])
}

/// A parameter filled with one constant, used for learned rectifier slopes.
pub fn constant_param<T: Scalar>(
    tape: &Tape<T>,
    shape: &[usize],
    value: T,
) -> Result<Tensor<T>, TensorError> {
    let n: usize = shape.iter().product();
    tape.param(shape, &vec![value; n])
}

/// Negative log-likelihood of `label` under the softmax of rank-1 `logits`.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    label: usize,
) -> Result<Tensor<T>, TrainingError> {
    let shape = logits.shape();
    if shape.len() != 1 {
        return Err(TrainingError::InvalidLoss {
            reason: format!("logits must be rank 1, got shape {shape:?}"),
        });
    }
    let k = shape[0];
    if label >= k {
        return Err(TrainingError::InvalidLoss {
            reason: format!("label {label} out of range for {k} classes"),
        });
    }
    let log_p = logits
        .reshape(&[1, k])?
        .log_softmax_rows()?
        .pick_rows(&[label])?;
    Ok(log_p.mean_all()?.scale(-T::one())?)
}

/// Focal loss `-w_label * (1 - p)^gamma * log p` with `p` the softmax
/// probability of the true class. With `gamma = 0` and no class weights this
/// reduces exactly to [`cross_entropy`].
pub fn focal_loss<T: Scalar>(
    logits: &Tensor<T>,
    label: usize,
    gamma: f64,
    class_weights: Option<&[f64]>,
) -> Result<Tensor<T>, TrainingError> {
    let shape = logits.shape();
    if shape.len() != 1 {
        return Err(TrainingError::InvalidLoss {
            reason: format!("logits must be rank 1, got shape {shape:?}"),
        });
    }
    let k = shape[0];
    if label >= k {
        return Err(TrainingError::InvalidLoss {
            reason: format!("label {label} out of range for {k} classes"),
        });
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(TrainingError::InvalidLoss {
            reason: format!("gamma must be finite and non-negative, got {gamma}"),
        });
    }
    let weight = match class_weights {
        Some(weights) => {
            if weights.len() != k {
                return Err(TrainingError::InvalidLoss {
                    reason: format!(
                        "got {} class weights for {k} classes",
                        weights.len()
                    ),
                });
            }
            if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(TrainingError::InvalidLoss {
                    reason: "class weights must be finite and non-negative".to_string(),
                });
            }
            weights[label]
        }
        None => 1.0,
    };
    let log_p = logits
        .reshape(&[1, k])?
        .log_softmax_rows()?
        .pick_rows(&[label])?;
    let p = log_p.exp()?;
    let damp = p.affine(-T::one(), T::one())?.pow_scalar(T::from_f64(gamma))?;
    let loss = damp.mul(&log_p)?.scale(-T::from_f64(weight))?;
    Ok(loss.mean_all()?)
}

/// The two learning-rate groups: convolutional trunks train slower than
/// everything built on top of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrGroup {
    Backbone,
    Other,
}

/// Assigns a parameter to its learning-rate group by canonical name.
pub fn lr_group(name: &str) -> LrGroup {
    if name.starts_with("appearance_trunk.") || name.starts_with("relation_trunk.") {
        LrGroup::Backbone
    } else {
        LrGroup::Other
    }
}

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_backbone: 1e-4,
            lr_other: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, kept in 64-bit precision
/// regardless of the model scalar type.
pub struct OptimState {
    names: Vec<String>,
    groups: Vec<LrGroup>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimState {
    /// Builds zeroed moments for the given parameter list and fixes the
    /// group partition. Every parameter must fall in exactly one group;
    /// duplicates are rejected.
    pub fn new<T: Scalar>(params: &[(String, Tensor<T>)]) -> Result<Self, TrainingError> {
        let mut names = Vec::with_capacity(params.len());
        let mut groups = Vec::with_capacity(params.len());
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for (name, tensor) in params {
            if names.contains(name) {
                return Err(TrainingError::StateMismatch {
                    reason: format!("duplicate parameter name {name}"),
                });
            }
            names.push(name.clone());
            groups.push(lr_group(name));
            m.push(vec![0.0; tensor.numel()]);
            v.push(vec![0.0; tensor.numel()]);
        }
        Ok(OptimState {
            names,
            groups,
            m,
            v,
            step: 0,
        })
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// How many parameters fall in each `(backbone, other)` group.
    pub fn group_sizes(&self) -> (usize, usize) {
        let backbone = self
            .groups
            .iter()
            .filter(|g| **g == LrGroup::Backbone)
            .count();
        (backbone, self.groups.len() - backbone)
    }
}

/// One bias-corrected Adam update over every parameter, reading gradients
/// from the tape. Parameters whose gradient is identically zero are left
/// bit-identical on the first step and decay smoothly afterwards.
pub fn adam_step<T: Scalar>(
    params: &[(String, Tensor<T>)],
    state: &mut OptimState,
    cfg: &AdamConfig,
) -> Result<(), TrainingError> {
    if params.len() != state.names.len() {
        return Err(TrainingError::StateMismatch {
            reason: format!(
                "state tracks {} parameters, got {}",
                state.names.len(),
                params.len()
            ),
        });
    }
    state.step += 1;
    let t = state.step;
    let bias1 = 1.0 - cfg.beta1.powi(t as i32);
    let bias2 = 1.0 - cfg.beta2.powi(t as i32);
    for (i, (name, tensor)) in params.iter().enumerate() {
        if *name != state.names[i] {
            return Err(TrainingError::StateMismatch {
                reason: format!(
                    "parameter {i} is {name}, state expects {}",
                    state.names[i]
                ),
            });
        }
        let grad = tensor.grad();
        if grad.len() != state.m[i].len() {
            return Err(TrainingError::StateMismatch {
                reason: format!("parameter {name} changed size"),
            });
        }
        let lr = match state.groups[i] {
            LrGroup::Backbone => cfg.lr_backbone,
            LrGroup::Other => cfg.lr_other,
        };
        let mut data = tensor.value();
        for (k, g) in grad.iter().enumerate() {
            let g = (*g).to_f64();
            state.m[i][k] = cfg.beta1 * state.m[i][k] + (1.0 - cfg.beta1) * g;
            state.v[i][k] = cfg.beta2 * state.v[i][k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[i][k] / bias1;
            let v_hat = state.v[i][k] / bias2;
            let update = lr * m_hat / (v_hat.sqrt() + cfg.eps);
            data[k] = T::from_f64(data[k].to_f64() - update);
        }
        tensor.set_data(&data)?;
    }
    Ok(())
}
