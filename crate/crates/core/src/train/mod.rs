//! Losses, the optimizer and its schedule, node masking, data handling and
//! the training loops.

mod data;
mod fit;
mod pretrain;
mod sweep;

pub use data::{load_dataset, load_inputs, random_split, standardization_of, Dataset, InputRow, Record, Split, SplitFractions};
pub use fit::{evaluate, train_loop, EpochRecord, EvalResult, History, StepRecord, TrainOutcome};
pub use pretrain::{base_rate_loss, identity_accuracy, mask_batch, pretrain, pretrain_loss, PretrainOutcome};
pub use sweep::{finetune_trials, sample_trial, SweepSpace, SweepTrial, LR_GRID};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurize::{FeaturizeError, MolTensors, ATOM_FEATURES, CHARGE};
use crate::model::{CheckpointError, ModelError, Task};
use crate::tensor::{ParamGrads, ParamStore, Rng, Tape, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("empty training fold")]
    EmptyTrain,
    #[error("dataset: {0}")]
    Data(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("fold '{0}' would be empty")]
    EmptyFold(&'static str),
    #[error("no masked nodes in batch")]
    NothingMasked,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] crate::analyze::AnalyzeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_factor: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// (train, val, test).
    pub split: [f64; 3],
    pub mask_fraction: f64,
    /// Evaluate the training fold in eval mode after every epoch.
    pub track_train_metric: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            warmup_factor: 0.1,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            split: [0.8, 0.1, 0.1],
            mask_fraction: 0.15,
            track_train_metric: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=0.5).contains(&self.warmup_factor) {
            return bad("warmup_factor must lie in [0, 0.5]");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return bad("mask_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// `100 × learning_rate`.
    pub fn optimizer_factor(&self) -> f64 {
        100.0 * self.learning_rate
    }

    /// `warmup_factor × total_steps`, rounded, at least 1.
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        ((self.warmup_factor * total_steps as f64).round() as usize).max(1)
    }
}

/// `factor · d^-0.5 · min(step^-0.5, step · warmup^-0.5)`.
pub fn noam_lr(step: usize, factor: f64, d_model: usize, warmup: usize) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::Config("learning-rate step numbers start at 1".into()));
    }
    if warmup == 0 {
        return Err(TrainError::Config("warmup steps must be at least 1".into()));
    }
    let s = step as f64;
    Ok(factor * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-0.5)))
}

/// Mean squared error, or mean binary cross-entropy on logits.
pub fn compute_loss(pred: &[f64], target: &[f64], task: Task) -> Result<f64, TrainError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TrainError::Config(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(TrainError::Data("non-finite loss input".into()));
    }
    let n = pred.len() as f64;
    Ok(match task {
        Task::Regression => pred.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n,
        Task::Binary | Task::NodePretrain => {
            pred.iter().zip(target).map(|(&x, &y)| crate::tensor::bce_logit(x, y)).sum::<f64>() / n
        }
    })
}

/// Loss of one graph-level prediction on the tape, scaled by `scale`.
pub(crate) fn tape_loss(tape: &mut Tape<'_>, pred: Var, target: f64, task: Task, scale: f64) -> Result<Var, TrainError> {
    Ok(match task {
        Task::Regression => tape.squared_error(pred, &[target], scale)?,
        _ => tape.bce_with_logits(pred, &[target], scale)?,
    })
}

/// Adam with decoupled weight decay on `*.weight` tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Adam {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let decay = self.weight_decay > 0.0 && params.name(id).ends_with(".weight");
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                if decay {
                    p[k] -= lr * self.weight_decay * p[k];
                }
                p[k] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// A molecule with some rows replaced by the mask token.
#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub tensors: MolTensors,
    pub positions: Vec<usize>,
    /// Original feature rows of `positions`, charge mapped into [0, 1].
    pub targets: Vec<[f64; ATOM_FEATURES]>,
}

/// `clamp(charge, -1, 1) / 2 + 0.5`.
pub fn charge_target(charge: f64) -> f64 {
    charge.clamp(-1.0, 1.0) / 2.0 + 0.5
}

/// Masks `⌈fraction · n_atoms⌉` distinct non-dummy nodes: their feature
/// rows become zero and the mask channel is set.
pub fn mask_nodes(t: &MolTensors, fraction: f64, rng: &mut Rng) -> Result<MaskedSample, TrainError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(TrainError::Config(format!("mask fraction {fraction} outside (0, 1)")));
    }
    let n_atoms = t.n_atoms();
    if n_atoms == 0 {
        return Err(TrainError::NothingMasked);
    }
    // The small offset keeps exact products such as 0.15 × 20 from
    // rounding up past the integer.
    let count = ((fraction * n_atoms as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut positions = rng.sample_indices(n_atoms, count.min(n_atoms));
    positions.sort_unstable();
    let mut tensors = t.clone();
    let mut targets = Vec::with_capacity(positions.len());
    let width = tensors.features.cols();
    for &i in &positions {
        let mut row = [0.0; ATOM_FEATURES];
        row.copy_from_slice(t.features.row(i));
        row[CHARGE] = charge_target(row[CHARGE]);
        targets.push(row);
        tensors.features.data_mut()[i * width..(i + 1) * width].iter_mut().for_each(|v| *v = 0.0);
        tensors.masked[i] = true;
    }
    Ok(MaskedSample {
        tensors,
        positions,
        targets,
    })
}
