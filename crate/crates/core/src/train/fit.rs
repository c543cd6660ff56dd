use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Split;
use super::{compute_loss, noam_lr, tape_loss, Adam, TrainConfig, TrainError};
use crate::analyze::{rmse, roc_auc};
use crate::featurize::MolTensors;
use crate::model::{Checkpoint, CheckpointMeta, MatConfig, Model, Standardization, Task};
use crate::tensor::{ParamGrads, Rng, Stream, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean of the step losses (train mode).
    pub train_loss: f64,
    pub train_metric: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl History {
    /// One JSON object per line; step lines carry `"kind":"step"`, epoch
    /// lines `"kind":"epoch"`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut line = |kind: &str, v: serde_json::Value| {
            let mut v = v;
            v["kind"] = serde_json::Value::from(kind);
            out.push_str(&v.to_string());
            out.push('\n');
        };
        for s in &self.steps {
            line("step", serde_json::to_value(s).expect("step record"));
        }
        for e in &self.epochs {
            line("epoch", serde_json::to_value(e).expect("epoch record"));
        }
        out
    }

    /// Tab-separated learning curve: epoch, train loss, val loss, val metric.
    pub fn curve_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut out = String::from("epoch\ttrain_loss\tval_loss\tval_metric\n");
        for e in &self.epochs {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.epoch, e.train_loss, opt(e.val_loss), opt(e.val_metric)));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the best validation result (the last epoch when there
    /// is no validation fold).
    pub checkpoint: Checkpoint,
    pub history: History,
    /// Parameters after the last epoch.
    pub last: Model,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Mean loss in training units (standardized for regression).
    pub loss: f64,
    /// RMSE in label units, or ROC AUC; `None` when AUC is undefined.
    pub metric: Option<f64>,
    /// Label-unit predictions, or probabilities.
    pub predictions: Vec<f64>,
}

fn target(y: f64, st: Option<Standardization>) -> f64 {
    st.map_or(y, |s| s.apply(y))
}

/// Eval-mode forward over `items`.
pub fn evaluate(
    model: &Model,
    items: &[MolTensors],
    labels: &[f64],
    standardization: Option<Standardization>,
) -> Result<EvalResult, TrainError> {
    let task = model.config.task;
    let raw = model.predict_many(items)?;
    let targets: Vec<f64> = labels.iter().map(|&y| target(y, standardization)).collect();
    let loss = compute_loss(&raw, &targets, task)?;
    let (metric, predictions) = match task {
        Task::Regression => {
            let preds: Vec<f64> = raw.iter().map(|&z| standardization.map_or(z, |s| s.invert(z))).collect();
            (Some(rmse(&preds, labels)?), preds)
        }
        _ => {
            let probs: Vec<f64> = raw.iter().map(|&z| crate::tensor::sigmoid(z)).collect();
            (roc_auc(&raw, labels).ok(), probs)
        }
    };
    Ok(EvalResult {
        loss,
        metric,
        predictions,
    })
}

pub(super) fn better(task: Task, candidate: (Option<f64>, f64), best: (Option<f64>, f64)) -> bool {
    match (candidate.0, best.0) {
        (Some(c), Some(b)) => match task {
            Task::Regression => c < b,
            _ => c > b,
        },
        _ => candidate.1 < best.1,
    }
}

/// Mini-batch training with per-epoch validation. `pretrained` supplies the
/// encoder; the head is freshly initialized.
pub fn train_loop(
    split: &Split,
    model_cfg: &MatConfig,
    cfg: &TrainConfig,
    pretrained: Option<&Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if model_cfg.task == Task::NodePretrain {
        return Err(TrainError::Config("use pretrain for node_pretrain models".into()));
    }
    if split.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let task = model_cfg.task;
    let st = split.standardization;
    let train_x = split.train.featurize(model_cfg)?;
    let train_y: Vec<f64> = split.train.labels();
    let val_x = split.val.featurize(model_cfg)?;
    let val_y = split.val.labels();

    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    if let Some(ck) = pretrained {
        model.load_encoder(&ck.params)?;
    }
    let shell = model.shell();
    let mut adam = Adam::new(&model.params, cfg);

    let n = train_x.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = cfg.warmup_steps(total);
    let factor = cfg.optimizer_factor();
    let shuffle = Rng::new(cfg.seed, Stream::Shuffle);
    let dropout = Rng::new(cfg.seed, Stream::Dropout);

    let mut history = History::default();
    let mut best: Option<((Option<f64>, f64), Checkpoint)> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle.fork(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let lr = noam_lr(step, factor, model_cfg.d_model, warmup)?;
            let scale = 1.0 / batch.len() as f64;
            let params = &model.params;
            let per_sample: Vec<(f64, ParamGrads)> = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| {
                    let mut rng = (model_cfg.dropout > 0.0).then(|| dropout.fork(((step as u64) << 24) | k as u64));
                    let mut tape = Tape::new(params);
                    let pred = shell.forward(&mut tape, &train_x[i], rng.as_mut(), None)?;
                    let loss = tape_loss(&mut tape, pred, target(train_y[i], st), task, scale)?;
                    let value = tape.value(loss).data()[0];
                    Ok((value, tape.backward(loss)?.into_params()))
                })
                .collect::<Result<_, TrainError>>()?;
            let mut grads = ParamGrads::zeros_like(params);
            let mut loss = 0.0;
            for (l, g) in &per_sample {
                loss += l;
                grads.add_assign(g);
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            adam.step(&mut model.params, &grads, lr);
            epoch_loss += loss;
            history.steps.push(StepRecord {
                step,
                epoch,
                lr,
                train_loss: loss,
            });
        }

        let train_metric = if cfg.track_train_metric {
            evaluate(&model, &train_x, &train_y, st)?.metric
        } else {
            None
        };
        let val = if val_x.is_empty() {
            None
        } else {
            Some(evaluate(&model, &val_x, &val_y, st)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / per_epoch as f64,
            train_metric,
            val_loss: val.as_ref().map(|v| v.loss),
            val_metric: val.as_ref().and_then(|v| v.metric),
        };
        let key = match &val {
            Some(v) => (v.metric, v.loss),
            None => (None, f64::NEG_INFINITY),
        };
        if best.as_ref().map_or(true, |(b, _)| better(task, key, *b) || val.is_none()) {
            let meta = CheckpointMeta {
                epoch: Some(epoch),
                step: Some(step),
                val_metric: record.val_metric,
                val_loss: record.val_loss,
            };
            best = Some((key, Checkpoint::from_model(&model, st, meta)));
        }
        history.epochs.push(record);
    }

    let checkpoint = match best {
        Some((_, c)) => c,
        None => Checkpoint::from_model(&model, st, CheckpointMeta::default()),
    };
    Ok(TrainOutcome {
        checkpoint,
        history,
        last: model,
    })
}
