use rayon::prelude::*;

use super::fit::StepRecord;
use super::{mask_nodes, noam_lr, Adam, MaskedSample, TrainConfig, TrainError};
use crate::featurize::{MolTensors, ATOM_FEATURES, IDENTITY};
use crate::model::{MatConfig, Model, Task};
use crate::tensor::{ParamGrads, Rng, Stream, Tape, Var};

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
}

fn flat_targets(s: &MaskedSample) -> Vec<f64> {
    s.targets.iter().flat_map(|r| r.iter().copied()).collect()
}

/// Summed BCE over the masked rows of one sample, times `scale`.
fn masked_node_loss(
    model: &Model,
    tape: &mut Tape<'_>,
    s: &MaskedSample,
    rng: Option<&mut Rng>,
    scale: f64,
) -> Result<Var, TrainError> {
    let emb = model.encode(tape, &s.tensors, rng, None)?;
    let logits = model.node_head(tape, emb, &s.positions)?;
    Ok(tape.bce_with_logits(logits, &flat_targets(s), scale)?)
}

fn check_task(model: &Model) -> Result<(), TrainError> {
    if model.config.task != Task::NodePretrain {
        return Err(TrainError::Config("pretraining needs task = node_pretrain".into()));
    }
    Ok(())
}

/// Eval-mode mean BCE per masked entry.
pub fn pretrain_loss(model: &Model, samples: &[MaskedSample]) -> Result<f64, TrainError> {
    check_task(model)?;
    let entries: usize = samples.iter().map(|s| s.positions.len()).sum::<usize>() * ATOM_FEATURES;
    if entries == 0 {
        return Err(TrainError::NothingMasked);
    }
    let total = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new(&model.params);
            let l = masked_node_loss(model, &mut tape, s, None, 1.0)?;
            Ok(tape.value(l).data()[0])
        })
        .collect::<Result<Vec<f64>, TrainError>>()?;
    Ok(total.iter().sum::<f64>() / entries as f64)
}

/// BCE of predicting each feature by its mean over the masked rows.
pub fn base_rate_loss(samples: &[MaskedSample]) -> Result<f64, TrainError> {
    let rows: Vec<&[f64; ATOM_FEATURES]> = samples.iter().flat_map(|s| s.targets.iter()).collect();
    if rows.is_empty() {
        return Err(TrainError::NothingMasked);
    }
    let n = rows.len() as f64;
    let mut total = 0.0;
    for f in 0..ATOM_FEATURES {
        let p = (rows.iter().map(|r| r[f]).sum::<f64>() / n).clamp(1e-12, 1.0 - 1e-12);
        total += rows.iter().map(|r| -(r[f] * p.ln() + (1.0 - r[f]) * (1.0 - p).ln())).sum::<f64>();
    }
    Ok(total / (n * ATOM_FEATURES as f64))
}

/// Accuracy of the argmax over the identity block on masked rows, and the
/// accuracy of always predicting the most frequent identity.
pub fn identity_accuracy(model: &Model, samples: &[MaskedSample]) -> Result<(f64, f64), TrainError> {
    check_task(model)?;
    let argmax = |v: &[f64]| {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(i, _)| i)
    };
    let per_sample = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new(&model.params);
            let emb = model.encode(&mut tape, &s.tensors, None, None)?;
            let logits = model.node_head(&mut tape, emb, &s.positions)?;
            let out = tape.value(logits);
            Ok(s.targets
                .iter()
                .enumerate()
                .map(|(r, t)| (argmax(&out.row(r)[IDENTITY]), argmax(&t[IDENTITY])))
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let pairs: Vec<(usize, usize)> = per_sample.into_iter().flatten().collect();
    if pairs.is_empty() {
        return Err(TrainError::NothingMasked);
    }
    let mut counts = [0usize; 12];
    for &(_, t) in &pairs {
        counts[t] += 1;
    }
    let n = pairs.len() as f64;
    let hits = pairs.iter().filter(|(p, t)| p == t).count() as f64;
    Ok((hits / n, *counts.iter().max().unwrap_or(&0) as f64 / n))
}

/// Masks one batch; each molecule gets its own generator.
pub fn mask_batch(items: &[&MolTensors], fraction: f64, rng: &Rng, step: usize) -> Result<Vec<MaskedSample>, TrainError> {
    items
        .iter()
        .enumerate()
        .map(|(k, t)| mask_nodes(t, fraction, &mut rng.fork(((step as u64) << 24) | k as u64)))
        .collect()
}

/// `steps` optimizer steps of masked-node reconstruction over shuffled
/// passes through `items`.
pub fn pretrain(items: &[MolTensors], model_cfg: &MatConfig, cfg: &TrainConfig, steps: usize) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    if model_cfg.task != Task::NodePretrain {
        return Err(TrainError::Config("pretraining needs task = node_pretrain".into()));
    }
    if items.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    let shell = model.shell();
    let mut adam = Adam::new(&model.params, cfg);
    let warmup = cfg.warmup_steps(steps);
    let factor = cfg.optimizer_factor();
    let masking = Rng::new(cfg.seed, Stream::Masking);
    let shuffle = Rng::new(cfg.seed, Stream::Shuffle);
    let dropout = Rng::new(cfg.seed, Stream::Dropout);

    let mut history = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0;
    for step in 1..=steps {
        if cursor >= order.len() {
            epoch += 1;
            order = (0..items.len()).collect();
            shuffle.fork(epoch as u64).shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&MolTensors> = order[cursor..end].iter().map(|&i| &items[i]).collect();
        cursor = end;

        let samples = mask_batch(&batch, cfg.mask_fraction, &masking, step)?;
        let entries = samples.iter().map(|s| s.positions.len()).sum::<usize>() * ATOM_FEATURES;
        if entries == 0 {
            return Err(TrainError::NothingMasked);
        }
        let scale = 1.0 / entries as f64;
        let lr = noam_lr(step, factor, model_cfg.d_model, warmup)?;
        let params = &model.params;
        let per_sample: Vec<(f64, ParamGrads)> = samples
            .par_iter()
            .enumerate()
            .map(|(k, s)| {
                let mut rng = (model_cfg.dropout > 0.0).then(|| dropout.fork(((step as u64) << 24) | k as u64));
                let mut tape = Tape::new(params);
                let loss = masked_node_loss(&shell, &mut tape, s, rng.as_mut(), scale)?;
                Ok((tape.value(loss).data()[0], tape.backward(loss)?.into_params()))
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
        history.push(StepRecord {
            step,
            epoch,
            lr,
            train_loss: loss,
        });
    }
    Ok(PretrainOutcome { model, history })
}
