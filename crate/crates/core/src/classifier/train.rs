use gradcore::{AdamConfig, AdamState, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifierConfig, ClassifierModel, Dims};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax, auprc_ovr, auroc_ovr, macro_f1};
use crate::nn::Dropout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestScores {
    pub f1: f64,
    pub accuracy: f64,
    pub auroc: f64,
    pub auprc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub test: Option<TestScores>,
}

/// Trains with cross-entropy and AdamW, keeping the parameters with the
/// best validation macro-F1 (the latest such epoch). The returned model is
/// frozen.
pub fn train_classifier(cfg: &ClassifierConfig, ds: &Dataset) -> Result<(ClassifierModel, TrainReport)> {
    ds.check_train_classes()?;
    let dims = Dims {
        t: ds.t,
        d: ds.d,
        c: ds.c,
    };
    let mut model = ClassifierModel::new(cfg.clone(), dims)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut opt = AdamState::new(adam, model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c1a5);
    let mut order = ds.splits.train.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = ds.batch(batch);
            let labels = ds.labels(batch);
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape, true);
            let xv = tape.constant(x);
            let mut dropout = Dropout::On {
                rate: cfg.dropout,
                rng: &mut rng,
            };
            let step = (|| -> Result<_> {
                let logits = model.logits(&mut tape, &p, xv, &mut dropout)?;
                let logp = tape.log_softmax(logits)?;
                let onehot = Tensor::from_fn(&[batch.len(), dims.c], |k| f64::from(labels[k / dims.c] == k % dims.c));
                let oh = tape.constant(onehot);
                let picked = tape.mul(logp, oh)?;
                let total = tape.sum(picked)?;
                let loss = tape.scale(total, -1.0 / batch.len() as f64)?;
                let grads = tape.backward(loss)?;
                Ok((tape.value(loss).data()[0], grads))
            })();
            let (loss, grads) = step.map_err(|e| abort(cfg, epoch, e))?;
            if !loss.is_finite() {
                return Err(abort(cfg, epoch, Error::Training("loss is not finite".into())));
            }
            let g: Vec<Tensor> = p.iter().map(|&v| grads.wrt(v)).collect();
            opt.step(model.params_mut().tensors_mut(), &g)?;
            loss_sum += loss * batch.len() as f64;
        }
        let loss = loss_sum / order.len().max(1) as f64;
        let val_f1 = if ds.splits.val.is_empty() {
            f64::NAN
        } else {
            let (_, preds) = predict_split(&model, ds, &ds.splits.val)?;
            macro_f1(&ds.labels(&ds.splits.val), &preds, ds.c)
        };
        history.push(EpochRecord { epoch, loss, val_f1 });
        let better = match &best {
            None => true,
            // ties go to the later, longer-trained epoch
            Some((f, _, _)) => val_f1 >= *f,
        };
        if better || ds.splits.val.is_empty() {
            best = Some((val_f1, epoch, model.params().tensors().to_vec()));
        }
    }

    let best_epoch = match best {
        Some((_, epoch, tensors)) => {
            model.params_mut().tensors_mut().clone_from_slice(&tensors);
            epoch
        }
        None => 0,
    };
    model.freeze();
    let test = if ds.splits.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, ds, &ds.splits.test)?)
    };
    Ok((
        model,
        TrainReport {
            history,
            best_epoch,
            test,
        },
    ))
}

fn abort(cfg: &ClassifierConfig, epoch: usize, cause: Error) -> Error {
    Error::Training(format!("classifier epoch {epoch} (lr {}): {cause}", cfg.lr))
}

fn predict_split(model: &ClassifierModel, ds: &Dataset, idx: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let probs = model.predict_rows(&ds.batch(idx))?;
    let preds = probs.iter().map(|r| argmax(r)).collect();
    Ok((probs, preds))
}

/// Macro-F1, accuracy and one-vs-rest AUROC/AUPRC on the instances `idx`.
pub fn evaluate(model: &ClassifierModel, ds: &Dataset, idx: &[usize]) -> Result<TestScores> {
    let (probs, preds) = predict_split(model, ds, idx)?;
    let labels = ds.labels(idx);
    Ok(TestScores {
        f1: macro_f1(&labels, &preds, ds.c),
        accuracy: accuracy(&labels, &preds),
        auroc: auroc_ovr(&labels, &probs)?,
        auprc: auprc_ovr(&labels, &probs)?,
    })
}
