//! Mini-batch Adam training, top-k evaluation, metrics files and
//! checkpoints.

mod adam;
mod checkpoint;
mod config;
mod metrics;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_into, save_checkpoint, CHECKPOINT_VERSION,
};
pub use config::{lr_at, TrainConfig};
pub use metrics::{read_metrics_csv, write_metrics_csv, MetricsRecord, METRICS_HEADER};

use std::time::Instant;

use crate::architecture::Model;
use crate::data::{batch_indices, Dataset};
use crate::error::{Error, Result};
use crate::kernels::{softmax_cross_entropy_forward, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Batch size used for evaluation passes.
pub const EVAL_BATCH: usize = 250;

/// Fraction of rows whose label is among the `k` largest logits. A class
/// outranks the label when its logit is larger, or equal with a lower
/// index.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let (n, classes) = logits.dims2("topk_accuracy")?;
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!(
            "k = {k} is outside 1..={classes}"
        )));
    }
    if labels.len() != n || n == 0 {
        return Err(Error::shape(
            "topk_accuracy",
            format!("{n} rows and {} labels", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    let hits = logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let ahead = row
                .iter()
                .enumerate()
                .filter(|&(c, &v)| v > row[y] || (v == row[y] && c < y))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Eval-mode loss and accuracy over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    /// Top-5, or top-K when there are fewer than 5 classes.
    pub top5: f64,
}

/// Eval-mode pass over `data` in fixed-size batches.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    let k5 = data.class_count().min(5);
    let (mut loss, mut top1, mut top5) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in data.batches(batch_size, None) {
        let logits = model.logits(&x)?;
        let n = y.len() as f64;
        loss += softmax_cross_entropy_forward(&logits, &y)?.0 as f64 * n;
        top1 += topk_accuracy(&logits, &y, 1)? * n;
        top5 += topk_accuracy(&logits, &y, k5)? * n;
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        top1: top1 / n,
        top5: top5 / n,
    })
}

/// Mini-batches of one epoch, shuffled by a seed derived from
/// `(seed, epoch)`. A trailing batch of one sample joins the previous
/// batch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut batches = batch_indices(n, batch_size, Some(epoch_seed(seed, epoch)));
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed
        ^ (epoch as u64)
            .wrapping_add(1)
            .wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Result of a training run: the final-epoch model, one record per epoch,
/// and the mean loss of every optimizer step.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    /// Best validation top-1 and the epoch it occurred in.
    pub fn best_val_top1(&self) -> Option<(usize, f64)> {
        self.metrics
            .iter()
            .map(|r| (r.epoch, r.val_top1))
            .fold(None, |best, cur| match best {
                Some(b) if b.1 >= cur.1 => Some(b),
                _ => Some(cur),
            })
    }
}

/// Forward, loss, backward and one Adam update on a single batch, with
/// batch norm in train mode. Returns the batch loss.
pub fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    x: Tensor,
    labels: &[usize],
    lr: f64,
    hyper: &AdamHyper,
) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let trace = model.forward_on(&mut tape, xv, Mode::Train, true)?;
    let loss_var = tape.softmax_cross_entropy(trace.logits, labels)?;
    let loss = tape.value(loss_var)?.data()[0] as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss}")));
    }
    let grads = tape.backward(loss_var)?;
    let grads: Vec<&Tensor> = trace
        .params
        .iter()
        .map(|&v| grads.get(v).ok_or(Error::StaleRecord))
        .collect::<Result<_>>()?;
    let mut params: Vec<&mut Tensor> = model.params_mut().map(|(_, t)| t).collect();
    adam_step(&mut params, &grads, state, lr, hyper)?;
    Ok(loss)
}

/// [`train_with`] without a per-epoch callback.
pub fn train(
    model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, val_set, cfg, |_| {})
}

/// Trains for `cfg.epochs` epochs. Every epoch shuffles the training set
/// with a seed derived from `cfg.seed`, takes one Adam step per batch at
/// the scheduled learning rate, then evaluates on `val_set` in eval mode
/// and reports the record to `on_epoch`.
pub fn train_with(
    mut model: Model,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Data(
            "training needs at least 2 samples for batch statistics".into(),
        ));
    }
    if train_set.image_shape() != model.config().input_shape
        || val_set.image_shape() != model.config().input_shape
    {
        return Err(Error::shape(
            "train",
            format!(
                "images {:?} / {:?}, model expects {:?}",
                train_set.image_shape(),
                val_set.image_shape(),
                model.config().input_shape
            ),
        ));
    }
    let hyper = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut state = AdamState::new(model.params().values().map(Tensor::shape));
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let (mut total, mut seen) = (0.0f64, 0usize);
        for idx in epoch_batches(train_set.len(), cfg.batch_size, cfg.seed, epoch) {
            let (x, y) = train_set.gather(&idx);
            let loss =
                train_step(&mut model, &mut state, x, &y, lr, &hyper).map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!(
                        "{m} at epoch {epoch}, step {}",
                        step_losses.len()
                    )),
                    other => other,
                })?;
            step_losses.push(loss);
            total += loss * y.len() as f64;
            seen += y.len();
        }
        let val = evaluate(&model, val_set, EVAL_BATCH)?;
        let record = MetricsRecord {
            epoch,
            train_loss: total / seen as f64,
            val_loss: val.loss,
            val_top1: val.top1,
            val_top5: val.top5,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        metrics.push(record);
    }
    Ok(TrainOutcome {
        model,
        metrics,
        step_losses,
    })
}
