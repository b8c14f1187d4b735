//! One optimization step and recognition-only evaluation.

use rand::Rng;

use super::config::TrainMode;
use super::optim::{adam_step, AdamParams, OptimState};
use crate::autodiff::{Tape, TraceEntry, Var};
use crate::data::{Batch, Dataset, EvalCrop};
use crate::error::{Error, Result};
use crate::losses::{content_loss, weighted_cls_loss, LossWeights};
use crate::nn::{Mode, TRecgModel};

/// Losses of one batch; terms a mode does not compute are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub loss_total: f64,
    pub loss_content: f64,
    pub loss_cls: f64,
    pub correct: usize,
    pub count: usize,
}

impl StepMetrics {
    pub fn batch_acc(&self) -> f64 {
        if self.count == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

pub(crate) fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Forward and backward for `mode`, leaving fresh gradients in the model's
/// parameter store. Labels are only read when `mode` uses them.
pub fn forward_backward<R: Rng + ?Sized>(
    model: &mut TRecgModel<f32>,
    batch: &Batch,
    weights: &LossWeights,
    mode: TrainMode,
    class_weights: &[f64],
    rng: &mut R,
) -> Result<StepMetrics> {
    let direction = model.config.direction;
    model.store.zero_grads();
    let mut tape = Tape::new();
    let x = tape.constant(batch.input(direction).clone());
    let enc = model.encode(&mut tape, x, Mode::Train)?;

    let mut terms: Vec<Var> = Vec::with_capacity(2);
    let mut metrics = StepMetrics {
        loss_total: 0.0,
        loss_content: f64::NAN,
        loss_cls: f64::NAN,
        correct: 0,
        count: 0,
    };
    if mode.uses_content() {
        let noise = model.decoder_noise(&mut tape, &enc, rng)?;
        let generated = model.decode(&mut tape, &enc, noise, Mode::Train)?;
        let lc = content_loss(&mut tape, model, generated, batch.target(direction), &weights.content_layers)?;
        metrics.loss_content = tape.value(lc).item() as f64;
        terms.push(tape.scale(lc, weights.alpha as f32));
    }
    if mode.uses_labels() {
        let labels = batch.labels()?;
        let logits = model.classify(&mut tape, enc.embedding())?;
        let lcls = weighted_cls_loss(&mut tape, logits, labels, class_weights)?;
        metrics.loss_cls = tape.value(lcls).item() as f64;
        let preds = argmax_rows(tape.value(logits).data(), model.config.n_classes);
        metrics.correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        metrics.count = labels.len();
        terms.push(tape.scale(lcls, weights.beta as f32));
    }
    let total = match terms[..] {
        [a, b] => tape.add(a, b)?,
        [a] => a,
        _ => unreachable!("every mode has at least one term"),
    };
    metrics.loss_total = tape.value(total).item() as f64;
    tape.backward(total)?;
    model.store.accumulate_grads(&tape);
    Ok(metrics)
}

/// [`forward_backward`] followed by one Adam update over the trainable
/// parameters that received gradients (never the content net).
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    model: &mut TRecgModel<f32>,
    optim: &mut OptimState<f32>,
    batch: &Batch,
    weights: &LossWeights,
    mode: TrainMode,
    class_weights: &[f64],
    lr: f64,
    adam: &AdamParams,
    rng: &mut R,
) -> Result<StepMetrics> {
    let m = forward_backward(model, batch, weights, mode, class_weights, rng)?;
    adam_step(&mut model.store, optim, lr, adam);
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub mean_class_acc: f64,
    pub per_class: Vec<f64>,
    /// Ops executed for the first evaluation batch.
    pub trace: Vec<TraceEntry>,
}

/// `correct_k / count_k` per class and their mean.
pub fn mean_class_accuracy(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<(f64, Vec<f64>)> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let mut correct = vec![0usize; n_classes];
    let mut count = vec![0usize; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if l >= n_classes {
            return Err(Error::LabelOutOfRange { label: l, classes: n_classes });
        }
        count[l] += 1;
        correct[l] += usize::from(p == l);
    }
    let per_class = correct
        .iter()
        .zip(&count)
        .enumerate()
        .map(|(k, (&c, &n))| if n == 0 { Err(Error::EmptyClass { class: k }) } else { Ok(c as f64 / n as f64) })
        .collect::<Result<Vec<_>>>()?;
    Ok((per_class.iter().sum::<f64>() / n_classes as f64, per_class))
}

/// Center-cropped, fixed-order evaluation driven by `logits_of`, which
/// records one batch's forward pass on the given tape.
pub fn evaluate_with(
    dataset: &Dataset,
    image_size: usize,
    batch_size: usize,
    mut logits_of: impl FnMut(&mut Tape<f32>, &Batch) -> Result<Var>,
) -> Result<EvalReport> {
    let labels = dataset.labels()?;
    let crop = EvalCrop::new(image_size);
    let mut preds = Vec::with_capacity(dataset.len());
    let mut trace = Vec::new();
    for chunk in dataset.pairs.chunks(batch_size.max(1)) {
        let pairs = chunk.iter().map(|p| crop.apply(p)).collect::<Result<Vec<_>>>()?;
        let batch = Batch::from_pairs(&pairs)?;
        let mut tape = Tape::inference();
        let logits = logits_of(&mut tape, &batch)?;
        preds.extend(argmax_rows(tape.value(logits).data(), dataset.n_classes));
        if trace.is_empty() {
            trace = tape.trace();
        }
    }
    let (mean_class_acc, per_class) = mean_class_accuracy(&preds, &labels, dataset.n_classes)?;
    Ok(EvalReport {
        mean_class_acc,
        per_class,
        trace,
    })
}

/// Mean-class accuracy of the recognition branch (encoder then
/// classifier, running batch-norm statistics).
pub fn evaluate(model: &mut TRecgModel<f32>, dataset: &Dataset, image_size: usize, batch_size: usize) -> Result<EvalReport> {
    if dataset.n_classes != model.config.n_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model {}",
            dataset.n_classes, model.config.n_classes
        )));
    }
    let direction = model.config.direction;
    evaluate_with(dataset, image_size, batch_size, |tape, batch| {
        let x = tape.constant(batch.input(direction).clone());
        model.logits(tape, x, Mode::Eval)
    })
}
