//! Layer-wise content loss, rescaled weighted cross-entropy and the joint
//! objective.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::TRecgModel;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Coefficient of the content (translation) loss.
    pub alpha: f64,
    /// Coefficient of the classification loss.
    pub beta: f64,
    /// Offset keeping the rarest class's weight above zero.
    pub delta: f64,
    /// Content-net stages (1-based) compared by the content loss.
    pub content_layers: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 10.0,
            beta: 1.0,
            delta: 0.01,
            content_layers: vec![1, 2, 3, 4],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be >= 0".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config("delta must be > 0".into()));
        }
        validate_layers(&self.content_layers)
    }
}

fn validate_layers(layers: &[usize]) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("content loss needs at least one layer".into()));
    }
    if let Some(l) = layers.iter().find(|&&l| !(1..=4).contains(&l)) {
        return Err(Error::Config(format!("content layer {l} is not in 1..=4")));
    }
    Ok(())
}

/// Per-class training image counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassStats {
    counts: Vec<usize>,
}

impl ClassStats {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::InvalidArgument(format!("every class needs at least one sample: {counts:?}")));
        }
        Ok(ClassStats { counts })
    }

    pub fn from_labels(labels: impl IntoIterator<Item = usize>, n_classes: usize) -> Result<Self> {
        let mut counts = vec![0; n_classes];
        for l in labels {
            *counts
                .get_mut(l)
                .ok_or(Error::LabelOutOfRange { label: l, classes: n_classes })? += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn min(&self) -> usize {
        *self.counts.iter().min().expect("non-empty")
    }

    pub fn max(&self) -> usize {
        *self.counts.iter().max().expect("non-empty")
    }
}

/// `w(y) = (N(y) - N_min + delta) / (N_max - N_min)`, or all ones when every
/// class has the same count.
///
/// Note the direction: the most populous class gets the largest weight.
pub fn class_weights(stats: &ClassStats, delta: f64) -> Vec<f64> {
    let (lo, hi) = (stats.min(), stats.max());
    if lo == hi {
        return vec![1.0; stats.counts.len()];
    }
    let span = (hi - lo) as f64;
    stats
        .counts
        .iter()
        .map(|&n| ((n - lo) as f64 + delta) / span)
        .collect()
}

/// `(1/N) * sum_i -w(y_i) * log softmax(logits_i)[y_i]`; normalized by the
/// batch size, not by the total weight.
pub fn weighted_cls_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
    let weights = labels
        .iter()
        .map(|&l| {
            class_weights
                .get(l)
                .map(|&w| T::of(w))
                .ok_or(Error::LabelOutOfRange {
                    label: l,
                    classes: class_weights.len(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    tape.softmax_cross_entropy(logits, labels, &weights)
}

/// Sum over `layers` of the mean absolute difference between content-net
/// features of `generated` and of `target`. Only `generated` receives
/// gradients.
pub fn content_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &mut TRecgModel<T>,
    generated: Var,
    target: &Tensor<T>,
    layers: &[usize],
) -> Result<Var> {
    validate_layers(layers)?;
    if tape.shape(generated) != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "content_loss",
            left: tape.shape(generated).to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let target_feats = model.target_features(target)?;
    let gen_feats = model.content_features(tape, generated)?;
    tape.scoped("content_loss", |tape| {
        let mut total: Option<Var> = None;
        for &l in layers {
            let t = tape.constant(target_feats[l - 1].clone());
            let d = tape.l1_distance(gen_feats[l - 1], t)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        Ok(total.expect("validated non-empty"))
    })
}

/// `alpha * content + beta * cls`.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, content: Var, cls: Var, weights: &LossWeights) -> Result<Var> {
    let a = tape.scale(content, T::of(weights.alpha));
    let b = tape.scale(cls, T::of(weights.beta));
    tape.add(a, b)
}
