//! Two-stream classifier over frozen modality-A and modality-B encoders.

use std::fs;
use std::path::PathBuf;

use crate::autodiff::{Tape, Var};
use crate::data::{Batch, Dataset, TrainAugment};
use crate::error::{Error, Result};
use crate::losses::{class_weights, weighted_cls_loss, ClassStats};
use crate::nn::{Direction, Encoder, Init, Linear, Mode, ModelConfig, ParamStore, StageSpec};
use crate::tensor::Tensor;
use crate::training::{
    adam_step, argmax_rows, epoch_rng, evaluate_with, lr_at_epoch, meta_tensors, AdamParams, Checkpoint, CheckpointKind, EpochMetrics,
    EvalReport, OptimState, TRecgConfig, CSV_HEADER, FINAL_CKPT, METRICS_FILE,
};

pub const ENCODER_A: &str = "enc_a";
pub const ENCODER_B: &str = "enc_b";
pub const HEAD: &str = "fusion";
/// Widths of the two hidden fully connected layers.
pub const HIDDEN: [usize; 2] = [128, 64];

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub store: ParamStore<f32>,
    pub stages: StageSpec,
    pub n_classes: usize,
    pub encoder_a: Encoder,
    pub encoder_b: Encoder,
    pub fc: [Linear; 3],
}

impl FusionModel {
    /// Fresh head, encoders with seeded placeholder weights.
    pub fn new(stages: &StageSpec, n_classes: usize, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let encoder_a = Encoder::new(&mut store, &mut init, ENCODER_A, Direction::AToB.input_channels(), stages)?;
        let encoder_b = Encoder::new(&mut store, &mut init, ENCODER_B, Direction::BToA.input_channels(), stages)?;
        store.set_requires_grad(&format!("{ENCODER_A}."), false);
        store.set_requires_grad(&format!("{ENCODER_B}."), false);
        let width = 2 * stages.channels[3];
        let fc = [
            Linear::new(&mut store, &mut init, &format!("{HEAD}.fc1"), width, HIDDEN[0]),
            Linear::new(&mut store, &mut init, &format!("{HEAD}.fc2"), HIDDEN[0], HIDDEN[1]),
            Linear::new(&mut store, &mut init, &format!("{HEAD}.fc3"), HIDDEN[1], n_classes),
        ];
        Ok(FusionModel {
            store,
            stages: stages.clone(),
            n_classes,
            encoder_a,
            encoder_b,
            fc,
        })
    }

    /// Encoders taken from an a2b and a b2a model checkpoint.
    pub fn from_model_checkpoints(a: &Checkpoint, b: &Checkpoint, seed: u64) -> Result<Self> {
        let (ca, cb) = (a.model_config()?, b.model_config()?);
        if ca.direction != Direction::AToB || cb.direction != Direction::BToA {
            return Err(Error::InvalidArgument(format!(
                "fusion needs an a2b and a b2a checkpoint, got {} and {}",
                ca.direction, cb.direction
            )));
        }
        if ca.stages != cb.stages || ca.n_classes != cb.n_classes {
            return Err(Error::InvalidArgument("the two checkpoints disagree on stage layout or class count".into()));
        }
        let mut model = FusionModel::new(&ca.stages, ca.n_classes, seed)?;
        model.store.load_named(&a.map(), &format!("{ENCODER_A}."), "encoder.")?;
        model.store.load_named(&b.map(), &format!("{ENCODER_B}."), "encoder.")?;
        Ok(model)
    }

    /// Concatenated pooled embeddings of both encoders (eval mode).
    pub fn features(&mut self, tape: &mut Tape<f32>, img_a: Var, img_b: Var) -> Result<Var> {
        let (sa, sb) = (tape.shape(img_a), tape.shape(img_b));
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch {
                op: "fusion_forward",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let ea = tape.scoped(ENCODER_A, |t| self.encoder_a.forward(t, &mut self.store, img_a, Mode::Eval))?;
        let eb = tape.scoped(ENCODER_B, |t| self.encoder_b.forward(t, &mut self.store, img_b, Mode::Eval))?;
        let pa = tape.global_avg_pool(ea.embedding())?;
        let pb = tape.global_avg_pool(eb.embedding())?;
        tape.concat_channels(pa, pb)
    }

    /// fc1, relu, fc2, relu, fc3.
    pub fn head(&self, tape: &mut Tape<f32>, features: Var) -> Result<Var> {
        tape.scoped(HEAD, |t| {
            let h = self.fc[0].forward(t, &self.store, features)?;
            let h = t.relu(h);
            let h = self.fc[1].forward(t, &self.store, h)?;
            let h = t.relu(h);
            self.fc[2].forward(t, &self.store, h)
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<f32>, img_a: Var, img_b: Var) -> Result<Var> {
        let f = self.features(tape, img_a, img_b)?;
        self.head(tape, f)
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn checkpoint(&self, epoch: usize, optim: Option<&OptimState<f32>>) -> Checkpoint {
        let config = ModelConfig {
            direction: Direction::AToB,
            stages: self.stages.clone(),
            noise_dim: 0,
            n_classes: self.n_classes,
        };
        let mut tensors = meta_tensors(CheckpointKind::Fusion, &config, epoch);
        tensors.extend(self.store.named_tensors());
        Checkpoint {
            tensors,
            optimizer: optim.map(|o| crate::training::optimizer_tensors(&self.store, o)),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind()? != CheckpointKind::Fusion {
            return Err(Error::InvalidArgument("expected a fusion checkpoint".into()));
        }
        let config = ckpt.model_config()?;
        let mut model = FusionModel::new(&config.stages, config.n_classes, 0)?;
        model.store.load_named(&ckpt.map(), "", "")?;
        Ok(model)
    }
}

/// Logits for an aligned batch of modality-A and modality-B images.
pub fn fusion_forward(model: &mut FusionModel, tape: &mut Tape<f32>, img_a: &Tensor<f32>, img_b: &Tensor<f32>) -> Result<Var> {
    let a = tape.constant(img_a.clone());
    let b = tape.constant(img_b.clone());
    model.forward(tape, a, b)
}

pub fn evaluate_fusion(model: &mut FusionModel, dataset: &Dataset, image_size: usize, batch_size: usize) -> Result<EvalReport> {
    evaluate_with(dataset, image_size, batch_size, |tape, batch| {
        fusion_forward(model, tape, &batch.image_a, &batch.image_b)
    })
}

pub struct FusionOutcome {
    pub model: FusionModel,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains only the fully connected head with the weighted cross-entropy at
/// half the base learning rate, on train-augmented crops.
pub fn train_fusion(
    mut model: FusionModel,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TRecgConfig,
    out_dir: Option<PathBuf>,
) -> Result<FusionOutcome> {
    cfg.validate()?;
    if train.n_classes != model.n_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, fusion model {}",
            train.n_classes, model.n_classes
        )));
    }
    let weights = class_weights(&ClassStats::from_labels(train.labels()?, train.n_classes)?, cfg.loss.delta);
    let adam = AdamParams {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let augment = TrainAugment::new(cfg.image_size);
    let mut optim = OptimState::new(model.store.len());
    if let Some(dir) = &out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut csv = format!("{CSV_HEADER}\n");
    let mut metrics = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.base_lr, cfg.warm_epochs, cfg.decay_epochs)? / 2.0;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let (mut loss_sum, mut batches, mut correct, mut count) = (0.0, 0usize, 0usize, 0usize);
        for idx in train.epoch_batches(cfg.batch_size, &mut rng) {
            let pairs = idx
                .iter()
                .map(|&i| augment.apply(&train.pairs[i], &mut rng).map(|(p, _)| p))
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::from_pairs(&pairs)?;
            let labels = batch.labels()?;
            // frozen encoders: features off-tape, gradients only for the head
            let feats = {
                let mut t = Tape::inference();
                let f = fusion_forward_features(&mut model, &mut t, &batch)?;
                t.value(f).clone()
            };
            model.store.zero_grads();
            let mut tape = Tape::new();
            let f = tape.constant(feats);
            let logits = model.head(&mut tape, f)?;
            let loss = weighted_cls_loss(&mut tape, logits, labels, &weights)?;
            tape.backward(loss)?;
            model.store.accumulate_grads(&tape);
            adam_step(&mut model.store, &mut optim, lr, &adam);
            loss_sum += tape.value(loss).item() as f64;
            let preds = argmax_rows(tape.value(logits).data(), model.n_classes);
            correct += preds.iter().zip(labels).filter(|(p, l)| p == l).count();
            count += labels.len();
            batches += 1;
        }
        let val = match test {
            Some(t) => evaluate_fusion(&mut model, t, cfg.image_size, cfg.batch_size)?.mean_class_acc,
            None => f64::NAN,
        };
        let loss = loss_sum / batches.max(1) as f64;
        let em = EpochMetrics {
            epoch,
            lr,
            loss_total: loss,
            loss_content: f64::NAN,
            loss_cls: loss,
            train_acc: correct as f64 / count.max(1) as f64,
            val_mean_class_acc: val,
        };
        metrics.push(em);
        if let Some(dir) = &out_dir {
            csv.push_str(&em.csv_row());
            csv.push('\n');
            let path = dir.join(METRICS_FILE);
            fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        }
    }
    if let Some(dir) = &out_dir {
        model.checkpoint(cfg.epochs, Some(&optim)).save(&dir.join(FINAL_CKPT))?;
    }
    Ok(FusionOutcome { model, metrics })
}

fn fusion_forward_features(model: &mut FusionModel, tape: &mut Tape<f32>, batch: &Batch) -> Result<Var> {
    let a = tape.constant(batch.image_a.clone());
    let b = tape.constant(batch.image_b.clone());
    model.features(tape, a, b)
}
