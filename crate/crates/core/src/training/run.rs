//! Epoch loop with per-epoch evaluation, metrics CSV and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{model_checkpoint, model_from_checkpoint, Checkpoint, CheckpointKind};
use super::config::{InitMode, TRecgConfig, TrainMode};
use super::optim::{lr_at_epoch, AdamParams, OptimState};
use super::step::{evaluate, train_step};
use crate::data::{mix_generated, Batch, Dataset, EvalCrop, TrainAugment};
use crate::error::{Error, Result};
use crate::losses::{class_weights, ClassStats};
use crate::nn::{ModelConfig, TRecgModel};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "epoch,lr,loss_total,loss_content,loss_cls,train_acc,val_mean_class_acc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CKPT: &str = "final.trcg";
pub const LATEST_CKPT: &str = "latest.trcg";

/// Images used to calibrate a randomly initialized content net.
const CALIBRATION_IMAGES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_content: f64,
    pub loss_cls: f64,
    pub train_acc: f64,
    pub val_mean_class_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?}",
            self.epoch, self.lr, self.loss_total, self.loss_content, self.loss_cls, self.train_acc, self.val_mean_class_acc
        )
    }
}

/// Optional inputs of a run beyond config and data.
#[derive(Default)]
pub struct LoopOptions {
    /// Opposite-direction model whose translations replace `mix_ratio` of
    /// every batch.
    pub translator: Option<TRecgModel<f32>>,
    /// Source of encoder, decoder and content-net weights.
    pub init: Option<Checkpoint>,
    /// Checkpoint whose three-channel encoder becomes the content net.
    pub content: Option<Checkpoint>,
    /// Continue an interrupted run from its last checkpoint.
    pub resume: Option<Checkpoint>,
    pub out_dir: Option<PathBuf>,
    /// Stop after this many completed epochs (for interruption tests).
    pub stop_after: Option<usize>,
}

pub struct TrainOutcome {
    pub model: TRecgModel<f32>,
    pub optim: OptimState<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// Deterministic per-epoch stream, so a run resumed at an epoch boundary
/// replays exactly what the uninterrupted run would have drawn.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn stack_targets(model: &TRecgModel<f32>, ds: &Dataset, image_size: usize) -> Result<Tensor<f32>> {
    let crop = EvalCrop::new(image_size);
    let pairs = ds
        .pairs
        .iter()
        .take(CALIBRATION_IMAGES)
        .map(|p| crop.apply(p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch::from_pairs(&pairs)?.target(model.config.direction).clone())
}

fn init_model(cfg: &TRecgConfig, train: &Dataset, opts: &LoopOptions) -> Result<TRecgModel<f32>> {
    let config = ModelConfig {
        direction: cfg.direction,
        stages: cfg.stages.clone(),
        noise_dim: cfg.noise_dim(),
        n_classes: train.n_classes,
    };
    let mut model = TRecgModel::new(config, cfg.seed)?;
    let mut content_ready = false;
    if let Some(init) = &opts.init {
        if init.kind()? != CheckpointKind::Model {
            return Err(Error::InvalidArgument("init checkpoint must be a model checkpoint".into()));
        }
        let src = init.model_config()?;
        if src.direction != cfg.direction {
            return Err(Error::InvalidArgument(format!(
                "init checkpoint is {} but this run is {}",
                src.direction, cfg.direction
            )));
        }
        let map = init.map();
        model.store.load_named(&map, "encoder.", "encoder.")?;
        model.store.load_named(&map, "decoder.", "decoder.")?;
        if opts.content.is_none() && map.keys().any(|k| k.starts_with("content.")) {
            model.store.load_named(&map, "content.", "content.")?;
            content_ready = true;
        }
    }
    if let Some(src) = &opts.content {
        model.load_content_from_encoder(&src.map())?;
        content_ready = true;
    }
    if !content_ready {
        let targets = stack_targets(&model, train, cfg.image_size)?;
        model.calibrate_content(&targets)?;
    }
    Ok(model)
}

fn write_metrics(path: &Path, rows: &[String]) -> Result<()> {
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Rows of an existing metrics file for epochs before `start`.
fn previous_rows(path: &Path, start: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < start))
        .map(str::to_owned)
        .collect()
}

/// Trains for `cfg.epochs` epochs (or the remainder of a resumed run).
pub fn train_loop(cfg: &TRecgConfig, train: &Dataset, test: Option<&Dataset>, mut opts: LoopOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.mix_ratio > 0.0 && opts.translator.is_none() {
        return Err(Error::Config("mix_ratio > 0 needs a translator".into()));
    }
    if cfg.init_mode == InitMode::FromCheckpoint && opts.init.is_none() && opts.resume.is_none() {
        return Err(Error::Config("init_mode from_checkpoint needs an init checkpoint".into()));
    }
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }

    let (mut model, mut optim, start) = match opts.resume.take() {
        Some(ck) => {
            let (model, optim) = model_from_checkpoint(&ck)?;
            let optim = optim.ok_or_else(|| Error::InvalidArgument("resume checkpoint has no optimizer state".into()))?;
            (model, optim, ck.epoch()?)
        }
        None => {
            let model = init_model(cfg, train, &opts)?;
            let optim = OptimState::new(model.store.len());
            (model, optim, 0)
        }
    };
    if model.config.direction != cfg.direction || model.config.n_classes != train.n_classes {
        return Err(Error::InvalidArgument("dataset or direction does not match the model".into()));
    }

    let weights = if cfg.mode.uses_labels() {
        let stats = ClassStats::from_labels(train.labels()?, train.n_classes)?;
        class_weights(&stats, cfg.loss.delta)
    } else {
        Vec::new()
    };
    let adam = AdamParams {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let augment = TrainAugment::new(cfg.image_size);
    let evaluate_each_epoch = cfg.mode.uses_labels() && test.is_some_and(Dataset::is_labeled);

    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let metrics_path = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    let mut rows = metrics_path.as_deref().map_or_else(Vec::new, |p| previous_rows(p, start));

    let mut metrics = Vec::new();
    let end = opts.stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    for epoch in start..end {
        let lr = lr_at_epoch(epoch, cfg.base_lr, cfg.warm_epochs, cfg.decay_epochs)?;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let (mut total, mut content, mut cls, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let (mut correct, mut count) = (0usize, 0usize);
        for idx in train.epoch_batches(cfg.batch_size, &mut rng) {
            let pairs = idx
                .iter()
                .map(|&i| augment.apply(&train.pairs[i], &mut rng).map(|(p, _)| p))
                .collect::<Result<Vec<_>>>()?;
            let mut batch = Batch::from_pairs(&pairs)?;
            if let Some(t) = opts.translator.as_mut() {
                mix_generated(&mut batch, cfg.direction, t, cfg.mix_ratio, &mut rng)?;
            }
            let m = train_step(&mut model, &mut optim, &batch, &cfg.loss, cfg.mode, &weights, lr, &adam, &mut rng)?;
            if !m.loss_total.is_finite() {
                return Err(Error::InvalidArgument(format!("loss diverged at epoch {epoch}")));
            }
            total += m.loss_total;
            content += m.loss_content;
            cls += m.loss_cls;
            correct += m.correct;
            count += m.count;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let val = if evaluate_each_epoch {
            evaluate(&mut model, test.expect("checked"), cfg.image_size, cfg.batch_size)?.mean_class_acc
        } else {
            f64::NAN
        };
        let em = EpochMetrics {
            epoch,
            lr,
            loss_total: total / n,
            loss_content: content / n,
            loss_cls: cls / n,
            train_acc: if count == 0 { f64::NAN } else { correct as f64 / count as f64 },
            val_mean_class_acc: val,
        };
        metrics.push(em);
        if let Some(dir) = &opts.out_dir {
            rows.push(em.csv_row());
            write_metrics(&dir.join(METRICS_FILE), &rows)?;
            let ck = model_checkpoint(&model, epoch + 1, Some(&optim));
            ck.save(&dir.join(LATEST_CKPT))?;
            if cfg.keep_epoch_checkpoints {
                ck.save(&dir.join(format!("epoch_{:03}.trcg", epoch + 1)))?;
            }
        }
    }
    if let Some(dir) = &opts.out_dir {
        if end == cfg.epochs {
            model_checkpoint(&model, end, Some(&optim)).save(&dir.join(FINAL_CKPT))?;
        }
    }
    Ok(TrainOutcome { model, optim, metrics })
}

/// Translation-only training on `dataset` with every label removed first,
/// so no label can be read. Starts from a fresh optimizer.
pub fn pretrain_unlabeled(cfg: &TRecgConfig, dataset: &Dataset, opts: LoopOptions) -> Result<TrainOutcome> {
    let cfg = TRecgConfig {
        mode: TrainMode::TranslationOnly,
        mix_ratio: 0.0,
        ..cfg.clone()
    };
    let unlabeled = dataset.unlabeled();
    train_loop(&cfg, &unlabeled, None, LoopOptions { translator: None, ..opts })
}
