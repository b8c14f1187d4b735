//! Subcommand implementations behind the `trecg` binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trecg_core::data::{
    gen_synthetic_dataset, load_dataset, pnm, write_dataset, Balance, Batch, Dataset, ModalPair, Split, SyntheticSpec, MANIFEST,
};
use trecg_core::fusion::{evaluate_fusion, train_fusion, FusionModel};
use trecg_core::gradsuite;
use trecg_core::nn::{Direction, TRecgModel};
use trecg_core::training::{
    evaluate, model_from_checkpoint, pretrain_unlabeled, train_loop, Checkpoint, CheckpointKind, EvalReport, InitMode, LoopOptions,
    TRecgConfig, TrainMode, LATEST_CKPT,
};

/// First sample index of the test split, far from any train index.
pub const TEST_INDEX_OFFSET: u64 = 1_000_000;
/// Resolved configuration written next to every training run.
pub const RESOLVED_CONFIG: &str = "resolved.cfg";
/// Default fraction of each batch replaced when `--mix-from` is given.
pub const DEFAULT_MIX_RATIO: f64 = 0.3;

#[derive(Parser, Debug)]
#[command(name = "trecg", version, about = "Translate-to-recognize training on paired two-modality images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic paired dataset with train/ and test/ splits.
    GenData(GenDataArgs),
    /// Train a model (joint, classification_only or translation_only).
    Train(TrainArgs),
    /// Translation-only training with every label stripped.
    Pretrain(PretrainArgs),
    /// Write the complementary modality generated for each pair of a split.
    Translate(TranslateArgs),
    /// Train a two-stream classifier over two frozen encoders.
    Fuse(FuseArgs),
    /// Mean-class accuracy of a model or fusion checkpoint.
    Eval(EvalArgs),
    /// Central-difference gradient checks; fails if any exceeds tolerance.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BalanceArg {
    Balanced,
    Imbalanced,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 256)]
    pub train: usize,
    #[arg(long, default_value_t = 128)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Class distribution of the train split; the test split is always balanced.
    #[arg(long, value_enum, default_value_t = BalanceArg::Balanced)]
    pub balance: BalanceArg,
    /// Write "-" for every train label.
    #[arg(long)]
    pub unlabeled: bool,
}

/// Flags shared by the training subcommands. Precedence: built-in
/// defaults, then `--config`, then explicit flags.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// Dataset directory holding train/ and test/ (or a single split).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from `<out>/latest.trcg`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub direction: Option<Direction>,
    #[arg(long)]
    pub mode: Option<TrainMode>,
    /// Opposite-direction checkpoint whose translations replace part of each batch.
    #[arg(long)]
    pub mix_from: Option<PathBuf>,
    #[arg(long)]
    pub mix_ratio: Option<f64>,
    /// Start encoder and decoder from this checkpoint.
    #[arg(long)]
    pub init_ckpt: Option<PathBuf>,
    /// Checkpoint whose three-channel encoder becomes the content net.
    #[arg(long)]
    pub content_ckpt: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub direction: Option<Direction>,
    #[arg(long)]
    pub content_ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Modality-A (a2b) model checkpoint.
    #[arg(long)]
    pub a2b: PathBuf,
    /// Modality-B (b2a) model checkpoint.
    #[arg(long)]
    pub b2a: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Also write the report to `<out>/eval.tsv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random points per check.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
}

/// Runs one parsed command, printing progress to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Translate(a) => translate(&a),
        Command::Fuse(a) => fuse(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let balance = match a.balance {
        BalanceArg::Balanced => Balance::Balanced,
        BalanceArg::Imbalanced => Balance::IMBALANCED,
    };
    let train_spec = SyntheticSpec {
        n_classes: a.classes,
        size: a.size,
        count: a.train,
        balance,
        seed: a.seed,
    };
    let test_spec = SyntheticSpec {
        count: a.test,
        balance: Balance::Balanced,
        ..train_spec
    };
    let mut train = gen_synthetic_dataset(&train_spec, 0)?;
    if a.unlabeled {
        train = train.unlabeled();
    }
    let test = gen_synthetic_dataset(&test_spec, TEST_INDEX_OFFSET)?;
    write_dataset(&a.out.join(Split::Train.dir_name()), &train)?;
    write_dataset(&a.out.join(Split::Test.dir_name()), &test)?;
    println!("wrote {} train and {} test pairs to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

/// `dir` itself when it holds a manifest, otherwise `dir/<split>`.
pub fn split_dir(dir: &Path, split: Split) -> PathBuf {
    if dir.join(MANIFEST).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(split.dir_name())
    }
}

pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let path = split_dir(dir, split);
    let (_, loader) = load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    Ok(loader.load_all()?)
}

/// The test split next to a train split, when there is one.
fn optional_test(dir: &Path) -> Result<Option<Dataset>> {
    if dir.join(MANIFEST).is_file() || !dir.join(Split::Test.dir_name()).join(MANIFEST).is_file() {
        return Ok(None);
    }
    load_split(dir, Split::Test).map(Some)
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Defaults, then the config file, then the shared flags.
fn base_config(run: &RunArgs, direction: Option<Direction>) -> Result<TRecgConfig> {
    let mut cfg = TRecgConfig::new(direction.unwrap_or(Direction::AToB));
    if let Some(path) = &run.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(d) = direction {
        cfg.direction = d;
    }
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(e) = run.epochs {
        cfg.set_epochs(e);
    }
    if let Some(b) = run.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = run.lr {
        cfg.base_lr = lr;
    }
    Ok(cfg)
}

fn write_resolved(out: &Path, cfg: &TRecgConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_text()).with_context(|| format!("writing {}", path.display()))
}

fn resume_ckpt(run: &RunArgs) -> Result<Option<Checkpoint>> {
    if !run.resume {
        return Ok(None);
    }
    let path = run.out.join(LATEST_CKPT);
    if !path.is_file() {
        bail!("--resume given but {} does not exist", path.display());
    }
    load_ckpt(&path).map(Some)
}

pub fn train_config(a: &TrainArgs) -> Result<TRecgConfig> {
    let mut cfg = base_config(&a.run, a.direction)?;
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(v) = a.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = a.delta {
        cfg.loss.delta = v;
    }
    if let Some(p) = &a.init_ckpt {
        cfg.init_ckpt = Some(p.clone());
        cfg.init_mode = InitMode::FromCheckpoint;
    }
    if let Some(p) = &a.content_ckpt {
        cfg.content_ckpt = Some(p.clone());
    }
    if let Some(p) = &a.mix_from {
        cfg.mix_from = Some(p.clone());
        if cfg.mix_ratio == 0.0 {
            cfg.mix_ratio = DEFAULT_MIX_RATIO;
        }
    }
    if let Some(r) = a.mix_ratio {
        cfg.mix_ratio = r;
    }
    if cfg.mix_from.is_none() && a.mix_ratio.is_none() {
        cfg.mix_ratio = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn loop_options(cfg: &TRecgConfig, run: &RunArgs) -> Result<LoopOptions> {
    let translator = match &cfg.mix_from {
        Some(p) => Some(model_from_checkpoint(&load_ckpt(p)?)?.0),
        None => None,
    };
    let init = match (&cfg.init_mode, &cfg.init_ckpt) {
        (InitMode::FromCheckpoint, Some(p)) => Some(load_ckpt(p)?),
        (InitMode::FromCheckpoint, None) => bail!("init_mode from_checkpoint needs init_ckpt"),
        (InitMode::Random, _) => None,
    };
    let content = cfg.content_ckpt.as_deref().map(load_ckpt).transpose()?;
    Ok(LoopOptions {
        translator,
        init,
        content,
        resume: resume_ckpt(run)?,
        out_dir: Some(run.out.clone()),
        stop_after: None,
    })
}

fn report_run(out: &Path, metrics: &[trecg_core::training::EpochMetrics]) {
    if let Some(last) = metrics.last() {
        println!(
            "epoch {}: loss {:.4}, val mean-class acc {:.4}",
            last.epoch, last.loss_total, last.val_mean_class_acc
        );
    }
    println!("artifacts in {}", out.display());
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    write_resolved(&a.run.out, &cfg)?;
    let train = load_split(&a.run.data, Split::Train)?;
    let test = optional_test(&a.run.data)?;
    let opts = loop_options(&cfg, &a.run)?;
    let outcome = train_loop(&cfg, &train, test.as_ref(), opts)?;
    report_run(&a.run.out, &outcome.metrics);
    Ok(())
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.run, a.direction)?;
    cfg.mode = TrainMode::TranslationOnly;
    cfg.mix_ratio = 0.0;
    cfg.mix_from = None;
    cfg.init_mode = InitMode::Random;
    cfg.init_ckpt = None;
    if let Some(p) = &a.content_ckpt {
        cfg.content_ckpt = Some(p.clone());
    }
    cfg.validate()?;
    write_resolved(&a.run.out, &cfg)?;
    let data = load_split(&a.run.data, Split::Train)?;
    let opts = LoopOptions {
        content: cfg.content_ckpt.as_deref().map(load_ckpt).transpose()?,
        resume: resume_ckpt(&a.run)?,
        out_dir: Some(a.run.out.clone()),
        ..LoopOptions::default()
    };
    let outcome = pretrain_unlabeled(&cfg, &data, opts)?;
    report_run(&a.run.out, &outcome.metrics);
    Ok(())
}

/// File a generated image of modality `d`'s output is written to.
fn generated_path(out: &Path, id: &str, d: Direction) -> PathBuf {
    match d {
        Direction::AToB => out.join(format!("{id}.b.pgm")),
        Direction::BToA => out.join(format!("{id}.a.ppm")),
    }
}

/// Writes a dataset in which the checkpoint's output modality is replaced
/// by its translations of the input modality.
fn translate(a: &TranslateArgs) -> Result<()> {
    let (mut model, _) = model_from_checkpoint(&load_ckpt(&a.ckpt)?)?;
    let data = load_split(&a.data, a.split)?;
    let direction = model.config.direction;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut pairs = Vec::with_capacity(data.len());
    for chunk in data.pairs.chunks(a.batch.max(1)) {
        let batch = Batch::from_pairs(chunk)?;
        let generated = model.translate(batch.input(direction), &mut rng)?;
        for (i, p) in chunk.iter().enumerate() {
            let g = trecg_core::Tensor::new(generated.shape()[1..].to_vec(), generated.batch_item(i).to_vec())?;
            let (img_a, img_b) = match direction {
                Direction::AToB => (p.image_a.clone(), g),
                Direction::BToA => (g, p.image_b.clone()),
            };
            let label = p.label().ok();
            pairs.push(ModalPair::new(p.id.clone(), img_a, img_b, label)?);
        }
    }
    let labeled = pairs.iter().all(ModalPair::is_labeled);
    let mut ds = Dataset::new(data.n_classes, pairs)?;
    if !labeled {
        ds = ds.unlabeled();
    }
    write_dataset(&a.out, &ds)?;
    println!(
        "wrote {} generated images ({}) to {}",
        ds.len(),
        generated_path(Path::new(""), "<id>", direction).display(),
        a.out.display()
    );
    Ok(())
}

fn fuse(a: &FuseArgs) -> Result<()> {
    let cfg = base_config(&a.run, None)?;
    cfg.validate()?;
    write_resolved(&a.run.out, &cfg)?;
    let model = FusionModel::from_model_checkpoints(&load_ckpt(&a.a2b)?, &load_ckpt(&a.b2a)?, cfg.seed)?;
    let train = load_split(&a.run.data, Split::Train)?;
    let test = optional_test(&a.run.data)?;
    let outcome = train_fusion(model, &train, test.as_ref(), &cfg, Some(a.run.out.clone()))?;
    report_run(&a.run.out, &outcome.metrics);
    Ok(())
}

fn format_report(report: &EvalReport) -> String {
    let mut s = format!("mean_class_acc\t{:?}\n", report.mean_class_acc);
    for (k, acc) in report.per_class.iter().enumerate() {
        s.push_str(&format!("class_{k}\t{acc:?}\n"));
    }
    s
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ckpt = load_ckpt(&a.ckpt)?;
    let data = load_split(&a.data, a.split)?;
    let report = match ckpt.kind()? {
        CheckpointKind::Model => {
            let mut model: TRecgModel<f32> = model_from_checkpoint(&ckpt)?.0;
            evaluate(&mut model, &data, a.image_size, a.batch)?
        }
        CheckpointKind::Fusion => {
            let mut model = FusionModel::from_checkpoint(&ckpt)?;
            evaluate_fusion(&mut model, &data, a.image_size, a.batch)?
        }
    };
    let text = format_report(&report);
    print!("{text}");
    if let Some(out) = &a.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("eval.tsv"), &text)?;
    }
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let outcomes = gradsuite::run_suite(a.seeds)?;
    let mut failed = 0;
    for c in &outcomes {
        println!(
            "{:<28} max_rel_err {:.3e} (tol {:.0e}) checked {} skipped {} {}",
            c.name,
            c.max_rel_err,
            c.tolerance,
            c.checked,
            c.skipped,
            if c.passed() { "ok" } else { "FAIL" }
        );
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        bail!("{failed} gradient check(s) exceeded tolerance");
    }
    Ok(())
}

/// Pairs written by `translate` are readable through [`pnm`]; exposed for
/// callers that only want the generated images.
pub fn read_generated(out: &Path, id: &str, direction: Direction) -> Result<trecg_core::Tensor<f32>> {
    Ok(pnm::read(&generated_path(out, id, direction))?)
}
