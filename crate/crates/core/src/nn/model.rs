use std::fmt;
use std::str::FromStr;

use super::blocks::{Classifier, ContentNet, Decoder, Encoder, EncoderOutput, StageSpec};
use super::layers::Mode;
use super::params::{Init, ParamStore};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// One standard-normal value per (sample, noise channel), repeated over the
/// `h x w` grid.
pub fn sample_noise<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize, z: usize, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(n * z * h * w);
    for _ in 0..n * z {
        let v: f64 = StandardNormal.sample(rng);
        data.extend(std::iter::repeat_n(T::of(v), h * w));
    }
    Tensor::new([n, z, h, w], data).expect("noise shape")
}

/// Which modality is recognized (and encoded); the other one is generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// RGB in, pseudo-depth out.
    AToB,
    /// Pseudo-depth in, RGB out.
    BToA,
}

impl Direction {
    pub fn input_channels(self) -> usize {
        match self {
            Direction::AToB => 3,
            Direction::BToA => 1,
        }
    }

    pub fn output_channels(self) -> usize {
        match self {
            Direction::AToB => 1,
            Direction::BToA => 3,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::AToB => Direction::BToA,
            Direction::BToA => Direction::AToB,
        }
    }

    /// Noise width used when none is configured explicitly.
    pub fn default_noise_dim(self) -> usize {
        match self {
            Direction::AToB => 0,
            Direction::BToA => 128,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AToB => "a2b",
            Direction::BToA => "b2a",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a2b" => Ok(Direction::AToB),
            "b2a" => Ok(Direction::BToA),
            other => Err(Error::Config(format!("unknown direction `{other}` (expected a2b or b2a)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub direction: Direction,
    pub stages: StageSpec,
    pub noise_dim: usize,
    pub n_classes: usize,
}

impl ModelConfig {
    pub fn new(direction: Direction, n_classes: usize) -> Self {
        ModelConfig {
            direction,
            stages: StageSpec::default(),
            noise_dim: direction.default_noise_dim(),
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        if self.stages.strides != [1, 2, 2, 2] {
            return Err(Error::Config(format!(
                "the decoder mirrors strides [1, 2, 2, 2]; got {:?}",
                self.stages.strides
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

/// Encoder, decoder, classifier and frozen content net sharing one store.
///
/// Parameter names are prefixed `encoder.`, `decoder.`, `classifier.` and
/// `content.`.
#[derive(Clone, Debug)]
pub struct TRecgModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub classifier: Classifier,
    pub content: ContentNet,
}

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";
pub const CLASSIFIER: &str = "classifier";
pub const CONTENT: &str = "content";

impl<T: Real> TRecgModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let spec = &config.stages;
        let encoder = Encoder::new(&mut store, &mut init, ENCODER, config.direction.input_channels(), spec)?;
        let decoder = Decoder::new(&mut store, &mut init, DECODER, spec, config.noise_dim, config.direction.output_channels())?;
        let classifier = Classifier::new(&mut store, &mut init, CLASSIFIER, spec.channels[3], config.n_classes);
        // An independent stream so the content net does not depend on the
        // sizes of the trainable parts.
        let mut content_init = Init::new(seed ^ 0x5eed_c0de_0000_0001);
        let content = ContentNet::new(&mut store, &mut content_init, CONTENT, spec)?;
        Ok(TRecgModel {
            config,
            store,
            encoder,
            decoder,
            classifier,
            content,
        })
    }

    pub fn encode(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<EncoderOutput> {
        tape.scoped(ENCODER, |t| self.encoder.forward(t, &mut self.store, x, mode))
    }

    pub fn decode(&mut self, tape: &mut Tape<T>, enc: &EncoderOutput, noise: Option<Var>, mode: Mode) -> Result<Var> {
        tape.scoped(DECODER, |t| self.decoder.forward(t, &mut self.store, enc, noise, mode))
    }

    pub fn classify(&mut self, tape: &mut Tape<T>, embedding: Var) -> Result<Var> {
        tape.scoped(CLASSIFIER, |t| self.classifier.forward(t, &self.store, embedding))
    }

    pub fn content_features(&mut self, tape: &mut Tape<T>, img: Var) -> Result<[Var; 4]> {
        tape.scoped(CONTENT, |t| self.content.forward(t, &mut self.store, img))
    }

    /// Content-net features of a ground-truth image, computed off-tape.
    pub fn target_features(&mut self, target: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
        let mut tape = Tape::inference();
        let img = tape.constant(target.clone());
        let feats = self.content_features(&mut tape, img)?;
        Ok(feats.map(|v| tape.value(v).clone()))
    }

    /// Recognition branch only: encoder then classifier.
    pub fn logits(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let enc = self.encode(tape, x, mode)?;
        self.classify(tape, enc.embedding())
    }

    /// Noise for the decoder input matching `enc`, or `None` without noise.
    pub fn decoder_noise<R: Rng + ?Sized>(&self, tape: &mut Tape<T>, enc: &EncoderOutput, rng: &mut R) -> Result<Option<Var>> {
        if self.config.noise_dim == 0 {
            return Ok(None);
        }
        let (n, _, h, w) = tape.value(enc.embedding()).dims4("decoder noise")?;
        Ok(Some(tape.constant(sample_noise(rng, n, self.config.noise_dim, h, w))))
    }

    /// Eval-mode translation of a batch of input-modality images.
    pub fn translate<R: Rng + ?Sized>(&mut self, images: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let enc = self.encode(&mut tape, x, Mode::Eval)?;
        let noise = self.decoder_noise(&mut tape, &enc, rng)?;
        let y = self.decode(&mut tape, &enc, noise, Mode::Eval)?;
        Ok(tape.value(y).clone())
    }

    /// Sets the content net's batch-norm statistics to those of `images`.
    pub fn calibrate_content(&mut self, images: &Tensor<T>) -> Result<()> {
        let mut tape = Tape::inference();
        let img = tape.constant(images.clone());
        let img = ContentNet::adapt(&mut tape, img)?;
        tape.scoped(CONTENT, |t| {
            self.content
                .encoder
                .forward(t, &mut self.store, img, Mode::Calibrate)
                .map(|_| ())
        })
    }

    /// Copies the encoder stored in `tensors` (a checkpoint of a model with
    /// three-channel input) into the content net.
    pub fn load_content_from_encoder(&mut self, tensors: &std::collections::HashMap<String, Tensor<T>>) -> Result<()> {
        self.store.load_named(tensors, "content.", "encoder.")?;
        Ok(())
    }
}
