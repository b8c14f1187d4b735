//! Encoder, decoder, classifier and content network building blocks.

use super::layers::{BatchNorm2d, Conv2d, Linear, Mode};
use super::params::{Init, ParamStore};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Per-stage layout of a four-stage residual encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: [usize; 4],
    pub strides: [usize; 4],
    pub blocks: usize,
}

impl Default for StageSpec {
    fn default() -> Self {
        StageSpec {
            channels: [16, 32, 64, 128],
            strides: [1, 2, 2, 2],
            blocks: 2,
        }
    }
}

impl StageSpec {
    /// The widths of ResNet-18's four stages.
    pub fn full_scale() -> Self {
        StageSpec {
            channels: [64, 128, 256, 512],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("stage channels must be positive".into()));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("stage channels must be non-decreasing: {:?}", self.channels)));
        }
        if self.strides.iter().any(|s| !matches!(s, 1 | 2)) {
            return Err(Error::Config(format!("stage strides must be 1 or 2: {:?}", self.strides)));
        }
        if self.blocks == 0 {
            return Err(Error::Config("each stage needs at least one block".into()));
        }
        Ok(())
    }

    /// Spatial extent of each stage output for a square input of side `size`.
    pub fn stage_sizes(&self, size: usize) -> [usize; 4] {
        let mut out = [0; 4];
        let mut s = size;
        for (o, &stride) in out.iter_mut().zip(&self.strides) {
            s = crate::autodiff::conv_out_dim(s, 3, stride, 1);
            *o = s;
        }
        out
    }
}

/// `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`, with a strided 1x1
/// projection on the shortcut when the shape changes.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub in_channels: usize,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        allow_projection: bool,
    ) -> Result<Self> {
        let needs_projection = in_ch != out_ch || stride != 1;
        if needs_projection && !allow_projection {
            return Err(Error::Config(format!(
                "{name}: {in_ch}->{out_ch} channels at stride {stride} needs a projection shortcut"
            )));
        }
        Ok(BasicBlock {
            in_channels: in_ch,
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, false),
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch),
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, false),
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch),
            projection: needs_projection.then(|| {
                (
                    Conv2d::new(store, init, &format!("{name}.proj"), in_ch, out_ch, 1, stride, false),
                    BatchNorm2d::new(store, &format!("{name}.proj_bn"), out_ch),
                )
            }),
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let channels = tape.shape(x).get(1).copied().unwrap_or(0);
        if channels != self.in_channels {
            return Err(Error::InvalidShape {
                op: "basic_block",
                msg: format!("expected {} input channels, got {channels}", self.in_channels),
            });
        }
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.bn1.forward(tape, store, h, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.bn2.forward(tape, store, h, mode)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(tape, store, x)?;
                bn.forward(tape, store, s, mode)?
            }
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        Ok(tape.relu(sum))
    }
}

/// Bilinear 2x upsampling followed by one basic residual block.
#[derive(Clone, Debug)]
pub struct ResidualUpsample {
    pub block: BasicBlock,
}

impl ResidualUpsample {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(ResidualUpsample {
            block: BasicBlock::new(store, init, &format!("{name}.block"), in_ch, out_ch, 1, true)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let up = tape.upsample2x(x)?;
        self.block.forward(tape, store, up, mode)
    }
}

/// Post-activation outputs of the four encoder stages.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub stages: [Var; 4],
}

impl EncoderOutput {
    pub fn embedding(&self) -> Var {
        self.stages[3]
    }
}

/// ResNet-style encoder: 3x3 stem without max-pooling, then four stages of
/// basic blocks. Spatial size shrinks only through strided convolutions.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub in_channels: usize,
    pub spec: StageSpec,
    pub stem_conv: Conv2d,
    pub stem_bn: BatchNorm2d,
    pub stages: Vec<Vec<BasicBlock>>,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_channels: usize, spec: &StageSpec) -> Result<Self> {
        spec.validate()?;
        let c0 = spec.channels[0];
        let stem_conv = Conv2d::new(store, init, &format!("{name}.stem.conv"), in_channels, c0, 3, 1, false);
        let stem_bn = BatchNorm2d::new(store, &format!("{name}.stem.bn"), c0);
        let mut stages = Vec::with_capacity(4);
        let mut prev = c0;
        for (s, (&ch, &stride)) in spec.channels.iter().zip(&spec.strides).enumerate() {
            let mut blocks = Vec::with_capacity(spec.blocks);
            for b in 0..spec.blocks {
                let (input, st) = if b == 0 { (prev, stride) } else { (ch, 1) };
                blocks.push(BasicBlock::new(store, init, &format!("{name}.stage{}.{b}", s + 1), input, ch, st, true)?);
            }
            prev = ch;
            stages.push(blocks);
        }
        Ok(Encoder {
            in_channels,
            spec: spec.clone(),
            stem_conv,
            stem_bn,
            stages,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<EncoderOutput> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::InvalidShape {
                op: "encoder",
                msg: format!("expected (N, {}, H, W) input, got {shape:?}", self.in_channels),
            });
        }
        let h = self.stem_conv.forward(tape, store, x)?;
        let h = self.stem_bn.forward(tape, store, h, mode)?;
        let mut h = tape.relu(h);
        let mut outs = [h; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            tape.push_scope(&format!("stage{}", i + 1));
            for block in stage {
                match block.forward(tape, store, h, mode) {
                    Ok(v) => h = v,
                    Err(e) => {
                        tape.pop_scope();
                        return Err(e);
                    }
                }
            }
            tape.pop_scope();
            outs[i] = h;
        }
        Ok(EncoderOutput { stages: outs })
    }
}

/// Noise-aware input conv, three residual upsample layers with additive
/// skips from encoder stages 3, 2, 1, and a tanh output conv.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub noise_dim: usize,
    pub out_channels: usize,
    pub input_conv: Conv2d,
    pub input_bn: BatchNorm2d,
    pub ups: [ResidualUpsample; 3],
    pub out_conv: Conv2d,
}

impl Decoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        spec: &StageSpec,
        noise_dim: usize,
        out_channels: usize,
    ) -> Result<Self> {
        let [c1, c2, c3, c4] = spec.channels;
        Ok(Decoder {
            noise_dim,
            out_channels,
            input_conv: Conv2d::new(store, init, &format!("{name}.input.conv"), c4 + noise_dim, c4, 3, 1, false),
            input_bn: BatchNorm2d::new(store, &format!("{name}.input.bn"), c4),
            ups: [
                ResidualUpsample::new(store, init, &format!("{name}.up1"), c4, c3)?,
                ResidualUpsample::new(store, init, &format!("{name}.up2"), c3, c2)?,
                ResidualUpsample::new(store, init, &format!("{name}.up3"), c2, c1)?,
            ],
            out_conv: Conv2d::new(store, init, &format!("{name}.out.conv"), c1, out_channels, 3, 1, true),
        })
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &mut ParamStore<T>,
        enc: &EncoderOutput,
        noise: Option<Var>,
        mode: Mode,
    ) -> Result<Var> {
        let embedding = enc.embedding();
        let input = match (self.noise_dim, noise) {
            (0, None) => embedding,
            (z, Some(noise)) if z > 0 => {
                let (n, _, h, w) = tape.value(embedding).dims4("decoder")?;
                if tape.shape(noise) != [n, z, h, w] {
                    return Err(Error::ShapeMismatch {
                        op: "decoder noise",
                        left: vec![n, z, h, w],
                        right: tape.shape(noise).to_vec(),
                    });
                }
                tape.concat_channels(embedding, noise)?
            }
            (z, given) => {
                return Err(Error::InvalidArgument(format!(
                    "decoder with noise_dim {z} called {} noise",
                    if given.is_some() { "with" } else { "without" }
                )))
            }
        };
        let h = self.input_conv.forward(tape, store, input)?;
        let h = self.input_bn.forward(tape, store, h, mode)?;
        let mut h = tape.relu(h);
        for (i, up) in self.ups.iter().enumerate() {
            h = up.forward(tape, store, h, mode)?;
            let stage = 2 - i;
            let skip = enc.stages[stage];
            if tape.shape(h) != tape.shape(skip) {
                return Err(Error::InvalidShape {
                    op: "decoder skip",
                    msg: format!(
                        "upsample layer {} output {:?} does not match encoder stage {} output {:?}",
                        i + 1,
                        tape.shape(h),
                        stage + 1,
                        tape.shape(skip)
                    ),
                });
            }
            h = tape.add(h, skip)?;
        }
        let out = self.out_conv.forward(tape, store, h)?;
        Ok(tape.tanh(out))
    }
}

/// Global average pooling and one linear layer.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub fc: Linear,
}

impl Classifier {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, features: usize, classes: usize) -> Self {
        Classifier {
            fc: Linear::new(store, init, &format!("{name}.fc"), features, classes),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, embedding: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(embedding)?;
        self.fc.forward(tape, store, pooled)
    }
}

/// Frozen encoder whose stage outputs define semantic similarity. Always
/// runs with running batch-norm statistics; gradients reach its input but
/// never its parameters.
#[derive(Clone, Debug)]
pub struct ContentNet {
    pub encoder: Encoder,
}

pub const CONTENT_CHANNELS: usize = 3;

impl ContentNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, spec: &StageSpec) -> Result<Self> {
        let encoder = Encoder::new(store, init, name, CONTENT_CHANNELS, spec)?;
        store.set_requires_grad(&format!("{name}."), false);
        Ok(ContentNet { encoder })
    }

    /// Replicates single-channel images to the content net's three channels.
    pub fn adapt<T: Real>(tape: &mut Tape<T>, img: Var) -> Result<Var> {
        match tape.shape(img).get(1) {
            Some(&CONTENT_CHANNELS) => Ok(img),
            Some(1) => {
                let two = tape.concat_channels(img, img)?;
                tape.concat_channels(two, img)
            }
            _ => Err(Error::InvalidShape {
                op: "content_net",
                msg: format!("cannot adapt {:?} to {CONTENT_CHANNELS} channels", tape.shape(img)),
            }),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, img: Var) -> Result<[Var; 4]> {
        let img = Self::adapt(tape, img)?;
        Ok(self.encoder.forward(tape, store, img, Mode::Eval)?.stages)
    }
}
