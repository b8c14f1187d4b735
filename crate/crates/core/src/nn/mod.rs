//! Network building blocks over the autodiff tape.

pub mod blocks;
pub mod layers;
pub mod model;
pub mod params;

pub use blocks::{BasicBlock, Classifier, ContentNet, Decoder, Encoder, EncoderOutput, ResidualUpsample, StageSpec};
pub use layers::{BatchNorm2d, Conv2d, Linear, Mode};
pub use model::{sample_noise, Direction, ModelConfig, TRecgModel};
pub use params::{Init, Param, ParamId, ParamStore, StatsId};
