use super::params::{Init, ParamId, ParamStore, StatsId};
use crate::autodiff::{BnMode, Tape, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Whether batch norm uses batch statistics (and updates its running state)
/// or the running state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Batch statistics, replacing the running state outright.
    Calibrate,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(format!("{name}.weight"), init.kaiming(&[out_ch, in_ch, kernel, kernel], fan_in.max(1)));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([out_ch])));
        Conv2d {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.param(self.weight).value.shape()[0]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.leaf(tape, self.weight);
        let b = self.bias.map(|b| store.leaf(tape, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            stats: store.add_stats(name, channels),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &mut ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = store.leaf(tape, self.gamma);
        let beta = store.leaf(tape, self.beta);
        let bn_mode = match mode {
            Mode::Train => BnMode::Train {
                momentum: T::of(BN_MOMENTUM),
            },
            Mode::Calibrate => BnMode::Train { momentum: T::one() },
            Mode::Eval => BnMode::Eval,
        };
        tape.batch_norm(x, gamma, beta, bn_mode, store.stats_mut(self.stats), T::of(BN_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, in_f: usize, out_f: usize) -> Self {
        let bound = 1.0 / (in_f.max(1) as f64).sqrt();
        Linear {
            weight: store.add(format!("{name}.weight"), init.uniform(&[in_f, out_f], bound)),
            bias: store.add(format!("{name}.bias"), init.uniform(&[out_f], bound)),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.leaf(tape, self.weight);
        let b = store.leaf(tape, self.bias);
        tape.linear(x, w, b)
    }
}
