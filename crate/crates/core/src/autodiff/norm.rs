use super::{accumulate, wants, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Number of train-mode batches folded in so far.
    pub tracked: u64,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            tracked: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BnMode<T> {
    /// Normalize by batch statistics and fold them into the running state
    /// with the given momentum.
    Train { momentum: T },
    /// Normalize by the running state.
    Eval,
}

pub(crate) enum Saved<T> {
    Nothing,
    Train { xhat: Vec<T>, inv_std: Vec<T> },
    Eval { mean: Vec<T>, inv_std: Vec<T> },
}

fn for_channel<T: Copy>(data: &[T], n: usize, c: usize, hw: usize, ch: usize) -> impl Iterator<Item = &[T]> {
    (0..n).map(move |i| &data[(i * c + ch) * hw..(i * c + ch + 1) * hw])
}

impl<T: Real> Tape<T> {
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<T>,
        stats: &mut RunningStats<T>,
        eps: T,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::InvalidShape {
                op: "batch_norm",
                msg: format!("running statistics have {} channels, input has {c}", stats.mean.len()),
            });
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];

        let (mean, inv_std) = match mode {
            BnMode::Train { momentum } => {
                if m < 2 {
                    return Err(Error::InvalidShape {
                        op: "batch_norm",
                        msg: format!("train mode needs at least 2 values per channel, got {m}"),
                    });
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv_m = T::of(1.0 / m as f64);
                for ch in 0..c {
                    let mu = for_channel(xv, n, c, hw, ch).flat_map(|s| s.iter().copied()).sum::<T>() * inv_m;
                    let v = for_channel(xv, n, c, hw, ch)
                        .flat_map(|s| s.iter().map(move |&v| (v - mu) * (v - mu)))
                        .sum::<T>()
                        * inv_m;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                let unbias = T::of(m as f64 / (m as f64 - 1.0));
                for ch in 0..c {
                    stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean[ch];
                    stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * var[ch] * unbias;
                }
                stats.tracked += 1;
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<_>>();
                (mean, inv_std)
            }
            BnMode::Eval => {
                if stats.tracked == 0 {
                    return Err(Error::MissingRunningStats(format!("{}", self.scope)));
                }
                let inv_std = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (stats.mean.clone(), inv_std)
            }
        };

        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                for j in base..base + hw {
                    out[j] = (xv[j] - mu) * is * g + b;
                }
            }
        }

        let saved = if !self.grad_enabled {
            Saved::Nothing
        } else {
            match mode {
                BnMode::Train { .. } => {
                    let mut xhat = vec![T::zero(); xv.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                xhat[j] = (xv[j] - mean[ch]) * inv_std[ch];
                            }
                        }
                    }
                    Saved::Train { xhat, inv_std }
                }
                BnMode::Eval => Saved::Eval { mean, inv_std },
            }
        };
        let out = Tensor::new([n, c, h, w], out)?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, saved }))
    }
}

pub(super) fn backward<T: Real>(nodes: &mut [Node<T>], g: &[T], x: Var, gamma: Var, beta: Var, saved: &Saved<T>) {
    let s = nodes[x.0].value.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let m = T::of((n * hw) as f64);
    let gv = nodes[gamma.0].value.data().to_vec();

    let xhat_owned;
    let (xhat, inv_std, train) = match saved {
        Saved::Nothing => return,
        Saved::Train { xhat, inv_std } => (xhat.as_slice(), inv_std, true),
        Saved::Eval { mean, inv_std } => {
            let xv = nodes[x.0].value.data();
            let mut xh = vec![T::zero(); xv.len()];
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    for j in base..base + hw {
                        xh[j] = (xv[j] - mean[ch]) * inv_std[ch];
                    }
                }
            }
            xhat_owned = xh;
            (xhat_owned.as_slice(), inv_std, false)
        }
    };

    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for ch in 0..c {
        for (gs, xs) in for_channel(g, n, c, hw, ch).zip(for_channel(xhat, n, c, hw, ch)) {
            for (&gj, &xj) in gs.iter().zip(xs) {
                sum_g[ch] = sum_g[ch] + gj;
                sum_gx[ch] = sum_gx[ch] + gj * xj;
            }
        }
    }

    if wants(nodes, x) {
        let mut dx = vec![T::zero(); g.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let k = gv[ch] * inv_std[ch];
                if train {
                    let (mg, mgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                    for j in base..base + hw {
                        dx[j] = k * (g[j] - mg - xhat[j] * mgx);
                    }
                } else {
                    for j in base..base + hw {
                        dx[j] = k * g[j];
                    }
                }
            }
        }
        accumulate(nodes, x, dx);
    }
    if wants(nodes, gamma) {
        accumulate(nodes, gamma, sum_gx);
    }
    if wants(nodes, beta) {
        accumulate(nodes, beta, sum_g);
    }
}
