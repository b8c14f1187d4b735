use std::collections::HashMap;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Present iff `requires_grad` and a backward pass has reached it.
    pub grad: Option<Tensor<T>>,
    pub requires_grad: bool,
}

/// Names and storage for every trainable tensor and batch-norm buffer of a
/// network. Registration order is the canonical serialization order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    stats: Vec<(String, RunningStats<T>)>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        self.stats.push((name.into(), RunningStats::new(channels)));
        StatsId(self.stats.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters whose names start with `prefix`, in registration order.
    pub fn values_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats<T> {
        &self.stats[id.0].1
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats<T> {
        &mut self.stats[id.0].1
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Records a parameter on `tape` as a leaf tracking gradients iff the
    /// parameter does.
    pub fn leaf(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.tagged_leaf(p.value.clone(), p.requires_grad, id.0)
    }

    /// Adds gradients recorded on `tape` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (tag, g) in tape.tagged_grads() {
            let Some(p) = self.params.get_mut(tag) else {
                continue;
            };
            if !p.requires_grad {
                continue;
            }
            match &mut p.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
                None => p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).expect("grad shape")),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Sets `requires_grad` on every parameter whose name starts with `prefix`.
    pub fn set_requires_grad(&mut self, prefix: &str, requires_grad: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.requires_grad = requires_grad;
            if !requires_grad {
                p.grad = None;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.requires_grad).map(|p| p.value.numel()).sum()
    }

    /// Every stored tensor in canonical order: parameters, then for each
    /// batch-norm layer its running mean, running variance and update count.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::new([c], s.mean.clone()).expect("stats")));
            out.push((format!("{name}.running_var"), Tensor::new([c], s.var.clone()).expect("stats")));
            out.push((format!("{name}.tracked"), Tensor::scalar(T::of(s.tracked as f64))));
        }
        out
    }

    /// Overwrites tensors by name. With `prefix_map = Some((from, to))`, a
    /// stored tensor `to...` is read from `tensors[from...]`. Every tensor of
    /// the store under the target prefix must be present with a matching
    /// shape.
    pub fn load_named(&mut self, tensors: &HashMap<String, Tensor<T>>, target_prefix: &str, source_prefix: &str) -> Result<usize> {
        let lookup = |name: &str| -> Result<&Tensor<T>> {
            let key = format!("{source_prefix}{}", &name[target_prefix.len()..]);
            tensors.get(&key).ok_or(Error::MissingTensor(key))
        };
        let check = |name: &str, expected: &[usize], found: &Tensor<T>| -> Result<()> {
            if expected != found.shape() {
                return Err(Error::TensorShape {
                    name: name.to_owned(),
                    expected: expected.to_vec(),
                    found: found.shape().to_vec(),
                });
            }
            Ok(())
        };
        let mut loaded = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(target_prefix)) {
            let t = lookup(&p.name)?;
            check(&p.name, p.value.shape(), t)?;
            p.value = t.clone();
            p.grad = None;
            loaded += 1;
        }
        for (name, s) in self.stats.iter_mut().filter(|(n, _)| n.starts_with(target_prefix)) {
            let c = s.mean.len();
            let mean = lookup(&format!("{name}.running_mean"))?;
            check(&format!("{name}.running_mean"), &[c], mean)?;
            let var = lookup(&format!("{name}.running_var"))?;
            check(&format!("{name}.running_var"), &[c], var)?;
            let tracked = lookup(&format!("{name}.tracked"))?;
            check(&format!("{name}.tracked"), &[1], tracked)?;
            s.mean = mean.data().to_vec();
            s.var = var.data().to_vec();
            s.tracked = tracked.item().f64() as u64;
            loaded += 3;
        }
        Ok(loaded)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    requires_grad: p.requires_grad,
                })
                .collect(),
            stats: self
                .stats
                .iter()
                .map(|(n, s)| {
                    let conv = |v: &[T]| v.iter().map(|x| U::of(x.f64())).collect();
                    (
                        n.clone(),
                        RunningStats {
                            mean: conv(&s.mean),
                            var: conv(&s.var),
                            tracked: s.tracked,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Seeded parameter initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-normal initialization with the given fan-in.
    pub fn kaiming<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform<T: Real>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(self.rng.random_range(-bound..=bound)))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }
}
