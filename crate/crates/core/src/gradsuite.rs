//! Central-difference checks of every differentiable op, one residual block
//! and the full joint objective, all in 64-bit.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{compare_with_central_differences, gradcheck, BnMode, GradcheckReport, RunningStats, Tape, Var};
use crate::error::Result;
use crate::losses::{class_weights, content_loss, total_loss, weighted_cls_loss, ClassStats, LossWeights};
use crate::nn::{sample_noise, BasicBlock, Direction, Init, Mode, ModelConfig, ParamStore, StageSpec, TRecgModel};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-3;
/// Two stacked batch norms over a small batch curve enough that the
/// central-difference truncation error at `STEP` is near the tolerance.
pub const BLOCK_STEP: f64 = 1e-4;
/// Parameter coordinates sampled per seed for network-level checks.
const SAMPLED_COORDS: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub tolerance: f64,
    pub seeds: usize,
    /// Worst relative error over all seeds.
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }

    fn fold(name: &'static str, tolerance: f64, reports: &[GradcheckReport]) -> Self {
        CheckOutcome {
            name,
            tolerance,
            seeds: reports.len(),
            max_rel_err: reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
            checked: reports.iter().map(|r| r.checked).sum(),
            skipped: reports.iter().map(|r| r.skipped).sum(),
        }
    }
}

type Graph = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// `sum(out * r)` with positive, non-repeating `r`: every output coordinate
/// gets a distinct weight and no plane of weights sums to zero.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let r = (0..n).map(|i| 0.25 + (i as f64 * 0.618_033_988_75).fract()).collect();
    let r = tape.constant(Tensor::new(shape, r)?);
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn stats_for(tape: &Tape<f64>, x: Var) -> RunningStats<f64> {
    let c = tape.shape(x)[1];
    RunningStats {
        mean: (0..c).map(|i| 0.1 * i as f64 - 0.2).collect(),
        var: (0..c).map(|i| 0.5 + 0.3 * i as f64).collect(),
        tracked: 1,
    }
}

struct OpCase {
    name: &'static str,
    /// Input shapes and uniform bounds.
    inputs: Vec<(Vec<usize>, f64)>,
    graph: Graph,
}

fn case(name: &'static str, inputs: &[(&[usize], f64)], graph: Graph) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, b)| (s.to_vec(), *b)).collect(),
        graph,
    }
}

fn op_cases() -> Vec<OpCase> {
    let v = &[2, 3, 4, 4][..];
    vec![
        case("add", &[(v, 1.0), (v, 1.0)], |t, x| {
            let y = t.add(x[0], x[1])?;
            project(t, y)
        }),
        case("sub", &[(v, 1.0), (v, 1.0)], |t, x| {
            let y = t.sub(x[0], x[1])?;
            project(t, y)
        }),
        case("mul", &[(v, 1.0), (v, 1.0)], |t, x| {
            let y = t.mul(x[0], x[1])?;
            project(t, y)
        }),
        case("scale", &[(v, 1.0)], |t, x| {
            let y = t.scale(x[0], -2.5);
            project(t, y)
        }),
        case("neg", &[(v, 1.0)], |t, x| {
            let y = t.neg(x[0]);
            project(t, y)
        }),
        case("tanh", &[(v, 2.0)], |t, x| {
            let y = t.tanh(x[0]);
            project(t, y)
        }),
        case("relu", &[(v, 1.0)], |t, x| {
            let y = t.relu(x[0]);
            project(t, y)
        }),
        case("sum", &[(v, 1.0)], |t, x| {
            let y = t.sum(x[0]);
            Ok(t.scale(y, 1.5))
        }),
        case("conv2d_3x3_s1_bias", &[(&[2, 3, 5, 5], 1.0), (&[4, 3, 3, 3], 0.5), (&[4], 0.5)], |t, x| {
            let y = t.conv2d(x[0], x[1], Some(x[2]), 1, 1)?;
            project(t, y)
        }),
        case("conv2d_3x3_s2", &[(&[2, 2, 6, 6], 1.0), (&[3, 2, 3, 3], 0.5)], |t, x| {
            let y = t.conv2d(x[0], x[1], None, 2, 1)?;
            project(t, y)
        }),
        case("conv2d_1x1_s2", &[(&[2, 3, 5, 5], 1.0), (&[2, 3, 1, 1], 0.5)], |t, x| {
            let y = t.conv2d(x[0], x[1], None, 2, 0)?;
            project(t, y)
        }),
        case("batch_norm_train", &[(&[4, 3, 6, 6], 1.0), (&[3], 1.0), (&[3], 1.0)], |t, x| {
            let mut stats = RunningStats::new(3);
            let y = t.batch_norm(x[0], x[1], x[2], BnMode::Train { momentum: 0.1 }, &mut stats, 1e-5)?;
            project(t, y)
        }),
        case("batch_norm_eval", &[(v, 1.0), (&[3], 1.0), (&[3], 1.0)], |t, x| {
            let mut stats = stats_for(t, x[0]);
            let y = t.batch_norm(x[0], x[1], x[2], BnMode::Eval, &mut stats, 1e-5)?;
            project(t, y)
        }),
        case("upsample2x", &[(&[2, 2, 3, 4], 1.0)], |t, x| {
            let y = t.upsample2x(x[0])?;
            project(t, y)
        }),
        case("concat", &[(v, 1.0), (&[2, 2, 4, 4], 1.0)], |t, x| {
            let y = t.concat_channels(x[0], x[1])?;
            project(t, y)
        }),
        case("global_avg_pool", &[(v, 1.0)], |t, x| {
            let y = t.global_avg_pool(x[0])?;
            project(t, y)
        }),
        case("linear", &[(&[3, 5], 1.0), (&[5, 4], 1.0), (&[4], 1.0)], |t, x| {
            let y = t.linear(x[0], x[1], x[2])?;
            project(t, y)
        }),
        case("l1_distance", &[(v, 1.0), (v, 1.0)], |t, x| t.l1_distance(x[0], x[1])),
        case("softmax_cross_entropy", &[(&[4, 5], 2.0)], |t, x| {
            t.softmax_cross_entropy(x[0], &[0, 3, 4, 3], &[0.5, 1.0, 2.0, 0.25])
        }),
        case(
            "conv_bn_relu_linear_chain",
            &[(&[4, 2, 8, 8], 1.0), (&[4, 2, 3, 3], 0.5), (&[4], 1.0), (&[4], 1.0), (&[4, 3], 1.0), (&[3], 1.0)],
            |t, x| {
                let mut stats = RunningStats::new(4);
                let h = t.conv2d(x[0], x[1], None, 2, 1)?;
                let h = t.batch_norm(h, x[2], x[3], BnMode::Train { momentum: 0.1 }, &mut stats, 1e-5)?;
                let h = t.relu(h);
                let h = t.global_avg_pool(h)?;
                let z = t.linear(h, x[4], x[5])?;
                t.softmax_cross_entropy(z, &[0, 2, 1, 1], &[1.0, 1.0, 1.0, 1.0])
            },
        ),
    ]
}

fn case_seed(seed: u64, op: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(op as u64)
}

/// Every op checked at `seeds` random points each.
pub fn op_checks(seeds: u64) -> Result<Vec<CheckOutcome>> {
    op_cases()
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let reports = (0..seeds)
                .map(|s| {
                    let mut init = Init::new(case_seed(s, k));
                    let inputs: Vec<Tensor<f64>> = c.inputs.iter().map(|(shape, b)| init.uniform(shape, *b)).collect();
                    gradcheck(c.graph, &inputs, STEP)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CheckOutcome::fold(c.name, OP_TOLERANCE, &reports))
        })
        .collect()
}

/// Checks `loss` against a random subset of the trainable coordinates of
/// `store_of(owner)`.
fn check_params<M>(
    owner: &mut M,
    store_of: fn(&mut M) -> &mut ParamStore<f64>,
    mut loss: impl FnMut(&mut Tape<f64>, &mut M) -> Result<Var>,
    sample_seed: u64,
    step: f64,
) -> Result<GradcheckReport> {
    let mut tape = Tape::new();
    let out = loss(&mut tape, owner)?;
    let base_sig = tape.kink_signature();
    tape.backward(out)?;
    let store = store_of(owner);
    store.zero_grads();
    store.accumulate_grads(&tape);
    drop(tape);

    let coords: Vec<(usize, usize, f64)> = store
        .params()
        .enumerate()
        .filter(|(_, (_, p))| p.requires_grad)
        .flat_map(|(pi, (_, p))| {
            let g = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
            g.into_data().into_iter().enumerate().map(move |(j, a)| (pi, j, a))
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let picked: Vec<(usize, usize, f64)> = index::sample(&mut rng, coords.len(), SAMPLED_COORDS.min(coords.len()))
        .into_iter()
        .map(|i| coords[i])
        .collect();
    let analytic: Vec<f64> = picked.iter().map(|c| c.2).collect();
    let ids: Vec<_> = store.params().map(|(id, _)| id).collect();
    compare_with_central_differences(&analytic, &base_sig, step, |k, delta| {
        let (pi, j, _) = picked[k];
        let id = ids[pi];
        let orig = store_of(owner).param(id).value.data()[j];
        store_of(owner).param_mut(id).value.data_mut()[j] = orig + delta;
        let mut t = Tape::new();
        let result = loss(&mut t, owner);
        store_of(owner).param_mut(id).value.data_mut()[j] = orig;
        let out = result?;
        Ok((t.value(out).item(), t.kink_signature()))
    })
}

fn store_itself(s: &mut ParamStore<f64>) -> &mut ParamStore<f64> {
    s
}

fn model_store(m: &mut TRecgModel<f64>) -> &mut ParamStore<f64> {
    &mut m.store
}

/// A stride-2 projecting residual block in train mode.
pub fn block_check(seeds: u64) -> Result<CheckOutcome> {
    let reports = (0..seeds)
        .map(|s| {
            let mut store = ParamStore::new();
            let mut init = Init::new(case_seed(s, 101));
            let block = BasicBlock::new(&mut store, &mut init, "block", 2, 3, 2, true)?;
            let x: Tensor<f64> = init.uniform(&[4, 2, 8, 8], 1.0);
            check_params(
                &mut store,
                store_itself,
                |tape, store| {
                    let xv = tape.constant(x.clone());
                    let y = block.forward(tape, store, xv, Mode::Train)?;
                    project(tape, y)
                },
                s,
                BLOCK_STEP,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckOutcome::fold("basic_block", OP_TOLERANCE, &reports))
}

/// Layout of the toy network used for the end-to-end check.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        direction: Direction::AToB,
        stages: StageSpec {
            channels: [2, 2, 4, 4],
            strides: [1, 2, 2, 2],
            blocks: 1,
        },
        noise_dim: 2,
        n_classes: 3,
    }
}

/// `alpha * content + beta * weighted_cls` through encoder, decoder,
/// classifier and the frozen content net, differentiated with respect to
/// every trainable parameter.
pub fn end_to_end_check(seeds: u64) -> Result<CheckOutcome> {
    const SIZE: usize = 16;
    let weights = LossWeights::default();
    let reports = (0..seeds)
        .map(|s| {
            let seed = case_seed(s, 202);
            let mut model = TRecgModel::<f64>::new(tiny_model_config(), seed)?;
            let mut init = Init::new(seed);
            let x: Tensor<f64> = init.uniform(&[3, 3, SIZE, SIZE], 1.0);
            let target: Tensor<f64> = init.uniform(&[3, 1, SIZE, SIZE], 1.0);
            model.calibrate_content(&init.uniform(&[4, 1, SIZE, SIZE], 1.0))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise: Tensor<f64> = sample_noise(&mut rng, 3, 2, 2, 2);
            let labels = [0, 2, 1];
            let cw = class_weights(&ClassStats::new(vec![10, 50, 100])?, weights.delta);
            check_params(
                &mut model,
                model_store,
                |tape, m| {
                    let xv = tape.constant(x.clone());
                    let enc = m.encode(tape, xv, Mode::Train)?;
                    let z = tape.constant(noise.clone());
                    let generated = m.decode(tape, &enc, Some(z), Mode::Train)?;
                    let lc = content_loss(tape, m, generated, &target, &weights.content_layers)?;
                    let logits = m.classify(tape, enc.embedding())?;
                    let lcls = weighted_cls_loss(tape, logits, &labels, &cw)?;
                    total_loss(tape, lc, lcls, &weights)
                },
                s,
                STEP,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CheckOutcome::fold("joint_objective_end_to_end", END_TO_END_TOLERANCE, &reports))
}

/// Op checks, the block check and the end-to-end check.
pub fn run_suite(seeds: u64) -> Result<Vec<CheckOutcome>> {
    let mut all = op_checks(seeds)?;
    all.push(block_check(seeds)?);
    all.push(end_to_end_check(seeds)?);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_on_two_seeds() {
        for c in op_checks(2).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }

    #[test]
    fn block_and_end_to_end_pass_on_one_seed() {
        let b = block_check(1).unwrap();
        assert!(b.passed(), "{b:?}");
        let e = end_to_end_check(1).unwrap();
        assert!(e.passed(), "{e:?}");
        assert!(e.checked >= SAMPLED_COORDS / 2, "{e:?}");
    }

    #[test]
    fn projection_weights_vary() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::ones([2, 3]), true);
        let s = project(&mut t, x).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(x).unwrap();
        assert!(g.data().windows(2).any(|w| w[0] != w[1]));
    }
}
