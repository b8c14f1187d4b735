use super::{accumulate, wants, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

impl<T: Real> Tape<T> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.map(a, |x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| -x);
        self.push(out, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Concatenates along dimension 1 (channels for NCHW, features for
    /// `(N, F)`), `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        let n = sa[0];
        let (da, db) = (sa[1..].iter().product::<usize>(), sb[1..].iter().product::<usize>());
        let mut data = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * da..(i + 1) * da]);
            data.extend_from_slice(&self.value(b).data()[i * db..(i + 1) * db]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Mean over spatial positions: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::InvalidShape {
                op: "global_avg_pool",
                msg: "empty spatial extent".into(),
            });
        }
        let inv = T::of(1.0 / hw as f64);
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new([n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x)))
    }

    /// `x @ w + b` for `x: (N, F)`, `w: (F, G)`, `b: (G)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (n, f, g) = match (xs, ws) {
            ([n, f], [f2, g]) if f == f2 && bs == [*g] => (*n, *f, *g),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    left: xs.to_vec(),
                    right: ws.to_vec(),
                })
            }
        };
        let mut out = Vec::with_capacity(n * g);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            f,
            g,
            T::one(),
            self.value(x).data(),
            (f, 1),
            self.value(w).data(),
            (g, 1),
            T::one(),
            &mut out,
            (g, 1),
        );
        let out = Tensor::new([n, g], out)?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Mean absolute difference. The subgradient at ties is zero.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_distance", a, b)?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let n = x.len().max(1);
        let total: T = x.iter().zip(y).map(|(&p, &q)| (p - q).abs()).sum();
        let out = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(out, Op::L1(a, b)))
    }

    /// `(1/N) * sum_i -w_i * log softmax(logits_i)[y_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[T]) -> Result<Var> {
        let [n, k] = *self.shape(logits) else {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                msg: format!("logits must be (N, K), got {:?}", self.shape(logits)),
            });
        };
        if labels.len() != n || weights.len() != n {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                msg: format!("{n} rows but {} labels and {} weights", labels.len(), weights.len()),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        if weights.iter().any(|w| !(*w >= T::zero())) {
            return Err(Error::InvalidArgument("sample weights must be >= 0".into()));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * k);
        let mut total = T::zero();
        for (i, row) in z.chunks(k).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_norm = max + sum_exp.ln();
            probs.extend(row.iter().map(|&v| (v - log_norm).exp()));
            total = total - weights[i] * (row[labels[i]] - log_norm);
        }
        let out = Tensor::scalar(total / T::of(n as f64));
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }
}

pub(super) fn concat_backward<T: Real>(nodes: &mut [Node<T>], g: &[T], a: Var, b: Var) {
    let sa = nodes[a.0].value.shape();
    let sb = nodes[b.0].value.shape();
    let n = sa[0];
    let da = sa[1..].iter().product::<usize>();
    let db = sb[1..].iter().product::<usize>();
    if wants(nodes, a) {
        let d = (0..n).flat_map(|i| g[i * (da + db)..i * (da + db) + da].iter().copied()).collect();
        accumulate(nodes, a, d);
    }
    if wants(nodes, b) {
        let d = (0..n)
            .flat_map(|i| g[i * (da + db) + da..(i + 1) * (da + db)].iter().copied())
            .collect();
        accumulate(nodes, b, d);
    }
}

pub(super) fn gap_backward<T: Real>(nodes: &mut [Node<T>], g: &[T], x: Var) {
    let s = nodes[x.0].value.shape();
    let hw = s[2] * s[3];
    let inv = T::of(1.0 / hw as f64);
    let d = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, hw)).collect();
    accumulate(nodes, x, d);
}

pub(super) fn linear_backward<T: Real>(nodes: &mut [Node<T>], g: &[T], x: Var, w: Var, b: Var) {
    let (n, f) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
    let gdim = nodes[w.0].value.shape()[1];
    if wants(nodes, x) {
        // dx = g @ w^T
        let mut d = vec![T::zero(); n * f];
        T::gemm(n, gdim, f, T::one(), g, (gdim, 1), nodes[w.0].value.data(), (1, gdim), T::zero(), &mut d, (f, 1));
        accumulate(nodes, x, d);
    }
    if wants(nodes, w) {
        // dw = x^T @ g
        let mut d = vec![T::zero(); f * gdim];
        T::gemm(f, n, gdim, T::one(), nodes[x.0].value.data(), (1, f), g, (gdim, 1), T::zero(), &mut d, (gdim, 1));
        accumulate(nodes, w, d);
    }
    if wants(nodes, b) {
        let mut d = vec![T::zero(); gdim];
        for row in g.chunks(gdim) {
            d.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
        }
        accumulate(nodes, b, d);
    }
}

pub(super) fn l1_backward<T: Real>(nodes: &mut [Node<T>], g: T, a: Var, b: Var) {
    let n = nodes[a.0].value.numel().max(1);
    let scale = g / T::of(n as f64);
    let sign: Vec<T> = nodes[a.0]
        .value
        .data()
        .iter()
        .zip(nodes[b.0].value.data())
        .map(|(&x, &y)| {
            if x > y {
                scale
            } else if x < y {
                -scale
            } else {
                T::zero()
            }
        })
        .collect();
    if wants(nodes, b) {
        accumulate(nodes, b, sign.iter().map(|&s| -s).collect());
    }
    accumulate(nodes, a, sign);
}

pub(super) fn softmax_ce_backward<T: Real>(
    nodes: &mut [Node<T>],
    g: T,
    logits: Var,
    labels: &[usize],
    weights: &[T],
    probs: &[T],
) {
    let n = labels.len();
    let k = probs.len() / n.max(1);
    let scale = g / T::of(n as f64);
    let mut d = probs.to_vec();
    for (i, row) in d.chunks_mut(k).enumerate() {
        row[labels[i]] = row[labels[i]] - T::one();
        let s = scale * weights[i];
        row.iter_mut().for_each(|v| *v = *v * s);
    }
    accumulate(nodes, logits, d);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), false);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn additive_inverse_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.5, -2.0, 3.0, 0.25]), false);
        let nx = tape.neg(x);
        let y = tape.add(x, nx).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn binary_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros([2, 3]), false);
        let b = tape.leaf(Tensor::zeros([3, 2]), false);
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn concat_stacks_channels_and_splits_grads() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::ones([2, 128, 8, 8]), true);
        let b = tape.leaf(Tensor::zeros([2, 128, 8, 8]), true);
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 256, 8, 8]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(tape.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_with_empty_channels_is_identity() {
        let mut tape = Tape::<f32>::new();
        let data: Vec<f32> = (0..2 * 3 * 2 * 2).map(|v| v as f32).collect();
        let a = tape.leaf(Tensor::new([2, 3, 2, 2], data.clone()).unwrap(), false);
        let e = tape.leaf(Tensor::zeros([2, 0, 2, 2]), false);
        let c = tape.concat_channels(a, e).unwrap();
        assert_eq!(tape.value(c).data(), &data[..]);
        let c = tape.concat_channels(e, a).unwrap();
        assert_eq!(tape.value(c).data(), &data[..]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros([1, 2, 4, 4]), false);
        let b = tape.leaf(Tensor::zeros([1, 2, 4, 5]), false);
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn gap_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 4, 4], 5.0), true);
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0]);
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 1.0 / 16.0));

        let y = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let p = tape.global_avg_pool(y).unwrap();
        assert_eq!(tape.value(p).item(), 2.5);
    }

    #[test]
    fn linear_hand_matmul() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(t(&[2], &[3.0, 4.0]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 6.0]);

        let bad = tape.leaf(t(&[3, 2], &[0.0; 6]), false);
        assert!(tape.linear(x, bad, b).is_err());
    }

    #[test]
    fn l1_hand_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(t(&[2], &[2.0, 4.0]), false);
        let ab = tape.l1_distance(a, b).unwrap();
        let ba = tape.l1_distance(b, a).unwrap();
        let aa = tape.l1_distance(a, a).unwrap();
        assert_eq!(tape.value(ab).item(), 1.5);
        assert_eq!(tape.value(ba).item(), 1.5);
        assert_eq!(tape.value(aa).item(), 0.0);
    }

    #[test]
    fn l1_tie_subgradient_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let b = tape.leaf(t(&[3], &[1.0, 0.0, 4.0]), false);
        let l = tape.l1_distance(a, b).unwrap();
        tape.backward(l).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, third, -third]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let z = tape.leaf(t(&[1, 2], &[0.0, 0.0]), false);
        let l = tape.softmax_cross_entropy(z, &[0], &[1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let l = tape.softmax_cross_entropy(z, &[0], &[2.0]).unwrap();
        assert!((tape.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let big = tape.leaf(t(&[1, 2], &[1000.0, 0.0]), true);
        let l = tape.softmax_cross_entropy(big, &[0], &[1.0]).unwrap();
        assert!(tape.value(l).item().abs() < 1e-12);
        tape.backward(l).unwrap();
        assert!(tape.grad(big).unwrap().is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Tensor::zeros([1, 3]), false);
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[3], &[1.0]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn unused_input_gets_zero_grad_and_reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -1.0]), true);
        let c = tape.leaf(t(&[2], &[3.0, 4.0]), false);
        let loss = tape.sum(c);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, -1.0]), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }
}
