use super::{accumulate, wants, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Images per GEMM: enough for a wide product, few enough to stay
    /// cache-friendly.
    fn chunk(&self, n: usize) -> usize {
        const TARGET_COLS: usize = 1024;
        TARGET_COLS.div_ceil(self.cols().max(1)).clamp(1, n.max(1))
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kj - pad`
/// lies inside the image.
fn valid_cols(g: &Geometry, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj { ((g.w - 1 + g.pad - kj) / g.stride + 1).min(g.ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Appends one patch row, kernel offset `(ki, kj)` over input `plane`.
fn push_patch_row<T: Real>(plane: &[T], g: &Geometry, ki: usize, kj: usize, out: &mut Vec<T>) {
    let (lo, hi) = valid_cols(g, kj);
    let first = (lo * g.stride + kj).saturating_sub(g.pad);
    for oy in 0..g.oh {
        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
        if iy < 0 || iy >= g.h as isize || lo == hi {
            out.resize(out.len() + g.ow, T::zero());
            continue;
        }
        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
        out.resize(out.len() + lo, T::zero());
        if g.stride == 1 {
            out.extend_from_slice(&src[first..first + (hi - lo)]);
        } else {
            out.extend(src[first..].iter().step_by(g.stride).take(hi - lo).copied());
        }
        out.resize(out.len() + g.ow - hi, T::zero());
    }
}

/// Adjoint of [`im2col_batch`]: scatters patch gradients back into `dx`.
fn col2im<T: Real>(cols: &[T], g: &Geometry, row_stride: usize, offset: usize, dx: &mut [T]) {
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = valid_cols(g, kj);
                let src_row = &cols[row * row_stride + offset..row * row_stride + offset + g.cols()];
                row += 1;
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w + first..(iy as usize + 1) * g.w];
                    let src = &src_row[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[..src.len()].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    } else {
                        for (d, &v) in dst.iter_mut().step_by(g.stride).zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix of images `range`, `(C*K*K, len*OH*OW)`, side by side,
/// written into `cols` (previous contents discarded).
fn im2col_batch<T: Real>(x: &Tensor<T>, g: &Geometry, range: std::ops::Range<usize>, cols: &mut Vec<T>) {
    let plane = g.h * g.w;
    cols.clear();
    cols.reserve(g.rows() * range.len() * g.cols());
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                for i in range.clone() {
                    let img = x.batch_item(i);
                    push_patch_row(&img[c * plane..(c + 1) * plane], g, ki, kj, cols);
                }
            }
        }
    }
}

fn geometry(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Geometry> {
    let (&[_, c, h, wd], &[_, i, kh, kw]) = (x, w) else {
        return Err(Error::InvalidShape {
            op: "conv2d",
            msg: format!("expected NCHW input and OIHW weight, got {x:?} and {w:?}"),
        });
    };
    if c != i {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            left: x.to_vec(),
            right: w.to_vec(),
        });
    }
    if kh != kw {
        return Err(Error::InvalidShape {
            op: "conv2d",
            msg: format!("only square kernels are supported, got {kh}x{kw}"),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    if kh > h + 2 * pad || kw > wd + 2 * pad {
        return Err(Error::InvalidShape {
            op: "conv2d",
            msg: format!("{kh}x{kw} kernel exceeds padded input {}x{}", h + 2 * pad, wd + 2 * pad),
        });
    }
    Ok(Geometry {
        c,
        h,
        w: wd,
        k: kh,
        stride,
        pad,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (wd + 2 * pad - kw) / stride + 1,
    })
}

/// Output spatial extent of a convolution.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let g = geometry(self.shape(x), self.shape(w), stride, pad)?;
        let n = self.shape(x)[0];
        let o = self.shape(w)[0];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    left: self.shape(b).to_vec(),
                    right: vec![o],
                });
            }
        }
        let hw = g.cols();
        let bias = b.map(|b| self.value(b).data());
        let mut out = Vec::with_capacity(n * o * hw);
        let (mut cols, mut wide) = (Vec::new(), Vec::new());
        for start in (0..n).step_by(g.chunk(n)) {
            let range = start..(start + g.chunk(n)).min(n);
            let width = range.len() * hw;
            im2col_batch(self.value(x), &g, range.clone(), &mut cols);
            wide.resize(o * width, T::zero());
            T::gemm(o, g.rows(), width, T::one(), self.value(w).data(), (g.rows(), 1), &cols, (width, 1), T::zero(), &mut wide, (width, 1));
            for j in 0..range.len() {
                for oc in 0..o {
                    let src = &wide[oc * width + j * hw..oc * width + (j + 1) * hw];
                    match bias {
                        Some(bias) => out.extend(src.iter().map(|&v| v + bias[oc])),
                        None => out.extend_from_slice(src),
                    }
                }
            }
        }
        let out = Tensor::new([n, o, g.oh, g.ow], out)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }))
    }
}

pub(super) fn backward<T: Real>(
    nodes: &mut [Node<T>],
    grad: &[T],
    x: Var,
    w: Var,
    b: Option<Var>,
    stride: usize,
    pad: usize,
) {
    let g = geometry(nodes[x.0].value.shape(), nodes[w.0].value.shape(), stride, pad).expect("validated in forward");
    let n = nodes[x.0].value.shape()[0];
    let o = nodes[w.0].value.shape()[0];
    let hw = g.cols();
    let per_out = o * hw;
    let per_in = g.c * g.h * g.w;
    let (want_x, want_w) = (wants(nodes, x), wants(nodes, w));

    let mut dw = if want_w { vec![T::zero(); o * g.rows()] } else { Vec::new() };
    let mut dx = if want_x { vec![T::zero(); n * per_in] } else { Vec::new() };
    let wv = nodes[w.0].value.data();
    let (mut wide, mut cols, mut dcols) = (Vec::new(), Vec::new(), Vec::new());
    for start in (0..n).step_by(g.chunk(n)) {
        let range = start..(start + g.chunk(n)).min(n);
        let width = range.len() * hw;
        // (O, len*HW) view of the incoming gradient
        wide.clear();
        for oc in 0..o {
            for i in range.clone() {
                wide.extend_from_slice(&grad[i * per_out + oc * hw..i * per_out + (oc + 1) * hw]);
            }
        }
        if want_w {
            im2col_batch(&nodes[x.0].value, &g, range.clone(), &mut cols);
            T::gemm(o, width, g.rows(), T::one(), &wide, (width, 1), &cols, (1, width), T::one(), &mut dw, (g.rows(), 1));
        }
        if want_x {
            dcols.resize(g.rows() * width, T::zero());
            T::gemm(g.rows(), o, width, T::one(), wv, (1, g.rows()), &wide, (width, 1), T::zero(), &mut dcols, (width, 1));
            for (j, i) in range.enumerate() {
                col2im(&dcols, &g, width, j * hw, &mut dx[i * per_in..(i + 1) * per_in]);
            }
        }
    }
    if let Some(b) = b {
        if wants(nodes, b) {
            let mut db = vec![T::zero(); o];
            for plane_block in grad.chunks(per_out) {
                for (d, plane) in db.iter_mut().zip(plane_block.chunks(g.cols())) {
                    *d = *d + plane.iter().copied().sum();
                }
            }
            accumulate(nodes, b, db);
        }
    }
    if want_x {
        accumulate(nodes, x, dx);
    }
    if want_w {
        accumulate(nodes, w, dw);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct scalar cross-correlation, independent of the im2col path.
    fn reference(x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (n, c, h, wd) = x.dims4("ref").unwrap();
        let (o, _, k, _) = w.dims4("ref").unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias[oc];
                        for ic in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (y * stride + ki) as isize - pad as isize;
                                    let ix = (xo * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * k + ki) * k + kj];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        Tensor::new([n, o, oh, ow], out).unwrap()
    }

    #[test]
    fn all_ones_kernel_on_3x3() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64([1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap(), false);
        let w = tape.leaf(Tensor::ones([1, 1, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros([1]), false);
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[12., 16., 24., 28.]);
    }

    #[test]
    fn identity_kernel_returns_input() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 1 * 3 * 4).map(|v| v as f64 * 0.5 - 3.0).collect();
        let x = tape.leaf(Tensor::new([2, 1, 3, 4], data.clone()).unwrap(), false);
        let w = tape.leaf(Tensor::ones([1, 1, 1, 1]), false);
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn stride_two_samples_even_positions() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.leaf(Tensor::new([1, 1, 4, 4], data).unwrap(), false);
        let w = tape.leaf(Tensor::ones([1, 1, 1, 1]), false);
        let y = tape.conv2d(x, w, None, 2, 0).unwrap();
        // positions (0,0),(0,2),(2,0),(2,2)
        assert_eq!(tape.value(y).data(), &[0., 2., 8., 10.]);
    }

    #[test]
    fn matches_reference_with_padding_and_stride() {
        let xs: Vec<f64> = (0..2 * 3 * 5 * 6).map(|i| ((i * 37 % 17) as f64 - 8.0) / 5.0).collect();
        let ws: Vec<f64> = (0..4 * 3 * 3 * 3).map(|i| ((i * 11 % 13) as f64 - 6.0) / 7.0).collect();
        let bias = [0.1, -0.2, 0.3, 0.0];
        let xt = Tensor::new([2, 3, 5, 6], xs).unwrap();
        let wt = Tensor::new([4, 3, 3, 3], ws).unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone(), false);
            let w = tape.leaf(wt.clone(), false);
            let b = tape.leaf(Tensor::from_f64([4], &bias).unwrap(), false);
            let y = tape.conv2d(x, w, Some(b), stride, pad).unwrap();
            let r = reference(&xt, &wt, &bias, stride, pad);
            assert_eq!(tape.shape(y), r.shape());
            for (a, e) in tape.value(y).data().iter().zip(r.data()) {
                assert!((a - e).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]), false);
        let w = tape.leaf(Tensor::zeros([1, 1, 3, 3]), false);
        assert!(tape.conv2d(x, w, None, 1, 0).is_err());
        assert!(tape.conv2d(x, w, None, 1, 1).is_ok());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros([1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros([1, 3, 3, 3]), false);
        assert!(matches!(tape.conv2d(x, w, None, 1, 1), Err(Error::ShapeMismatch { .. })));
    }
}
