use super::{accumulate, Node, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Interpolation taps `(lo, hi, frac)` for each output index when resizing
/// `src` samples to `dst` with half-pixel centers, clamped at the borders.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Resizes every `h x w` plane of `data` to `oh x ow`.
pub fn resize_planes<T: Real>(data: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(data.len() / (h * w) * oh * ow);
    for plane in data.chunks(h * w) {
        for &(y0, y1, fy) in &ty {
            let fy = T::of(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::of(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    out
}

impl<T: Real> Tape<T> {
    /// Bilinear 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample2x")?;
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                op: "upsample2x",
                msg: "empty spatial extent".into(),
            });
        }
        let data = resize_planes(self.value(x).data(), h, w, 2 * h, 2 * w);
        let out = Tensor::new([n, c, 2 * h, 2 * w], data)?;
        Ok(self.push(out, Op::Upsample2x(x)))
    }
}

pub(super) fn backward<T: Real>(nodes: &mut [Node<T>], g: &[T], x: Var) {
    let s = nodes[x.0].value.shape();
    let (h, w) = (s[2], s[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); nodes[x.0].value.numel()];
    for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let gv = gplane[oy * ow + ox];
                let (top, bot) = (gv * (T::one() - fy), gv * fy);
                dplane[y0 * w + x0] = dplane[y0 * w + x0] + top * (T::one() - fx);
                dplane[y0 * w + x1] = dplane[y0 * w + x1] + top * fx;
                dplane[y1 * w + x0] = dplane[y1 * w + x0] + bot * (T::one() - fx);
                dplane[y1 * w + x1] = dplane[y1 * w + x1] + bot * fx;
            }
        }
    }
    accumulate(nodes, x, dx);
}
