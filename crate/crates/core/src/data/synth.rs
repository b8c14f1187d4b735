//! Procedural paired images: class-specific textures for modality A and a
//! blurred-luminance pseudo-depth with a class ramp for modality B.

use std::f64::consts::TAU;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ModalPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How samples are spread over classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Balance {
    /// Class counts differ by at most one.
    Balanced,
    /// Count of class `k` proportional to `ratio^k`.
    Geometric { ratio: f64 },
}

impl Balance {
    pub const IMBALANCED: Balance = Balance::Geometric { ratio: 0.5 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub size: usize,
    pub count: usize,
    pub balance: Balance,
    pub seed: u64,
}

/// Per-sample class labels in generation order.
pub fn class_schedule(count: usize, n_classes: usize, balance: Balance) -> Result<Vec<usize>> {
    if !(2..=16).contains(&n_classes) {
        return Err(Error::InvalidArgument(format!("n_classes must be in 2..=16, got {n_classes}")));
    }
    match balance {
        Balance::Balanced => Ok((0..count).map(|i| i % n_classes).collect()),
        Balance::Geometric { ratio } => {
            if !(ratio > 0.0 && ratio <= 1.0) {
                return Err(Error::InvalidArgument(format!("geometric ratio must be in (0, 1], got {ratio}")));
            }
            if count < n_classes {
                return Err(Error::InvalidArgument(format!("{count} samples cannot cover {n_classes} classes")));
            }
            // One guaranteed sample per class, the rest by largest remainder.
            let weights: Vec<f64> = (0..n_classes).map(|k| ratio.powi(k as i32)).collect();
            let total: f64 = weights.iter().sum();
            let spare = (count - n_classes) as f64;
            let exact: Vec<f64> = weights.iter().map(|w| spare * w / total).collect();
            let mut counts: Vec<usize> = exact.iter().map(|e| 1 + e.floor() as usize).collect();
            let mut order: Vec<usize> = (0..n_classes).collect();
            order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
            let missing = count - counts.iter().sum::<usize>();
            for &k in order.iter().take(missing) {
                counts[k] += 1;
            }
            // Interleave so any prefix is roughly representative.
            let mut left = counts.clone();
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                for (k, l) in left.iter_mut().enumerate() {
                    if *l > 0 {
                        out.push(k);
                        *l -= 1;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// The pair at `index` with class `index mod n_classes`.
pub fn gen_synthetic_pair(seed: u64, index: u64, n_classes: usize, size: usize) -> Result<ModalPair> {
    if !(2..=16).contains(&n_classes) {
        return Err(Error::InvalidArgument(format!("n_classes must be in 2..=16, got {n_classes}")));
    }
    gen_synthetic_pair_of_class(seed, index, (index % n_classes as u64) as usize, n_classes, size)
}

/// Deterministic in `(seed, index, class)`.
pub fn gen_synthetic_pair_of_class(seed: u64, index: u64, class: usize, n_classes: usize, size: usize) -> Result<ModalPair> {
    if !matches!(size, 32 | 64 | 128) {
        return Err(Error::InvalidArgument(format!("size must be 32, 64 or 128, got {size}")));
    }
    if class >= n_classes {
        return Err(Error::LabelOutOfRange {
            label: class,
            classes: n_classes,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let texture = Texture::sample(class, &mut rng);
    let n = size * size;
    let mut a = vec![0f32; 3 * n];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let t = texture.intensity(u, v);
            for c in 0..3 {
                let jitter = rng.random_range(-0.04..=0.04);
                let val = texture.dark[c] * (1.0 - t) + texture.light[c] * t + jitter;
                a[c * n + y * size + x] = val.clamp(-1.0, 1.0) as f32;
            }
        }
    }

    let lum: Vec<f64> = (0..n)
        .map(|i| 0.299 * a[i] as f64 + 0.587 * a[n + i] as f64 + 0.114 * a[2 * n + i] as f64)
        .collect();
    let blur = box3(&lum, size);
    let angle = TAU * class as f64 / n_classes as f64;
    let (ca, sa) = (angle.cos(), angle.sin());
    let b: Vec<f32> = (0..n)
        .map(|i| {
            let (u, v) = (((i % size) as f64 + 0.5) / size as f64, ((i / size) as f64 + 0.5) / size as f64);
            // ramp in [-1, 1] along the class direction
            let ramp = ((u - 0.5) * ca + (v - 0.5) * sa) * std::f64::consts::SQRT_2;
            (0.7 * blur[i] + 0.3 * ramp).clamp(-1.0, 1.0) as f32
        })
        .collect();

    ModalPair::new(
        format!("s{seed}_{index:06}"),
        Tensor::new([3, size, size], a)?,
        Tensor::new([1, size, size], b)?,
        Some(class),
    )
}

/// A labeled split of `spec.count` pairs, indices offset by `first_index`
/// so train and test splits of the same seed never share a sample.
pub fn gen_synthetic_dataset(spec: &SyntheticSpec, first_index: u64) -> Result<Dataset> {
    let classes = class_schedule(spec.count, spec.n_classes, spec.balance)?;
    let pairs = classes
        .iter()
        .enumerate()
        .map(|(i, &k)| gen_synthetic_pair_of_class(spec.seed, first_index + i as u64, k, spec.n_classes, spec.size))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(spec.n_classes, pairs)
}

/// 3x3 mean filter with edge clamping.
fn box3(src: &[f64], size: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let c = |v: isize| v.clamp(0, size as isize - 1) as usize;
        src[c(y) * size + c(x)]
    };
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as isize, (i % size) as isize);
            let mut s = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    s += at(y + dy, x + dx);
                }
            }
            s / 9.0
        })
        .collect()
}

enum Family {
    Checkerboard,
    Stripes,
    RadialBlobs,
    LinearGradient,
}

struct Texture {
    family: Family,
    freq: f64,
    phase: (f64, f64),
    angle: f64,
    blobs: Vec<(f64, f64, f64)>,
    dark: [f64; 3],
    light: [f64; 3],
}

impl Texture {
    fn sample(class: usize, rng: &mut ChaCha8Rng) -> Self {
        let family = match class % 4 {
            0 => Family::Checkerboard,
            1 => Family::Stripes,
            2 => Family::RadialBlobs,
            _ => Family::LinearGradient,
        };
        // Classes sharing a family differ in base frequency and hue.
        let tier = (class / 4) as f64;
        let freq = (2.0 + 1.5 * tier) * rng.random_range(0.8..1.25);
        let phase = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let angle = rng.random_range(-0.35..0.35) + tier * 0.4;
        let blobs = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.15..0.85),
                    rng.random_range(0.08..0.2),
                )
            })
            .collect();
        let hue = TAU * (class as f64 * 0.61803398875).fract();
        let mut dark = [0.0; 3];
        let mut light = [0.0; 3];
        for c in 0..3 {
            let base = (hue + TAU * c as f64 / 3.0).cos();
            dark[c] = -0.6 + 0.25 * base + rng.random_range(-0.1..0.1);
            light[c] = 0.6 + 0.25 * base + rng.random_range(-0.1..0.1);
        }
        Texture {
            family,
            freq,
            phase,
            angle,
            blobs,
            dark,
            light,
        }
    }

    /// Blend factor in [0, 1] at normalized coordinates.
    fn intensity(&self, u: f64, v: f64) -> f64 {
        match self.family {
            Family::Checkerboard => {
                let i = (u * self.freq * 2.0 + self.phase.0).floor() as i64;
                let j = (v * self.freq * 2.0 + self.phase.1).floor() as i64;
                ((i + j).rem_euclid(2)) as f64
            }
            Family::Stripes => {
                let s = u * self.angle.cos() + v * self.angle.sin();
                0.5 + 0.5 * (TAU * (s * self.freq * 2.0 + self.phase.0)).sin()
            }
            Family::RadialBlobs => self
                .blobs
                .iter()
                .map(|&(cx, cy, r)| (-((u - cx).powi(2) + (v - cy).powi(2)) / (r * r)).exp())
                .fold(0.0, f64::max),
            Family::LinearGradient => {
                let d = self.angle + self.phase.0 * TAU;
                (0.5 + (u - 0.5) * d.cos() + (v - 0.5) * d.sin()).clamp(0.0, 1.0)
            }
        }
    }
}
