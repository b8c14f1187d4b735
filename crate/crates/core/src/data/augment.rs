//! Train-time resize and random crop, eval-time center crop, and in-batch
//! replacement with translated images.

use rand::seq::index;
use rand::{Rng, RngExt};

use super::{Batch, ModalPair};
use crate::autodiff::resize_planes;
use crate::error::{Error, Result};
use crate::nn::{Direction, TRecgModel};
use crate::tensor::Tensor;

/// `7 * size / 8`, rounded to the nearest even number.
pub fn crop_size(size: usize) -> usize {
    ((7.0 * size as f64 / 16.0).round() as usize * 2).max(2)
}

fn resize(img: &Tensor<f32>, size: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (size, size) {
        return img.clone();
    }
    Tensor::new([c, size, size], resize_planes(img.data(), h, w, size, size)).expect("resize shape")
}

fn crop(img: &Tensor<f32>, top: usize, left: usize, side: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, w) = (s[0], s[2]);
    let plane = s[1] * w;
    let mut out = Vec::with_capacity(c * side * side);
    for ch in 0..c {
        for y in top..top + side {
            let row = ch * plane + y * w;
            out.extend_from_slice(&img.data()[row + left..row + left + side]);
        }
    }
    Tensor::new([c, side, side], out).expect("crop shape")
}

/// Resize to `size x size`, then crop a random `crop_size(size)` window,
/// the same window for both modalities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainAugment {
    pub size: usize,
    pub crop: usize,
}

impl TrainAugment {
    pub fn new(size: usize) -> Self {
        TrainAugment {
            size,
            crop: crop_size(size),
        }
    }

    /// Returns the augmented pair and the `(top, left)` crop offsets.
    pub fn apply<R: Rng + ?Sized>(&self, pair: &ModalPair, rng: &mut R) -> Result<(ModalPair, (usize, usize))> {
        let span = self.size - self.crop;
        let top = rng.random_range(0..=span);
        let left = rng.random_range(0..=span);
        let out = pair.map_images(|img| crop(&resize(img, self.size), top, left, self.crop))?;
        Ok((out, (top, left)))
    }
}

pub fn augment_train<R: Rng + ?Sized>(pair: &ModalPair, size: usize, rng: &mut R) -> Result<ModalPair> {
    Ok(TrainAugment::new(size).apply(pair, rng)?.0)
}

/// Resize to `size x size` and take the centered `crop_size(size)` window.
/// Pairs already at the crop size pass through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalCrop {
    pub size: usize,
    pub crop: usize,
}

impl EvalCrop {
    pub fn new(size: usize) -> Self {
        EvalCrop {
            size,
            crop: crop_size(size),
        }
    }

    pub fn offset(&self) -> usize {
        (self.size - self.crop) / 2
    }

    pub fn apply(&self, pair: &ModalPair) -> Result<ModalPair> {
        if pair.size() == (self.crop, self.crop) {
            return Ok(pair.clone());
        }
        let o = self.offset();
        pair.map_images(|img| crop(&resize(img, self.size), o, o, self.crop))
    }
}

pub fn center_crop_eval(pair: &ModalPair, size: usize) -> Result<ModalPair> {
    EvalCrop::new(size).apply(pair)
}

/// Replaces the `direction`-input images of `floor(ratio * len)` samples,
/// drawn without replacement, by `translator`'s output on their paired
/// complementary images. Returns the replaced indices in ascending order.
pub fn mix_generated<R: Rng + ?Sized>(
    batch: &mut Batch,
    direction: Direction,
    translator: &mut TRecgModel<f32>,
    ratio: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mix ratio must be in [0, 1], got {ratio}")));
    }
    if translator.config.direction != direction.opposite() {
        return Err(Error::InvalidArgument(format!(
            "augmenting a {direction} model needs a {} translator, got {}",
            direction.opposite(),
            translator.config.direction
        )));
    }
    let n = batch.len();
    let k = (ratio * n as f64).floor() as usize;
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    if picked.is_empty() {
        return Ok(picked);
    }

    let source = batch.input(translator.config.direction);
    let rows: Vec<&[f32]> = picked.iter().map(|&i| source.batch_item(i)).collect();
    let mut shape = source.shape().to_vec();
    shape[0] = k;
    let sub = Tensor::new(shape, rows.concat())?;
    let generated = translator.translate(&sub, rng)?;

    let dst = batch.input_mut(direction);
    if generated.shape()[1..] != dst.shape()[1..] {
        return Err(Error::ShapeMismatch {
            op: "mix_generated",
            left: generated.shape().to_vec(),
            right: dst.shape().to_vec(),
        });
    }
    let per = dst.numel() / n;
    for (j, &i) in picked.iter().enumerate() {
        dst.data_mut()[i * per..(i + 1) * per].copy_from_slice(generated.batch_item(j));
    }
    Ok(picked)
}
