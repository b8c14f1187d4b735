//! Paired two-modality samples: synthetic generation, on-disk format,
//! augmentation, batching and mixing in translated samples.

mod augment;
mod io;
pub mod pnm;
mod synth;

pub use augment::{augment_train, center_crop_eval, crop_size, mix_generated, EvalCrop, TrainAugment};
pub use io::{load_dataset, write_dataset, DatasetManifest, PairLoader, Record, Split, MANIFEST};
pub use synth::{class_schedule, gen_synthetic_dataset, gen_synthetic_pair, gen_synthetic_pair_of_class, Balance, SyntheticSpec};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Direction;
use crate::tensor::Tensor;

/// One aligned sample: a 3-channel image A, a 1-channel image B and an
/// optional class label. Both images are CHW with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ModalPair {
    pub id: String,
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    label: Option<usize>,
}

impl ModalPair {
    pub fn new(id: impl Into<String>, image_a: Tensor<f32>, image_b: Tensor<f32>, label: Option<usize>) -> Result<Self> {
        let id = id.into();
        let (sa, sb) = (image_a.shape(), image_b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != 3 || sb[0] != 1 || sa[1..] != sb[1..] {
            return Err(Error::InvalidShape {
                op: "modal_pair",
                msg: format!("`{id}`: expected (3,H,W) and (1,H,W), got {sa:?} and {sb:?}"),
            });
        }
        Ok(ModalPair {
            id,
            image_a,
            image_b,
            label,
        })
    }

    /// The class label; reading it from an unlabeled sample is a contract
    /// violation reported as [`Error::Unlabeled`].
    pub fn label(&self) -> Result<usize> {
        self.label.ok_or_else(|| Error::Unlabeled { id: self.id.clone() })
    }

    pub fn is_labeled(&self) -> bool {
        self.label.is_some()
    }

    pub fn unlabeled(mut self) -> Self {
        self.label = None;
        self
    }

    /// `(H, W)`.
    pub fn size(&self) -> (usize, usize) {
        (self.image_a.shape()[1], self.image_a.shape()[2])
    }

    pub fn image(&self, modality: Direction) -> &Tensor<f32> {
        match modality {
            Direction::AToB => &self.image_a,
            Direction::BToA => &self.image_b,
        }
    }

    /// Same label and id with both images transformed by `f`.
    pub(crate) fn map_images(&self, f: impl Fn(&Tensor<f32>) -> Tensor<f32>) -> Result<Self> {
        ModalPair::new(self.id.clone(), f(&self.image_a), f(&self.image_b), self.label)
    }
}

/// A stacked minibatch. `labels` is `None` for unlabeled data.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    labels: Option<Vec<usize>>,
}

impl Batch {
    /// Stacks pairs of equal size. Labels are kept only if every pair has one.
    pub fn from_pairs(pairs: &[ModalPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let a: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.image_a).collect();
        let b: Vec<&Tensor<f32>> = pairs.iter().map(|p| &p.image_b).collect();
        let labels = pairs.iter().map(|p| p.label).collect::<Option<Vec<_>>>();
        Ok(Batch {
            ids: pairs.iter().map(|p| p.id.clone()).collect(),
            image_a: Tensor::stack(&a)?,
            image_b: Tensor::stack(&b)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or_else(|| Error::Unlabeled {
            id: self.ids.first().cloned().unwrap_or_default(),
        })
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    /// Images of the modality a model of direction `d` recognizes.
    pub fn input(&self, d: Direction) -> &Tensor<f32> {
        match d {
            Direction::AToB => &self.image_a,
            Direction::BToA => &self.image_b,
        }
    }

    /// Images of the modality a model of direction `d` generates.
    pub fn target(&self, d: Direction) -> &Tensor<f32> {
        self.input(d.opposite())
    }

    pub(crate) fn input_mut(&mut self, d: Direction) -> &mut Tensor<f32> {
        match d {
            Direction::AToB => &mut self.image_a,
            Direction::BToA => &mut self.image_b,
        }
    }
}

/// An in-memory split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub pairs: Vec<ModalPair>,
}

impl Dataset {
    pub fn new(n_classes: usize, pairs: Vec<ModalPair>) -> Result<Self> {
        for p in &pairs {
            if let Some(l) = p.label {
                if l >= n_classes {
                    return Err(Error::LabelOutOfRange {
                        label: l,
                        classes: n_classes,
                    });
                }
            }
        }
        Ok(Dataset { n_classes, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Every label, failing on the first unlabeled sample.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.pairs.iter().map(ModalPair::label).collect()
    }

    pub fn is_labeled(&self) -> bool {
        self.pairs.iter().all(ModalPair::is_labeled)
    }

    /// The same images with every label removed.
    pub fn unlabeled(&self) -> Self {
        Dataset {
            n_classes: self.n_classes,
            pairs: self.pairs.iter().cloned().map(ModalPair::unlabeled).collect(),
        }
    }

    /// A seeded permutation of sample indices cut into batches of
    /// `batch_size`; a trailing partial batch is kept if it has at least two
    /// samples (batch norm needs two).
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }
}
