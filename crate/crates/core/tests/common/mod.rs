#![allow(dead_code)]

use trecg_core::data::{gen_synthetic_dataset, Balance, Dataset, SyntheticSpec};
use trecg_core::nn::{Direction, StageSpec};
use trecg_core::training::TRecgConfig;

pub const CLASSES: usize = 4;

pub fn small_stages() -> StageSpec {
    StageSpec {
        channels: [4, 8, 8, 16],
        strides: [1, 2, 2, 2],
        blocks: 1,
    }
}

pub fn small_config(direction: Direction, epochs: usize) -> TRecgConfig {
    let mut cfg = TRecgConfig::new(direction).with_epochs(epochs);
    cfg.stages = small_stages();
    cfg.batch_size = 8;
    cfg.seed = 3;
    cfg
}

pub fn datasets(train: usize, test: usize) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        n_classes: CLASSES,
        size: 64,
        count: train,
        balance: Balance::IMBALANCED,
        seed: 11,
    };
    let tr = gen_synthetic_dataset(&spec, 0).unwrap();
    let te = gen_synthetic_dataset(
        &SyntheticSpec {
            count: test,
            balance: Balance::Balanced,
            ..spec
        },
        1_000_000,
    )
    .unwrap();
    (tr, te)
}
