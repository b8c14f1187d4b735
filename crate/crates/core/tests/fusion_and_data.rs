mod common;

use common::{datasets, small_config};
use trecg_core::data::{load_dataset, pnm, write_dataset, Dataset};
use trecg_core::fusion::{evaluate_fusion, train_fusion, FusionModel};
use trecg_core::nn::Direction;
use trecg_core::training::{train_loop, Checkpoint, LoopOptions, METRICS_FILE, FINAL_CKPT, model_checkpoint};
use trecg_core::Error;

#[test]
fn fusion_training_updates_only_the_head() {
    let (train, test) = datasets(16, 8);
    let ck = |d| {
        let out = train_loop(&small_config(d, 1), &train, None, LoopOptions::default()).unwrap();
        model_checkpoint(&out.model, 1, None)
    };
    let (a, b) = (ck(Direction::AToB), ck(Direction::BToA));
    let model = FusionModel::from_model_checkpoints(&a, &b, 0).unwrap();
    let enc_before = (model.store.values_with_prefix("enc_a."), model.store.values_with_prefix("enc_b."));
    let head_before = model.store.values_with_prefix("fusion.");
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(Direction::AToB, 2);
    let out = train_fusion(model, &train, Some(&test), &cfg, Some(dir.path().to_path_buf())).unwrap();
    assert_eq!(out.model.store.values_with_prefix("enc_a."), enc_before.0);
    assert_eq!(out.model.store.values_with_prefix("enc_b."), enc_before.1);
    assert_ne!(out.model.store.values_with_prefix("fusion."), head_before);
    assert_eq!(out.metrics.len(), 2);
    assert!(out.metrics.iter().all(|m| m.val_mean_class_acc.is_finite()));

    let saved = Checkpoint::load(&dir.path().join(FINAL_CKPT)).unwrap();
    let mut reloaded = FusionModel::from_checkpoint(&saved).unwrap();
    let mut trained = out.model;
    let r1 = evaluate_fusion(&mut reloaded, &test, 64, 4).unwrap();
    let r2 = evaluate_fusion(&mut trained, &test, 64, 4).unwrap();
    assert_eq!(r1.per_class, r2.per_class);
    assert!(r1.trace.iter().all(|e| !e.scope.contains("decoder")));
    assert_eq!(std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap().lines().count(), 3);
}

#[test]
fn dataset_round_trip_is_within_quantization() {
    let (train, _) = datasets(6, 4);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &train).unwrap();
    let (manifest, loader) = load_dataset(dir.path()).unwrap();
    assert_eq!(manifest.n_classes, 4);
    let back = loader.load_all().unwrap();
    assert_eq!(back.labels().unwrap(), train.labels().unwrap());
    for (p, q) in train.pairs.iter().zip(&back.pairs) {
        assert_eq!(p.id, q.id);
        for (x, y) in [(&p.image_a, &q.image_a), (&p.image_b, &q.image_b)] {
            let worst = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            assert!(worst <= 1.0 / 127.5 + 1e-6, "{worst}");
        }
    }
    // quantized values survive a second pass exactly
    let again = tempfile::tempdir().unwrap();
    write_dataset(again.path(), &back).unwrap();
    let twice = load_dataset(again.path()).unwrap().1.load_all().unwrap();
    assert_eq!(twice.pairs, back.pairs);
}

#[test]
fn unlabeled_manifest_yields_unlabeled_pairs() {
    let (train, _) = datasets(4, 4);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &train.unlabeled()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with("\t-")), "{text}");
    let ds: Dataset = load_dataset(dir.path()).unwrap().1.load_all().unwrap();
    assert!(!ds.is_labeled());
    assert!(matches!(ds.pairs[0].label(), Err(Error::Unlabeled { .. })));
}

#[test]
fn missing_image_names_the_sample() {
    let (train, _) = datasets(4, 4);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &train).unwrap();
    let id = &train.pairs[2].id;
    std::fs::remove_file(dir.path().join(format!("{id}.b.pgm"))).unwrap();
    let err = load_dataset(dir.path()).err().unwrap().to_string();
    assert!(err.contains(id.as_str()), "{err}");
}

#[test]
fn generated_images_decode_to_the_quantized_range() {
    let (train, _) = datasets(4, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.pgm");
    pnm::write(&path, &train.pairs[0].image_b).unwrap();
    let img = pnm::read(&path).unwrap();
    assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert_eq!(std::fs::read(&path).unwrap()[..2], *b"P5");
}
