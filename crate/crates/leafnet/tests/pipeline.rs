//! End-to-end library pipeline tests on tiny datasets.

use leafnet::checkpoint;
use leafnet::gallery::{build_gallery, evaluate};
use leafnet::net::{embed, NetworkParams, NetworkSpec};
use leafnet::synthetic::generate_synthetic;
use leafnet::train::{train, ImageStore, TrainConfig};

fn tiny_dataset(seed: u64) -> (tempfile::TempDir, leafnet::manifest::DatasetManifest) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(2, 6, seed, dir.path()).unwrap();
    (dir, manifest)
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (_dir, manifest) = tiny_dataset(5);
    let store = ImageStore::load(&manifest).unwrap();
    let config = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        weight_decay: 0.0,
        seed: 5,
        ..TrainConfig::default()
    };
    let output = train(&config, &manifest, &store, None).unwrap();
    let initial = NetworkParams::<f32>::init(&NetworkSpec::backbone(), config.seed);
    assert_eq!(output.params, initial);
}

#[test]
fn checkpoint_reload_reproduces_embeddings_exactly() {
    let (dir, manifest) = tiny_dataset(6);
    let store = ImageStore::load(&manifest).unwrap();
    let ckpt_dir = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        epochs: 1,
        seed: 6,
        ..TrainConfig::default()
    };
    let output = train(&config, &manifest, &store, Some(ckpt_dir.path())).unwrap();
    let reloaded = checkpoint::load(&ckpt_dir.path().join("checkpoint_final.bin")).unwrap();
    assert_eq!(reloaded, output.params);
    // and the embeddings they produce are bit-identical
    let image = leafnet::image::PixelImage::load(&manifest.samples[0].path).unwrap();
    let a = embed(&output.params, &image).unwrap();
    let b = embed(&reloaded, &image).unwrap();
    assert_eq!(a.values(), b.values());
    drop(dir);
}

#[test]
fn train_then_evaluate_produces_consistent_report() {
    let (_dir, manifest) = tiny_dataset(7);
    let store = ImageStore::load(&manifest).unwrap();
    let config = TrainConfig {
        epochs: 1,
        seed: 7,
        ..TrainConfig::default()
    };
    let output = train(&config, &manifest, &store, None).unwrap();

    // Evaluate on a separately rendered query set.
    let (_eval_dir, eval_manifest) = tiny_dataset(8);
    let eval_store = ImageStore::load(&eval_manifest).unwrap();
    let gallery = build_gallery(&output.params, &manifest, &store, 7).unwrap();
    let report = evaluate(&gallery, &output.params, &eval_manifest, &eval_store).unwrap();

    assert_eq!(report.sample_count, eval_manifest.len());
    let confusion_total: usize = report.confusion.iter().flatten().sum();
    assert_eq!(confusion_total, report.sample_count);
    assert!((0.0..=1.0).contains(&report.overall_accuracy));
    for (truth, row) in report.confusion.iter().enumerate() {
        let row_total: usize = row.iter().sum();
        if row_total > 0 {
            let recall = row[truth] as f64 / row_total as f64;
            assert_eq!(report.per_class_accuracy[truth], Some(recall));
        } else {
            assert_eq!(report.per_class_accuracy[truth], None);
        }
    }
}

#[test]
fn evaluation_rejects_support_images_as_queries() {
    let (_dir, manifest) = tiny_dataset(9);
    let store = ImageStore::load(&manifest).unwrap();
    let params = NetworkParams::<f32>::init(&NetworkSpec::backbone(), 9);
    let gallery = build_gallery(&params, &manifest, &store, 9).unwrap();
    // Querying with the training manifest itself overlaps the support set.
    let err = evaluate(&gallery, &params, &manifest, &store).unwrap_err();
    assert!(
        err.to_string().contains("support"),
        "unexpected error: {err}"
    );
}

#[test]
fn evaluation_rejects_mismatched_checkpoint() {
    let (_dir, manifest) = tiny_dataset(10);
    let store = ImageStore::load(&manifest).unwrap();
    let params = NetworkParams::<f32>::init(&NetworkSpec::backbone(), 10);
    let other = NetworkParams::<f32>::init(&NetworkSpec::backbone(), 11);
    let gallery = build_gallery(&params, &manifest, &store, 10).unwrap();
    let (_eval_dir, eval_manifest) = tiny_dataset(12);
    let eval_store = ImageStore::load(&eval_manifest).unwrap();
    let err = evaluate(&gallery, &other, &eval_manifest, &eval_store).unwrap_err();
    assert!(
        err.to_string().contains("checkpoint"),
        "unexpected error: {err}"
    );
}
