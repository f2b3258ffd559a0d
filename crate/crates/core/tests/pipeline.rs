use std::fs;

use glyphscope::data::{default_class_names, load_dataset, synth_glyphs, write_dataset, AugmentConfig};
use glyphscope::explain::{explain, grad_cam};
use glyphscope::nn::{Model, ModelConfig, LAST_CONV_TAG};
use glyphscope::train::{run_cross_validation, stack_images, Checkpoint, CvOptions, TrainConfig};

fn tiny_model() -> ModelConfig {
    let mut cfg = ModelConfig::default();
    cfg.blocks.truncate(2);
    cfg.head_channels = 16;
    cfg.head_hidden = 8;
    cfg
}

fn quick_training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        k_folds: 3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn png_round_trip_keeps_pixels_and_reports_skips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_glyphs(4, 2);
    let written = write_dataset(&ds, dir.path()).unwrap();
    assert_eq!(written.len(), 12);
    fs::write(dir.path().join("Reversed/zz_corrupt.png"), [0x89, b'P', b'N', b'G']).unwrap();
    fs::write(dir.path().join("Reversed/notes.txt"), "ignored").unwrap();

    let report = load_dataset(dir.path(), &default_class_names()).unwrap();
    assert_eq!(report.skipped.len(), 1);
    assert!(report.skipped[0].path.ends_with("zz_corrupt.png"));
    let loaded = report.dataset;
    assert_eq!(loaded.counts(), vec![4, 4, 4]);
    for (a, b) in ds.samples.iter().zip(&loaded.samples) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.pixels(), b.pixels());
    }
}

#[test]
fn cross_validation_is_reproducible_and_checkpoints_restore() {
    let ds = synth_glyphs(8, 3);
    let aug = AugmentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let run = |seed, ckpt_dir| {
        let opts = CvOptions {
            augment: Some(&aug),
            checkpoint_dir: ckpt_dir,
            ..CvOptions::default()
        };
        run_cross_validation::<f32>(&ds, &tiny_model(), &quick_training(seed), &opts).unwrap()
    };
    let a = run(6, Some(dir.path()));
    let b = run(6, None);
    assert_eq!(a.plan, b.plan);
    for (fa, fb) in a.folds.iter().zip(&b.folds) {
        assert_eq!(fa.evaluation.predictions, fb.evaluation.predictions);
        assert_eq!(fa.checkpoint.to_bytes(), fb.checkpoint.to_bytes());
    }

    let fold = &a.folds[1];
    let on_disk = Checkpoint::load(&dir.path().join("fold2/best.ckpt")).unwrap();
    assert_eq!(on_disk.to_bytes(), fold.checkpoint.to_bytes());
    let model: Model<f32> = on_disk.restore_model().unwrap();
    let val: Vec<_> = fold.validation_indices.iter().map(|&i| &ds.samples[i]).collect();
    let probs = model.predict(&stack_images(val.iter().copied())).unwrap();
    let predicted: Vec<usize> = probs
        .data()
        .chunks(3)
        .map(|r| (0..3).fold(0, |b, i| if r[i] > r[b] { i } else { b }))
        .collect();
    assert_eq!(predicted, fold.evaluation.predictions);
}

#[test]
fn explanations_from_a_restored_model() {
    let ds = synth_glyphs(6, 4);
    let result = run_cross_validation::<f32>(&ds, &tiny_model(), &quick_training(1), &CvOptions::default()).unwrap();
    let model: Model<f32> = result.folds[0].checkpoint.restore_model().unwrap();
    let sample = &ds.samples[7];
    let e = explain(&model, sample, None, LAST_CONV_TAG).unwrap();
    assert_eq!(e.heatmap.values.len(), 32 * 32);
    assert!(e.heatmap.values.iter().all(|v| (0.0..=1.0).contains(v)));
    let direct = grad_cam(&model, sample, e.predicted_class).unwrap();
    assert_eq!(direct, e.heatmap);
    assert!(explain(&model, sample, None, "nowhere").is_err());
}
