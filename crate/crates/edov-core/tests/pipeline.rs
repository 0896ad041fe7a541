//! Micro-scale end-to-end pipeline tests: stage caching, selective
//! invalidation, folder ingestion, and report determinism.

use std::path::Path;

use edov_core::data::{load_dataset, DatasetFormat};
use edov_core::pipeline::{report, run_pipeline, ExperimentConfig, Stage};

fn micro_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.synthetic_train = 600;
    cfg.dataset.synthetic_test = 300;
    cfg.gallery.synthetic_size = 1500;
    cfg.train.epochs = 4;
    cfg.train.batch_size = 64;
    cfg.distill.epochs = 4;
    cfg.distill.batch_size = 64;
    cfg.pool.members = 2;
    cfg.pool.iterations = 1;
    cfg.pool.batches_per_iter = 3;
    cfg.pool.batch_size = 64;
    cfg.chain.population = 5;
    cfg.chain.epochs = 2;
    cfg.chain.batch_size = 64;
    cfg.verify.eval_samples = 150;
    cfg.verify.n_decoys = 4;
    cfg.dov.probe_size = 50;
    cfg
}

#[test]
fn rerun_hits_cache_and_reproduces_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config();
    let first = run_pipeline(&cfg, dir.path(), false, None).unwrap();
    assert!(first.finished);
    assert!(first.stages.iter().all(|s| !s.cached));

    let second = run_pipeline(&cfg, dir.path(), false, None).unwrap();
    assert!(
        second.stages.iter().all(|s| s.cached),
        "stages not cached: {:?}",
        second
            .stages
            .iter()
            .filter(|s| !s.cached)
            .map(|s| &s.name)
            .collect::<Vec<_>>()
    );
    assert_eq!(first.teacher_report, second.teacher_report);
    assert_eq!(first.student_report, second.student_report);
    assert_eq!(first.teacher_accuracy, second.teacher_accuracy);
    assert_eq!(first.student_accuracy, second.student_accuracy);

    // Force re-runs every stage yet still reproduces the same reports.
    let forced = run_pipeline(&cfg, dir.path(), true, None).unwrap();
    assert!(forced.stages.iter().all(|s| !s.cached));
    assert_eq!(first.teacher_report, forced.teacher_report);
    assert_eq!(first.student_report, forced.student_report);
}

#[test]
fn editing_distill_config_keeps_bank_and_teacher_cached() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config();
    run_pipeline(&cfg, dir.path(), false, None).unwrap();

    cfg.distill.epochs = 5; // distillation-only change
    let second = run_pipeline(&cfg, dir.path(), false, None).unwrap();
    let cached: std::collections::BTreeMap<&str, bool> = second
        .stages
        .iter()
        .map(|s| (s.name.as_str(), s.cached))
        .collect();
    assert!(cached["data"]);
    assert!(cached["mark"]);
    assert!(cached["teacher"]);
    assert!(cached["bank"]);
    assert!(cached["curate"]);
    assert!(cached["pool"]);
    assert!(cached["chain"]);
    assert!(!cached["distill"]);
    assert!(!cached["verify"]);
}

#[test]
fn stop_after_stage_produces_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config();
    let manifest = run_pipeline(&cfg, dir.path(), false, Some(Stage::Teacher)).unwrap();
    assert!(!manifest.finished);
    assert!(dir.path().join("teacher.ckpt").exists());
    assert!(!dir.path().join("student.ckpt").exists());
    assert!(report(&manifest).is_err()); // incomplete
}

#[test]
fn folder_per_class_ingestion() {
    // Write a 2-class x 3-image folder tree of PNGs, then load it.
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("folders");
    for (class, name) in ["ants", "bees"].iter().enumerate() {
        let cdir = root.join(name);
        std::fs::create_dir_all(&cdir).unwrap();
        for i in 0..3 {
            write_png(
                &cdir.join(format!("img_{i}.png")),
                8,
                8,
                (class * 100 + i * 20) as u8,
            );
        }
    }
    let ds = load_dataset(&root, DatasetFormat::FolderPerClass).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.k(), 2);
    assert_eq!(ds.class_names, vec!["ants".to_string(), "bees".to_string()]);
    assert_eq!(ds.ids, (0..6u64).collect::<Vec<_>>());
    // 8-bit 255 loads as exactly 1.0 (checked via a white image).
    let white = dir.path().join("white");
    std::fs::create_dir_all(white.join("w")).unwrap();
    write_png(&white.join("w").join("a.png"), 4, 4, 255);
    std::fs::create_dir_all(white.join("x")).unwrap();
    write_png(&white.join("x").join("a.png"), 4, 4, 0);
    let ws = load_dataset(&white, DatasetFormat::FolderPerClass).unwrap();
    assert_eq!(ws.images[0].pixels[[0, 0, 0]], 1.0);
    // Reloading gives identical ids and labels.
    let again = load_dataset(&root, DatasetFormat::FolderPerClass).unwrap();
    assert_eq!(again.ids, ds.ids);
    assert_eq!(again.labels, ds.labels);
}

#[test]
fn ragged_folder_shapes_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("ragged");
    std::fs::create_dir_all(root.join("a")).unwrap();
    write_png(&root.join("a").join("x.png"), 8, 8, 10);
    write_png(&root.join("a").join("y.png"), 6, 6, 10);
    assert!(load_dataset(&root, DatasetFormat::FolderPerClass).is_err());
}

fn write_png(path: &Path, w: u32, h: u32, value: u8) {
    let file = std::fs::File::create(path).unwrap();
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), w, h);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().unwrap();
    let data = vec![value; (w * h * 3) as usize];
    writer.write_image_data(&data).unwrap();
}
