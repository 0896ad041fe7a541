//! Temporary calibration probe for desk-rig configs. Not part of the API.

use std::time::Instant;

use edov_core::data::SplitSpec;
use edov_core::model::{train_classifier, TrainConfig};
use edov_core::synth;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("train");

    match mode {
        "train" => {
            let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10_000);
            let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(6);
            let wd: f32 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(5e-4);
            let lr: f32 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(0.05);
            let t0 = Instant::now();
            let train = synth::make_dataset(n_train, 11, 0);
            let test = synth::make_dataset(2_000, 12, n_train as u64);
            println!("datagen: {:.1}s", t0.elapsed().as_secs_f64());

            let cfg = TrainConfig {
                epochs,
                batch_size: 128,
                learning_rate: lr,
                weight_decay: wd,
                seed: 44,
                mixup_enabled: false,
                mixup_alpha: 1.0,
            };
            let t1 = Instant::now();
            let model = train_classifier(&train, &cfg, 44).unwrap();
            let secs = t1.elapsed().as_secs_f64();
            println!(
                "train {} samples x {} epochs: {:.1}s ({:.1}s/epoch)",
                n_train,
                epochs,
                secs,
                secs / epochs as f64
            );
            let t2 = Instant::now();
            let train_acc = model.accuracy(&train);
            let test_acc = model.accuracy(&test);
            let train_loss = model.mean_loss(&train).unwrap();
            let test_loss = model.mean_loss(&test).unwrap();
            println!("eval: {:.1}s", t2.elapsed().as_secs_f64());
            println!(
                "train_acc={train_acc:.4} test_acc={test_acc:.4} train_loss={train_loss:.4} test_loss={test_loss:.4} ratio={:.2}",
                test_loss / train_loss
            );
        }
        "split" => {
            let ds = synth::make_dataset(1000, 3, 0);
            let out = edov_core::data::split(
                &ds,
                &SplitSpec {
                    seed: 5,
                    fractions: vec![0.8, 0.2],
                },
            )
            .unwrap();
            println!("parts: {} / {}", out.parts[0].len(), out.parts[1].len());
        }
        "pipe" => {
            // pipe <method> <n_train> <gallery> <teacher_epochs> <distill_epochs> [out]
            use edov_core::pipeline::{run_pipeline, ExperimentConfig};
            let method = args.get(2).cloned().unwrap_or_else(|| "badnets".into());
            let n_train: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4000);
            let gallery: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8000);
            let te: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(6);
            let de: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(8);
            let out = args
                .get(7)
                .cloned()
                .unwrap_or_else(|| "/tmp/edov_probe".into());
            let mut cfg = ExperimentConfig::default();
            cfg.dov.method = method;
            cfg.dataset.synthetic_train = n_train;
            cfg.dataset.synthetic_test = 2000;
            cfg.gallery.synthetic_size = gallery;
            cfg.train.epochs = te;
            cfg.distill.epochs = de;
            if let Some(wd) = args.get(8).and_then(|s| s.parse::<f32>().ok()) {
                cfg.train.weight_decay = wd;
            }
            let t0 = Instant::now();
            let manifest = run_pipeline(&cfg, std::path::Path::new(&out), false, None).unwrap();
            println!("pipeline: {:.1}s", t0.elapsed().as_secs_f64());
            for s in &manifest.stages {
                println!("  {:<8} cached={} {:.1}s", s.name, s.cached, s.seconds);
            }
            println!(
                "teacher acc={:?} metric={:?} detected={:?} ratio={:?}",
                manifest.teacher_accuracy,
                manifest.teacher_report.as_ref().map(|r| r.value),
                manifest.teacher_report.as_ref().map(|r| r.detected),
                manifest.teacher_loss_ratio
            );
            println!(
                "student acc={:?} metric={:?} detected={:?} ratio={:?}",
                manifest.student_accuracy,
                manifest.student_report.as_ref().map(|r| r.value),
                manifest.student_report.as_ref().map(|r| r.detected),
                manifest.student_loss_ratio
            );
            for w in &manifest.warnings {
                println!("  warning: {w}");
            }
        }
        "anwprobe" => {
            // anwprobe <run_dir> — loss-vs-hue-angle curve for a cached teacher
            use edov_core::color::hue_rotate;
            use edov_core::data::{load_dataset, DatasetFormat};
            use edov_core::model::checkpoint::load_checkpoint;
            use edov_core::model::{layers, Model};
            let dir = std::path::PathBuf::from(args.get(2).expect("run dir"));
            let (teacher, _) = load_checkpoint(&dir.join("teacher.ckpt")).unwrap();
            let test = load_dataset(&dir.join("test.bin"), DatasetFormat::PackedBinary).unwrap();
            let sub: Vec<usize> = (0..500).collect();
            let eval = test.subset(&sub);
            for angle in [30.0f32, 60.0, 90.0, 120.0, 131.0, 150.0, 200.0, 250.0, 300.0, 330.0] {
                let rotated: Vec<_> = eval.images.iter().map(|i| hue_rotate(i, angle)).collect();
                let (c, h, w) = eval.shape();
                let mut batch = ndarray::Array4::zeros((rotated.len(), c, h, w));
                for (i, img) in rotated.iter().enumerate() {
                    batch.index_axis_mut(ndarray::Axis(0), i).assign(&img.pixels);
                }
                let logits = teacher.logits_batch(batch.view());
                let logp = layers::log_softmax(logits.view());
                let loss: f64 = eval
                    .labels
                    .iter()
                    .enumerate()
                    .map(|(r, &l)| -logp[[r, l]] as f64)
                    .sum::<f64>()
                    / eval.len() as f64;
                println!("angle {angle:>5.1}: loss {loss:.4}");
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
