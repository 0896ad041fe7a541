//! Compares the data-parallel inner loops against a single-thread run.
//!
//! Build with default features for the rayon backend; the "1 thread" rows
//! pin rayon to one worker, approximating the sequential fallback. For the
//! true fallback build, rerun with `--no-default-features`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use edov_core::distill::{apply_corruption, ChainStep, CorruptionChain, CorruptionId};
use edov_core::embed::{EmbeddingProvider, ProjectionProvider};
use edov_core::model::{Classifier, LossKind, Model};
use edov_core::synth;

fn bench_with_threads(c: &mut Criterion, threads: usize, label: &str) {
    let ds = synth::make_dataset(640, 3, 0);
    let model = Classifier::init("desk_cnn_v1", 10, 3, 1).unwrap();
    let x = ds.gather_batch(&(0..256).collect::<Vec<_>>());
    let labels: Vec<usize> = ds.labels[..256].to_vec();
    let provider = ProjectionProvider::new(ds.shape(), 64, 7);
    let chain = CorruptionChain {
        steps: vec![
            ChainStep {
                corruption_id: CorruptionId::GaussianBlur,
                severity: 3,
            },
            ChainStep {
                corruption_id: CorruptionId::GaussianNoise,
                severity: 2,
            },
        ],
    };

    let run = |f: &(dyn Fn() + Sync)| {
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(f);
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            f();
        }
    };

    let mut group = c.benchmark_group("inner_loops");
    group.sample_size(10);
    group.bench_function(BenchmarkId::new("forward_256", label), |b| {
        b.iter(|| run(&|| {
            criterion::black_box(model.logits_batch(x.view()));
        }))
    });
    group.bench_function(BenchmarkId::new("train_step_256", label), |b| {
        b.iter(|| run(&|| {
            let out = model.net().loss_and_grad(
                x.view(),
                &LossKind::HardCe { labels: &labels },
                true,
                false,
            );
            criterion::black_box(out.loss_sum);
        }))
    });
    group.bench_function(BenchmarkId::new("embed_640", label), |b| {
        b.iter(|| run(&|| {
            let v: Vec<_> = edov_core::par::map_range(ds.len(), |i| {
                provider.embed_image(&ds.images[i]).unwrap()
            });
            criterion::black_box(v.len());
        }))
    });
    group.bench_function(BenchmarkId::new("corrupt_256", label), |b| {
        b.iter(|| run(&|| {
            let v: Vec<_> = edov_core::par::map_range(256, |i| {
                apply_corruption(&ds.images[i], &chain, i as u64).unwrap()
            });
            criterion::black_box(v.len());
        }))
    });
    group.finish();
}

fn benches(c: &mut Criterion) {
    if edov_core::par::is_parallel() {
        let cores = std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(2);
        bench_with_threads(c, cores, &format!("rayon_{cores}_threads"));
        bench_with_threads(c, 1, "rayon_1_thread");
    } else {
        bench_with_threads(c, 1, "sequential");
    }
}

criterion_group!(benches_group, benches);
criterion_main!(benches_group);
