//! Sequential vs pooled trial execution on a closed-form m-sweep and a
//! short SGD sweep. Built without the `parallel` feature both arms run
//! sequentially.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sketchlaw::experiments::{sweep_samples, sweep_sketch_dim, ExperimentConfig, PresetTarget};

fn worker_counts() -> Vec<usize> {
    let n = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if n > 1 {
        vec![1, n]
    } else {
        vec![1, 4]
    }
}

fn bench_sweeps(c: &mut Criterion) {
    let m_cfg = ExperimentConfig {
        d: 1024,
        trials: 16,
        ..ExperimentConfig::preset("quick", PresetTarget::SweepM).unwrap()
    };
    let n_cfg = ExperimentConfig {
        trials: 8,
        ..ExperimentConfig::preset("quick", PresetTarget::SweepN).unwrap()
    };
    let mut group = c.benchmark_group("trials");
    group.sample_size(10);
    for threads in worker_counts() {
        group.bench_with_input(BenchmarkId::new("sweep_m", threads), &threads, |b, &t| {
            b.iter(|| black_box(sweep_sketch_dim(&m_cfg, t).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sweep_n", threads), &threads, |b, &t| {
            b.iter(|| black_box(sweep_samples(&n_cfg, t).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweeps);
criterion_main!(benches);
