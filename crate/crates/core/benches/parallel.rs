//! Sequential-vs-parallel throughput on the data-parallel hot paths: the
//! closed-form policy tilt, the surrogate evaluation, win-rate matches, and
//! the concentration experiment.
//!
//! The rayon path runs on thread pools of different sizes; the sequential
//! baseline goes through `par::map_range_seq`-backed single-thread pools.
//! Building with `--no-default-features` removes rayon entirely and leaves
//! only the sequential code path in the library.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use irl_align_core::evalx::{concentration_experiment, win_rate};
use irl_align_core::objectives::{optimal_policy, single_level_surrogate, DemonstrationDataset};
use irl_align_core::seqcore::{Instance, RewardModel};
use irl_align_core::workbench::{make_instance, sample_demonstrations, InstanceSpec};

fn bench_instance() -> Instance {
    // 64 prompts over 4096 completions: enough work per prompt row for the
    // parallel split to pay off.
    make_instance(&InstanceSpec {
        vocab: 4,
        horizon: 6,
        prompt_count: 64,
        prompt_length: 4,
        beta: 1.0,
        seed: 11,
        ..Default::default()
    })
    .expect("bench instance")
}

fn small_instance() -> Instance {
    make_instance(&InstanceSpec {
        vocab: 3,
        horizon: 3,
        prompt_count: 3,
        prompt_length: 2,
        beta: 1.0,
        seed: 12,
        ..Default::default()
    })
    .expect("small instance")
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let seq = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let par = rayon::ThreadPoolBuilder::new().build().expect("default pool");
    vec![("sequential", seq), ("parallel", par)]
}

fn bench_optimal_policy(c: &mut Criterion) {
    let instance = bench_instance();
    let reward = RewardModel::tabular(
        instance.prompt_set().clone(),
        instance.vocab(),
        instance.horizon(),
        instance.c_r(),
    )
    .unwrap();
    let mut group = c.benchmark_group("optimal_policy");
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &pool, |b, pool| {
            b.iter(|| {
                pool.install(|| {
                    black_box(optimal_policy(&reward, instance.pi_ref(), 1.0).unwrap())
                })
            })
        });
    }
    group.finish();
}

fn bench_surrogate(c: &mut Criterion) {
    let instance = bench_instance();
    let reward = RewardModel::tabular(
        instance.prompt_set().clone(),
        instance.vocab(),
        instance.horizon(),
        instance.c_r(),
    )
    .unwrap();
    let demos = DemonstrationDataset::full_population(&instance);
    let mut group = c.benchmark_group("single_level_surrogate");
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &pool, |b, pool| {
            b.iter(|| {
                pool.install(|| {
                    black_box(
                        single_level_surrogate(
                            &reward,
                            &demos,
                            instance.pi_ref(),
                            instance.prompt_set(),
                            1.0,
                        )
                        .unwrap(),
                    )
                })
            })
        });
    }
    group.finish();
}

fn bench_win_rate(c: &mut Criterion) {
    let instance = bench_instance();
    let mut group = c.benchmark_group("win_rate_10k");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &pool, |b, pool| {
            b.iter(|| {
                pool.install(|| {
                    black_box(
                        win_rate(
                            instance.pi_expert(),
                            instance.pi_ref(),
                            instance.r_star(),
                            instance.prompt_set(),
                            10_000,
                            3,
                        )
                        .unwrap(),
                    )
                })
            })
        });
    }
    group.finish();
}

fn bench_concentration(c: &mut Criterion) {
    let instance = small_instance();
    let mut group = c.benchmark_group("concentration_2x3x20");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &pool, |b, pool| {
            b.iter(|| {
                pool.install(|| {
                    black_box(
                        concentration_experiment(&instance, 2, &[64, 256, 1024], 20, 5).unwrap(),
                    )
                })
            })
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let instance = bench_instance();
    let demos = sample_demonstrations(&instance, 512, 7).unwrap();
    c.bench_function("sample_demonstrations_512", |b| {
        b.iter(|| black_box(sample_demonstrations(&instance, 512, 7).unwrap()))
    });
    black_box(demos);
}

criterion_group!(
    benches,
    bench_optimal_policy,
    bench_surrogate,
    bench_win_rate,
    bench_concentration,
    bench_sampling
);
criterion_main!(benches);
