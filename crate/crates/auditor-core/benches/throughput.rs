//! Parallel vs sequential throughput for the two hot paths: per-transaction
//! join classification and linkage trial sweeps.
//!
//! Build with the default `parallel` feature to compare rayon against the
//! sequential fallback in one run:
//!   cargo bench -p auditor-core

use criterion::{criterion_group, criterion_main, Criterion};

use auditor_core::experiment::{
    prepare_linkage_materials, run_linkage_experiment_with, LinkageExperimentConfig,
};
use auditor_core::joins::{detect_joins, detect_joins_seq, JoinDetectionParams};
use auditor_core::synth::{generate_chain, SynthConfig};

fn bench_detect_joins(c: &mut Criterion) {
    let cfg = SynthConfig {
        duration: 2_000,
        background_tx_rate: 10.0,
        join_fraction: 0.002,
        seed: 7,
        ..SynthConfig::default()
    };
    let out = generate_chain(&cfg).expect("generation");
    let (g, _, _) = out.load().expect("load");
    let params = JoinDetectionParams::default();

    let mut group = c.benchmark_group("detect_joins_20k_txs");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| detect_joins(&g, &params)));
    group.bench_function("sequential", |b| b.iter(|| detect_joins_seq(&g, &params)));
    group.finish();
}

fn bench_linkage_trials(c: &mut Criterion) {
    let cfg = LinkageExperimentConfig {
        seed: 7,
        n_prices: 10,
        n_times: 10,
        pay_windows: vec![900],
        rate_windows: vec![300],
        price_set_sizes: vec![5],
        synth: SynthConfig {
            duration: 2_200,
            background_tx_rate: 6.0,
            join_fraction: 0.0,
            ..SynthConfig::default()
        },
        ..LinkageExperimentConfig::default()
    };
    let materials = prepare_linkage_materials(&cfg).expect("materials");

    let mut group = c.benchmark_group("linkage_100_flows");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| run_linkage_experiment_with(&materials, &cfg, false).expect("run"))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| run_linkage_experiment_with(&materials, &cfg, true).expect("run"))
    });
    group.finish();
}

criterion_group!(benches, bench_detect_joins, bench_linkage_trials);
criterion_main!(benches);
