use auditor_core::experiment::*;
use auditor_core::synth::SynthConfig;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let cfg = IntersectionExperimentConfig {
        seed: 1,
        rounds_grid: vec![1, 2, 3, 4, 5],
        observations_grid: vec![1, 2, 3, 5],
        trials_per_cell: 1000,
        n_coins: 100,
        age_buckets: 6,
        synth: SynthConfig {
            duration: 10_000,
            background_tx_rate: 10.0,
            join_fraction: 0.0005,
            ..SynthConfig::default()
        },
        ..IntersectionExperimentConfig::default()
    };
    let report = run_intersection_experiment(&cfg).unwrap();
    println!("wallet_intact: {}", report.wallet_intact);
    println!("{}", report.cells_csv());
    println!("age curve (r={}):", report.age_curve_rounds);
    println!("{}", report.age_csv());
    println!("age spearman: {:.4}", report.age_spearman());
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
}
