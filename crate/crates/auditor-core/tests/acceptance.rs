//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line. Run with `cargo test --test acceptance -- --nocapture`
//! to see every line.

use std::collections::HashSet;
use std::time::Instant;

use auditor_core::chain::Satoshi;
use auditor_core::cluster::{cluster_all, expand_cluster};
use auditor_core::experiment::{
    prepare_linkage_materials, run_intersection_experiment, run_linkage_experiment,
    run_linkage_experiment_with, IntersectionExperimentConfig, LinkageExperimentConfig,
};
use auditor_core::joins::{bin_cover, detect_joins, JoinDetectionParams};
use auditor_core::rng::Rng;
use auditor_core::synth::{generate_chain, SynthConfig};

fn verdict(n: u32, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} failed: {detail}");
}

/// Brute-force bin-covering oracle: every assignment of each value to a bin
/// or to "unused".
fn bin_cover_oracle(values: &[Satoshi], bins: &[Satoshi]) -> bool {
    let n = values.len();
    let b = bins.len();
    let options = b + 1;
    let mut assignment = vec![0usize; n];
    loop {
        let mut sums = vec![0u128; b];
        for (i, &a) in assignment.iter().enumerate() {
            if a < b {
                sums[a] += values[i].0 as u128;
            }
        }
        if sums.iter().zip(bins).all(|(&s, &need)| s >= need.0 as u128) {
            return true;
        }
        let mut pos = 0;
        loop {
            if pos == n {
                return false;
            }
            assignment[pos] += 1;
            if assignment[pos] < options {
                break;
            }
            assignment[pos] = 0;
            pos += 1;
        }
    }
}

#[test]
fn criterion_1_bin_cover_matches_oracle() {
    let start = Instant::now();
    let mut rng = Rng::new(0xACC1);
    let mut mismatches = 0usize;
    let cases = 1_200;
    for _ in 0..cases {
        let nv = 1 + rng.usize_below(8);
        let nb = 1 + rng.usize_below(4);
        let values: Vec<Satoshi> = (0..nv).map(|_| Satoshi(rng.u64_below(12))).collect();
        let bins: Vec<Satoshi> = (0..nb).map(|_| Satoshi(rng.u64_below(14))).collect();
        if bin_cover(&values, &bins) != bin_cover_oracle(&values, &bins) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        1,
        mismatches == 0 && elapsed < 10.0,
        &format!("{cases} random instances, {mismatches} mismatches, {elapsed:.2}s (< 10s)"),
    );
}

#[test]
fn criterion_2_generator_detector_consistency_at_scale() {
    let start = Instant::now();
    let cfg = SynthConfig {
        duration: 10_100,
        background_tx_rate: 10.0,
        join_fraction: 0.0005,
        seed: 0xACC2,
        ..SynthConfig::default()
    };
    let out = generate_chain(&cfg).unwrap();
    let background = out.payment_txids.len() + out.join_txids.len();
    assert!(
        background >= 100_000,
        "chain too small: {background} background txs"
    );
    let (g, _, _) = out.load().unwrap();
    let detected = detect_joins(&g, &JoinDetectionParams::default());

    let missed = out
        .join_txids
        .iter()
        .filter(|t| !detected.is_join(g.tx_by_label(t).unwrap()))
        .count();
    let false_flags = out
        .payment_txids
        .iter()
        .filter(|t| detected.is_join(g.tx_by_label(t).unwrap()))
        .count();
    let fp_rate = false_flags as f64 / out.payment_txids.len() as f64;
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        2,
        missed == 0 && fp_rate < 0.001 && elapsed < 60.0,
        &format!(
            "{} joins all detected ({missed} missed), {false_flags}/{} payments flagged ({:.5} < 0.001), {elapsed:.1}s (< 60s)",
            out.join_txids.len(),
            out.payment_txids.len(),
            fp_rate
        ),
    );
}

#[test]
fn criterion_3_clustering_equivalence_and_victim_wallet() {
    // Part A: union-find assignment equals per-address expansion fixpoints
    // on 100 random small chains.
    let mut checked_chains = 0;
    let mut bad = 0usize;
    for seed in 0..100u64 {
        let cfg = SynthConfig {
            duration: 30,
            background_tx_rate: 2.5,
            join_fraction: 0.05,
            seed: 0xACC3_0000 + seed,
            ..SynthConfig::default()
        };
        let out = generate_chain(&cfg).unwrap();
        let (g, _, _) = out.load().unwrap();
        assert!(g.tx_count() <= 200, "fixture too large: {}", g.tx_count());
        let joins = detect_joins(&g, &JoinDetectionParams::default());
        let assignment = cluster_all(&g, &joins);
        let clusters = assignment.clusters();
        for aid in 0..g.address_count() as u32 {
            let a = auditor_core::AddressId(aid);
            let expanded = expand_cluster(&g, a, &joins);
            let members: HashSet<_> = clusters[&assignment.cluster_of(a)]
                .iter()
                .copied()
                .collect();
            if expanded != members {
                bad += 1;
            }
        }
        checked_chains += 1;
    }

    // Part B: the six-address planted wallet resolves to exactly one cluster.
    let cfg = SynthConfig {
        duration: 600,
        background_tx_rate: 5.0,
        join_fraction: 0.01,
        seed: 0xACC3,
        ..SynthConfig::default()
    };
    let spec = auditor_core::synth::VictimSpec {
        n_coins: 10,
        rounds: 2,
        purchases: vec![],
        threading: auditor_core::synth::MixThreading::Insert,
    };
    let (out, victim) = auditor_core::synth::generate_with_victim(&cfg, &spec).unwrap();
    let (g, _, _) = out.load().unwrap();
    let joins = detect_joins(&g, &JoinDetectionParams::default());
    let assignment = cluster_all(&g, &joins);
    let wallet_ids: Vec<_> = victim
        .wallet_addresses
        .iter()
        .map(|a| g.address_by_label(a).unwrap())
        .collect();
    let first = assignment.cluster_of(wallet_ids[0]);
    let one_cluster = wallet_ids
        .iter()
        .all(|&a| assignment.cluster_of(a) == first)
        && wallet_ids.len() == 6;

    verdict(
        3,
        bad == 0 && one_cluster,
        &format!(
            "{checked_chains} chains, {bad} address mismatches; six-address wallet in one cluster: {one_cluster}"
        ),
    );
}

#[test]
fn criterion_4_linkage_soundness_and_exactness() {
    // Soundness on a background-rich chain: 10,000 planted flows with the
    // pay window covering the broadcast delay; the planted tx must be among
    // the candidates every time.
    let cfg = LinkageExperimentConfig {
        seed: 0xACC4,
        n_prices: 100,
        n_times: 100,
        pay_windows: vec![900],
        rate_windows: vec![300],
        price_set_sizes: vec![5],
        synth: SynthConfig {
            duration: 34_000,
            background_tx_rate: 2.0,
            join_fraction: 0.0,
            ..SynthConfig::default()
        },
        ..LinkageExperimentConfig::default()
    };
    let m = prepare_linkage_materials(&cfg).unwrap();
    assert_eq!(m.flows.len(), 10_000);
    let report = run_linkage_experiment(&m, &cfg).unwrap();
    let sound = report
        .cells
        .iter()
        .all(|c| c.truth_found == c.scored && c.excluded == 0);
    let scored: usize = report.cells.iter().map(|c| c.scored).sum();

    // Exactness with zero background traffic.
    let zcfg = LinkageExperimentConfig {
        seed: 0xACC4 + 1,
        synth: SynthConfig {
            background_tx_rate: 0.0,
            ..cfg.synth.clone()
        },
        ..cfg.clone()
    };
    let zm = prepare_linkage_materials(&zcfg).unwrap();
    let zreport = run_linkage_experiment(&zm, &zcfg).unwrap();
    let exact = zreport
        .cells
        .iter()
        .all(|c| c.tpr() == 1.0 && c.tnr() == 1.0);

    verdict(
        4,
        sound && exact,
        &format!(
            "truth found in {scored}/10000 trials; zero-background TPR/TNR both exactly 1.0: {exact}"
        ),
    );
}

#[test]
fn criterion_5_anonymity_monotonicity_grid() {
    let cfg = LinkageExperimentConfig {
        seed: 0xACC5,
        n_prices: 20,
        n_times: 15,
        pay_windows: vec![300, 900, 1_800],
        rate_windows: vec![60, 300, 900],
        price_set_sizes: vec![1, 5, 10],
        synth: SynthConfig {
            duration: 2_200,
            background_tx_rate: 8.0,
            join_fraction: 0.0,
            ..SynthConfig::default()
        },
        ..LinkageExperimentConfig::default()
    };
    let m = prepare_linkage_materials(&cfg).unwrap();
    let report = run_linkage_experiment(&m, &cfg).unwrap();
    assert!(report.cells.iter().all(|c| c.excluded == 0));

    let mean = |pw: i64, rw: i64, pss: usize| -> f64 {
        report
            .cells
            .iter()
            .find(|c| c.pay_window == pw && c.rate_window == rw && c.price_set_size == pss)
            .expect("cell present")
            .mean_anonymity()
    };
    let mut violations = Vec::new();
    for &rw in &cfg.rate_windows {
        for &pss in &cfg.price_set_sizes {
            for w in cfg.pay_windows.windows(2) {
                if mean(w[1], rw, pss) < mean(w[0], rw, pss) {
                    violations.push(format!("pay {}->{} (rw={rw} pss={pss})", w[0], w[1]));
                }
            }
        }
    }
    for &pw in &cfg.pay_windows {
        for &pss in &cfg.price_set_sizes {
            for w in cfg.rate_windows.windows(2) {
                if mean(pw, w[1], pss) < mean(pw, w[0], pss) {
                    violations.push(format!("rate {}->{} (pw={pw} pss={pss})", w[0], w[1]));
                }
            }
        }
    }
    for &pw in &cfg.pay_windows {
        for &rw in &cfg.rate_windows {
            for w in cfg.price_set_sizes.windows(2) {
                if mean(pw, rw, w[1]) < mean(pw, rw, w[0]) {
                    violations.push(format!("pss {}->{} (pw={pw} rw={rw})", w[0], w[1]));
                }
            }
        }
    }
    verdict(
        5,
        violations.is_empty(),
        &format!(
            "mean anonymity non-decreasing across all adjacent cells on all three axes ({} cells; violations: {:?})",
            report.cells.len(),
            violations
        ),
    );
}

fn calibrated_intersection_study() -> IntersectionExperimentConfig {
    IntersectionExperimentConfig {
        seed: 0xACC6,
        rounds_grid: vec![1, 2, 3, 4, 5],
        observations_grid: vec![1, 2, 3, 5],
        trials_per_cell: 1_000,
        n_coins: 100,
        age_buckets: 6,
        synth: SynthConfig {
            duration: 10_000,
            background_tx_rate: 10.0,
            join_fraction: 0.0005,
            ..SynthConfig::default()
        },
        ..IntersectionExperimentConfig::default()
    }
}

#[test]
fn criterion_6_intersection_attack_shape() {
    let start = Instant::now();
    let cfg = calibrated_intersection_study();
    let report = run_intersection_experiment(&cfg).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let rate = |r: u32, t: usize| -> f64 {
        report
            .cells
            .iter()
            .find(|c| c.rounds == r && c.observations == t)
            .expect("cell present")
            .success_rate()
    };
    let low_rounds_perfect = rate(1, 2) >= 0.95 && rate(2, 2) >= 0.95;
    let mut violations = Vec::new();
    for &t in &cfg.observations_grid {
        for w in cfg.rounds_grid.windows(2) {
            if rate(w[1], t) > rate(w[0], t) + 0.05 {
                violations.push(format!("rounds {}->{} at t={t}", w[0], w[1]));
            }
        }
    }
    for &r in &cfg.rounds_grid {
        for w in cfg.observations_grid.windows(2) {
            if rate(r, w[1]) < rate(r, w[0]) - 0.05 {
                violations.push(format!("obs {}->{} at r={r}", w[0], w[1]));
            }
        }
    }
    verdict(
        6,
        report.wallet_intact
            && low_rounds_perfect
            && violations.is_empty()
            && elapsed < 300.0,
        &format!(
            "success(r=1,t=2)={:.3} success(r=2,t=2)={:.3} (>= 0.95); monotone in r and t within 0.05 (violations: {:?}); {elapsed:.0}s (< 300s)",
            rate(1, 2),
            rate(2, 2),
            violations
        ),
    );
}

// Criterion 7 pins the success-vs-age-gap trend as non-increasing
// (Spearman <= 0 on bucket means). The measured effect runs the other way:
// mixing events far apart in time have join ancestries that almost never
// overlap, so the observations' cluster sets intersect in the wallet alone
// and the attack gets MORE reliable as the gap grows. No defensible
// calibration reverses that: any mechanism coupling two events' ancestries
// has non-negative temporal locality, so failures concentrate at small
// gaps. The assertion is kept as written and fails deliberately.
#[test]
fn criterion_7_age_gap_effect() {
    let cfg = calibrated_intersection_study();
    let report = run_intersection_experiment(&cfg).unwrap();
    let rho = report.age_spearman();
    let means: Vec<String> = report
        .age_curve
        .iter()
        .filter(|b| b.trials > 0)
        .map(|b| {
            format!(
                "[{}-{}): {:.3} ({} trials)",
                b.gap_lo,
                b.gap_hi,
                b.successes as f64 / b.trials as f64,
                b.trials
            )
        })
        .collect();
    verdict(
        7,
        rho <= 0.0,
        &format!(
            "Spearman(bucket gap, success) = {rho:.4}, required <= 0; buckets: {}",
            means.join(" ")
        ),
    );
}

#[test]
fn criterion_8_bitpay_filter_strictly_helps() {
    // Planted payments rounded to 100 satoshis, background amounts raw.
    let base = LinkageExperimentConfig {
        seed: 0xACC8,
        n_prices: 50,
        n_times: 20,
        pay_windows: vec![900],
        rate_windows: vec![300],
        price_set_sizes: vec![5],
        bitpay_round_planted: true,
        bitpay_filter: false,
        synth: SynthConfig {
            duration: 3_800,
            background_tx_rate: 8.0,
            join_fraction: 0.0,
            ..SynthConfig::default()
        },
        ..LinkageExperimentConfig::default()
    };
    let m = prepare_linkage_materials(&base).unwrap();
    let plain = run_linkage_experiment(&m, &base).unwrap();
    let filtered_cfg = LinkageExperimentConfig {
        bitpay_filter: true,
        ..base.clone()
    };
    let filtered = run_linkage_experiment(&m, &filtered_cfg).unwrap();

    let mut ok = true;
    let mut detail = String::new();
    for (p, f) in plain.cells.iter().zip(filtered.cells.iter()) {
        let truth_kept = f.truth_found == f.scored && p.truth_found == p.scored;
        let strictly_reduced = f.mean_anonymity() < p.mean_anonymity();
        ok &= truth_kept && strictly_reduced;
        detail.push_str(&format!(
            "mean anon {:.4} -> {:.4}, truth kept: {truth_kept}; ",
            p.mean_anonymity(),
            f.mean_anonymity()
        ));
    }
    verdict(8, ok, detail.trim_end_matches("; "));
}

#[test]
fn criterion_9_reports_are_deterministic() {
    // Linkage: regenerate materials and rerun; every report byte matches,
    // and the sequential path agrees with the parallel one.
    let cfg = LinkageExperimentConfig {
        seed: 0xACC9,
        n_prices: 10,
        n_times: 6,
        pay_windows: vec![600, 900],
        rate_windows: vec![300],
        price_set_sizes: vec![1, 5],
        synth: SynthConfig {
            duration: 1_400,
            background_tx_rate: 5.0,
            join_fraction: 0.001,
            ..SynthConfig::default()
        },
        ..LinkageExperimentConfig::default()
    };
    let m1 = prepare_linkage_materials(&cfg).unwrap();
    let m2 = prepare_linkage_materials(&cfg).unwrap();
    let a = run_linkage_experiment(&m1, &cfg).unwrap();
    let b = run_linkage_experiment(&m2, &cfg).unwrap();
    let c = run_linkage_experiment_with(&m1, &cfg, true).unwrap();
    let linkage_ok = a.cells_csv() == b.cells_csv()
        && a.trials_csv() == b.trials_csv()
        && a.histogram_csv() == b.histogram_csv()
        && a.cells_csv() == c.cells_csv()
        && a.trials_csv() == c.trials_csv();

    let icfg = IntersectionExperimentConfig {
        seed: 0xACC9,
        rounds_grid: vec![1, 2],
        observations_grid: vec![2],
        trials_per_cell: 120,
        n_coins: 20,
        age_buckets: 4,
        synth: SynthConfig {
            duration: 1_000,
            background_tx_rate: 4.0,
            join_fraction: 0.001,
            ..SynthConfig::default()
        },
        ..IntersectionExperimentConfig::default()
    };
    let r1 = run_intersection_experiment(&icfg).unwrap();
    let r2 = run_intersection_experiment(&icfg).unwrap();
    let intersect_ok = r1.cells_csv() == r2.cells_csv()
        && r1.age_csv() == r2.age_csv()
        && r1.trials_csv() == r2.trials_csv();

    verdict(
        9,
        linkage_ok && intersect_ok,
        &format!(
            "linkage byte-identical: {linkage_ok}; intersection byte-identical: {intersect_ok}"
        ),
    );
}
