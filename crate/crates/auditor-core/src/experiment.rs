//! Experiment harness: seeded, reproducible attack measurements over
//! synthetic chains, reported as plot-ready CSV plus a JSON run manifest.
//!
//! Three drivers: the payment-linkage study (TPR/TNR and anonymity-set
//! distributions across an uncertainty grid), the cluster-intersection study
//! (success rate per rounds-of-mixing and observations, plus the coin-age
//! curve), and the end-to-end combination of the two. Trials are independent
//! and run through the data-parallel helpers; every trial derives its own
//! RNG stream from the master seed, and aggregation is an ordered reduction,
//! so thread scheduling never changes a report byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attacks::{
    adversary_decide, anonymity_set_size, candidate_transactions, AncestryCache, BroadcastView,
    Decision, IntersectionOutcome, LinkageFilters, LinkageQuery,
};
use crate::chain::{ChainGraph, CoinRef, TxIdx};
use crate::cluster::{cluster_all, ClusterId};
use crate::error::{Error, Result};
use crate::ingest::{BroadcastLog, RateSeries};
use crate::joins::{detect_joins, JoinDetectionParams};
use crate::par;
use crate::rng::Rng;
use crate::synth::{
    generate_with_victim, MixThreading, PurchaseSpec, SynthConfig, SynthOutput, VictimRecord,
    VictimSpec,
};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties; 0 when either side
/// has no variance.
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("no NaN"));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let rx = ranks(xs);
    let ry = ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx).powi(2);
        vy += (ry[i] - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Run manifest written next to every report: enough to reproduce the run.
pub fn manifest_json<C: Serialize>(kind: &str, config: &C) -> String {
    #[derive(Serialize)]
    struct Manifest<'a, C> {
        kind: &'a str,
        tool_version: &'a str,
        config: &'a C,
    }
    serde_json::to_string_pretty(&Manifest {
        kind,
        tool_version: env!("CARGO_PKG_VERSION"),
        config,
    })
    .expect("manifest serializes")
}

/// Shipping deltas in canonical query order: zero first (the true delta),
/// then the others in configured order, deduplicated.
fn canonical_deltas(shipping_pool: &[u64]) -> Vec<u64> {
    let mut out = vec![0u64];
    for &d in shipping_pool {
        if d != 0 && !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

/// Stratified sorted timestamps over [lo, hi) with at least `gap` between
/// consecutive samples (gap must fit: (hi-lo)/count > gap).
fn stratified_times(rng: &mut Rng, lo: i64, hi: i64, count: usize, gap: i64) -> Result<Vec<i64>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let stride = (hi - lo) / count as i64;
    if stride <= gap {
        return Err(Error::config(format!(
            "window of {} s cannot hold {count} samples {gap} s apart",
            hi - lo
        )));
    }
    let jitter = stride - gap;
    Ok((0..count)
        .map(|i| lo + i as i64 * stride + rng.i64_range(0, jitter))
        .collect())
}

/// On-disk inputs for an experiment: a previously generated (or exported)
/// chain with its side logs and the planted ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataPaths {
    pub chain: std::path::PathBuf,
    pub trades: std::path::PathBuf,
    pub broadcasts: std::path::PathBuf,
    pub victim: std::path::PathBuf,
}

impl DataPaths {
    fn load(
        &self,
    ) -> Result<(
        ChainGraph,
        RateSeries,
        BroadcastLog,
        crate::synth::VictimRecord,
    )> {
        let graph = crate::ingest::load_chain(&self.chain)?;
        let rates = crate::ingest::load_trades(&self.trades)?;
        let log = crate::ingest::load_broadcasts(&self.broadcasts)?;
        let victim = crate::synth::VictimRecord::from_json(&crate::ingest::read_to_string(
            &self.victim,
        )?)?;
        Ok((graph, rates, log, victim))
    }
}

// ---------------------------------------------------------------------------
// Linkage experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkageExperimentConfig {
    pub seed: u64,
    /// Distinct prices and timestamps; flows = n_prices * n_times.
    pub n_prices: usize,
    pub n_times: usize,
    /// Uncertainty grid.
    pub pay_windows: Vec<i64>,
    pub rate_windows: Vec<i64>,
    pub price_set_sizes: Vec<usize>,
    pub match_tolerance: u64,
    /// Round planted payment amounts to 100 satoshis (the rounding
    /// processor's behavior).
    pub bitpay_round_planted: bool,
    /// Enable the divisible-by-100 candidate filter.
    pub bitpay_filter: bool,
    /// Load these files instead of generating a chain. The victim record's
    /// purchases become the flows; n_prices and n_times are ignored.
    pub data: Option<DataPaths>,
    pub synth: SynthConfig,
}

impl Default for LinkageExperimentConfig {
    fn default() -> Self {
        LinkageExperimentConfig {
            seed: 1,
            n_prices: 100,
            n_times: 100,
            pay_windows: vec![300, 900, 1_800],
            rate_windows: vec![300],
            price_set_sizes: vec![1, 5, 10],
            match_tolerance: 100,
            bitpay_round_planted: false,
            bitpay_filter: false,
            data: None,
            synth: SynthConfig {
                duration: 12_000,
                background_tx_rate: 4.0,
                ..SynthConfig::default()
            },
        }
    }
}

impl LinkageExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pay_windows.is_empty()
            || self.rate_windows.is_empty()
            || self.price_set_sizes.is_empty()
        {
            return Err(Error::config("uncertainty grids must be non-empty"));
        }
        if self.data.is_none() {
            if self.n_prices == 0 || self.n_times == 0 {
                return Err(Error::config("n_prices and n_times must be positive"));
            }
            if self.n_prices > self.synth.price_pool.len() {
                return Err(Error::config(format!(
                    "n_prices {} exceeds price pool size {}",
                    self.n_prices,
                    self.synth.price_pool.len()
                )));
            }
        }
        let deltas = canonical_deltas(&self.synth.shipping_pool);
        if let Some(&max_size) = self.price_set_sizes.iter().max() {
            if max_size == 0 || max_size > deltas.len() {
                return Err(Error::config(format!(
                    "price_set_sizes must lie in 1..={}",
                    deltas.len()
                )));
            }
        }
        Ok(())
    }
}

/// One payment flow: a planted purchase plus a paired no-payment checkout.
#[derive(Debug, Clone)]
pub struct Flow {
    pub price_cents: u64,
    pub checkout_time: i64,
    pub absent_time: i64,
    pub truth: TxIdx,
}

pub struct LinkageMaterials {
    pub graph: ChainGraph,
    pub rates: RateSeries,
    pub log: BroadcastLog,
    pub view: BroadcastView,
    pub victim: VictimRecord,
    pub flows: Vec<Flow>,
}

/// Build the experiment inputs: either load the configured files or
/// generate a chain and plant one purchase per flow. When generating,
/// planted and absent checkouts alternate on a stratified timeline far
/// enough apart that the largest pay window cannot leak a planted payment
/// into an absent trial of the same flow.
pub fn prepare_linkage_materials(cfg: &LinkageExperimentConfig) -> Result<LinkageMaterials> {
    cfg.validate()?;
    if let Some(paths) = &cfg.data {
        return load_linkage_materials(cfg, paths);
    }
    let n_flows = cfg.n_prices * cfg.n_times;
    let max_window = *cfg.pay_windows.iter().max().expect("grid non-empty");
    let gap = max_window.max(cfg.synth.block_interval) + 1;

    let mut time_rng = Rng::derive(cfg.seed, 0x74_696D);
    let lo = cfg.synth.block_time(12);
    let hi = cfg.synth.block_time(cfg.synth.duration.saturating_sub(3));
    let slots = stratified_times(&mut time_rng, lo, hi, n_flows * 2, gap)?;

    let purchases: Vec<PurchaseSpec> = (0..n_flows)
        .map(|f| PurchaseSpec {
            checkout_time: slots[f * 2],
            use_mixed: false,
            bitpay_round: cfg.bitpay_round_planted,
            price_index: Some(f % cfg.n_prices),
        })
        .collect();
    let spec = VictimSpec {
        n_coins: 0,
        rounds: 0,
        purchases,
        threading: MixThreading::Insert,
    };
    let synth = SynthConfig {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let (out, victim) = generate_with_victim(&synth, &spec)?;
    let (graph, rates, log) = out.load()?;
    let view = BroadcastView::new(&graph, &log);

    let flows: Vec<Flow> = victim
        .purchases
        .iter()
        .enumerate()
        .map(|(f, p)| Flow {
            price_cents: p.price_cents,
            checkout_time: p.checkout_time,
            absent_time: slots[f * 2 + 1],
            truth: graph.tx_by_label(&p.txid).expect("planted tx present"),
        })
        .collect();

    Ok(LinkageMaterials {
        graph,
        rates,
        log,
        view,
        victim,
        flows,
    })
}

/// Loaded-chain variant: flows come from the victim record's purchases, and
/// each flow's no-payment checkout is placed right after its own pay window
/// (which can overlap other activity on a busy chain; the true-negative rate
/// then measures exactly that).
fn load_linkage_materials(
    cfg: &LinkageExperimentConfig,
    paths: &DataPaths,
) -> Result<LinkageMaterials> {
    let (graph, rates, log, victim) = paths.load()?;
    if victim.purchases.is_empty() {
        return Err(Error::config(
            "victim record has no purchases to use as flows",
        ));
    }
    let max_window = *cfg.pay_windows.iter().max().expect("grid non-empty");
    let view = BroadcastView::new(&graph, &log);
    let flows: Vec<Flow> = victim
        .purchases
        .iter()
        .map(|p| {
            let truth = graph.tx_by_label(&p.txid).ok_or_else(|| {
                Error::config(format!("purchase {} not present in the chain", p.txid))
            })?;
            Ok(Flow {
                price_cents: p.price_cents,
                checkout_time: p.checkout_time,
                absent_time: p.checkout_time + max_window + 1,
                truth,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LinkageMaterials {
        graph,
        rates,
        log,
        view,
        victim,
        flows,
    })
}

/// One scored trial, kept for the raw per-trial log.
#[derive(Debug, Clone)]
pub struct LinkageTrial {
    pub cell: usize,
    pub flow: usize,
    pub completed: bool,
    pub excluded: bool,
    pub truth_found: bool,
    pub correct: bool,
    pub anonymity: usize,
}

#[derive(Debug, Clone)]
pub struct LinkageCell {
    pub pay_window: i64,
    pub rate_window: i64,
    pub price_set_size: usize,
    /// Scored completed-payment trials.
    pub scored: usize,
    /// Scored no-payment trials.
    pub scored_absent: usize,
    pub excluded: usize,
    pub true_positives: usize,
    pub true_negatives: usize,
    pub truth_found: usize,
    pub anonymity_histogram: BTreeMap<usize, u64>,
    pub anonymity_sum: u64,
}

impl LinkageCell {
    pub fn tpr(&self) -> f64 {
        self.true_positives as f64 / self.scored as f64
    }

    pub fn tnr(&self) -> f64 {
        self.true_negatives as f64 / self.scored_absent as f64
    }

    pub fn mean_anonymity(&self) -> f64 {
        self.anonymity_sum as f64 / self.scored as f64
    }
}

pub struct LinkageReport {
    pub cells: Vec<LinkageCell>,
    pub trials: Vec<LinkageTrial>,
}

pub fn run_linkage_experiment(
    m: &LinkageMaterials,
    cfg: &LinkageExperimentConfig,
) -> Result<LinkageReport> {
    run_linkage_experiment_with(m, cfg, false)
}

/// `sequential` forces the always-sequential path (used to check that both
/// paths agree and to bench them against each other).
pub fn run_linkage_experiment_with(
    m: &LinkageMaterials,
    cfg: &LinkageExperimentConfig,
    sequential: bool,
) -> Result<LinkageReport> {
    cfg.validate()?;
    let deltas = canonical_deltas(&cfg.synth.shipping_pool);
    let filters = LinkageFilters {
        bitpay_rounding: cfg.bitpay_filter,
        ..LinkageFilters::default()
    };

    let mut grid: Vec<(i64, i64, usize)> = Vec::new();
    for &pw in &cfg.pay_windows {
        for &rw in &cfg.rate_windows {
            for &pss in &cfg.price_set_sizes {
                grid.push((pw, rw, pss));
            }
        }
    }

    let mut cells = Vec::with_capacity(grid.len());
    let mut trials = Vec::with_capacity(grid.len() * m.flows.len());
    for (cell_idx, &(pay_window, rate_window, price_set_size)) in grid.iter().enumerate() {
        let run_flow = |f: usize| -> LinkageTrial {
            let flow = &m.flows[f];
            let price_set: Vec<u64> = deltas[..price_set_size]
                .iter()
                .map(|d| flow.price_cents + d)
                .collect();
            let completed_q = LinkageQuery {
                price_set: price_set.clone(),
                checkout_time: flow.checkout_time,
                pay_window,
                rate_window_len: rate_window,
                match_tolerance: cfg.match_tolerance,
                filters,
            };
            let rate_coverage = !m
                .rates
                .rate_window(flow.checkout_time, rate_window)
                .is_empty();
            if !rate_coverage {
                return LinkageTrial {
                    cell: cell_idx,
                    flow: f,
                    completed: true,
                    excluded: true,
                    truth_found: false,
                    correct: false,
                    anonymity: 0,
                };
            }
            let candidates = candidate_transactions(&m.graph, &m.view, &m.rates, &completed_q);
            let mut rng = Rng::derive(cfg.seed, (cell_idx as u64) << 32 | (f as u64) << 1);
            let decision = adversary_decide(&candidates, &mut rng);
            LinkageTrial {
                cell: cell_idx,
                flow: f,
                completed: true,
                excluded: false,
                truth_found: candidates.contains(&flow.truth),
                correct: decision == Decision::Match(flow.truth),
                anonymity: anonymity_set_size(&candidates, Some(flow.truth)),
            }
        };
        let run_absent = |f: usize| -> LinkageTrial {
            let flow = &m.flows[f];
            let price_set: Vec<u64> = deltas[..price_set_size]
                .iter()
                .map(|d| flow.price_cents + d)
                .collect();
            let q = LinkageQuery {
                price_set,
                checkout_time: flow.absent_time,
                pay_window,
                rate_window_len: rate_window,
                match_tolerance: cfg.match_tolerance,
                filters,
            };
            if m.rates
                .rate_window(flow.absent_time, rate_window)
                .is_empty()
            {
                return LinkageTrial {
                    cell: cell_idx,
                    flow: f,
                    completed: false,
                    excluded: true,
                    truth_found: false,
                    correct: false,
                    anonymity: 0,
                };
            }
            let candidates = candidate_transactions(&m.graph, &m.view, &m.rates, &q);
            let mut rng = Rng::derive(cfg.seed, (cell_idx as u64) << 32 | (f as u64) << 1 | 1);
            let decision = adversary_decide(&candidates, &mut rng);
            LinkageTrial {
                cell: cell_idx,
                flow: f,
                completed: false,
                excluded: false,
                truth_found: false,
                correct: decision == Decision::NoTransaction,
                anonymity: anonymity_set_size(&candidates, None),
            }
        };

        let completed: Vec<LinkageTrial> = if sequential {
            par::map_range_seq(m.flows.len(), run_flow)
        } else {
            par::map_range(m.flows.len(), run_flow)
        };
        let absent: Vec<LinkageTrial> = if sequential {
            par::map_range_seq(m.flows.len(), run_absent)
        } else {
            par::map_range(m.flows.len(), run_absent)
        };

        let mut cell = LinkageCell {
            pay_window,
            rate_window,
            price_set_size,
            scored: 0,
            scored_absent: 0,
            excluded: 0,
            true_positives: 0,
            true_negatives: 0,
            truth_found: 0,
            anonymity_histogram: BTreeMap::new(),
            anonymity_sum: 0,
        };
        for t in completed.iter() {
            if t.excluded {
                cell.excluded += 1;
                continue;
            }
            cell.scored += 1;
            cell.true_positives += t.correct as usize;
            cell.truth_found += t.truth_found as usize;
            *cell.anonymity_histogram.entry(t.anonymity).or_insert(0) += 1;
            cell.anonymity_sum += t.anonymity as u64;
        }
        for t in absent.iter() {
            if t.excluded {
                cell.excluded += 1;
                continue;
            }
            cell.scored_absent += 1;
            cell.true_negatives += t.correct as usize;
        }
        cells.push(cell);
        trials.extend(completed);
        trials.extend(absent);
    }
    Ok(LinkageReport { cells, trials })
}

impl LinkageReport {
    pub fn cells_csv(&self) -> String {
        let mut s = String::from(
            "pay_window,rate_window,price_set_size,scored,scored_absent,excluded,tpr,tnr,truth_found_rate,mean_anonymity\n",
        );
        for c in &self.cells {
            writeln!(
                s,
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                c.pay_window,
                c.rate_window,
                c.price_set_size,
                c.scored,
                c.scored_absent,
                c.excluded,
                c.tpr(),
                c.tnr(),
                c.truth_found as f64 / c.scored as f64,
                c.mean_anonymity()
            )
            .expect("string write");
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("pay_window,rate_window,price_set_size,anonymity_size,count\n");
        for c in &self.cells {
            for (&size, &count) in &c.anonymity_histogram {
                writeln!(
                    s,
                    "{},{},{},{},{}",
                    c.pay_window, c.rate_window, c.price_set_size, size, count
                )
                .expect("string write");
            }
        }
        s
    }

    pub fn trials_csv(&self) -> String {
        let mut s = String::from("cell,flow,kind,excluded,truth_found,correct,anonymity_size\n");
        for t in &self.trials {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                t.cell,
                t.flow,
                if t.completed { "completed" } else { "absent" },
                t.excluded as u8,
                t.truth_found as u8,
                t.correct as u8,
                t.anonymity
            )
            .expect("string write");
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Intersection experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IntersectionExperimentConfig {
    pub seed: u64,
    pub rounds_grid: Vec<u32>,
    pub observations_grid: Vec<usize>,
    pub trials_per_cell: usize,
    /// Mixed coins planted per chain.
    pub n_coins: usize,
    /// Fixed-width age-gap buckets for the coin-age curve.
    pub age_buckets: usize,
    /// Adversary's assumed rounds = true rounds + offset (normally 0; a
    /// negative offset exercises the incorrect-assumptions outcome).
    pub assumed_rounds_offset: i32,
    pub threading: MixThreading,
    pub synth: SynthConfig,
}

impl Default for IntersectionExperimentConfig {
    fn default() -> Self {
        IntersectionExperimentConfig {
            seed: 1,
            rounds_grid: vec![1, 2, 3, 4, 5],
            observations_grid: vec![1, 2, 3, 5],
            trials_per_cell: 1_000,
            n_coins: 100,
            age_buckets: 6,
            assumed_rounds_offset: 0,
            threading: MixThreading::Insert,
            synth: SynthConfig {
                duration: 10_000,
                background_tx_rate: 10.0,
                join_fraction: 0.0005,
                ..SynthConfig::default()
            },
        }
    }
}

impl IntersectionExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds_grid.is_empty() || self.observations_grid.is_empty() {
            return Err(Error::config("grids must be non-empty"));
        }
        if self.trials_per_cell == 0 || self.n_coins == 0 {
            return Err(Error::config(
                "trials_per_cell and n_coins must be positive",
            ));
        }
        if self
            .observations_grid
            .iter()
            .any(|&t| t == 0 || t > self.n_coins)
        {
            return Err(Error::config(format!(
                "observations must lie in 1..={}",
                self.n_coins
            )));
        }
        if self.age_buckets == 0 {
            return Err(Error::config("age_buckets must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IntersectionCell {
    pub rounds: u32,
    pub observations: usize,
    pub infeasible: bool,
    pub trials: usize,
    pub successes: usize,
    pub unique_other: usize,
    pub ambiguous: usize,
    pub incorrect: usize,
}

impl IntersectionCell {
    pub fn success_rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgeBucket {
    pub gap_lo: u32,
    pub gap_hi: u32,
    pub trials: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialOutcome {
    /// Unique intersection naming the victim's wallet cluster.
    UniqueTrue,
    /// Unique intersection naming some other cluster.
    UniqueOther,
    Ambiguous,
    IncorrectAssumptions,
}

#[derive(Debug, Clone, Copy)]
pub struct IntersectionTrial {
    pub rounds: u32,
    pub observations: usize,
    pub trial: usize,
    pub outcome: TrialOutcome,
    pub max_age_gap: u32,
}

impl IntersectionTrial {
    pub fn success(&self) -> bool {
        self.outcome == TrialOutcome::UniqueTrue
    }
}

pub struct IntersectionReport {
    pub cells: Vec<IntersectionCell>,
    /// Success bucketed by max pairwise mix-age gap, measured at the largest
    /// configured rounds with two observations.
    pub age_curve: Vec<AgeBucket>,
    pub age_curve_rounds: u32,
    pub trials: Vec<IntersectionTrial>,
    /// Whether the planted six-address wallet resolved to one cluster on
    /// every per-rounds chain.
    pub wallet_intact: bool,
}

pub fn run_intersection_experiment(
    cfg: &IntersectionExperimentConfig,
) -> Result<IntersectionReport> {
    run_intersection_experiment_with(cfg, false)
}

pub fn run_intersection_experiment_with(
    cfg: &IntersectionExperimentConfig,
    sequential: bool,
) -> Result<IntersectionReport> {
    cfg.validate()?;
    let mut cells = Vec::new();
    let mut all_trials = Vec::new();
    let mut wallet_intact = true;
    let age_rounds = *cfg.rounds_grid.iter().max().expect("grid non-empty");
    let mut age_trials: Vec<(u32, bool)> = Vec::new();

    for &rounds in &cfg.rounds_grid {
        let synth = SynthConfig {
            seed: cfg.seed.wrapping_add(rounds as u64),
            ..cfg.synth.clone()
        };
        let spec = VictimSpec {
            n_coins: cfg.n_coins,
            rounds,
            purchases: vec![],
            threading: cfg.threading,
        };
        let planted = generate_with_victim(&synth, &spec);
        let (out, victim) = match planted {
            Ok(v) => v,
            Err(e) if e.is_config() => {
                for &observations in &cfg.observations_grid {
                    cells.push(IntersectionCell {
                        rounds,
                        observations,
                        infeasible: true,
                        trials: 0,
                        successes: 0,
                        unique_other: 0,
                        ambiguous: 0,
                        incorrect: 0,
                    });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let (graph, _rates, _log) = out.load()?;
        let joins = detect_joins(&graph, &JoinDetectionParams::default());
        let assignment = cluster_all(&graph, &joins);

        // Ground-truth cluster of the wallet.
        let wallet_ids: Vec<_> = victim
            .wallet_addresses
            .iter()
            .map(|a| graph.address_by_label(a).expect("wallet address present"))
            .collect();
        let true_cluster = assignment.cluster_of(wallet_ids[0]);
        if !wallet_ids
            .iter()
            .all(|&a| assignment.cluster_of(a) == true_cluster)
        {
            wallet_intact = false;
        }

        let coins: Vec<CoinRef> = victim
            .mixed_coins
            .iter()
            .map(|mc| CoinRef {
                tx: graph.tx_by_label(&mc.txid).expect("mixed coin present"),
                vout: mc.vout,
            })
            .collect();
        let heights: Vec<u32> = victim
            .mixed_coins
            .iter()
            .map(|mc| mc.completion_height)
            .collect();
        let assumed = rounds.saturating_add_signed(cfg.assumed_rounds_offset);

        // Ancestry cluster sets are shared across trials of a cell; resolve
        // them once per coin up front (in parallel when enabled).
        let resolve = |i: usize| -> std::collections::HashSet<ClusterId> {
            crate::attacks::ancestry_clusters(&graph, &joins, &assignment, coins[i], assumed)
        };
        let resolved: Vec<std::collections::HashSet<ClusterId>> = if sequential {
            par::map_range_seq(coins.len(), resolve)
        } else {
            par::map_range(coins.len(), resolve)
        };

        for &observations in &cfg.observations_grid {
            let run_trial = |trial: usize| -> IntersectionTrial {
                let mut rng = Rng::derive(
                    cfg.seed,
                    0x696E_7400u64
                        ^ (rounds as u64) << 40
                        ^ (observations as u64) << 24
                        ^ trial as u64,
                );
                let picks = rng.sample_indices(coins.len(), observations);
                let mut common: Vec<ClusterId> = resolved[picks[0]]
                    .iter()
                    .copied()
                    .filter(|cl| picks[1..].iter().all(|&p| resolved[p].contains(cl)))
                    .collect();
                common.sort_unstable();
                let outcome = match common.len() {
                    0 => TrialOutcome::IncorrectAssumptions,
                    1 if common[0] == true_cluster => TrialOutcome::UniqueTrue,
                    1 => TrialOutcome::UniqueOther,
                    _ => TrialOutcome::Ambiguous,
                };
                let mut max_age_gap = 0u32;
                for &a in &picks {
                    for &b in &picks {
                        max_age_gap = max_age_gap.max(heights[a].abs_diff(heights[b]));
                    }
                }
                IntersectionTrial {
                    rounds,
                    observations,
                    trial,
                    outcome,
                    max_age_gap,
                }
            };
            let trials: Vec<IntersectionTrial> = if sequential {
                par::map_range_seq(cfg.trials_per_cell, run_trial)
            } else {
                par::map_range(cfg.trials_per_cell, run_trial)
            };

            let mut cell = IntersectionCell {
                rounds,
                observations,
                infeasible: false,
                trials: trials.len(),
                successes: 0,
                unique_other: 0,
                ambiguous: 0,
                incorrect: 0,
            };
            for t in &trials {
                match t.outcome {
                    TrialOutcome::UniqueTrue => cell.successes += 1,
                    TrialOutcome::UniqueOther => cell.unique_other += 1,
                    TrialOutcome::Ambiguous => cell.ambiguous += 1,
                    TrialOutcome::IncorrectAssumptions => cell.incorrect += 1,
                }
            }
            if rounds == age_rounds && observations == 2 {
                age_trials.extend(trials.iter().map(|t| (t.max_age_gap, t.success())));
            }
            all_trials.extend(trials);
            cells.push(cell);
        }
    }

    // Age curve: fixed-width buckets over the observed gap range.
    let width = (cfg.synth.duration / cfg.age_buckets as u32).max(1);
    let mut age_curve: Vec<AgeBucket> = (0..cfg.age_buckets)
        .map(|b| AgeBucket {
            gap_lo: b as u32 * width,
            gap_hi: (b as u32 + 1) * width,
            trials: 0,
            successes: 0,
        })
        .collect();
    for (gap, success) in age_trials {
        let b = ((gap / width) as usize).min(cfg.age_buckets - 1);
        age_curve[b].trials += 1;
        age_curve[b].successes += success as usize;
    }

    Ok(IntersectionReport {
        cells,
        age_curve,
        age_curve_rounds: age_rounds,
        trials: all_trials,
        wallet_intact,
    })
}

impl IntersectionReport {
    pub fn cells_csv(&self) -> String {
        let mut s = String::from(
            "rounds,observations,infeasible,trials,successes,unique_other,ambiguous,incorrect,success_rate\n",
        );
        for c in &self.cells {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{:.6}",
                c.rounds,
                c.observations,
                c.infeasible as u8,
                c.trials,
                c.successes,
                c.unique_other,
                c.ambiguous,
                c.incorrect,
                c.success_rate()
            )
            .expect("string write");
        }
        s
    }

    pub fn age_csv(&self) -> String {
        let mut s = String::from("gap_lo,gap_hi,trials,successes,success_rate\n");
        for b in &self.age_curve {
            let rate = if b.trials == 0 {
                0.0
            } else {
                b.successes as f64 / b.trials as f64
            };
            writeln!(
                s,
                "{},{},{},{},{:.6}",
                b.gap_lo, b.gap_hi, b.trials, b.successes, rate
            )
            .expect("string write");
        }
        s
    }

    pub fn trials_csv(&self) -> String {
        let mut s = String::from("rounds,observations,trial,outcome,max_age_gap\n");
        for t in &self.trials {
            let label = match t.outcome {
                TrialOutcome::UniqueTrue => "unique_true",
                TrialOutcome::UniqueOther => "unique_other",
                TrialOutcome::Ambiguous => "ambiguous",
                TrialOutcome::IncorrectAssumptions => "incorrect",
            };
            writeln!(
                s,
                "{},{},{},{},{}",
                t.rounds, t.observations, t.trial, label, t.max_age_gap
            )
            .expect("string write");
        }
        s
    }

    /// Spearman correlation of bucket success means against gap, over
    /// non-empty buckets.
    pub fn age_spearman(&self) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .age_curve
            .iter()
            .filter(|b| b.trials > 0)
            .map(|b| (b.gap_lo as f64, b.successes as f64 / b.trials as f64))
            .collect();
        let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
        spearman_rho(&xs, &ys)
    }
}

// ---------------------------------------------------------------------------
// End-to-end experiment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EndToEndConfig {
    pub seed: u64,
    pub rounds: u32,
    pub n_coins: usize,
    pub n_purchases: usize,
    pub pay_window: i64,
    pub rate_window: i64,
    pub price_set_size: usize,
    pub match_tolerance: u64,
    pub synth: SynthConfig,
}

impl Default for EndToEndConfig {
    fn default() -> Self {
        EndToEndConfig {
            seed: 1,
            rounds: 2,
            n_coins: 12,
            n_purchases: 8,
            pay_window: 900,
            rate_window: 300,
            price_set_size: 5,
            match_tolerance: 100,
            synth: SynthConfig {
                duration: 4_000,
                background_tx_rate: 6.0,
                join_fraction: 0.002,
                ..SynthConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub first: usize,
    pub second: usize,
    pub candidates_first: usize,
    pub candidates_second: usize,
    pub unique_combos: usize,
    pub nonempty_other_combos: usize,
    pub output_cluster: Option<ClusterId>,
    pub correct: bool,
}

pub struct EndToEndReport {
    pub pairs: Vec<PairOutcome>,
    pub successes: usize,
    pub abstentions: usize,
}

/// Plant mixed-coin purchases, link each pair of purchases independently,
/// then intersect every combination of their candidate transactions' input
/// coins. The cluster is output only when exactly one combination yields a
/// unique cluster and every other combination yields an empty intersection.
pub fn run_end_to_end(cfg: &EndToEndConfig) -> Result<EndToEndReport> {
    if cfg.n_purchases < 2 {
        return Err(Error::config("need at least two purchases to form pairs"));
    }
    if cfg.n_purchases > cfg.n_coins {
        return Err(Error::config("n_purchases cannot exceed n_coins"));
    }
    let gap = cfg.pay_window.max(cfg.synth.block_interval) + 1;
    let mut time_rng = Rng::derive(cfg.seed, 0x653265);
    // Leave room for mixing to complete: start purchases halfway.
    let lo = cfg.synth.block_time(cfg.synth.duration / 2);
    let hi = cfg.synth.block_time(cfg.synth.duration.saturating_sub(3));
    let times = stratified_times(&mut time_rng, lo, hi, cfg.n_purchases, gap)?;
    let purchases: Vec<PurchaseSpec> = times
        .iter()
        .map(|&t| PurchaseSpec {
            checkout_time: t,
            use_mixed: true,
            bitpay_round: false,
            price_index: None,
        })
        .collect();
    let spec = VictimSpec {
        n_coins: cfg.n_coins,
        rounds: cfg.rounds,
        purchases,
        threading: MixThreading::Insert,
    };
    let synth = SynthConfig {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let (out, victim) = generate_with_victim(&synth, &spec)?;
    let (graph, rates, log) = out.load()?;
    let view = BroadcastView::new(&graph, &log);
    let joins = detect_joins(&graph, &JoinDetectionParams::default());
    let assignment = cluster_all(&graph, &joins);
    let true_cluster = assignment.cluster_of(
        graph
            .address_by_label(&victim.wallet_addresses[0])
            .expect("wallet address"),
    );
    let deltas = canonical_deltas(&cfg.synth.shipping_pool);

    let candidate_sets: Vec<Vec<TxIdx>> = victim
        .purchases
        .iter()
        .map(|p| {
            let price_set: Vec<u64> = deltas[..cfg.price_set_size.min(deltas.len())]
                .iter()
                .map(|d| p.price_cents + d)
                .collect();
            let q = LinkageQuery {
                price_set,
                checkout_time: p.checkout_time,
                pay_window: cfg.pay_window,
                rate_window_len: cfg.rate_window,
                match_tolerance: cfg.match_tolerance,
                filters: LinkageFilters::default(),
            };
            candidate_transactions(&graph, &view, &rates, &q)
        })
        .collect();

    let mut cache = AncestryCache::new(&graph, &joins, &assignment, cfg.rounds);
    let mut pairs = Vec::new();
    let mut successes = 0;
    let mut abstentions = 0;
    for i in 0..victim.purchases.len() {
        for j in (i + 1)..victim.purchases.len() {
            let (output, unique_combos, nonempty_other) =
                combine_candidate_pair(&graph, &mut cache, &candidate_sets[i], &candidate_sets[j]);
            let correct = output == Some(true_cluster);
            if correct {
                successes += 1;
            }
            if output.is_none() {
                abstentions += 1;
            }
            pairs.push(PairOutcome {
                first: i,
                second: j,
                candidates_first: candidate_sets[i].len(),
                candidates_second: candidate_sets[j].len(),
                unique_combos,
                nonempty_other_combos: nonempty_other,
                output_cluster: output,
                correct,
            });
        }
    }
    Ok(EndToEndReport {
        pairs,
        successes,
        abstentions,
    })
}

/// Intersect every combination of two candidate sets' input coins. Returns
/// the output cluster (only when exactly one combination is unique and all
/// others are empty), the count of unique combinations, and the count of
/// non-unique non-empty combinations.
pub fn combine_candidate_pair(
    graph: &ChainGraph,
    cache: &mut AncestryCache<'_>,
    set_a: &[TxIdx],
    set_b: &[TxIdx],
) -> (Option<ClusterId>, usize, usize) {
    let mut unique_outputs: Vec<ClusterId> = Vec::new();
    let mut nonempty_other = 0usize;
    for &a in set_a {
        for &b in set_b {
            let mut coins: Vec<CoinRef> = graph
                .tx(a)
                .inputs
                .iter()
                .chain(graph.tx(b).inputs.iter())
                .map(|inp| inp.coin)
                .collect();
            coins.sort_unstable();
            coins.dedup();
            match cache.intersect(&coins) {
                IntersectionOutcome::Unique(c) => unique_outputs.push(c),
                IntersectionOutcome::IncorrectAssumptions => {}
                IntersectionOutcome::Ambiguous(_) => nonempty_other += 1,
            }
        }
    }
    let output = if unique_outputs.len() == 1 && nonempty_other == 0 {
        Some(unique_outputs[0])
    } else {
        None
    };
    (output, unique_outputs.len(), nonempty_other)
}

impl EndToEndReport {
    pub fn pairs_csv(&self) -> String {
        let mut s = String::from(
            "first,second,candidates_first,candidates_second,unique_combos,nonempty_other,output,correct\n",
        );
        for p in &self.pairs {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                p.first,
                p.second,
                p.candidates_first,
                p.candidates_second,
                p.unique_combos,
                p.nonempty_other_combos,
                p.output_cluster
                    .map(|c| c.0.to_string())
                    .unwrap_or_else(|| "abstain".into()),
                p.correct as u8
            )
            .expect("string write");
        }
        s
    }
}

/// Convenience: generate, load, and index a chain for ad-hoc CLI queries.
pub fn load_materials(
    out: &SynthOutput,
) -> Result<(ChainGraph, RateSeries, BroadcastLog, BroadcastView)> {
    let (graph, rates, log) = out.load()?;
    let view = BroadcastView::new(&graph, &log);
    Ok((graph, rates, log, view))
}
