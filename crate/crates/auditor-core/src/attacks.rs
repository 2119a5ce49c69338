//! The two deanonymization attacks.
//!
//! Single-transaction linkage: given a fiat price set, a checkout time, and
//! the adversary's uncertainty windows, find the broadcast transactions whose
//! shape and value are consistent with the payment, then decide. Cluster
//! intersection: walk each observed mixed coin back through join
//! transactions, map the reachable coins to wallet clusters, and intersect
//! across observations.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::chain::{AddressKind, ChainGraph, CoinRef, Transaction, TxIdx};
use crate::cluster::{ClusterAssignment, ClusterId};
use crate::ingest::{fiat_to_sats, BroadcastLog, RateSeries};
use crate::joins::JoinSet;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkageFilters {
    /// Keep only transactions with exactly two outputs.
    pub two_outputs: bool,
    /// Keep only transactions whose outputs all pay regular addresses.
    pub regular_addresses_only: bool,
    /// Keep only transactions whose output addresses are all fresh.
    pub fresh_outputs: bool,
    /// Keep only transactions with some output divisible by 100 satoshis
    /// (the rounding payment processor's signature).
    pub bitpay_rounding: bool,
}

impl Default for LinkageFilters {
    fn default() -> Self {
        LinkageFilters {
            two_outputs: true,
            regular_addresses_only: true,
            fresh_outputs: true,
            bitpay_rounding: false,
        }
    }
}

/// The adversary's knowledge about one payment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkageQuery {
    /// Possible fiat totals in cents (cart price plus shipping variants).
    pub price_set: Vec<u64>,
    /// When the adversary saw checkout begin (unix seconds). Both the
    /// payment window and the exchange-rate window open here.
    pub checkout_time: i64,
    /// Payment-time uncertainty in seconds.
    pub pay_window: i64,
    /// Exchange-rate uncertainty in seconds.
    pub rate_window_len: i64,
    /// Value slack in satoshis when matching converted prices.
    pub match_tolerance: u64,
    pub filters: LinkageFilters,
}

impl LinkageQuery {
    pub fn new(price_set: Vec<u64>, checkout_time: i64) -> LinkageQuery {
        LinkageQuery {
            price_set,
            checkout_time,
            pay_window: 900,
            rate_window_len: 300,
            match_tolerance: 100,
            filters: LinkageFilters::default(),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.price_set.is_empty() {
            return Err(crate::Error::config("price_set must be non-empty"));
        }
        if self.pay_window < 0 || self.rate_window_len < 0 {
            return Err(crate::Error::config("windows must be non-negative"));
        }
        Ok(())
    }
}

/// Broadcast timestamps resolved against a chain: every transaction gets its
/// logged first-seen time, falling back to its block time, and the whole set
/// is indexed for window scans.
pub struct BroadcastView {
    times: Vec<i64>,
    /// Transactions sorted by (broadcast time, index).
    order: Vec<TxIdx>,
}

impl BroadcastView {
    pub fn new(g: &ChainGraph, log: &BroadcastLog) -> BroadcastView {
        let times: Vec<i64> = g.txs().iter().map(|t| log.time_of(g, t)).collect();
        let mut order: Vec<TxIdx> = g.txs().iter().map(|t| t.idx).collect();
        order.sort_by_key(|t| (times[t.0 as usize], *t));
        BroadcastView { times, order }
    }

    pub fn time_of(&self, t: TxIdx) -> i64 {
        self.times[t.0 as usize]
    }

    /// Transactions broadcast in `[start, end)`, ascending by time.
    pub fn in_window(&self, start: i64, end: i64) -> &[TxIdx] {
        let lo = self
            .order
            .partition_point(|t| self.times[t.0 as usize] < start);
        let hi = self
            .order
            .partition_point(|t| self.times[t.0 as usize] < end);
        &self.order[lo..hi]
    }
}

/// All candidate satoshi values for a query: every price in the set converted
/// at every rate the processor could have quoted.
fn conversion_targets(rates: &RateSeries, q: &LinkageQuery) -> Vec<u64> {
    let window = rates.rate_window(q.checkout_time, q.rate_window_len);
    let mut targets: Vec<u64> = Vec::with_capacity(window.len() * q.price_set.len());
    for &rate in &window {
        for &price in &q.price_set {
            targets.push(fiat_to_sats(price, rate).0);
        }
    }
    targets.sort_unstable();
    targets.dedup();
    targets
}

fn value_near_target(targets: &[u64], v: u64, tol: u64) -> bool {
    let i = targets.partition_point(|&t| t < v);
    if i < targets.len() && targets[i] - v <= tol {
        return true;
    }
    if i > 0 && v - targets[i - 1] <= tol {
        return true;
    }
    false
}

fn passes_filters(g: &ChainGraph, t: &Transaction, f: &LinkageFilters) -> bool {
    if f.two_outputs && t.outputs.len() != 2 {
        return false;
    }
    if f.regular_addresses_only
        && t.outputs
            .iter()
            .any(|o| g.address(o.addr).kind != AddressKind::Regular)
    {
        return false;
    }
    if f.fresh_outputs && t.outputs.iter().any(|o| !g.is_fresh_in(o.addr, t)) {
        return false;
    }
    if f.bitpay_rounding && !t.outputs.iter().any(|o| o.value.0 % 100 == 0) {
        return false;
    }
    true
}

/// Whether one transaction is consistent with the query: broadcast inside the
/// payment window, filters pass, and some output value sits within tolerance
/// of some converted price.
pub fn matches_query(
    g: &ChainGraph,
    bv: &BroadcastView,
    targets: &[u64],
    q: &LinkageQuery,
    t: &Transaction,
) -> bool {
    if t.coinbase {
        return false;
    }
    let bt = bv.time_of(t.idx);
    if bt < q.checkout_time || bt >= q.checkout_time + q.pay_window {
        return false;
    }
    if !passes_filters(g, t, &q.filters) {
        return false;
    }
    t.outputs
        .iter()
        .any(|o| value_near_target(targets, o.value.0, q.match_tolerance))
}

/// All broadcast transactions consistent with the query, sorted by index.
pub fn candidate_transactions(
    g: &ChainGraph,
    bv: &BroadcastView,
    rates: &RateSeries,
    q: &LinkageQuery,
) -> Vec<TxIdx> {
    let targets = conversion_targets(rates, q);
    let mut out: Vec<TxIdx> = bv
        .in_window(q.checkout_time, q.checkout_time + q.pay_window)
        .iter()
        .copied()
        .filter(|&ti| matches_query(g, bv, &targets, q, g.tx(ti)))
        .collect();
    out.sort_unstable();
    out
}

/// The adversary's verdict on one payment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Match(TxIdx),
    NoTransaction,
}

/// One candidate: it. Several: a uniformly random one. None: report absence.
pub fn adversary_decide(candidates: &[TxIdx], rng: &mut Rng) -> Decision {
    match candidates.len() {
        0 => Decision::NoTransaction,
        1 => Decision::Match(candidates[0]),
        n => Decision::Match(candidates[rng.usize_below(n)]),
    }
}

/// Anonymity-set size: candidates other than the payment itself, plus one
/// for the payment. Without a planted payment this is just the candidate
/// count (used for true-negative accounting).
pub fn anonymity_set_size(candidates: &[TxIdx], truth: Option<TxIdx>) -> usize {
    match truth {
        Some(t) => candidates.iter().filter(|&&c| c != t).count() + 1,
        None => candidates.len(),
    }
}

/// Query-level variant: run the candidate search and account for the planted
/// payment in one step.
pub fn anonymity_set_size_for_query(
    g: &ChainGraph,
    bv: &BroadcastView,
    rates: &RateSeries,
    q: &LinkageQuery,
    truth: Option<TxIdx>,
) -> usize {
    let candidates = candidate_transactions(g, bv, rates, q);
    anonymity_set_size(&candidates, truth)
}

/// Coins with a directed path to `c` of 1..=r hops through join
/// transactions; a coin emitted by a join has used one hop. r = 0 yields the
/// coin itself.
pub fn mixed_ancestry(g: &ChainGraph, joins: &JoinSet, c: CoinRef, r: u32) -> HashSet<CoinRef> {
    let mut found: HashSet<CoinRef> = HashSet::new();
    if r == 0 {
        found.insert(c);
        return found;
    }
    let mut frontier: Vec<CoinRef> = vec![c];
    for _ in 0..r {
        let mut next: Vec<CoinRef> = Vec::new();
        for coin in frontier {
            if !joins.is_join(coin.tx) {
                continue;
            }
            for inp in &g.tx(coin.tx).inputs {
                if found.insert(inp.coin) {
                    next.push(inp.coin);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    found
}

/// Outcome of the intersection attack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IntersectionOutcome {
    Unique(ClusterId),
    /// Empty intersection: the adversary's assumptions (same user, at most r
    /// rounds) cannot all hold.
    IncorrectAssumptions,
    /// More observations needed.
    Ambiguous(Vec<ClusterId>),
}

/// For each observed coin, collect the wallet clusters of every coin in its
/// r-hop join ancestry, then intersect across observations.
pub fn cluster_intersection(
    g: &ChainGraph,
    joins: &JoinSet,
    assignment: &ClusterAssignment,
    coins: &[CoinRef],
    r: u32,
) -> IntersectionOutcome {
    assert!(!coins.is_empty(), "at least one observed coin required");
    let cluster_sets: Vec<HashSet<ClusterId>> = coins
        .iter()
        .map(|&c| {
            mixed_ancestry(g, joins, c, r)
                .into_iter()
                .map(|x| assignment.cluster_of(g.coin_address(x)))
                .collect()
        })
        .collect();
    let mut common: Vec<ClusterId> = cluster_sets[0]
        .iter()
        .copied()
        .filter(|cl| cluster_sets[1..].iter().all(|s| s.contains(cl)))
        .collect();
    common.sort_unstable();
    match common.len() {
        0 => IntersectionOutcome::IncorrectAssumptions,
        1 => IntersectionOutcome::Unique(common[0]),
        _ => IntersectionOutcome::Ambiguous(common),
    }
}

/// Per-coin cluster set, exposed for the end-to-end combination logic.
pub fn ancestry_clusters(
    g: &ChainGraph,
    joins: &JoinSet,
    assignment: &ClusterAssignment,
    c: CoinRef,
    r: u32,
) -> HashSet<ClusterId> {
    mixed_ancestry(g, joins, c, r)
        .into_iter()
        .map(|x| assignment.cluster_of(g.coin_address(x)))
        .collect()
}

/// Cache of per-coin ancestry cluster sets for repeated intersections over
/// the same chain.
pub struct AncestryCache<'a> {
    g: &'a ChainGraph,
    joins: &'a JoinSet,
    assignment: &'a ClusterAssignment,
    r: u32,
    memo: HashMap<CoinRef, HashSet<ClusterId>>,
}

impl<'a> AncestryCache<'a> {
    pub fn new(
        g: &'a ChainGraph,
        joins: &'a JoinSet,
        assignment: &'a ClusterAssignment,
        r: u32,
    ) -> Self {
        AncestryCache {
            g,
            joins,
            assignment,
            r,
            memo: HashMap::new(),
        }
    }

    pub fn clusters(&mut self, c: CoinRef) -> &HashSet<ClusterId> {
        let (g, joins, assignment, r) = (self.g, self.joins, self.assignment, self.r);
        self.memo
            .entry(c)
            .or_insert_with(|| ancestry_clusters(g, joins, assignment, c, r))
    }

    /// Intersection over pre-resolved coins.
    pub fn intersect(&mut self, coins: &[CoinRef]) -> IntersectionOutcome {
        assert!(!coins.is_empty());
        let first: HashSet<ClusterId> = self.clusters(coins[0]).clone();
        let mut common: Vec<ClusterId> = first
            .into_iter()
            .filter(|cl| coins[1..].iter().all(|&c| self.clusters(c).contains(cl)))
            .collect();
        common.sort_unstable();
        match common.len() {
            0 => IntersectionOutcome::IncorrectAssumptions,
            1 => IntersectionOutcome::Unique(common[0]),
            _ => IntersectionOutcome::Ambiguous(common),
        }
    }
}
