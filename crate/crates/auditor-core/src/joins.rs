//! JoinMarket-style CoinJoin identification.
//!
//! A join with n participants pays n equal-valued outputs (the mix
//! denomination) plus up to n change outputs; each participant's inputs must
//! cover their own outputs net of the maximum plausible liquidity fee. The
//! structural checks are cheap; the expensive part is deciding whether the
//! per-address input sums can cover the per-participant bins, a variable-size
//! bin-covering problem solved here by branch and bound over minimal covers
//! with failure memoization.

use std::collections::{HashMap, HashSet};

use crate::chain::{ChainGraph, Satoshi, Transaction, TxIdx};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinDetectionParams {
    /// Transactions with more inputs are classified as non-joins outright.
    pub max_inputs: usize,
    /// Lower bound of the liquidity-fee allowance, in satoshis.
    pub fee_floor: Satoshi,
    /// Proportional part of the fee allowance, as a rational of the output
    /// denomination.
    pub fee_rate_num: u64,
    pub fee_rate_den: u64,
}

impl Default for JoinDetectionParams {
    fn default() -> Self {
        JoinDetectionParams {
            max_inputs: 17,
            fee_floor: Satoshi(10_000),
            fee_rate_num: 1,
            fee_rate_den: 100,
        }
    }
}

/// Maximum fee a liquidity provider might have charged on denomination `v`:
/// the floor or the proportional rate, whichever is greater.
pub fn max_fee(v: Satoshi, p: &JoinDetectionParams) -> Satoshi {
    let proportional = (v.0 as u128 * p.fee_rate_num as u128 / p.fee_rate_den as u128) as u64;
    Satoshi(proportional.max(p.fee_floor.0))
}

/// Decide whether pairwise-disjoint sub-multisets of `values` can be chosen,
/// one per bin, with each group's sum at least the bin's demand.
///
/// Branch and bound: bins are processed largest-first, groups are enumerated
/// as inclusion-minimal covers only (a cover with spare elements never beats
/// returning those elements to the pool), identical values are
/// deduplicated per branch level, and failed `(bin, available-set)` states are
/// memoized. Exponential in the worst case, as the problem demands, but fast
/// for realistic input counts.
pub fn bin_cover(values: &[Satoshi], bins: &[Satoshi]) -> bool {
    assert!(!bins.is_empty(), "at least one bin required");
    assert!(values.len() <= 32, "bin_cover supports at most 32 values");
    let mut vals: Vec<u64> = values.iter().map(|s| s.0).collect();
    vals.sort_unstable_by(|a, b| b.cmp(a));
    let mut demands: Vec<u64> = bins.iter().map(|s| s.0).collect();
    demands.sort_unstable_by(|a, b| b.cmp(a));

    let total: u128 = vals.iter().map(|&v| v as u128).sum();
    let needed: u128 = demands.iter().map(|&b| b as u128).sum();
    if total < needed {
        return false;
    }

    // suffix_need[i] = demands[i..] total, for the availability prune.
    let mut suffix_need = vec![0u128; demands.len() + 1];
    for i in (0..demands.len()).rev() {
        suffix_need[i] = suffix_need[i + 1] + demands[i] as u128;
    }

    let mut failed: HashSet<(usize, u32)> = HashSet::new();
    cover_from(&vals, &demands, &suffix_need, 0, 0, &mut failed)
}

fn cover_from(
    vals: &[u64],
    demands: &[u64],
    suffix_need: &[u128],
    bin: usize,
    used: u32,
    failed: &mut HashSet<(usize, u32)>,
) -> bool {
    if bin == demands.len() {
        return true;
    }
    let available: u128 = vals
        .iter()
        .enumerate()
        .filter(|(i, _)| used & (1 << i) == 0)
        .map(|(_, &v)| v as u128)
        .sum();
    if available < suffix_need[bin] {
        return false;
    }
    if demands[bin] == 0 {
        return cover_from(vals, demands, suffix_need, bin + 1, used, failed);
    }
    if failed.contains(&(bin, used)) {
        return false;
    }
    if choose_group(vals, demands, suffix_need, bin, used, 0, 0, failed) {
        return true;
    }
    failed.insert((bin, used));
    false
}

#[allow(clippy::too_many_arguments)]
fn choose_group(
    vals: &[u64],
    demands: &[u64],
    suffix_need: &[u128],
    bin: usize,
    used: u32,
    start: usize,
    acc: u64,
    failed: &mut HashSet<(usize, u32)>,
) -> bool {
    let target = demands[bin];
    let mut prev_skipped: Option<u64> = None;
    for i in start..vals.len() {
        if used & (1 << i) != 0 {
            continue;
        }
        // Identical value already tried at this level: same subtree.
        if prev_skipped == Some(vals[i]) {
            continue;
        }
        let new_used = used | (1 << i);
        let new_acc = acc + vals[i];
        if new_acc >= target {
            if cover_from(vals, demands, suffix_need, bin + 1, new_used, failed) {
                return true;
            }
        } else if choose_group(
            vals,
            demands,
            suffix_need,
            bin,
            new_used,
            i + 1,
            new_acc,
            failed,
        ) {
            return true;
        }
        prev_skipped = Some(vals[i]);
    }
    false
}

/// Structural facts about a candidate join, shared by the classifier and the
/// census output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinShape {
    /// Inferred participant count: ceil(outputs / 2).
    pub participants: usize,
    /// The mix denomination.
    pub denomination: Satoshi,
}

/// The cheap structural prefix of the classifier: output-count and
/// most-common-value checks. `None` means definitely not a join.
pub fn join_shape(t: &Transaction) -> Option<JoinShape> {
    if t.op_return || t.coinbase {
        return None;
    }
    let participants = t.outputs.len().div_ceil(2);
    if participants < 2 {
        return None;
    }
    // Most common output value; ties break toward the larger value.
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for o in &t.outputs {
        *counts.entry(o.value.0).or_insert(0) += 1;
    }
    let (&v, &count) = counts
        .iter()
        .max_by_key(|(&val, &cnt)| (cnt, val))
        .expect("outputs nonempty");
    if count != participants {
        return None;
    }
    Some(JoinShape {
        participants,
        denomination: Satoshi(v),
    })
}

/// Algorithm: reject unspendable/oversized shapes, then require that
/// per-address input sums can cover one bin per participant consisting of the
/// denomination net of the fee allowance plus that participant's change
/// output (non-denomination outputs taken in output order; participants past
/// the change outputs get a bare bin — the sweep case).
pub fn is_joinmarket_tx(t: &Transaction, p: &JoinDetectionParams) -> bool {
    if t.inputs.len() > p.max_inputs {
        return false;
    }
    let shape = match join_shape(t) {
        Some(s) => s,
        None => return false,
    };
    let v = shape.denomination;
    let q = max_fee(v, p);

    // Per-address input sums, in first-appearance order.
    let mut order: Vec<crate::chain::AddressId> = Vec::new();
    let mut sums: HashMap<crate::chain::AddressId, u64> = HashMap::new();
    for inp in &t.inputs {
        sums.entry(inp.source)
            .and_modify(|s| *s += inp.value.0)
            .or_insert_with(|| {
                order.push(inp.source);
                inp.value.0
            });
    }
    let input_sums: Vec<Satoshi> = order.iter().map(|a| Satoshi(sums[a])).collect();

    let mut bins: Vec<Satoshi> = Vec::with_capacity(shape.participants);
    for o in &t.outputs {
        if o.value != v {
            bins.push(Satoshi((v.0 + o.value.0).saturating_sub(q.0)));
        }
    }
    while bins.len() < shape.participants {
        bins.push(v.saturating_sub(q));
    }

    bin_cover(&input_sums, &bins)
}

/// Identified join transactions: the full pass set and its giant connected
/// component.
#[derive(Debug, Clone)]
pub struct JoinSet {
    superset: Vec<TxIdx>,
    subset: Vec<TxIdx>,
    superset_mask: Vec<bool>,
    subset_mask: Vec<bool>,
}

impl JoinSet {
    pub fn from_sets(n_txs: usize, mut superset: Vec<TxIdx>, mut subset: Vec<TxIdx>) -> JoinSet {
        superset.sort_unstable();
        subset.sort_unstable();
        let mut superset_mask = vec![false; n_txs];
        for t in &superset {
            superset_mask[t.0 as usize] = true;
        }
        let mut subset_mask = vec![false; n_txs];
        for t in &subset {
            subset_mask[t.0 as usize] = true;
        }
        JoinSet {
            superset,
            subset,
            superset_mask,
            subset_mask,
        }
    }

    pub fn empty(n_txs: usize) -> JoinSet {
        JoinSet::from_sets(n_txs, Vec::new(), Vec::new())
    }

    /// All transactions passing the classifier, sorted by index.
    pub fn superset(&self) -> &[TxIdx] {
        &self.superset
    }

    /// The giant connected component of the superset.
    pub fn subset(&self) -> &[TxIdx] {
        &self.subset
    }

    pub fn is_join(&self, t: TxIdx) -> bool {
        self.superset_mask
            .get(t.0 as usize)
            .copied()
            .unwrap_or(false)
    }

    pub fn in_subset(&self, t: TxIdx) -> bool {
        self.subset_mask.get(t.0 as usize).copied().unwrap_or(false)
    }
}

/// Classify every transaction (in parallel when enabled) and extract the
/// giant component of the passing set.
pub fn detect_joins(g: &ChainGraph, p: &JoinDetectionParams) -> JoinSet {
    let flags = par::map_collect(g.txs(), |t| is_joinmarket_tx(t, p));
    build_join_set(g, flags)
}

/// Sequential variant, kept for the bench comparison.
pub fn detect_joins_seq(g: &ChainGraph, p: &JoinDetectionParams) -> JoinSet {
    let flags = par::map_collect_seq(g.txs(), |t| is_joinmarket_tx(t, p));
    build_join_set(g, flags)
}

fn build_join_set(g: &ChainGraph, flags: Vec<bool>) -> JoinSet {
    let superset: Vec<TxIdx> = flags
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| TxIdx(i as u32))
        .collect();
    let member_set: HashSet<TxIdx> = superset.iter().copied().collect();
    let comps = g.connected_components(&member_set);
    let subset = comps.into_iter().next().unwrap_or_default();
    JoinSet::from_sets(g.tx_count(), superset, subset)
}

/// One census row per identified join.
#[derive(Debug, Clone)]
pub struct CensusEntry {
    pub tx: TxIdx,
    pub participants: usize,
    pub denomination: Satoshi,
    /// Index of the tx's component among the superset's components (0 is the
    /// giant component).
    pub component: usize,
}

pub fn join_census(g: &ChainGraph, joins: &JoinSet) -> Vec<CensusEntry> {
    let member_set: HashSet<TxIdx> = joins.superset().iter().copied().collect();
    let comps = g.connected_components(&member_set);
    let mut component_of: HashMap<TxIdx, usize> = HashMap::new();
    for (ci, comp) in comps.iter().enumerate() {
        for &t in comp {
            component_of.insert(t, ci);
        }
    }
    joins
        .superset()
        .iter()
        .map(|&t| {
            let shape = join_shape(g.tx(t)).expect("superset member has join shape");
            CensusEntry {
                tx: t,
                participants: shape.participants,
                denomination: shape.denomination,
                component: component_of[&t],
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{AddressId, CoinRef, Satoshi, Transaction, TxInput, TxOutput};
    use crate::rng::Rng;

    fn sat(v: u64) -> Satoshi {
        Satoshi(v)
    }

    fn sats(vs: &[u64]) -> Vec<Satoshi> {
        vs.iter().copied().map(Satoshi).collect()
    }

    #[test]
    fn max_fee_examples() {
        let p = JoinDetectionParams::default();
        assert_eq!(max_fee(sat(0), &p), sat(10_000));
        // 1% of 1,000,000 equals the floor exactly.
        assert_eq!(max_fee(sat(1_000_000), &p), sat(10_000));
        assert_eq!(max_fee(sat(5_000_000), &p), sat(50_000));
        // Flooring of the proportional part.
        assert_eq!(max_fee(sat(199), &p), sat(10_000));
        let p2 = JoinDetectionParams {
            fee_floor: sat(0),
            ..p
        };
        assert_eq!(max_fee(sat(199), &p2), sat(1));
    }

    #[test]
    fn bin_cover_examples() {
        assert!(bin_cover(&sats(&[10]), &sats(&[10])));
        assert!(!bin_cover(&sats(&[5, 4]), &sats(&[10])));
        // The greedy {7}->7 assignment fails; {6,3}->9, {7}->7 works.
        assert!(bin_cover(&sats(&[7, 6, 3]), &sats(&[9, 7])));
        // Zero-demand bins are free.
        assert!(bin_cover(&sats(&[1]), &sats(&[0, 0, 1])));
        assert!(!bin_cover(&sats(&[1]), &sats(&[0, 1, 1])));
    }

    /// Brute-force oracle: try every assignment of each value to one of the
    /// bins or to "unused".
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
            // increment mixed-radix counter
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
    fn bin_cover_matches_oracle_on_random_instances() {
        let mut rng = Rng::new(0xBEEF);
        let mut true_count = 0;
        for case in 0..1500 {
            let nv = 1 + rng.usize_below(8);
            let nb = 1 + rng.usize_below(4);
            // Small value range keeps both outcomes common.
            let values: Vec<Satoshi> = (0..nv).map(|_| sat(rng.u64_below(12))).collect();
            let bins: Vec<Satoshi> = (0..nb).map(|_| sat(rng.u64_below(14))).collect();
            let got = bin_cover(&values, &bins);
            let want = bin_cover_oracle(&values, &bins);
            assert_eq!(got, want, "case {case}: V={values:?} B={bins:?}");
            if got {
                true_count += 1;
            }
        }
        // Sanity: the random suite exercises both outcomes.
        assert!(
            true_count > 200 && true_count < 1300,
            "skewed suite: {true_count}"
        );
    }

    #[test]
    fn bin_cover_monotone() {
        let mut rng = Rng::new(0xCAFE);
        for _ in 0..300 {
            let nv = 1 + rng.usize_below(6);
            let nb = 1 + rng.usize_below(3);
            let values: Vec<Satoshi> = (0..nv).map(|_| sat(rng.u64_below(10))).collect();
            let bins: Vec<Satoshi> = (0..nb).map(|_| sat(1 + rng.u64_below(10))).collect();
            if !bin_cover(&values, &bins) {
                continue;
            }
            // Increasing a value keeps it coverable.
            let mut v2 = values.clone();
            let vi = rng.usize_below(nv);
            v2[vi] = sat(v2[vi].0 + 1 + rng.u64_below(5));
            assert!(bin_cover(&v2, &bins), "raise value: {values:?} {bins:?}");
            // Decreasing a bin keeps it coverable.
            let mut b2 = bins.clone();
            let bi = rng.usize_below(nb);
            b2[bi] = sat(b2[bi].0.saturating_sub(1 + rng.u64_below(5)));
            assert!(bin_cover(&values, &b2), "lower bin: {values:?} {bins:?}");
        }
    }

    fn mk_tx(
        inputs: Vec<(u32, u64)>, // (source address id, value)
        outputs: Vec<u64>,
        op_return: bool,
    ) -> Transaction {
        Transaction {
            idx: TxIdx(0),
            height: 10,
            time: 0,
            coinbase: false,
            op_return,
            inputs: inputs
                .into_iter()
                .enumerate()
                .map(|(i, (addr, value))| TxInput {
                    coin: CoinRef {
                        tx: TxIdx(1000 + i as u32),
                        vout: 0,
                    },
                    source: AddressId(addr),
                    value: sat(value),
                })
                .collect(),
            outputs: outputs
                .into_iter()
                .enumerate()
                .map(|(i, value)| TxOutput {
                    addr: AddressId(100 + i as u32),
                    value: sat(value),
                })
                .collect(),
        }
    }

    #[test]
    fn two_output_payment_is_not_a_join() {
        let p = JoinDetectionParams::default();
        let t = mk_tx(vec![(0, 2_000_000)], vec![1_500_000, 499_000], false);
        assert!(!is_joinmarket_tx(&t, &p));
    }

    // Worked example: two participants, denom 1,000,000, changes 150,000 and
    // 90,000, fee allowance 10,000 -> bins [1,140,000, 1,080,000].
    #[test]
    fn worked_join_example() {
        let p = JoinDetectionParams::default();
        let outputs = vec![1_000_000, 1_000_000, 150_000, 90_000];
        let good = mk_tx(vec![(0, 1_160_000), (1, 1_080_000)], outputs.clone(), false);
        assert!(is_joinmarket_tx(&good, &p));
        let bad = mk_tx(vec![(0, 1_160_000), (1, 1_000_000)], outputs, false);
        assert!(!is_joinmarket_tx(&bad, &p));
    }

    #[test]
    fn op_return_rejected() {
        let p = JoinDetectionParams::default();
        let t = mk_tx(
            vec![(0, 1_160_000), (1, 1_080_000)],
            vec![1_000_000, 1_000_000, 150_000, 90_000],
            true,
        );
        assert!(!is_joinmarket_tx(&t, &p));
    }

    #[test]
    fn input_cutoff_rejected() {
        let p = JoinDetectionParams::default();
        let inputs: Vec<(u32, u64)> = (0..18).map(|i| (i, 2_000_000)).collect();
        let t = mk_tx(inputs, vec![1_000_000, 1_000_000, 150_000, 90_000], false);
        assert!(!is_joinmarket_tx(&t, &p));
        // Exactly at the cutoff is allowed.
        let inputs17: Vec<(u32, u64)> = (0..17).map(|i| (i, 2_000_000)).collect();
        let t17 = mk_tx(inputs17, vec![1_000_000, 1_000_000, 150_000, 90_000], false);
        assert!(is_joinmarket_tx(&t17, &p));
    }

    #[test]
    fn sweep_shape_accepted() {
        let p = JoinDetectionParams::default();
        // Two participants, 2n-1 = 3 outputs: one participant takes no change.
        let t = mk_tx(
            vec![(0, 1_200_000), (1, 1_000_000)],
            vec![1_000_000, 1_000_000, 190_000],
            false,
        );
        assert!(is_joinmarket_tx(&t, &p));
    }

    #[test]
    fn denomination_tie_breaks_to_larger() {
        // outputs: two of 1,000,000 and two of 2,000,000. Tie on count;
        // the larger value is taken as the denomination.
        let t = mk_tx(
            vec![(0, 3_010_000), (1, 3_010_000)],
            vec![2_000_000, 2_000_000, 1_000_000, 1_000_000],
            false,
        );
        let shape = join_shape(&t).unwrap();
        assert_eq!(shape.denomination, sat(2_000_000));
        assert_eq!(shape.participants, 2);
    }

    // Two disjoint join chains of sizes 5 and 3: the subset picks the
    // 5-component.
    #[test]
    fn giant_component_selection() {
        use crate::chain::{AssemblerInput, AssemblerOutput, ChainAssembler};
        let mut asm = ChainAssembler::new();
        let out = |addr: &str, value: u64| AssemblerOutput {
            addr: addr.to_string(),
            kind: crate::chain::AddressKind::Regular,
            value: sat(value),
        };
        let coin = |txid: &str, vout: u32, addr: &str, value: u64| AssemblerInput {
            prev_txid: txid.to_string(),
            vout,
            addr: addr.to_string(),
            kind: crate::chain::AddressKind::Regular,
            value: sat(value),
        };
        asm.push_tx(
            "cb",
            0,
            0,
            true,
            false,
            vec![],
            vec![out("a", 1_000), out("b", 1_000)],
        )
        .unwrap();
        // Chain A: a0 -> a1 -> a2 -> a3 -> a4 (each spends the previous).
        asm.push_tx(
            "a0",
            1,
            600,
            false,
            false,
            vec![coin("cb", 0, "a", 1_000)],
            vec![out("a0o", 990)],
        )
        .unwrap();
        for i in 1..5 {
            let prev = format!("a{}", i - 1);
            let prev_out = format!("a{}o", i - 1);
            asm.push_tx(
                &format!("a{i}"),
                1 + i,
                600 * (1 + i as i64),
                false,
                false,
                vec![coin(&prev, 0, &prev_out, 990 - 10 * (i as u64 - 1))],
                vec![out(&format!("a{i}o"), 990 - 10 * i as u64)],
            )
            .unwrap();
        }
        // Chain B: b0 -> b1 -> b2.
        asm.push_tx(
            "b0",
            6,
            3_600,
            false,
            false,
            vec![coin("cb", 1, "b", 1_000)],
            vec![out("b0o", 990)],
        )
        .unwrap();
        for i in 1..3 {
            let prev = format!("b{}", i - 1);
            let prev_out = format!("b{}o", i - 1);
            asm.push_tx(
                &format!("b{i}"),
                6 + i,
                600 * (6 + i as i64),
                false,
                false,
                vec![coin(&prev, 0, &prev_out, 990 - 10 * (i as u64 - 1))],
                vec![out(&format!("b{i}o"), 990 - 10 * i as u64)],
            )
            .unwrap();
        }
        let g = asm.finish();
        // Pretend-join flags: all eight chain txs.
        let flagged: Vec<TxIdx> = (0..5)
            .map(|i| g.tx_by_label(&format!("a{i}")).unwrap())
            .chain((0..3).map(|i| g.tx_by_label(&format!("b{i}")).unwrap()))
            .collect();
        let member_set: std::collections::HashSet<TxIdx> = flagged.iter().copied().collect();
        let comps = g.connected_components(&member_set);
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[0].len(), 5);
        let subset = JoinSet::from_sets(g.tx_count(), flagged, comps[0].clone());
        assert!(subset.in_subset(g.tx_by_label("a0").unwrap()));
        assert!(!subset.in_subset(g.tx_by_label("b0").unwrap()));
    }

    #[test]
    fn empty_chain_detection() {
        let g = crate::chain::ChainAssembler::new().finish();
        let joins = detect_joins(&g, &JoinDetectionParams::default());
        assert!(joins.superset().is_empty());
        assert!(joins.subset().is_empty());
    }

    #[test]
    fn multiple_inputs_same_address_sum_together() {
        let p = JoinDetectionParams::default();
        // Address 0 contributes two coins summing to enough for its bin.
        let t = mk_tx(
            vec![(0, 600_000), (0, 560_000), (1, 1_080_000)],
            vec![1_000_000, 1_000_000, 150_000, 90_000],
            false,
        );
        assert!(is_joinmarket_tx(&t, &p));
    }
}
