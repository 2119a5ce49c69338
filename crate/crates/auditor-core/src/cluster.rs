//! Mix-aware address clustering: the closure of the multi-input and
//! change-address heuristics over all non-mix transactions.
//!
//! Join transactions are excluded from the edge set entirely, so addresses
//! connected only through a CoinJoin never merge. The full-chain assignment
//! is computed with union-find over per-transaction edge cliques; the
//! per-address expansion exists both as a usable query and as the reference
//! the assignment is tested against.

use std::collections::{HashMap, HashSet, VecDeque};

use crate::chain::{AddressId, ChainGraph, Transaction, TxIdx, UnionFind};
use crate::joins::JoinSet;
use crate::par;

/// Canonical cluster id: the smallest member address id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClusterId(pub u32);

/// The change output of a transaction under the unique-freshness heuristic:
/// exactly one distinct output address makes its first appearance in this
/// transaction while every other output address was seen at an earlier
/// height. Anything else (all reused, several fresh, single-output) yields
/// nothing.
pub fn change_address(g: &ChainGraph, t: &Transaction) -> Option<AddressId> {
    if t.coinbase || t.outputs.len() < 2 {
        return None;
    }
    let mut distinct: Vec<AddressId> = t.outputs.iter().map(|o| o.addr).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return None;
    }
    let mut fresh = None;
    for &a in &distinct {
        if g.is_fresh_in(a, t) {
            if fresh.is_some() {
                return None; // ambiguous: two fresh outputs
            }
            fresh = Some(a);
        } else if g.address(a).first_seen >= t.height {
            // Neither fresh nor previously seen (first appearance at this
            // height but shared with another transaction): disqualifies.
            return None;
        }
    }
    fresh
}

/// Addresses merged by one non-mix transaction: all input sources plus the
/// change address. Returns fewer than 2 entries when the transaction
/// contributes no clustering edge.
fn merge_set(g: &ChainGraph, t: &Transaction, mix: &JoinSet) -> Vec<AddressId> {
    if t.coinbase || mix.is_join(t.idx) {
        return Vec::new();
    }
    let mut set: Vec<AddressId> = t.inputs.iter().map(|i| i.source).collect();
    if let Some(change) = change_address(g, t) {
        set.push(change);
    }
    set.sort_unstable();
    set.dedup();
    set
}

/// Least fixpoint containing `a`, closed under: (i) every non-mix spend from
/// a member merges in that transaction's input sources and change address;
/// (ii) every non-mix payment whose change address is a member merges in its
/// input sources.
pub fn expand_cluster(g: &ChainGraph, a: AddressId, mix: &JoinSet) -> HashSet<AddressId> {
    let mut members: HashSet<AddressId> = HashSet::from([a]);
    let mut queue: VecDeque<AddressId> = VecDeque::from([a]);
    let mut change_cache: HashMap<TxIdx, Option<AddressId>> = HashMap::new();
    while let Some(m) = queue.pop_front() {
        let absorb = |found: Vec<AddressId>,
                      members: &mut HashSet<AddressId>,
                      queue: &mut VecDeque<AddressId>| {
            for x in found {
                if members.insert(x) {
                    queue.push_back(x);
                }
            }
        };
        for &ti in g.txs_spending_from(m) {
            let t = g.tx(ti);
            if mix.is_join(ti) {
                continue;
            }
            let mut found: Vec<AddressId> = t.inputs.iter().map(|i| i.source).collect();
            let change = *change_cache
                .entry(ti)
                .or_insert_with(|| change_address(g, t));
            if let Some(c) = change {
                found.push(c);
            }
            absorb(found, &mut members, &mut queue);
        }
        for &ti in g.txs_paying_to(m) {
            let t = g.tx(ti);
            if t.coinbase || mix.is_join(ti) {
                continue;
            }
            let change = *change_cache
                .entry(ti)
                .or_insert_with(|| change_address(g, t));
            if change == Some(m) {
                let found: Vec<AddressId> = t.inputs.iter().map(|i| i.source).collect();
                absorb(found, &mut members, &mut queue);
            }
        }
    }
    members
}

/// Full-chain cluster assignment.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    cluster_of: Vec<ClusterId>,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, a: AddressId) -> ClusterId {
        self.cluster_of[a.0 as usize]
    }

    pub fn same_cluster(&self, a: AddressId, b: AddressId) -> bool {
        self.cluster_of(a) == self.cluster_of(b)
    }

    pub fn address_count(&self) -> usize {
        self.cluster_of.len()
    }

    /// Members of each cluster, keyed by canonical id.
    pub fn clusters(&self) -> HashMap<ClusterId, Vec<AddressId>> {
        let mut map: HashMap<ClusterId, Vec<AddressId>> = HashMap::new();
        for (i, &c) in self.cluster_of.iter().enumerate() {
            map.entry(c).or_default().push(AddressId(i as u32));
        }
        map
    }

    pub fn iter(&self) -> impl Iterator<Item = (AddressId, ClusterId)> + '_ {
        self.cluster_of
            .iter()
            .enumerate()
            .map(|(i, &c)| (AddressId(i as u32), c))
    }
}

/// Cluster every address: extract per-transaction merge sets (in parallel
/// when enabled), then reduce them through a union-find. The result is
/// independent of extraction order.
pub fn cluster_all(g: &ChainGraph, mix: &JoinSet) -> ClusterAssignment {
    let merge_sets = par::map_collect(g.txs(), |t| merge_set(g, t, mix));
    reduce_assignment(g, merge_sets)
}

/// Sequential variant, kept for the bench comparison.
pub fn cluster_all_seq(g: &ChainGraph, mix: &JoinSet) -> ClusterAssignment {
    let merge_sets = par::map_collect_seq(g.txs(), |t| merge_set(g, t, mix));
    reduce_assignment(g, merge_sets)
}

fn reduce_assignment(g: &ChainGraph, merge_sets: Vec<Vec<AddressId>>) -> ClusterAssignment {
    let n = g.address_count();
    let mut uf = UnionFind::new(n);
    for set in merge_sets {
        for pair in set.windows(2) {
            uf.union(pair[0].0 as usize, pair[1].0 as usize);
        }
    }
    // Canonical id: smallest member.
    let mut min_member: Vec<u32> = (0..n as u32).collect();
    for i in 0..n {
        let root = uf.find(i);
        if (i as u32) < min_member[root] {
            min_member[root] = i as u32;
        }
    }
    let cluster_of = (0..n)
        .map(|i| {
            let root = uf.find(i);
            ClusterId(min_member[root])
        })
        .collect();
    ClusterAssignment { cluster_of }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{AddressKind, AssemblerInput, AssemblerOutput, ChainAssembler, Satoshi};

    fn build(
        txs: &[(
            &str,
            u32,
            bool,
            Vec<(&str, u32, &str, u64)>,
            Vec<(&str, u64)>,
        )],
    ) -> ChainGraph {
        let mut asm = ChainAssembler::new();
        for (txid, height, coinbase, ins, outs) in txs {
            asm.push_tx(
                txid,
                *height,
                *height as i64 * 600,
                *coinbase,
                false,
                ins.iter()
                    .map(|(t, v, a, val)| AssemblerInput {
                        prev_txid: t.to_string(),
                        vout: *v,
                        addr: a.to_string(),
                        kind: AddressKind::Regular,
                        value: Satoshi(*val),
                    })
                    .collect(),
                outs.iter()
                    .map(|(a, v)| AssemblerOutput {
                        addr: a.to_string(),
                        kind: AddressKind::Regular,
                        value: Satoshi(*v),
                    })
                    .collect(),
            )
            .unwrap();
        }
        asm.finish()
    }

    #[test]
    fn change_detection_cases() {
        // cb pays a and b at height 0; t1 spends a -> (fresh c, reused b).
        let g = build(&[
            ("cb", 0, true, vec![], vec![("a", 100), ("b", 50)]),
            (
                "t1",
                1,
                false,
                vec![("cb", 0, "a", 100)],
                vec![("c", 60), ("b", 39)],
            ),
        ]);
        let t1 = g.tx(g.tx_by_label("t1").unwrap());
        let c = g.address_by_label("c").unwrap();
        assert_eq!(change_address(&g, t1), Some(c));

        // Both outputs fresh: ambiguous.
        let g = build(&[
            ("cb", 0, true, vec![], vec![("a", 100)]),
            (
                "t1",
                1,
                false,
                vec![("cb", 0, "a", 100)],
                vec![("c", 60), ("d", 39)],
            ),
        ]);
        let t1 = g.tx(g.tx_by_label("t1").unwrap());
        assert_eq!(change_address(&g, t1), None);

        // Single output: no change possible.
        let g = build(&[
            ("cb", 0, true, vec![], vec![("a", 100)]),
            ("t1", 1, false, vec![("cb", 0, "a", 100)], vec![("c", 99)]),
        ]);
        let t1 = g.tx(g.tx_by_label("t1").unwrap());
        assert_eq!(change_address(&g, t1), None);
    }

    #[test]
    fn freshness_spoiled_by_same_height_sibling() {
        // c appears in two different txs at height 1: not fresh in either.
        let g = build(&[
            ("cb", 0, true, vec![], vec![("a", 100), ("b", 50)]),
            (
                "t1",
                1,
                false,
                vec![("cb", 0, "a", 100)],
                vec![("c", 60), ("b", 39)],
            ),
            (
                "t2",
                1,
                false,
                vec![("cb", 1, "b", 50)],
                vec![("c", 10), ("b", 39)],
            ),
        ]);
        let t1 = g.tx(g.tx_by_label("t1").unwrap());
        assert_eq!(change_address(&g, t1), None);
    }

    #[test]
    fn multi_input_heuristic_merges() {
        let g = build(&[
            ("cb", 0, true, vec![], vec![("a", 100), ("b", 50)]),
            (
                "t1",
                1,
                false,
                vec![("cb", 0, "a", 100), ("cb", 1, "b", 50)],
                vec![("c", 149)],
            ),
        ]);
        let mix = JoinSet::empty(g.tx_count());
        let a = g.address_by_label("a").unwrap();
        let b = g.address_by_label("b").unwrap();
        let got = expand_cluster(&g, a, &mix);
        assert!(got.contains(&a) && got.contains(&b));
    }

    #[test]
    fn isolated_address_is_singleton() {
        let g = build(&[("cb", 0, true, vec![], vec![("a", 100)])]);
        let mix = JoinSet::empty(g.tx_count());
        let a = g.address_by_label("a").unwrap();
        assert_eq!(expand_cluster(&g, a, &mix), HashSet::from([a]));
    }

    // a,b co-spend in T1 (change c, detected because the payee address m1 is
    // reused); c,d co-spend in T2 -> one cluster of 4.
    #[test]
    fn chained_closure() {
        let g = build(&[
            (
                "cb",
                0,
                true,
                vec![],
                vec![("a", 100), ("b", 50), ("d", 30), ("x", 10), ("m1", 5)],
            ),
            (
                "t1",
                1,
                false,
                vec![("cb", 0, "a", 100), ("cb", 1, "b", 50)],
                vec![("m1", 100), ("c", 49)],
            ),
            (
                "t2",
                2,
                false,
                vec![("t1", 1, "c", 49), ("cb", 2, "d", 30)],
                vec![("m2", 78)],
            ),
        ]);
        let mix = JoinSet::empty(g.tx_count());
        let want: HashSet<AddressId> = ["a", "b", "c", "d"]
            .iter()
            .map(|l| g.address_by_label(l).unwrap())
            .collect();
        for l in ["a", "b", "c", "d"] {
            let start = g.address_by_label(l).unwrap();
            let got = expand_cluster(&g, start, &mix);
            assert_eq!(got, want, "from {l}");
        }
        let x = g.address_by_label("x").unwrap();
        assert_eq!(expand_cluster(&g, x, &mix), HashSet::from([x]));
    }

    #[test]
    fn change_edge_via_reused_counterparty() {
        // t1 spends a -> (fresh chg, reused b): chg clusters with a.
        let g = build(&[
            ("cb", 0, true, vec![], vec![("a", 100), ("b", 50)]),
            (
                "t1",
                1,
                false,
                vec![("cb", 0, "a", 100)],
                vec![("chg", 60), ("b", 39)],
            ),
        ]);
        let mix = JoinSet::empty(g.tx_count());
        let a = g.address_by_label("a").unwrap();
        let chg = g.address_by_label("chg").unwrap();
        let got = expand_cluster(&g, chg, &mix); // rule (ii): query from the change side
        assert!(got.contains(&a));
        assert!(cluster_all(&g, &mix).same_cluster(a, chg));
    }

    #[test]
    fn mix_transactions_contribute_no_edges() {
        let g = build(&[
            ("cb", 0, true, vec![], vec![("a", 100), ("b", 100)]),
            (
                "j1",
                1,
                false,
                vec![("cb", 0, "a", 100), ("cb", 1, "b", 100)],
                vec![("p", 90), ("q", 90)],
            ),
        ]);
        let j1 = g.tx_by_label("j1").unwrap();
        let a = g.address_by_label("a").unwrap();
        let b = g.address_by_label("b").unwrap();

        let no_mix = JoinSet::empty(g.tx_count());
        assert!(cluster_all(&g, &no_mix).same_cluster(a, b));

        let with_mix = JoinSet::from_sets(g.tx_count(), vec![j1], vec![j1]);
        let asg = cluster_all(&g, &with_mix);
        assert!(!asg.same_cluster(a, b));
        assert!(expand_cluster(&g, a, &with_mix) == HashSet::from([a]));
    }

    #[test]
    fn assignment_matches_expansion_and_is_symmetric() {
        let g = build(&[
            (
                "cb",
                0,
                true,
                vec![],
                vec![("a", 10), ("b", 10), ("c", 10), ("d", 10)],
            ),
            (
                "t1",
                1,
                false,
                vec![("cb", 0, "a", 10), ("cb", 1, "b", 10)],
                vec![("e", 19)],
            ),
            (
                "t2",
                2,
                false,
                vec![("cb", 2, "c", 10)],
                vec![("f", 5), ("a", 4)],
            ),
        ]);
        let mix = JoinSet::empty(g.tx_count());
        let asg = cluster_all(&g, &mix);
        for i in 0..g.address_count() as u32 {
            let a = AddressId(i);
            let exp = expand_cluster(&g, a, &mix);
            for j in 0..g.address_count() as u32 {
                let b = AddressId(j);
                assert_eq!(exp.contains(&b), asg.same_cluster(a, b), "a={a:?} b={b:?}");
                // Symmetry of the relation.
                assert_eq!(expand_cluster(&g, b, &mix).contains(&a), exp.contains(&b));
            }
        }
    }
}
