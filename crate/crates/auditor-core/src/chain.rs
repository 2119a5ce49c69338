//! Immutable in-memory transaction graph.
//!
//! Transactions are stored densely in height order; addresses and
//! transactions are interned to integer ids at load time, with the original
//! string labels retained for I/O. Coin-level edges (a transaction spending
//! another's output) are indexed in both directions, which is what the
//! traversal queries and the attack modules operate on. The graph is
//! immutable once built and safe to share across worker threads.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

/// Integer on-chain value; 1e-8 BTC. All monetary arithmetic in the crate is
/// exact integer arithmetic.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Satoshi(pub u64);

impl Satoshi {
    pub const ZERO: Satoshi = Satoshi(0);

    pub fn checked_sub(self, rhs: Satoshi) -> Option<Satoshi> {
        self.0.checked_sub(rhs.0).map(Satoshi)
    }

    pub fn saturating_sub(self, rhs: Satoshi) -> Satoshi {
        Satoshi(self.0.saturating_sub(rhs.0))
    }
}

impl fmt::Debug for Satoshi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}sat", self.0)
    }
}

impl fmt::Display for Satoshi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::ops::Add for Satoshi {
    type Output = Satoshi;
    fn add(self, rhs: Satoshi) -> Satoshi {
        Satoshi(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Satoshi {
    fn add_assign(&mut self, rhs: Satoshi) {
        self.0 += rhs.0;
    }
}

impl std::ops::Sub for Satoshi {
    type Output = Satoshi;
    fn sub(self, rhs: Satoshi) -> Satoshi {
        Satoshi(self.0 - rhs.0)
    }
}

impl std::iter::Sum for Satoshi {
    fn sum<I: Iterator<Item = Satoshi>>(iter: I) -> Satoshi {
        Satoshi(iter.map(|s| s.0).sum())
    }
}

/// Dense address id assigned at ingest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct AddressId(pub u32);

/// Dense transaction index in height order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct TxIdx(pub u32);

/// A coin (transaction output), the unit moved by transactions.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct CoinRef {
    pub tx: TxIdx,
    pub vout: u32,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AddressKind {
    Regular,
    Multisig,
}

#[derive(Clone, Debug)]
pub struct TxInput {
    pub coin: CoinRef,
    pub source: AddressId,
    pub value: Satoshi,
}

#[derive(Clone, Debug)]
pub struct TxOutput {
    pub addr: AddressId,
    pub value: Satoshi,
}

#[derive(Clone, Debug)]
pub struct Transaction {
    pub idx: TxIdx,
    pub height: u32,
    /// Block timestamp, unix seconds.
    pub time: i64,
    pub coinbase: bool,
    pub op_return: bool,
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
}

impl Transaction {
    pub fn input_sum(&self) -> Satoshi {
        self.inputs.iter().map(|i| i.value).sum()
    }

    pub fn output_sum(&self) -> Satoshi {
        self.outputs.iter().map(|o| o.value).sum()
    }
}

#[derive(Clone, Debug)]
pub struct AddressInfo {
    pub kind: AddressKind,
    /// Block height of first appearance.
    pub first_seen: u32,
}

/// The loaded chain. Construction goes through [`ChainAssembler`]; all other
/// access is read-only.
#[derive(Debug)]
pub struct ChainGraph {
    txs: Vec<Transaction>,
    tx_labels: Vec<String>,
    tx_by_label: HashMap<String, TxIdx>,
    addrs: Vec<AddressInfo>,
    addr_labels: Vec<String>,
    addr_by_label: HashMap<String, AddressId>,
    /// Per address: transactions with an input sourced from it, height order.
    spending: Vec<Vec<TxIdx>>,
    /// Per address: transactions with an output paying it, height order.
    receiving: Vec<Vec<TxIdx>>,
    /// Per transaction, per output: the spending transaction if any.
    spent_by: Vec<Vec<Option<TxIdx>>>,
}

impl ChainGraph {
    pub fn tx_count(&self) -> usize {
        self.txs.len()
    }

    pub fn address_count(&self) -> usize {
        self.addrs.len()
    }

    pub fn txs(&self) -> &[Transaction] {
        &self.txs
    }

    pub fn tx(&self, idx: TxIdx) -> &Transaction {
        &self.txs[idx.0 as usize]
    }

    pub fn tx_label(&self, idx: TxIdx) -> &str {
        &self.tx_labels[idx.0 as usize]
    }

    pub fn tx_by_label(&self, label: &str) -> Option<TxIdx> {
        self.tx_by_label.get(label).copied()
    }

    pub fn address(&self, id: AddressId) -> &AddressInfo {
        &self.addrs[id.0 as usize]
    }

    pub fn address_label(&self, id: AddressId) -> &str {
        &self.addr_labels[id.0 as usize]
    }

    pub fn address_by_label(&self, label: &str) -> Option<AddressId> {
        self.addr_by_label.get(label).copied()
    }

    /// Max height in the chain, or None when empty.
    pub fn tip_height(&self) -> Option<u32> {
        self.txs.last().map(|t| t.height)
    }

    pub fn coin_value(&self, coin: CoinRef) -> Satoshi {
        self.tx(coin.tx).outputs[coin.vout as usize].value
    }

    pub fn coin_address(&self, coin: CoinRef) -> AddressId {
        self.tx(coin.tx).outputs[coin.vout as usize].addr
    }

    /// The transaction spending this coin, or None if unspent.
    pub fn spender_of(&self, coin: CoinRef) -> Option<TxIdx> {
        self.spent_by[coin.tx.0 as usize][coin.vout as usize]
    }

    /// Transactions with at least one input sourced from `a`, in height
    /// order. Unknown addresses yield an empty slice.
    pub fn txs_spending_from(&self, a: AddressId) -> &[TxIdx] {
        self.spending
            .get(a.0 as usize)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Transactions paying to `a`, in height order.
    pub fn txs_paying_to(&self, a: AddressId) -> &[TxIdx] {
        self.receiving
            .get(a.0 as usize)
            .map(|v| v.as_slice())
            .unwrap_or(&[])
    }

    /// Whether address `a` makes its first and only same-height appearance in
    /// `t`: first_seen equals the transaction's height and no other
    /// transaction at that height references it.
    pub fn is_fresh_in(&self, a: AddressId, t: &Transaction) -> bool {
        if self.address(a).first_seen != t.height {
            return false;
        }
        let at_height = |list: &[TxIdx]| {
            list.iter()
                .take_while(|&&ti| self.tx(ti).height <= t.height)
                .filter(|&&ti| self.tx(ti).height == t.height && ti != t.idx)
                .count()
        };
        at_height(self.txs_spending_from(a)) == 0 && at_height(self.txs_paying_to(a)) == 0
    }

    /// All transactions reachable from `t` by at most `d` coin edges, treating
    /// edges as undirected. Includes `t` itself.
    pub fn txs_within_distance(&self, t: TxIdx, d: u32) -> HashSet<TxIdx> {
        let mut seen: HashSet<TxIdx> = HashSet::new();
        let mut queue: VecDeque<(TxIdx, u32)> = VecDeque::new();
        seen.insert(t);
        queue.push_back((t, 0));
        while let Some((cur, dist)) = queue.pop_front() {
            if dist == d {
                continue;
            }
            for n in self.neighbors(cur) {
                if seen.insert(n) {
                    queue.push_back((n, dist + 1));
                }
            }
        }
        seen
    }

    /// Coin-edge neighbors of a transaction: creators of its inputs and
    /// spenders of its outputs.
    pub fn neighbors(&self, t: TxIdx) -> Vec<TxIdx> {
        let tx = self.tx(t);
        let mut out: Vec<TxIdx> = tx.inputs.iter().map(|i| i.coin.tx).collect();
        for (vout, _) in tx.outputs.iter().enumerate() {
            if let Some(s) = self.spent_by[t.0 as usize][vout] {
                out.push(s);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Partition `txs` into connected components under the coin-edge relation
    /// restricted to `txs`, sorted by descending size (ties: lowest minimum
    /// height, then lowest index).
    pub fn connected_components(&self, txs: &HashSet<TxIdx>) -> Vec<Vec<TxIdx>> {
        let mut members: Vec<TxIdx> = txs.iter().copied().collect();
        members.sort_unstable();
        let slot: HashMap<TxIdx, usize> =
            members.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut uf = UnionFind::new(members.len());
        for (i, &t) in members.iter().enumerate() {
            for n in self.neighbors(t) {
                if let Some(&j) = slot.get(&n) {
                    uf.union(i, j);
                }
            }
        }
        let mut groups: HashMap<usize, Vec<TxIdx>> = HashMap::new();
        for (i, &t) in members.iter().enumerate() {
            groups.entry(uf.find(i)).or_default().push(t);
        }
        let mut comps: Vec<Vec<TxIdx>> = groups.into_values().collect();
        for c in &mut comps {
            c.sort_unstable();
        }
        comps.sort_by_key(|c| (std::cmp::Reverse(c.len()), self.tx(c[0]).height, c[0]));
        comps
    }
}

/// Weighted-union, path-halving disjoint sets.
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let mut ra = self.find(a);
        let mut rb = self.find(b);
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }
}

/// Incremental constructor used by the loader. Enforces the structural
/// invariants (no double spends, no forward references, conservation) as
/// transactions arrive in file order.
pub struct ChainAssembler {
    graph: ChainGraph,
}

pub struct AssemblerInput {
    pub prev_txid: String,
    pub vout: u32,
    pub addr: String,
    pub kind: AddressKind,
    pub value: Satoshi,
}

pub struct AssemblerOutput {
    pub addr: String,
    pub kind: AddressKind,
    pub value: Satoshi,
}

/// Violation found while assembling a chain; the loader wraps this with the
/// offending line number.
#[derive(Debug, thiserror::Error)]
pub enum ChainError {
    #[error("duplicate transaction id {txid}")]
    DuplicateTx { txid: String },
    #[error("transactions out of height order: {txid} at height {height} after height {prev}")]
    HeightOrder {
        txid: String,
        height: u32,
        prev: u32,
    },
    #[error("coinbase transaction {txid} must have no inputs")]
    CoinbaseWithInputs { txid: String },
    #[error("non-coinbase transaction {txid} has no inputs")]
    NoInputs { txid: String },
    #[error("{txid} spends unknown output {prev_txid}:{vout} (forward or dangling reference)")]
    UnknownCoin {
        txid: String,
        prev_txid: String,
        vout: u32,
    },
    #[error("double spend of {prev_txid}:{vout}: spent by {first} and {second}")]
    DoubleSpend {
        prev_txid: String,
        vout: u32,
        first: String,
        second: String,
    },
    #[error("{txid} input {prev_txid}:{vout} declares addr/value {decl_addr}/{decl_value} but the output is {out_addr}/{out_value}")]
    InputMismatch {
        txid: String,
        prev_txid: String,
        vout: u32,
        decl_addr: String,
        decl_value: Satoshi,
        out_addr: String,
        out_value: Satoshi,
    },
    #[error("address {addr} appears with conflicting kinds")]
    KindConflict { addr: String },
    #[error("{txid} outputs {out} exceed inputs {inp}")]
    Conservation {
        txid: String,
        out: Satoshi,
        inp: Satoshi,
    },
}

impl Default for ChainAssembler {
    fn default() -> Self {
        Self::new()
    }
}

impl ChainAssembler {
    pub fn new() -> Self {
        ChainAssembler {
            graph: ChainGraph {
                txs: Vec::new(),
                tx_labels: Vec::new(),
                tx_by_label: HashMap::new(),
                addrs: Vec::new(),
                addr_labels: Vec::new(),
                addr_by_label: HashMap::new(),
                spending: Vec::new(),
                receiving: Vec::new(),
                spent_by: Vec::new(),
            },
        }
    }

    fn intern_address(
        &mut self,
        label: &str,
        kind: AddressKind,
        height: u32,
    ) -> Result<AddressId, ChainError> {
        if let Some(&id) = self.graph.addr_by_label.get(label) {
            if self.graph.addrs[id.0 as usize].kind != kind {
                return Err(ChainError::KindConflict {
                    addr: label.to_string(),
                });
            }
            return Ok(id);
        }
        let id = AddressId(self.graph.addrs.len() as u32);
        self.graph.addrs.push(AddressInfo {
            kind,
            first_seen: height,
        });
        self.graph.addr_labels.push(label.to_string());
        self.graph.addr_by_label.insert(label.to_string(), id);
        self.graph.spending.push(Vec::new());
        self.graph.receiving.push(Vec::new());
        Ok(id)
    }

    pub fn push_tx(
        &mut self,
        txid: &str,
        height: u32,
        time: i64,
        coinbase: bool,
        op_return: bool,
        inputs: Vec<AssemblerInput>,
        outputs: Vec<AssemblerOutput>,
    ) -> Result<TxIdx, ChainError> {
        let g = &mut self.graph;
        if g.tx_by_label.contains_key(txid) {
            return Err(ChainError::DuplicateTx {
                txid: txid.to_string(),
            });
        }
        if let Some(prev) = g.txs.last() {
            if height < prev.height {
                return Err(ChainError::HeightOrder {
                    txid: txid.to_string(),
                    height,
                    prev: prev.height,
                });
            }
        }
        if coinbase && !inputs.is_empty() {
            return Err(ChainError::CoinbaseWithInputs {
                txid: txid.to_string(),
            });
        }
        if !coinbase && inputs.is_empty() {
            return Err(ChainError::NoInputs {
                txid: txid.to_string(),
            });
        }

        let idx = TxIdx(g.txs.len() as u32);

        let mut resolved_inputs = Vec::with_capacity(inputs.len());
        for inp in &inputs {
            let prev_idx = self.graph.tx_by_label.get(&inp.prev_txid).copied().ok_or(
                ChainError::UnknownCoin {
                    txid: txid.to_string(),
                    prev_txid: inp.prev_txid.clone(),
                    vout: inp.vout,
                },
            )?;
            let prev_tx = &self.graph.txs[prev_idx.0 as usize];
            let out = prev_tx
                .outputs
                .get(inp.vout as usize)
                .ok_or(ChainError::UnknownCoin {
                    txid: txid.to_string(),
                    prev_txid: inp.prev_txid.clone(),
                    vout: inp.vout,
                })?;
            let out_addr_label = self.graph.addr_labels[out.addr.0 as usize].clone();
            if out_addr_label != inp.addr || out.value != inp.value {
                return Err(ChainError::InputMismatch {
                    txid: txid.to_string(),
                    prev_txid: inp.prev_txid.clone(),
                    vout: inp.vout,
                    decl_addr: inp.addr.clone(),
                    decl_value: inp.value,
                    out_addr: out_addr_label,
                    out_value: out.value,
                });
            }
            if let Some(spender) = self.graph.spent_by[prev_idx.0 as usize][inp.vout as usize] {
                return Err(ChainError::DoubleSpend {
                    prev_txid: inp.prev_txid.clone(),
                    vout: inp.vout,
                    first: self.graph.tx_labels[spender.0 as usize].clone(),
                    second: txid.to_string(),
                });
            }
            let source = out.addr;
            resolved_inputs.push(TxInput {
                coin: CoinRef {
                    tx: prev_idx,
                    vout: inp.vout,
                },
                source,
                value: out.value,
            });
        }

        let mut resolved_outputs = Vec::with_capacity(outputs.len());
        for out in &outputs {
            let addr = self.intern_address(&out.addr, out.kind, height)?;
            resolved_outputs.push(TxOutput {
                addr,
                value: out.value,
            });
        }

        if !coinbase {
            let inp: Satoshi = resolved_inputs.iter().map(|i| i.value).sum();
            let out: Satoshi = resolved_outputs.iter().map(|o| o.value).sum();
            if out > inp {
                return Err(ChainError::Conservation {
                    txid: txid.to_string(),
                    out,
                    inp,
                });
            }
        }

        // All checks passed; commit.
        let g = &mut self.graph;
        for inp in &resolved_inputs {
            g.spent_by[inp.coin.tx.0 as usize][inp.coin.vout as usize] = Some(idx);
            let list = &mut g.spending[inp.source.0 as usize];
            if list.last() != Some(&idx) {
                list.push(idx);
            }
        }
        for out in &resolved_outputs {
            let list = &mut g.receiving[out.addr.0 as usize];
            if list.last() != Some(&idx) {
                list.push(idx);
            }
        }
        g.spent_by.push(vec![None; resolved_outputs.len()]);
        g.tx_labels.push(txid.to_string());
        g.tx_by_label.insert(txid.to_string(), idx);
        g.txs.push(Transaction {
            idx,
            height,
            time,
            coinbase,
            op_return,
            inputs: resolved_inputs,
            outputs: resolved_outputs,
        });
        Ok(idx)
    }

    pub fn finish(self) -> ChainGraph {
        self.graph
    }
}
