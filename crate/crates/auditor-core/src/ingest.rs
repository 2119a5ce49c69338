//! Loaders for the three input formats: the line-delimited JSON chain export,
//! the bitcoincharts-layout trades CSV, and the broadcast-timestamp CSV.
//!
//! Monetary values stay integral end to end: chain values are satoshis, fiat
//! prices are cents, exchange rates are cents per whole BTC. The one
//! conversion, [`fiat_to_sats`], rounds half to even so every implementation
//! of the format agrees bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chain::{
    AddressKind, AssemblerInput, AssemblerOutput, ChainAssembler, ChainGraph, Satoshi, Transaction,
};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Chain export (JSON lines)
// ---------------------------------------------------------------------------

/// One transaction in the canonical chain export: a single JSON object per
/// line, values in satoshis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TxRecord {
    pub txid: String,
    pub height: u32,
    pub time: i64,
    pub coinbase: bool,
    pub op_return: bool,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputRecord {
    pub txid: String,
    pub vout: u32,
    pub addr: String,
    pub kind: AddressKind,
    pub value: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputRecord {
    pub addr: String,
    pub kind: AddressKind,
    pub value: u64,
}

pub fn load_chain(path: &Path) -> Result<ChainGraph> {
    let file = File::open(path)?;
    load_chain_from_reader(BufReader::new(file), &path.display().to_string())
}

pub fn load_chain_from_str(data: &str) -> Result<ChainGraph> {
    load_chain_from_reader(data.as_bytes(), "<memory>")
}

pub fn load_chain_from_reader(reader: impl BufRead, path: &str) -> Result<ChainGraph> {
    let mut asm = ChainAssembler::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TxRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, lineno, format!("malformed record: {e}")))?;
        push_record(&mut asm, &rec).map_err(|source| Error::Chain {
            path: path.to_string(),
            line: lineno,
            source: Box::new(source),
        })?;
    }
    Ok(asm.finish())
}

pub fn push_record(
    asm: &mut ChainAssembler,
    rec: &TxRecord,
) -> std::result::Result<(), crate::chain::ChainError> {
    asm.push_tx(
        &rec.txid,
        rec.height,
        rec.time,
        rec.coinbase,
        rec.op_return,
        rec.inputs
            .iter()
            .map(|i| AssemblerInput {
                prev_txid: i.txid.clone(),
                vout: i.vout,
                addr: i.addr.clone(),
                kind: i.kind,
                value: Satoshi(i.value),
            })
            .collect(),
        rec.outputs
            .iter()
            .map(|o| AssemblerOutput {
                addr: o.addr.clone(),
                kind: o.kind,
                value: Satoshi(o.value),
            })
            .collect(),
    )?;
    Ok(())
}

/// Serialize a loaded graph back to the canonical export. Inverse of
/// [`load_chain`] up to address-label identity.
pub fn graph_to_records(g: &ChainGraph) -> Vec<TxRecord> {
    g.txs().iter().map(|t| tx_to_record(g, t)).collect()
}

fn tx_to_record(g: &ChainGraph, t: &Transaction) -> TxRecord {
    TxRecord {
        txid: g.tx_label(t.idx).to_string(),
        height: t.height,
        time: t.time,
        coinbase: t.coinbase,
        op_return: t.op_return,
        inputs: t
            .inputs
            .iter()
            .map(|i| InputRecord {
                txid: g.tx_label(i.coin.tx).to_string(),
                vout: i.coin.vout,
                addr: g.address_label(i.source).to_string(),
                kind: g.address(i.source).kind,
                value: i.value.0,
            })
            .collect(),
        outputs: t
            .outputs
            .iter()
            .map(|o| OutputRecord {
                addr: g.address_label(o.addr).to_string(),
                kind: g.address(o.addr).kind,
                value: o.value.0,
            })
            .collect(),
    }
}

pub fn records_to_string(records: &[TxRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("record serializes"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Exchange-rate trades (CSV: unix_timestamp,price_decimal,volume_decimal)
// ---------------------------------------------------------------------------

/// One executed trade: timestamp and rate in integer cents per whole BTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TradeTick {
    pub timestamp: i64,
    pub rate: u64,
}

/// Trade ticks sorted by timestamp (stable, so file order breaks ties).
#[derive(Debug, Clone, Default)]
pub struct RateSeries {
    ticks: Vec<TradeTick>,
}

impl RateSeries {
    pub fn from_ticks(mut ticks: Vec<TradeTick>) -> RateSeries {
        ticks.sort_by_key(|t| t.timestamp);
        RateSeries { ticks }
    }

    pub fn ticks(&self) -> &[TradeTick] {
        &self.ticks
    }

    pub fn is_empty(&self) -> bool {
        self.ticks.is_empty()
    }

    /// The rate in force at `at`: the last tick at or before it. With equal
    /// timestamps the later entry wins.
    pub fn prevailing(&self, at: i64) -> Option<u64> {
        let n = self.ticks.partition_point(|t| t.timestamp <= at);
        if n == 0 {
            None
        } else {
            Some(self.ticks[n - 1].rate)
        }
    }

    /// All distinct rates a payment processor could have quoted during
    /// `[start, start + duration)`: the ticks inside the window plus the
    /// prevailing rate entering it. Sorted ascending.
    pub fn rate_window(&self, start: i64, duration: i64) -> Vec<u64> {
        debug_assert!(duration >= 0);
        let mut rates: Vec<u64> = Vec::new();
        if let Some(prev) = self.prevailing(start) {
            rates.push(prev);
        }
        let from = self.ticks.partition_point(|t| t.timestamp < start);
        // Half-open window, but any tick exactly at `start` is already the
        // prevailing rate; keep scanning from `start` for the rest.
        for t in &self.ticks[from..] {
            if t.timestamp >= start + duration {
                break;
            }
            rates.push(t.rate);
        }
        rates.sort_unstable();
        rates.dedup();
        rates
    }
}

/// Convert a fiat price in cents to satoshis at `rate` cents/BTC, rounding
/// half to even.
pub fn fiat_to_sats(price_cents: u64, rate_cents_per_btc: u64) -> Satoshi {
    debug_assert!(rate_cents_per_btc > 0);
    let n = price_cents as u128 * 100_000_000u128;
    let d = rate_cents_per_btc as u128;
    let q = n / d;
    let r = n % d;
    let rounded = match (2 * r).cmp(&d) {
        std::cmp::Ordering::Less => q,
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => {
            if q.is_multiple_of(2) {
                q
            } else {
                q + 1
            }
        }
    };
    Satoshi(rounded as u64)
}

/// Parse a non-negative decimal string ("2500", "2500.00", "0.125") to an
/// integer number of cents, rounding half to even past two places.
pub fn decimal_to_cents(s: &str) -> Option<u64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, f),
        None => (s, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    if !int_part.chars().all(|c| c.is_ascii_digit())
        || !frac_part.chars().all(|c| c.is_ascii_digit())
    {
        return None;
    }
    let whole: u64 = if int_part.is_empty() {
        0
    } else {
        int_part.parse().ok()?
    };
    let d0 = frac_part.as_bytes().first().map(|b| b - b'0').unwrap_or(0) as u64;
    let d1 = frac_part.as_bytes().get(1).map(|b| b - b'0').unwrap_or(0) as u64;
    let mut cents = whole.checked_mul(100)?.checked_add(d0 * 10 + d1)?;
    let rest = frac_part.get(2..).unwrap_or("");
    if let Some(first) = rest.as_bytes().first() {
        let first = first - b'0';
        let round_up = match first.cmp(&5) {
            std::cmp::Ordering::Greater => true,
            std::cmp::Ordering::Less => false,
            std::cmp::Ordering::Equal => {
                let exactly_half = rest.as_bytes()[1..].iter().all(|&b| b == b'0');
                if exactly_half {
                    cents % 2 == 1
                } else {
                    true
                }
            }
        };
        if round_up {
            cents = cents.checked_add(1)?;
        }
    }
    Some(cents)
}

pub fn load_trades(path: &Path) -> Result<RateSeries> {
    let file = File::open(path)?;
    load_trades_from_reader(BufReader::new(file), &path.display().to_string())
}

pub fn load_trades_from_reader(reader: impl BufRead, path: &str) -> Result<RateSeries> {
    let mut ticks = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let (ts, price, volume) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), Some(c)) if fields.next().is_none() => (a, b, c),
            _ => {
                return Err(Error::parse(
                    path,
                    lineno,
                    "expected unix_timestamp,price,volume",
                ))
            }
        };
        let timestamp: i64 = ts
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("non-numeric timestamp {ts:?}")))?;
        let rate = decimal_to_cents(price)
            .ok_or_else(|| Error::parse(path, lineno, format!("non-numeric price {price:?}")))?;
        if rate == 0 {
            return Err(Error::parse(path, lineno, "non-positive price"));
        }
        if decimal_to_cents(volume).is_none() {
            return Err(Error::parse(
                path,
                lineno,
                format!("non-numeric volume {volume:?}"),
            ));
        }
        ticks.push(TradeTick { timestamp, rate });
    }
    Ok(RateSeries::from_ticks(ticks))
}

pub fn trades_to_string(ticks: &[TradeTick]) -> String {
    let mut out = String::new();
    for t in ticks {
        out.push_str(&format!(
            "{},{}.{:02},1.0\n",
            t.timestamp,
            t.rate / 100,
            t.rate % 100
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Broadcast log (CSV: txid,unix_timestamp)
// ---------------------------------------------------------------------------

/// First-seen timestamps from the peer-to-peer network, keyed by txid.
#[derive(Debug, Clone, Default)]
pub struct BroadcastLog {
    times: HashMap<String, i64>,
}

impl BroadcastLog {
    pub fn get(&self, txid: &str) -> Option<i64> {
        self.times.get(txid).copied()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn insert(&mut self, txid: String, time: i64) {
        self.times.insert(txid, time);
    }

    /// Broadcast time of a transaction, falling back to its block timestamp
    /// when the log has no entry.
    pub fn time_of(&self, g: &ChainGraph, t: &Transaction) -> i64 {
        self.get(g.tx_label(t.idx)).unwrap_or(t.time)
    }

    /// Check every logged timestamp against its containing block: a broadcast
    /// may not postdate the block time by more than `skew` seconds.
    pub fn validate(&self, g: &ChainGraph, skew: i64) -> Result<()> {
        for (txid, &bt) in &self.times {
            if let Some(idx) = g.tx_by_label(txid) {
                let block_time = g.tx(idx).time;
                if bt > block_time + skew {
                    return Err(Error::parse(
                        "<broadcast-log>",
                        0,
                        format!(
                            "broadcast of {txid} at {bt} exceeds block time {block_time} + skew {skew}"
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

pub const DEFAULT_BROADCAST_SKEW: i64 = 7_200;

pub fn load_broadcasts(path: &Path) -> Result<BroadcastLog> {
    let file = File::open(path)?;
    load_broadcasts_from_reader(BufReader::new(file), &path.display().to_string())
}

pub fn load_broadcasts_from_reader(reader: impl BufRead, path: &str) -> Result<BroadcastLog> {
    let mut log = BroadcastLog::default();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (txid, ts) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(path, lineno, "expected txid,unix_timestamp"))?;
        let time: i64 = ts
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("non-numeric timestamp {ts:?}")))?;
        log.insert(txid.trim().to_string(), time);
    }
    Ok(log)
}

pub fn broadcasts_to_string(entries: &[(String, i64)]) -> String {
    let mut out = String::new();
    for (txid, t) in entries {
        out.push_str(&format!("{txid},{t}\n"));
    }
    out
}

/// Read a whole file as a string (small convenience used by the CLI).
pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    File::open(path)?.read_to_string(&mut s)?;
    Ok(s)
}
