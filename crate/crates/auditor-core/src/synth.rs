//! Synthetic chain generation with planted ground truth.
//!
//! The generator emits the three canonical input files (chain export, trades
//! CSV, broadcast CSV) as a deterministic function of the seed. Background
//! traffic consists of two-output e-commerce payments priced from a fixed
//! pool and converted at a synthetic exchange-rate walk, plus JoinMarket-
//! shaped mix transactions at a configured fraction. A victim — a small
//! cluster of co-spending wallet addresses that mixes coins and then makes
//! purchases — can be planted on top, with full ground truth recorded for
//! scoring.
//!
//! Conventions that downstream measurements rely on:
//! - every generated join satisfies the detector's structural rules by
//!   construction (denomination output count, per-participant coverage,
//!   input count within the cutoff);
//! - join co-participants are one-shot wallets, except that hops before the
//!   final one may respend earlier mix outputs, drawn with a bias toward
//!   older coins the way confirmation-seeking coin selection behaves;
//! - the victim's purchase transactions always have two fresh regular
//!   outputs and are broadcast within one block interval of checkout.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::chain::{AddressKind, ChainGraph, TxIdx};
use crate::error::{Error, Result};
use crate::ingest::{self, InputRecord, OutputRecord, RateSeries, TradeTick, TxRecord};
use crate::joins::JoinSet;
use crate::rng::Rng;

/// Participant-count weights for n = 2..=17, a shifted negative binomial
/// fitted to mean 3.98 and standard deviation 1.72 and truncated so one coin
/// per participant never exceeds the 17-input detection cutoff.
pub const DEFAULT_PARTICIPANT_WEIGHTS: [u64; 16] = [
    3_358_471, 4_448_093, 3_682_020, 2_438_307, 1_412_859, 748_499, 371_753, 175_845, 80_058,
    35_344, 15_214, 6_411, 2_654, 1_081, 435, 173,
];

/// Default purchase-price pool in fiat cents: 100 log-normal values fitted to
/// observed merchant prices (min 1.52, max 359.00, median just under 25).
pub const DEFAULT_PRICE_POOL: [u64; 100] = [
    152, 185, 238, 285, 327, 368, 407, 445, 482, 519, 556, 593, 629, 666, 703, 740, 777, 815, 853,
    892, 931, 970, 1010, 1051, 1092, 1134, 1177, 1221, 1265, 1310, 1356, 1403, 1450, 1499, 1549,
    1600, 1652, 1706, 1760, 1816, 1873, 1932, 1992, 2054, 2117, 2182, 2249, 2318, 2389, 2462, 2537,
    2614, 2694, 2777, 2862, 2950, 3041, 3135, 3233, 3334, 3439, 3548, 3662, 3780, 3903, 4031, 4165,
    4305, 4452, 4606, 4768, 4938, 5117, 5306, 5505, 5717, 5942, 6181, 6437, 6710, 7004, 7320, 7662,
    8034, 8440, 8886, 9377, 9924, 10538, 11232, 12026, 12948, 14037, 15350, 16978, 19076, 21936,
    26196, 33701, 35900,
];

/// Default shipping-fee deltas in cents. Zero is always present: free
/// shipping is common and the zero delta is what planted purchases use.
pub fn default_shipping_pool() -> Vec<u64> {
    vec![0, 495, 595, 695, 795, 895, 995, 1295, 1495, 1995]
}

pub const GENESIS_TIME: i64 = 1_430_000_000;

// Internal calibration constants.
const FAUCET_OUTPUTS: usize = 64;
const FAUCET_COIN_VALUE: u64 = 1_000_000_000_000;
const RATE_START_CENTS: u64 = 250_000;
const RATE_STEP_CENTS: i64 = 150;
const RATE_MIN_CENTS: u64 = 150_000;
const RATE_MAX_CENTS: u64 = 400_000;
const VICTIM_COIN_VALUE: u64 = 50_000_000;
const VICTIM_HOP_SHRINK: u64 = 3_000;
const MIN_CHANGE: u64 = 5_000;
const DUST: u64 = 1_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Chain length in blocks.
    pub duration: u32,
    /// Seconds per block.
    pub block_interval: i64,
    /// Mean background transactions per block.
    pub background_tx_rate: f64,
    /// Fraction of background transactions that are join transactions.
    pub join_fraction: f64,
    /// Weights for participant counts n = 2..=17.
    pub join_participants: Vec<u64>,
    /// Purchase prices in fiat cents.
    pub price_pool: Vec<u64>,
    /// Shipping deltas in fiat cents; must contain 0.
    pub shipping_pool: Vec<u64>,
    /// Probability that a join is a sweep (one participant takes no change).
    pub sweep_probability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            duration: 1_000,
            block_interval: 600,
            background_tx_rate: 10.0,
            join_fraction: 0.0005,
            join_participants: DEFAULT_PARTICIPANT_WEIGHTS.to_vec(),
            price_pool: DEFAULT_PRICE_POOL.to_vec(),
            shipping_pool: default_shipping_pool(),
            sweep_probability: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.join_fraction) {
            return Err(Error::config("join_fraction must be within [0, 1]"));
        }
        if self.price_pool.is_empty() {
            return Err(Error::config("price_pool must be non-empty"));
        }
        if !self.shipping_pool.contains(&0) {
            return Err(Error::config("shipping_pool must contain 0"));
        }
        if self.block_interval < 2 {
            return Err(Error::config("block_interval must be at least 2 seconds"));
        }
        if self.background_tx_rate < 0.0 || !self.background_tx_rate.is_finite() {
            return Err(Error::config("background_tx_rate must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.sweep_probability) {
            return Err(Error::config("sweep_probability must be within [0, 1]"));
        }
        if self.join_participants.is_empty() || self.join_participants.len() > 16 {
            return Err(Error::config(
                "join_participants must hold 1..=16 weights (n = 2..=17)",
            ));
        }
        if self.join_participants.iter().all(|&w| w == 0) {
            return Err(Error::config("join_participants weights are all zero"));
        }
        Ok(())
    }

    pub fn block_time(&self, height: u32) -> i64 {
        GENESIS_TIME + height as i64 * self.block_interval
    }
}

/// Everything the generator emits.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub records: Vec<TxRecord>,
    pub trades: Vec<TradeTick>,
    /// (txid, broadcast time), in chain order.
    pub broadcasts: Vec<(String, i64)>,
    /// Ground truth: txids of every generated join transaction.
    pub join_txids: Vec<String>,
    /// Ground truth: txids of every background payment transaction.
    pub payment_txids: Vec<String>,
}

impl SynthOutput {
    pub fn chain_string(&self) -> String {
        ingest::records_to_string(&self.records)
    }

    pub fn trades_string(&self) -> String {
        ingest::trades_to_string(&self.trades)
    }

    pub fn broadcasts_string(&self) -> String {
        ingest::broadcasts_to_string(&self.broadcasts)
    }

    /// Load the generated chain into the analysis structures, which also
    /// re-validates every structural invariant.
    pub fn load(&self) -> Result<(ChainGraph, RateSeries, ingest::BroadcastLog)> {
        let graph = ingest::load_chain_from_str(&self.chain_string())?;
        let rates = RateSeries::from_ticks(self.trades.clone());
        let mut log = ingest::BroadcastLog::default();
        for (txid, t) in &self.broadcasts {
            log.insert(txid.clone(), *t);
        }
        Ok((graph, rates, log))
    }

    /// Ground-truth joins resolved against a loaded graph.
    pub fn join_set(&self, g: &ChainGraph) -> JoinSet {
        let ids: Vec<TxIdx> = self
            .join_txids
            .iter()
            .filter_map(|t| g.tx_by_label(t))
            .collect();
        JoinSet::from_sets(g.tx_count(), ids.clone(), ids)
    }
}

/// One planted mixed coin with its full path of join transactions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedCoinRecord {
    pub txid: String,
    pub vout: u32,
    pub rounds: u32,
    pub start_height: u32,
    pub completion_height: u32,
    /// Join txids along the path, in hop order.
    pub path: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurchaseRecord {
    pub txid: String,
    pub price_cents: u64,
    pub rate_cents: u64,
    pub checkout_time: i64,
    pub broadcast_time: i64,
    pub value_sats: u64,
    pub used_mixed_coin: bool,
    pub bitpay_rounded: bool,
}

/// Planted ground truth consumed by the experiment harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimRecord {
    pub wallet_addresses: Vec<String>,
    pub mixed_coins: Vec<MixedCoinRecord>,
    pub purchases: Vec<PurchaseRecord>,
}

impl VictimRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("victim record serializes")
    }

    pub fn from_json(s: &str) -> Result<VictimRecord> {
        serde_json::from_str(s).map_err(|e| Error::config(format!("bad victim record: {e}")))
    }
}

/// How plant_victim threads coins through joins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixThreading {
    /// Insert fresh join transactions for every hop (default).
    Insert,
    /// Ride existing joins where a feasible path exists; insert otherwise
    /// only if allowed.
    Reuse { allow_insert: bool },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurchaseSpec {
    pub checkout_time: i64,
    pub use_mixed: bool,
    #[serde(default)]
    pub bitpay_round: bool,
    /// Pin the purchase to a specific price-pool entry; None samples one.
    #[serde(default)]
    pub price_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VictimSpec {
    pub n_coins: usize,
    pub rounds: u32,
    pub purchases: Vec<PurchaseSpec>,
    #[serde(default = "default_threading")]
    pub threading: MixThreading,
}

fn default_threading() -> MixThreading {
    MixThreading::Insert
}

/// Generate a chain without a victim.
pub fn generate_chain(cfg: &SynthConfig) -> Result<SynthOutput> {
    let mut generator = Generator::new(cfg)?;
    generator.background()?;
    Ok(generator.finish())
}

/// Generate a chain and plant a victim; ground truth comes back alongside.
pub fn generate_with_victim(
    cfg: &SynthConfig,
    spec: &VictimSpec,
) -> Result<(SynthOutput, VictimRecord)> {
    let mut generator = Generator::new(cfg)?;
    generator.background()?;
    let victim = generator.plant_victim(spec)?;
    Ok((generator.finish(), victim))
}

#[derive(Debug, Clone)]
struct OwnedCoin {
    txid: String,
    vout: u32,
    addr: String,
    value: u64,
    height: u32,
}

#[derive(Debug, Clone)]
struct PoolCoin {
    coin: OwnedCoin,
    creator_join: String,
}

#[derive(Debug)]
struct Wallet {
    coins: Vec<OwnedCoin>,
}

#[derive(Debug, Clone)]
struct JoinMeta {
    txid: String,
    height: u32,
    denomination: u64,
    inputs: usize,
    block: usize,
    index_in_block: usize,
    victim_used: bool,
    /// Joins consuming one of this join's outputs.
    children: Vec<usize>,
}

struct JoinParticipant {
    input: OwnedCoin,
    fee: u64,
    give_change: bool,
    /// Marks the victim's slot so its outputs can be recovered.
    is_victim: bool,
}

struct Generator {
    cfg: SynthConfig,
    bg_rng: Rng,
    plant_rng: Rng,
    rates: RateSeries,
    trades: Vec<TradeTick>,
    blocks: Vec<Vec<TxRecord>>,
    broadcast_of: HashMap<String, i64>,
    tx_counter: u64,
    addr_counter: u64,
    faucet_coins: Vec<OwnedCoin>,
    plant_faucet_coins: Vec<OwnedCoin>,
    wallets: Vec<Wallet>,
    pool: Vec<PoolCoin>,
    joins: Vec<JoinMeta>,
    join_index_by_txid: HashMap<String, usize>,
    payment_txids: Vec<String>,
}

impl Generator {
    fn new(cfg: &SynthConfig) -> Result<Generator> {
        cfg.validate()?;
        let mut rates_rng = Rng::derive(cfg.seed, 0x7261_7465); // "rate"
        let bg_rng = Rng::derive(cfg.seed, 0x6261_636B); // "back"
        let plant_rng = Rng::derive(cfg.seed, 0x706C_616E); // "plan"

        // Exchange-rate walk: one tick per minute from one hour before
        // genesis to past the chain end, so a prevailing rate always exists
        // for any in-chain timestamp.
        let mut trades = Vec::new();
        if cfg.duration > 0 {
            let start = GENESIS_TIME - 3_600;
            let end = cfg.block_time(cfg.duration) + 3_600;
            let mut rate = RATE_START_CENTS as i64;
            let mut t = start;
            while t <= end {
                trades.push(TradeTick {
                    timestamp: t,
                    rate: rate as u64,
                });
                rate += rates_rng.i64_range(-RATE_STEP_CENTS, RATE_STEP_CENTS + 1);
                rate = rate.clamp(RATE_MIN_CENTS as i64, RATE_MAX_CENTS as i64);
                t += 60;
            }
        }

        Ok(Generator {
            cfg: cfg.clone(),
            bg_rng,
            plant_rng,
            rates: RateSeries::from_ticks(trades.clone()),
            trades,
            blocks: vec![Vec::new(); cfg.duration as usize],
            broadcast_of: HashMap::new(),
            tx_counter: 0,
            addr_counter: 0,
            faucet_coins: Vec::new(),
            plant_faucet_coins: Vec::new(),
            wallets: Vec::new(),
            pool: Vec::new(),
            joins: Vec::new(),
            join_index_by_txid: HashMap::new(),
            payment_txids: Vec::new(),
        })
    }

    fn next_txid(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}{:08}", self.tx_counter);
        self.tx_counter += 1;
        id
    }

    fn next_addr(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}{:08}", self.addr_counter);
        self.addr_counter += 1;
        id
    }

    fn block_time(&self, h: u32) -> i64 {
        self.cfg.block_time(h)
    }

    fn push(&mut self, height: u32, rec: TxRecord, broadcast: i64) {
        self.broadcast_of.insert(rec.txid.clone(), broadcast);
        self.blocks[height as usize].push(rec);
    }

    fn block_broadcast(&mut self, height: u32, plant: bool) -> i64 {
        let interval = self.cfg.block_interval;
        let block_time = self.cfg.block_time(height);
        let rng = if plant {
            &mut self.plant_rng
        } else {
            &mut self.bg_rng
        };
        block_time - rng.u64_below(interval as u64) as i64
    }

    /// Initial supply: one coinbase at height 0 with many large outputs.
    fn emit_genesis(&mut self) -> Result<()> {
        if self.cfg.duration == 0 {
            return Ok(());
        }
        let txid = self.next_txid("cb");
        let mut outputs = Vec::with_capacity(FAUCET_OUTPUTS);
        for i in 0..FAUCET_OUTPUTS {
            let addr = self.next_addr("fa");
            outputs.push(OutputRecord {
                addr: addr.clone(),
                kind: AddressKind::Regular,
                value: FAUCET_COIN_VALUE,
            });
            let coin = OwnedCoin {
                txid: txid.clone(),
                vout: (outputs.len() - 1) as u32,
                addr,
                value: FAUCET_COIN_VALUE,
                height: 0,
            };
            // Reserve a slice of the initial supply for victim planting so
            // early-height funding is always available.
            if i < FAUCET_OUTPUTS / 4 {
                self.plant_faucet_coins.push(coin);
            } else {
                self.faucet_coins.push(coin);
            }
        }
        let rec = TxRecord {
            txid: txid.clone(),
            height: 0,
            time: self.block_time(0),
            coinbase: true,
            op_return: false,
            inputs: vec![],
            outputs,
        };
        let bt = self.block_time(0);
        self.push(0, rec, bt);
        Ok(())
    }

    /// Pay `amount` from the faucet to `addr` at `height`, returning the new
    /// coin. The faucet change returns to the faucet.
    fn fund_to_address(
        &mut self,
        height: u32,
        amount: u64,
        addr: &str,
        plant: bool,
    ) -> Result<OwnedCoin> {
        let fee = 500u64;
        let faucet = if plant {
            &mut self.plant_faucet_coins
        } else {
            &mut self.faucet_coins
        };
        // Same-height spending is fine: the change was emitted earlier in the
        // same block, and the export keeps within-block order.
        let pos = faucet
            .iter()
            .position(|c| c.value >= amount + fee + DUST && c.height <= height)
            .ok_or_else(|| Error::config("faucet exhausted: configuration too large"))?;
        let source = faucet.remove(pos);
        let txid = self.next_txid("f");
        let change_addr = self.next_addr("fc");
        let change = source.value - amount - fee;
        let rec = TxRecord {
            txid: txid.clone(),
            height,
            time: self.block_time(height),
            coinbase: false,
            op_return: false,
            inputs: vec![InputRecord {
                txid: source.txid.clone(),
                vout: source.vout,
                addr: source.addr.clone(),
                kind: AddressKind::Regular,
                value: source.value,
            }],
            outputs: vec![
                OutputRecord {
                    addr: addr.to_string(),
                    kind: AddressKind::Regular,
                    value: amount,
                },
                OutputRecord {
                    addr: change_addr.clone(),
                    kind: AddressKind::Regular,
                    value: change,
                },
            ],
        };
        let bt = self.block_broadcast(height, plant);
        self.push(height, rec, bt);
        let change_coin = OwnedCoin {
            txid: txid.clone(),
            vout: 1,
            addr: change_addr,
            value: change,
            height,
        };
        if plant {
            self.plant_faucet_coins.push(change_coin);
        } else {
            self.faucet_coins.push(change_coin);
        }
        Ok(OwnedCoin {
            txid,
            vout: 0,
            addr: addr.to_string(),
            value: amount,
            height,
        })
    }

    /// Faucet payment to a fresh address with the given prefix.
    fn fund(
        &mut self,
        height: u32,
        amount: u64,
        addr_prefix: &str,
        plant: bool,
    ) -> Result<OwnedCoin> {
        let addr = self.next_addr(addr_prefix);
        self.fund_to_address(height, amount, &addr, plant)
    }

    /// One background e-commerce payment at `height`.
    fn emit_payment(&mut self, height: u32) -> Result<()> {
        let price_idx = self.bg_rng.usize_below(self.cfg.price_pool.len());
        let base = self.cfg.price_pool[price_idx];
        let shipping = if self.bg_rng.chance(1, 2) {
            0
        } else {
            let i = self.bg_rng.usize_below(self.cfg.shipping_pool.len());
            self.cfg.shipping_pool[i]
        };
        let total_cents = base + shipping;
        let broadcast = self.block_broadcast(height, false);
        let rate = self
            .rates
            .prevailing(broadcast)
            .ok_or_else(|| Error::config("rate series does not cover chain start"))?;
        let value = ingest::fiat_to_sats(total_cents, rate).0;
        let fee = 200 + self.bg_rng.u64_below(600);

        // Pick or create the paying wallet.
        let wallet_idx = if self.wallets.is_empty() || self.bg_rng.chance(1, 8) {
            self.wallets.push(Wallet { coins: Vec::new() });
            self.wallets.len() - 1
        } else {
            self.bg_rng.usize_below(self.wallets.len())
        };

        // Gather inputs: reuse wallet coins first, top up from the faucet.
        let needed = value + fee + DUST;
        let mut inputs: Vec<OwnedCoin> = Vec::new();
        let mut have = 0u64;
        while have < needed && !self.wallets[wallet_idx].coins.is_empty() && inputs.len() < 4 {
            let c = self.wallets[wallet_idx].coins.remove(0);
            if c.height >= height {
                // Same-block change is fine only if the earlier tx precedes
                // this one; wallet change always does, but keep it simple
                // and skip not-yet-buried coins.
                self.wallets[wallet_idx].coins.push(c);
                break;
            }
            have += c.value;
            inputs.push(c);
        }
        if have < needed {
            let top_up = needed - have + 100_000 + self.bg_rng.u64_below(2_000_000);
            let coin = self.fund(height, top_up, "w", false)?;
            have += coin.value;
            inputs.push(coin);
        }

        let txid = self.next_txid("p");
        let merchant_addr = self.next_addr("m");
        let merchant_kind = if self.bg_rng.chance(1, 50) {
            AddressKind::Multisig
        } else {
            AddressKind::Regular
        };
        let change_addr = self.next_addr("w");
        let change = have - value - fee;
        let rec = TxRecord {
            txid: txid.clone(),
            height,
            time: self.block_time(height),
            coinbase: false,
            op_return: false,
            inputs: inputs
                .iter()
                .map(|c| InputRecord {
                    txid: c.txid.clone(),
                    vout: c.vout,
                    addr: c.addr.clone(),
                    kind: AddressKind::Regular,
                    value: c.value,
                })
                .collect(),
            outputs: vec![
                OutputRecord {
                    addr: merchant_addr,
                    kind: merchant_kind,
                    value,
                },
                OutputRecord {
                    addr: change_addr.clone(),
                    kind: AddressKind::Regular,
                    value: change,
                },
            ],
        };
        self.push(height, rec, broadcast);
        self.payment_txids.push(txid.clone());
        self.wallets[wallet_idx].coins.push(OwnedCoin {
            txid,
            vout: 1,
            addr: change_addr,
            value: change,
            height,
        });
        Ok(())
    }

    /// Draw a pool coin of at least `min_value`, weighted toward older coins
    /// (quadratic in age). Returns None when nothing qualifies.
    fn draw_pool_coin(&mut self, height: u32, min_value: u64, plant: bool) -> Option<PoolCoin> {
        let candidates: Vec<usize> = self
            .pool
            .iter()
            .enumerate()
            .filter(|(_, p)| p.coin.value >= min_value && p.coin.height < height)
            .map(|(i, _)| i)
            .collect();
        if candidates.is_empty() {
            return None;
        }
        let weights: Vec<u64> = candidates
            .iter()
            .map(|&i| {
                let age = (height - self.pool[i].coin.height) as u64 + 1;
                age * age
            })
            .collect();
        let rng = if plant {
            &mut self.plant_rng
        } else {
            &mut self.bg_rng
        };
        let pick = candidates[rng.weighted_index(&weights)];
        Some(self.pool.remove(pick))
    }

    /// Emit a join transaction from a participant plan. Returns the txid
    /// and, when a victim slot is present, the victim's denomination output
    /// (vout, address).
    fn emit_join(
        &mut self,
        height: u32,
        denomination: u64,
        participants: Vec<JoinParticipant>,
        parent_joins: Vec<String>,
        plant: bool,
    ) -> Result<(String, Option<(u32, String)>)> {
        let txid = self.next_txid("j");

        // One denomination output per participant plus change outputs; change
        // values are kept distinct from the denomination and each other so
        // the detected denomination count is exact.
        struct OutSlot {
            addr: String,
            value: u64,
            victim_denom: bool,
            mix_output: bool,
        }
        let mut used_values: Vec<u64> = vec![denomination];
        let mut slots: Vec<OutSlot> = Vec::new();
        let mut inputs: Vec<InputRecord> = Vec::new();
        for p in &participants {
            debug_assert!(p.input.value >= denomination + p.fee);
            inputs.push(InputRecord {
                txid: p.input.txid.clone(),
                vout: p.input.vout,
                addr: p.input.addr.clone(),
                kind: AddressKind::Regular,
                value: p.input.value,
            });
            let mix_addr = self.next_addr(if p.is_victim { "vm" } else { "x" });
            slots.push(OutSlot {
                addr: mix_addr,
                value: denomination,
                victim_denom: p.is_victim,
                mix_output: !p.is_victim,
            });
            if p.give_change {
                let mut change = p.input.value - denomination - p.fee;
                while used_values.contains(&change) {
                    if change == 0 {
                        return Err(Error::config("join change collision unresolvable"));
                    }
                    change -= 1;
                }
                used_values.push(change);
                let change_addr = self.next_addr(if p.is_victim { "vc" } else { "xc" });
                slots.push(OutSlot {
                    addr: change_addr,
                    value: change,
                    victim_denom: false,
                    mix_output: false,
                });
            }
        }

        // Shuffle output order; the detector must not depend on position.
        {
            let rng = if plant {
                &mut self.plant_rng
            } else {
                &mut self.bg_rng
            };
            rng.shuffle(&mut slots);
        }

        let mut victim_denom_slot = None;
        let mut outputs = Vec::with_capacity(slots.len());
        for (i, s) in slots.iter().enumerate() {
            if s.victim_denom {
                victim_denom_slot = Some((i as u32, s.addr.clone()));
            }
            outputs.push(OutputRecord {
                addr: s.addr.clone(),
                kind: AddressKind::Regular,
                value: s.value,
            });
        }

        let rec = TxRecord {
            txid: txid.clone(),
            height,
            time: self.block_time(height),
            coinbase: false,
            op_return: false,
            inputs,
            outputs,
        };
        let bt = self.block_broadcast(height, plant);
        let block = height as usize;
        let index_in_block = self.blocks[block].len();
        self.push(height, rec, bt);

        // Non-victim denomination outputs become respendable mix coins.
        for (i, s) in slots.iter().enumerate() {
            if s.mix_output {
                self.pool.push(PoolCoin {
                    coin: OwnedCoin {
                        txid: txid.clone(),
                        vout: i as u32,
                        addr: s.addr.clone(),
                        value: s.value,
                        height,
                    },
                    creator_join: txid.clone(),
                });
            }
        }

        let meta_idx = self.joins.len();
        self.joins.push(JoinMeta {
            txid: txid.clone(),
            height,
            denomination,
            inputs: participants.len(),
            block,
            index_in_block,
            victim_used: participants.iter().any(|p| p.is_victim),
            children: Vec::new(),
        });
        self.join_index_by_txid.insert(txid.clone(), meta_idx);
        for parent in parent_joins {
            if let Some(&pi) = self.join_index_by_txid.get(&parent) {
                self.joins[pi].children.push(meta_idx);
            }
        }

        Ok((txid, victim_denom_slot))
    }

    /// One background join at `height`.
    fn emit_background_join(&mut self, height: u32) -> Result<()> {
        let table = self.cfg.join_participants.clone();
        let n = 2 + self.bg_rng.weighted_index(&table);
        let denomination = {
            let raw = 3_000_000 + self.bg_rng.u64_below(22_000_000);
            raw - raw % 1_000
        };
        let sweep = {
            let p = (self.cfg.sweep_probability * 1_000_000.0) as u64;
            self.bg_rng.chance(p, 1_000_000)
        };
        let mut participants = Vec::with_capacity(n);
        let mut parents = Vec::new();
        for i in 0..n {
            let fee = 300 + self.bg_rng.u64_below(1_200);
            let is_taker = i == n - 1;
            if is_taker && sweep {
                // Sweep taker: funded exactly, no change output.
                let coin = self.fund(height, denomination + fee, "s", false)?;
                participants.push(JoinParticipant {
                    input: coin,
                    fee,
                    give_change: false,
                    is_victim: false,
                });
                continue;
            }
            let drawn = if self.bg_rng.chance(35, 100) {
                self.draw_pool_coin(height, denomination + fee + MIN_CHANGE, false)
            } else {
                None
            };
            match drawn {
                Some(pc) => {
                    parents.push(pc.creator_join.clone());
                    participants.push(JoinParticipant {
                        input: pc.coin,
                        fee,
                        give_change: true,
                        is_victim: false,
                    });
                }
                None => {
                    let change = 50_000 + self.bg_rng.u64_below(1_000_000);
                    let coin = self.fund(height, denomination + fee + change, "s", false)?;
                    participants.push(JoinParticipant {
                        input: coin,
                        fee,
                        give_change: true,
                        is_victim: false,
                    });
                }
            }
        }
        self.emit_join(height, denomination, participants, parents, false)?;
        Ok(())
    }

    /// Generate all background traffic.
    fn background(&mut self) -> Result<()> {
        self.emit_genesis()?;
        if self.cfg.duration == 0 {
            return Ok(());
        }
        const SCALE: u64 = 4_294_967_296;
        let base = self.cfg.background_tx_rate.floor() as u64;
        let frac = ((self.cfg.background_tx_rate - base as f64) * SCALE as f64) as u64;
        let join_p = (self.cfg.join_fraction * SCALE as f64) as u64;
        for h in 1..self.cfg.duration {
            let mut count = base;
            if frac > 0 && self.bg_rng.chance(frac, SCALE) {
                count += 1;
            }
            for _ in 0..count {
                if join_p > 0 && self.bg_rng.chance(join_p, SCALE) {
                    self.emit_background_join(h)?;
                } else {
                    self.emit_payment(h)?;
                }
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Victim planting
    // ------------------------------------------------------------------

    fn plant_victim(&mut self, spec: &VictimSpec) -> Result<VictimRecord> {
        let duration = self.cfg.duration;
        let path_span = spec.rounds * 4 + 2;
        let lead_in = 8u32; // wallet setup blocks
        if duration < lead_in + path_span + 8 {
            return Err(Error::config(format!(
                "duration {duration} too short to plant a victim with {} rounds",
                spec.rounds
            )));
        }
        for p in &spec.purchases {
            let lo = self.cfg.block_time(lead_in + path_span);
            let hi = self.cfg.block_time(duration - 2);
            if p.checkout_time < lo || p.checkout_time >= hi {
                return Err(Error::config(format!(
                    "purchase checkout time {} outside the plantable window [{lo}, {hi})",
                    p.checkout_time
                )));
            }
        }
        let n_unmixed = spec.purchases.iter().filter(|p| !p.use_mixed).count();
        let n_mixed_purchases = spec.purchases.iter().filter(|p| p.use_mixed).count();
        if n_mixed_purchases > spec.n_coins {
            return Err(Error::config(format!(
                "{n_mixed_purchases} mixed purchases requested but only {} coins mixed",
                spec.n_coins
            )));
        }

        // Wallet: six addresses, made clusterable by one consolidating
        // co-spend, plus enough coins for mixing and unmixed purchases.
        let wallet_addrs: Vec<String> = (0..6).map(|_| self.next_addr("v")).collect();
        let mut link_coins = Vec::new();
        for (i, addr) in wallet_addrs.clone().iter().enumerate() {
            let h = 1 + (i as u32 % 3);
            let coin = self.fund_to_address(h, 50_000, addr, true)?;
            link_coins.push(coin);
        }
        let mut wallet_coins: Vec<OwnedCoin> = Vec::new();
        let total_coins = spec.n_coins + n_unmixed;
        for i in 0..total_coins {
            let h = 4 + (i as u32 % 3);
            let addr = wallet_addrs[i % 6].clone();
            wallet_coins.push(self.fund_to_address(h, VICTIM_COIN_VALUE, &addr, true)?);
        }
        // Consolidation co-spend: all six link coins in one transaction.
        {
            let txid = self.next_txid("vw");
            let rec = TxRecord {
                txid: txid.clone(),
                height: 7,
                time: self.block_time(7),
                coinbase: false,
                op_return: false,
                inputs: link_coins
                    .iter()
                    .map(|c| InputRecord {
                        txid: c.txid.clone(),
                        vout: c.vout,
                        addr: c.addr.clone(),
                        kind: AddressKind::Regular,
                        value: c.value,
                    })
                    .collect(),
                outputs: vec![OutputRecord {
                    addr: wallet_addrs[0].clone(),
                    kind: AddressKind::Regular,
                    value: 290_000,
                }],
            };
            let bt = self.block_broadcast(7, true);
            self.push(7, rec, bt);
        }

        // Mix events at heights sampled uniformly over the usable span.
        let mix_lo = lead_in;
        let mix_hi = duration - path_span - 4;
        let mut start_heights: Vec<u32> = (0..spec.n_coins)
            .map(|_| mix_lo + self.plant_rng.u64_below((mix_hi - mix_lo) as u64 + 1) as u32)
            .collect();
        start_heights.sort_unstable();

        let mut mixed_coins: Vec<MixedCoinRecord> = Vec::new();
        for (i, &start) in start_heights.iter().enumerate() {
            let coin = wallet_coins[i].clone();
            let rec = self.thread_mix(coin, start, spec.rounds, spec.threading)?;
            mixed_coins.push(rec);
        }

        // Purchases, processed in checkout order; mixed coins are consumed
        // in completion order so each purchase spends an existing coin.
        let mut purchase_order: Vec<usize> = (0..spec.purchases.len()).collect();
        purchase_order.sort_by_key(|&i| (spec.purchases[i].checkout_time, i));
        let mut by_completion: Vec<usize> = (0..mixed_coins.len()).collect();
        by_completion.sort_by_key(|&i| mixed_coins[i].completion_height);
        let mut next_mixed = 0usize;
        let mut next_unmixed = spec.n_coins; // tail of wallet_coins
        let placeholder = PurchaseRecord {
            txid: String::new(),
            price_cents: 0,
            rate_cents: 0,
            checkout_time: 0,
            broadcast_time: 0,
            value_sats: 0,
            used_mixed_coin: false,
            bitpay_rounded: false,
        };
        let mut purchases: Vec<PurchaseRecord> = vec![placeholder; spec.purchases.len()];
        for &pi in &purchase_order {
            let p = &spec.purchases[pi];
            let coin = if p.use_mixed {
                let mc = loop {
                    if next_mixed >= by_completion.len() {
                        return Err(Error::config(
                            "no mixed coin completed before a purchase checkout",
                        ));
                    }
                    let idx = by_completion[next_mixed];
                    next_mixed += 1;
                    let completion_time =
                        self.cfg.block_time(mixed_coins[idx].completion_height + 1);
                    if completion_time <= p.checkout_time {
                        break idx;
                    }
                };
                let m = &mixed_coins[mc];
                let (addr, value) = self.output_slot(&m.txid, m.vout);
                OwnedCoin {
                    txid: m.txid.clone(),
                    vout: m.vout,
                    addr,
                    value,
                    height: m.completion_height,
                }
            } else {
                let c = wallet_coins[next_unmixed].clone();
                next_unmixed += 1;
                c
            };
            purchases[pi] = self.emit_purchase(p, coin)?;
        }

        Ok(VictimRecord {
            wallet_addresses: wallet_addrs,
            mixed_coins,
            purchases,
        })
    }

    fn output_slot(&self, txid: &str, vout: u32) -> (String, u64) {
        for block in &self.blocks {
            for rec in block {
                if rec.txid == txid {
                    let o = &rec.outputs[vout as usize];
                    return (o.addr.clone(), o.value);
                }
            }
        }
        panic!("unknown output {txid}:{vout}");
    }

    /// Thread one wallet coin through `rounds` joins starting near
    /// `start_height`.
    fn thread_mix(
        &mut self,
        coin: OwnedCoin,
        start_height: u32,
        rounds: u32,
        threading: MixThreading,
    ) -> Result<MixedCoinRecord> {
        if rounds == 0 {
            return Ok(MixedCoinRecord {
                txid: coin.txid,
                vout: coin.vout,
                rounds: 0,
                start_height: coin.height,
                completion_height: coin.height,
                path: Vec::new(),
            });
        }
        match threading {
            MixThreading::Insert => self.thread_mix_insert(coin, start_height, rounds),
            MixThreading::Reuse { allow_insert } => {
                match self.try_thread_existing(&coin, start_height, rounds) {
                    Some(rec) => Ok(rec),
                    None if allow_insert => self.thread_mix_insert(coin, start_height, rounds),
                    None => Err(Error::config(format!(
                        "no join path of length {rounds} from height {start_height} and insertion disabled"
                    ))),
                }
            }
        }
    }

    /// Insert a fresh join for every hop. Co-participants of the final hop
    /// are always one-shot wallets; earlier hops respend pooled mix outputs
    /// with probability 1/2, drawn with the oldest-first bias.
    fn thread_mix_insert(
        &mut self,
        mut coin: OwnedCoin,
        start_height: u32,
        rounds: u32,
    ) -> Result<MixedCoinRecord> {
        let mut path = Vec::with_capacity(rounds as usize);
        let mut height = start_height.max(coin.height + 1);
        let start = height;
        for hop in 1..=rounds {
            let final_hop = hop == rounds; // the hop creating the mixed coin
            let denomination = coin.value - VICTIM_HOP_SHRINK;
            let victim_fee = 500u64;

            let table = self.cfg.join_participants.clone();
            let n_total = (2 + self.plant_rng.weighted_index(&table)).min(16);
            let n_co = n_total.saturating_sub(1).max(1);

            let mut participants = Vec::with_capacity(n_co + 1);
            let mut parents = Vec::new();
            participants.push(JoinParticipant {
                input: coin.clone(),
                fee: victim_fee,
                give_change: true,
                is_victim: true,
            });
            for _ in 0..n_co {
                let fee = 300 + self.plant_rng.u64_below(1_200);
                let drawn = if !final_hop && self.plant_rng.chance(1, 2) {
                    self.draw_pool_coin(height, denomination + fee + MIN_CHANGE, true)
                } else {
                    None
                };
                match drawn {
                    Some(pc) => {
                        parents.push(pc.creator_join.clone());
                        participants.push(JoinParticipant {
                            input: pc.coin,
                            fee,
                            give_change: true,
                            is_victim: false,
                        });
                    }
                    None => {
                        let change = 50_000 + self.plant_rng.u64_below(1_000_000);
                        let c = self.fund(height, denomination + fee + change, "o", true)?;
                        participants.push(JoinParticipant {
                            input: c,
                            fee,
                            give_change: true,
                            is_victim: false,
                        });
                    }
                }
            }

            let (txid, slot) = self.emit_join(height, denomination, participants, parents, true)?;
            let (denom_vout, denom_addr) = slot.expect("victim slot present");
            path.push(txid.clone());
            coin = OwnedCoin {
                txid,
                vout: denom_vout,
                addr: denom_addr,
                value: denomination,
                height,
            };
            // The next hop must reference this output from a later block.
            if hop < rounds {
                height += 1 + self.plant_rng.u64_below(3) as u32;
            }
        }
        Ok(MixedCoinRecord {
            txid: coin.txid,
            vout: coin.vout,
            rounds,
            start_height: start,
            completion_height: coin.height,
            path,
        })
    }

    /// Attempt to ride existing joins: sample a feasible strictly-ascending
    /// path through the recorded join graph and append the victim as an
    /// extra participant to each join on it.
    fn try_thread_existing(
        &mut self,
        coin: &OwnedCoin,
        start_height: u32,
        rounds: u32,
    ) -> Option<MixedCoinRecord> {
        const ATTEMPTS: usize = 64;
        for _ in 0..ATTEMPTS {
            let starts: Vec<usize> = self
                .joins
                .iter()
                .enumerate()
                .filter(|(_, j)| {
                    j.height == start_height
                        && j.height > coin.height
                        && !j.victim_used
                        && j.inputs < 17
                        && j.denomination + MIN_CHANGE <= coin.value
                })
                .map(|(i, _)| i)
                .collect();
            if starts.is_empty() {
                return None;
            }
            let mut at = starts[self.plant_rng.usize_below(starts.len())];
            let mut path = vec![at];
            let mut ok = true;
            for _ in 1..rounds {
                let here = self.joins[at].clone();
                let next: Vec<usize> = here
                    .children
                    .iter()
                    .copied()
                    .filter(|&c| {
                        let j = &self.joins[c];
                        j.height > here.height
                            && !j.victim_used
                            && j.inputs < 17
                            && j.denomination + MIN_CHANGE <= here.denomination
                            && !path.contains(&c)
                    })
                    .collect();
                if next.is_empty() {
                    ok = false;
                    break;
                }
                at = next[self.plant_rng.usize_below(next.len())];
                path.push(at);
            }
            if !ok {
                continue;
            }
            return Some(self.append_victim_to_path(coin.clone(), &path));
        }
        None
    }

    /// Append the victim as one more participant to each join on `path`.
    fn append_victim_to_path(&mut self, mut coin: OwnedCoin, path: &[usize]) -> MixedCoinRecord {
        let start = self.joins[path[0]].height;
        let mut txids = Vec::with_capacity(path.len());
        for &ji in path {
            let meta = self.joins[ji].clone();
            let denomination = meta.denomination;
            let fee = 500u64;
            let mix_addr = self.next_addr("vm");
            let change_addr = self.next_addr("vc");
            let rec = &mut self.blocks[meta.block][meta.index_in_block];
            debug_assert_eq!(rec.txid, meta.txid);
            rec.inputs.push(InputRecord {
                txid: coin.txid.clone(),
                vout: coin.vout,
                addr: coin.addr.clone(),
                kind: AddressKind::Regular,
                value: coin.value,
            });
            let denom_vout = rec.outputs.len() as u32;
            rec.outputs.push(OutputRecord {
                addr: mix_addr.clone(),
                kind: AddressKind::Regular,
                value: denomination,
            });
            let mut change = coin.value - denomination - fee;
            while rec.outputs.iter().any(|o| o.value == change) && change > 0 {
                change -= 1;
            }
            rec.outputs.push(OutputRecord {
                addr: change_addr,
                kind: AddressKind::Regular,
                value: change,
            });
            self.joins[ji].victim_used = true;
            self.joins[ji].inputs += 1;
            txids.push(meta.txid.clone());
            coin = OwnedCoin {
                txid: meta.txid.clone(),
                vout: denom_vout,
                addr: mix_addr,
                value: denomination,
                height: meta.height,
            };
        }
        MixedCoinRecord {
            txid: coin.txid,
            vout: coin.vout,
            rounds: path.len() as u32,
            start_height: start,
            completion_height: coin.height,
            path: txids,
        }
    }

    /// Emit one victim purchase spending `coin` at the requested checkout time.
    fn emit_purchase(&mut self, spec: &PurchaseSpec, coin: OwnedCoin) -> Result<PurchaseRecord> {
        let price_idx = match spec.price_index {
            Some(i) => i % self.cfg.price_pool.len(),
            None => self.plant_rng.usize_below(self.cfg.price_pool.len()),
        };
        let price_cents = self.cfg.price_pool[price_idx];
        let rate = self
            .rates
            .prevailing(spec.checkout_time)
            .ok_or_else(|| Error::config("rate series does not cover checkout time"))?;
        let mut value = ingest::fiat_to_sats(price_cents, rate).0;
        if spec.bitpay_round {
            value = round_to_hundred(value);
        }
        let interval = self.cfg.block_interval;
        let delay = 1 + self.plant_rng.u64_below((interval - 1) as u64) as i64;
        let broadcast = spec.checkout_time + delay;
        let height = ((broadcast - GENESIS_TIME + interval - 1) / interval) as u32;
        if height as usize >= self.blocks.len() {
            return Err(Error::config("purchase falls beyond chain duration"));
        }
        let fee = 400u64;
        if coin.value < value + fee + DUST {
            return Err(Error::config(format!(
                "victim coin {} too small for purchase of {value} sats",
                coin.value
            )));
        }
        if coin.height >= height {
            return Err(Error::config(
                "purchase checkout precedes the coin's availability",
            ));
        }
        let txid = self.next_txid("q");
        let merchant = self.next_addr("m");
        let change_addr = self.next_addr("vq");
        let rec = TxRecord {
            txid: txid.clone(),
            height,
            time: self.block_time(height),
            coinbase: false,
            op_return: false,
            inputs: vec![InputRecord {
                txid: coin.txid.clone(),
                vout: coin.vout,
                addr: coin.addr.clone(),
                kind: AddressKind::Regular,
                value: coin.value,
            }],
            outputs: vec![
                OutputRecord {
                    addr: merchant,
                    kind: AddressKind::Regular,
                    value,
                },
                OutputRecord {
                    addr: change_addr,
                    kind: AddressKind::Regular,
                    value: coin.value - value - fee,
                },
            ],
        };
        self.push(height, rec, broadcast);
        Ok(PurchaseRecord {
            txid,
            price_cents,
            rate_cents: rate,
            checkout_time: spec.checkout_time,
            broadcast_time: broadcast,
            value_sats: value,
            used_mixed_coin: spec.use_mixed,
            bitpay_rounded: spec.bitpay_round,
        })
    }

    fn finish(self) -> SynthOutput {
        let mut records = Vec::new();
        let mut broadcasts = Vec::new();
        for block in self.blocks {
            for rec in block {
                let bt = self.broadcast_of[&rec.txid];
                broadcasts.push((rec.txid.clone(), bt));
                records.push(rec);
            }
        }
        SynthOutput {
            records,
            trades: self.trades,
            broadcasts,
            join_txids: self.joins.iter().map(|j| j.txid.clone()).collect(),
            payment_txids: self.payment_txids,
        }
    }
}

/// Round to the nearest multiple of 100 satoshis, half to even at the
/// midpoint, the way the rounding payment processor quotes amounts.
pub fn round_to_hundred(v: u64) -> u64 {
    let q = v / 100;
    let r = v % 100;
    let up = match r.cmp(&50) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => q % 2 == 1,
    };
    if up {
        (q + 1) * 100
    } else {
        q * 100
    }
}

/// Uniformly sample a directed path of `r` join transactions whose first
/// transaction sits at `start_height`, using path counting so every
/// qualifying path is equally likely. Returns None when no such path exists
/// (callers retry from a different initial height).
pub fn simulate_mix_path(
    g: &ChainGraph,
    joins: &JoinSet,
    start_height: u32,
    r: u32,
    rng: &mut Rng,
) -> Option<Vec<TxIdx>> {
    assert!(r >= 1, "a mix path has at least one join");
    let successors = |t: TxIdx| -> Vec<TxIdx> {
        let tx = g.tx(t);
        let mut out: Vec<TxIdx> = (0..tx.outputs.len() as u32)
            .filter_map(|vout| g.spender_of(crate::chain::CoinRef { tx: t, vout }))
            .filter(|&s| joins.is_join(s))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    };

    fn count_paths(
        t: TxIdx,
        len: u32,
        succ: &dyn Fn(TxIdx) -> Vec<TxIdx>,
        memo: &mut HashMap<(TxIdx, u32), u64>,
    ) -> u64 {
        if len == 1 {
            return 1;
        }
        if let Some(&c) = memo.get(&(t, len)) {
            return c;
        }
        let total = succ(t)
            .into_iter()
            .map(|s| count_paths(s, len - 1, succ, memo))
            .sum();
        memo.insert((t, len), total);
        total
    }

    let mut memo: HashMap<(TxIdx, u32), u64> = HashMap::new();
    let starts: Vec<TxIdx> = joins
        .superset()
        .iter()
        .copied()
        .filter(|&t| g.tx(t).height == start_height)
        .collect();
    if starts.is_empty() {
        return None;
    }
    let weights: Vec<u64> = starts
        .iter()
        .map(|&t| count_paths(t, r, &successors, &mut memo))
        .collect();
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return None;
    }
    let mut at = starts[rng.weighted_index(&weights)];
    let mut path = vec![at];
    for remaining in (1..r).rev() {
        let nexts = successors(at);
        let w: Vec<u64> = nexts
            .iter()
            .map(|&s| count_paths(s, remaining, &successors, &mut memo))
            .collect();
        at = nexts[rng.weighted_index(&w)];
        path.push(at);
    }
    Some(path)
}
