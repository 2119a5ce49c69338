//! Blockchain transaction-graph analysis toolkit: address clustering,
//! JoinMarket-style CoinJoin detection, payment linkage and cluster
//! intersection attacks, plus a calibrated synthetic-chain generator and an
//! experiment harness that measures the attacks on generated chains.

pub mod attacks;
pub mod chain;
pub mod cluster;
pub mod error;
pub mod experiment;
pub mod ingest;
pub mod joins;
pub mod par;
pub mod rng;
pub mod synth;

pub use chain::{AddressId, AddressKind, ChainGraph, CoinRef, Satoshi, Transaction, TxIdx};
pub use error::{Error, Result};
