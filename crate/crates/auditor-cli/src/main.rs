//! `auditor` — chain-analysis CLI: synthetic chain generation, ingestion
//! checks, clustering, join detection, the two attacks, and the experiment
//! drivers. Exit codes: 0 success, 2 configuration error, 3 data error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use auditor_core::attacks::{
    adversary_decide, candidate_transactions, cluster_intersection, BroadcastView, Decision,
    IntersectionOutcome, LinkageFilters, LinkageQuery,
};
use auditor_core::chain::{ChainGraph, CoinRef};
use auditor_core::cluster::cluster_all;
use auditor_core::error::Error;
use auditor_core::experiment::{
    manifest_json, prepare_linkage_materials, run_end_to_end, run_intersection_experiment,
    run_linkage_experiment, EndToEndConfig, IntersectionExperimentConfig, LinkageExperimentConfig,
};
use auditor_core::ingest::{self, BroadcastLog, RateSeries};
use auditor_core::joins::{detect_joins, join_census, JoinDetectionParams};
use auditor_core::rng::Rng;
use auditor_core::synth::{
    generate_chain, generate_with_victim, MixThreading, PurchaseSpec, SynthConfig, VictimSpec,
};

#[derive(Parser)]
#[command(
    name = "auditor",
    version,
    about = "Blockchain deanonymization analysis toolkit"
)]
struct Cli {
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config file for the subcommand, where applicable.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for produced files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ChainArgs {
    /// Chain export (JSON lines).
    #[arg(long)]
    chain: PathBuf,
    /// Exchange trades CSV.
    #[arg(long)]
    trades: Option<PathBuf>,
    /// Broadcast-timestamp CSV.
    #[arg(long)]
    broadcasts: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic chain (and optionally plant a victim).
    Gen {
        #[arg(long)]
        duration: Option<u32>,
        #[arg(long)]
        background_rate: Option<f64>,
        #[arg(long)]
        join_fraction: Option<f64>,
        /// Plant a victim with this many mixed coins.
        #[arg(long)]
        victim_coins: Option<usize>,
        /// Rounds of mixing for each victim coin.
        #[arg(long, default_value_t = 2)]
        victim_rounds: u32,
        /// Victim purchases (mixed coins, evenly spaced).
        #[arg(long, default_value_t = 0)]
        victim_purchases: usize,
    },
    /// Load and validate the three input files; print a summary.
    Ingest {
        #[command(flatten)]
        chain: ChainArgs,
        /// Allowed broadcast-after-block skew in seconds.
        #[arg(long, default_value_t = ingest::DEFAULT_BROADCAST_SKEW)]
        skew: i64,
    },
    /// Cluster all addresses; emit CSV (address,cluster).
    Cluster {
        #[command(flatten)]
        chain: ChainArgs,
        /// Treat no transactions as mixes (clusters across joins).
        #[arg(long)]
        no_mix_exclusion: bool,
    },
    /// Identify join transactions; emit id lists and a census CSV.
    DetectJoins {
        #[command(flatten)]
        chain: ChainArgs,
        #[arg(long, default_value_t = 17)]
        max_inputs: usize,
        #[arg(long, default_value_t = 10_000)]
        fee_floor: u64,
    },
    /// Single payment-linkage query; JSON result on stdout.
    Linkage {
        #[command(flatten)]
        chain: ChainArgs,
        /// Candidate fiat totals in cents (repeatable).
        #[arg(long, required = true)]
        price: Vec<u64>,
        #[arg(long)]
        checkout_time: i64,
        #[arg(long, default_value_t = 900)]
        pay_window: i64,
        #[arg(long, default_value_t = 300)]
        rate_window: i64,
        #[arg(long, default_value_t = 100)]
        tolerance: u64,
        #[arg(long)]
        bitpay: bool,
    },
    /// Cluster-intersection attack over observed coins; JSON on stdout.
    Intersect {
        #[command(flatten)]
        chain: ChainArgs,
        /// Observed coins as txid:vout (repeatable).
        #[arg(long = "coin", required = true)]
        coins: Vec<String>,
        /// Assumed rounds of mixing.
        #[arg(long)]
        rounds: u32,
    },
    /// Experiment drivers.
    Experiment {
        #[command(subcommand)]
        which: ExperimentCmd,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Payment-linkage study over the uncertainty grid.
    Linkage,
    /// Cluster-intersection study over rounds and observations.
    Intersection,
    /// Combined linkage + intersection attack over purchase pairs.
    EndToEnd,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = ingest::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))
        }
    }
}

fn load_inputs(args: &ChainArgs) -> Result<(ChainGraph, RateSeries, BroadcastLog), Error> {
    let graph = ingest::load_chain(&args.chain)?;
    let rates = match &args.trades {
        Some(p) => ingest::load_trades(p)?,
        None => RateSeries::default(),
    };
    let log = match &args.broadcasts {
        Some(p) => ingest::load_broadcasts(p)?,
        None => BroadcastLog::default(),
    };
    Ok((graph, rates, log))
}

fn write(dir: &Path, name: &str, content: &str) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), content)?;
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let seed = cli.seed;
    let config = cli.config.clone();
    let out = cli.out.clone();
    match cli.command {
        Command::Gen {
            duration,
            background_rate,
            join_fraction,
            victim_coins,
            victim_rounds,
            victim_purchases,
        } => {
            let mut cfg: SynthConfig = load_json_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = duration {
                cfg.duration = d;
            }
            if let Some(r) = background_rate {
                cfg.background_tx_rate = r;
            }
            if let Some(j) = join_fraction {
                cfg.join_fraction = j;
            }
            let (output, victim) = match victim_coins {
                None => (generate_chain(&cfg)?, None),
                Some(n_coins) => {
                    if victim_purchases > n_coins {
                        return Err(Error::config("victim_purchases cannot exceed victim_coins"));
                    }
                    // Purchases in the back half of the chain, evenly spaced.
                    let lo = cfg.block_time(cfg.duration / 2);
                    let hi = cfg.block_time(cfg.duration.saturating_sub(3));
                    let purchases = (0..victim_purchases)
                        .map(|i| PurchaseSpec {
                            checkout_time: lo
                                + (hi - lo) * i as i64 / victim_purchases.max(1) as i64,
                            use_mixed: true,
                            bitpay_round: false,
                            price_index: None,
                        })
                        .collect();
                    let spec = VictimSpec {
                        n_coins,
                        rounds: victim_rounds,
                        purchases,
                        threading: MixThreading::Insert,
                    };
                    let (o, v) = generate_with_victim(&cfg, &spec)?;
                    (o, Some(v))
                }
            };
            write(&out, "chain.jsonl", &output.chain_string())?;
            write(&out, "trades.csv", &output.trades_string())?;
            write(&out, "broadcasts.csv", &output.broadcasts_string())?;
            if let Some(v) = victim {
                write(&out, "victim.json", &v.to_json())?;
            }
            println!(
                "generated {} transactions ({} joins, {} payments)",
                output.records.len(),
                output.join_txids.len(),
                output.payment_txids.len()
            );
            Ok(())
        }

        Command::Ingest { chain, skew } => {
            let (graph, rates, log) = load_inputs(&chain)?;
            log.validate(&graph, skew)?;
            println!("transactions: {}", graph.tx_count());
            println!("addresses:    {}", graph.address_count());
            println!(
                "height range: 0..={}",
                graph.tip_height().map(|h| h as i64).unwrap_or(-1)
            );
            println!("trade ticks:  {}", rates.ticks().len());
            println!("broadcasts:   {}", log.len());
            Ok(())
        }

        Command::Cluster {
            chain,
            no_mix_exclusion,
        } => {
            let (graph, _, _) = load_inputs(&chain)?;
            let joins = if no_mix_exclusion {
                auditor_core::joins::JoinSet::empty(graph.tx_count())
            } else {
                detect_joins(&graph, &JoinDetectionParams::default())
            };
            let assignment = cluster_all(&graph, &joins);
            let mut csv = String::from("address,cluster\n");
            for (addr, cluster) in assignment.iter() {
                csv.push_str(&format!(
                    "{},{}\n",
                    graph.address_label(addr),
                    graph.address_label(auditor_core::AddressId(cluster.0))
                ));
            }
            write(&out, "clusters.csv", &csv)?;
            let distinct: std::collections::HashSet<_> =
                assignment.iter().map(|(_, c)| c).collect();
            println!(
                "{} addresses in {} clusters",
                assignment.address_count(),
                distinct.len()
            );
            Ok(())
        }

        Command::DetectJoins {
            chain,
            max_inputs,
            fee_floor,
        } => {
            let (graph, _, _) = load_inputs(&chain)?;
            let params = JoinDetectionParams {
                max_inputs,
                fee_floor: auditor_core::Satoshi(fee_floor),
                ..JoinDetectionParams::default()
            };
            let joins = detect_joins(&graph, &params);
            let mut superset = String::new();
            for &t in joins.superset() {
                superset.push_str(graph.tx_label(t));
                superset.push('\n');
            }
            let mut subset = String::new();
            for &t in joins.subset() {
                subset.push_str(graph.tx_label(t));
                subset.push('\n');
            }
            let census = join_census(&graph, &joins);
            let mut csv = String::from("txid,participants,denomination,component\n");
            for e in &census {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    graph.tx_label(e.tx),
                    e.participants,
                    e.denomination.0,
                    e.component
                ));
            }
            write(&out, "joins_superset.txt", &superset)?;
            write(&out, "joins_subset.txt", &subset)?;
            write(&out, "joins_census.csv", &csv)?;
            println!(
                "superset: {} txs; giant component: {} txs",
                joins.superset().len(),
                joins.subset().len()
            );
            Ok(())
        }

        Command::Linkage {
            chain,
            price,
            checkout_time,
            pay_window,
            rate_window,
            tolerance,
            bitpay,
        } => {
            let (graph, rates, log) = load_inputs(&chain)?;
            let view = BroadcastView::new(&graph, &log);
            let query = LinkageQuery {
                price_set: price,
                checkout_time,
                pay_window,
                rate_window_len: rate_window,
                match_tolerance: tolerance,
                filters: LinkageFilters {
                    bitpay_rounding: bitpay,
                    ..LinkageFilters::default()
                },
            };
            query.validate()?;
            let candidates = candidate_transactions(&graph, &view, &rates, &query);
            let mut rng = Rng::new(seed.unwrap_or(0));
            let decision = adversary_decide(&candidates, &mut rng);
            let result = serde_json::json!({
                "candidates": candidates.iter().map(|&t| graph.tx_label(t)).collect::<Vec<_>>(),
                "anonymity_set_size": candidates.len(),
                "decision": match decision {
                    Decision::Match(t) => serde_json::json!({"match": graph.tx_label(t)}),
                    Decision::NoTransaction => serde_json::json!("no_transaction"),
                },
            });
            println!("{}", serde_json::to_string_pretty(&result).expect("json"));
            Ok(())
        }

        Command::Intersect {
            chain,
            coins,
            rounds,
        } => {
            let (graph, _, _) = load_inputs(&chain)?;
            let joins = detect_joins(&graph, &JoinDetectionParams::default());
            let assignment = cluster_all(&graph, &joins);
            let mut parsed: Vec<CoinRef> = Vec::new();
            for c in &coins {
                let (txid, vout) = c
                    .rsplit_once(':')
                    .ok_or_else(|| Error::config(format!("coin {c:?} is not txid:vout")))?;
                let tx = graph
                    .tx_by_label(txid)
                    .ok_or_else(|| Error::config(format!("unknown transaction {txid}")))?;
                let vout: u32 = vout
                    .parse()
                    .map_err(|_| Error::config(format!("bad vout in {c:?}")))?;
                if vout as usize >= graph.tx(tx).outputs.len() {
                    return Err(Error::config(format!("{c}: output index out of range")));
                }
                parsed.push(CoinRef { tx, vout });
            }
            let outcome = cluster_intersection(&graph, &joins, &assignment, &parsed, rounds);
            let result = match outcome {
                IntersectionOutcome::Unique(c) => serde_json::json!({
                    "outcome": "unique",
                    "cluster": graph.address_label(auditor_core::AddressId(c.0)),
                }),
                IntersectionOutcome::IncorrectAssumptions => {
                    serde_json::json!({"outcome": "incorrect_assumptions"})
                }
                IntersectionOutcome::Ambiguous(cs) => serde_json::json!({
                    "outcome": "ambiguous",
                    "clusters": cs.iter()
                        .map(|c| graph.address_label(auditor_core::AddressId(c.0)))
                        .collect::<Vec<_>>(),
                }),
            };
            println!("{}", serde_json::to_string_pretty(&result).expect("json"));
            Ok(())
        }

        Command::Experiment { which } => match which {
            ExperimentCmd::Linkage => {
                let mut cfg: LinkageExperimentConfig = load_json_config(&config)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let materials = prepare_linkage_materials(&cfg)?;
                let report = run_linkage_experiment(&materials, &cfg)?;
                write(&out, "linkage_cells.csv", &report.cells_csv())?;
                write(&out, "linkage_histogram.csv", &report.histogram_csv())?;
                write(&out, "linkage_trials.csv", &report.trials_csv())?;
                write(&out, "manifest.json", &manifest_json("linkage", &cfg))?;
                for cell in &report.cells {
                    println!(
                        "pay={} rate={} prices={}: TPR {:.3} TNR {:.3} mean anonymity {:.2}",
                        cell.pay_window,
                        cell.rate_window,
                        cell.price_set_size,
                        cell.tpr(),
                        cell.tnr(),
                        cell.mean_anonymity()
                    );
                }
                Ok(())
            }
            ExperimentCmd::Intersection => {
                let mut cfg: IntersectionExperimentConfig = load_json_config(&config)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let report = run_intersection_experiment(&cfg)?;
                write(&out, "intersection_cells.csv", &report.cells_csv())?;
                write(&out, "intersection_age.csv", &report.age_csv())?;
                write(&out, "intersection_trials.csv", &report.trials_csv())?;
                write(&out, "manifest.json", &manifest_json("intersection", &cfg))?;
                for cell in &report.cells {
                    println!(
                        "r={} t={}: success {:.3}{}",
                        cell.rounds,
                        cell.observations,
                        cell.success_rate(),
                        if cell.infeasible { " (infeasible)" } else { "" }
                    );
                }
                Ok(())
            }
            ExperimentCmd::EndToEnd => {
                let mut cfg: EndToEndConfig = load_json_config(&config)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                let report = run_end_to_end(&cfg)?;
                write(&out, "end_to_end_pairs.csv", &report.pairs_csv())?;
                write(&out, "manifest.json", &manifest_json("end_to_end", &cfg))?;
                println!(
                    "{} pairs: {} identified correctly, {} abstentions",
                    report.pairs.len(),
                    report.successes,
                    report.abstentions
                );
                Ok(())
            }
        },
    }
}
