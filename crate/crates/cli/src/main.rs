use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use pinsim_core::attack::transcript_csv;
use pinsim_core::harness::{
    calc_tolerance, default_seeds, run_binance_replay, run_scenario, run_scenario_logged, run_sweep, Grid,
    HarnessError, ScenarioConfig, ScenarioKey, SimParams,
};
use pinsim_core::mempool::{read_event_log, replay_events, write_event_log};

#[derive(Parser)]
#[command(name = "pinsim", version, about = "Transfer-pinning simulator for BRC20 tokens")]
struct Cli {
    /// TOML file with simulation parameters, sweep grid and seed count.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one attack scenario and print its per-attempt transcript.
    Sim {
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 100)]
        fee: u64,
        #[arg(long, default_value_t = 0.75)]
        congestion: f64,
        #[arg(long, default_value_t = 10)]
        attempts: u32,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Operational tolerance in seconds.
        #[arg(long)]
        tolerance: Option<u64>,
        /// Write the transcript here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the mempool event log (JSON lines).
        #[arg(long)]
        event_log: Option<PathBuf>,
    },
    /// Run every combination of the grid over a set of seeds and emit CSV.
    Sweep {
        #[arg(long)]
        seeds: Option<u64>,
        /// Worker threads; 0 uses every core.
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        fees: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        congestions: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        attempts: Option<Vec<u32>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay the exchange incident and check balances after every step.
    ReplayBinance {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seconds of frozen liquidity a service can absorb.
    Tolerance {
        #[arg(long)]
        avail: f64,
        #[arg(long)]
        req: f64,
        /// Tokens withdrawn per period.
        #[arg(long)]
        vol: f64,
        /// Period length: plain seconds or with an s, m, h or d suffix.
        #[arg(long, default_value = "1h", value_parser = parse_period)]
        period: u64,
    },
    /// Re-execute a mempool event log and verify every derived event.
    Replay { event_log: PathBuf },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    params: SimParams,
    grid: Option<Grid>,
    seeds: Option<u64>,
    workers: Option<usize>,
}

fn parse_period(raw: &str) -> Result<u64, String> {
    let (digits, unit) = match raw.find(|c: char| !c.is_ascii_digit()) {
        Some(i) => raw.split_at(i),
        None => (raw, "s"),
    };
    let n: u64 = digits.parse().map_err(|_| format!("bad period {raw:?}"))?;
    let scale = match unit {
        "s" => 1,
        "m" => 60,
        "h" => 3_600,
        "d" => 86_400,
        _ => return Err(format!("bad period unit in {raw:?}")),
    };
    match n * scale {
        0 => Err("period must be positive".into()),
        secs => Ok(secs),
    }
}

/// Errors that mean the model disagreed with its own checks, as opposed
/// to bad input.
#[derive(Debug)]
struct ModelFailure(String);

impl std::fmt::Display for ModelFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ModelFailure {}

fn harness(err: HarnessError) -> anyhow::Error {
    match err {
        HarnessError::Assertion { .. } => ModelFailure(err.to_string()).into(),
        other => other.into(),
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Sim {
            fraction,
            fee,
            congestion,
            attempts,
            seed,
            tolerance,
            out,
            event_log,
        } => {
            let mut params = file.params;
            if let Some(t) = tolerance {
                params.tolerance = t;
            }
            let config = ScenarioConfig {
                key: ScenarioKey {
                    fraction,
                    fee_rate: fee,
                    congestion,
                    attempts,
                },
                params,
            };
            let result = match &event_log {
                Some(path) => {
                    let (result, events) = run_scenario_logged(&config, seed).map_err(harness)?;
                    emit(&write_event_log(&events), Some(path))?;
                    result
                }
                None => run_scenario(&config, seed).map_err(harness)?,
            };
            let o = &result.outcome;
            eprintln!(
                "success={} pinned={} ({:.2}%) outage={}s congestion_at_start={:.3}",
                o.success,
                o.total_pinned,
                100.0 * o.pinned_fraction(),
                o.outage,
                result.congestion_at_start
            );
            emit(&transcript_csv(o), out.as_deref())
        }
        Command::Sweep {
            seeds,
            workers,
            fractions,
            fees,
            congestions,
            attempts,
            out,
        } => {
            let mut grid = file.grid.unwrap_or_default();
            if let Some(v) = fractions {
                grid.fractions = v;
            }
            if let Some(v) = fees {
                grid.fee_rates = v;
            }
            if let Some(v) = congestions {
                grid.congestions = v;
            }
            if let Some(v) = attempts {
                grid.attempts = v;
            }
            let seeds = default_seeds(seeds.or(file.seeds).unwrap_or(50));
            if seeds.is_empty() {
                bail!("need at least one seed");
            }
            let workers = workers.or(file.workers).unwrap_or(0);
            let result = run_sweep(&grid, &seeds, &file.params, workers).map_err(harness)?;
            emit(&result.to_csv(), out.as_deref())
        }
        Command::ReplayBinance { out } => {
            let transcript = run_binance_replay().map_err(harness)?;
            emit(&transcript.render(), out.as_deref())
        }
        Command::Tolerance { avail, req, vol, period } => {
            let secs = calc_tolerance(avail, req, vol, period as f64)?;
            println!("tolerance: {:?} h ({} s)", secs / 3_600.0, secs);
            Ok(())
        }
        Command::Replay { event_log } => {
            let text = std::fs::read_to_string(&event_log)
                .with_context(|| format!("reading {}", event_log.display()))?;
            let events = read_event_log(&text).context("parsing event log")?;
            let (chain, pool) = replay_events(&file.params.mempool, &events)
                .map_err(|e| ModelFailure(format!("replay diverged: {e}")))?;
            println!(
                "replayed {} events: height {}, {} in mempool",
                events.len(),
                chain.height(),
                pool.len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<ModelFailure>() => {
            eprintln!("model check failed: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
