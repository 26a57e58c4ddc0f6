//! Scenario runner, parameter sweep and the scripted exchange incident.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{
    attack_wallet, execute, AttackConfig, AttackError, AttackOutcome, FeeBand, FeePolicy, InscriptionStatus,
};
use crate::background::{BackgroundConfig, CongestionProfile, FeeDistribution};
use crate::brc20::{deploy_payload, mint_payload, Amount, Balance};
use crate::chain::{Address, Transaction, TxInput, TxOutput, SEQUENCE_FINAL};
use crate::mempool::{Event, MempoolConfig};
use crate::sim::{SimConfig, Simulation};
use crate::wallet::{build_recovery, build_transfer, TransferBundle, TransferRequest, WalletConfig};

pub const TICK: &str = "ordi";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("step {step}: {message}")]
    Assertion { step: String, message: String },
}

/// Everything about a run except the four swept axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub mempool: MempoolConfig,
    pub background: BackgroundConfig,
    pub fees: FeeDistribution,
    pub policy: FeePolicy,
    /// Operational tolerance in seconds.
    pub tolerance: u64,
    /// Blocks of background traffic before the first attempt.
    pub warmup_blocks: u64,
    /// Seconds observed after the first attempt; the same for every attempt
    /// count so runs differing only in attempts stay comparable.
    pub horizon: u64,
    pub initial_balance: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        let mempool = MempoolConfig::default();
        let tolerance = 1_800;
        SimParams {
            horizon: 10 * mempool.block_interval + tolerance + mempool.block_interval,
            mempool,
            background: BackgroundConfig::default(),
            fees: FeeDistribution::default(),
            policy: FeePolicy::default(),
            tolerance,
            warmup_blocks: 60,
            initial_balance: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ScenarioKey {
    pub fraction: f64,
    pub fee_rate: u64,
    pub congestion: f64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub key: ScenarioKey,
    #[serde(default)]
    pub params: SimParams,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let k = &self.key;
        if !(0.0..=1.0).contains(&k.fraction) {
            return Err(HarnessError::Config(format!("fraction {} outside [0, 1]", k.fraction)));
        }
        if !(0.0..=1.0).contains(&k.congestion) {
            return Err(HarnessError::Config(format!("congestion {} outside [0, 1]", k.congestion)));
        }
        if k.fee_rate == 0 || k.attempts == 0 {
            return Err(HarnessError::Config("fee rate and attempts must be positive".into()));
        }
        self.params.mempool.validate().map_err(HarnessError::Config)?;
        if self.params.initial_balance == 0 {
            return Err(HarnessError::Config("initial balance must be positive".into()));
        }
        Ok(())
    }

    fn sim_config(&self, seed: u64, log_events: bool) -> SimConfig {
        SimConfig {
            mempool: self.params.mempool.clone(),
            background: self.params.background.clone(),
            profile: CongestionProfile {
                target_level: self.key.congestion,
                fees: self.params.fees.clone(),
                seed,
            },
            log_events,
        }
    }

    fn attack(&self) -> AttackConfig {
        AttackConfig {
            target: addr("target"),
            attacker: addr("attacker"),
            tick: TICK.to_string(),
            fraction: self.key.fraction,
            band: FeeBand::collapsed(self.key.fee_rate).expect("positive fee"),
            policy: self.params.policy,
            attempts: self.key.attempts,
            tolerance: self.params.tolerance,
            horizon: self.params.horizon,
            spacing: None,
            rbf: true,
            wallet: attack_wallet(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub key: ScenarioKey,
    pub seed: u64,
    /// Pool size over normal at the first attempt.
    pub congestion_at_start: f64,
    pub outcome: AttackOutcome,
}

impl ScenarioResult {
    /// Tx2 delay of every attempt that actually sent something.
    pub fn delays(&self) -> impl Iterator<Item = u64> + '_ {
        self.outcome
            .per_attempt
            .iter()
            .filter(|a| a.status != InscriptionStatus::Skipped)
            .filter_map(|a| a.effective_delay)
    }
}

fn addr(label: &str) -> Address {
    Address::new(label).expect("non-empty label")
}

/// A confirmed-soon transaction carrying `payload`, owned by `owner`.
fn inscribe(sim: &mut Simulation, owner: &Address, payload: String, fee_rate: u64) -> Transaction {
    let vsize = 150;
    let coin = sim.fund(owner, 546 + fee_rate * vsize);
    let tx = Transaction::new(
        vec![TxInput::new(coin.outpoint, SEQUENCE_FINAL)],
        vec![TxOutput::inscribed(546, owner.clone(), payload)],
        vsize,
    );
    sim.submit(tx.clone()).expect("fresh coin");
    tx
}

/// Deploys the tick and mints `amounts` in the next block, outbidding any
/// background traffic.
fn seed_balances(sim: &mut Simulation, max: u64, amounts: &[(&Address, u64)]) {
    let deployer = addr("deployer");
    inscribe(sim, &deployer, deploy_payload(TICK, &max.into(), &max.into()), 100_000);
    for (owner, amount) in amounts {
        inscribe(sim, owner, mint_payload(TICK, &(*amount).into()), 50_000);
    }
}

pub fn run_scenario(config: &ScenarioConfig, seed: u64) -> Result<ScenarioResult, HarnessError> {
    Ok(simulate(config, seed, false)?.0)
}

/// Like `run_scenario`, also returning the mempool event log of the run.
pub fn run_scenario_logged(config: &ScenarioConfig, seed: u64) -> Result<(ScenarioResult, Vec<Event>), HarnessError> {
    let (result, mut sim) = simulate(config, seed, true)?;
    Ok((result, sim.pool_mut().take_events()))
}

fn simulate(config: &ScenarioConfig, seed: u64, log_events: bool) -> Result<(ScenarioResult, Simulation), HarnessError> {
    config.validate()?;
    let attack = config.attack();
    let mut sim = Simulation::new(config.sim_config(seed, log_events));
    let initial = config.params.initial_balance;
    seed_balances(&mut sim, initial, &[(&attack.target, initial)]);
    sim.advance_blocks(config.params.warmup_blocks.max(1));
    let have = sim.indexer().balance(TICK, &attack.target).available;
    if have != Amount::from(initial) {
        return Err(HarnessError::Assertion {
            step: "setup".into(),
            message: format!("target holds {have}, expected {initial}"),
        });
    }
    let congestion_at_start = sim.pool().congestion();
    let outcome = execute(&attack, &mut sim)?;
    let result = ScenarioResult {
        key: config.key,
        seed,
        congestion_at_start,
        outcome,
    };
    Ok((result, sim))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub fractions: Vec<f64>,
    pub fee_rates: Vec<u64>,
    pub congestions: Vec<f64>,
    pub attempts: Vec<u32>,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            fractions: vec![0.10, 0.50, 1.00],
            fee_rates: vec![100, 200, 500],
            congestions: vec![0.25, 0.50, 0.75],
            attempts: vec![2, 5, 10],
        }
    }
}

impl Grid {
    pub fn keys(&self) -> Vec<ScenarioKey> {
        let mut keys = Vec::new();
        for &fraction in &self.fractions {
            for &fee_rate in &self.fee_rates {
                for &congestion in &self.congestions {
                    for &attempts in &self.attempts {
                        keys.push(ScenarioKey {
                            fraction,
                            fee_rate,
                            congestion,
                            attempts,
                        });
                    }
                }
            }
        }
        keys.sort_by(|a, b| a.partial_cmp(b).expect("finite grid values"));
        keys
    }
}

pub fn default_seeds(n: u64) -> Vec<u64> {
    (1..=n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: ScenarioKey,
    pub seeds: usize,
    pub success_rate: f64,
    pub mean_delay: f64,
    pub p95_delay: f64,
    /// Mean over seeds of the share of the initial balance pinned, in percent.
    pub pinned_pct: f64,
    pub outage_s: f64,
    /// Every Tx2 delay, across seeds, in seed order.
    pub delays: Vec<u64>,
}

impl SweepRow {
    fn aggregate(key: ScenarioKey, results: &[ScenarioResult]) -> SweepRow {
        let n = results.len().max(1) as f64;
        let delays: Vec<u64> = results.iter().flat_map(|r| r.delays()).collect();
        let mut sorted = delays.clone();
        sorted.sort_unstable();
        let mean_delay = if sorted.is_empty() {
            0.0
        } else {
            sorted.iter().sum::<u64>() as f64 / sorted.len() as f64
        };
        SweepRow {
            key,
            seeds: results.len(),
            success_rate: results.iter().filter(|r| r.outcome.success).count() as f64 / n,
            mean_delay,
            p95_delay: percentile(&sorted, 0.95),
            pinned_pct: results.iter().map(|r| 100.0 * r.outcome.pinned_fraction()).sum::<f64>() / n,
            outage_s: results.iter().map(|r| r.outcome.outage as f64).sum::<f64>() / n,
            delays,
        }
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[u64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1] as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

pub const CSV_HEADER: &str = "fraction,fee,congestion,attempts,success_rate,mean_delay,p95_delay,pinned_pct,outage_s";

impl SweepResult {
    pub fn row(&self, key: &ScenarioKey) -> Option<&SweepRow> {
        self.rows.iter().find(|r| &r.key == key)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let k = &r.key;
            writeln!(
                out,
                "{:.2},{},{:.2},{},{:.4},{:.1},{:.1},{:.4},{:.1}",
                k.fraction, k.fee_rate, k.congestion, k.attempts, r.success_rate, r.mean_delay, r.p95_delay, r.pinned_pct, r.outage_s
            )
            .expect("writing to a string");
        }
        out
    }
}

/// Runs every grid point over every seed. `workers` of 0 uses rayon's
/// default pool; results do not depend on it.
pub fn run_sweep(grid: &Grid, seeds: &[u64], params: &SimParams, workers: usize) -> Result<SweepResult, HarnessError> {
    let keys = grid.keys();
    let configs: Vec<ScenarioConfig> = keys
        .iter()
        .map(|&key| ScenarioConfig {
            key,
            params: params.clone(),
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let run = || -> Result<Vec<ScenarioResult>, HarnessError> {
        jobs.par_iter()
            .map(|&(i, seed)| run_scenario(&configs[i], seed))
            .collect()
    };
    let results = if workers == 0 {
        run()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HarnessError::Config(e.to_string()))?
            .install(run)?
    };
    let rows = results
        .chunks(seeds.len().max(1))
        .zip(&keys)
        .map(|(chunk, &key)| SweepRow::aggregate(key, chunk))
        .collect();
    Ok(SweepResult { rows })
}

/// One checked step of the scripted incident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub step: String,
    pub time: u64,
    pub height: u64,
    pub congestion: f64,
    pub available: Amount,
    pub transferable: Amount,
    pub overall: Amount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayTranscript {
    pub steps: Vec<ReplayStep>,
}

impl ReplayTranscript {
    pub fn render(&self) -> String {
        let mut out = String::from("step,time,height,congestion,available,transferable,overall\n");
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{:.4},{},{},{}",
                s.step, s.time, s.height, s.congestion, s.available, s.transferable, s.overall
            )
            .expect("writing to a string");
        }
        out
    }
}

/// Amounts from the exchange incident.
pub mod incident {
    pub const OPENING_BALANCE: u64 = 8_196_950;
    pub const WITHDRAWAL: u64 = 6_337;
    /// Not itemised in the published tables; needed for the second
    /// inscription to equal the amount it locked.
    pub const TOP_UP: u64 = 19_495;
    pub const SECOND_PIN: u64 = 8_210_108;
    pub const DEPOSITS: [u64; 2] = [5_076, 1_022];
    /// Difference between the listed deposits and the third inscription.
    pub const RECONCILE: u64 = 1;
    pub const THIRD_PIN: u64 = 6_099;
    pub const FOURTH_PIN: u64 = 2_683;
    pub const RESTORED: u64 = 8_218_890;
    pub const ATTACK_RATE: u64 = 201;
    pub const RECOVERY_RATE: u64 = 404;
    /// Fee rate of the filler that keeps blocks full; sits between the
    /// attack and recovery rates.
    pub const FILLER_RATE: u64 = 300;
    /// Pool entries kept waiting, 149.5% of the normal count.
    pub const FILLER_DEPTH: usize = 1_495;
    pub const USER_RATE: u64 = 1_000;
    pub const MAX_SUPPLY: u64 = 21_000_000;
}

struct Incident {
    sim: Simulation,
    exchange: Address,
    attacker: Address,
    depositor: Address,
    filler: Address,
    steps: Vec<ReplayStep>,
    pins: Vec<TransferBundle>,
    last_ordinal: Option<u64>,
}

impl Incident {
    fn new() -> Self {
        Incident {
            sim: Simulation::new(SimConfig::quiet(0)),
            exchange: addr("exchange"),
            attacker: addr("attacker"),
            depositor: addr("depositor"),
            filler: addr("filler"),
            steps: Vec::new(),
            pins: Vec::new(),
            last_ordinal: None,
        }
    }

    fn balance(&self) -> Balance {
        self.sim.indexer().balance(TICK, &self.exchange)
    }

    /// Keeps the pool at the filler depth so every block is full of
    /// transactions paying more than the pinning rate.
    fn top_up(&mut self) {
        while self.sim.pool().len() < incident::FILLER_DEPTH {
            let vsize = 200;
            let coin = self.sim.fund(&self.filler, incident::FILLER_RATE * vsize + 546);
            let tx = Transaction::new(
                vec![TxInput::new(coin.outpoint, SEQUENCE_FINAL)],
                vec![TxOutput::new(546, self.filler.clone())],
                vsize,
            );
            self.sim.submit(tx).expect("fresh coin");
        }
    }

    fn next_block(&mut self) {
        self.top_up();
        self.sim.advance_blocks(1);
    }

    fn transfer(&mut self, from: &Address, to: &Address, amount: u64) -> Result<TransferBundle, HarnessError> {
        let req = TransferRequest::new(TICK, amount, from.clone(), to.clone(), incident::USER_RATE);
        let cfg = WalletConfig::default();
        let (f1, f2) = cfg.fees(req.fee_rate);
        self.sim.fund(from, cfg.postage + f1 + f2);
        self.send(&req, &cfg)
    }

    fn pin(&mut self, amount: u64) -> Result<TransferBundle, HarnessError> {
        let mut req = TransferRequest::new(
            TICK,
            amount,
            self.exchange.clone(),
            self.exchange.clone(),
            incident::ATTACK_RATE,
        );
        req.payer = Some(self.attacker.clone());
        let cfg = attack_wallet();
        let (f1, f2) = cfg.fees(req.fee_rate);
        self.sim.fund(&self.attacker, cfg.postage + f1 + f2);
        self.send(&req, &cfg)
    }

    fn send(&mut self, req: &TransferRequest, cfg: &WalletConfig) -> Result<TransferBundle, HarnessError> {
        let bundle = build_transfer(req, cfg, self.sim.chain().utxos(), Some(self.sim.pool()))
            .map_err(AttackError::from)?;
        self.last_ordinal = self
            .sim
            .chain()
            .utxos()
            .get(&bundle.tx1.inputs[0].prevout)
            .and_then(|u| u.first_ordinal());
        let (a, b) = self.sim.submit_bundle(&bundle, 0);
        a.and(b).map_err(|e| HarnessError::Assertion {
            step: "submit".into(),
            message: e.to_string(),
        })?;
        Ok(bundle)
    }

    fn check(&mut self, step: &str, expect: (u64, u64)) -> Result<(), HarnessError> {
        let b = self.balance();
        self.steps.push(ReplayStep {
            step: step.to_string(),
            time: self.sim.now(),
            height: self.sim.chain().height(),
            congestion: self.sim.pool().congestion(),
            available: b.available.clone(),
            transferable: b.transferable.clone(),
            overall: b.overall.clone(),
        });
        let want = (Amount::from(expect.0), Amount::from(expect.1));
        if (b.available.clone(), b.transferable.clone()) != want {
            return Err(HarnessError::Assertion {
                step: step.to_string(),
                message: format!(
                    "expected available {} transferable {}, found {} and {}",
                    want.0, want.1, b.available, b.transferable
                ),
            });
        }
        Ok(())
    }

    fn ensure(&self, step: &str, ok: bool, message: &str) -> Result<(), HarnessError> {
        if ok {
            Ok(())
        } else {
            Err(HarnessError::Assertion {
                step: step.to_string(),
                message: message.to_string(),
            })
        }
    }

    fn run(mut self) -> Result<ReplayTranscript, HarnessError> {
        use incident::*;
        let exchange = self.exchange.clone();
        let depositor = self.depositor.clone();
        let withdrawer = addr("withdrawer");

        seed_balances(
            &mut self.sim,
            MAX_SUPPLY,
            &[(&exchange, OPENING_BALANCE), (&depositor, 1_000_000)],
        );
        self.next_block();
        self.check("opening", (OPENING_BALANCE, 0))?;

        // The withdrawal and the first inscription read the same balance;
        // the withdrawal pays more and is indexed first.
        self.transfer(&exchange, &withdrawer, WITHDRAWAL)?;
        let live = self.balance().available.to_u64().expect("fits");
        self.ensure("attempt 1", live == OPENING_BALANCE, "withdrawal indexed too early")?;
        let first = self.pin(live)?;
        let ordinal = self.last_ordinal.expect("funded");
        self.next_block();
        self.check("attempt 1 voided", (OPENING_BALANCE - WITHDRAWAL, 0))?;
        let confirmed = self.sim.chain().confirmation(&first.tx1.id).is_some();
        self.ensure("attempt 1 voided", confirmed, "first inscription did not confirm")?;
        self.ensure(
            "attempt 1 voided",
            self.sim.indexer().pending_transfer(ordinal).is_none(),
            "first inscription was credited",
        )?;

        self.transfer(&depositor, &exchange, TOP_UP)?;
        self.next_block();
        self.check("top-up", (SECOND_PIN, 0))?;

        let live = self.balance().available.to_u64().expect("fits");
        let second = self.pin(live)?;
        self.pins.push(second);
        self.next_block();
        self.check("attempt 2 pinned", (0, SECOND_PIN))?;

        for amount in DEPOSITS.into_iter().chain([RECONCILE]) {
            self.transfer(&depositor, &exchange, amount)?;
        }
        self.next_block();
        self.check("deposits", (THIRD_PIN, SECOND_PIN))?;

        let third = self.pin(THIRD_PIN)?;
        self.pins.push(third);
        self.next_block();
        self.check("attempt 3 pinned", (0, SECOND_PIN + THIRD_PIN))?;

        self.transfer(&depositor, &exchange, FOURTH_PIN)?;
        self.next_block();
        self.check("deposit", (FOURTH_PIN, SECOND_PIN + THIRD_PIN))?;

        let fourth = self.pin(FOURTH_PIN)?;
        self.pins.push(fourth);
        self.next_block();
        self.check("attempt 4 pinned", (0, RESTORED))?;

        // A few more full blocks: the pinned Tx2s stay put.
        for _ in 0..3 {
            self.next_block();
        }
        let stuck = self.pins.iter().all(|b| self.sim.pool().contains(&b.tx2.id));
        self.ensure("pinned", stuck, "a pinned Tx2 left the pool")?;
        self.check("still pinned", (0, RESTORED))?;

        let cfg = WalletConfig::default();
        let pending: Vec<_> = self.sim.indexer().pending.values().cloned().collect();
        for p in pending.iter().filter(|p| p.inscriber == exchange) {
            self.sim.fund(&exchange, RECOVERY_RATE * cfg.recovery_vsize);
            let tx = build_recovery(p, &exchange, self.sim.chain().utxos(), Some(self.sim.pool()), RECOVERY_RATE, &cfg)
                .map_err(AttackError::from)?;
            let accepted = self.sim.submit(tx).map_err(|e| HarnessError::Assertion {
                step: "recovery".into(),
                message: e.to_string(),
            })?;
            self.ensure("recovery", !accepted.replaced.is_empty(), "recovery replaced nothing")?;
        }
        self.next_block();
        self.check("recovered", (RESTORED, 0))?;
        Ok(ReplayTranscript { steps: self.steps })
    }
}

/// Replays the exchange incident step by step, checking the indexer's view
/// of the exchange's balance after every block.
pub fn run_binance_replay() -> Result<ReplayTranscript, HarnessError> {
    Incident::new().run()
}

/// Tolerance in seconds for a service holding `avail` tokens, needing
/// `req`, with `volume` tokens leaving per `period` seconds.
pub fn calc_tolerance(avail: f64, req: f64, volume: f64, period: f64) -> Result<f64, HarnessError> {
    Ok(crate::attack::tolerance(&crate::attack::ToleranceInputs {
        l_avail: avail,
        l_req: req,
        volume,
        period,
    })?)
}
