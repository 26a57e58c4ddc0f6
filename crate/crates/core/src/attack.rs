//! Transfer pinning against a target address: inscribe transfers of the
//! target's tokens, then leave Tx2 stuck in the mempool with a fee that is
//! enough for Tx1 but not for Tx2, so the tokens sit in the transferable
//! balance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brc20::{Amount, TransferEvent};
use crate::chain::{Address, Txid};
use crate::mempool::{Delay, MempoolError};
use crate::sim::Simulation;
use crate::wallet::{build_transfer, FeeSplit, TransferRequest, WalletConfig, WalletError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("target holds no available balance")]
    TargetEmpty,
    #[error("liquidity inputs are inconsistent: {0}")]
    InvalidTolerance(&'static str),
    #[error("division by zero: volume per period is 0")]
    DivisionByZero,
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Wallet(#[from] WalletError),
}

/// Fee rates between the relay threshold and the rate at which Tx2 would
/// be mined promptly, in sat/vB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeeBand {
    pub f_min: u64,
    pub f_sf: u64,
}

impl FeeBand {
    pub fn new(f_min: u64, f_sf: u64) -> Result<Self, AttackError> {
        if f_min == 0 || f_min > f_sf {
            return Err(AttackError::InvalidConfig(format!(
                "fee band needs 0 < f_min <= f_sf, got [{f_min}, {f_sf}]"
            )));
        }
        Ok(FeeBand { f_min, f_sf })
    }

    /// `f_sf` at 2.25 times `f_min`, rounded down.
    pub fn from_min(f_min: u64) -> Result<Self, AttackError> {
        FeeBand::new(f_min, f_min * 9 / 4)
    }

    /// A band holding exactly one rate.
    pub fn collapsed(rate: u64) -> Result<Self, AttackError> {
        FeeBand::new(rate, rate)
    }

    pub fn contains(&self, rate: u64) -> bool {
        (self.f_min..=self.f_sf).contains(&rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeePolicy {
    /// Added to `f_min` in quiet conditions.
    pub step: u64,
    /// Congestion at or above which the attacker moves to the middle of
    /// the band, to make sure Tx1 still gets in.
    pub congested_at: f64,
}

impl Default for FeePolicy {
    fn default() -> Self {
        FeePolicy {
            step: 1,
            congested_at: 0.5,
        }
    }
}

pub fn pick_fee(band: &FeeBand, congestion: f64, policy: &FeePolicy) -> u64 {
    let rate = if congestion >= policy.congested_at {
        band.f_min + (band.f_sf - band.f_min) / 2
    } else {
        band.f_min + policy.step
    };
    rate.clamp(band.f_min, band.f_sf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceInputs {
    pub l_avail: f64,
    pub l_req: f64,
    /// Tokens withdrawn per period.
    pub volume: f64,
    /// Seconds.
    pub period: f64,
}

/// Seconds of frozen liquidity a service absorbs: the reserve above its
/// requirement divided by the outflow rate.
pub fn tolerance(inputs: &ToleranceInputs) -> Result<f64, AttackError> {
    let ToleranceInputs {
        l_avail,
        l_req,
        volume,
        period,
    } = *inputs;
    if volume == 0.0 {
        return Err(AttackError::DivisionByZero);
    }
    if !(l_req >= 0.0 && l_avail >= l_req && volume > 0.0 && period > 0.0) {
        return Err(AttackError::InvalidTolerance(
            "need l_avail >= l_req >= 0, volume > 0 and period > 0",
        ));
    }
    Ok((l_avail - l_req) * period / volume)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub target: Address,
    pub attacker: Address,
    pub tick: String,
    /// Share of the target's live available balance inscribed per attempt.
    pub fraction: f64,
    pub band: FeeBand,
    #[serde(default)]
    pub policy: FeePolicy,
    pub attempts: u32,
    /// Seconds; success needs a delay strictly longer than this.
    pub tolerance: u64,
    /// Seconds after the first attempt at which observation stops.
    pub horizon: u64,
    /// Seconds between attempts; the block interval when absent.
    #[serde(default)]
    pub spacing: Option<u64>,
    #[serde(default = "default_true")]
    pub rbf: bool,
    #[serde(default = "attack_wallet")]
    pub wallet: WalletConfig,
}

fn default_true() -> bool {
    true
}

/// The attacker pays the same absolute fee on both transactions so only
/// Tx2 sits at the chosen rate.
pub fn attack_wallet() -> WalletConfig {
    WalletConfig {
        fee_split: FeeSplit::EqualAbsolute,
        ..WalletConfig::default()
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(AttackError::InvalidConfig(format!(
                "fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        if self.attempts == 0 {
            return Err(AttackError::InvalidConfig("attempts must be at least 1".into()));
        }
        FeeBand::new(self.band.f_min, self.band.f_sf)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InscriptionStatus {
    /// Nothing sent: the live balance rounded to zero tokens.
    Skipped,
    /// Tx1 confirmed and the transfer was credited to the transferable balance.
    Locked,
    /// Tx1 confirmed but the indexer voided the transfer.
    Voided,
    /// Tx1 never confirmed within the horizon.
    Unconfirmed,
    /// Tx1 or Tx2 was refused by the mempool.
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub index: u32,
    pub amount: Amount,
    pub fee_rate: u64,
    pub submit_time: u64,
    pub tx1: Option<Txid>,
    pub tx2: Option<Txid>,
    pub inscription_ordinal: Option<u64>,
    pub tx1_confirm: Option<u64>,
    pub tx2_confirm: Option<u64>,
    pub status: InscriptionStatus,
    /// Seconds Tx2 waited, up to the end of the horizon if still pending.
    pub effective_delay: Option<u64>,
    pub pinned: bool,
}

impl AttemptRecord {
    /// Delay that counts towards success: only attempts that actually
    /// locked tokens.
    pub fn locking_delay(&self) -> Option<u64> {
        match self.status {
            InscriptionStatus::Locked => self.effective_delay,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub per_attempt: Vec<AttemptRecord>,
    pub total_pinned: Amount,
    pub initial_available: Amount,
    pub target_available_at_end: Amount,
    /// Seconds within the horizon during which at least one inscribed
    /// transfer held target tokens in the transferable balance.
    pub outage: u64,
    pub horizon_end: u64,
    pub success: bool,
}

impl AttackOutcome {
    pub fn pinned_fraction(&self) -> f64 {
        if self.initial_available.is_zero() {
            return 0.0;
        }
        (self.total_pinned.to_f64() / self.initial_available.to_f64()).min(1.0)
    }
}

/// True iff some attempt locked tokens for strictly longer than `t_bar`.
pub fn evaluate_success(per_attempt: &[AttemptRecord], t_bar: u64) -> bool {
    per_attempt
        .iter()
        .filter_map(AttemptRecord::locking_delay)
        .any(|d| d > t_bar)
}

fn scale(x: &Amount, fraction: f64) -> Amount {
    x.scale_ppm((fraction * 1e6).round() as u64)
}

struct Launched {
    record: AttemptRecord,
    tx2_submit: u64,
}

/// Runs the attack on a live simulation.
///
/// Attempt `r` starts `r` spacings after the current time, reads the
/// target's available balance at that moment and inscribes the configured
/// share of it. Observation ends `horizon` seconds after the first attempt.
pub fn execute(config: &AttackConfig, sim: &mut Simulation) -> Result<AttackOutcome, AttackError> {
    config.validate()?;
    let start = sim.now();
    let spacing = config.spacing.unwrap_or(sim.block_interval());
    let horizon_end = start + config.horizon;
    let initial = sim.indexer().balance(&config.tick, &config.target).available;
    if initial.is_zero() {
        return Err(AttackError::TargetEmpty);
    }

    let mut launched: Vec<Launched> = Vec::new();
    for r in 0..config.attempts {
        sim.advance_to(start + r as u64 * spacing);
        if already_succeeded(sim, &launched, config.tolerance) {
            break;
        }
        let live = sim.indexer().balance(&config.tick, &config.target).available;
        let amount = scale(&live, config.fraction);
        let mut record = AttemptRecord {
            index: r + 1,
            amount: amount.clone(),
            fee_rate: 0,
            submit_time: sim.now(),
            tx1: None,
            tx2: None,
            inscription_ordinal: None,
            tx1_confirm: None,
            tx2_confirm: None,
            status: InscriptionStatus::Skipped,
            effective_delay: None,
            pinned: false,
        };
        if amount.is_zero() {
            launched.push(Launched {
                record,
                tx2_submit: sim.now(),
            });
            continue;
        }
        let fee_rate = pick_fee(&config.band, sim.pool().congestion(), &config.policy);
        record.fee_rate = fee_rate;
        let request = TransferRequest {
            tick: config.tick.clone(),
            amount,
            sender: config.target.clone(),
            recipient: config.target.clone(),
            fee_rate,
            rbf: config.rbf,
            max_retries: 1,
            payer: Some(config.attacker.clone()),
        };
        let (fee1, fee2) = config.wallet.fees(fee_rate);
        sim.fund(&config.attacker, config.wallet.postage + fee1 + fee2);
        let bundle = build_transfer(&request, &config.wallet, sim.chain().utxos(), Some(sim.pool()))?;
        let funding = bundle.tx1.inputs[0].prevout;
        record.inscription_ordinal = sim
            .chain()
            .utxos()
            .get(&funding)
            .and_then(|u| u.first_ordinal());
        record.tx1 = Some(bundle.tx1.id);
        record.tx2 = Some(bundle.tx2.id);
        let (first, second) = sim.submit_bundle(&bundle, config.wallet.bundle_gap);
        if first.is_err() || second.is_err() {
            record.status = InscriptionStatus::Rejected;
        }
        launched.push(Launched {
            record,
            tx2_submit: sim.now(),
        });
    }
    sim.advance_to(horizon_end);

    let mut records: Vec<AttemptRecord> = launched
        .into_iter()
        .map(|l| settle_record(sim, l, horizon_end, config.tolerance))
        .collect();
    records.sort_by_key(|r| r.index);
    let mut total_pinned = Amount::zero();
    for r in records.iter().filter(|r| r.pinned) {
        total_pinned += &r.amount;
    }
    let outage = outage_seconds(&records, horizon_end);
    Ok(AttackOutcome {
        success: evaluate_success(&records, config.tolerance),
        per_attempt: records,
        total_pinned,
        initial_available: initial,
        target_available_at_end: sim.indexer().balance(&config.tick, &config.target).available,
        outage,
        horizon_end,
    })
}

/// Whether an earlier attempt is already known to have held tokens for
/// longer than the tolerance.
fn already_succeeded(sim: &Simulation, launched: &[Launched], t_bar: u64) -> bool {
    launched.iter().any(|l| {
        let (Some(ordinal), Some(tx2)) = (l.record.inscription_ordinal, l.record.tx2) else {
            return false;
        };
        if !sim.indexer().pending.contains_key(&ordinal) && !sim.indexer().settled.contains(&ordinal) {
            return false;
        }
        let waited = match sim.chain().confirmation(&tx2) {
            Some((_, ts)) => ts - l.tx2_submit,
            None => sim.now() - l.tx2_submit,
        };
        waited > t_bar
    })
}

fn settle_record(sim: &Simulation, launched: Launched, horizon_end: u64, t_bar: u64) -> AttemptRecord {
    let Launched {
        mut record,
        tx2_submit,
    } = launched;
    let (Some(tx1), Some(tx2)) = (record.tx1, record.tx2) else {
        return record;
    };
    record.tx1_confirm = sim.chain().confirmation(&tx1).map(|(_, ts)| ts);
    record.tx2_confirm = sim.chain().confirmation(&tx2).map(|(_, ts)| ts);
    let delay = match sim.pool().confirmation_delay(sim.chain(), &tx2, tx2_submit) {
        Ok(Delay::Confirmed(d)) => d,
        Ok(Delay::Pending) | Err(MempoolError::UnknownTx(_)) | Err(_) => horizon_end - tx2_submit,
    };
    record.effective_delay = Some(delay);
    if record.status == InscriptionStatus::Rejected {
        return record;
    }
    let ordinal = record.inscription_ordinal.expect("set when launched");
    record.status = if record.tx1_confirm.is_none() {
        InscriptionStatus::Unconfirmed
    } else if inscribed(sim, ordinal) {
        InscriptionStatus::Locked
    } else {
        InscriptionStatus::Voided
    };
    record.pinned = record.status == InscriptionStatus::Locked && delay > t_bar;
    record
}

fn inscribed(sim: &Simulation, ordinal: u64) -> bool {
    sim.block_effects().iter().flat_map(|e| &e.transfers).any(|t| {
        matches!(t, TransferEvent::Inscribed { ordinal: o, .. } if *o == ordinal)
    })
}

/// Length of the union of the lock intervals that fall inside the horizon.
fn outage_seconds(records: &[AttemptRecord], horizon_end: u64) -> u64 {
    let mut spans: Vec<(u64, u64)> = records
        .iter()
        .filter(|r| r.status == InscriptionStatus::Locked)
        .filter_map(|r| {
            let from = r.tx1_confirm?;
            let to = r.tx2_confirm.unwrap_or(horizon_end).min(horizon_end);
            (to > from).then_some((from, to))
        })
        .collect();
    spans.sort();
    let mut total = 0;
    let mut cursor = 0;
    for (from, to) in spans {
        let from = from.max(cursor);
        if to > from {
            total += to - from;
            cursor = to;
        }
    }
    total
}

/// One CSV line per attempt, with a header.
pub fn transcript_csv(outcome: &AttackOutcome) -> String {
    let mut out = String::from("attempt,amount,fee_rate,submit_time,tx1_confirm,tx2_confirm,status,delay,pinned\n");
    for r in &outcome.per_attempt {
        let sent = r.tx1.is_some();
        let opt = |v: Option<u64>| match v {
            Some(t) => t.to_string(),
            None if sent => "pending".to_string(),
            None => String::new(),
        };
        let status = serde_json::to_value(r.status).expect("serializes");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.index,
            r.amount,
            r.fee_rate,
            r.submit_time,
            opt(r.tx1_confirm),
            opt(r.tx2_confirm),
            status.as_str().unwrap_or_default(),
            r.effective_delay.map_or(String::new(), |d| d.to_string()),
            r.pinned
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(status: InscriptionStatus, delay: u64) -> AttemptRecord {
        AttemptRecord {
            index: 1,
            amount: Amount::from(1),
            fee_rate: 1,
            submit_time: 0,
            tx1: None,
            tx2: None,
            inscription_ordinal: None,
            tx1_confirm: None,
            tx2_confirm: None,
            status,
            effective_delay: Some(delay),
            pinned: false,
        }
    }

    fn inputs(l_avail: f64, l_req: f64) -> ToleranceInputs {
        ToleranceInputs {
            l_avail,
            l_req,
            volume: 1_000_000.0,
            period: 3_600.0,
        }
    }

    #[test]
    fn tolerance_bounds() {
        assert_eq!(tolerance(&inputs(5_000_000.0, 2_000_000.0)).unwrap(), 10_800.0);
        assert_eq!(tolerance(&inputs(2_500_000.0, 2_000_000.0)).unwrap(), 1_800.0);
        assert_eq!(tolerance(&inputs(7.0, 7.0)).unwrap(), 0.0);
        let mut zero = inputs(1.0, 0.0);
        zero.volume = 0.0;
        assert_eq!(tolerance(&zero), Err(AttackError::DivisionByZero));
        assert!(tolerance(&inputs(1.0, 2.0)).is_err());
    }

    #[test]
    fn fee_picks() {
        let policy = FeePolicy::default();
        assert_eq!(pick_fee(&FeeBand::new(10, 25).unwrap(), 0.1, &policy), 11);
        assert_eq!(pick_fee(&FeeBand::collapsed(42).unwrap(), 0.1, &policy), 42);
        assert_eq!(pick_fee(&FeeBand::collapsed(42).unwrap(), 0.9, &policy), 42);
        let regime = FeeBand::new(30, 75).unwrap();
        for c in [0.0, 0.25, 0.5, 0.75, 1.5] {
            assert!((30..=80).contains(&pick_fee(&regime, c, &policy)));
        }
        assert_eq!(FeeBand::from_min(20).unwrap(), FeeBand::new(20, 45).unwrap());
        assert!(FeeBand::new(0, 1).is_err());
        assert!(FeeBand::new(5, 4).is_err());
    }

    #[test]
    fn success_is_strict() {
        assert!(!evaluate_success(&[record(InscriptionStatus::Locked, 300)], 1_800));
        assert!(evaluate_success(&[record(InscriptionStatus::Locked, 14_400)], 10_800));
        assert!(!evaluate_success(&[record(InscriptionStatus::Locked, 1_800)], 1_800));
        assert!(!evaluate_success(&[record(InscriptionStatus::Voided, 99_999)], 1_800));
        assert!(!evaluate_success(&[], 0));
    }

    #[test]
    fn outage_merges_overlaps() {
        let mut a = record(InscriptionStatus::Locked, 0);
        a.tx1_confirm = Some(100);
        a.tx2_confirm = Some(400);
        let mut b = a.clone();
        b.tx1_confirm = Some(300);
        b.tx2_confirm = None;
        assert_eq!(outage_seconds(&[a, b], 1_000), 900);
    }

    #[test]
    fn scaling_is_exact() {
        let x = Amount::from(8_210_108);
        assert_eq!(scale(&x, 1.0), x);
        assert_eq!(scale(&x, 0.1), Amount::from(821_010));
        assert_eq!(scale(&Amount::from(9), 0.1), Amount::zero());
    }
}
