//! BRC20 indexer: parses inscription envelopes from confirmed blocks and
//! keeps tick registries and per-address available/transferable balances.
//!
//! Invalid operations are void rather than errors, as in any indexer that
//! has to follow whatever the chain contains.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use num_bigint::BigUint;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::chain::{split_ordinals, Address, Block, BlockUndo, OrdinalRange, Transaction, Utxo};

/// Non-negative token amount of arbitrary size.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Amount(BigUint);

impl Amount {
    pub fn zero() -> Self {
        Amount(BigUint::zero())
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn checked_sub(&self, other: &Amount) -> Option<Amount> {
        if self.0 >= other.0 {
            Some(Amount(&self.0 - &other.0))
        } else {
            None
        }
    }

    pub fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }

    pub fn to_f64(&self) -> f64 {
        self.0.to_f64().unwrap_or(f64::INFINITY)
    }

    /// `self * ppm / 1_000_000`, rounded down.
    pub fn scale_ppm(&self, ppm: u64) -> Amount {
        Amount(&self.0 * ppm / 1_000_000u32)
    }
}

impl From<u64> for Amount {
    fn from(v: u64) -> Self {
        Amount(BigUint::from(v))
    }
}

impl FromStr for Amount {
    type Err = String;

    /// Plain decimal digits only; no sign, fraction or exponent.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("not a whole decimal amount: {s:?}"));
        }
        BigUint::parse_bytes(s.as_bytes(), 10)
            .map(Amount)
            .ok_or_else(|| format!("not a whole decimal amount: {s:?}"))
    }
}

impl TryFrom<String> for Amount {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Amount> for String {
    fn from(value: Amount) -> Self {
        value.0.to_str_radix(10)
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Add<&Amount> for &Amount {
    type Output = Amount;

    fn add(self, rhs: &Amount) -> Amount {
        Amount(&self.0 + &rhs.0)
    }
}

impl AddAssign<&Amount> for Amount {
    fn add_assign(&mut self, rhs: &Amount) {
        self.0 += &rhs.0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Brc20Op {
    Deploy { tick: String, max: Amount, lim: Amount },
    Mint { tick: String, amt: Amount },
    InscribeTransfer { tick: String, amt: Amount },
}

/// Reads an inscription payload as a BRC20 operation.
///
/// The protocol tag may be `brc-20`, `brc20`, or (for transfers written in
/// the shorthand some wallets emit) the tick name itself. Anything else,
/// including malformed JSON, is simply not a BRC20 inscription.
pub fn parse_envelope(raw: &str) -> Option<Brc20Op> {
    let value: serde_json::Value = serde_json::from_str(raw).ok()?;
    let obj = value.as_object()?;
    let field = |k: &str| obj.get(k).and_then(|v| v.as_str());
    let number = |k: &str| field(k).and_then(|s| s.parse::<Amount>().ok());

    let protocol = field("p")?.to_ascii_lowercase();
    let tick = field("tick")?.to_lowercase();
    if tick.is_empty() {
        return None;
    }
    let op = field("op")?;
    let known_protocol = protocol == "brc-20" || protocol == "brc20";
    match op {
        "deploy" if known_protocol => {
            let max = number("max")?;
            let lim = match obj.get("lim") {
                Some(_) => number("lim")?,
                None => max.clone(),
            };
            Some(Brc20Op::Deploy { tick, max, lim })
        }
        "mint" if known_protocol => Some(Brc20Op::Mint {
            tick,
            amt: number("amt")?,
        }),
        "transfer" if known_protocol || protocol == tick => Some(Brc20Op::InscribeTransfer {
            tick,
            amt: number("amt")?,
        }),
        _ => None,
    }
}

pub fn transfer_payload(tick: &str, amount: &Amount) -> String {
    serde_json::json!({
        "p": "brc-20",
        "op": "transfer",
        "tick": tick,
        "amt": amount.to_string(),
    })
    .to_string()
}

pub fn deploy_payload(tick: &str, max: &Amount, lim: &Amount) -> String {
    serde_json::json!({
        "p": "brc-20",
        "op": "deploy",
        "tick": tick,
        "max": max.to_string(),
        "lim": lim.to_string(),
    })
    .to_string()
}

pub fn mint_payload(tick: &str, amount: &Amount) -> String {
    serde_json::json!({
        "p": "brc-20",
        "op": "mint",
        "tick": tick,
        "amt": amount.to_string(),
    })
    .to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickInfo {
    pub tick: String,
    pub max: Amount,
    pub lim: Amount,
    pub minted: Amount,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub available: Amount,
    pub transferable: Amount,
}

impl BalanceEntry {
    pub fn overall(&self) -> Amount {
        &self.available + &self.transferable
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingTransfer {
    pub inscription_ordinal: u64,
    pub tick: String,
    pub amount: Amount,
    pub inscriber: Address,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Balance {
    pub available: Amount,
    pub transferable: Amount,
    pub overall: Amount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceField {
    Available,
    Transferable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Credit,
    Debit,
}

/// One line of the per-block diff log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceDiff {
    pub height: u64,
    pub tick: String,
    pub address: Address,
    pub field: BalanceField,
    pub direction: Direction,
    pub amount: Amount,
}

/// What happened to a transfer inscription inside a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferEvent {
    Inscribed { ordinal: u64, inscriber: Address, amount: Amount },
    Voided { ordinal: u64, inscriber: Address, amount: Amount },
    Settled { ordinal: u64, recipient: Address, amount: Amount },
    Burned { ordinal: u64, inscriber: Address, amount: Amount },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Brc20State {
    pub ticks: BTreeMap<String, TickInfo>,
    pub balances: BTreeMap<String, BTreeMap<Address, BalanceEntry>>,
    pub pending: BTreeMap<u64, PendingTransfer>,
    /// Ordinals whose transfer inscription has already been used up.
    pub settled: BTreeSet<u64>,
}

/// Effects of one block on the state.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockEffects {
    pub diffs: Vec<BalanceDiff>,
    pub transfers: Vec<TransferEvent>,
}

impl Brc20State {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn balance(&self, tick: &str, addr: &Address) -> Balance {
        let entry = self
            .balances
            .get(&tick.to_lowercase())
            .and_then(|m| m.get(addr))
            .cloned()
            .unwrap_or_default();
        Balance {
            overall: entry.overall(),
            available: entry.available,
            transferable: entry.transferable,
        }
    }

    pub fn tick(&self, tick: &str) -> Option<&TickInfo> {
        self.ticks.get(&tick.to_lowercase())
    }

    pub fn pending_transfer(&self, ordinal: u64) -> Option<&PendingTransfer> {
        self.pending.get(&ordinal)
    }

    /// Applies every transaction of `block` in order. `undo` lists the
    /// outputs each transaction spent, which is how satoshis are followed.
    pub fn apply_block(&mut self, block: &Block, undo: &BlockUndo) -> BlockEffects {
        let mut effects = BlockEffects::default();
        for (tx, spent) in block.transactions.iter().zip(&undo.spent) {
            self.apply_tx(block.height, tx, spent, &mut effects);
        }
        effects
    }

    fn apply_tx(&mut self, height: u64, tx: &Transaction, spent: &[Utxo], fx: &mut BlockEffects) {
        if spent.is_empty() {
            return;
        }
        let inputs: Vec<Vec<OrdinalRange>> = spent.iter().map(|u| u.ordinals.clone()).collect();
        let values: Vec<u64> = tx.outputs.iter().map(|o| o.value).collect();
        let input_total: u64 = spent.iter().map(|u| u.value).sum();
        let fee = input_total - tx.output_value();
        let (assigned, _) = match split_ordinals(&inputs, &values, fee) {
            Ok(split) => split,
            Err(_) => return,
        };

        let mut moved = Vec::new();
        for range in inputs.iter().flatten() {
            moved.extend(self.pending.range(range.start..range.end()).map(|(o, _)| *o));
        }
        for ordinal in moved {
            let destination = assigned
                .iter()
                .position(|out| out.iter().any(|r| r.contains(ordinal)))
                .map(|i| tx.outputs[i].owner.clone());
            self.settle(height, ordinal, destination, fx);
        }

        let first = &tx.outputs[0];
        if let (Some(raw), Some(range)) = (&first.envelope, assigned[0].first()) {
            if let Some(op) = parse_envelope(raw) {
                self.apply_op(height, op, range.start, &first.owner, fx);
            }
        }
    }

    fn settle(
        &mut self,
        height: u64,
        ordinal: u64,
        destination: Option<Address>,
        fx: &mut BlockEffects,
    ) {
        let pending = self.pending.remove(&ordinal).expect("listed from pending");
        self.settled.insert(ordinal);
        self.debit(height, &pending.tick, &pending.inscriber, BalanceField::Transferable, &pending.amount, fx);
        let (recipient, event) = match destination {
            Some(to) => (
                to.clone(),
                TransferEvent::Settled {
                    ordinal,
                    recipient: to,
                    amount: pending.amount.clone(),
                },
            ),
            None => (
                pending.inscriber.clone(),
                TransferEvent::Burned {
                    ordinal,
                    inscriber: pending.inscriber.clone(),
                    amount: pending.amount.clone(),
                },
            ),
        };
        self.credit(height, &pending.tick, &recipient, BalanceField::Available, &pending.amount, fx);
        fx.transfers.push(event);
    }

    fn apply_op(&mut self, height: u64, op: Brc20Op, ordinal: u64, owner: &Address, fx: &mut BlockEffects) {
        match op {
            Brc20Op::Deploy { tick, max, lim } => {
                if self.ticks.contains_key(&tick) || max.is_zero() || lim.is_zero() || lim > max {
                    return;
                }
                self.ticks.insert(
                    tick.clone(),
                    TickInfo {
                        tick,
                        max,
                        lim,
                        minted: Amount::zero(),
                    },
                );
            }
            Brc20Op::Mint { tick, amt } => {
                let Some(info) = self.ticks.get_mut(&tick) else {
                    return;
                };
                let after = &info.minted + &amt;
                if amt.is_zero() || amt > info.lim || after > info.max {
                    return;
                }
                info.minted = after;
                self.credit(height, &tick, owner, BalanceField::Available, &amt, fx);
            }
            Brc20Op::InscribeTransfer { tick, amt } => {
                let usable = !amt.is_zero()
                    && self.ticks.contains_key(&tick)
                    && !self.settled.contains(&ordinal)
                    && !self.pending.contains_key(&ordinal)
                    && self.balance(&tick, owner).available >= amt;
                if !usable {
                    fx.transfers.push(TransferEvent::Voided {
                        ordinal,
                        inscriber: owner.clone(),
                        amount: amt,
                    });
                    return;
                }
                self.debit(height, &tick, owner, BalanceField::Available, &amt, fx);
                self.credit(height, &tick, owner, BalanceField::Transferable, &amt, fx);
                self.pending.insert(
                    ordinal,
                    PendingTransfer {
                        inscription_ordinal: ordinal,
                        tick,
                        amount: amt.clone(),
                        inscriber: owner.clone(),
                    },
                );
                fx.transfers.push(TransferEvent::Inscribed {
                    ordinal,
                    inscriber: owner.clone(),
                    amount: amt,
                });
            }
        }
    }

    fn entry(&mut self, tick: &str, addr: &Address) -> &mut BalanceEntry {
        self.balances
            .entry(tick.to_string())
            .or_default()
            .entry(addr.clone())
            .or_default()
    }

    fn credit(
        &mut self,
        height: u64,
        tick: &str,
        addr: &Address,
        field: BalanceField,
        amount: &Amount,
        fx: &mut BlockEffects,
    ) {
        let entry = self.entry(tick, addr);
        match field {
            BalanceField::Available => entry.available += amount,
            BalanceField::Transferable => entry.transferable += amount,
        }
        fx.diffs.push(BalanceDiff {
            height,
            tick: tick.to_string(),
            address: addr.clone(),
            field,
            direction: Direction::Credit,
            amount: amount.clone(),
        });
    }

    fn debit(
        &mut self,
        height: u64,
        tick: &str,
        addr: &Address,
        field: BalanceField,
        amount: &Amount,
        fx: &mut BlockEffects,
    ) {
        let entry = self.entry(tick, addr);
        let slot = match field {
            BalanceField::Available => &mut entry.available,
            BalanceField::Transferable => &mut entry.transferable,
        };
        *slot = slot
            .checked_sub(amount)
            .expect("debits are only issued against sufficient balances");
        fx.diffs.push(BalanceDiff {
            height,
            tick: tick.to_string(),
            address: addr.clone(),
            field,
            direction: Direction::Debit,
            amount: amount.clone(),
        });
    }

    /// Per tick, the summed balances must equal the minted supply, which
    /// may not exceed the cap.
    pub fn check_conservation(&self) -> Result<(), String> {
        for (tick, info) in &self.ticks {
            let mut sum = Amount::zero();
            if let Some(holders) = self.balances.get(tick) {
                for entry in holders.values() {
                    sum += &entry.overall();
                }
            }
            if sum != info.minted {
                return Err(format!("{tick}: balances sum to {sum}, minted {}", info.minted));
            }
            if info.minted > info.max {
                return Err(format!("{tick}: minted {} exceeds max {}", info.minted, info.max));
            }
        }
        for tick in self.balances.keys() {
            if !self.ticks.contains_key(tick) {
                return Err(format!("balances recorded for unknown tick {tick}"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("state serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Rebuilds the state from scratch by folding every block in order.
pub fn replay(blocks: &[Block], undo: &[BlockUndo]) -> Brc20State {
    let mut state = Brc20State::new();
    for (block, u) in blocks.iter().zip(undo) {
        state.apply_block(block, u);
    }
    state
}
