//! Builds the two transactions behind one BRC20 transfer: Tx1 inscribes
//! the transfer onto a small output owned by the sender, Tx2 moves that
//! output to the recipient. Also builds fee bumps and recovery spends.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::brc20::{transfer_payload, Amount, PendingTransfer};
use crate::chain::{
    Address, Chain, Transaction, TxInput, TxOutput, Utxo, UtxoSet, SEQUENCE_FINAL, SEQUENCE_RBF,
};
use crate::mempool::{Accepted, Mempool, MempoolError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WalletError {
    #[error("invalid transfer request: {0}")]
    InvalidRequest(&'static str),
    #[error("insufficient funds: need {needed} sat, spendable {available} sat")]
    InsufficientFunds { needed: u64, available: u64 },
    #[error("gave up after {0} retries")]
    RetriesExhausted(u32),
    #[error("{0} does not hold the inscription")]
    NotOwner(Address),
    #[error(transparent)]
    Pool(#[from] MempoolError),
}

/// How one user-facing fee rate is turned into the two absolute fees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeeSplit {
    /// Both transactions pay the rate; Tx2's larger size makes its fee
    /// several times Tx1's.
    #[default]
    SameRate,
    /// Both pay the absolute fee `rate * tx2_vsize`, so the rate applies to
    /// Tx2 and Tx1 ends up paying `tx2_vsize / tx1_vsize` times as much per vbyte.
    EqualAbsolute,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalletConfig {
    pub tx1_vsize: u64,
    pub tx2_vsize: u64,
    pub recovery_vsize: u64,
    /// Value of the inscription-carrying output.
    pub postage: u64,
    /// Seconds between sending Tx1 and Tx2.
    pub bundle_gap: u64,
    /// Fee bump multiplier as a fraction.
    pub bump_num: u64,
    pub bump_den: u64,
    pub fee_split: FeeSplit,
}

impl Default for WalletConfig {
    fn default() -> Self {
        WalletConfig {
            tx1_vsize: 150,
            tx2_vsize: 600,
            recovery_vsize: 600,
            postage: 546,
            bundle_gap: 1,
            bump_num: 5,
            bump_den: 4,
            fee_split: FeeSplit::SameRate,
        }
    }
}

impl WalletConfig {
    /// Absolute (tx1, tx2) fees for a rate.
    pub fn fees(&self, fee_rate: u64) -> (u64, u64) {
        let tx2 = fee_rate * self.tx2_vsize;
        match self.fee_split {
            FeeSplit::SameRate => (fee_rate * self.tx1_vsize, tx2),
            FeeSplit::EqualAbsolute => (tx2, tx2),
        }
    }

    /// Next rate after one bump, rounded up.
    pub fn bumped(&self, fee_rate: u64) -> u64 {
        (fee_rate * self.bump_num).div_ceil(self.bump_den)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRequest {
    pub tick: String,
    pub amount: Amount,
    pub sender: Address,
    pub recipient: Address,
    /// sat/vB
    pub fee_rate: u64,
    pub rbf: bool,
    pub max_retries: u32,
    /// Who funds the fees; the sender when absent.
    #[serde(default)]
    pub payer: Option<Address>,
}

impl TransferRequest {
    pub fn new(tick: &str, amount: impl Into<Amount>, sender: Address, recipient: Address, fee_rate: u64) -> Self {
        TransferRequest {
            tick: tick.to_string(),
            amount: amount.into(),
            sender,
            recipient,
            fee_rate,
            rbf: true,
            max_retries: 3,
            payer: None,
        }
    }

    pub fn validate(&self) -> Result<(), WalletError> {
        if self.amount.is_zero() {
            return Err(WalletError::InvalidRequest("amount must be positive"));
        }
        if self.max_retries == 0 {
            return Err(WalletError::InvalidRequest("max_retries must be at least 1"));
        }
        if self.tick.is_empty() {
            return Err(WalletError::InvalidRequest("tick must not be empty"));
        }
        Ok(())
    }

    pub fn payer(&self) -> &Address {
        self.payer.as_ref().unwrap_or(&self.sender)
    }

    fn sequence(&self) -> u32 {
        if self.rbf {
            SEQUENCE_RBF
        } else {
            SEQUENCE_FINAL
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferBundle {
    pub tx1: Transaction,
    pub tx2: Transaction,
    pub tx1_fee: u64,
    pub tx2_fee: u64,
    pub fee_rate: u64,
    pub retries: u32,
}

/// Plain-satoshi outputs of `owner`, largest first, skipping anything that
/// carries an inscription or is already spent by a pool transaction.
pub fn spendable_coins(utxos: &UtxoSet, owner: &Address, pool: Option<&Mempool>) -> Vec<Utxo> {
    let mut coins: Vec<Utxo> = utxos
        .owned_by(owner)
        .into_iter()
        .filter(|u| !utxos.carries_inscription(u))
        .filter(|u| pool.is_none_or(|p| p.spender_of(&u.outpoint).is_none()))
        .cloned()
        .collect();
    coins.sort_by(|a, b| b.value.cmp(&a.value).then(a.outpoint.cmp(&b.outpoint)));
    coins
}

fn select_coins(coins: Vec<Utxo>, needed: u64) -> Result<(Vec<Utxo>, u64), WalletError> {
    let mut picked = Vec::new();
    let mut total = 0u64;
    for coin in coins {
        if total >= needed {
            break;
        }
        total += coin.value;
        picked.push(coin);
    }
    if total < needed {
        return Err(WalletError::InsufficientFunds {
            needed,
            available: total,
        });
    }
    Ok((picked, total))
}

/// Builds Tx1 and Tx2. Only satoshis are checked here; whether the sender
/// actually holds the tokens is for the indexer to decide.
pub fn build_transfer(
    req: &TransferRequest,
    cfg: &WalletConfig,
    utxos: &UtxoSet,
    pool: Option<&Mempool>,
) -> Result<TransferBundle, WalletError> {
    req.validate()?;
    let payer = req.payer().clone();
    let (fee1, fee2) = cfg.fees(req.fee_rate);
    let needed = cfg.postage + fee1 + fee2;
    let (coins, total) = select_coins(spendable_coins(utxos, &payer, pool), needed)?;
    let sequence = req.sequence();

    let change1 = total - cfg.postage - fee1;
    let mut outputs1 = vec![TxOutput::inscribed(
        cfg.postage,
        req.sender.clone(),
        transfer_payload(&req.tick, &req.amount),
    )];
    if change1 > 0 {
        outputs1.push(TxOutput::new(change1, payer.clone()));
    }
    let tx1 = Transaction::new(
        coins
            .iter()
            .map(|c| TxInput::new(c.outpoint, sequence))
            .collect(),
        outputs1,
        cfg.tx1_vsize,
    );
    let tx2 = build_tx2(req, cfg, &tx1, change1, fee2)?;
    Ok(TransferBundle {
        tx1,
        tx2,
        tx1_fee: fee1,
        tx2_fee: fee2,
        fee_rate: req.fee_rate,
        retries: 0,
    })
}

fn build_tx2(
    req: &TransferRequest,
    cfg: &WalletConfig,
    tx1: &Transaction,
    change1: u64,
    fee2: u64,
) -> Result<Transaction, WalletError> {
    if change1 < fee2 {
        return Err(WalletError::InsufficientFunds {
            needed: fee2,
            available: change1,
        });
    }
    let sequence = req.sequence();
    let mut inputs = vec![TxInput::new(tx1.outpoint(0), sequence)];
    if change1 > 0 {
        inputs.push(TxInput::new(tx1.outpoint(1), sequence));
    }
    let mut outputs = vec![TxOutput::new(cfg.postage, req.recipient.clone())];
    if change1 > fee2 {
        outputs.push(TxOutput::new(change1 - fee2, req.payer().clone()));
    }
    Ok(Transaction::new(inputs, outputs, cfg.tx2_vsize))
}

/// Submits Tx1 at `now` and Tx2 `gap` seconds later.
pub fn submit_bundle(
    bundle: &TransferBundle,
    chain: &Chain,
    pool: &mut Mempool,
    now: u64,
    gap: u64,
) -> (Result<Accepted, MempoolError>, Result<Accepted, MempoolError>) {
    let first = pool.submit(chain, bundle.tx1.clone(), now);
    let second = pool.submit(chain, bundle.tx2.clone(), now + gap);
    (first, second)
}

/// Replaces an unconfirmed Tx2 with one paying the bumped rate.
pub fn retry_with_fee_bump(
    req: &TransferRequest,
    bundle: &TransferBundle,
    cfg: &WalletConfig,
    chain: &Chain,
    pool: &mut Mempool,
    now: u64,
) -> Result<TransferBundle, WalletError> {
    if bundle.retries >= req.max_retries {
        return Err(WalletError::RetriesExhausted(bundle.retries));
    }
    let fee_rate = cfg.bumped(bundle.fee_rate);
    let (_, fee2) = cfg.fees(fee_rate);
    let change1 = bundle.tx1.outputs.get(1).map_or(0, |o| o.value);
    let tx2 = build_tx2(req, cfg, &bundle.tx1, change1, fee2)?;
    pool.submit(chain, tx2.clone(), now)?;
    Ok(TransferBundle {
        tx1: bundle.tx1.clone(),
        tx2,
        tx1_fee: bundle.tx1_fee,
        tx2_fee: fee2,
        fee_rate,
        retries: bundle.retries + 1,
    })
}

/// A Tx2 that sends a pending transfer inscription back to `owner`,
/// outbidding whatever currently spends it.
pub fn build_recovery(
    pending: &PendingTransfer,
    owner: &Address,
    utxos: &UtxoSet,
    pool: Option<&Mempool>,
    fee_rate: u64,
    cfg: &WalletConfig,
) -> Result<Transaction, WalletError> {
    let holder = utxos
        .holder_of(pending.inscription_ordinal)
        .map_err(|_| WalletError::NotOwner(owner.clone()))?;
    if &holder.owner != owner {
        return Err(WalletError::NotOwner(owner.clone()));
    }
    let fee = fee_rate * cfg.recovery_vsize;
    let (coins, total) = select_coins(spendable_coins(utxos, owner, pool), fee)?;
    let mut inputs = vec![TxInput::new(holder.outpoint, SEQUENCE_RBF)];
    inputs.extend(coins.iter().map(|c| TxInput::new(c.outpoint, SEQUENCE_RBF)));
    let mut outputs = vec![TxOutput::new(holder.value, owner.clone())];
    if total > fee {
        outputs.push(TxOutput::new(total - fee, owner.clone()));
    }
    Ok(Transaction::new(inputs, outputs, cfg.recovery_vsize))
}
