//! Fee-rate priority mempool with replace-by-fee, capacity eviction, expiry
//! and greedy block assembly.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{Block, Chain, ChainError, OutPoint, Transaction, Txid};

pub const FOURTEEN_DAYS: u64 = 14 * 24 * 3600;

/// Exact fee rate `fee / vsize` in sat/vB.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeeRate {
    pub fee: u64,
    pub vsize: u64,
}

impl FeeRate {
    pub fn new(fee: u64, vsize: u64) -> Self {
        assert!(vsize > 0, "fee rate needs a positive vsize");
        FeeRate { fee, vsize }
    }

    /// Whole sat/vB.
    pub fn per_vbyte(rate: u64) -> Self {
        FeeRate { fee: rate, vsize: 1 }
    }

    pub fn as_f64(&self) -> f64 {
        self.fee as f64 / self.vsize as f64
    }
}

impl PartialEq for FeeRate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for FeeRate {}

impl PartialOrd for FeeRate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FeeRate {
    fn cmp(&self, other: &Self) -> Ordering {
        let lhs = self.fee as u128 * other.vsize as u128;
        let rhs = other.fee as u128 * self.vsize as u128;
        lhs.cmp(&rhs)
    }
}

impl fmt::Display for FeeRate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} sat/vB", self.as_f64())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MempoolConfig {
    pub capacity_vbytes: u64,
    pub block_capacity_vbytes: u64,
    pub block_interval: u64,
    pub expiry: u64,
    /// sat/vB
    pub min_relay_fee_rate: u64,
    /// Pool size that counts as congestion 1.0.
    pub congestion_normal_count: u64,
}

impl Default for MempoolConfig {
    fn default() -> Self {
        MempoolConfig {
            capacity_vbytes: 1_000_000,
            block_capacity_vbytes: 20_000,
            block_interval: 600,
            expiry: FOURTEEN_DAYS,
            min_relay_fee_rate: 1,
            congestion_normal_count: 1_000,
        }
    }
}

impl MempoolConfig {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("capacity_vbytes", self.capacity_vbytes),
            ("block_capacity_vbytes", self.block_capacity_vbytes),
            ("block_interval", self.block_interval),
            ("expiry", self.expiry),
            ("min_relay_fee_rate", self.min_relay_fee_rate),
            ("congestion_normal_count", self.congestion_normal_count),
        ];
        match fields.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(format!("{name} must be positive")),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MempoolEntry {
    pub tx: Transaction,
    pub arrival: u64,
    /// Arrival order, used to break fee-rate ties.
    pub seq: u64,
    pub fee: u64,
    pub fee_rate: FeeRate,
    pub rbf_enabled: bool,
    pub depends_on: BTreeSet<Txid>,
    pub children: BTreeSet<Txid>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MempoolError {
    #[error("fee rate {rate} is below the relay minimum of {min} sat/vB")]
    BelowMinRelayFee { rate: FeeRate, min: u64 },
    #[error("conflicts with {0}, which cannot be replaced by this transaction")]
    ConflictNotReplaceable(Txid),
    #[error("input {0} is neither confirmed nor created by a pool transaction")]
    OrphanInput(OutPoint),
    #[error("pool is full; transaction evicted on arrival")]
    PoolFull,
    #[error("transaction {0} is already known")]
    Duplicate(Txid),
    #[error("transaction {0} was never submitted")]
    UnknownTx(Txid),
    #[error(transparent)]
    Invalid(#[from] ChainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictReason {
    Replaced,
    Capacity,
    Expired,
    Withdrawn,
    /// A parent left the pool without confirming.
    Orphaned,
}

/// One line of the event log.
///
/// `fund`, `submit`, `withdraw`, `expire` and `mine` are the inputs needed to
/// replay a run; the rest are outcomes that replay re-derives and compares.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Fund { time: u64, tx: Transaction },
    Submit { time: u64, tx: Transaction },
    Accept { time: u64, txid: Txid, fee: u64, vsize: u64 },
    Reject { time: u64, txid: Txid, reason: String },
    Evict { time: u64, txid: Txid, reason: EvictReason },
    Withdraw { time: u64, txid: Txid },
    Expire { time: u64 },
    Mine { time: u64, height: u64, txids: Vec<Txid> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delay {
    Confirmed(u64),
    Pending,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Accepted {
    pub replaced: Vec<Txid>,
    pub evicted: Vec<Txid>,
}

/// Eviction order: lowest rate first, newest first among equals.
type EvictKey = (FeeRate, Reverse<u64>, Txid);

#[derive(Debug, Clone)]
pub struct Mempool {
    config: MempoolConfig,
    entries: HashMap<Txid, MempoolEntry>,
    spent_by: HashMap<OutPoint, Txid>,
    by_rate: BTreeSet<EvictKey>,
    total_vsize: u64,
    next_seq: u64,
    seen: HashSet<Txid>,
    log: Option<Vec<Event>>,
}

impl Mempool {
    pub fn new(config: MempoolConfig) -> Self {
        Mempool {
            config,
            entries: HashMap::new(),
            spent_by: HashMap::new(),
            by_rate: BTreeSet::new(),
            total_vsize: 0,
            next_seq: 0,
            seen: HashSet::new(),
            log: None,
        }
    }

    pub fn with_event_log(config: MempoolConfig) -> Self {
        let mut pool = Self::new(config);
        pool.log = Some(Vec::new());
        pool
    }

    pub fn config(&self) -> &MempoolConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_vsize(&self) -> u64 {
        self.total_vsize
    }

    pub fn get(&self, txid: &Txid) -> Option<&MempoolEntry> {
        self.entries.get(txid)
    }

    pub fn contains(&self, txid: &Txid) -> bool {
        self.entries.contains_key(txid)
    }

    pub fn entries(&self) -> impl Iterator<Item = &MempoolEntry> {
        self.entries.values()
    }

    /// The pool transaction spending `outpoint`, if any.
    pub fn spender_of(&self, outpoint: &OutPoint) -> Option<Txid> {
        self.spent_by.get(outpoint).copied()
    }

    pub fn events(&self) -> &[Event] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn take_events(&mut self) -> Vec<Event> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn emit(&mut self, event: Event) {
        if let Some(log) = self.log.as_mut() {
            log.push(event);
        }
    }

    /// Funds `owner` out of band and records it so replays can do the same.
    pub fn fund(
        &mut self,
        chain: &mut Chain,
        owner: &crate::chain::Address,
        value: u64,
        now: u64,
    ) -> crate::chain::Utxo {
        let tx = chain.funding_tx(owner, value);
        let utxo = chain.fund(owner, value);
        self.emit(Event::Fund { time: now, tx });
        utxo
    }

    /// Unconfirmed count over the configured normal count; may exceed 1.
    pub fn congestion(&self) -> f64 {
        self.entries.len() as f64 / self.config.congestion_normal_count as f64
    }

    /// Validates and inserts `tx`, replacing conflicts and evicting by fee
    /// rate when the pool overflows.
    pub fn submit(
        &mut self,
        chain: &Chain,
        tx: Transaction,
        now: u64,
    ) -> Result<Accepted, MempoolError> {
        if self.log.is_some() {
            self.emit(Event::Submit {
                time: now,
                tx: tx.clone(),
            });
        }
        let txid = tx.id;
        let result = self.try_submit(chain, tx, now);
        if let Err(err) = &result {
            if *err != MempoolError::PoolFull {
                self.emit(Event::Reject {
                    time: now,
                    txid,
                    reason: err.to_string(),
                });
            }
        }
        result
    }

    fn try_submit(
        &mut self,
        chain: &Chain,
        tx: Transaction,
        now: u64,
    ) -> Result<Accepted, MempoolError> {
        if tx.vsize == 0 {
            return Err(ChainError::ZeroVsize(tx.id).into());
        }
        if tx.outputs.is_empty() {
            return Err(ChainError::NoOutputs(tx.id).into());
        }
        if self.entries.contains_key(&tx.id) || chain.confirmation(&tx.id).is_some() {
            return Err(MempoolError::Duplicate(tx.id));
        }

        let mut input_value = 0u64;
        let mut parents = BTreeSet::new();
        let mut conflicts = BTreeSet::new();
        let mut seen_inputs = HashSet::new();
        for input in &tx.inputs {
            if !seen_inputs.insert(input.prevout) {
                return Err(ChainError::DuplicateInput(tx.id).into());
            }
            let prev = input.prevout;
            if let Some(utxo) = chain.utxos().get(&prev) {
                input_value += utxo.value;
            } else if let Some(parent) = self.entries.get(&prev.txid) {
                let out = parent
                    .tx
                    .outputs
                    .get(prev.vout as usize)
                    .ok_or(MempoolError::OrphanInput(prev))?;
                input_value += out.value;
                parents.insert(prev.txid);
            } else {
                return Err(MempoolError::OrphanInput(prev));
            }
            if let Some(spender) = self.spent_by.get(&prev) {
                conflicts.insert(*spender);
            }
        }
        let outputs = tx.output_value();
        let fee = input_value
            .checked_sub(outputs)
            .ok_or(ChainError::NegativeFee {
                inputs: input_value,
                outputs,
            })?;
        let rate = FeeRate::new(fee, tx.vsize);
        if rate < FeeRate::per_vbyte(self.config.min_relay_fee_rate) {
            return Err(MempoolError::BelowMinRelayFee {
                rate,
                min: self.config.min_relay_fee_rate,
            });
        }

        let mut replaced = Vec::new();
        if !conflicts.is_empty() {
            let mut conflict_fee = 0u64;
            for c in &conflicts {
                let entry = &self.entries[c];
                if !entry.rbf_enabled {
                    return Err(MempoolError::ConflictNotReplaceable(*c));
                }
                conflict_fee += entry.fee;
            }
            if fee <= conflict_fee {
                let first = *conflicts.iter().next().expect("non-empty");
                return Err(MempoolError::ConflictNotReplaceable(first));
            }
            let doomed: HashSet<Txid> = conflicts
                .iter()
                .flat_map(|c| self.with_descendants(*c))
                .collect();
            if let Some(p) = parents.iter().find(|p| doomed.contains(p)) {
                return Err(MempoolError::ConflictNotReplaceable(*p));
            }
            for c in conflicts {
                for gone in self.remove_with_descendants(c) {
                    self.emit(Event::Evict {
                        time: now,
                        txid: gone,
                        reason: EvictReason::Replaced,
                    });
                    replaced.push(gone);
                }
            }
        }

        let txid = tx.id;
        let seq = self.next_seq;
        self.next_seq += 1;
        for parent in &parents {
            self.entries
                .get_mut(parent)
                .expect("resolved above")
                .children
                .insert(txid);
        }
        for input in &tx.inputs {
            self.spent_by.insert(input.prevout, txid);
        }
        self.by_rate.insert((rate, Reverse(seq), txid));
        self.total_vsize += tx.vsize;
        self.seen.insert(txid);
        self.emit(Event::Accept {
            time: now,
            txid,
            fee,
            vsize: tx.vsize,
        });
        let rbf_enabled = tx.signals_rbf();
        self.entries.insert(
            txid,
            MempoolEntry {
                tx,
                arrival: now,
                seq,
                fee,
                fee_rate: rate,
                rbf_enabled,
                depends_on: parents,
                children: BTreeSet::new(),
            },
        );

        let evicted = self.enforce_capacity(now);
        if evicted.contains(&txid) {
            return Err(MempoolError::PoolFull);
        }
        Ok(Accepted { replaced, evicted })
    }

    fn enforce_capacity(&mut self, now: u64) -> Vec<Txid> {
        let mut evicted = Vec::new();
        while self.total_vsize > self.config.capacity_vbytes {
            let (_, _, lowest) = *self.by_rate.iter().next().expect("non-empty when over");
            for (i, gone) in self.remove_with_descendants(lowest).into_iter().enumerate() {
                let reason = if i == 0 {
                    EvictReason::Capacity
                } else {
                    EvictReason::Orphaned
                };
                self.emit(Event::Evict {
                    time: now,
                    txid: gone,
                    reason,
                });
                evicted.push(gone);
            }
        }
        evicted
    }

    /// `root` followed by every in-pool descendant, breadth first.
    fn with_descendants(&self, root: Txid) -> Vec<Txid> {
        let mut order = vec![root];
        let mut seen = HashSet::from([root]);
        let mut i = 0;
        while i < order.len() {
            if let Some(entry) = self.entries.get(&order[i]) {
                for child in &entry.children {
                    if seen.insert(*child) {
                        order.push(*child);
                    }
                }
            }
            i += 1;
        }
        order
    }

    fn remove_with_descendants(&mut self, root: Txid) -> Vec<Txid> {
        let doomed = self.with_descendants(root);
        for txid in &doomed {
            self.remove_entry(txid);
        }
        doomed
    }

    fn remove_entry(&mut self, txid: &Txid) -> Option<MempoolEntry> {
        let entry = self.entries.remove(txid)?;
        for input in &entry.tx.inputs {
            if self.spent_by.get(&input.prevout) == Some(txid) {
                self.spent_by.remove(&input.prevout);
            }
        }
        for parent in &entry.depends_on {
            if let Some(p) = self.entries.get_mut(parent) {
                p.children.remove(txid);
            }
        }
        self.by_rate
            .remove(&(entry.fee_rate, Reverse(entry.seq), *txid));
        self.total_vsize -= entry.tx.vsize;
        Some(entry)
    }

    /// Drops `txid` and its descendants as if the sender abandoned it.
    pub fn withdraw(&mut self, txid: &Txid, now: u64) -> Result<Vec<Txid>, MempoolError> {
        if !self.entries.contains_key(txid) {
            return Err(MempoolError::UnknownTx(*txid));
        }
        self.emit(Event::Withdraw {
            time: now,
            txid: *txid,
        });
        let gone = self.remove_with_descendants(*txid);
        for child in gone.iter().skip(1) {
            self.emit(Event::Evict {
                time: now,
                txid: *child,
                reason: EvictReason::Orphaned,
            });
        }
        Ok(gone)
    }

    /// Evicts entries older than the expiry window (strictly).
    pub fn tick_expiry(&mut self, now: u64) -> Vec<Txid> {
        let mut stale: Vec<(u64, Txid)> = self
            .entries
            .values()
            .filter(|e| now.saturating_sub(e.arrival) > self.config.expiry)
            .map(|e| (e.seq, e.tx.id))
            .collect();
        if stale.is_empty() {
            return Vec::new();
        }
        stale.sort();
        self.emit(Event::Expire { time: now });
        let mut evicted = Vec::new();
        for (_, txid) in stale {
            if !self.entries.contains_key(&txid) {
                continue;
            }
            for (i, gone) in self.remove_with_descendants(txid).into_iter().enumerate() {
                let reason = if i == 0 {
                    EvictReason::Expired
                } else {
                    EvictReason::Orphaned
                };
                self.emit(Event::Evict {
                    time: now,
                    txid: gone,
                    reason,
                });
                evicted.push(gone);
            }
        }
        evicted
    }

    /// Txids the next block would contain, in block order.
    ///
    /// Repeatedly takes the highest-rate entry whose in-pool parents are
    /// already selected and that still fits; entries that do not fit are
    /// skipped for good since the remaining space only shrinks.
    pub fn select_block(&self) -> Vec<Txid> {
        let capacity = self.config.block_capacity_vbytes;
        let mut waiting: HashMap<Txid, usize> = HashMap::new();
        let mut heap = BinaryHeap::new();
        for entry in self.entries.values() {
            if entry.depends_on.is_empty() {
                heap.push(priority(entry));
            } else {
                waiting.insert(entry.tx.id, entry.depends_on.len());
            }
        }
        let mut used = 0u64;
        let mut selected = Vec::new();
        while let Some((_, _, Reverse(txid))) = heap.pop() {
            let entry = &self.entries[&txid];
            if used + entry.tx.vsize > capacity {
                continue;
            }
            used += entry.tx.vsize;
            selected.push(txid);
            for child in &entry.children {
                let left = waiting.get_mut(child).expect("child waits on parent");
                *left -= 1;
                if *left == 0 {
                    heap.push(priority(&self.entries[child]));
                }
            }
        }
        selected
    }

    /// Assembles a block at `now`, appends it to `chain` and removes its
    /// transactions from the pool.
    pub fn mine_block(&mut self, chain: &mut Chain, now: u64) -> Block {
        let selected = self.select_block();
        let mut transactions = Vec::with_capacity(selected.len());
        for txid in &selected {
            let entry = self.remove_entry(txid).expect("selected from pool");
            for child in &entry.children {
                if let Some(c) = self.entries.get_mut(child) {
                    c.depends_on.remove(txid);
                }
            }
            transactions.push(entry.tx);
        }
        let block = Block {
            height: chain.height(),
            timestamp: now,
            transactions,
        };
        chain
            .apply_block_unchecked(block.clone())
            .expect("pool only holds transactions valid against the chain");
        self.emit(Event::Mine {
            time: now,
            height: block.height,
            txids: selected,
        });
        block
    }

    /// Seconds from `submit_time` to the confirming block, or pending.
    pub fn confirmation_delay(
        &self,
        chain: &Chain,
        txid: &Txid,
        submit_time: u64,
    ) -> Result<Delay, MempoolError> {
        match chain.confirmation(txid) {
            Some((_, ts)) => Ok(Delay::Confirmed(ts.saturating_sub(submit_time))),
            None if self.seen.contains(txid) => Ok(Delay::Pending),
            None => Err(MempoolError::UnknownTx(*txid)),
        }
    }
}

fn priority(entry: &MempoolEntry) -> (FeeRate, Reverse<u64>, Reverse<Txid>) {
    (entry.fee_rate, Reverse(entry.seq), Reverse(entry.tx.id))
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ReplayError {
    #[error("event {index}: expected {expected}, replay produced {actual}")]
    Diverged {
        index: usize,
        expected: String,
        actual: String,
    },
    #[error("event {index}: funding transaction rejected: {source}")]
    Funding { index: usize, source: ChainError },
    #[error("replay produced {actual} events, log has {expected}")]
    Length { expected: usize, actual: usize },
}

/// Re-executes the input events of a log on a fresh chain and pool and
/// checks that every derived event matches the recorded one.
pub fn replay_events(
    config: &MempoolConfig,
    events: &[Event],
) -> Result<(Chain, Mempool), ReplayError> {
    let mut chain = Chain::new(config.block_capacity_vbytes);
    let mut pool = Mempool::with_event_log(config.clone());
    for (index, event) in events.iter().enumerate() {
        match event {
            Event::Fund { time, tx } => {
                chain
                    .apply_funding(tx)
                    .map_err(|source| ReplayError::Funding { index, source })?;
                pool.emit(Event::Fund {
                    time: *time,
                    tx: tx.clone(),
                });
            }
            Event::Submit { time, tx } => {
                let _ = pool.submit(&chain, tx.clone(), *time);
            }
            Event::Withdraw { time, txid } => {
                let _ = pool.withdraw(txid, *time);
            }
            Event::Expire { time } => {
                pool.tick_expiry(*time);
            }
            Event::Mine { time, .. } => {
                pool.mine_block(&mut chain, *time);
            }
            Event::Accept { .. } | Event::Reject { .. } | Event::Evict { .. } => {}
        }
    }
    let produced = pool.events();
    for (index, (want, got)) in events.iter().zip(produced).enumerate() {
        if want != got {
            return Err(ReplayError::Diverged {
                index,
                expected: serde_json::to_string(want).unwrap_or_default(),
                actual: serde_json::to_string(got).unwrap_or_default(),
            });
        }
    }
    if produced.len() != events.len() {
        return Err(ReplayError::Length {
            expected: events.len(),
            actual: produced.len(),
        });
    }
    Ok((chain, pool))
}

/// Serializes events as JSON lines.
pub fn write_event_log(events: &[Event]) -> String {
    let mut out = String::new();
    for event in events {
        out.push_str(&serde_json::to_string(event).expect("events serialize"));
        out.push('\n');
    }
    out
}

pub fn read_event_log(text: &str) -> Result<Vec<Event>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{Address, TxInput, TxOutput, SEQUENCE_FINAL, SEQUENCE_RBF};

    fn addr(s: &str) -> Address {
        Address::new(s).unwrap()
    }

    fn config(block: u64) -> MempoolConfig {
        MempoolConfig {
            block_capacity_vbytes: block,
            ..MempoolConfig::default()
        }
    }

    /// Spends a fresh coin paying `rate` sat/vB over `vsize`.
    fn paying(chain: &mut Chain, rate: u64, vsize: u64, seq: u32) -> Transaction {
        let coin = chain.fund(&addr("w"), rate * vsize + 1_000);
        Transaction::new(
            vec![TxInput::new(coin.outpoint, seq)],
            vec![TxOutput::new(1_000, addr("w"))],
            vsize,
        )
    }

    #[test]
    fn fee_rate_compares_exactly() {
        assert_eq!(FeeRate::new(1, 3), FeeRate::new(2, 6));
        assert!(FeeRate::new(1, 3) < FeeRate::new(334, 1000));
        assert!(FeeRate::new(u64::MAX, 1) > FeeRate::new(u64::MAX, 2));
    }

    #[test]
    fn accepts_into_empty_pool() {
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(config(20_000));
        let tx = paying(&mut chain, 200, 100, SEQUENCE_FINAL);
        pool.submit(&chain, tx.clone(), 0).unwrap();
        assert_eq!(pool.get(&tx.id).unwrap().fee_rate, FeeRate::per_vbyte(200));
        assert_eq!(pool.congestion(), 0.001);
    }

    #[test]
    fn full_pool_rejects_below_floor() {
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(MempoolConfig {
            capacity_vbytes: 1_000,
            ..config(20_000)
        });
        for _ in 0..10 {
            let tx = paying(&mut chain, 150, 100, SEQUENCE_FINAL);
            pool.submit(&chain, tx, 0).unwrap();
        }
        let low = paying(&mut chain, 100, 100, SEQUENCE_FINAL);
        assert_eq!(pool.submit(&chain, low.clone(), 1), Err(MempoolError::PoolFull));
        assert!(!pool.contains(&low.id));
        assert_eq!(pool.len(), 10);
        assert!(pool.entries().all(|e| e.fee_rate == FeeRate::per_vbyte(150)));

        let high = paying(&mut chain, 300, 100, SEQUENCE_FINAL);
        let accepted = pool.submit(&chain, high.clone(), 2).unwrap();
        assert_eq!(accepted.evicted.len(), 1);
        assert!(pool.total_vsize() <= 1_000);
    }

    #[test]
    fn final_sequence_blocks_replacement() {
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(config(20_000));
        let coin = chain.fund(&addr("w"), 100_000);
        let spend = |value, seq| {
            Transaction::new(
                vec![TxInput::new(coin.outpoint, seq)],
                vec![TxOutput::new(value, addr("w"))],
                100,
            )
        };
        let original = spend(90_000, SEQUENCE_FINAL);
        pool.submit(&chain, original.clone(), 0).unwrap();
        assert_eq!(
            pool.submit(&chain, spend(50_000, SEQUENCE_FINAL), 1),
            Err(MempoolError::ConflictNotReplaceable(original.id))
        );

        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(config(20_000));
        let coin = chain.fund(&addr("w"), 100_000);
        let spend = |value, seq| {
            Transaction::new(
                vec![TxInput::new(coin.outpoint, seq)],
                vec![TxOutput::new(value, addr("w"))],
                100,
            )
        };
        let original = spend(90_000, SEQUENCE_RBF);
        pool.submit(&chain, original.clone(), 0).unwrap();
        assert!(pool.submit(&chain, spend(90_000, 0), 1).is_err());
        let better = spend(80_000, SEQUENCE_RBF);
        let accepted = pool.submit(&chain, better.clone(), 1).unwrap();
        assert_eq!(accepted.replaced, vec![original.id]);
        assert!(pool.contains(&better.id));
    }

    #[test]
    fn orphan_and_min_relay() {
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(MempoolConfig {
            min_relay_fee_rate: 5,
            ..config(20_000)
        });
        let ghost = OutPoint::new(Txid::from_bytes([9; 32]), 0);
        let orphan = Transaction::new(
            vec![TxInput::new(ghost, SEQUENCE_FINAL)],
            vec![TxOutput::new(1, addr("w"))],
            100,
        );
        assert_eq!(pool.submit(&chain, orphan, 0), Err(MempoolError::OrphanInput(ghost)));
        let cheap = paying(&mut chain, 4, 100, SEQUENCE_FINAL);
        assert!(matches!(
            pool.submit(&chain, cheap, 0),
            Err(MempoolError::BelowMinRelayFee { min: 5, .. })
        ));
    }

    #[test]
    fn mines_highest_rate_first() {
        let mut chain = Chain::new(150);
        let mut pool = Mempool::new(config(150));
        let a = paying(&mut chain, 500, 100, SEQUENCE_FINAL);
        let b = paying(&mut chain, 100, 100, SEQUENCE_FINAL);
        pool.submit(&chain, b.clone(), 0).unwrap();
        pool.submit(&chain, a.clone(), 0).unwrap();
        let block = pool.mine_block(&mut chain, 600);
        assert_eq!(block.transactions.len(), 1);
        assert_eq!(block.transactions[0].id, a.id);
        assert!(pool.contains(&b.id));
        assert_eq!(
            pool.confirmation_delay(&chain, &a.id, 0),
            Ok(Delay::Confirmed(600))
        );
        assert_eq!(pool.confirmation_delay(&chain, &b.id, 0), Ok(Delay::Pending));
        assert_eq!(
            pool.confirmation_delay(&chain, &Txid::from_bytes([0; 32]), 0),
            Err(MempoolError::UnknownTx(Txid::from_bytes([0; 32])))
        );
    }

    #[test]
    fn child_pays_for_parent() {
        let mut chain = Chain::new(10_000);
        let mut pool = Mempool::new(config(10_000));
        let parent = paying(&mut chain, 10, 100, SEQUENCE_FINAL);
        let child = Transaction::new(
            vec![TxInput::new(parent.outpoint(0), SEQUENCE_FINAL)],
            vec![TxOutput::new(100, addr("w"))],
            1,
        );
        pool.submit(&chain, parent.clone(), 0).unwrap();
        pool.submit(&chain, child.clone(), 0).unwrap();
        assert_eq!(pool.get(&child.id).unwrap().fee_rate, FeeRate::per_vbyte(900));
        let block = pool.mine_block(&mut chain, 600);
        let ids: Vec<Txid> = block.transactions.iter().map(|t| t.id).collect();
        assert_eq!(ids, vec![parent.id, child.id]);
    }

    #[test]
    fn expiry_is_strict() {
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(config(20_000));
        let old = paying(&mut chain, 10, 100, SEQUENCE_FINAL);
        let edge = paying(&mut chain, 10, 100, SEQUENCE_FINAL);
        let young = paying(&mut chain, 10, 100, SEQUENCE_FINAL);
        pool.submit(&chain, old.clone(), 0).unwrap();
        pool.submit(&chain, edge.clone(), 86_400).unwrap();
        let now = 15 * 86_400;
        pool.submit(&chain, young.clone(), now - 1).unwrap();
        assert_eq!(pool.tick_expiry(now), vec![old.id]);
        assert!(pool.contains(&edge.id));
        assert!(pool.contains(&young.id));
    }

    #[test]
    fn congestion_examples() {
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(config(20_000));
        assert_eq!(pool.congestion(), 0.0);
        for _ in 0..1_495 {
            let tx = paying(&mut chain, 2, 100, SEQUENCE_FINAL);
            pool.submit(&chain, tx, 0).unwrap();
            if pool.len() == 750 {
                assert_eq!(pool.congestion(), 0.75);
            }
        }
        assert!((pool.congestion() - 1.4948).abs() < 1e-3);
    }

    #[test]
    fn withdraw_cascades_to_children() {
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::with_event_log(config(20_000));
        let parent = paying(&mut chain, 10, 100, SEQUENCE_FINAL);
        let child = Transaction::new(
            vec![TxInput::new(parent.outpoint(0), SEQUENCE_FINAL)],
            vec![TxOutput::new(500, addr("w"))],
            100,
        );
        pool.submit(&chain, parent.clone(), 0).unwrap();
        pool.submit(&chain, child.clone(), 0).unwrap();
        assert_eq!(pool.withdraw(&parent.id, 5).unwrap(), vec![parent.id, child.id]);
        assert!(pool.is_empty());
        assert_eq!(pool.total_vsize(), 0);
    }

    #[test]
    fn event_log_replays() {
        let mut chain = Chain::new(300);
        let mut pool = Mempool::with_event_log(config(300));
        for i in 0..6u64 {
            let coin = pool.fund(&mut chain, &addr("w"), 10_000 + i, i);
            let tx = Transaction::new(
                vec![TxInput::new(coin.outpoint, SEQUENCE_RBF)],
                vec![TxOutput::new(1_000, addr("w"))],
                100,
            );
            let _ = pool.submit(&chain, tx, i);
        }
        pool.mine_block(&mut chain, 600);
        let text = write_event_log(pool.events());
        let events = read_event_log(&text).unwrap();
        let (replayed_chain, replayed) = replay_events(pool.config(), &events).unwrap();
        assert_eq!(replayed.len(), pool.len());
        assert_eq!(replayed_chain.blocks(), chain.blocks());

        let mut tampered = events.clone();
        if let Some(Event::Mine { txids, .. }) = tampered.last_mut() {
            txids.reverse();
        }
        assert!(replay_events(pool.config(), &tampered).is_err());
    }
}
