//! UTXO transactions, blocks and ordinal (per-satoshi) tracking.
//!
//! Every satoshi carries a serial number. When a transaction is applied the
//! serials of its inputs are concatenated in input order and sliced, in
//! output order, into the new outputs. Whatever is left at the tail is the
//! fee slice and is considered burned.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Sequence number that opts an input out of replace-by-fee.
pub const SEQUENCE_FINAL: u32 = 0xFFFF_FFFF;
/// Highest sequence number that still signals replaceability.
pub const SEQUENCE_RBF: u32 = 0xFFFF_FFFD;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChainError {
    #[error("address label must not be empty")]
    EmptyAddress,
    #[error("input {0} is unknown or already spent")]
    MissingInput(OutPoint),
    #[error("outputs ({outputs} sat) exceed inputs ({inputs} sat)")]
    NegativeFee { inputs: u64, outputs: u64 },
    #[error("ordinal lengths do not add up: inputs carry {inputs} sat, outputs plus fee need {required}")]
    LengthMismatch { inputs: u64, required: u64 },
    #[error("ordinal {0} was spent as a fee")]
    OrdinalBurned(u64),
    #[error("ordinal {0} is not held by any unspent output")]
    OrdinalUnknown(u64),
    #[error("transaction {0} spends the same outpoint twice")]
    DuplicateInput(Txid),
    #[error("transaction {0} has no outputs")]
    NoOutputs(Txid),
    #[error("transaction {0} declares zero vsize")]
    ZeroVsize(Txid),
    #[error("transaction {0} is already confirmed")]
    AlreadyConfirmed(Txid),
    #[error("block {height} exceeds capacity: {vsize} > {capacity} vB")]
    BlockTooLarge { height: u64, vsize: u64, capacity: u64 },
}

/// Opaque owner label standing in for a locking script.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Address(String);

impl Address {
    pub fn new(label: impl Into<String>) -> Result<Self, ChainError> {
        let label = label.into();
        if label.is_empty() {
            return Err(ChainError::EmptyAddress);
        }
        Ok(Address(label))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Address {
    type Error = ChainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Address::new(value)
    }
}

impl From<Address> for String {
    fn from(value: Address) -> Self {
        value.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Txid([u8; 32]);

impl Txid {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Txid(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }
}

impl fmt::Display for Txid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Txid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Txid({})", &hex::encode(self.0)[..12])
    }
}

impl TryFrom<String> for Txid {
    type Error = hex::FromHexError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        let mut bytes = [0u8; 32];
        hex::decode_to_slice(value, &mut bytes)?;
        Ok(Txid(bytes))
    }
}

impl From<Txid> for String {
    fn from(value: Txid) -> Self {
        value.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutPoint {
    pub txid: Txid,
    pub vout: u32,
}

impl OutPoint {
    pub fn new(txid: Txid, vout: u32) -> Self {
        OutPoint { txid, vout }
    }
}

impl fmt::Display for OutPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.txid, self.vout)
    }
}

/// Contiguous run of satoshi serial numbers `[start, start + length)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OrdinalRange {
    pub start: u64,
    pub length: u64,
}

impl OrdinalRange {
    pub fn new(start: u64, length: u64) -> Self {
        debug_assert!(length >= 1, "ordinal ranges are never empty");
        OrdinalRange { start, length }
    }

    /// Range covering the inclusive serials `first..=last`.
    pub fn inclusive(first: u64, last: u64) -> Self {
        OrdinalRange::new(first, last - first + 1)
    }

    pub fn end(&self) -> u64 {
        self.start + self.length
    }

    pub fn contains(&self, ordinal: u64) -> bool {
        ordinal >= self.start && ordinal < self.end()
    }
}

impl fmt::Display for OrdinalRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.length == 1 {
            write!(f, "#{}", self.start)
        } else {
            write!(f, "#{}-#{}", self.start, self.end() - 1)
        }
    }
}

pub fn total_length(ranges: &[OrdinalRange]) -> u64 {
    ranges.iter().map(|r| r.length).sum()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utxo {
    pub outpoint: OutPoint,
    pub value: u64,
    pub owner: Address,
    pub ordinals: Vec<OrdinalRange>,
}

impl Utxo {
    /// First satoshi serial carried by this output, if it carries any.
    pub fn first_ordinal(&self) -> Option<u64> {
        self.ordinals.first().map(|r| r.start)
    }

    pub fn holds_ordinal(&self, ordinal: u64) -> bool {
        self.ordinals.iter().any(|r| r.contains(ordinal))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxInput {
    pub prevout: OutPoint,
    pub sequence: u32,
}

impl TxInput {
    pub fn new(prevout: OutPoint, sequence: u32) -> Self {
        TxInput { prevout, sequence }
    }

    pub fn signals_rbf(&self) -> bool {
        self.sequence <= SEQUENCE_RBF
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxOutput {
    pub value: u64,
    pub owner: Address,
    /// Raw inscription payload revealed with this output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub envelope: Option<String>,
}

impl TxOutput {
    pub fn new(value: u64, owner: Address) -> Self {
        TxOutput {
            value,
            owner,
            envelope: None,
        }
    }

    pub fn inscribed(value: u64, owner: Address, raw: impl Into<String>) -> Self {
        TxOutput {
            value,
            owner,
            envelope: Some(raw.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: Txid,
    pub inputs: Vec<TxInput>,
    pub outputs: Vec<TxOutput>,
    pub vsize: u64,
    /// Free-form tag; distinguishes otherwise identical coinbase transactions.
    #[serde(default)]
    pub lock_time: u32,
}

impl Transaction {
    pub fn new(inputs: Vec<TxInput>, outputs: Vec<TxOutput>, vsize: u64) -> Self {
        Self::with_lock_time(inputs, outputs, vsize, 0)
    }

    pub fn with_lock_time(
        inputs: Vec<TxInput>,
        outputs: Vec<TxOutput>,
        vsize: u64,
        lock_time: u32,
    ) -> Self {
        let id = compute_txid(&inputs, &outputs, vsize, lock_time);
        Transaction {
            id,
            inputs,
            outputs,
            vsize,
            lock_time,
        }
    }

    pub fn is_coinbase(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn output_value(&self) -> u64 {
        self.outputs.iter().map(|o| o.value).sum()
    }

    pub fn signals_rbf(&self) -> bool {
        self.inputs.iter().any(TxInput::signals_rbf)
    }

    pub fn outpoint(&self, vout: u32) -> OutPoint {
        OutPoint::new(self.id, vout)
    }

    /// Recomputes the id from the content; false if the stored id is stale.
    pub fn id_is_consistent(&self) -> bool {
        self.id == compute_txid(&self.inputs, &self.outputs, self.vsize, self.lock_time)
    }
}

fn compute_txid(inputs: &[TxInput], outputs: &[TxOutput], vsize: u64, lock_time: u32) -> Txid {
    let mut hasher = Sha256::new();
    hasher.update(lock_time.to_le_bytes());
    hasher.update(vsize.to_le_bytes());
    hasher.update((inputs.len() as u64).to_le_bytes());
    for input in inputs {
        hasher.update(input.prevout.txid.as_bytes());
        hasher.update(input.prevout.vout.to_le_bytes());
        hasher.update(input.sequence.to_le_bytes());
    }
    hasher.update((outputs.len() as u64).to_le_bytes());
    for output in outputs {
        hasher.update(output.value.to_le_bytes());
        hasher.update((output.owner.as_str().len() as u64).to_le_bytes());
        hasher.update(output.owner.as_str().as_bytes());
        match &output.envelope {
            Some(raw) => {
                hasher.update([1u8]);
                hasher.update((raw.len() as u64).to_le_bytes());
                hasher.update(raw.as_bytes());
            }
            None => hasher.update([0u8]),
        }
    }
    Txid(hasher.finalize().into())
}

/// An inscription as seen once its creating transaction has been applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InscriptionEnvelope {
    pub raw: String,
    pub bound_ordinal: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub timestamp: u64,
    pub transactions: Vec<Transaction>,
}

impl Block {
    pub fn vsize(&self) -> u64 {
        self.transactions.iter().map(|t| t.vsize).sum()
    }
}

/// The outputs a block consumed, per transaction, in block order.
///
/// This is what an indexer needs to follow individual satoshis without
/// keeping its own copy of the UTXO set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockUndo {
    pub spent: Vec<Vec<Utxo>>,
}

/// Slices the concatenated input ordinals into outputs, first-in-first-out.
///
/// Returns one range list per output; the trailing `fee` satoshis are
/// dropped. Adjacent ranges inside an output are merged.
pub fn assign_ordinals(
    inputs: &[Vec<OrdinalRange>],
    output_values: &[u64],
    fee: u64,
) -> Result<Vec<Vec<OrdinalRange>>, ChainError> {
    split_ordinals(inputs, output_values, fee).map(|(outputs, _)| outputs)
}

/// Like [`assign_ordinals`] but also returns the fee slice.
pub fn split_ordinals(
    inputs: &[Vec<OrdinalRange>],
    output_values: &[u64],
    fee: u64,
) -> Result<(Vec<Vec<OrdinalRange>>, Vec<OrdinalRange>), ChainError> {
    let available: u64 = inputs.iter().map(|r| total_length(r)).sum();
    let required = output_values
        .iter()
        .try_fold(fee, |acc, v| acc.checked_add(*v))
        .unwrap_or(u64::MAX);
    if available != required {
        return Err(ChainError::LengthMismatch {
            inputs: available,
            required,
        });
    }

    let mut source = inputs.iter().flatten().copied();
    let mut current: Option<OrdinalRange> = None;
    let mut take = |mut want: u64| -> Vec<OrdinalRange> {
        let mut out: Vec<OrdinalRange> = Vec::new();
        while want > 0 {
            let range = match current.take() {
                Some(r) => r,
                None => source
                    .next()
                    .expect("length check guarantees enough satoshis"),
            };
            let used = range.length.min(want);
            push_merged(&mut out, OrdinalRange::new(range.start, used));
            if used < range.length {
                current = Some(OrdinalRange::new(range.start + used, range.length - used));
            }
            want -= used;
        }
        out
    };

    let outputs = output_values.iter().map(|v| take(*v)).collect();
    let fee_slice = take(fee);
    Ok((outputs, fee_slice))
}

fn push_merged(ranges: &mut Vec<OrdinalRange>, next: OrdinalRange) {
    if let Some(last) = ranges.last_mut() {
        if last.end() == next.start {
            last.length += next.length;
            return;
        }
    }
    ranges.push(next);
}

/// What applying a transaction did to the UTXO set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedTx {
    pub txid: Txid,
    pub spent: Vec<Utxo>,
    pub created: Vec<OutPoint>,
    pub fee: u64,
    pub fee_ordinals: Vec<OrdinalRange>,
    pub inscriptions: Vec<InscriptionEnvelope>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UtxoSet {
    utxos: HashMap<OutPoint, Utxo>,
    /// range start -> holder, for every live range
    ordinal_index: BTreeMap<u64, OutPoint>,
    /// range start -> length, for every fee slice
    burned: BTreeMap<u64, u64>,
    inscribed: BTreeSet<u64>,
}

impl UtxoSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.utxos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utxos.is_empty()
    }

    pub fn get(&self, outpoint: &OutPoint) -> Option<&Utxo> {
        self.utxos.get(outpoint)
    }

    pub fn contains(&self, outpoint: &OutPoint) -> bool {
        self.utxos.contains_key(outpoint)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Utxo> {
        self.utxos.values()
    }

    /// Unspent outputs owned by `owner`, sorted by outpoint.
    pub fn owned_by(&self, owner: &Address) -> Vec<&Utxo> {
        let mut owned: Vec<&Utxo> = self.utxos.values().filter(|u| &u.owner == owner).collect();
        owned.sort_by_key(|u| u.outpoint);
        owned
    }

    pub fn balance_of(&self, owner: &Address) -> u64 {
        self.utxos
            .values()
            .filter(|u| &u.owner == owner)
            .map(|u| u.value)
            .sum()
    }

    /// Fee a transaction would pay against this set.
    pub fn fee_of(&self, tx: &Transaction) -> Result<u64, ChainError> {
        let mut inputs = 0u64;
        for input in &tx.inputs {
            let utxo = self
                .utxos
                .get(&input.prevout)
                .ok_or(ChainError::MissingInput(input.prevout))?;
            inputs += utxo.value;
        }
        let outputs = tx.output_value();
        inputs
            .checked_sub(outputs)
            .ok_or(ChainError::NegativeFee { inputs, outputs })
    }

    fn validate_shape(tx: &Transaction) -> Result<(), ChainError> {
        if tx.vsize == 0 {
            return Err(ChainError::ZeroVsize(tx.id));
        }
        if tx.outputs.is_empty() {
            return Err(ChainError::NoOutputs(tx.id));
        }
        let mut seen = std::collections::HashSet::with_capacity(tx.inputs.len());
        for input in &tx.inputs {
            if !seen.insert(input.prevout) {
                return Err(ChainError::DuplicateInput(tx.id));
            }
        }
        Ok(())
    }

    /// Consumes the inputs of `tx` and creates its outputs.
    ///
    /// The set is left untouched when an error is returned.
    pub fn apply(&mut self, tx: &Transaction) -> Result<AppliedTx, ChainError> {
        Self::validate_shape(tx)?;
        let fee = self.fee_of(tx)?;
        let input_ranges: Vec<Vec<OrdinalRange>> = tx
            .inputs
            .iter()
            .map(|i| self.utxos[&i.prevout].ordinals.clone())
            .collect();
        let values: Vec<u64> = tx.outputs.iter().map(|o| o.value).collect();
        let (assigned, fee_ordinals) = split_ordinals(&input_ranges, &values, fee)?;

        let mut spent = Vec::with_capacity(tx.inputs.len());
        for input in &tx.inputs {
            let utxo = self.remove(&input.prevout);
            spent.push(utxo);
        }
        for range in &fee_ordinals {
            self.burned.insert(range.start, range.length);
        }
        let (created, inscriptions) = self.insert_outputs(tx, assigned);
        Ok(AppliedTx {
            txid: tx.id,
            spent,
            created,
            fee,
            fee_ordinals,
            inscriptions,
        })
    }

    /// Adds the outputs of an input-less transaction, numbering fresh
    /// satoshis from `first_ordinal`.
    pub fn apply_coinbase(
        &mut self,
        tx: &Transaction,
        first_ordinal: u64,
    ) -> Result<AppliedTx, ChainError> {
        Self::validate_shape(tx)?;
        let mut next = first_ordinal;
        let assigned: Vec<Vec<OrdinalRange>> = tx
            .outputs
            .iter()
            .map(|o| {
                let ranges = if o.value == 0 {
                    Vec::new()
                } else {
                    vec![OrdinalRange::new(next, o.value)]
                };
                next += o.value;
                ranges
            })
            .collect();
        let (created, inscriptions) = self.insert_outputs(tx, assigned);
        Ok(AppliedTx {
            txid: tx.id,
            spent: Vec::new(),
            created,
            fee: 0,
            fee_ordinals: Vec::new(),
            inscriptions,
        })
    }

    fn insert_outputs(
        &mut self,
        tx: &Transaction,
        assigned: Vec<Vec<OrdinalRange>>,
    ) -> (Vec<OutPoint>, Vec<InscriptionEnvelope>) {
        let mut created = Vec::with_capacity(tx.outputs.len());
        let mut inscriptions = Vec::new();
        for (vout, (output, ordinals)) in tx.outputs.iter().zip(assigned).enumerate() {
            let outpoint = tx.outpoint(vout as u32);
            // An envelope binds to the first sat of the first output; an
            // empty first output cannot carry one.
            if vout == 0 {
                if let (Some(raw), Some(first)) = (&output.envelope, ordinals.first()) {
                    self.inscribed.insert(first.start);
                    inscriptions.push(InscriptionEnvelope {
                        raw: raw.clone(),
                        bound_ordinal: first.start,
                    });
                }
            }
            for range in &ordinals {
                self.ordinal_index.insert(range.start, outpoint);
            }
            self.utxos.insert(
                outpoint,
                Utxo {
                    outpoint,
                    value: output.value,
                    owner: output.owner.clone(),
                    ordinals,
                },
            );
            created.push(outpoint);
        }
        (created, inscriptions)
    }

    fn remove(&mut self, outpoint: &OutPoint) -> Utxo {
        let utxo = self.utxos.remove(outpoint).expect("checked by fee_of");
        for range in &utxo.ordinals {
            self.ordinal_index.remove(&range.start);
        }
        utxo
    }

    /// True if any satoshi of `utxo` ever had an inscription bound to it.
    pub fn carries_inscription(&self, utxo: &Utxo) -> bool {
        utxo.ordinals
            .iter()
            .any(|r| self.inscribed.range(r.start..r.end()).next().is_some())
    }

    /// Unspent output currently holding `ordinal`.
    pub fn holder_of(&self, ordinal: u64) -> Result<&Utxo, ChainError> {
        if let Some((_, outpoint)) = self.ordinal_index.range(..=ordinal).next_back() {
            let utxo = &self.utxos[outpoint];
            if utxo.holds_ordinal(ordinal) {
                return Ok(utxo);
            }
        }
        if let Some((start, len)) = self.burned.range(..=ordinal).next_back() {
            if ordinal < start + len {
                return Err(ChainError::OrdinalBurned(ordinal));
            }
        }
        Err(ChainError::OrdinalUnknown(ordinal))
    }

    /// Owner of the output carrying `ordinal`.
    pub fn locate_inscription(&self, ordinal: u64) -> Result<Address, ChainError> {
        self.holder_of(ordinal).map(|u| u.owner.clone())
    }

    /// All unspent outputs, sorted by outpoint.
    pub fn snapshot(&self) -> Vec<Utxo> {
        let mut all: Vec<Utxo> = self.utxos.values().cloned().collect();
        all.sort_by_key(|u| u.outpoint);
        all
    }

    /// Rebuilds a set from a snapshot. Burned slices are not part of a
    /// snapshot, so fee-slice lookups report `OrdinalUnknown` afterwards.
    pub fn from_snapshot(utxos: Vec<Utxo>) -> Self {
        let mut set = UtxoSet::new();
        for utxo in utxos {
            for range in &utxo.ordinals {
                set.ordinal_index.insert(range.start, utxo.outpoint);
            }
            set.utxos.insert(utxo.outpoint, utxo);
        }
        set
    }
}

/// Functional form of [`UtxoSet::apply`].
pub fn apply_transaction(state: &UtxoSet, tx: &Transaction) -> Result<UtxoSet, ChainError> {
    let mut next = state.clone();
    next.apply(tx)?;
    Ok(next)
}

/// Confirmed history: the UTXO set plus every block and its undo data.
#[derive(Debug, Clone)]
pub struct Chain {
    utxos: UtxoSet,
    blocks: Vec<Block>,
    undo: Vec<BlockUndo>,
    confirmed: HashMap<Txid, (u64, u64)>,
    block_capacity_vbytes: u64,
    next_ordinal: u64,
    funding_counter: u32,
}

impl Chain {
    pub fn new(block_capacity_vbytes: u64) -> Self {
        Chain {
            utxos: UtxoSet::new(),
            blocks: Vec::new(),
            undo: Vec::new(),
            confirmed: HashMap::new(),
            block_capacity_vbytes,
            next_ordinal: 0,
            funding_counter: 0,
        }
    }

    pub fn utxos(&self) -> &UtxoSet {
        &self.utxos
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn undo(&self) -> &[BlockUndo] {
        &self.undo
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn block_capacity_vbytes(&self) -> u64 {
        self.block_capacity_vbytes
    }

    /// Height and timestamp of the block that confirmed `txid`.
    pub fn confirmation(&self, txid: &Txid) -> Option<(u64, u64)> {
        self.confirmed.get(txid).copied()
    }

    /// Creates coins out of thin air for `owner`, outside any block.
    pub fn fund(&mut self, owner: &Address, value: u64) -> Utxo {
        let tx = self.funding_tx(owner, value);
        self.apply_funding(&tx)
            .expect("freshly built funding transaction is valid");
        self.utxos.get(&tx.outpoint(0)).cloned().expect("just created")
    }

    /// The coinbase-style transaction [`Chain::fund`] would apply next.
    pub fn funding_tx(&self, owner: &Address, value: u64) -> Transaction {
        Transaction::with_lock_time(
            Vec::new(),
            vec![TxOutput::new(value, owner.clone())],
            1,
            self.funding_counter,
        )
    }

    /// Applies an input-less funding transaction, e.g. one read back from
    /// an event log.
    pub fn apply_funding(&mut self, tx: &Transaction) -> Result<AppliedTx, ChainError> {
        if self.confirmed.contains_key(&tx.id) {
            return Err(ChainError::AlreadyConfirmed(tx.id));
        }
        let applied = self.utxos.apply_coinbase(tx, self.next_ordinal)?;
        self.next_ordinal += tx.output_value();
        self.funding_counter = self.funding_counter.max(tx.lock_time.wrapping_add(1));
        Ok(applied)
    }

    /// Appends a block, applying its transactions in order.
    ///
    /// On error the chain is left unchanged.
    pub fn apply_block(&mut self, block: Block) -> Result<&BlockUndo, ChainError> {
        let vsize = block.vsize();
        if vsize > self.block_capacity_vbytes {
            return Err(ChainError::BlockTooLarge {
                height: block.height,
                vsize,
                capacity: self.block_capacity_vbytes,
            });
        }
        let mut staged = self.utxos.clone();
        let mut undo = BlockUndo::default();
        for tx in &block.transactions {
            if self.confirmed.contains_key(&tx.id) {
                return Err(ChainError::AlreadyConfirmed(tx.id));
            }
            let applied = staged.apply(tx)?;
            undo.spent.push(applied.spent);
        }
        self.utxos = staged;
        for tx in &block.transactions {
            self.confirmed.insert(tx.id, (block.height, block.timestamp));
        }
        self.blocks.push(block);
        self.undo.push(undo);
        Ok(self.undo.last().expect("just pushed"))
    }

    /// Same as [`Chain::apply_block`] without cloning the UTXO set first.
    ///
    /// Callers must guarantee validity (the mempool does); a failure part
    /// way through leaves the set partially updated.
    pub(crate) fn apply_block_unchecked(&mut self, block: Block) -> Result<(), ChainError> {
        let mut undo = BlockUndo::default();
        for tx in &block.transactions {
            let applied = self.utxos.apply(tx)?;
            undo.spent.push(applied.spent);
            self.confirmed.insert(tx.id, (block.height, block.timestamp));
        }
        self.blocks.push(block);
        self.undo.push(undo);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn addr(s: &str) -> Address {
        Address::new(s).unwrap()
    }

    fn r(first: u64, last: u64) -> OrdinalRange {
        OrdinalRange::inclusive(first, last)
    }

    /// Sender holds #1-#8 in one output; the returned id is that outpoint.
    fn eight_sat_setup() -> (UtxoSet, OutPoint) {
        let sender = addr("sender");
        let op = OutPoint::new(Txid::from_bytes([7; 32]), 0);
        let set = UtxoSet::from_snapshot(vec![Utxo {
            outpoint: op,
            value: 8,
            owner: sender,
            ordinals: vec![r(1, 8)],
        }]);
        (set, op)
    }

    fn eight_sat_tx(op: OutPoint) -> Transaction {
        Transaction::new(
            vec![TxInput::new(op, SEQUENCE_FINAL)],
            vec![
                TxOutput::new(3, addr("A")),
                TxOutput::new(2, addr("B")),
                TxOutput::new(2, addr("sender")),
            ],
            100,
        )
    }

    #[test]
    fn eight_sat_split_is_fifo_with_fee_at_tail() {
        let (set, op) = eight_sat_setup();
        let tx = eight_sat_tx(op);
        let next = apply_transaction(&set, &tx).unwrap();
        assert_eq!(next.get(&tx.outpoint(0)).unwrap().ordinals, vec![r(1, 3)]);
        assert_eq!(next.get(&tx.outpoint(1)).unwrap().ordinals, vec![r(4, 5)]);
        assert_eq!(next.get(&tx.outpoint(2)).unwrap().ordinals, vec![r(6, 7)]);
        assert_eq!(next.locate_inscription(4).unwrap(), addr("B"));
        assert_eq!(next.locate_inscription(8), Err(ChainError::OrdinalBurned(8)));
        assert_eq!(next.locate_inscription(9), Err(ChainError::OrdinalUnknown(9)));
        // the original set is not modified
        assert!(set.contains(&op));
    }

    #[test]
    fn identity_spend_keeps_ranges() {
        let op = OutPoint::new(Txid::from_bytes([1; 32]), 0);
        let mut set = UtxoSet::from_snapshot(vec![Utxo {
            outpoint: op,
            value: 5,
            owner: addr("x"),
            ordinals: vec![r(40, 44)],
        }]);
        let tx = Transaction::new(
            vec![TxInput::new(op, SEQUENCE_FINAL)],
            vec![TxOutput::new(5, addr("x"))],
            10,
        );
        let applied = set.apply(&tx).unwrap();
        assert_eq!(applied.fee, 0);
        assert_eq!(set.get(&tx.outpoint(0)).unwrap().ordinals, vec![r(40, 44)]);
    }

    #[test]
    fn two_inputs_straddle_outputs() {
        let ins = vec![vec![r(10, 12)], vec![r(20, 21)]];
        let out = assign_ordinals(&ins, &[4, 1], 0).unwrap();
        assert_eq!(out, vec![vec![r(10, 12), r(20, 20)], vec![r(21, 21)]]);
    }

    #[test]
    fn assign_examples() {
        assert_eq!(
            assign_ordinals(&[vec![r(1, 8)]], &[3, 2, 2], 1).unwrap(),
            vec![vec![r(1, 3)], vec![r(4, 5)], vec![r(6, 7)]]
        );
        assert_eq!(assign_ordinals(&[], &[], 0).unwrap(), Vec::<Vec<_>>::new());
        assert_eq!(
            assign_ordinals(&[vec![r(5, 6), r(9, 9)]], &[1, 2], 0).unwrap(),
            vec![vec![r(5, 5)], vec![r(6, 6), r(9, 9)]]
        );
        assert!(matches!(
            assign_ordinals(&[vec![r(1, 3)]], &[3], 1),
            Err(ChainError::LengthMismatch { inputs: 3, required: 4 })
        ));
    }

    #[test]
    fn double_spend_and_negative_fee_are_rejected() {
        let (mut set, op) = eight_sat_setup();
        let tx = eight_sat_tx(op);
        set.apply(&tx).unwrap();
        assert_eq!(set.apply(&tx), Err(ChainError::MissingInput(op)));

        let (mut set, op) = eight_sat_setup();
        let greedy = Transaction::new(
            vec![TxInput::new(op, SEQUENCE_FINAL)],
            vec![TxOutput::new(9, addr("A"))],
            10,
        );
        assert_eq!(
            set.apply(&greedy),
            Err(ChainError::NegativeFee { inputs: 8, outputs: 9 })
        );
        assert!(set.contains(&op));
    }

    #[test]
    fn inscription_binds_to_first_sat_of_first_output() {
        let mut chain = Chain::new(10_000);
        let me = addr("me");
        let coin = chain.fund(&me, 1_000);
        let tx = Transaction::new(
            vec![TxInput::new(coin.outpoint, SEQUENCE_FINAL)],
            vec![
                TxOutput::inscribed(546, me.clone(), "hello"),
                TxOutput::new(400, me.clone()),
            ],
            150,
        );
        let applied = chain.utxos.clone().apply(&tx).unwrap();
        assert_eq!(applied.inscriptions.len(), 1);
        assert_eq!(applied.inscriptions[0].bound_ordinal, coin.ordinals[0].start);
        chain
            .apply_block(Block {
                height: 0,
                timestamp: 600,
                transactions: vec![tx.clone()],
            })
            .unwrap();
        assert_eq!(chain.utxos().locate_inscription(coin.ordinals[0].start).unwrap(), me);
        assert_eq!(chain.confirmation(&tx.id), Some((0, 600)));
        assert_eq!(chain.undo()[0].spent[0][0], coin);
    }

    #[test]
    fn failed_block_leaves_chain_untouched() {
        let mut chain = Chain::new(10_000);
        let me = addr("me");
        let coin = chain.fund(&me, 1_000);
        let spend = |v| {
            Transaction::new(
                vec![TxInput::new(coin.outpoint, SEQUENCE_FINAL)],
                vec![TxOutput::new(v, me.clone())],
                100,
            )
        };
        let block = Block {
            height: 0,
            timestamp: 600,
            transactions: vec![spend(900), spend(800)],
        };
        assert!(chain.apply_block(block).is_err());
        assert_eq!(chain.height(), 0);
        assert!(chain.utxos().contains(&coin.outpoint));
    }

    #[test]
    fn address_rejects_empty_label() {
        assert_eq!(Address::new(""), Err(ChainError::EmptyAddress));
        assert!(serde_json::from_str::<Address>("\"\"").is_err());
    }

    #[test]
    fn txid_is_content_addressed() {
        let (_, op) = eight_sat_setup();
        let a = eight_sat_tx(op);
        let b = eight_sat_tx(op);
        assert_eq!(a.id, b.id);
        assert!(a.id_is_consistent());
        let mut c = a.clone();
        c.vsize += 1;
        assert!(!c.id_is_consistent());
        let json = serde_json::to_string(&a).unwrap();
        let back: Transaction = serde_json::from_str(&json).unwrap();
        assert_eq!(back, a);
    }
}
