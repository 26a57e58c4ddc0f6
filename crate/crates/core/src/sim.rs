//! Discrete-event driver: one chain, one mempool, one indexer, a clock and
//! optional background traffic.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::background::{Arrival, BackgroundConfig, BackgroundLoad, CongestionProfile};
use crate::brc20::{BlockEffects, Brc20State};
use crate::chain::{Address, Block, Chain, Transaction, TxInput, TxOutput, Utxo, SEQUENCE_FINAL};
use crate::mempool::{Accepted, FeeRate, Mempool, MempoolConfig, MempoolError};
use crate::wallet::TransferBundle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default)]
    pub mempool: MempoolConfig,
    #[serde(default)]
    pub background: BackgroundConfig,
    pub profile: CongestionProfile,
    #[serde(default)]
    pub log_events: bool,
}

impl SimConfig {
    pub fn quiet(seed: u64) -> Self {
        SimConfig {
            mempool: MempoolConfig::default(),
            background: BackgroundConfig::default(),
            profile: CongestionProfile::new(0.0, seed),
            log_events: false,
        }
    }
}

/// Snapshot taken at every block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockStat {
    pub height: u64,
    pub time: u64,
    pub pool_before: usize,
    pub pool_after: usize,
    pub tx_count: usize,
    pub vsize: u64,
    /// Lowest fee rate included, if the block is not empty.
    pub min_rate: Option<FeeRate>,
}

#[derive(Debug)]
pub struct Simulation {
    config: SimConfig,
    chain: Chain,
    pool: Mempool,
    indexer: Brc20State,
    now: u64,
    next_block_at: u64,
    background: Option<BackgroundLoad>,
    lookahead: Option<Arrival>,
    abandon: BinaryHeap<Reverse<(u64, crate::chain::Txid)>>,
    bg_owner: Address,
    bg_sink: Address,
    stats: Vec<BlockStat>,
    effects: Vec<BlockEffects>,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Self {
        let pool = if config.log_events {
            Mempool::with_event_log(config.mempool.clone())
        } else {
            Mempool::new(config.mempool.clone())
        };
        let background = (config.profile.target_level > 0.0).then(|| {
            BackgroundLoad::new(&config.profile, &config.background, &config.mempool, 0)
        });
        Simulation {
            chain: Chain::new(config.mempool.block_capacity_vbytes),
            pool,
            indexer: Brc20State::new(),
            now: 0,
            next_block_at: config.mempool.block_interval,
            background,
            lookahead: None,
            abandon: BinaryHeap::new(),
            bg_owner: Address::new("background").expect("non-empty"),
            bg_sink: Address::new("background-sink").expect("non-empty"),
            stats: Vec::new(),
            effects: Vec::new(),
            config,
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn pool(&self) -> &Mempool {
        &self.pool
    }

    pub fn pool_mut(&mut self) -> &mut Mempool {
        &mut self.pool
    }

    pub fn indexer(&self) -> &Brc20State {
        &self.indexer
    }

    pub fn block_stats(&self) -> &[BlockStat] {
        &self.stats
    }

    /// Indexer effects of every block, by height.
    pub fn block_effects(&self) -> &[BlockEffects] {
        &self.effects
    }

    pub fn next_block_time(&self) -> u64 {
        self.next_block_at
    }

    pub fn block_interval(&self) -> u64 {
        self.config.mempool.block_interval
    }

    pub fn fund(&mut self, owner: &Address, value: u64) -> Utxo {
        self.pool.fund(&mut self.chain, owner, value, self.now)
    }

    pub fn submit(&mut self, tx: Transaction) -> Result<Accepted, MempoolError> {
        self.pool.submit(&self.chain, tx, self.now)
    }

    /// Sends Tx1 now and Tx2 after the bundle gap, letting the clock run
    /// in between.
    pub fn submit_bundle(
        &mut self,
        bundle: &TransferBundle,
        gap: u64,
    ) -> (Result<Accepted, MempoolError>, Result<Accepted, MempoolError>) {
        let first = self.submit(bundle.tx1.clone());
        self.advance_to(self.now + gap);
        let second = self.submit(bundle.tx2.clone());
        (first, second)
    }

    /// Runs every scheduled event up to and including `t`. Blocks go first
    /// at equal timestamps, then abandonments, then arrivals.
    pub fn advance_to(&mut self, t: u64) {
        loop {
            if self.lookahead.is_none() {
                self.lookahead = self.background.as_mut().and_then(|b| b.next_arrival());
            }
            let arrival_at = self.lookahead.map_or(u64::MAX, |a| a.time);
            let abandon_at = self.abandon.peek().map_or(u64::MAX, |Reverse((at, _))| *at);
            let next = self.next_block_at.min(arrival_at).min(abandon_at);
            if next > t {
                break;
            }
            self.now = next;
            if self.next_block_at == next {
                self.mine();
            } else if abandon_at == next {
                let Reverse((_, txid)) = self.abandon.pop().expect("peeked");
                if self.pool.contains(&txid) {
                    self.pool.withdraw(&txid, next).expect("present");
                }
            } else {
                let arrival = self.lookahead.take().expect("peeked");
                self.inject(arrival);
            }
        }
        self.now = self.now.max(t);
    }

    pub fn advance_blocks(&mut self, n: u64) {
        let target = self.next_block_at + (n.max(1) - 1) * self.block_interval();
        self.advance_to(target);
    }

    /// Runs background traffic alone for `duration` seconds.
    pub fn run_background_load(&mut self, duration: u64) {
        self.advance_to(self.now + duration);
    }

    fn inject(&mut self, arrival: Arrival) {
        let coin = self.pool.fund(&mut self.chain, &self.bg_owner, arrival.fee + 546, self.now);
        let tx = Transaction::new(
            vec![TxInput::new(coin.outpoint, SEQUENCE_FINAL)],
            vec![TxOutput::new(546, self.bg_sink.clone())],
            arrival.vsize,
        );
        let txid = tx.id;
        if self.pool.submit(&self.chain, tx, self.now).is_ok() {
            self.abandon.push(Reverse((arrival.abandon_at, txid)));
        }
    }

    fn mine(&mut self) -> Block {
        let now = self.next_block_at;
        self.pool.tick_expiry(now);
        let pool_before = self.pool.len();
        let block = self.pool.mine_block(&mut self.chain, now);
        let undo = self.chain.undo().last().expect("block just applied");
        let effects = self.indexer.apply_block(&block, undo);
        self.effects.push(effects);
        let min_rate = block
            .transactions
            .iter()
            .zip(&undo.spent)
            .map(|(tx, spent)| {
                let input: u64 = spent.iter().map(|u| u.value).sum();
                FeeRate::new(input - tx.output_value(), tx.vsize)
            })
            .min();
        self.stats.push(BlockStat {
            height: block.height,
            time: now,
            pool_before,
            pool_after: self.pool.len(),
            tx_count: block.transactions.len(),
            vsize: block.vsize(),
            min_rate,
        });
        self.next_block_at += self.block_interval();
        block
    }

    /// Mean pool size over recorded blocks, averaging the counts just before
    /// and just after each block, divided by the normal count.
    pub fn measured_congestion(&self, skip_blocks: usize) -> f64 {
        let tail = &self.stats[skip_blocks.min(self.stats.len())..];
        if tail.is_empty() {
            return 0.0;
        }
        let sum: f64 = tail
            .iter()
            .map(|s| (s.pool_before + s.pool_after) as f64 / 2.0)
            .sum();
        sum / tail.len() as f64 / self.config.mempool.congestion_normal_count as f64
    }
}
