//! Simulator for UTXO transfers, a fee-priority mempool and the BRC20
//! token indexer, with a transfer-pinning attack engine on top.

pub mod chain;
pub mod mempool;
pub mod brc20;
pub mod wallet;
pub mod background;
pub mod sim;
pub mod attack;
pub mod harness;
