use std::collections::HashSet;

use proptest::prelude::*;

use pinsim_core::attack::{
    evaluate_success, execute, tolerance, AttackConfig, AttemptRecord, FeeBand, FeePolicy, InscriptionStatus,
    ToleranceInputs,
};
use pinsim_core::brc20::{deploy_payload, mint_payload, Amount};
use pinsim_core::chain::{
    apply_transaction, assign_ordinals, Address, Chain, ChainError, OrdinalRange, Transaction, TxInput, TxOutput,
    SEQUENCE_FINAL, SEQUENCE_RBF,
};
use pinsim_core::harness::{run_scenario, run_sweep, Grid, ScenarioConfig, ScenarioKey, SimParams};
use pinsim_core::mempool::{Mempool, MempoolConfig, MempoolError};
use pinsim_core::sim::{SimConfig, Simulation};
use pinsim_core::wallet::{build_recovery, build_transfer, TransferRequest, WalletConfig};

fn addr(s: &str) -> Address {
    Address::new(s).unwrap()
}

fn sats(chain: &Chain) -> Vec<u64> {
    let mut all: Vec<u64> = chain
        .utxos()
        .iter()
        .flat_map(|u| u.ordinals.iter().flat_map(|r| r.start..r.end()))
        .collect();
    all.sort_unstable();
    all
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spends_conserve_sats_and_reject_double_spends(
        values in prop::collection::vec(1u64..=50, 1..=5),
        pick in prop::collection::vec(any::<bool>(), 5),
        outs in prop::collection::vec(0u64..=60, 1..=4),
    ) {
        let mut chain = Chain::new(1_000_000);
        let coins: Vec<_> = values.iter().map(|v| chain.fund(&addr("a"), *v)).collect();
        let before = sats(&chain);
        let spent: Vec<_> = coins.iter().zip(&pick).filter(|(_, p)| **p).map(|(c, _)| c.clone()).collect();
        prop_assume!(!spent.is_empty());
        let total: u64 = spent.iter().map(|c| c.value).sum();
        let mut left = total;
        let mut outputs = Vec::new();
        for v in outs {
            let v = v.min(left);
            outputs.push(TxOutput::new(v, addr("b")));
            left -= v;
        }
        let tx = Transaction::new(
            spent.iter().map(|c| TxInput::new(c.outpoint, SEQUENCE_FINAL)).collect(),
            outputs,
            100,
        );
        let next = apply_transaction(chain.utxos(), &tx).unwrap();
        prop_assert_eq!(next.len(), chain.utxos().len() - spent.len() + tx.outputs.len());
        let mut after: Vec<u64> = next.iter().flat_map(|u| u.ordinals.iter().flat_map(|r| r.start..r.end())).collect();
        let inputs: Vec<Vec<OrdinalRange>> = spent.iter().map(|c| c.ordinals.clone()).collect();
        let values: Vec<u64> = tx.outputs.iter().map(|o| o.value).collect();
        let fee = total - values.iter().sum::<u64>();
        let (_, burned) = pinsim_core::chain::split_ordinals(&inputs, &values, fee).unwrap();
        after.extend(burned.iter().flat_map(|r| r.start..r.end()));
        after.sort_unstable();
        prop_assert_eq!(after, before);

        // assignment is a pure function of its arguments
        prop_assert_eq!(assign_ordinals(&inputs, &values, fee), assign_ordinals(&inputs, &values, fee));
        prop_assert!(matches!(
            apply_transaction(&next, &tx),
            Err(ChainError::MissingInput(_))
        ));
    }

    #[test]
    fn replacement_needs_signal_and_higher_fee(
        first_fee in 200u64..=5_000,
        second_fee in 200u64..=5_000,
        signals in any::<bool>(),
        cap in 300u64..=2_000,
    ) {
        let config = MempoolConfig { capacity_vbytes: cap, ..MempoolConfig::default() };
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(config);
        let coin = chain.fund(&addr("a"), 10_000);
        let spend = |fee: u64, sequence: u32, to: &str| Transaction::new(
            vec![TxInput::new(coin.outpoint, sequence)],
            vec![TxOutput::new(10_000 - fee, addr(to))],
            200,
        );
        let sequence = if signals { SEQUENCE_RBF } else { SEQUENCE_FINAL };
        let first = spend(first_fee, sequence, "a");
        pool.submit(&chain, first.clone(), 0).unwrap();
        let outcome = pool.submit(&chain, spend(second_fee, SEQUENCE_RBF, "b"), 1);
        if signals && second_fee > first_fee {
            prop_assert_eq!(outcome.unwrap().replaced, vec![first.id]);
        } else {
            prop_assert_eq!(outcome, Err(MempoolError::ConflictNotReplaceable(first.id)));
            prop_assert!(pool.contains(&first.id));
        }
        prop_assert_eq!(pool.len(), 1);
        prop_assert!(pool.total_vsize() <= cap);
    }

    #[test]
    fn pool_never_holds_conflicts_or_exceeds_capacity(
        ops in prop::collection::vec((0usize..4, 1u64..=30, any::<bool>(), 100u64..=400), 1..=30),
        cap in 500u64..=3_000,
    ) {
        let config = MempoolConfig { capacity_vbytes: cap, ..MempoolConfig::default() };
        let mut chain = Chain::new(20_000);
        let mut pool = Mempool::new(config);
        let coins: Vec<_> = (0..4).map(|_| chain.fund(&addr("a"), 100_000)).collect();
        for (t, (coin, rate, rbf, vsize)) in ops.into_iter().enumerate() {
            let seq = if rbf { SEQUENCE_RBF } else { SEQUENCE_FINAL };
            let tx = Transaction::new(
                vec![TxInput::new(coins[coin].outpoint, seq)],
                vec![TxOutput::new(100_000 - rate * vsize, addr(&format!("to{t}")))],
                vsize,
            );
            let _ = pool.submit(&chain, tx, t as u64);
            prop_assert!(pool.total_vsize() <= cap);
            let mut seen = HashSet::new();
            for entry in pool.entries() {
                for input in &entry.tx.inputs {
                    prop_assert!(seen.insert(input.prevout));
                }
            }
        }
    }

    #[test]
    fn tolerance_is_scale_free_and_linear_in_period(
        req in 0.0f64..1e7,
        extra in 0.0f64..1e7,
        volume in 1.0f64..1e7,
        period in 1.0f64..1e6,
        k in 1.0f64..100.0,
    ) {
        let base = ToleranceInputs { l_avail: req + extra, l_req: req, volume, period };
        let t = tolerance(&base).unwrap();
        prop_assert!(t >= 0.0);
        let scaled = tolerance(&ToleranceInputs {
            l_avail: k * (req + extra),
            l_req: k * req,
            volume: k * volume,
            period,
        }).unwrap();
        prop_assert!((scaled - t).abs() <= 1e-9 * t.max(1.0));
        let longer = tolerance(&ToleranceInputs { period: k * period, ..base }).unwrap();
        prop_assert!((longer - k * t).abs() <= 1e-9 * (k * t).max(1.0));
    }

    #[test]
    fn success_is_monotone_in_tolerance(
        delays in prop::collection::vec(prop::option::of(0u64..10_000), 0..=10),
        t in 0u64..10_000,
        dt in 0u64..5_000,
    ) {
        let records: Vec<AttemptRecord> = delays
            .iter()
            .enumerate()
            .map(|(i, d)| AttemptRecord {
                index: i as u32,
                amount: Amount::from(1),
                fee_rate: 10,
                submit_time: 0,
                tx1: None,
                tx2: None,
                inscription_ordinal: None,
                tx1_confirm: None,
                tx2_confirm: None,
                status: if d.is_some() { InscriptionStatus::Locked } else { InscriptionStatus::Voided },
                effective_delay: *d,
                pinned: false,
            })
            .collect();
        if evaluate_success(&records, t + dt) {
            prop_assert!(evaluate_success(&records, t));
        }
    }

    #[test]
    fn default_split_keeps_fee_ratio_and_chains_tx2(rate in 1u64..=2_000, amount in 1u64..=1_000) {
        let cfg = WalletConfig::default();
        let mut sim = Simulation::new(SimConfig::quiet(3));
        seed_balance(&mut sim, "sender", 1_000);
        let (f1, f2) = cfg.fees(rate);
        sim.fund(&addr("sender"), cfg.postage + f1 + f2);
        let req = TransferRequest::new("ordi", amount, addr("sender"), addr("recipient"), rate);
        let bundle = build_transfer(&req, &cfg, sim.chain().utxos(), Some(sim.pool())).unwrap();
        let ratio = bundle.tx2_fee as f64 / bundle.tx1_fee as f64;
        prop_assert!((3.0..=5.0).contains(&ratio));
        prop_assert_eq!(bundle.tx2.inputs[0].prevout, bundle.tx1.outpoint(0));
        let again = build_transfer(&req, &cfg, sim.chain().utxos(), Some(sim.pool())).unwrap();
        prop_assert_eq!(again, bundle);
    }
}

fn inscribe(sim: &mut Simulation, owner: &str, payload: String) {
    let coin = sim.fund(&addr(owner), 546 + 150 * 50_000);
    let tx = Transaction::new(
        vec![TxInput::new(coin.outpoint, SEQUENCE_FINAL)],
        vec![TxOutput::inscribed(546, addr(owner), payload)],
        150,
    );
    sim.submit(tx).unwrap();
}

/// Deploys "ordi" if needed and mints `amount` to `owner`, one block each.
fn seed_balance(sim: &mut Simulation, owner: &str, amount: u64) {
    if sim.indexer().tick("ordi").is_none() {
        inscribe(sim, "deployer", deploy_payload("ordi", &21_000_000u64.into(), &21_000_000u64.into()));
        sim.advance_blocks(1);
    }
    inscribe(sim, owner, mint_payload("ordi", &amount.into()));
    sim.advance_blocks(1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn higher_fee_never_confirms_later(seed in 0u64..1_000, low in 2u64..200, bump in 1u64..200) {
        let delay = |rate: u64| {
            let mut cfg = SimConfig::quiet(seed);
            cfg.profile.target_level = 0.75;
            let mut sim = Simulation::new(cfg);
            sim.advance_blocks(20);
            let coin = sim.fund(&addr("probe"), 1_000_000);
            let tx = Transaction::new(
                vec![TxInput::new(coin.outpoint, SEQUENCE_FINAL)],
                vec![TxOutput::new(1_000_000 - rate * 200, addr("probe"))],
                200,
            );
            let sent = sim.now();
            sim.submit(tx.clone()).unwrap();
            sim.advance_blocks(20);
            sim.chain().confirmation(&tx.id).map_or(u64::MAX, |(_, t)| t - sent)
        };
        prop_assert!(delay(low + bump) <= delay(low));
    }

    #[test]
    fn inscribing_and_recovering_keep_the_overall_balance(amount in 1u64..=1_000, rate in 1u64..=500) {
        let cfg = WalletConfig::default();
        let mut sim = Simulation::new(SimConfig::quiet(5));
        seed_balance(&mut sim, "owner", 1_000);
        let owner = addr("owner");
        let (f1, f2) = cfg.fees(rate);
        sim.fund(&owner, cfg.postage + f1 + f2 + rate * cfg.recovery_vsize);
        let req = TransferRequest::new("ordi", amount, owner.clone(), addr("elsewhere"), rate);
        let bundle = build_transfer(&req, &cfg, sim.chain().utxos(), Some(sim.pool())).unwrap();
        sim.submit(bundle.tx1.clone()).unwrap();
        sim.advance_blocks(1);
        let locked = sim.indexer().balance("ordi", &owner);
        prop_assert_eq!(locked.overall, Amount::from(1_000));
        prop_assert_eq!(locked.transferable, Amount::from(amount));

        let pending = sim.indexer().pending.values().next().unwrap().clone();
        let recovery = build_recovery(&pending, &owner, sim.chain().utxos(), Some(sim.pool()), rate, &cfg).unwrap();
        sim.submit(recovery).unwrap();
        sim.advance_blocks(1);
        let back = sim.indexer().balance("ordi", &owner);
        prop_assert_eq!(back.available, Amount::from(1_000));
        prop_assert_eq!(back.transferable, Amount::zero());
    }
}

fn attack_sim(seed: u64) -> Simulation {
    let params = SimParams::default();
    let mut cfg = SimConfig::quiet(seed);
    cfg.profile.target_level = 0.75;
    cfg.profile.fees = params.fees.clone();
    cfg.background = params.background.clone();
    let mut sim = Simulation::new(cfg);
    seed_balance(&mut sim, "target", 1_000_000);
    sim.advance_blocks(30);
    sim
}

fn attack_config(fraction: f64, band: FeeBand, attempts: u32) -> AttackConfig {
    let params = SimParams::default();
    AttackConfig {
        target: addr("target"),
        attacker: addr("attacker"),
        tick: "ordi".into(),
        fraction,
        band,
        policy: FeePolicy::default(),
        attempts,
        tolerance: params.tolerance,
        horizon: params.horizon,
        spacing: None,
        rbf: true,
        wallet: pinsim_core::attack::attack_wallet(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attack_fees_stay_in_band_and_target_keeps_its_tokens(
        seed in 0u64..1_000,
        f_min in 5u64..150,
        width in 0u64..150,
        fraction in 0.05f64..=1.0,
    ) {
        let band = FeeBand::new(f_min, f_min + width).unwrap();
        let mut sim = attack_sim(seed);
        let outcome = execute(&attack_config(fraction, band, 4), &mut sim).unwrap();
        for a in &outcome.per_attempt {
            if a.status != InscriptionStatus::Skipped {
                prop_assert!(band.contains(a.fee_rate), "{} outside [{}, {}]", a.fee_rate, band.f_min, band.f_sf);
            }
        }
        let b = sim.indexer().balance("ordi", &addr("target"));
        prop_assert_eq!(b.overall, Amount::from(1_000_000));
        prop_assert_eq!(&b.available + &b.transferable, outcome.initial_available.clone());
        prop_assert!(outcome.pinned_fraction() <= 1.0);
    }
}

#[test]
fn more_attempts_never_pin_less() {
    for seed in 1..=8 {
        for fraction in [0.5, 1.0] {
            let pinned: Vec<Amount> = [1, 2, 5, 10]
                .iter()
                .map(|&r| {
                    let mut sim = attack_sim(seed);
                    let band = FeeBand::collapsed(100).unwrap();
                    execute(&attack_config(fraction, band, r), &mut sim).unwrap().total_pinned
                })
                .collect();
            assert!(pinned.windows(2).all(|w| w[0] <= w[1]), "seed {seed}, fraction {fraction}: {pinned:?}");
        }
    }
}

#[test]
fn scenarios_and_sweeps_are_deterministic() {
    let config = ScenarioConfig {
        key: ScenarioKey {
            fraction: 0.5,
            fee_rate: 100,
            congestion: 0.75,
            attempts: 3,
        },
        params: SimParams::default(),
    };
    assert_eq!(run_scenario(&config, 9).unwrap(), run_scenario(&config, 9).unwrap());

    let grid = Grid {
        fractions: vec![0.1, 1.0],
        fee_rates: vec![100],
        congestions: vec![0.5, 0.75],
        attempts: vec![2],
    };
    let seeds = [1, 2, 3];
    let one = run_sweep(&grid, &seeds, &SimParams::default(), 1).unwrap();
    let many = run_sweep(&grid, &seeds, &SimParams::default(), 3).unwrap();
    assert_eq!(one.to_csv(), many.to_csv());
    assert_eq!(one.rows.len(), 4);
}
