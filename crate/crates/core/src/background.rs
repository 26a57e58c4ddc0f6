//! Synthetic background traffic that holds the pool near a target
//! congestion level.
//!
//! Candidates arrive as a Poisson process at a fixed ceiling rate and are
//! thinned down to the rate the target level needs, so runs that share a
//! seed but differ in level see nested arrival streams: everything present
//! at a lower level is also present, with identical size, fee and
//! lifetime, at a higher one.
//!
//! Every background transaction is eventually abandoned by its sender
//! after an exponential lifetime unless mined first. With `K` transactions
//! mined per block and abandonment rate `mu` per block, arrivals at
//! `K + mu * level * normal_count` per block balance out at roughly
//! `level * normal_count` waiting transactions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mempool::MempoolConfig;

/// Log-normal fee rates whose log-median follows an AR(1) walk, one step
/// per block interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeeDistribution {
    /// sat/vB
    pub median: f64,
    pub log_sd: f64,
    pub drift_rho: f64,
    pub drift_sd: f64,
}

impl Default for FeeDistribution {
    fn default() -> Self {
        FeeDistribution {
            median: 140.0,
            log_sd: 0.8,
            drift_rho: 0.9,
            drift_sd: 0.03,
        }
    }
}

impl FeeDistribution {
    fn stationary_sd(&self) -> f64 {
        if self.drift_rho.abs() < 1.0 {
            self.drift_sd / (1.0 - self.drift_rho * self.drift_rho).sqrt()
        } else {
            self.drift_sd
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CongestionProfile {
    pub target_level: f64,
    #[serde(default)]
    pub fees: FeeDistribution,
    pub seed: u64,
}

impl CongestionProfile {
    pub fn new(target_level: f64, seed: u64) -> Self {
        CongestionProfile {
            target_level,
            fees: FeeDistribution::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.target_level) {
            return Err(format!("target level {} outside [0, 1]", self.target_level));
        }
        let f = &self.fees;
        if !(f.median > 0.0 && f.log_sd >= 0.0 && f.drift_sd >= 0.0 && f.drift_rho.abs() <= 1.0) {
            return Err("fee distribution parameters out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackgroundConfig {
    /// Chance per block interval that a waiting sender gives up.
    pub abandon_rate: f64,
    pub vsize_min: u64,
    pub vsize_max: u64,
    /// Highest level the shared candidate stream can serve.
    pub ceiling_level: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        BackgroundConfig {
            abandon_rate: 0.05,
            vsize_min: 150,
            vsize_max: 400,
            ceiling_level: 1.0,
        }
    }
}

impl BackgroundConfig {
    pub fn mean_vsize(&self) -> f64 {
        (self.vsize_min + self.vsize_max) as f64 / 2.0
    }

    /// Expected arrivals per block interval at `level`.
    pub fn arrivals_per_block(&self, level: f64, pool: &MempoolConfig) -> f64 {
        if level <= 0.0 {
            return 0.0;
        }
        let mined = pool.block_capacity_vbytes as f64 / self.mean_vsize();
        mined + self.abandon_rate * level * pool.congestion_normal_count as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub time: u64,
    pub vsize: u64,
    pub fee: u64,
    /// When the sender withdraws it if still unconfirmed.
    pub abandon_at: u64,
}

#[derive(Debug, Clone)]
pub struct BackgroundLoad {
    rng: ChaCha8Rng,
    drift_rng: ChaCha8Rng,
    fees: FeeDistribution,
    cfg: BackgroundConfig,
    interval: f64,
    min_relay: u64,
    gap: Option<Exp<f64>>,
    lifetime: Exp<f64>,
    keep: f64,
    clock: f64,
    drift: f64,
    drift_block: u64,
    origin: u64,
}

impl BackgroundLoad {
    /// Arrivals start after `origin` (simulated seconds).
    pub fn new(
        profile: &CongestionProfile,
        cfg: &BackgroundConfig,
        pool: &MempoolConfig,
        origin: u64,
    ) -> Self {
        let interval = pool.block_interval as f64;
        let ceiling = cfg.arrivals_per_block(cfg.ceiling_level.max(profile.target_level), pool);
        let wanted = cfg.arrivals_per_block(profile.target_level, pool);
        let gap = (wanted > 0.0).then(|| Exp::new(ceiling / interval).expect("positive rate"));
        let lifetime = Exp::new(cfg.abandon_rate.max(1e-12) / interval).expect("positive rate");
        let mut drift_rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x9e37_79b9_7f4a_7c15);
        let z: f64 = drift_rng.sample(StandardNormal);
        BackgroundLoad {
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            drift: z * profile.fees.stationary_sd(),
            drift_rng,
            fees: profile.fees.clone(),
            cfg: cfg.clone(),
            interval,
            min_relay: pool.min_relay_fee_rate,
            gap,
            lifetime,
            keep: if ceiling > 0.0 { wanted / ceiling } else { 0.0 },
            clock: origin as f64,
            drift_block: 0,
            origin,
        }
    }

    /// Current median fee rate after drift, sat/vB.
    pub fn median_now(&self) -> f64 {
        self.fees.median * self.drift.exp()
    }

    fn advance_drift(&mut self, time: f64) {
        let block = ((time - self.origin as f64) / self.interval).floor().max(0.0) as u64;
        while self.drift_block < block {
            let eps: f64 = self.drift_rng.sample(StandardNormal);
            self.drift = self.fees.drift_rho * self.drift + self.fees.drift_sd * eps;
            self.drift_block += 1;
        }
    }

    /// Next kept arrival. Every candidate consumes the same draws whether
    /// kept or not, which is what keeps streams nested across levels.
    pub fn next_arrival(&mut self) -> Option<Arrival> {
        let gap = self.gap?;
        loop {
            self.clock += gap.sample(&mut self.rng);
            let u: f64 = self.rng.gen();
            let z: f64 = self.rng.sample(StandardNormal);
            let vsize = self.rng.gen_range(self.cfg.vsize_min..=self.cfg.vsize_max);
            let life = self.lifetime.sample(&mut self.rng);
            if u >= self.keep {
                continue;
            }
            self.advance_drift(self.clock);
            let rate = self.fees.median * (self.drift + self.fees.log_sd * z).exp();
            let fee = ((rate * vsize as f64).ceil() as u64).max(self.min_relay * vsize);
            let time = self.clock as u64;
            return Some(Arrival {
                time,
                vsize,
                fee,
                abandon_at: time + life.ceil() as u64,
            });
        }
    }
}
