use crate::data::KvConfig;
use crate::error::{Error, Result};

/// Optimizer, schedule and initialization settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay_factor: f64,
    /// Minibatches between rate drops.
    pub lr_decay_every: u64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Standard deviation of the Gaussian weight initialization.
    pub init_std: f64,
    pub max_minibatches: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale settings.
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            lr_decay_factor: 4.0,
            lr_decay_every: 500,
            momentum: 0.9,
            batch_size: 32,
            init_std: 0.1,
            max_minibatches: 5000,
            seed: 1,
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: batches of 400, rate drops every 10 000.
    pub fn paper_scale() -> Self {
        TrainConfig {
            lr_decay_every: 10_000,
            batch_size: 400,
            ..TrainConfig::default()
        }
    }

    /// Head fine-tuning: 300 minibatches from a rate of 0.05, quartered
    /// every 150.
    pub fn finetune_default() -> Self {
        TrainConfig {
            lr0: 0.05,
            lr_decay_every: 150,
            max_minibatches: 300,
            ..TrainConfig::default()
        }
    }

    pub const KEYS: &'static [&'static str] = &[
        "lr0",
        "lr_decay_factor",
        "lr_decay_every",
        "momentum",
        "batch_size",
        "init_std",
        "max_minibatches",
        "seed",
    ];

    /// Missing keys fall back to `base`; unknown keys listed in `extra` are
    /// tolerated so a config file can also carry architecture settings.
    pub fn from_kv(kv: &KvConfig, base: &TrainConfig, extra: &[&str]) -> Result<Self> {
        let mut allowed = Self::KEYS.to_vec();
        allowed.extend_from_slice(extra);
        kv.check_keys(&allowed)?;
        let c = TrainConfig {
            lr0: kv.get_or("lr0", base.lr0)?,
            lr_decay_factor: kv.get_or("lr_decay_factor", base.lr_decay_factor)?,
            lr_decay_every: kv.get_or("lr_decay_every", base.lr_decay_every)?,
            momentum: kv.get_or("momentum", base.momentum)?,
            batch_size: kv.get_or("batch_size", base.batch_size)?,
            init_std: kv.get_or("init_std", base.init_std)?,
            max_minibatches: kv.get_or("max_minibatches", base.max_minibatches)?,
            seed: kv.get_or("seed", base.seed)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("lr0", self.lr0);
        kv.set("lr_decay_factor", self.lr_decay_factor);
        kv.set("lr_decay_every", self.lr_decay_every);
        kv.set("momentum", self.momentum);
        kv.set("batch_size", self.batch_size);
        kv.set("init_std", self.init_std);
        kv.set("max_minibatches", self.max_minibatches);
        kv.set("seed", self.seed);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |k: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{k} must be positive, got {v}")))
            }
        };
        finite_pos("lr0", self.lr0)?;
        finite_pos("lr_decay_factor", self.lr_decay_factor)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Config(format!("init_std must be >= 0, got {}", self.init_std)));
        }
        if self.lr_decay_every == 0 || self.batch_size == 0 {
            return Err(Error::Config("lr_decay_every and batch_size must be positive".into()));
        }
        Ok(())
    }
}
