//! Run configuration, feature-set selection and seeded random streams.
//!
//! Configuration files are flat `key = value` text with `#` comments. Every
//! [`RunConfig`] field is addressable by its field name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Deterministic random stream used throughout the crate.
pub type Rng = ChaCha8Rng;

/// A deterministic random stream; identical seeds yield identical draws.
pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random stream derived from a seed and a path of integer labels, e.g.
/// `(seed, epoch, batch)`. Streams for different paths are independent of
/// each other and of the order in which they are created.
pub fn derived_rng(seed: u64, path: &[u64]) -> Rng {
    seeded_rng(derive_seed(seed, path))
}

pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which covariates enter the sensor and query tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSetKind {
    /// PM2.5, lags, time, location and land cover only.
    Minimal,
    /// Minimal plus meteorology, population and elevation.
    Full,
}

impl fmt::Display for FeatureSetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSetKind::Minimal => f.write_str("minimal"),
            FeatureSetKind::Full => f.write_str("full"),
        }
    }
}

impl FromStr for FeatureSetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "minimal" => Ok(FeatureSetKind::Minimal),
            "full" => Ok(FeatureSetKind::Full),
            other => Err(Error::Config(format!("unknown feature set `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent, `θ ← θ − η∇L`.
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => f.write_str("sgd"),
            OptimizerKind::Adam => f.write_str("adam"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sgd" | "gd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Every tunable of a run. Architecture sizes and sampling parameters are
/// defaults, not fitted values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub feature_set: FeatureSetKind,
    /// Sensors sampled per query (`N`).
    pub n_sensors: usize,
    /// Gaussian neighbourhood width in unit-sphere chord units.
    pub sampling_sigma: f64,
    pub lag_window: usize,
    pub latent_count: usize,
    pub latent_dim: usize,
    pub n_heads: usize,
    /// Latent self-attention blocks inside each recycled encoder pass.
    pub n_blocks: usize,
    pub recycle_count: usize,
    pub fourier_bands: usize,
    pub fourier_period: f64,
    pub embed_dim: usize,
    pub batch_size: usize,
    pub n_batches: usize,
    pub n_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    pub patience: usize,
    pub mc_samples: usize,
    pub seed: u64,
    pub split_fractions: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            feature_set: FeatureSetKind::Minimal,
            n_sensors: 16,
            sampling_sigma: 0.1,
            lag_window: 15,
            latent_count: 32,
            latent_dim: 64,
            n_heads: 4,
            n_blocks: 2,
            recycle_count: 3,
            fourier_bands: 8,
            fourier_period: 2.0,
            embed_dim: 12,
            batch_size: 32,
            n_batches: 100,
            n_epochs: 30,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            patience: 10,
            mc_samples: 10,
            seed: 42,
            split_fractions: [0.8, 0.1, 0.1],
        }
    }
}

const KEYS: &[&str] = &[
    "feature_set",
    "n_sensors",
    "sampling_sigma",
    "lag_window",
    "latent_count",
    "latent_dim",
    "n_heads",
    "n_blocks",
    "recycle_count",
    "fourier_bands",
    "fourier_period",
    "embed_dim",
    "batch_size",
    "n_batches",
    "n_epochs",
    "learning_rate",
    "optimizer",
    "patience",
    "mc_samples",
    "seed",
    "split_fractions",
];

impl RunConfig {
    /// Checks the cross-field invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let sum: f64 = self.split_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.split_fractions.iter().any(|f| *f < 0.0) {
            return bad(format!(
                "split_fractions must be non-negative and sum to 1, got {:?}",
                self.split_fractions
            ));
        }
        if self.n_sensors < 1 {
            return bad("n_sensors must be at least 1".into());
        }
        if self.mc_samples < 2 {
            return bad("mc_samples must be at least 2".into());
        }
        if !(self.sampling_sigma > 0.0) {
            return bad("sampling_sigma must be positive".into());
        }
        if self.lag_window < 1 {
            return bad("lag_window must be at least 1".into());
        }
        if self.n_heads == 0 || self.latent_dim % self.n_heads != 0 {
            return bad(format!(
                "latent_dim ({}) must be a positive multiple of n_heads ({})",
                self.latent_dim, self.n_heads
            ));
        }
        if self.latent_count == 0 || self.recycle_count == 0 {
            return bad("latent_count and recycle_count must be positive".into());
        }
        if self.fourier_bands == 0 || !(self.fourier_period > 0.0) {
            return bad("fourier_bands must be >= 1 and fourier_period > 0".into());
        }
        if self.embed_dim == 0 || self.batch_size == 0 {
            return bad("embed_dim and batch_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Renders the configuration as `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&self.value_of(key));
            out.push('\n');
        }
        out
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "feature_set" => self.feature_set.to_string(),
            "n_sensors" => self.n_sensors.to_string(),
            "sampling_sigma" => self.sampling_sigma.to_string(),
            "lag_window" => self.lag_window.to_string(),
            "latent_count" => self.latent_count.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "n_blocks" => self.n_blocks.to_string(),
            "recycle_count" => self.recycle_count.to_string(),
            "fourier_bands" => self.fourier_bands.to_string(),
            "fourier_period" => self.fourier_period.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "n_batches" => self.n_batches.to_string(),
            "n_epochs" => self.n_epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "patience" => self.patience.to_string(),
            "mc_samples" => self.mc_samples.to_string(),
            "seed" => self.seed.to_string(),
            "split_fractions" => {
                let [a, b, c] = self.split_fractions;
                format!("{a}, {b}, {c}")
            }
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
        }
        match key {
            "feature_set" => self.feature_set = value.parse()?,
            "n_sensors" => self.n_sensors = num(key, value)?,
            "sampling_sigma" => self.sampling_sigma = num(key, value)?,
            "lag_window" => self.lag_window = num(key, value)?,
            "latent_count" => self.latent_count = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "n_heads" => self.n_heads = num(key, value)?,
            "n_blocks" => self.n_blocks = num(key, value)?,
            "recycle_count" => self.recycle_count = num(key, value)?,
            "fourier_bands" => self.fourier_bands = num(key, value)?,
            "fourier_period" => self.fourier_period = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "n_batches" => self.n_batches = num(key, value)?,
            "n_epochs" => self.n_epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "patience" => self.patience = num(key, value)?,
            "mc_samples" => self.mc_samples = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "split_fractions" => {
                let parts: Vec<&str> = value.split(',').collect();
                if parts.len() != 3 {
                    return Err(Error::Config(format!(
                        "split_fractions needs three values, got `{value}`"
                    )));
                }
                for (slot, p) in self.split_fractions.iter_mut().zip(parts) {
                    *slot = num(key, p)?;
                }
            }
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` text on top of the defaults and validates the
    /// result. Unknown keys and duplicate keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", i + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Short stable digest of the configuration text.
    pub fn hash(&self) -> String {
        short_hash(self.to_text().as_bytes())
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Disjoint train/validation/test index sets over a record table.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitPart::Train => "train",
            SplitPart::Val => "val",
            SplitPart::Test => "test",
        })
    }
}

impl FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(SplitPart::Train),
            "val" => Ok(SplitPart::Val),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::data(format!("unknown split `{other}`"))),
        }
    }
}

impl DatasetSplit {
    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Train => &self.train,
            SplitPart::Val => &self.val,
            SplitPart::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-record assignment for a table of `n` records.
    pub fn assignment(&self, n: usize) -> Vec<Option<SplitPart>> {
        let mut out = vec![None; n];
        for (part, idx) in [
            (SplitPart::Train, &self.train),
            (SplitPart::Val, &self.val),
            (SplitPart::Test, &self.test),
        ] {
            for &i in idx {
                out[i] = Some(part);
            }
        }
        out
    }

    /// Rebuilds a split from a per-record assignment.
    pub fn from_assignment(parts: &[SplitPart]) -> Self {
        let mut s = DatasetSplit::default();
        for (i, p) in parts.iter().enumerate() {
            match p {
                SplitPart::Train => s.train.push(i),
                SplitPart::Val => s.val.push(i),
                SplitPart::Test => s.test.push(i),
            }
        }
        s
    }
}
