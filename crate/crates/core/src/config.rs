//! Table configuration (`de_config`), validation and the config digest.
//!
//! A table is addressed by `(name, config_digest)`. The digest is XXH64
//! (seed 0) over the canonical encoding produced by
//! [`TableConfig::canonical_bytes`], which covers every field except `name`.
//! The encoding is documented byte-for-byte in `docs/PROTOCOL.md`.

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh64::xxh64;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initializer {
    Zeros,
    Constant {
        value: f32,
    },
    /// Uniform over `[-range, range)`.
    Uniform {
        range: f32,
    },
    Normal {
        sigma: f32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Momentum,
}

impl OptimizerKind {
    /// Slot names this optimizer keeps per entry. These strings appear in snapshots.
    pub fn slot_names(self) -> &'static [&'static str] {
        match self {
            OptimizerKind::Sgd => &[],
            OptimizerKind::Adagrad => &[crate::optim::ACCUMULATOR_SLOT],
            OptimizerKind::Momentum => &[crate::optim::MOMENTUM_SLOT],
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "momentum" => Ok(OptimizerKind::Momentum),
            other => Err(Error::invalid_config(
                "optimizer",
                format!("unknown optimizer `{other}`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub adagrad_initial_accumulator: f32,
    pub momentum_coefficient: f32,
}

impl OptimizerSpec {
    pub fn sgd(learning_rate: f32) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            adagrad_initial_accumulator: 0.0,
            momentum_coefficient: 0.0,
        }
    }

    pub fn adagrad(learning_rate: f32, initial_accumulator: f32) -> Self {
        Self {
            kind: OptimizerKind::Adagrad,
            learning_rate,
            adagrad_initial_accumulator: initial_accumulator,
            momentum_coefficient: 0.0,
        }
    }

    pub fn momentum(learning_rate: f32, coefficient: f32) -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            learning_rate,
            adagrad_initial_accumulator: 0.0,
            momentum_coefficient: coefficient,
        }
    }

    /// Defaults for `kind`: Adagrad starts its accumulator at 0.1, momentum uses 0.9.
    pub fn with_defaults(kind: OptimizerKind, learning_rate: f32) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(learning_rate),
            OptimizerKind::Adagrad => Self::adagrad(learning_rate, 0.1),
            OptimizerKind::Momentum => Self::momentum(learning_rate, 0.9),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplerStrategy {
    Uniform,
    /// Draw probability proportional to `max(frequency, 1)^power`.
    FrequencyPower {
        power: f32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BloomSpec {
    pub expected_keys: u64,
    pub target_false_positive_rate: f64,
    pub admit_threshold: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LifetimePolicy {
    pub frequency_cutoff: u64,
    pub bloom: Option<BloomSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StorageBackend {
    InMemory,
    FileSnapshot { path: String },
    CachedRemote { remote_name: String, cache_capacity: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub name: String,
    pub embedding_dim: u32,
    pub has_bias: bool,
    pub initializer: Initializer,
    pub seed: u64,
    pub optimizer: OptimizerSpec,
    pub sampler: SamplerStrategy,
    pub lifetime: LifetimePolicy,
    pub backend: StorageBackend,
}

impl TableConfig {
    /// A config with the defaults: `normal(0, 1/sqrt(dim))` init, SGD at 0.1,
    /// `frequency_power(0.75)` sampling, no lifetime filtering, in-memory storage.
    pub fn new(name: impl Into<String>, embedding_dim: u32) -> Self {
        let sigma = 1.0 / (embedding_dim.max(1) as f32).sqrt();
        Self {
            name: name.into(),
            embedding_dim,
            has_bias: false,
            initializer: Initializer::Normal { sigma },
            seed: 0,
            optimizer: OptimizerSpec::sgd(0.1),
            sampler: SamplerStrategy::FrequencyPower { power: 0.75 },
            lifetime: LifetimePolicy::default(),
            backend: StorageBackend::InMemory,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn with_initializer(mut self, init: Initializer) -> Self {
        self.initializer = init;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_optimizer(mut self, opt: OptimizerSpec) -> Self {
        self.optimizer = opt;
        self
    }

    pub fn with_sampler(mut self, s: SamplerStrategy) -> Self {
        self.sampler = s;
        self
    }

    pub fn with_lifetime(mut self, l: LifetimePolicy) -> Self {
        self.lifetime = l;
        self
    }

    pub fn with_backend(mut self, b: StorageBackend) -> Self {
        self.backend = b;
        self
    }

    /// Replaces the seed with `DYNEMBED_SEED` when that variable is set.
    pub fn with_env_seed(mut self) -> Self {
        if let Some(seed) = std::env::var("DYNEMBED_SEED").ok().and_then(|s| s.parse().ok()) {
            self.seed = seed;
        }
        self
    }

    /// Length of stored vectors: the embedding plus one trailing bias slot when `has_bias`.
    pub fn stored_dim(&self) -> usize {
        self.embedding_dim as usize + usize::from(self.has_bias)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::invalid_config("name", "must be non-empty"));
        }
        if self.name.contains(['/', '\\', '.']) || self.name.chars().any(char::is_whitespace) {
            return Err(Error::invalid_config(
                "name",
                "must not contain path separators, dots or whitespace",
            ));
        }
        if self.embedding_dim == 0 {
            return Err(Error::invalid_config("embedding_dim", "must be >= 1"));
        }
        match self.initializer {
            Initializer::Zeros => {}
            Initializer::Constant { value } if !value.is_finite() => {
                return Err(Error::invalid_config("initializer", "constant must be finite"))
            }
            Initializer::Uniform { range } if !(range.is_finite() && range > 0.0) => {
                return Err(Error::invalid_config("initializer", "uniform range must be > 0"))
            }
            Initializer::Normal { sigma } if !(sigma.is_finite() && sigma > 0.0) => {
                return Err(Error::invalid_config("initializer", "normal sigma must be > 0"))
            }
            _ => {}
        }
        let opt = &self.optimizer;
        if !(opt.learning_rate.is_finite() && opt.learning_rate > 0.0) {
            return Err(Error::invalid_config("optimizer.learning_rate", "must be > 0"));
        }
        if opt.kind == OptimizerKind::Adagrad
            && !(opt.adagrad_initial_accumulator.is_finite() && opt.adagrad_initial_accumulator >= 0.0)
        {
            return Err(Error::invalid_config(
                "optimizer.adagrad_initial_accumulator",
                "must be >= 0",
            ));
        }
        if opt.kind == OptimizerKind::Momentum && !(opt.momentum_coefficient >= 0.0 && opt.momentum_coefficient < 1.0) {
            return Err(Error::invalid_config(
                "optimizer.momentum_coefficient",
                "must be in [0, 1)",
            ));
        }
        if let SamplerStrategy::FrequencyPower { power } = self.sampler {
            if !(power.is_finite() && power >= 0.0) {
                return Err(Error::invalid_config("sampler", "power must be >= 0"));
            }
        }
        if let Some(b) = &self.lifetime.bloom {
            if b.expected_keys == 0 {
                return Err(Error::invalid_config("lifetime.bloom.expected_keys", "must be >= 1"));
            }
            if !(b.target_false_positive_rate > 0.0 && b.target_false_positive_rate <= 0.1) {
                return Err(Error::invalid_config(
                    "lifetime.bloom.target_false_positive_rate",
                    "must be in (0, 0.1]",
                ));
            }
            if b.admit_threshold == 0 || b.admit_threshold > crate::store::bloom::COUNTER_MAX as u32 {
                return Err(Error::invalid_config(
                    "lifetime.bloom.admit_threshold",
                    format!("must be in [1, {}]", crate::store::bloom::COUNTER_MAX),
                ));
            }
        }
        match &self.backend {
            StorageBackend::InMemory => {}
            StorageBackend::FileSnapshot { path } if path.is_empty() => {
                return Err(Error::invalid_config("backend", "file snapshot path is empty"))
            }
            StorageBackend::CachedRemote {
                remote_name,
                cache_capacity,
            } => {
                if remote_name.is_empty() {
                    return Err(Error::invalid_config("backend", "remote name is empty"));
                }
                if *cache_capacity == 0 {
                    return Err(Error::invalid_config("backend", "cache capacity must be >= 1"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Canonical encoding of every field except `name`.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode_body(&mut e);
        e.finish()
    }

    fn encode_body(&self, e: &mut Encoder) {
        e.u32(self.embedding_dim).bool(self.has_bias);
        match self.initializer {
            Initializer::Zeros => e.u8(0).f32(0.0),
            Initializer::Constant { value } => e.u8(1).f32(value),
            Initializer::Uniform { range } => e.u8(2).f32(range),
            Initializer::Normal { sigma } => e.u8(3).f32(sigma),
        };
        e.u64(self.seed);
        let opt = &self.optimizer;
        let kind = match opt.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adagrad => 1,
            OptimizerKind::Momentum => 2,
        };
        e.u8(kind)
            .f32(opt.learning_rate)
            .f32(opt.adagrad_initial_accumulator)
            .f32(opt.momentum_coefficient);
        match self.sampler {
            SamplerStrategy::Uniform => e.u8(0).f32(0.0),
            SamplerStrategy::FrequencyPower { power } => e.u8(1).f32(power),
        };
        e.u64(self.lifetime.frequency_cutoff);
        match &self.lifetime.bloom {
            None => {
                e.u8(0);
            }
            Some(b) => {
                e.u8(1)
                    .u64(b.expected_keys)
                    .f64(b.target_false_positive_rate)
                    .u32(b.admit_threshold);
            }
        }
        match &self.backend {
            StorageBackend::InMemory => {
                e.u8(0);
            }
            StorageBackend::FileSnapshot { path } => {
                e.u8(1).str32(path);
            }
            StorageBackend::CachedRemote {
                remote_name,
                cache_capacity,
            } => {
                e.u8(2).str32(remote_name).u64(*cache_capacity);
            }
        }
    }

    pub fn digest(&self) -> u64 {
        xxh64(&self.canonical_bytes(), 0)
    }

    pub fn table_id(&self) -> TableId {
        TableId {
            name: self.name.clone(),
            digest: self.digest(),
        }
    }

    /// Wire form: `str32 name` followed by the canonical body.
    pub fn encode(&self, e: &mut Encoder) {
        e.str32(&self.name);
        self.encode_body(e);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        let name = d.str32()?;
        let embedding_dim = d.u32()?;
        let has_bias = d.bool()?;
        let init_kind = d.u8()?;
        let init_param = d.f32()?;
        let initializer = match init_kind {
            0 => Initializer::Zeros,
            1 => Initializer::Constant { value: init_param },
            2 => Initializer::Uniform { range: init_param },
            3 => Initializer::Normal { sigma: init_param },
            k => return Err(Error::FormatError(format!("unknown initializer {k}"))),
        };
        let seed = d.u64()?;
        let kind = match d.u8()? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adagrad,
            2 => OptimizerKind::Momentum,
            k => return Err(Error::FormatError(format!("unknown optimizer {k}"))),
        };
        let optimizer = OptimizerSpec {
            kind,
            learning_rate: d.f32()?,
            adagrad_initial_accumulator: d.f32()?,
            momentum_coefficient: d.f32()?,
        };
        let s_kind = d.u8()?;
        let power = d.f32()?;
        let sampler = match s_kind {
            0 => SamplerStrategy::Uniform,
            1 => SamplerStrategy::FrequencyPower { power },
            k => return Err(Error::FormatError(format!("unknown sampler {k}"))),
        };
        let frequency_cutoff = d.u64()?;
        let bloom = match d.u8()? {
            0 => None,
            1 => Some(BloomSpec {
                expected_keys: d.u64()?,
                target_false_positive_rate: d.f64()?,
                admit_threshold: d.u32()?,
            }),
            k => return Err(Error::FormatError(format!("bad bloom flag {k}"))),
        };
        let backend = match d.u8()? {
            0 => StorageBackend::InMemory,
            1 => StorageBackend::FileSnapshot { path: d.str32()? },
            2 => StorageBackend::CachedRemote {
                remote_name: d.str32()?,
                cache_capacity: d.u64()?,
            },
            k => return Err(Error::FormatError(format!("unknown backend {k}"))),
        };
        Ok(Self {
            name,
            embedding_dim,
            has_bias,
            initializer,
            seed,
            optimizer,
            sampler,
            lifetime: LifetimePolicy {
                frequency_cutoff,
                bloom,
            },
            backend,
        })
    }
}

/// Server-side identity of a table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TableId {
    pub name: String,
    pub digest: u64,
}

impl TableId {
    pub fn encode(&self, e: &mut Encoder) {
        e.str32(&self.name).u64(self.digest);
    }

    pub fn decode(d: &mut Decoder<'_>) -> Result<Self> {
        Ok(Self {
            name: d.str32()?,
            digest: d.u64()?,
        })
    }
}

impl std::fmt::Display for TableId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{:016x}", self.name, self.digest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> TableConfig {
        TableConfig::new("emb", 100).with_optimizer(OptimizerSpec::sgd(0.01))
    }

    #[test]
    fn zero_dim_is_rejected() {
        let mut c = base();
        c.embedding_dim = 0;
        assert!(matches!(
            c.validate(),
            Err(Error::InvalidConfig { field, .. }) if field == "embedding_dim"
        ));
    }

    #[test]
    fn sgd_config_is_valid() {
        assert_eq!(base().validate(), Ok(()));
    }

    #[test]
    fn momentum_outside_unit_interval_is_rejected() {
        let c = base().with_optimizer(OptimizerSpec::momentum(0.1, 1.5));
        assert!(matches!(
            c.validate(),
            Err(Error::InvalidConfig { field, .. }) if field == "optimizer.momentum_coefficient"
        ));
        let c = base().with_optimizer(OptimizerSpec::momentum(0.1, 1.0));
        assert!(c.validate().is_err());
    }

    #[test]
    fn bloom_rate_bounds() {
        let mut c = base();
        c.lifetime.bloom = Some(BloomSpec {
            expected_keys: 10,
            target_false_positive_rate: 0.2,
            admit_threshold: 2,
        });
        assert!(c.validate().is_err());
        c.lifetime.bloom.as_mut().unwrap().target_false_positive_rate = 0.1;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn digest_ignores_name_only() {
        let a = base();
        let mut b = base();
        b.name = "other".into();
        assert_eq!(a.digest(), b.digest());
        let c = base().with_seed(1);
        assert_ne!(a.digest(), c.digest());
        let d = base().with_bias(true);
        assert_ne!(a.digest(), d.digest());
        let e = base().with_backend(StorageBackend::FileSnapshot { path: "x".into() });
        assert_ne!(a.digest(), e.digest());
    }

    #[test]
    fn wire_form_decodes_to_equal_config() {
        let c = base()
            .with_bias(true)
            .with_lifetime(LifetimePolicy {
                frequency_cutoff: 3,
                bloom: Some(BloomSpec {
                    expected_keys: 100,
                    target_false_positive_rate: 0.01,
                    admit_threshold: 2,
                }),
            })
            .with_backend(StorageBackend::CachedRemote {
                remote_name: "bt".into(),
                cache_capacity: 16,
            });
        let mut e = Encoder::new();
        c.encode(&mut e);
        let bytes = e.finish();
        let mut d = Decoder::new(&bytes);
        assert_eq!(TableConfig::decode(&mut d).unwrap(), c);
        d.expect_end().unwrap();
    }
}
