//! Run configuration files: versioned JSON, `//` line comments allowed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dso::{properties_for, DsoConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::oracles::{Constraint, OracleDef};
use crate::sampler::LangevinConfig;
use crate::seqcore::Vocabulary;
use crate::trainer::{Mode, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Network sizes; the vocabulary and heads come from the oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub k_tokens: usize,
    pub k_dim: usize,
    pub prior_hidden: usize,
    pub embed: usize,
    pub blocks: usize,
    pub attn_heads: usize,
    pub ff_hidden: usize,
    pub predictor_hidden: Option<usize>,
    pub predictor_layers: usize,
    /// Variance of the regression head.
    pub sigma2: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let d = ModelConfig::desk(Vocabulary::dna(1));
        ModelSpec {
            k_tokens: d.k_tokens,
            k_dim: d.k_dim,
            prior_hidden: d.prior_hidden,
            embed: d.embed,
            blocks: d.blocks,
            attn_heads: d.attn_heads,
            ff_hidden: d.ff_hidden,
            predictor_hidden: d.predictor_hidden,
            predictor_layers: d.predictor_layers,
            sigma2: 0.25,
        }
    }
}

impl ModelSpec {
    pub fn to_config(&self, vocab: Vocabulary, constraints: &[Constraint]) -> ModelConfig {
        ModelConfig {
            vocab,
            k_tokens: self.k_tokens,
            k_dim: self.k_dim,
            prior_hidden: self.prior_hidden,
            embed: self.embed,
            blocks: self.blocks,
            attn_heads: self.attn_heads,
            ff_hidden: self.ff_hidden,
            predictor_hidden: self.predictor_hidden,
            predictor_layers: self.predictor_layers,
            properties: properties_for(constraints, self.sigma2),
        }
    }
}

/// Where the offline dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OfflineSpec {
    /// `n` distinct uniform draws, optionally kept only below a quantile of
    /// the primary objective (needs an enumerable space).
    Random {
        n: usize,
        #[serde(default)]
        below_quantile: Option<f64>,
    },
    /// A labeled dataset file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub oracle: OracleDef,
    #[serde(default)]
    pub model: ModelSpec,
    pub offline: OfflineSpec,
    /// Posterior sampler used by pretraining and finetuning.
    #[serde(default)]
    pub posterior: LangevinConfig,
    #[serde(default = "TrainConfig::pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "TrainConfig::finetune")]
    pub finetune: TrainConfig,
    #[serde(default)]
    pub dso: DsoConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

/// Drops `//` comments outside string literals.
pub fn strip_comments(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        let mut in_str = false;
        let mut escaped = false;
        let mut cut = line.len();
        let bytes = line.as_bytes();
        for (i, &b) in bytes.iter().enumerate() {
            if in_str {
                match (escaped, b) {
                    (true, _) => escaped = false,
                    (false, b'\\') => escaped = true,
                    (false, b'"') => in_str = false,
                    _ => {}
                }
            } else if b == b'"' {
                in_str = true;
            } else if b == b'/' && bytes.get(i + 1) == Some(&b'/') {
                cut = i;
                break;
            }
        }
        out.push_str(&line[..cut]);
        out.push('\n');
    }
    out
}

impl RunConfig {
    /// A small table-oracle run that finishes in seconds.
    pub fn example() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            oracle: OracleDef::Table(crate::oracles::LandscapeParams::new(8, 0)),
            model: ModelSpec::default(),
            offline: OfflineSpec::Random {
                n: 2000,
                below_quantile: Some(0.5),
            },
            posterior: LangevinConfig::default(),
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
            dso: DsoConfig::default(),
            seeds: default_seeds(),
            out_dir: default_out(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&strip_comments(text))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.model.sigma2 > 0.0) {
            return Err(Error::Config("model.sigma2 must be positive".into()));
        }
        match &self.offline {
            OfflineSpec::Random { n: 0, .. } => return Err(Error::Config("offline.n must be positive".into())),
            OfflineSpec::Random {
                below_quantile: Some(q), ..
            } if !(*q > 0.0 && *q <= 1.0) => return Err(Error::Config("offline.below_quantile must be in (0, 1]".into())),
            _ => {}
        }
        if self.pretrain.mode != Mode::Pretrain || self.finetune.mode != Mode::Finetune {
            return Err(Error::Config("pretrain/finetune sections must use their own modes".into()));
        }
        self.posterior.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.dso.validate()?;
        // the oracle must build; this catches bad alphabets and lengths early
        self.oracle.build().map(|_| ())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
