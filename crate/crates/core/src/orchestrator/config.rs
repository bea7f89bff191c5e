use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::client::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, SynthSpec};
use crate::extract::ExtractorSpec;
use crate::privacy::AuditConfig;
use crate::server::AggregationConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Feddymem,
    LocalOnly,
    PlainAverage,
}

impl Baseline {
    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Feddymem => "feddymem",
            Baseline::LocalOnly => "local_only",
            Baseline::PlainAverage => "plain_average",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feddymem" => Ok(Baseline::Feddymem),
            "local_only" => Ok(Baseline::LocalOnly),
            "plain_average" => Ok(Baseline::PlainAverage),
            other => Err(Error::config_key(
                "baseline",
                format!("unknown baseline `{other}` (feddymem | local_only | plain_average)"),
            )),
        }
    }
}

/// How client models are seeded at round 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every client draws the same initial weights.
    #[default]
    Shared,
    /// Client `n` draws from its own stream.
    PerClient,
}

/// Where client and test samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory from a [`SynthSpec`].
    Synthetic(SynthSpec),
    /// A directory written by `feddymem synth`.
    Dir(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec::default())
    }
}

fn default_extractor() -> ExtractorSpec {
    ExtractorSpec::Synthetic {
        seed: 0,
        levels: 3,
        base: [16, 16],
        channels: vec![16, 24, 32],
        image_channels: 3,
    }
}

/// The whole run as one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub seed: u64,
    pub clients: usize,
    pub rounds: u64,
    pub baseline: Baseline,
    pub init: InitMode,
    /// Permute the received bank onto the client's own positions before
    /// memory-reduce blends it in.
    pub align_prev_bank: bool,
    /// Rounds between checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    pub train: LossConfig,
    pub model: ModelConfig,
    pub extractor: ExtractorSpec,
    pub aggregation: AggregationConfig,
    pub eval: EvalConfig,
    pub audit: AuditConfig,
    pub data: DataSource,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clients: 5,
            rounds: 200,
            baseline: Baseline::Feddymem,
            init: InitMode::Shared,
            align_prev_bank: true,
            checkpoint_every: 10,
            train: LossConfig::default(),
            model: ModelConfig::default(),
            extractor: default_extractor(),
            aggregation: AggregationConfig::default(),
            eval: EvalConfig::default(),
            audit: AuditConfig::default(),
            data: DataSource::default(),
        }
    }
}

/// Pulls the field name out of serde's "unknown field `x`" style messages.
fn offending_key(msg: &str) -> Option<String> {
    for marker in ["unknown field `", "missing field `", "unknown variant `"] {
        if let Some(i) = msg.find(marker) {
            let rest = &msg[i + marker.len()..];
            return rest.find('`').map(|j| rest[..j].to_string());
        }
    }
    None
}

impl FederationConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            Error::Config {
                key: offending_key(&msg),
                message: msg,
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// `(H, W, C)` shared by every bank, when the extractor fixes it.
    pub fn bank_dims(&self) -> Option<(usize, usize, usize)> {
        self.extractor
            .base_dims()
            .map(|(h, w)| (h, w, self.model.memory_channels))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config_key("clients", "need at least one client"));
        }
        self.model.validate()?;
        self.extractor.validate()?;
        self.aggregation.validate()?;
        self.eval.validate()?;
        if let Some((h, w, _)) = self.bank_dims() {
            self.train.validate(h * w)?;
            if self.eval.k > h * w {
                return Err(Error::config_key("k", "eval k exceeds the bank size"));
            }
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.clients != self.clients {
                return Err(Error::config_key(
                    "clients",
                    format!("data.synthetic.clients is {} but clients is {}", spec.clients, self.clients),
                ));
            }
            if let ExtractorSpec::Synthetic { base, image_channels, .. } = &self.extractor {
                if *base != spec.image || *image_channels != spec.channels {
                    return Err(Error::config_key(
                        "base",
                        "extractor base dims and image channels must match the synthetic images",
                    ));
                }
            }
        }
        Ok(())
    }
}
