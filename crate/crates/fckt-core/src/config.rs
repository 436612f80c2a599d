//! Run configuration: one validated struct spanning every module, loadable
//! from TOML with dotted-key overrides (`transfer.xi=0.8`).

use crate::contrast::ContrastConfig;
use crate::corpus::DatasetFormat;
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::transfer::TransferConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub format: Option<DatasetFormat>,
}

impl DataConfig {
    pub fn format(&self) -> DatasetFormat {
        self.format.unwrap_or(DatasetFormat::Jsonl)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Max aspect length; `None` shares `transfer.h`.
    pub h: Option<usize>,
    pub max_spans: usize,
    pub threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            h: None,
            max_spans: 5,
            threshold: -6.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// `None` picks a backbone-appropriate default (1e-3 toy, 2e-5
    /// pretrained).
    pub learning_rate: Option<f64>,
    pub batch_size: usize,
    /// Contrastive loss weight λ.
    pub lambda: f64,
    pub epochs: usize,
    /// Early-stopping patience in epochs.
    pub patience: usize,
    pub seed: u64,
    /// Global-norm gradient clip; non-positive disables.
    pub clip_norm: f64,
    /// Fraction of training sentences held out for validation when no
    /// explicit validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: None,
            batch_size: 16,
            lambda: 0.1,
            epochs: 30,
            patience: 5,
            seed: 42,
            clip_norm: 1.0,
            val_fraction: 0.2,
        }
    }
}

/// Whether sentiment-prediction accuracy conditions on gold spans or on
/// correctly extracted spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpCondition {
    Gold,
    Extracted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub sp_condition: SpCondition,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            sp_condition: SpCondition::Gold,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: String,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub decode: DecodeConfig,
    pub contrast: ContrastConfig,
    pub transfer: TransferConfig,
    pub trainer: TrainerConfig,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".to_string(),
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            decode: DecodeConfig::default(),
            contrast: ContrastConfig::default(),
            transfer: TransferConfig::default(),
            trainer: TrainerConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// All override keys accepted by [`RunConfig::apply_override`], in the order
/// the CLI registers them.
pub const OVERRIDE_KEYS: &[&str] = &[
    "run_id",
    "output_dir",
    "data.train_path",
    "data.val_path",
    "data.format",
    "encoder.kind",
    "encoder.dim",
    "encoder.layers",
    "encoder.heads",
    "encoder.max_len",
    "encoder.dropout",
    "encoder.freeze",
    "encoder.weights_path",
    "encoder.max_vocab",
    "decode.h",
    "decode.max_spans",
    "decode.threshold",
    "contrast.tau",
    "contrast.enabled",
    "contrast.denominator",
    "transfer.xi",
    "transfer.h",
    "transfer.mix_mode",
    "transfer.gate_granularity",
    "transfer.enabled",
    "transfer.span_bound",
    "trainer.learning_rate",
    "trainer.batch_size",
    "trainer.lambda",
    "trainer.epochs",
    "trainer.patience",
    "trainer.seed",
    "trainer.clip_norm",
    "trainer.val_fraction",
    "metrics.sp_condition",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Max aspect length used by span decoding (shared with the transfer
    /// truncation unless overridden).
    pub fn decode_h(&self) -> usize {
        self.decode.h.unwrap_or(self.transfer.h)
    }

    pub fn learning_rate(&self) -> f64 {
        self.trainer.learning_rate.unwrap_or(match self.encoder.kind {
            EncoderKind::Toy => 1e-3,
            EncoderKind::Pretrained => 2e-5,
        })
    }

    pub fn clip_norm(&self) -> Option<f64> {
        (self.trainer.clip_norm > 0.0).then_some(self.trainer.clip_norm)
    }

    /// Every key checked against its declared range before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.contrast.validate()?;
        self.transfer.validate()?;
        if let Some(h) = self.decode.h {
            if h == 0 {
                return Err(Error::Config("decode.h must be at least 1".into()));
            }
            if h != self.transfer.h {
                return Err(Error::Config(format!(
                    "decode.h ({h}) and transfer.h ({}) must agree; set one",
                    self.transfer.h
                )));
            }
        }
        if self.decode.max_spans == 0 {
            return Err(Error::Config("decode.max_spans must be positive".into()));
        }
        if self.decode.threshold.is_nan() {
            return Err(Error::Config("decode.threshold must not be NaN".into()));
        }
        let t = &self.trainer;
        if t.batch_size == 0 {
            return Err(Error::Config("trainer.batch_size must be positive".into()));
        }
        if let Some(lr) = t.learning_rate {
            if lr <= 0.0 || !lr.is_finite() {
                return Err(Error::Config(format!(
                    "trainer.learning_rate must be positive, got {lr}"
                )));
            }
        }
        if t.lambda < 0.0 || !t.lambda.is_finite() {
            return Err(Error::Config(format!(
                "trainer.lambda must be nonnegative, got {}",
                t.lambda
            )));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::Config(format!(
                "trainer.val_fraction must lie in [0, 1), got {}",
                t.val_fraction
            )));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("invalid run_id {:?}", self.run_id)));
        }
        Ok(())
    }

    /// Applies one dotted-key override; values use the same spelling as the
    /// TOML file.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value {value:?} for {what}"));
        match key {
            "run_id" => self.run_id = value.to_string(),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "data.train_path" => self.data.train_path = Some(PathBuf::from(value)),
            "data.val_path" => self.data.val_path = Some(PathBuf::from(value)),
            "data.format" => {
                self.data.format =
                    Some(DatasetFormat::parse(value).ok_or_else(|| bad("data.format"))?)
            }
            "encoder.kind" => {
                self.encoder.kind = match value {
                    "toy" => EncoderKind::Toy,
                    "pretrained" => EncoderKind::Pretrained,
                    _ => return Err(bad("encoder.kind")),
                }
            }
            "encoder.dim" => self.encoder.dim = parse(value, key)?,
            "encoder.layers" => self.encoder.layers = parse(value, key)?,
            "encoder.heads" => self.encoder.heads = parse(value, key)?,
            "encoder.max_len" => self.encoder.max_len = parse(value, key)?,
            "encoder.dropout" => self.encoder.dropout = parse(value, key)?,
            "encoder.freeze" => self.encoder.freeze = parse(value, key)?,
            "encoder.weights_path" => self.encoder.weights_path = Some(PathBuf::from(value)),
            "encoder.max_vocab" => self.encoder.max_vocab = parse(value, key)?,
            "decode.h" => self.decode.h = Some(parse(value, key)?),
            "decode.max_spans" => self.decode.max_spans = parse(value, key)?,
            "decode.threshold" => self.decode.threshold = parse(value, key)?,
            "contrast.tau" => self.contrast.tau = parse(value, key)?,
            "contrast.enabled" => self.contrast.enabled = parse(value, key)?,
            "contrast.denominator" => {
                self.contrast.denominator = match value {
                    "with_positive" => crate::contrast::DenominatorMode::WithPositive,
                    "negatives_only" => crate::contrast::DenominatorMode::NegativesOnly,
                    _ => return Err(bad("contrast.denominator")),
                }
            }
            "transfer.xi" => self.transfer.xi = parse(value, key)?,
            "transfer.h" => self.transfer.h = parse(value, key)?,
            "transfer.mix_mode" => {
                self.transfer.mix_mode = match value {
                    "gated" => crate::transfer::MixMode::Gated,
                    "convex" => crate::transfer::MixMode::Convex,
                    _ => return Err(bad("transfer.mix_mode")),
                }
            }
            "transfer.gate_granularity" => {
                self.transfer.gate_granularity = match value {
                    "example" => crate::transfer::GateGranularity::Example,
                    "batch" => crate::transfer::GateGranularity::Batch,
                    _ => return Err(bad("transfer.gate_granularity")),
                }
            }
            "transfer.enabled" => self.transfer.enabled = parse(value, key)?,
            "transfer.span_bound" => {
                self.transfer.span_bound = match value {
                    "length" => crate::transfer::SpanBound::Length,
                    "offset" => crate::transfer::SpanBound::Offset,
                    _ => return Err(bad("transfer.span_bound")),
                }
            }
            "trainer.learning_rate" => self.trainer.learning_rate = Some(parse(value, key)?),
            "trainer.batch_size" => self.trainer.batch_size = parse(value, key)?,
            "trainer.lambda" => self.trainer.lambda = parse(value, key)?,
            "trainer.epochs" => self.trainer.epochs = parse(value, key)?,
            "trainer.patience" => self.trainer.patience = parse(value, key)?,
            "trainer.seed" => self.trainer.seed = parse(value, key)?,
            "trainer.clip_norm" => self.trainer.clip_norm = parse(value, key)?,
            "trainer.val_fraction" => self.trainer.val_fraction = parse(value, key)?,
            "metrics.sp_condition" => {
                self.metrics.sp_condition = match value {
                    "gold" => SpCondition::Gold,
                    "extracted" => SpCondition::Extracted,
                    _ => return Err(bad("metrics.sp_condition")),
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key {key:?}; valid keys: {}",
                    OVERRIDE_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Directory this run writes into.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}

fn parse<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}
