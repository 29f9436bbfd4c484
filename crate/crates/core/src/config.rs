//! Flat `section.key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoders::{DecoderConfig, RelationLossNorm};
use crate::encoder::HashedEncoderConfig;
use crate::stack::StackConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Trainable hashed sub-token encoder; needs no external files.
    Hashed,
    /// Frozen features exported from a pretrained encoder.
    Precomputed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    /// Type and full boundaries must match.
    Exact,
    /// Head-word boundaries. Not supported.
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSettings {
    pub kind: EncoderKind,
    pub model_id: String,
    /// JSONL feature file for the precomputed backend.
    pub features: String,
    pub dim: usize,
    pub vocab_buckets: usize,
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSettings {
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderSettings {
    pub label_dim: usize,
    pub width_dim: usize,
    pub max_width: usize,
    pub relation_threshold: f64,
    pub relation_loss_norm: RelationLossNorm,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub no_erla: bool,
    pub no_stack: bool,
    pub no_label_embedding: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub neg_spans: usize,
    pub neg_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSettings {
    pub max_sentence_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub matching: Matching,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub encoder: EncoderSettings,
    pub stack: StackSettings,
    pub decoder: DecoderSettings,
    pub ablation: AblationSettings,
    pub train: TrainSettings,
    pub data: DataSettings,
    pub eval: EvalSettings,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            encoder: EncoderSettings {
                kind: EncoderKind::Hashed,
                model_id: "bert-base-cased".into(),
                features: String::new(),
                dim: 768,
                vocab_buckets: 8192,
                max_positions: 512,
            },
            stack: StackSettings {
                layers: 4,
                heads: 8,
                dropout: 0.1,
            },
            decoder: DecoderSettings {
                label_dim: 150,
                width_dim: 150,
                max_width: 10,
                relation_threshold: 0.4,
                relation_loss_norm: RelationLossNorm::PairsTimesTypes,
            },
            ablation: AblationSettings::default(),
            train: TrainSettings {
                epochs: 100,
                learning_rate: 5e-5,
                warmup_ratio: 0.1,
                weight_decay: 1e-2,
                batch_size: 4,
                seed: 42,
                grad_clip: 1.0,
                neg_spans: 100,
                neg_pairs: 100,
            },
            data: DataSettings {
                max_sentence_len: crate::data::DEFAULT_MAX_SENTENCE_LEN,
            },
            eval: EvalSettings {
                matching: Matching::Exact,
            },
        }
    }
}

pub const KEYS: &[&str] = &[
    "encoder.kind",
    "encoder.model_id",
    "encoder.features",
    "encoder.dim",
    "encoder.vocab_buckets",
    "encoder.max_positions",
    "stack.layers",
    "stack.heads",
    "stack.dropout",
    "decoder.label_dim",
    "decoder.width_dim",
    "decoder.max_width",
    "decoder.relation_threshold",
    "decoder.relation_loss_norm",
    "ablation.no_erla",
    "ablation.no_stack",
    "ablation.no_label_embedding",
    "train.epochs",
    "train.learning_rate",
    "train.warmup_ratio",
    "train.weight_decay",
    "train.batch_size",
    "train.seed",
    "train.grad_clip",
    "train.neg_spans",
    "train.neg_pairs",
    "data.max_sentence_len",
    "eval.matching",
];

fn typed<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?} as {}", std::any::type_name::<T>())))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl Config {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Config::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", line_no + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "encoder.kind" => {
                self.encoder.kind = match value {
                    "hashed" => EncoderKind::Hashed,
                    "precomputed" => EncoderKind::Precomputed,
                    _ => return Err(Error::Config(format!("encoder.kind: expected hashed or precomputed, got {value:?}"))),
                }
            }
            "encoder.model_id" => self.encoder.model_id = value.to_string(),
            "encoder.features" => self.encoder.features = value.to_string(),
            "encoder.dim" => self.encoder.dim = typed(key, value)?,
            "encoder.vocab_buckets" => self.encoder.vocab_buckets = typed(key, value)?,
            "encoder.max_positions" => self.encoder.max_positions = typed(key, value)?,
            "stack.layers" => self.stack.layers = typed(key, value)?,
            "stack.heads" => self.stack.heads = typed(key, value)?,
            "stack.dropout" => self.stack.dropout = typed(key, value)?,
            "decoder.label_dim" => self.decoder.label_dim = typed(key, value)?,
            "decoder.width_dim" => self.decoder.width_dim = typed(key, value)?,
            "decoder.max_width" => self.decoder.max_width = typed(key, value)?,
            "decoder.relation_threshold" => self.decoder.relation_threshold = typed(key, value)?,
            "decoder.relation_loss_norm" => self.decoder.relation_loss_norm = RelationLossNorm::parse(value)?,
            "ablation.no_erla" => self.ablation.no_erla = boolean(key, value)?,
            "ablation.no_stack" => self.ablation.no_stack = boolean(key, value)?,
            "ablation.no_label_embedding" => self.ablation.no_label_embedding = boolean(key, value)?,
            "train.epochs" => self.train.epochs = typed(key, value)?,
            "train.learning_rate" => self.train.learning_rate = typed(key, value)?,
            "train.warmup_ratio" => self.train.warmup_ratio = typed(key, value)?,
            "train.weight_decay" => self.train.weight_decay = typed(key, value)?,
            "train.batch_size" => self.train.batch_size = typed(key, value)?,
            "train.seed" => self.train.seed = typed(key, value)?,
            "train.grad_clip" => self.train.grad_clip = typed(key, value)?,
            "train.neg_spans" => self.train.neg_spans = typed(key, value)?,
            "train.neg_pairs" => self.train.neg_pairs = typed(key, value)?,
            "data.max_sentence_len" => self.data.max_sentence_len = typed(key, value)?,
            "eval.matching" => {
                self.eval.matching = match value {
                    "exact" => Matching::Exact,
                    "head" => Matching::Head,
                    _ => return Err(Error::Config(format!("eval.matching: expected exact or head, got {value:?}"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "encoder.kind" => match self.encoder.kind {
                EncoderKind::Hashed => "hashed".to_string(),
                EncoderKind::Precomputed => "precomputed".to_string(),
            },
            "encoder.model_id" => self.encoder.model_id.clone(),
            "encoder.features" => self.encoder.features.clone(),
            "encoder.dim" => self.encoder.dim.to_string(),
            "encoder.vocab_buckets" => self.encoder.vocab_buckets.to_string(),
            "encoder.max_positions" => self.encoder.max_positions.to_string(),
            "stack.layers" => self.stack.layers.to_string(),
            "stack.heads" => self.stack.heads.to_string(),
            "stack.dropout" => self.stack.dropout.to_string(),
            "decoder.label_dim" => self.decoder.label_dim.to_string(),
            "decoder.width_dim" => self.decoder.width_dim.to_string(),
            "decoder.max_width" => self.decoder.max_width.to_string(),
            "decoder.relation_threshold" => self.decoder.relation_threshold.to_string(),
            "decoder.relation_loss_norm" => self.decoder.relation_loss_norm.as_str().to_string(),
            "ablation.no_erla" => self.ablation.no_erla.to_string(),
            "ablation.no_stack" => self.ablation.no_stack.to_string(),
            "ablation.no_label_embedding" => self.ablation.no_label_embedding.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.warmup_ratio" => self.train.warmup_ratio.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.grad_clip" => self.train.grad_clip.to_string(),
            "train.neg_spans" => self.train.neg_spans.to_string(),
            "train.neg_pairs" => self.train.neg_pairs.to_string(),
            "data.max_sentence_len" => self.data.max_sentence_len.to_string(),
            "eval.matching" => match self.eval.matching {
                Matching::Exact => "exact".to_string(),
                Matching::Head => "head".to_string(),
            },
            _ => return None,
        };
        Some(v)
    }

    /// Every key with its current value, in the file format `parse` reads.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.train.epochs == 0 {
            return fail("train.epochs must be at least 1".into());
        }
        if self.train.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(self.train.learning_rate > 0.0 && self.train.learning_rate <= 1.0) {
            return fail(format!("train.learning_rate must lie in (0, 1], got {}", self.train.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.train.warmup_ratio) {
            return fail(format!("train.warmup_ratio must lie in [0, 1], got {}", self.train.warmup_ratio));
        }
        if !(0.0..=1.0).contains(&self.train.weight_decay) {
            return fail(format!("train.weight_decay must lie in [0, 1], got {}", self.train.weight_decay));
        }
        if !(0.0..1.0).contains(&self.stack.dropout) {
            return fail(format!("stack.dropout must lie in [0, 1), got {}", self.stack.dropout));
        }
        if self.train.grad_clip < 0.0 {
            return fail("train.grad_clip must be non-negative".into());
        }
        if self.encoder.dim == 0 {
            return fail("encoder.dim must be positive".into());
        }
        if self.stack.heads == 0 || self.encoder.dim % self.stack.heads != 0 {
            return Err(Error::HeadSplit {
                dim: self.encoder.dim,
                heads: self.stack.heads,
            });
        }
        if self.stack.layers == 0 && !self.ablation.no_stack {
            return fail("stack.layers must be at least 1 unless ablation.no_stack is set".into());
        }
        if self.decoder.max_width == 0 {
            return fail("decoder.max_width must be at least 1".into());
        }
        let alpha = self.decoder.relation_threshold;
        if !(alpha > 0.0 && alpha < 1.0) {
            return fail(format!("decoder.relation_threshold must lie in (0, 1), got {alpha}"));
        }
        if self.encoder.kind == EncoderKind::Hashed && self.encoder.vocab_buckets < 3 {
            return fail("encoder.vocab_buckets must be at least 3".into());
        }
        if self.encoder.kind == EncoderKind::Precomputed && self.encoder.features.is_empty() {
            return fail("encoder.features is required for the precomputed encoder".into());
        }
        if self.data.max_sentence_len == 0 {
            return fail("data.max_sentence_len must be positive".into());
        }
        Ok(())
    }

    pub fn stack_config(&self) -> StackConfig {
        StackConfig {
            dim: self.encoder.dim,
            heads: self.stack.heads,
            layers: self.stack.layers,
            dropout: self.stack.dropout,
            no_erla: self.ablation.no_erla,
            no_stack: self.ablation.no_stack,
        }
    }

    pub fn hashed_encoder_config(&self) -> HashedEncoderConfig {
        HashedEncoderConfig {
            dim: self.encoder.dim,
            buckets: self.encoder.vocab_buckets,
            max_positions: self.encoder.max_positions,
        }
    }

    pub fn decoder_config(&self, labels: usize, entity_types: usize, relation_types: usize) -> DecoderConfig {
        DecoderConfig {
            dim: self.encoder.dim,
            labels,
            entity_types,
            relation_types,
            label_dim: self.decoder.label_dim,
            width_dim: self.decoder.width_dim,
            max_width: self.decoder.max_width,
            relation_threshold: self.decoder.relation_threshold,
            relation_loss_norm: self.decoder.relation_loss_norm,
            no_label_embedding: self.ablation.no_label_embedding,
        }
    }
}
