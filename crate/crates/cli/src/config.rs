//! Pipeline configuration: one TOML file drives every command.
//!
//! All tables are optional and default to desk-scale settings, so a config
//! only needs the keys it wants to change. Training tables live under
//! `[train.mrc]`, `[train.reflection]` and `[train.fnn]`; each merges over
//! its own phase preset, and a non-positive `clip_norm` disables clipping.

use deskqa_core::corpus::{CorpusSpec, WindowConfig};
use deskqa_core::encoder::EncoderConfig;
use deskqa_core::error::{Error, Result};
use deskqa_core::train::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub mrc_checkpoint: PathBuf,
    pub mrc_metrics: PathBuf,
    pub reflection_data_dir: PathBuf,
    pub reflection_long_checkpoint: PathBuf,
    pub reflection_short_checkpoint: PathBuf,
    pub reflection_long_metrics: PathBuf,
    pub reflection_short_metrics: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let out = PathBuf::from("out");
        Paths {
            corpus_dir: out.join("corpus"),
            mrc_checkpoint: out.join("mrc.ckpt.json"),
            mrc_metrics: out.join("mrc_metrics.csv"),
            reflection_data_dir: out.join("reflection_data"),
            reflection_long_checkpoint: out.join("reflection_long.ckpt.json"),
            reflection_short_checkpoint: out.join("reflection_short.ckpt.json"),
            reflection_long_metrics: out.join("reflection_long_metrics.csv"),
            reflection_short_metrics: out.join("reflection_short_metrics.csv"),
            predictions: out.join("predictions.jsonl"),
            report: out.join("report.json"),
        }
    }
}

/// Overrides for one training table; unset keys keep the phase preset.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainOverrides {
    lr: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    weight_decay: Option<f64>,
    warmup_ratio: Option<f64>,
    clip_norm: Option<f64>,
    adam_eps: Option<f64>,
    adam_beta1: Option<f64>,
    adam_beta2: Option<f64>,
    seed: Option<u64>,
    phase: Option<Phase>,
}

impl TrainOverrides {
    fn apply(&self, mut base: TrainConfig) -> TrainConfig {
        if let Some(v) = self.lr {
            base.lr = v;
        }
        if let Some(v) = self.batch_size {
            base.batch_size = v;
        }
        if let Some(v) = self.epochs {
            base.epochs = v;
        }
        if let Some(v) = self.weight_decay {
            base.weight_decay = v;
        }
        if let Some(v) = self.warmup_ratio {
            base.warmup_ratio = v;
        }
        if let Some(v) = self.clip_norm {
            base.clip_norm = if v > 0.0 { Some(v) } else { None };
        }
        if let Some(v) = self.adam_eps {
            base.adam_eps = v;
        }
        if let Some(v) = self.adam_beta1 {
            base.adam_beta1 = v;
        }
        if let Some(v) = self.adam_beta2 {
            base.adam_beta2 = v;
        }
        if let Some(v) = self.seed {
            base.seed = v;
        }
        if let Some(v) = self.phase {
            base.phase = v;
        }
        base
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainTables {
    pub mrc: TrainConfig,
    pub reflection: TrainConfig,
    pub fnn: TrainConfig,
}

impl Default for TrainTables {
    fn default() -> Self {
        TrainTables {
            mrc: TrainConfig::desk_mrc(),
            reflection: TrainConfig::desk_reflection(),
            fnn: TrainConfig::desk_fnn(),
        }
    }
}

impl<'de> Deserialize<'de> for TrainTables {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Default, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        struct Tables {
            mrc: TrainOverrides,
            reflection: TrainOverrides,
            fnn: TrainOverrides,
        }
        let t = Tables::deserialize(d)?;
        Ok(TrainTables {
            mrc: t.mrc.apply(TrainConfig::desk_mrc()),
            reflection: t.reflection.apply(TrainConfig::desk_reflection()),
            fnn: t.fnn.apply(TrainConfig::desk_fnn()),
        })
    }
}

/// Ablation switches for the confidence model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReflectionOptions {
    /// Feed the 42 head features into the aggregation layer.
    pub use_head_features: bool,
    /// Initialize the confidence encoder from the first-phase checkpoint.
    pub init_from_mrc: bool,
}

impl Default for ReflectionOptions {
    fn default() -> Self {
        ReflectionOptions {
            use_head_features: true,
            init_from_mrc: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub r_at_p: Vec<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            r_at_p: vec![0.90, 0.75, 0.50],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub window: WindowConfig,
    pub train: TrainTables,
    pub reflection_options: ReflectionOptions,
    pub eval: EvalOptions,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.train.mrc.phase = Phase::Mrc;
        if cfg.train.reflection.phase != Phase::Fnn {
            cfg.train.reflection.phase = Phase::Reflection;
        }
        cfg.train.fnn.phase = Phase::Fnn;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.encoder.validate()?;
        self.window.validate()?;
        self.train.mrc.validate()?;
        self.train.reflection.validate()?;
        self.train.fnn.validate()?;
        if self.encoder.vocab_size < self.corpus.vocab_size {
            return Err(Error::Config(format!(
                "encoder vocab_size {} smaller than corpus vocab_size {}",
                self.encoder.vocab_size, self.corpus.vocab_size
            )));
        }
        if self.window.max_len > self.encoder.max_seq {
            return Err(Error::Config(format!(
                "window max_len {} exceeds encoder max_seq {}",
                self.window.max_len, self.encoder.max_seq
            )));
        }
        for &t in &self.eval.r_at_p {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(format!(
                    "recall-at-precision target {t} must be in (0,1]"
                )));
            }
        }
        Ok(())
    }
}
