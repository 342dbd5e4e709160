//! One JSON document configuring a whole run. Every field has a default and
//! unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{SynthConfig, MAX_SIDE_FRAMES};
use crate::error::{bail_config, Error, Result};
use crate::fusion::FusionConfig;
use crate::generation::GenConfig;
use crate::lora::LoraConfig;
use crate::model::ModelConfig;
use crate::text::DecoderConfig;
use crate::training::TrainConfig;
use crate::vision::EncoderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub records: usize,
    pub synth: SynthConfig,
    /// Frames kept per side when a record has more.
    pub max_side_frames: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            records: 64,
            synth: SynthConfig::default(),
            max_side_frames: MAX_SIDE_FRAMES,
        }
    }
}

/// Which records `generate` and `evaluate` cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    #[default]
    All,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: EvalSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub decoder: DecoderConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    /// The desk preset: short, fast-converging training on the synthetic
    /// corpus.
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            corpus: CorpusSection::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            decoder: DecoderConfig::default(),
            lora: LoraConfig::default(),
            train: desk_train(),
            gen: GenConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

fn overlay(base: &mut Value, user: Value) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn desk_train() -> TrainConfig {
    TrainConfig {
        steps: 2000,
        warmup_steps: 100,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

impl RunConfig {
    /// Parses a possibly partial document. Absent fields, at any depth,
    /// take their desk-preset values.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config(format!("config: {e}"));
        let user: Value = serde_json::from_str(text).map_err(bad)?;
        if !user.is_object() {
            bail_config!("config: expected a JSON object");
        }
        let mut merged = serde_json::to_value(Self::default()).expect("config serializes");
        overlay(&mut merged, user);
        serde_json::from_value(merged).map_err(bad)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
            lora: self.lora,
            max_side_frames: self.corpus.max_side_frames,
        }
    }

    /// Training settings with the run seed applied.
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.records == 0 {
            bail_config!("corpus.records must be at least 1");
        }
        if self.corpus.synth.resolution != self.encoder.resolution {
            bail_config!(
                "corpus.synth.resolution ({}) differs from encoder.resolution ({})",
                self.corpus.synth.resolution,
                self.encoder.resolution
            );
        }
        self.corpus.synth.validate()?;
        self.model().validate()?;
        self.training().validate()?;
        self.gen.validate()
    }
}
