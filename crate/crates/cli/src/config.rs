use std::fs;
use std::path::Path;

use clad_core::corpus::CorpusConfig;
use clad_core::encoders::{AmTrainConfig, EncoderConfig, ModelConfig, MODEL_CONFIG_VERSION};
use clad_core::eval::{BenchConfig, EvalConfig};
use clad_core::loss::LossConfig;
use clad_core::trainer::TrainConfig;
use clad_core::windowing::{BatchConfig, SamplingConfig, SegmentLabelConfig, WindowConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

/// Network shapes that do not depend on the corpus. Input dimension and
/// phoneme count come from the synthesized inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub am_layers: usize,
    pub am_hidden: usize,
    pub am_projection: usize,
    pub am_left_context: usize,
    pub am_right_context: usize,
    pub audio: EncoderConfig,
    pub text: EncoderConfig,
    pub phoneme_embedding_dim: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        ShapeConfig {
            am_layers: m.am.layers,
            am_hidden: m.am.hidden,
            am_projection: m.am.projection,
            am_left_context: m.am.left_context,
            am_right_context: m.am.right_context,
            audio: m.audio,
            text: m.text,
            phoneme_embedding_dim: m.phoneme_embedding_dim,
        }
    }
}

impl ShapeConfig {
    pub fn model(&self, feature_dim: usize, num_phonemes: usize) -> ModelConfig {
        let mut m = ModelConfig::default();
        m.version = MODEL_CONFIG_VERSION;
        m.am.feature_dim = feature_dim;
        m.am.num_phonemes = num_phonemes;
        m.am.layers = self.am_layers;
        m.am.hidden = self.am_hidden;
        m.am.projection = self.am_projection;
        m.am.left_context = self.am_left_context;
        m.am.right_context = self.am_right_context;
        m.audio = self.audio.clone();
        m.text = self.text.clone();
        m.phoneme_embedding_dim = self.phoneme_embedding_dim;
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub alpha: f64,
    /// Caps each arm's epochs; `None` uses `train.max_epochs`.
    #[serde(default)]
    pub max_epochs: Option<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![1, 2, 3, 4, 5],
            alpha: 0.15,
            max_epochs: None,
        }
    }
}

/// Everything a run needs. `seed` drives corpus synthesis, initialisation
/// and batch sampling; `train.seed` is overwritten with it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub shapes: ShapeConfig,
    pub am_train: AmTrainConfig,
    pub window: WindowConfig,
    pub labels: SegmentLabelConfig,
    pub sampling: SamplingConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            corpus: CorpusConfig::default(),
            shapes: ShapeConfig::default(),
            am_train: AmTrainConfig::default(),
            window: WindowConfig::default(),
            labels: SegmentLabelConfig::default(),
            sampling: SamplingConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::usage(
                format!("cannot read config {}: {e}", path.display()),
                "pass an existing JSON file to --config, e.g. crates/cli/configs/small.json",
            )
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CliError::schema(format!("config is not valid JSON: {e}")))?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_VERSION as u64 => {}
            Some(v) => {
                return Err(CliError::schema(format!(
                    "config version {v} is not supported (expected {CONFIG_VERSION})"
                )))
            }
            None => {
                return Err(CliError::schema(
                    "config is missing the integer field \"version\"",
                ))
            }
        }
        let cfg: RunConfig = serde_json::from_value(raw)
            .map_err(|e| CliError::schema(format!("config does not match the schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |r: clad_core::Result<()>| r.map_err(|e| CliError::schema(e.to_string()));
        self.corpus
            .validate()
            .map_err(|e| CliError::schema(e.to_string()))?;
        check(
            self.model(
                self.corpus.inventory.feature_dim,
                self.corpus.inventory.num_phonemes,
            )
            .validate(),
        )?;
        check(self.window.validate())?;
        if self.window.frame_rate_hz != self.corpus.frame_rate_hz {
            return Err(CliError::schema(
                "window.frame_rate_hz must equal corpus.frame_rate_hz",
            ));
        }
        check(self.labels.validate())?;
        check(self.train.validate())?;
        check(self.loss.validate())?;
        if self
            .eval
            .buckets
            .iter()
            .any(|&b| b == 0 || b > self.eval.data.num_keywords)
        {
            return Err(CliError::schema(
                "eval.buckets entries must lie in 1..=eval.data.num_keywords",
            ));
        }
        if self.ablation.max_epochs == Some(0) {
            return Err(CliError::schema("ablation.max_epochs must be at least 1"));
        }
        Ok(())
    }

    pub fn model(&self, feature_dim: usize, num_phonemes: usize) -> ModelConfig {
        self.shapes.model(feature_dim, num_phonemes)
    }

    pub fn batching(&self) -> BatchConfig {
        BatchConfig {
            frame_budget: self.train.batch_frame_budget,
            window: self.window.clone(),
            labels: self.labels.clone(),
            sampling: self.sampling.clone(),
        }
    }

    /// Applies `--seed`, keeping every seeded component in step.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self
    }
}
