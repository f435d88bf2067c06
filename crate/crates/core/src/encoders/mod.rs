//! Frame-level acoustic model, the audio and text encoders, and the shared
//! embedding space they map into.

mod acoustic;
mod sequence;


use rand::Rng;
use serde::{Deserialize, Serialize};

pub use acoustic::{
    am_evaluate, am_forward, am_pretrain, AcousticModel, AmConfig, AmEpoch, AmReport, AmStreamer,
    AmTrainConfig,
};
pub use sequence::{Encoder, EncoderConfig};

use crate::error::{CladError, Result};

pub const MODEL_CONFIG_VERSION: u32 = 1;

/// Every shape hyper-parameter of the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub version: u32,
    pub am: AmConfig,
    pub audio: EncoderConfig,
    pub text: EncoderConfig,
    pub phoneme_embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            version: MODEL_CONFIG_VERSION,
            am: AmConfig::default(),
            audio: EncoderConfig::default(),
            text: EncoderConfig::default(),
            phoneme_embedding_dim: 16,
        }
    }
}

impl ModelConfig {
    /// Shapes close to the published system: five memory layers of 512/128,
    /// three 128-unit bidirectional layers with 64-unit projections and a
    /// 128-dimensional embedding.
    pub fn full_scale(feature_dim: usize, num_phonemes: usize) -> Self {
        let enc = EncoderConfig {
            layers: 3,
            hidden: 128,
            projection: 64,
            embedding_dim: 128,
        };
        ModelConfig {
            version: MODEL_CONFIG_VERSION,
            am: AmConfig {
                feature_dim,
                num_phonemes,
                layers: 5,
                hidden: 512,
                projection: 128,
                left_context: 10,
                right_context: 1,
            },
            audio: enc.clone(),
            text: enc,
            phoneme_embedding_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_CONFIG_VERSION {
            return Err(CladError::Version {
                found: self.version,
                expected: MODEL_CONFIG_VERSION,
            });
        }
        self.am.validate()?;
        self.audio.validate()?;
        self.text.validate()?;
        if self.audio.embedding_dim != self.text.embedding_dim {
            return Err(CladError::config(format!(
                "audio embedding dim {} differs from text embedding dim {}",
                self.audio.embedding_dim, self.text.embedding_dim
            )));
        }
        if self.phoneme_embedding_dim == 0 {
            return Err(CladError::config(
                "phoneme_embedding_dim must be at least 1",
            ));
        }
        Ok(())
    }
}

/// The full system: frozen-after-pretraining acoustic model plus the two
/// encoders trained contrastively.
#[derive(Clone, Debug)]
pub struct CladModel {
    pub config: ModelConfig,
    pub am: AcousticModel,
    pub audio: Encoder,
    pub text: Encoder,
}

impl CladModel {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let am = AcousticModel::new(&config.am, rng)?;
        let encoders = Self::new_encoders(config, rng)?;
        Ok(CladModel {
            config: config.clone(),
            am,
            audio: encoders.0,
            text: encoders.1,
        })
    }

    /// Fresh audio and text encoders for `config`.
    pub fn new_encoders<R: Rng + ?Sized>(
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<(Encoder, Encoder)> {
        config.validate()?;
        let audio = Encoder::audio(&config.audio, config.am.projection, rng)?;
        let text = Encoder::text(
            &config.text,
            config.am.num_phonemes,
            config.phoneme_embedding_dim,
            rng,
        )?;
        Ok((audio, text))
    }

    /// Combines an acoustic model with fresh encoders.
    pub fn with_acoustic_model<R: Rng + ?Sized>(
        config: &ModelConfig,
        am: AcousticModel,
        rng: &mut R,
    ) -> Result<Self> {
        if am.config != config.am {
            return Err(CladError::config(
                "acoustic model does not match the model config",
            ));
        }
        let (audio, text) = Self::new_encoders(config, rng)?;
        Ok(CladModel {
            config: config.clone(),
            am,
            audio,
            text,
        })
    }
}

/// Cosine similarity, clamped to `[-1, 1]` against rounding.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CladError::contract(format!(
            "cosine of vectors with {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(CladError::domain("cosine similarity of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
