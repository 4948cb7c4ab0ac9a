//! Run configuration: model dimensions, stream rates, and training
//! hyperparameters, with the toy and full profiles. The whole config is
//! serialized verbatim into every checkpoint and metrics log; unknown keys
//! are rejected on load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of each modality block; the model stream is d_x = 3 * d_b.
    pub d_b: usize,
    pub n_layers: usize,
    /// FMS units per transformer layer.
    pub p_units: usize,
    pub d_ff: usize,
    /// GRU hidden width (equals d_b when embeddings are tied).
    pub d_y: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Raw input widths per modality; d_textual is the fusion width.
    pub d_visual: usize,
    pub d_acoustic: usize,
    pub d_textual: usize,
    /// Source timesteps per sample on the reference clock.
    pub l_max: usize,
    /// Maximum summary length in tokens.
    pub m_max: usize,
    pub tie_embeddings: bool,
    pub ocr_cap: usize,
    pub gated_fusion: bool,
    /// Constant multiplier applied to raw float streams at preparation
    /// time, bringing feature magnitudes to the scale of the learned
    /// embeddings so early attention stays unsaturated.
    pub input_scale: f64,
}

impl ModelConfig {
    pub fn d_x(&self) -> usize {
        3 * self.d_b
    }

    /// Positional table length: source, delimiter, m_max target tokens, and
    /// the trailing stop position of a teacher-forced sequence.
    pub fn pos_len(&self) -> usize {
        self.l_max + self.m_max + 2
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.d_b == 0 || self.l_max == 0 || self.m_max == 0 || self.n_layers == 0 {
            return err("d_b, l_max, m_max and n_layers must be positive".into());
        }
        if self.p_units == 0 || self.d_ff == 0 || self.d_y == 0 {
            return err("p_units, d_ff and d_y must be positive".into());
        }
        if self.heads == 0 || self.d_b % self.heads != 0 {
            return err(format!(
                "heads {} must divide block width {}",
                self.heads, self.d_b
            ));
        }
        if self.vocab_size <= crate::io::vocab::RESERVED.len() {
            return err(format!("vocab_size {} leaves no real tokens", self.vocab_size));
        }
        if self.tie_embeddings && self.d_y != self.d_b {
            return err(format!(
                "tied embeddings need d_y == d_b, got {} and {}",
                self.d_y, self.d_b
            ));
        }
        if self.d_visual == 0 || self.d_acoustic == 0 || self.d_textual == 0 {
            return err("modality input widths must be positive".into());
        }
        if !(self.input_scale > 0.0) {
            return err(format!("input_scale {} must be positive", self.input_scale));
        }
        Ok(())
    }
}

/// Modality stream rates. `None` fits the stream to the clock: the stream's
/// own length is treated as its rate, stretching it to exactly l_max rows.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub reference: f64,
    pub visual: Option<f64>,
    pub acoustic: Option<f64>,
    pub textual: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub peak_lr: f64,
    /// Linear warmup to peak_lr over this many steps, then linear decay.
    pub warmup_steps: u64,
    pub dropout: f64,
    pub clip_norm: f64,
    pub eval_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            total_steps: 500_000,
            peak_lr: 0.01,
            warmup_steps: 2_000,
            dropout: 0.1,
            clip_norm: 1.0,
            eval_interval: 1_000,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::Config("batch_size and total_steps must be positive".into()));
        }
        if self.peak_lr <= 0.0 || self.clip_norm <= 0.0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "peak_lr, clip_norm and eval_interval must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub profile: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub rates: RateConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Desk-scale profile: every acceptance experiment runs under this.
    pub fn toy() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            profile: "toy".into(),
            seed: 1234,
            model: ModelConfig {
                d_b: 16,
                n_layers: 2,
                p_units: 1,
                d_ff: 128,
                d_y: 16,
                heads: 1,
                vocab_size: 32,
                d_visual: 20,
                d_acoustic: 12,
                d_textual: 16,
                l_max: 16,
                m_max: 4,
                tie_embeddings: false,
                ocr_cap: 500,
                gated_fusion: true,
                input_scale: 1.0,
            },
            rates: RateConfig {
                reference: 1.0,
                visual: None,
                acoustic: None,
                textual: None,
            },
            train: TrainConfig {
                batch_size: 16,
                total_steps: 1_200,
                peak_lr: 0.003,
                warmup_steps: 100,
                dropout: 0.1,
                clip_norm: 1.0,
                eval_interval: 100,
                seed: 1234,
            },
        }
    }

    /// Production-scale dimensions; not runnable on a desktop, provided for
    /// completeness of the configuration surface.
    pub fn full() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            profile: "full".into(),
            seed: 1,
            model: ModelConfig {
                d_b: 256,
                n_layers: 4,
                p_units: 2,
                d_ff: 3_072,
                d_y: 256,
                heads: 4,
                vocab_size: 32_000,
                d_visual: 2_048,
                d_acoustic: 512,
                d_textual: 768,
                l_max: 512,
                m_max: 300,
                tie_embeddings: false,
                ocr_cap: 500,
                gated_fusion: true,
                input_scale: 1.0,
            },
            rates: RateConfig {
                reference: 1.0,
                visual: None,
                acoustic: None,
                textual: None,
            },
            train: TrainConfig::default(),
        }
    }

    pub fn for_profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown profile {other}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} unsupported, expected {CONFIG_VERSION}",
                self.config_version
            )));
        }
        if self.rates.reference <= 0.0 {
            return Err(Error::Config("reference rate must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(path, e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
