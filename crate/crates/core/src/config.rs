//! Run configuration: one flat record covering model size, diffusion
//! settings, optimization and inference knobs. Loadable from a TOML file;
//! every report embeds its SHA-256 hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::corpus::ExpansionStrategy;
use crate::error::{Error, Result};
use crate::schedule::ScheduleKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Warmup fraction of total optimizer steps.
    pub lr_warmup: f64,
    pub batch_size: usize,
    pub epoch: usize,
    /// Hidden size h.
    pub hidden_size: usize,
    /// Filtering threshold phi.
    pub threshold: f64,
    /// Scale factor lambda.
    pub scale_factor: f64,
    /// Noisy spans during training.
    pub k: usize,
    /// Noisy spans during evaluation (decoupled from training).
    pub k_eval: usize,
    /// Total diffusion timesteps T.
    pub timesteps: usize,
    /// Reverse-process iterations.
    pub gamma: usize,
    pub scheduler: ScheduleKind,
    pub expansion: ExpansionStrategy,
    /// Epochs with the sentence encoder frozen at the start of training.
    pub encoder_freeze_epochs: usize,
    pub encoder_blocks: usize,
    pub ff_mult: usize,
    pub pointer_hidden: usize,
    /// Loss weight on the no-entity class for unmatched spans.
    pub null_class_weight: f64,
    /// Weight of the boundary background term (suppression of non-target
    /// words on matched rows); 0 restores the bare likelihood loss.
    pub boundary_negative_weight: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip_norm: f64,
    /// Concatenate train and dev for training.
    pub merge_train_dev: bool,
    /// Skip (with a warning) sentences whose entity count exceeds K instead
    /// of failing.
    pub skip_oversized: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.1,
            lr_warmup: 0.1,
            batch_size: 8,
            epoch: 8,
            hidden_size: 64,
            threshold: 2.5,
            scale_factor: 1.0,
            k: 60,
            k_eval: 60,
            timesteps: 1000,
            gamma: 5,
            scheduler: ScheduleKind::Cosine,
            expansion: ExpansionStrategy::Random,
            encoder_freeze_epochs: 0,
            encoder_blocks: 2,
            ff_mult: 2,
            pointer_hidden: 64,
            null_class_weight: 1.0,
            boundary_negative_weight: 1.0,
            grad_clip_norm: 1.0,
            merge_train_dev: false,
            skip_oversized: false,
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string_pretty(self).map_err(|e| Error::Runtime(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning rate must be > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Validation("weight decay must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.lr_warmup) {
            return Err(Error::Validation(format!(
                "lr warmup fraction {} must lie in [0, 1)",
                self.lr_warmup
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        if self.hidden_size < 2 || self.hidden_size % 2 != 0 {
            return Err(Error::Validation(format!(
                "hidden size {} must be an even number >= 2",
                self.hidden_size
            )));
        }
        if !(0.0..=3.0).contains(&self.threshold) {
            return Err(Error::Validation(format!(
                "threshold {} must lie in [0, 3]",
                self.threshold
            )));
        }
        if !(self.scale_factor > 0.0) {
            return Err(Error::Validation("scale factor must be > 0".into()));
        }
        if self.k == 0 || self.k_eval == 0 {
            return Err(Error::Validation("k and k_eval must be >= 1".into()));
        }
        if self.timesteps == 0 {
            return Err(Error::Validation("timesteps must be >= 1".into()));
        }
        if self.gamma == 0 || self.gamma > self.timesteps {
            return Err(Error::Validation(format!(
                "gamma = {} must lie in [1, T = {}]",
                self.gamma, self.timesteps
            )));
        }
        if self.ff_mult == 0 || self.pointer_hidden == 0 || self.encoder_blocks == 0 {
            return Err(Error::Validation(
                "encoder_blocks, ff_mult and pointer_hidden must be >= 1".into(),
            ));
        }
        if self.null_class_weight < 0.0
            || self.grad_clip_norm < 0.0
            || self.boundary_negative_weight < 0.0
        {
            return Err(Error::Validation(
                "null_class_weight, boundary_negative_weight and grad_clip_norm must be >= 0"
                    .into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, embedded in every report.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        hex_string(&digest)
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
