//! Run configuration: a flat, typed TOML file with one section per
//! subsystem. Unknown keys are rejected; ranges are validated up front.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub tpm: TpmConfig,
    #[serde(default)]
    pub crm: CrmConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

fn default_precision() -> Precision {
    Precision::F32
}

/// Per-stream ViT-style encoder geometry. `M = (H/P) * (W/P)` patch tokens
/// plus one class token.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
    /// Encoder layer whose tokens feed the fusion/reconstruction modules.
    /// Defaults to the final layer.
    #[serde(default)]
    pub tpm_attach_layer: Option<usize>,
    #[serde(default)]
    pub dropout: f64,
}

fn default_ffn_ratio() -> usize {
    4
}

impl EncoderConfig {
    /// Desk-scale default geometry.
    pub fn desk_scale() -> Self {
        EncoderConfig {
            height: 64,
            width: 32,
            patch: 16,
            dim: 64,
            depth: 4,
            heads: 4,
            ffn_ratio: 4,
            tpm_attach_layer: None,
            dropout: 0.0,
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn attach_layer(&self) -> usize {
        self.tpm_attach_layer.unwrap_or(self.depth)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = |m: String| Err(ConfigError::Invalid(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return e(format!(
                "image {}x{} not divisible by patch {}",
                self.height, self.width, self.patch
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return e(format!(
                "embed dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.ffn_ratio == 0 {
            return e("ffn_ratio must be positive".into());
        }
        if let Some(k) = self.tpm_attach_layer {
            if k == 0 || k > self.depth {
                return e(format!(
                    "tpm_attach_layer {k} out of range 1..={}",
                    self.depth
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return e(format!("dropout {} out of [0,1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TpmConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Number of consecutive permutation stages, 1..=3.
    #[serde(default = "default_stages")]
    pub num_stages: usize,
    /// Share each stage's unit parameters across the three streams.
    #[serde(default)]
    pub share_streams: bool,
}

fn default_true() -> bool {
    true
}

fn default_stages() -> usize {
    3
}

impl Default for TpmConfig {
    fn default() -> Self {
        TpmConfig {
            enabled: true,
            num_stages: 3,
            share_streams: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    Mse,
    Mae,
    Rmse,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CrmConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// TransRe blocks per ordered spectrum pair.
    #[serde(default = "default_crm_depth")]
    pub depth: usize,
    #[serde(default = "default_recon_loss")]
    pub loss: ReconLoss,
    /// Stop gradients into the target stream's tokens.
    #[serde(default)]
    pub detach_targets: bool,
}

fn default_crm_depth() -> usize {
    1
}

fn default_recon_loss() -> ReconLoss {
    ReconLoss::Mse
}

impl Default for CrmConfig {
    fn default() -> Self {
        CrmConfig {
            enabled: true,
            depth: 1,
            loss: ReconLoss::Mse,
            detach_targets: false,
        }
    }
}

/// BL = supervision on each stream's class token before concatenation;
/// AL = one head on the concatenated feature.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Bl,
    Al,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "default_loss_mode")]
    pub mode: LossMode,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_smoothing")]
    pub smoothing: f64,
    #[serde(default)]
    pub head_bias: bool,
    /// Multiplier applied to the reconstruction term before it enters the
    /// total. The published recipe uses 1.0 on pretrained backbones; training
    /// from random weights needs a smaller value or the reconstruction
    /// gradient collapses the streams before the identity losses bite.
    #[serde(default = "default_crm_loss_weight")]
    pub crm_loss_weight: f64,
}

fn default_crm_loss_weight() -> f64 {
    1.0
}

fn default_loss_mode() -> LossMode {
    LossMode::Al
}

fn default_margin() -> f64 {
    0.3
}

fn default_smoothing() -> f64 {
    0.1
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Al,
            margin: 0.3,
            smoothing: 0.1,
            head_bias: false,
            crm_loss_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_total_steps")]
    pub total_steps: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default)]
    pub clip_grad_norm: Option<f64>,
}

fn default_lr() -> f64 {
    0.009
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-4
}

fn default_warmup() -> usize {
    100
}

fn default_total_steps() -> usize {
    2000
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.009,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 100,
            total_steps: 2000,
            clip_grad_norm: None,
        }
    }
}

/// P x K identity-balanced batching.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_ids_per_batch")]
    pub ids_per_batch: usize,
    #[serde(default = "default_samples_per_id")]
    pub samples_per_id: usize,
}

fn default_ids_per_batch() -> usize {
    4
}

fn default_samples_per_id() -> usize {
    4
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            ids_per_batch: 4,
            samples_per_id: 4,
        }
    }
}

impl SamplerConfig {
    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.samples_per_id
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    /// Deterministic generated multi-spectral set.
    Synthetic {
        num_ids: usize,
        cameras: usize,
        samples_per_id_cam: usize,
    },
    /// RGB/ NIR/ TIR/ directories of `<identity>_<camera>_<index>.<ext>`.
    Disk { root: String },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default = "default_crop_pad")]
    pub crop_pad: usize,
    #[serde(default = "default_erase_prob")]
    pub erase_prob: f64,
}

fn default_flip_prob() -> f64 {
    0.5
}

fn default_crop_pad() -> usize {
    4
}

fn default_erase_prob() -> f64 {
    0.5
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            crop_pad: 4,
            erase_prob: 0.5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.encoder.validate()?;
        let e = |m: String| Err(ConfigError::Invalid(m));
        if !(1..=3).contains(&self.tpm.num_stages) {
            return e(format!("tpm.num_stages {} out of 1..=3", self.tpm.num_stages));
        }
        if self.crm.depth == 0 || self.crm.depth > 4 {
            return e(format!("crm.depth {} out of 1..=4", self.crm.depth));
        }
        if !(0.0..1.0).contains(&self.loss.smoothing) {
            return e(format!("loss.smoothing {} out of [0,1)", self.loss.smoothing));
        }
        if self.loss.margin < 0.0 {
            return e("loss.margin must be nonnegative".into());
        }
        if self.optimizer.lr <= 0.0 || self.optimizer.total_steps == 0 {
            return e("optimizer.lr must be positive and total_steps nonzero".into());
        }
        if self.optimizer.warmup_steps > self.optimizer.total_steps {
            return e("optimizer.warmup_steps exceeds total_steps".into());
        }
        if self.sampler.ids_per_batch < 2 || self.sampler.samples_per_id < 2 {
            return e("sampler needs at least 2 ids per batch and 2 samples per id".into());
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                num_ids,
                cameras,
                samples_per_id_cam,
            } => {
                if *num_ids == 0 || *cameras == 0 || *samples_per_id_cam == 0 {
                    return e("synthetic dataset counts must be positive".into());
                }
            }
            DatasetConfig::Disk { root } => {
                if root.is_empty() {
                    return e("dataset.root must be nonempty".into());
                }
            }
        }
        Ok(())
    }

    /// Desk-scale defaults: synthetic data, full model, AL placement.
    pub fn desk_scale() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            encoder: EncoderConfig::desk_scale(),
            tpm: TpmConfig::default(),
            crm: CrmConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            sampler: SamplerConfig::default(),
            dataset: DatasetConfig::Synthetic {
                num_ids: 16,
                cameras: 4,
                samples_per_id_cam: 4,
            },
            augment: AugmentConfig::default(),
        }
    }
}
