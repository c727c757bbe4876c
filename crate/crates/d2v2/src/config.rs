//! Run configuration: one TOML file with strict unknown-key rejection.
//! Every command takes `--config`; the same schema covers all modalities
//! and loss variants, with per-modality defaults resolved at validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    read_image_file, read_pcm_dir, read_text_file, read_vocab, synthetic_images, synthetic_speech,
    Dataset, SyntheticImageSpec, SyntheticSpeechSpec, Tokenize,
};
use crate::decoder::DecoderConfig;
use crate::error::{D2v2Error, Result};
use crate::masking::{MaskConfig, MaskStrategy};
use crate::model::LossVariant;
use crate::network::{AlibiConfig, BackboneConfig, ConvLayerSpec, FeatureEncoderConfig, Modality};
use crate::teacher::TauSchedule;
use crate::trainer::TrainParams;

pub const OUT_ROOT_ENV: &str = "D2V2_OUT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub modality: Modality,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub masking: MaskingSection,
    pub decoder: DecoderSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default)]
    pub out: OutSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

fn default_precision() -> Precision {
    Precision::F64
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Distance-penalty attention; default on for speech, off otherwise.
    #[serde(default)]
    pub alibi: Option<bool>,
    #[serde(default = "default_true")]
    pub alibi_learned_scalars: bool,
    // image
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    // speech: [kernel, stride] pairs
    #[serde(default = "default_conv_layers")]
    pub conv_layers: Vec<[usize; 2]>,
    #[serde(default = "default_conv_dim")]
    pub conv_dim: usize,
    #[serde(default = "default_rel_kernel")]
    pub rel_kernel: usize,
    // text
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_ffn_mult() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_patch() -> usize {
    4
}
fn default_channels() -> usize {
    3
}
fn default_conv_layers() -> Vec<[usize; 2]> {
    vec![[10, 5], [4, 2], [4, 2]]
}
fn default_conv_dim() -> usize {
    64
}
fn default_rel_kernel() -> usize {
    9
}
fn default_max_len() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSection {
    #[serde(default = "default_strategy")]
    pub strategy: MaskStrategy,
    #[serde(default = "default_mask_ratio")]
    pub mask_ratio: f64,
    #[serde(default = "default_adjust")]
    pub adjust: f64,
    #[serde(default = "default_block")]
    pub block: usize,
    #[serde(default)]
    pub block_side: Option<usize>,
}

fn default_strategy() -> MaskStrategy {
    MaskStrategy::InverseBlock
}
fn default_mask_ratio() -> f64 {
    0.8
}
fn default_adjust() -> f64 {
    0.1
}
fn default_block() -> usize {
    3
}

impl Default for MaskingSection {
    fn default() -> Self {
        MaskingSection {
            strategy: default_strategy(),
            mask_ratio: default_mask_ratio(),
            adjust: default_adjust(),
            block: default_block(),
            block_side: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSection {
    pub layers: usize,
    pub kernel: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    pub width: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_groups() -> usize {
    16
}
fn default_noise_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    /// Blocks averaged into the target; default = ceil(depth / 2).
    #[serde(default)]
    pub k_top: Option<usize>,
    /// Layer-normalize the averaged target; default on for image/speech,
    /// off for text.
    #[serde(default)]
    pub target_layer_norm: Option<bool>,
    #[serde(default = "default_tau0")]
    pub tau0: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    #[serde(default = "default_tau_steps")]
    pub tau_steps: u64,
}

fn default_tau0() -> f64 {
    0.999
}
fn default_tau_end() -> f64 {
    0.9999
}
fn default_tau_steps() -> u64 {
    10_000
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            k_top: None,
            target_layer_norm: None,
            tau0: default_tau0(),
            tau_end: default_tau_end(),
            tau_steps: default_tau_steps(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub masks_per_sample: usize,
    #[serde(default = "default_loss")]
    pub loss: LossVariant,
    #[serde(default = "default_cls_weight")]
    pub cls_weight: f64,
    #[serde(default = "default_pixel_weight")]
    pub pixel_weight: f64,
    pub lr: f64,
    #[serde(default = "default_warmup_frac")]
    pub warmup_frac: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub total_updates: u64,
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub augment: bool,
}

fn default_loss() -> LossVariant {
    LossVariant::D2v2
}
fn default_cls_weight() -> f64 {
    0.01
}
fn default_pixel_weight() -> f64 {
    1.0
}
fn default_warmup_frac() -> f64 {
    0.05
}
fn default_weight_decay() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_clutter")]
    pub clutter: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Held-out tail used for eval loss and the probe test split.
    #[serde(default = "default_holdout")]
    pub holdout: usize,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_tokenize")]
    pub tokenize: Tokenize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    SyntheticImages,
    ImageFile,
    SyntheticSpeech,
    SpeechDir,
    TextFile,
}

fn default_n() -> usize {
    1024
}
fn default_size() -> usize {
    32
}
fn default_classes() -> usize {
    10
}
fn default_noise() -> f64 {
    10.0
}
fn default_clutter() -> usize {
    6
}
fn default_samples() -> usize {
    2048
}
fn default_holdout() -> usize {
    128
}
fn default_tokenize() -> Tokenize {
    Tokenize::Char
}
fn default_seq_len() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutSection {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub dump_masks: bool,
}

fn default_ckpt_every() -> u64 {
    1000
}

impl Default for OutSection {
    fn default() -> Self {
        OutSection { dir: None, checkpoint_every: default_ckpt_every(), dump_masks: false }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| D2v2Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| D2v2Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_str_validated(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| D2v2Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization (stored inside checkpoints).
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Field-level validation; returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        self.backbone_config().validate()?;
        self.decoder_config().validate()?;
        warnings.extend(self.mask_config().validate()?);
        self.tau_schedule().validate()?;
        let kind_modality = match self.data.kind {
            DataKind::SyntheticImages | DataKind::ImageFile => Modality::Image,
            DataKind::SyntheticSpeech | DataKind::SpeechDir => Modality::Speech,
            DataKind::TextFile => Modality::Text,
        };
        if kind_modality != self.modality {
            return Err(D2v2Error::config(format!(
                "data.kind {:?} does not match modality {:?}",
                self.data.kind, self.modality
            )));
        }
        if matches!(self.data.kind, DataKind::ImageFile | DataKind::SpeechDir | DataKind::TextFile)
            && self.data.path.is_none()
        {
            return Err(D2v2Error::config("file-based data.kind requires data.path"));
        }
        if matches!(self.data.kind, DataKind::TextFile) && self.data.vocab.is_none() {
            return Err(D2v2Error::config("text data requires data.vocab"));
        }
        if self.train.loss.uses_cls() && self.modality != Modality::Image {
            return Err(D2v2Error::config("the CLS loss is only defined for images"));
        }
        if self.train.loss.uses_pixels() && self.modality != Modality::Image {
            return Err(D2v2Error::config("pixel regression is only defined for images"));
        }
        if let Some(k) = self.teacher.k_top {
            if k == 0 || k > self.model.depth {
                return Err(D2v2Error::config(format!(
                    "teacher.k_top must be in 1..={}, got {k}",
                    self.model.depth
                )));
            }
        }
        if self.data.holdout >= self.data.n && matches!(self.data.kind, DataKind::SyntheticImages | DataKind::SyntheticSpeech) {
            return Err(D2v2Error::config("data.holdout must be smaller than data.n"));
        }
        self.train_params().validate()?;
        Ok(warnings)
    }

    pub fn alibi_enabled(&self) -> bool {
        self.model.alibi.unwrap_or(self.modality == Modality::Speech)
    }

    pub fn k_top(&self) -> usize {
        self.teacher.k_top.unwrap_or(self.model.depth.div_ceil(2))
    }

    pub fn target_layer_norm(&self) -> bool {
        self.teacher
            .target_layer_norm
            .unwrap_or(self.modality != Modality::Text)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            depth: self.model.depth,
            width: self.model.width,
            heads: self.model.heads,
            ffn_mult: self.model.ffn_mult,
            alibi: AlibiConfig {
                enabled: self.alibi_enabled(),
                learned_scalars: self.model.alibi_learned_scalars,
            },
        }
    }

    /// Needs the dataset for text vocabulary size.
    pub fn feature_encoder_config(&self, dataset: &Dataset) -> Result<FeatureEncoderConfig> {
        match self.modality {
            Modality::Image => Ok(FeatureEncoderConfig::Image {
                channels: self.model.channels,
                image_size: self.data.size,
                patch: self.model.patch,
                cls_token: self.train.loss.uses_cls(),
            }),
            Modality::Speech => Ok(FeatureEncoderConfig::Speech {
                conv_dim: self.model.conv_dim,
                layers: self
                    .model
                    .conv_layers
                    .iter()
                    .map(|&[kernel, stride]| ConvLayerSpec { kernel, stride })
                    .collect(),
                rel_kernel: self.model.rel_kernel,
            }),
            Modality::Text => {
                let vocab = match dataset {
                    Dataset::Text { vocab, .. } => *vocab,
                    _ => return Err(D2v2Error::config("text modality with non-text dataset")),
                };
                Ok(FeatureEncoderConfig::Text { vocab, max_len: self.model.max_len.max(self.data.seq_len) })
            }
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            layers: self.decoder.layers,
            kernel: self.decoder.kernel,
            groups: self.decoder.groups,
            width: self.decoder.width,
            noise_std: self.decoder.noise_std,
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            strategy: self.masking.strategy,
            mask_ratio: self.masking.mask_ratio,
            adjust: self.masking.adjust,
            block: self.masking.block,
            block_side: self.masking.block_side,
        }
    }

    pub fn tau_schedule(&self) -> TauSchedule {
        TauSchedule {
            tau0: self.teacher.tau0,
            tau_end: self.teacher.tau_end,
            tau_steps: self.teacher.tau_steps,
        }
    }

    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            masks_per_sample: self.train.masks_per_sample,
            mask: self.mask_config(),
            loss: self.train.loss,
            cls_weight: self.train.cls_weight,
            pixel_weight: self.train.pixel_weight,
            k_top: self.k_top(),
            target_layer_norm: self.target_layer_norm(),
            tau: self.tau_schedule(),
            lr: self.train.lr,
            warmup_frac: self.train.warmup_frac,
            weight_decay: self.train.weight_decay,
            total_updates: self.train.total_updates,
            batch_size: self.train.batch_size,
            seed: self.seed,
        }
    }

    /// Pixel head dimension for pixel-loss variants.
    pub fn pixel_dim(&self) -> Option<usize> {
        self.train
            .loss
            .uses_pixels()
            .then(|| self.model.channels * self.model.patch * self.model.patch)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.data.kind {
            DataKind::SyntheticImages => synthetic_images(&SyntheticImageSpec {
                n: self.data.n,
                size: self.data.size,
                classes: self.data.classes,
                noise: self.data.noise,
                clutter: self.data.clutter,
                seed: self.seed,
            }),
            DataKind::ImageFile => read_image_file(
                self.data.path.as_ref().expect("validated"),
                self.data.labels.as_deref(),
                self.data.classes,
            ),
            DataKind::SyntheticSpeech => synthetic_speech(&SyntheticSpeechSpec {
                n: self.data.n,
                samples: self.data.samples,
                classes: self.data.classes,
                seed: self.seed,
            }),
            DataKind::SpeechDir => read_pcm_dir(
                self.data.path.as_ref().expect("validated"),
                self.data.labels.as_deref(),
                self.data.classes,
            ),
            DataKind::TextFile => {
                let vocab = read_vocab(self.data.vocab.as_ref().expect("validated"))?;
                read_text_file(
                    self.data.path.as_ref().expect("validated"),
                    &vocab,
                    self.data.tokenize,
                    self.data.seq_len,
                    self.data.labels.as_deref(),
                    self.data.classes,
                )
            }
        }
    }

    /// Output directory: explicit `out.dir`, else `$D2V2_OUT/run`, else
    /// `./d2v2_out`.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(d) = &self.out.dir {
            return d.clone();
        }
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            return PathBuf::from(root).join("run");
        }
        PathBuf::from("d2v2_out")
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    pub(crate) const MINIMAL_IMAGE: &str = r#"
modality = "image"
[model]
depth = 2
width = 16
heads = 2
[decoder]
layers = 1
kernel = 3
groups = 4
width = 16
[train]
masks_per_sample = 2
lr = 1e-3
total_updates = 10
batch_size = 2
[data]
kind = "synthetic_images"
n = 8
holdout = 2
"#;
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_IMAGE: &str = r#"
modality = "image"
[model]
depth = 2
width = 16
heads = 2
[decoder]
layers = 1
kernel = 3
groups = 4
width = 16
[train]
masks_per_sample = 2
lr = 1e-3
total_updates = 10
batch_size = 2
[data]
kind = "synthetic_images"
n = 8
holdout = 2
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = RunConfig::from_str_validated(MINIMAL_IMAGE).unwrap();
        assert_eq!(cfg.precision, Precision::F64);
        assert_eq!(cfg.k_top(), 1);
        assert!(cfg.target_layer_norm());
        assert!(!cfg.alibi_enabled());
        assert_eq!(cfg.masking.mask_ratio, 0.8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = MINIMAL_IMAGE.replace("[data]", "unknown_key = 3\n[data]");
        let err = RunConfig::from_str_validated(&bad).unwrap_err();
        assert!(format!("{err}").contains("unknown_key"));
    }

    #[test]
    fn modality_data_kind_mismatch_rejected() {
        let bad = MINIMAL_IMAGE.replace("modality = \"image\"", "modality = \"speech\"");
        assert!(RunConfig::from_str_validated(&bad).is_err());
    }

    #[test]
    fn cls_loss_on_image_only() {
        let with_cls = MINIMAL_IMAGE.replace("masks_per_sample = 2", "masks_per_sample = 2\nloss = \"d2v2+cls\"");
        assert!(RunConfig::from_str_validated(&with_cls).is_ok());
    }

    #[test]
    fn roundtrip_through_toml_is_stable() {
        let cfg = RunConfig::from_str_validated(MINIMAL_IMAGE).unwrap();
        let s1 = cfg.to_toml();
        let cfg2 = RunConfig::from_str_validated(&s1).unwrap();
        assert_eq!(s1, cfg2.to_toml());
    }

    #[test]
    fn speech_defaults_enable_alibi() {
        let speech = r#"
modality = "speech"
[model]
depth = 2
width = 16
heads = 2
[decoder]
layers = 1
kernel = 3
groups = 4
width = 16
[train]
masks_per_sample = 2
lr = 1e-3
total_updates = 10
batch_size = 2
[data]
kind = "synthetic_speech"
n = 8
samples = 512
holdout = 2
"#;
        let cfg = RunConfig::from_str_validated(speech).unwrap();
        assert!(cfg.alibi_enabled());
        assert!(cfg.target_layer_norm());
    }
}
