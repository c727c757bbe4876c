//! The assembled student model (feature encoder + backbone + decoder) and
//! its per-mask forward pass.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::rc::Rc;

use crate::decoder::{build_decoder, conv_decode, merge_mask_tokens, DecoderConfig, DecoderModel};
use crate::error::{D2v2Error, Result};
use crate::graph::{Graph, RowIndex, Var};
use crate::masking::MaskPlan;
use crate::network::{
    build_encoder, encode, masked_relative_conv, prepend_cls, select_unmasked, BackboneConfig,
    BoundParams, EncoderModel, FeatPids, FeatureEncoderConfig, ParamBank, TokenBatch,
};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "d2v2")]
    D2v2,
    #[serde(rename = "d2v2+cls")]
    D2v2Cls,
    #[serde(rename = "d2v2+pixel")]
    D2v2Pixel,
    #[serde(rename = "pixel_only")]
    PixelOnly,
}

impl LossVariant {
    pub fn uses_targets(self) -> bool {
        !matches!(self, LossVariant::PixelOnly)
    }

    pub fn uses_cls(self) -> bool {
        matches!(self, LossVariant::D2v2Cls)
    }

    pub fn uses_pixels(self) -> bool {
        matches!(self, LossVariant::D2v2Pixel | LossVariant::PixelOnly)
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            LossVariant::D2v2 => "d2v2",
            LossVariant::D2v2Cls => "d2v2+cls",
            LossVariant::D2v2Pixel => "d2v2+pixel",
            LossVariant::PixelOnly => "pixel_only",
        };
        write!(f, "{s}")
    }
}

pub struct Model {
    pub encoder: EncoderModel,
    pub decoder: DecoderModel,
    pub loss: LossVariant,
}

impl Model {
    pub fn cls_enabled(&self) -> bool {
        matches!(self.encoder.feat, FeatPids::Image { cls: Some(_), .. })
    }
}

/// Create all parameters: encoder first (so the teacher's filtered bank
/// shares pid layout), then the decoder.
pub fn build_model<E: Scalar>(
    feat_cfg: FeatureEncoderConfig,
    backbone: BackboneConfig,
    decoder_cfg: DecoderConfig,
    loss: LossVariant,
    pixel_dim: Option<usize>,
    bank: &mut ParamBank<E>,
    rng: &mut ChaCha8Rng,
) -> Result<Model> {
    if loss.uses_cls() && !matches!(feat_cfg, FeatureEncoderConfig::Image { .. }) {
        return Err(D2v2Error::config("the CLS loss is only defined for images"));
    }
    if loss.uses_pixels() && !matches!(feat_cfg, FeatureEncoderConfig::Image { .. }) {
        return Err(D2v2Error::config("pixel regression is only defined for images"));
    }
    if loss.uses_pixels() && pixel_dim.is_none() {
        return Err(D2v2Error::config("pixel loss requires the pixel head dimension"));
    }
    let two_d = matches!(feat_cfg, FeatureEncoderConfig::Image { .. });
    let encoder = build_encoder(feat_cfg, backbone.clone(), bank, rng)?;
    let decoder = build_decoder(
        decoder_cfg,
        backbone.width,
        backbone.width,
        if loss.uses_pixels() { pixel_dim } else { None },
        two_d,
        bank,
        rng,
    )?;
    Ok(Model { encoder, decoder, loss })
}

/// Outputs of one masked student pass.
pub struct StudentOut {
    /// Target-space predictions over the full layout, `[B, L, width]`.
    pub pred: Var,
    pub pixel_pred: Option<Var>,
    /// CLS output `[B, width]` (images with the CLS loss; bypasses the
    /// decoder).
    pub cls_out: Option<Var>,
    /// Forward FLOPs of the backbone portion of this pass.
    pub backbone_flops: u64,
    /// Attention-score share of `backbone_flops`.
    pub score_flops: u64,
    /// Forward FLOPs of the decoder portion.
    pub decoder_flops: u64,
}

/// One masked version: select unmasked tokens from the shared feature
/// encoder output, run the sparse backbone, merge Gaussian mask tokens,
/// decode. The CLS token, when present, is prepended to the student input
/// and skips the decoder.
pub fn student_forward<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    model: &Model,
    features: &TokenBatch,
    plans: &[MaskPlan],
    noise_rng: &mut ChaCha8Rng,
) -> Result<StudentOut> {
    let mut sel = select_unmasked(g, features, plans)?;
    if matches!(model.encoder.feat_cfg, FeatureEncoderConfig::Speech { .. }) {
        sel = masked_relative_conv(g, bound, &model.encoder, &sel, plans)?;
    }
    let cls_pid = match (&model.encoder.feat, model.loss.uses_cls()) {
        (FeatPids::Image { cls: Some(c), .. }, true) => Some(*c),
        _ => None,
    };
    let enc_in = match cls_pid {
        Some(c) => prepend_cls(g, &sel, bound.var(c)),
        None => sel,
    };

    let flops_before = g.flops();
    let trace = encode(g, bound, &model.encoder, &enc_in, false)?;
    let backbone_flops = g.flops() - flops_before;

    // split the CLS row back off before merging
    let (tokens, cls_out) = if enc_in.has_cls {
        let s = g.shape(trace.output).to_vec();
        let (b, t, w) = (s[0], s[1], s[2]);
        let body_idx: RowIndex = Rc::new(vec![(1..t).collect::<Vec<_>>(); b]);
        let body = g.gather_rows(trace.output, body_idx);
        let cls_idx: RowIndex = Rc::new(vec![vec![0]; b]);
        let cls = g.gather_rows(trace.output, cls_idx);
        let cls = g.reshape(cls, vec![b, w]);
        (
            TokenBatch::new(g, body, enc_in.position_ids.clone(), enc_in.layout, false),
            Some(cls),
        )
    } else {
        (
            TokenBatch::new(g, trace.output, enc_in.position_ids.clone(), enc_in.layout, false),
            None,
        )
    };

    let flops_before_dec = g.flops();
    let merged = merge_mask_tokens(g, &tokens, plans, model.decoder.cfg.noise_std, noise_rng)?;
    let out = conv_decode(g, bound, &model.decoder, &merged)?;
    let decoder_flops = g.flops() - flops_before_dec;

    Ok(StudentOut {
        pred: out.pred,
        pixel_pred: out.pixel_pred,
        cls_out,
        backbone_flops,
        score_flops: trace.score_flops,
        decoder_flops,
    })
}
