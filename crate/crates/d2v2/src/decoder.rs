//! Lightweight convolutional decoder: merges encoded unmasked tokens with
//! Gaussian-noise mask tokens, runs D grouped-convolution blocks (conv,
//! layer norm, GELU, residual), and projects per position to the target
//! width. 1-D convolutions for sequences, 2-D over the patch grid for
//! images.


use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{D2v2Error, Result};
use crate::graph::{Graph, RowIndex, Var};
use crate::masking::{Layout, MaskPlan};
use crate::network::{init_normal, BoundParams, ParamBank, Pid, TokenBatch, LN_EPS};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Number of conv blocks (D).
    pub layers: usize,
    /// Kernel extent per conv (odd; used for both dims in 2-D).
    pub kernel: usize,
    pub groups: usize,
    pub width: usize,
    /// Std of the Gaussian mask tokens.
    pub noise_std: f64,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(D2v2Error::config("decoder needs at least one conv layer"));
        }
        if self.kernel % 2 == 0 {
            return Err(D2v2Error::config("decoder kernel must be odd for same padding"));
        }
        if self.groups == 0 || self.width % self.groups != 0 {
            return Err(D2v2Error::config(format!(
                "decoder width {} not divisible by groups {}",
                self.width, self.groups
            )));
        }
        if self.noise_std < 0.0 {
            return Err(D2v2Error::config("noise_std must be >= 0"));
        }
        Ok(())
    }

    /// Preset tuned at desk scale for 2-D patch grids.
    pub fn image_default(width: usize) -> Self {
        DecoderConfig { layers: 6, kernel: 3, groups: 16, width, noise_std: 0.02 }
    }

    /// Preset tuned at desk scale for 1-D sequences.
    pub fn sequence_default(width: usize) -> Self {
        DecoderConfig { layers: 4, kernel: 7, groups: 16, width, noise_std: 0.02 }
    }
}

pub struct DecoderModel {
    pub cfg: DecoderConfig,
    pub in_w: Pid,
    pub in_b: Pid,
    pub conv_w: Vec<Pid>,
    pub ln: Vec<(Pid, Pid)>,
    pub head_w: Pid,
    pub head_b: Pid,
    /// Per-position pixel regression head (images, pixel loss variants).
    pub pixel_head: Option<(Pid, Pid)>,
}

pub fn build_decoder<E: Scalar>(
    cfg: DecoderConfig,
    encoder_width: usize,
    target_width: usize,
    pixel_dim: Option<usize>,
    two_d: bool,
    bank: &mut ParamBank<E>,
    rng: &mut ChaCha8Rng,
) -> Result<DecoderModel> {
    cfg.validate()?;
    let std = 0.02;
    let w = cfg.width;
    let cpg = w / cfg.groups;
    let in_w = bank.add("decoder.in.w", init_normal(rng, vec![encoder_width, w], std));
    let in_b = bank.add("decoder.in.b", Tensor::zeros(vec![w]));
    let mut conv_w = Vec::new();
    let mut ln = Vec::new();
    for i in 0..cfg.layers {
        let shape = if two_d {
            vec![w, cpg, cfg.kernel, cfg.kernel]
        } else {
            vec![w, cpg, cfg.kernel]
        };
        let fan_in = (cpg * cfg.kernel * if two_d { cfg.kernel } else { 1 }) as f64;
        conv_w.push(bank.add(format!("decoder.{i}.conv.w"), init_normal(rng, shape, (1.0 / fan_in).sqrt())));
        ln.push((
            bank.add(format!("decoder.{i}.ln.g"), Tensor::full(vec![w], E::one())),
            bank.add(format!("decoder.{i}.ln.b"), Tensor::zeros(vec![w])),
        ));
    }
    let head_w = bank.add("decoder.head.w", init_normal(rng, vec![w, target_width], std));
    let head_b = bank.add("decoder.head.b", Tensor::zeros(vec![target_width]));
    let pixel_head = match pixel_dim {
        Some(pd) => Some((
            bank.add("decoder.pixel_head.w", init_normal(rng, vec![w, pd], std)),
            bank.add("decoder.pixel_head.b", Tensor::zeros(vec![pd])),
        )),
        None => None,
    };
    Ok(DecoderModel { cfg, in_w, in_b, conv_w, ln, head_w, head_b, pixel_head })
}

/// Rebuild the full layout: encoded outputs stay at their kept positions,
/// masked positions are filled with i.i.d. Gaussian noise (no position
/// embedding is added to the noise tokens).
pub fn merge_mask_tokens<E: Scalar>(
    g: &mut Graph<E>,
    encoded: &TokenBatch,
    plans: &[MaskPlan],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenBatch> {
    if encoded.has_cls {
        return Err(D2v2Error::config("split the CLS token off before merging mask tokens"));
    }
    if plans.len() != encoded.batch_size() {
        return Err(D2v2Error::config("one mask plan per sample required"));
    }
    let layout = encoded.layout;
    for (ids, plan) in encoded.position_ids.iter().zip(plans.iter()) {
        if plan.layout() != layout {
            return Err(D2v2Error::config("plan layout mismatch"));
        }
        if !ids.iter().all(|&p| plan.kept()[p]) {
            return Err(D2v2Error::config(
                "encoded positions are not a subset of the plan's kept positions",
            ));
        }
    }
    let (b, w) = {
        let s = g.shape(encoded.tokens);
        (s[0], s[2])
    };
    let full_len = layout.len();
    let noise = if noise_std == 0.0 {
        Tensor::zeros(vec![b, full_len, w])
    } else {
        init_normal(rng, vec![b, full_len, w], noise_std)
    };
    let base = g.constant(noise);
    let idx: RowIndex = std::rc::Rc::new(encoded.position_ids.clone());
    let full = g.scatter_rows(encoded.tokens, base, idx);
    Ok(TokenBatch::new(
        g,
        full,
        TokenBatchFullIds::ids(layout, b),
        layout,
        false,
    ))
}

struct TokenBatchFullIds;
impl TokenBatchFullIds {
    fn ids(layout: Layout, batch: usize) -> Vec<Vec<usize>> {
        vec![(0..layout.len()).collect(); batch]
    }
}

pub struct DecoderOut {
    /// Target-space predictions, `[batch, L, target_width]`.
    pub pred: Var,
    /// Pixel-space predictions when the pixel head exists.
    pub pixel_pred: Option<Var>,
}

/// D blocks of grouped conv, layer norm, GELU and a residual connection,
/// then per-position linear head(s).
pub fn conv_decode<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    model: &DecoderModel,
    merged: &TokenBatch,
) -> Result<DecoderOut> {
    let cfg = &model.cfg;
    let (b, t) = {
        let s = g.shape(merged.tokens);
        (s[0], s[1])
    };
    if t != merged.layout.len() {
        return Err(D2v2Error::config("decoder input must cover the full layout"));
    }
    let w = cfg.width;
    let mut x = g.matmul(merged.tokens, bound.var(model.in_w), false);
    x = g.add(x, bound.var(model.in_b));

    for i in 0..cfg.layers {
        let conv = match merged.layout {
            Layout::OneD { len } => {
                let cf = g.permute(x, &[0, 2, 1]);
                let c = g.grouped_conv1d(cf, bound.var(model.conv_w[i]), cfg.groups)?;
                let cl = g.permute(c, &[0, 2, 1]);
                g.reshape(cl, vec![b, len, w])
            }
            Layout::TwoD { rows, cols } => {
                let grid = g.reshape(x, vec![b, rows, cols, w]);
                let cf = g.permute(grid, &[0, 3, 1, 2]);
                let c = g.grouped_conv2d(cf, bound.var(model.conv_w[i]), cfg.groups)?;
                let cl = g.permute(c, &[0, 2, 3, 1]);
                g.reshape(cl, vec![b, rows * cols, w])
            }
        };
        let n = g.layer_norm(conv, bound.var(model.ln[i].0), bound.var(model.ln[i].1), LN_EPS);
        let a = g.gelu(n);
        x = g.add(a, x);
    }

    let pred = g.matmul(x, bound.var(model.head_w), false);
    let pred = g.add(pred, bound.var(model.head_b));
    let pixel_pred = match model.pixel_head {
        Some((pw, pb)) => {
            let p = g.matmul(x, bound.var(pw), false);
            Some(g.add(p, bound.var(pb)))
        }
        None => None,
    };
    Ok(DecoderOut { pred, pixel_pred })
}
