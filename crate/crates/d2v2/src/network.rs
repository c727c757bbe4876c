//! Modality feature encoders and the shared post-layer-norm Transformer
//! backbone, with optional distance-penalty attention biases.
//!
//! The same backbone encodes full samples (teacher) and unmasked-only token
//! subsets (student). Token batches carry their original position ids so
//! attention distance penalties see true distances even under sparse
//! encoding, and so mask tokens can be merged back at the right places.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{D2v2Error, Result};
use crate::graph::{Graph, RowIndex, Var};
use crate::masking::{Layout, MaskPlan};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

// ── parameter storage ───────────────────────────────────────────────────

/// Index of a parameter in a [`ParamBank`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pid(usize);

/// Named parameter tensors. Names follow `<module>.<block idx>.<tensor>`
/// (e.g. `backbone.3.attn.q.w`) and are the contract for checkpoints and
/// the EMA name matcher.
#[derive(Clone)]
pub struct ParamBank<E: Scalar> {
    names: Vec<String>,
    vals: Vec<Tensor<E>>,
}

impl<E: Scalar> Default for ParamBank<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> ParamBank<E> {
    pub fn new() -> Self {
        ParamBank { names: Vec::new(), vals: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<E>) -> Pid {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.vals.push(t);
        Pid(self.vals.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn name(&self, pid: Pid) -> &str {
        &self.names[pid.0]
    }

    pub fn get(&self, pid: Pid) -> &Tensor<E> {
        &self.vals[pid.0]
    }

    pub fn get_mut(&mut self, pid: Pid) -> &mut Tensor<E> {
        &mut self.vals[pid.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<E>> {
        self.names.iter().position(|n| n == name).map(|i| &self.vals[i])
    }

    pub fn pid_of(&self, name: &str) -> Option<Pid> {
        self.names.iter().position(|n| n == name).map(Pid)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.vals.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.vals.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.vals.iter().map(|t| t.numel()).sum()
    }

    /// Insert every parameter into a graph as a leaf. Trainable banks get
    /// gradient-accumulating leaves; the teacher binds with
    /// `trainable = false`.
    pub fn bind(&self, g: &mut Graph<E>, trainable: bool) -> BoundParams {
        let vars = self.vals.iter().map(|t| g.leaf(t.clone(), trainable)).collect();
        BoundParams { vars }
    }
}

/// Graph leaf handles for one bound [`ParamBank`], indexable by [`Pid`].
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, pid: Pid) -> Var {
        self.vars[pid.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub fn init_normal<E: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        // Box-Muller from two uniforms
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        data.push(E::from_f64(z * std));
    }
    Tensor::new(shape, data)
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Speech,
    Text,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlibiConfig {
    pub enabled: bool,
    /// When false the per-head scalars are created but frozen at 1.0
    /// (ablation knob); the base slopes are always frozen.
    pub learned_scalars: bool,
}

impl Default for AlibiConfig {
    fn default() -> Self {
        AlibiConfig { enabled: false, learned_scalars: true }
    }
}

/// Shared Transformer backbone: post-layer-norm blocks of self-attention
/// and FFN, identical for every modality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub alibi: AlibiConfig,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(D2v2Error::config("backbone dims must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(D2v2Error::config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
}

/// Modality-specific embedding front-end.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FeatureEncoderConfig {
    Image {
        channels: usize,
        image_size: usize,
        patch: usize,
        /// CLS token parameter (prepended to the student stream when the
        /// global CLS loss is enabled).
        cls_token: bool,
    },
    Speech {
        conv_dim: usize,
        layers: Vec<ConvLayerSpec>,
        /// Depthwise relative-position convolution kernel (odd), applied
        /// over the full layout with masked taps zeroed.
        rel_kernel: usize,
    },
    Text {
        vocab: usize,
        max_len: usize,
    },
}

impl FeatureEncoderConfig {
    pub fn modality(&self) -> Modality {
        match self {
            FeatureEncoderConfig::Image { .. } => Modality::Image,
            FeatureEncoderConfig::Speech { .. } => Modality::Speech,
            FeatureEncoderConfig::Text { .. } => Modality::Text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FeatureEncoderConfig::Image { image_size, patch, .. } => {
                if *patch == 0 || image_size % patch != 0 {
                    return Err(D2v2Error::config(format!(
                        "image size {image_size} not divisible by patch {patch}"
                    )));
                }
            }
            FeatureEncoderConfig::Speech { layers, rel_kernel, .. } => {
                if layers.is_empty() {
                    return Err(D2v2Error::config("speech encoder needs at least one conv layer"));
                }
                if rel_kernel % 2 == 0 {
                    return Err(D2v2Error::config("relative conv kernel must be odd"));
                }
            }
            FeatureEncoderConfig::Text { vocab, max_len } => {
                if *vocab == 0 || *max_len == 0 {
                    return Err(D2v2Error::config("text encoder needs vocab > 0 and max_len > 0"));
                }
            }
        }
        Ok(())
    }

    /// Token layout produced for a full sample.
    pub fn layout_for(&self, sample_len: usize) -> Result<Layout> {
        match self {
            FeatureEncoderConfig::Image { image_size, patch, .. } => {
                let side = image_size / patch;
                let _ = sample_len;
                Ok(Layout::TwoD { rows: side, cols: side })
            }
            FeatureEncoderConfig::Speech { layers, .. } => {
                let frames = conv_output_len(sample_len, layers)?;
                Ok(Layout::OneD { len: frames })
            }
            FeatureEncoderConfig::Text { .. } => Ok(Layout::OneD { len: sample_len }),
        }
    }
}

/// Per-layer length recurrence `floor((n - k)/s) + 1`.
pub fn conv_output_len(samples: usize, layers: &[ConvLayerSpec]) -> Result<usize> {
    let mut n = samples;
    let min_len = min_input_len(layers);
    for l in layers {
        if n < l.kernel {
            return Err(D2v2Error::data(format!(
                "input of {samples} samples is shorter than the encoder receptive field (minimum {min_len})"
            )));
        }
        n = (n - l.kernel) / l.stride + 1;
    }
    Ok(n)
}

/// Smallest input length the conv stack accepts (yields one frame).
pub fn min_input_len(layers: &[ConvLayerSpec]) -> usize {
    let mut n = 1usize;
    for l in layers.iter().rev() {
        n = (n - 1) * l.stride + l.kernel;
    }
    n
}

// ── model parameters ────────────────────────────────────────────────────

pub struct BlockPids {
    pub q_w: Pid,
    pub q_b: Pid,
    pub k_w: Pid,
    pub k_b: Pid,
    pub v_w: Pid,
    pub v_b: Pid,
    pub o_w: Pid,
    pub o_b: Pid,
    pub ln1_g: Pid,
    pub ln1_b: Pid,
    pub fc1_w: Pid,
    pub fc1_b: Pid,
    pub fc2_w: Pid,
    pub fc2_b: Pid,
    pub ln2_g: Pid,
    pub ln2_b: Pid,
}

pub enum FeatPids {
    Image {
        proj_w: Pid,
        proj_b: Pid,
        pos: Pid,
        cls: Option<Pid>,
    },
    Speech {
        conv_w: Vec<Pid>,
        ln: Vec<(Pid, Pid)>,
        proj_w: Pid,
        proj_b: Pid,
        rel_w: Pid,
    },
    Text {
        embed: Pid,
        pos: Pid,
    },
}

/// Feature encoder + backbone parameter handles (the teacher-shadowed part
/// of the model; the decoder lives in its own module).
pub struct EncoderModel {
    pub feat_cfg: FeatureEncoderConfig,
    pub backbone: BackboneConfig,
    pub feat: FeatPids,
    pub blocks: Vec<BlockPids>,
    pub alibi_scale: Option<Pid>,
}

/// Creates all encoder parameters in `bank` and returns the handle map.
pub fn build_encoder<E: Scalar>(
    feat_cfg: FeatureEncoderConfig,
    backbone: BackboneConfig,
    bank: &mut ParamBank<E>,
    rng: &mut ChaCha8Rng,
) -> Result<EncoderModel> {
    feat_cfg.validate()?;
    backbone.validate()?;
    let w = backbone.width;
    let std = 0.02;

    let feat = match &feat_cfg {
        FeatureEncoderConfig::Image { channels, image_size, patch, cls_token } => {
            let tokens = (image_size / patch) * (image_size / patch);
            let in_dim = channels * patch * patch;
            FeatPids::Image {
                proj_w: bank.add("feature_encoder.patch.w", init_normal(rng, vec![in_dim, w], std)),
                proj_b: bank.add("feature_encoder.patch.b", Tensor::zeros(vec![w])),
                pos: bank.add("feature_encoder.pos", init_normal(rng, vec![tokens, w], std)),
                cls: cls_token
                    .then(|| bank.add("feature_encoder.cls", init_normal(rng, vec![w], std))),
            }
        }
        FeatureEncoderConfig::Speech { conv_dim, layers, rel_kernel } => {
            let mut conv_w = Vec::new();
            let mut ln = Vec::new();
            for (i, spec) in layers.iter().enumerate() {
                let c_in = if i == 0 { 1 } else { *conv_dim };
                let fan_in = (c_in * spec.kernel) as f64;
                conv_w.push(bank.add(
                    format!("feature_encoder.conv{i}.w"),
                    init_normal(rng, vec![*conv_dim, c_in, spec.kernel], (1.0 / fan_in).sqrt()),
                ));
                ln.push((
                    bank.add(format!("feature_encoder.ln{i}.g"), Tensor::full(vec![*conv_dim], E::one())),
                    bank.add(format!("feature_encoder.ln{i}.b"), Tensor::zeros(vec![*conv_dim])),
                ));
            }
            FeatPids::Speech {
                conv_w,
                ln,
                proj_w: bank.add("feature_encoder.proj.w", init_normal(rng, vec![*conv_dim, w], std)),
                proj_b: bank.add("feature_encoder.proj.b", Tensor::zeros(vec![w])),
                rel_w: bank.add(
                    "feature_encoder.rel_conv.w",
                    init_normal(rng, vec![w, 1, *rel_kernel], (1.0 / *rel_kernel as f64).sqrt()),
                ),
            }
        }
        FeatureEncoderConfig::Text { vocab, max_len } => FeatPids::Text {
            embed: bank.add("feature_encoder.embed", init_normal(rng, vec![*vocab, w], std)),
            pos: bank.add("feature_encoder.pos", init_normal(rng, vec![*max_len, w], std)),
        },
    };

    let mut blocks = Vec::with_capacity(backbone.depth);
    for i in 0..backbone.depth {
        let p = |bank: &mut ParamBank<E>, rng: &mut ChaCha8Rng, name: &str, shape: Vec<usize>| {
            bank.add(format!("backbone.{i}.{name}"), init_normal(rng, shape, std))
        };
        let zeros = |bank: &mut ParamBank<E>, name: &str, n: usize| {
            bank.add(format!("backbone.{i}.{name}"), Tensor::zeros(vec![n]))
        };
        let ones = |bank: &mut ParamBank<E>, name: &str, n: usize| {
            bank.add(format!("backbone.{i}.{name}"), Tensor::full(vec![n], E::one()))
        };
        let ffn = w * backbone.ffn_mult;
        blocks.push(BlockPids {
            q_w: p(bank, rng, "attn.q.w", vec![w, w]),
            q_b: zeros(bank, "attn.q.b", w),
            k_w: p(bank, rng, "attn.k.w", vec![w, w]),
            k_b: zeros(bank, "attn.k.b", w),
            v_w: p(bank, rng, "attn.v.w", vec![w, w]),
            v_b: zeros(bank, "attn.v.b", w),
            o_w: p(bank, rng, "attn.o.w", vec![w, w]),
            o_b: zeros(bank, "attn.o.b", w),
            ln1_g: ones(bank, "ln1.g", w),
            ln1_b: zeros(bank, "ln1.b", w),
            fc1_w: p(bank, rng, "ffn.fc1.w", vec![w, ffn]),
            fc1_b: zeros(bank, "ffn.fc1.b", ffn),
            fc2_w: p(bank, rng, "ffn.fc2.w", vec![ffn, w]),
            fc2_b: zeros(bank, "ffn.fc2.b", w),
            ln2_g: ones(bank, "ln2.g", w),
            ln2_b: zeros(bank, "ln2.b", w),
        });
    }

    let alibi_scale = backbone.alibi.enabled.then(|| {
        bank.add(
            "backbone.alibi_scale",
            Tensor::full(vec![backbone.heads], E::one()),
        )
    });

    Ok(EncoderModel { feat_cfg, backbone, feat, blocks, alibi_scale })
}

// ── token batches ───────────────────────────────────────────────────────

/// A batch of token sequences in the graph, with the original layout
/// positions each token came from.
pub struct TokenBatch {
    pub tokens: Var,
    pub position_ids: Vec<Vec<usize>>,
    pub layout: Layout,
    /// When set, `tokens[:, 0, :]` is a CLS token with no layout position;
    /// `position_ids` covers the remaining tokens.
    pub has_cls: bool,
}

impl TokenBatch {
    pub fn new<E: Scalar>(
        g: &Graph<E>,
        tokens: Var,
        position_ids: Vec<Vec<usize>>,
        layout: Layout,
        has_cls: bool,
    ) -> Self {
        let t = g.shape(tokens)[1];
        let expect = if has_cls { t - 1 } else { t };
        for ids in &position_ids {
            assert_eq!(ids.len(), expect, "position id count");
            assert!(
                ids.windows(2).all(|w| w[0] < w[1]),
                "position ids must be strictly increasing"
            );
            assert!(ids.iter().all(|&p| p < layout.len()), "position id out of layout");
        }
        TokenBatch { tokens, position_ids, layout, has_cls }
    }

    pub fn batch_size(&self) -> usize {
        self.position_ids.len()
    }

    pub fn seq_len<E: Scalar>(&self, g: &Graph<E>) -> usize {
        g.shape(self.tokens)[1]
    }

    fn full_ids(layout: Layout, batch: usize) -> Vec<Vec<usize>> {
        vec![(0..layout.len()).collect(); batch]
    }
}

// ── feature encoders ────────────────────────────────────────────────────

/// Rearrange images `[B, C, H, W]` into flat patch rows `[B, T, C*p*p]`.
pub fn extract_patches<E: Scalar>(images: &Tensor<E>, patch: usize) -> Result<Tensor<E>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(D2v2Error::config(format!("expected [B, C, H, W] image tensor, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % patch != 0 || w % patch != 0 {
        return Err(D2v2Error::config(format!(
            "image {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let tokens = gh * gw;
    let dim = c * patch * patch;
    let mut out = vec![E::zero(); b * tokens * dim];
    let src = images.data();
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                let t = ty * gw + tx;
                let dst = &mut out[(bi * tokens + t) * dim..(bi * tokens + t + 1) * dim];
                let mut di = 0;
                for ci in 0..c {
                    for py in 0..patch {
                        let row = ty * patch + py;
                        let base = ((bi * c + ci) * h + row) * w + tx * patch;
                        dst[di..di + patch].copy_from_slice(&src[base..base + patch]);
                        di += patch;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![b, tokens, dim], out))
}

/// Patch-map images into tokens: learned linear projection of each patch
/// plus a learned absolute position embedding.
pub fn patch_embed<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    model: &EncoderModel,
    images: &Tensor<E>,
) -> Result<TokenBatch> {
    let (proj_w, proj_b, pos) = match &model.feat {
        FeatPids::Image { proj_w, proj_b, pos, .. } => (*proj_w, *proj_b, *pos),
        _ => return Err(D2v2Error::config("patch_embed on a non-image encoder")),
    };
    let patch = match &model.feat_cfg {
        FeatureEncoderConfig::Image { patch, .. } => *patch,
        _ => unreachable!(),
    };
    let batch = images.shape()[0];
    let side = images.shape()[2] / patch;
    let patches = extract_patches(images, patch)?;
    let x = g.constant(patches);
    let x = g.matmul(x, bound.var(proj_w), false);
    let x = g.add(x, bound.var(proj_b));
    let x = g.add(x, bound.var(pos));
    let layout = Layout::TwoD { rows: side, cols: side };
    Ok(TokenBatch::new(g, x, TokenBatch::full_ids(layout, batch), layout, false))
}

/// Multi-layer strided convolutional front-end for raw waveforms
/// `[B, samples]`; per-frame features are layer-normalized after each conv.
pub fn conv_feature_encoder<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    model: &EncoderModel,
    waves: &Tensor<E>,
) -> Result<TokenBatch> {
    let (conv_w, ln, proj_w, proj_b) = match &model.feat {
        FeatPids::Speech { conv_w, ln, proj_w, proj_b, .. } => (conv_w, ln, *proj_w, *proj_b),
        _ => return Err(D2v2Error::config("conv_feature_encoder on a non-speech encoder")),
    };
    let layers = match &model.feat_cfg {
        FeatureEncoderConfig::Speech { layers, .. } => layers.clone(),
        _ => unreachable!(),
    };
    let s = waves.shape();
    if s.len() != 2 {
        return Err(D2v2Error::config(format!("expected [B, samples] waveform, got {s:?}")));
    }
    let (batch, samples) = (s[0], s[1]);
    let frames = conv_output_len(samples, &layers)?;

    let mut x = g.constant(waves.clone().reshaped(vec![batch, 1, samples]));
    for (i, spec) in layers.iter().enumerate() {
        x = g.conv1d_strided(x, bound.var(conv_w[i]), spec.stride)?;
        // layer norm acts over channels, so flip to channels-last
        let xl = g.permute(x, &[0, 2, 1]);
        let xl = g.layer_norm(xl, bound.var(ln[i].0), bound.var(ln[i].1), LN_EPS);
        let xl = g.gelu(xl);
        x = g.permute(xl, &[0, 2, 1]);
    }
    let x = g.permute(x, &[0, 2, 1]);
    let x = g.matmul(x, bound.var(proj_w), false);
    let x = g.add(x, bound.var(proj_b));
    let layout = Layout::OneD { len: frames };
    Ok(TokenBatch::new(g, x, TokenBatch::full_ids(layout, batch), layout, false))
}

/// Learned token embeddings plus position embeddings for id sequences.
pub fn token_embed<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    model: &EncoderModel,
    ids: &[Vec<usize>],
) -> Result<TokenBatch> {
    let (embed, pos) = match &model.feat {
        FeatPids::Text { embed, pos } => (*embed, *pos),
        _ => return Err(D2v2Error::config("token_embed on a non-text encoder")),
    };
    let (vocab, max_len) = match &model.feat_cfg {
        FeatureEncoderConfig::Text { vocab, max_len } => (*vocab, *max_len),
        _ => unreachable!(),
    };
    let seq = ids.first().map(|r| r.len()).unwrap_or(0);
    if seq == 0 || seq > max_len {
        return Err(D2v2Error::data(format!("sequence length {seq} outside 1..={max_len}")));
    }
    for row in ids {
        if row.len() != seq {
            return Err(D2v2Error::data("ragged id batch"));
        }
        if let Some(&bad) = row.iter().find(|&&id| id >= vocab) {
            return Err(D2v2Error::data(format!("token id {bad} out of vocabulary size {vocab}")));
        }
    }
    let idx: RowIndex = std::rc::Rc::new(ids.to_vec());
    let x = g.embed(bound.var(embed), idx);
    // position table may be longer than the batch sequence
    let pos_full = bound.var(pos);
    let pos_idx: RowIndex = std::rc::Rc::new(vec![(0..seq).collect()]);
    let pos_r = g.reshape(pos_full, vec![1, max_len, g.shape(pos_full)[1]]);
    let pos_sel = g.gather_rows(pos_r, pos_idx);
    let width = g.shape(pos_sel)[2];
    let pos_sel = g.reshape(pos_sel, vec![seq, width]);
    let x = g.add(x, pos_sel);
    let layout = Layout::OneD { len: seq };
    Ok(TokenBatch::new(g, x, TokenBatch::full_ids(layout, ids.len()), layout, false))
}

// ── masking interface ───────────────────────────────────────────────────

/// Keep only unmasked positions, preserving original position ids.
pub fn select_unmasked<E: Scalar>(
    g: &mut Graph<E>,
    batch: &TokenBatch,
    plans: &[MaskPlan],
) -> Result<TokenBatch> {
    if batch.has_cls {
        return Err(D2v2Error::config("select_unmasked before CLS prepend, not after"));
    }
    if plans.len() != batch.batch_size() {
        return Err(D2v2Error::config(format!(
            "{} plans for a batch of {}",
            plans.len(),
            batch.batch_size()
        )));
    }
    for p in plans {
        if p.layout() != batch.layout {
            return Err(D2v2Error::config(format!(
                "mask layout {:?} does not match token layout {:?}",
                p.layout(),
                batch.layout
            )));
        }
    }
    let kept: Vec<Vec<usize>> = plans.iter().map(|p| p.kept_indices()).collect();
    let n0 = kept[0].len();
    if kept.iter().any(|k| k.len() != n0) {
        return Err(D2v2Error::config("plans keep differing counts (assimilation missing?)"));
    }
    let idx: RowIndex = std::rc::Rc::new(kept.clone());
    let tokens = g.gather_rows(batch.tokens, idx);
    Ok(TokenBatch::new(g, tokens, kept, batch.layout, false))
}

/// Prepend a learned CLS token to every sequence in the batch.
pub fn prepend_cls<E: Scalar>(g: &mut Graph<E>, batch: &TokenBatch, cls: Var) -> TokenBatch {
    assert!(!batch.has_cls, "CLS already present");
    let b = batch.batch_size();
    let w = g.shape(batch.tokens)[2];
    let zeros = g.constant(Tensor::zeros(vec![b, 1, w]));
    let cls_row = g.add(zeros, cls);
    let tokens = g.concat1(cls_row, batch.tokens);
    TokenBatch {
        tokens,
        position_ids: batch.position_ids.clone(),
        layout: batch.layout,
        has_cls: true,
    }
}

// ── distance-penalty attention bias ─────────────────────────────────────

/// Frozen per-head slopes: `2^(-8h/H)` for head `h` in `1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads).map(|h| (2.0f64).powf(-8.0 * h as f64 / heads as f64)).collect()
}

/// Distance between two layout positions: absolute offset on 1-D layouts,
/// Euclidean grid distance on 2-D layouts.
pub fn layout_distance(layout: Layout, a: usize, b: usize) -> f64 {
    match layout {
        Layout::OneD { .. } => (a as f64 - b as f64).abs(),
        Layout::TwoD { .. } => {
            let (ar, ac) = layout.coords(a);
            let (br, bc) = layout.coords(b);
            let dr = ar as f64 - br as f64;
            let dc = ac as f64 - bc as f64;
            (dr * dr + dc * dc).sqrt()
        }
    }
}

/// Frozen bias base for one sample: `base[h, i, j] = -slope[h] * dist(i, j)`
/// over the original position ids. A CLS slot, when present, sits at index
/// 0 with distance zero to everything.
fn alibi_base<E: Scalar>(
    position_ids: &[usize],
    layout: Layout,
    slopes: &[f64],
    has_cls: bool,
) -> Tensor<E> {
    let extra = usize::from(has_cls);
    let t = position_ids.len() + extra;
    let heads = slopes.len();
    let mut dist = vec![0.0f64; t * t];
    for (i, &pi) in position_ids.iter().enumerate() {
        for (j, &pj) in position_ids.iter().enumerate() {
            dist[(i + extra) * t + (j + extra)] = layout_distance(layout, pi, pj);
        }
    }
    let mut data = Vec::with_capacity(heads * t * t);
    for &s in slopes {
        data.extend(dist.iter().map(|&d| E::from_f64(-s * d)));
    }
    Tensor::new(vec![heads, t, t], data)
}

/// Per-head distance penalty for one sample: `-scalar[h] * slope[h] *
/// dist(i, j)`, shaped `[heads, q, k]`. Slopes are frozen; the scalars var
/// is the learned (or frozen-at-1) per-head scale.
pub fn alibi_bias<E: Scalar>(
    g: &mut Graph<E>,
    position_ids: &[usize],
    layout: Layout,
    slopes: &[f64],
    scalars: Var,
    has_cls: bool,
) -> Var {
    let heads = slopes.len();
    let base = alibi_base::<E>(position_ids, layout, slopes, has_cls);
    let t = base.shape()[1];
    let base = g.constant(base.reshaped(vec![1, heads, t, t]));
    let scaled = g.mul_head(base, scalars);
    g.reshape(scaled, vec![heads, t, t])
}

/// Stacked bias for a whole batch, `[B, heads, T, T]`.
fn alibi_bias_batch<E: Scalar>(
    g: &mut Graph<E>,
    batch: &TokenBatch,
    slopes: &[f64],
    scalars: Var,
) -> Var {
    let b = batch.batch_size();
    let heads = slopes.len();
    let extra = usize::from(batch.has_cls);
    let t = batch.position_ids[0].len() + extra;
    let mut data = Vec::with_capacity(b * heads * t * t);
    for ids in &batch.position_ids {
        let one = alibi_base::<E>(ids, batch.layout, slopes, batch.has_cls);
        data.extend_from_slice(one.data());
    }
    let base = g.constant(Tensor::new(vec![b, heads, t, t], data));
    g.mul_head(base, scalars)
}

// ── backbone ────────────────────────────────────────────────────────────

/// Per-block FFN records (block outputs, post-LN) kept for target
/// construction, plus the final output.
pub struct EncodeTrace {
    pub ffn_outputs: Vec<Var>,
    pub output: Var,
    /// Forward FLOPs spent on attention score (q·kᵀ) products.
    pub score_flops: u64,
}

/// Run the post-LN Transformer backbone over a token batch.
///
/// Block structure: attention, residual, LN, FFN, residual, LN. With
/// `keep_trace` every block output is retained for top-K target averaging.
pub fn encode<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    model: &EncoderModel,
    batch: &TokenBatch,
    keep_trace: bool,
) -> Result<EncodeTrace> {
    let cfg = &model.backbone;
    cfg.validate()?;
    let (b, t, w) = {
        let s = g.shape(batch.tokens);
        (s[0], s[1], s[2])
    };
    if w != cfg.width {
        return Err(D2v2Error::config(format!(
            "token width {w} does not match backbone width {}",
            cfg.width
        )));
    }
    let heads = cfg.heads;
    let dh = cfg.head_dim();

    let bias = match (cfg.alibi.enabled, model.alibi_scale) {
        (true, Some(scale_pid)) => {
            let slopes = alibi_slopes(heads);
            Some(alibi_bias_batch(g, batch, &slopes, bound.var(scale_pid)))
        }
        _ => None,
    };

    let mut x = batch.tokens;
    let mut trace = Vec::with_capacity(if keep_trace { cfg.depth } else { 0 });
    let mut score_flops = 0u64;
    for (bi, blk) in model.blocks.iter().enumerate() {
        // attention
        let to_heads = |g: &mut Graph<E>, v: Var| -> Var {
            let r = g.reshape(v, vec![b, t, heads, dh]);
            g.permute(r, &[0, 2, 1, 3])
        };
        let q = g.matmul(x, bound.var(blk.q_w), false);
        let q = g.add(q, bound.var(blk.q_b));
        let q = to_heads(g, q);
        let k = g.matmul(x, bound.var(blk.k_w), false);
        let k = g.add(k, bound.var(blk.k_b));
        let k = to_heads(g, k);
        let v = g.matmul(x, bound.var(blk.v_w), false);
        let v = g.add(v, bound.var(blk.v_b));
        let v = to_heads(g, v);

        let before = g.flops();
        let scores = g.matmul(q, k, true);
        score_flops += g.flops() - before;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = match bias {
            Some(bias_var) => g.add(scores, bias_var),
            None => scores,
        };
        let probs = g.softmax(scores);
        let ctx = g.matmul(probs, v, false);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, vec![b, t, w]);
        let attn = g.matmul(ctx, bound.var(blk.o_w), false);
        let attn = g.add(attn, bound.var(blk.o_b));

        let res = g.add(attn, x);
        let x1 = g.layer_norm(res, bound.var(blk.ln1_g), bound.var(blk.ln1_b), LN_EPS);

        let h = g.matmul(x1, bound.var(blk.fc1_w), false);
        let h = g.add(h, bound.var(blk.fc1_b));
        let h = g.gelu(h);
        let h = g.matmul(h, bound.var(blk.fc2_w), false);
        let h = g.add(h, bound.var(blk.fc2_b));

        let res2 = g.add(h, x1);
        let x2 = g.layer_norm(res2, bound.var(blk.ln2_g), bound.var(blk.ln2_b), LN_EPS);
        g.check_finite(x2, &format!("backbone block {bi}"))?;

        if keep_trace {
            trace.push(x2);
        }
        x = x2;
    }
    Ok(EncodeTrace { ffn_outputs: trace, output: x, score_flops })
}

/// Depthwise relative-position convolution over the full layout, with
/// kernel taps on masked positions contributing zero; output is gathered
/// back to the unmasked positions and added residually. 1-D layouts only.
pub fn masked_relative_conv<E: Scalar>(
    g: &mut Graph<E>,
    bound: &BoundParams,
    model: &EncoderModel,
    batch: &TokenBatch,
    plans: &[MaskPlan],
) -> Result<TokenBatch> {
    let rel_w = match &model.feat {
        FeatPids::Speech { rel_w, .. } => *rel_w,
        _ => return Err(D2v2Error::config("masked_relative_conv needs the speech encoder")),
    };
    if !matches!(batch.layout, Layout::OneD { .. }) {
        return Err(D2v2Error::config("masked_relative_conv is for 1-D layouts"));
    }
    let full_len = batch.layout.len();
    let (b, _t, w) = {
        let s = g.shape(batch.tokens);
        (s[0], s[1], s[2])
    };
    let kept: Vec<Vec<usize>> = plans.iter().map(|p| p.kept_indices()).collect();
    for (ids, k) in batch.position_ids.iter().zip(kept.iter()) {
        if ids != k {
            return Err(D2v2Error::config("token positions do not match plan kept positions"));
        }
    }
    let idx: RowIndex = std::rc::Rc::new(kept);
    // zeros at masked spots make their taps contribute nothing
    let zeros = g.constant(Tensor::zeros(vec![b, full_len, w]));
    let full = g.scatter_rows(batch.tokens, zeros, idx.clone());
    let cf = g.permute(full, &[0, 2, 1]);
    let conv = g.grouped_conv1d(cf, bound.var(rel_w), w)?;
    let conv = g.permute(conv, &[0, 2, 1]);
    let back = g.gather_rows(conv, idx);
    let out = g.add(back, batch.tokens);
    Ok(TokenBatch::new(g, out, batch.position_ids.clone(), batch.layout, false))
}

/// Names that the teacher shadows: everything except the decoder.
pub fn is_encoder_param(name: &str) -> bool {
    !name.starts_with("decoder.")
}
