//! The multi-mask training step: one teacher forward per sample builds the
//! shared contextualized targets, the student feature encoder runs once,
//! and the sparse student backbone plus decoder run once per mask version.
//! Losses, the optimizer step, the EMA update, and the per-step metrics
//! (including forward counts and FLOP meters) all live here.


use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{D2v2Error, Result};
use crate::graph::{Graph, Var};
use crate::masking::{plan_seed, sample_mask, seeded_rng, MaskConfig, MaskPlan};
use crate::model::{student_forward, LossVariant, Model};
use crate::network::{extract_patches, ParamBank, TokenBatch};
use crate::optim::{lr_at, AdamW};
use crate::teacher::{build_targets, embed_full, ema_update, tau_at, RawBatch, TargetBatch, TauSchedule, TeacherState};
use crate::tensor::{Scalar, Tensor};

const PIXEL_NORM_EPS: f64 = 1e-6;
const NOISE_SALT: u64 = 0x6e6f6973; // rng domain for mask tokens

/// Training-step hyper-parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainParams {
    /// Masked versions per sample (M).
    pub masks_per_sample: usize,
    pub mask: MaskConfig,
    pub loss: LossVariant,
    pub cls_weight: f64,
    pub pixel_weight: f64,
    /// Teacher blocks averaged into the target (K).
    pub k_top: usize,
    /// Layer-normalize the averaged target.
    pub target_layer_norm: bool,
    pub tau: TauSchedule,
    pub lr: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub total_updates: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.masks_per_sample == 0 {
            return Err(D2v2Error::config("masks_per_sample must be >= 1"));
        }
        if self.cls_weight < 0.0 || self.pixel_weight < 0.0 {
            return Err(D2v2Error::config("loss weights must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(D2v2Error::config("batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(D2v2Error::config("warmup_frac must be in [0, 1]"));
        }
        self.mask.validate()?;
        self.tau.validate()?;
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.total_updates as f64 * self.warmup_frac).round() as u64
    }
}

/// Everything per step: losses, schedule values, forward counts, and FLOP
/// meters. One CSV row per step, fixed column order (see [`StepMetrics::CSV_HEADER`]).
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub step: u64,
    pub main_loss: f64,
    pub cls_loss: f64,
    pub pixel_loss: f64,
    pub total_loss: f64,
    pub tau: f64,
    pub lr: f64,
    /// Sample-level forward counts this step.
    pub teacher_fwd: u64,
    pub feat_fwd: u64,
    pub student_fwd: u64,
    /// Forward FLOPs by component.
    pub flops_teacher: u64,
    pub flops_student_backbone: u64,
    pub flops_decoder: u64,
    pub score_flops_teacher: u64,
    pub score_flops_student: u64,
    pub wall_ms: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,main_loss,cls_loss,pixel_loss,total_loss,tau,lr,teacher_fwd,feat_fwd,student_fwd,flops_teacher,flops_student_backbone,flops_decoder,score_flops_teacher,score_flops_student,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.main_loss,
            self.cls_loss,
            self.pixel_loss,
            self.total_loss,
            self.tau,
            self.lr,
            self.teacher_fwd,
            self.feat_fwd,
            self.student_fwd,
            self.flops_teacher,
            self.flops_student_backbone,
            self.flops_decoder,
            self.score_flops_teacher,
            self.score_flops_student,
            self.wall_ms
        )
    }
}

// ── losses ──────────────────────────────────────────────────────────────

/// L2 regression loss at masked positions only: mean over
/// (masked positions x width) of `(pred - y)^2`. Kept positions are
/// produced by the decoder but excluded here.
pub fn l2_masked_loss<E: Scalar>(
    g: &mut Graph<E>,
    pred: Var,
    y: &Tensor<E>,
    plans: &[MaskPlan],
) -> Result<Var> {
    let s = g.shape(pred).to_vec();
    assert_eq!(s.len(), 3, "pred must be [batch, L, width]");
    let (b, l, w) = (s[0], s[1], s[2]);
    assert_eq!(y.shape(), &[b, l, w], "target shape");
    assert_eq!(plans.len(), b, "one plan per sample");
    let mut mask = vec![E::zero(); b * l * w];
    let mut masked_total = 0usize;
    for (bi, plan) in plans.iter().enumerate() {
        let masked = plan.masked_indices();
        if masked.is_empty() {
            return Err(D2v2Error::config(
                "degenerate mask plan: no masked positions to compute the loss on",
            ));
        }
        masked_total += masked.len();
        for p in masked {
            for v in mask[(bi * l + p) * w..(bi * l + p + 1) * w].iter_mut() {
                *v = E::one();
            }
        }
    }
    let yv = g.constant(y.clone());
    let mv = g.constant(Tensor::new(vec![b, l, w], mask));
    let d = g.sub(pred, yv);
    let sq = g.mul(d, d);
    let masked_sq = g.mul(sq, mv);
    let total = g.sum_all(masked_sq);
    Ok(g.scale(total, 1.0 / (masked_total * w) as f64))
}

/// Global CLS loss: L2 between the student CLS output and the mean teacher
/// target over all positions.
pub fn cls_loss<E: Scalar>(g: &mut Graph<E>, student_cls: Var, pooled_target: &Tensor<E>) -> Var {
    assert_eq!(g.shape(student_cls), pooled_target.shape(), "cls target shape");
    let yv = g.constant(pooled_target.clone());
    let d = g.sub(student_cls, yv);
    let sq = g.mul(d, d);
    g.mean_all(sq)
}

/// Per-patch mean/variance normalized pixel targets, `[B, L, C*p*p]`.
pub fn normalized_pixel_targets<E: Scalar>(images: &Tensor<E>, patch: usize) -> Result<Tensor<E>> {
    let mut patches = extract_patches(images, patch)?;
    let s = patches.shape().to_vec();
    let dim = s[2];
    let eps = E::from_f64(PIXEL_NORM_EPS);
    for row in patches.data_mut().chunks_exact_mut(dim) {
        let (mean, rstd) = crate::tensor::row_stats(row, eps);
        for v in row.iter_mut() {
            *v = (*v - mean) * rstd;
        }
    }
    Ok(patches)
}

/// MAE-style pixel regression at masked positions against per-patch
/// normalized pixels.
pub fn pixel_regression_loss<E: Scalar>(
    g: &mut Graph<E>,
    pixel_pred: Var,
    images: &Tensor<E>,
    patch: usize,
    plans: &[MaskPlan],
) -> Result<Var> {
    let targets = normalized_pixel_targets(images, patch)?;
    l2_masked_loss(g, pixel_pred, &targets, plans)
}

// ── the training step ───────────────────────────────────────────────────

/// Mutable training state: student parameters, the model handle map, the
/// EMA teacher, and the optimizer.
pub struct TrainState<E: Scalar> {
    pub bank: ParamBank<E>,
    pub model: Model,
    pub teacher: TeacherState<E>,
    pub opt: AdamW<E>,
    pub step: u64,
}

impl<E: Scalar> TrainState<E> {
    pub fn new(bank: ParamBank<E>, model: Model, weight_decay: f64) -> Self {
        let teacher = TeacherState::init(&bank);
        let opt = AdamW::new(&bank, weight_decay);
        TrainState { bank, model, teacher, opt, step: 0 }
    }
}

/// Per-mask losses of one already-built student pass.
struct MaskLosses {
    main: Option<Var>,
    cls: Option<Var>,
    pixel: Option<Var>,
}

/// One full training step over a batch; see module docs for the sequence.
/// `raw` must hold `params.batch_size` samples.
pub fn train_step<E: Scalar>(
    state: &mut TrainState<E>,
    raw: &RawBatch<'_, E>,
    params: &TrainParams,
) -> Result<StepMetrics> {
    let t0 = Instant::now();
    let step = state.step;
    let m = params.masks_per_sample;
    let loss_variant = params.loss;

    // (1) teacher targets, once per sample, on the full unmasked input
    let targets: Option<TargetBatch<E>> = if loss_variant.uses_targets() {
        Some(build_targets(
            &state.teacher,
            &state.model.encoder,
            raw,
            params.k_top,
            params.target_layer_norm,
        )?)
    } else {
        None
    };

    // (2) student graph; feature encoder output shared across all masks
    let mut g: Graph<E> = Graph::new();
    let bound = state.bank.bind(&mut g, true);
    let feat_start = g.flops();
    let features: TokenBatch = embed_full(&mut g, &bound, &state.model.encoder, raw)?;
    let _feat_flops = g.flops() - feat_start;
    let batch_size = features.batch_size();
    if batch_size != params.batch_size {
        return Err(D2v2Error::config(format!(
            "batch of {batch_size} samples, configured batch_size {}",
            params.batch_size
        )));
    }
    let layout = features.layout;

    // (3) M masked versions against the shared targets
    let mut per_mask: Vec<MaskLosses> = Vec::with_capacity(m);
    let mut flops_student_backbone = 0u64;
    let mut flops_decoder = 0u64;
    let mut score_flops_student = 0u64;
    let images_for_pixels: Option<&Tensor<E>> = match (loss_variant.uses_pixels(), raw) {
        (true, RawBatch::Images(img)) => Some(img),
        (true, _) => return Err(D2v2Error::config("pixel loss on a non-image batch")),
        _ => None,
    };
    for mask_i in 0..m {
        let plans: Vec<MaskPlan> = (0..batch_size)
            .map(|b| {
                sample_mask(
                    &params.mask,
                    layout,
                    &mut seeded_rng(plan_seed(params.seed, step, b as u64, mask_i as u64)),
                )
            })
            .collect::<Result<_>>()?;
        let mut noise_rng = seeded_rng(plan_seed(params.seed ^ NOISE_SALT, step, 0, mask_i as u64));
        let out = student_forward(&mut g, &bound, &state.model, &features, &plans, &mut noise_rng)?;
        flops_student_backbone += out.backbone_flops;
        flops_decoder += out.decoder_flops;
        score_flops_student += out.score_flops;

        let main = match &targets {
            Some(t) => Some(l2_masked_loss(&mut g, out.pred, &t.y, &plans)?),
            None => None,
        };
        let cls = match (out.cls_out, &targets) {
            (Some(cv), Some(t)) if loss_variant.uses_cls() => Some(cls_loss(&mut g, cv, &t.pooled())),
            _ => None,
        };
        let pixel = match (out.pixel_pred, images_for_pixels) {
            (Some(pv), Some(img)) => {
                let patch = match &state.model.encoder.feat_cfg {
                    crate::network::FeatureEncoderConfig::Image { patch, .. } => *patch,
                    _ => unreachable!("pixel loss implies images"),
                };
                Some(pixel_regression_loss(&mut g, pv, img, patch, &plans)?)
            }
            _ => None,
        };
        per_mask.push(MaskLosses { main, cls, pixel });
    }

    // (4) total = mean over masks of (main + cls_weight*cls + pixel_weight*pixel)
    let mean_of = |g: &mut Graph<E>, vars: Vec<Var>| -> Option<Var> {
        let mut it = vars.into_iter();
        let first = it.next()?;
        let sum = it.fold(first, |acc, v| g.add(acc, v));
        Some(g.scale(sum, 1.0 / m as f64))
    };
    let main_mean = mean_of(&mut g, per_mask.iter().filter_map(|l| l.main).collect());
    let cls_mean = mean_of(&mut g, per_mask.iter().filter_map(|l| l.cls).collect());
    let pixel_mean = mean_of(&mut g, per_mask.iter().filter_map(|l| l.pixel).collect());

    let mut total = main_mean;
    if let Some(c) = cls_mean {
        let weighted = g.scale(c, params.cls_weight);
        total = Some(match total {
            Some(t) => g.add(t, weighted),
            None => weighted,
        });
    }
    if let Some(p) = pixel_mean {
        let weighted = g.scale(p, params.pixel_weight);
        total = Some(match total {
            Some(t) => g.add(t, weighted),
            None => weighted,
        });
    }
    let total = total.ok_or_else(|| D2v2Error::config("loss variant produced no loss terms"))?;
    g.check_finite(total, &format!("total loss at step {step}"))
        .map_err(|e| D2v2Error::numeric(format!("{e}; aborting step {step}")))?;

    // (5) optimizer step on the student
    g.backward(total)
        .map_err(|e| D2v2Error::numeric(format!("{e} at step {step}")))?;
    let grads: Vec<Option<Tensor<E>>> = bound.vars().iter().map(|&v| g.grad(v)).collect();
    for (gr, (name, _)) in grads.iter().zip(state.bank.iter()) {
        if let Some(t) = gr {
            if !t.is_all_finite() {
                return Err(D2v2Error::numeric(format!(
                    "non-finite gradient for {name} at step {step}"
                )));
            }
        }
    }
    let lr = lr_at(params.lr, params.warmup_steps(), params.total_updates, step);
    state.opt.step(&mut state.bank, &grads, lr);

    // (6) EMA teacher update
    let tau = tau_at(&params.tau, step);
    ema_update(&mut state.teacher, &state.bank, tau)?;

    state.step += 1;

    let scalar = |v: Option<Var>| v.map(|v| g.value(v).item().to_f64()).unwrap_or(0.0);
    Ok(StepMetrics {
        step,
        main_loss: scalar(main_mean),
        cls_loss: scalar(cls_mean),
        pixel_loss: scalar(pixel_mean),
        total_loss: g.value(total).item().to_f64(),
        tau,
        lr,
        teacher_fwd: targets.as_ref().map(|_| batch_size as u64).unwrap_or(0),
        feat_fwd: batch_size as u64,
        student_fwd: (batch_size * m) as u64,
        flops_teacher: targets.as_ref().map(|t| t.flops).unwrap_or(0),
        flops_student_backbone,
        flops_decoder,
        score_flops_teacher: targets.as_ref().map(|t| t.score_flops).unwrap_or(0),
        score_flops_student,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    })
}

/// Mean masked-prediction loss over a held-out batch with a fixed mask
/// seed; no optimizer or EMA side effects.
pub fn eval_loss<E: Scalar>(
    state: &TrainState<E>,
    raw: &RawBatch<'_, E>,
    params: &TrainParams,
    eval_seed: u64,
) -> Result<f64> {
    let targets = if params.loss.uses_targets() {
        Some(build_targets(
            &state.teacher,
            &state.model.encoder,
            raw,
            params.k_top,
            params.target_layer_norm,
        )?)
    } else {
        None
    };
    let mut g: Graph<E> = Graph::new();
    let bound = state.bank.bind(&mut g, false);
    let features = embed_full(&mut g, &bound, &state.model.encoder, raw)?;
    let batch_size = features.batch_size();
    let plans: Vec<MaskPlan> = (0..batch_size)
        .map(|b| {
            sample_mask(
                &params.mask,
                features.layout,
                &mut seeded_rng(plan_seed(eval_seed, 0, b as u64, 0)),
            )
        })
        .collect::<Result<_>>()?;
    let mut noise_rng = seeded_rng(plan_seed(eval_seed ^ NOISE_SALT, 0, 0, 0));
    let out = student_forward(&mut g, &bound, &state.model, &features, &plans, &mut noise_rng)?;
    let loss = match (&targets, out.pixel_pred) {
        (Some(t), _) => l2_masked_loss(&mut g, out.pred, &t.y, &plans)?,
        (None, Some(pv)) => {
            let img = match raw {
                RawBatch::Images(img) => img,
                _ => return Err(D2v2Error::config("pixel eval on non-image batch")),
            };
            let patch = match &state.model.encoder.feat_cfg {
                crate::network::FeatureEncoderConfig::Image { patch, .. } => *patch,
                _ => unreachable!(),
            };
            pixel_regression_loss(&mut g, pv, img, patch, &plans)?
        }
        _ => return Err(D2v2Error::config("no loss term available for evaluation")),
    };
    Ok(g.value(loss).item().to_f64())
}

// ── closed-form FLOP accounting ─────────────────────────────────────────

/// Closed-form forward-FLOP estimates for one sample at sequence length
/// `l`, mask ratio `r`, and `m` mask versions. Token counts enter as real
/// values, so the ratios are exact.
#[derive(Debug, Clone)]
pub struct FlopReport {
    pub teacher_backbone: f64,
    pub teacher_attn_scores: f64,
    pub student_backbone_per_mask: f64,
    pub student_attn_scores_per_mask: f64,
    pub decoder_per_mask: f64,
    pub masks_per_sample: usize,
    /// Teacher share of the per-loss-term compute:
    /// `teacher / (teacher + m * (student + decoder))`.
    pub amortized_teacher_share: f64,
}

fn backbone_flops_closed(width: f64, ffn_mult: f64, depth: f64, tokens: f64) -> (f64, f64) {
    // per block: q,k,v,o projections + 2 FFN matmuls + 2 attention matmuls
    let proj = 4.0 * 2.0 * tokens * width * width;
    let ffn = 2.0 * 2.0 * tokens * width * (width * ffn_mult);
    let scores = 2.0 * tokens * tokens * width;
    let mix = 2.0 * tokens * tokens * width;
    let total = depth * (proj + ffn + scores + mix);
    let score_total = depth * scores;
    (total, score_total)
}

pub fn flop_report(
    backbone: &crate::network::BackboneConfig,
    decoder: &crate::decoder::DecoderConfig,
    two_d: bool,
    l: usize,
    r: f64,
    m: usize,
) -> FlopReport {
    let w = backbone.width as f64;
    let depth = backbone.depth as f64;
    let ffn_mult = backbone.ffn_mult as f64;
    let lf = l as f64;
    let (teacher_backbone, teacher_attn_scores) = backbone_flops_closed(w, ffn_mult, depth, lf);
    let student_tokens = (1.0 - r) * lf;
    let (student_backbone_per_mask, student_attn_scores_per_mask) =
        backbone_flops_closed(w, ffn_mult, depth, student_tokens);
    let dw = decoder.width as f64;
    let taps = decoder.kernel as f64 * if two_d { decoder.kernel as f64 } else { 1.0 };
    let conv = decoder.layers as f64 * 2.0 * lf * dw * (dw / decoder.groups as f64) * taps;
    let proj = 2.0 * lf * (w * dw + dw * w);
    let decoder_per_mask = conv + proj;
    let per_mask = student_backbone_per_mask + decoder_per_mask;
    let amortized_teacher_share = teacher_backbone / (teacher_backbone + m as f64 * per_mask);
    FlopReport {
        teacher_backbone,
        teacher_attn_scores,
        student_backbone_per_mask,
        student_attn_scores_per_mask,
        decoder_per_mask,
        masks_per_sample: m,
        amortized_teacher_share,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::DecoderConfig;
    use crate::masking::{Layout, MaskStrategy};
    use crate::model::build_model;
    use crate::network::{AlibiConfig, BackboneConfig, FeatureEncoderConfig};

    fn tensor3(b: usize, l: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::new(vec![b, l, w], (0..b * l * w).map(f).collect())
    }

    #[test]
    fn masked_loss_zero_when_pred_equals_target() {
        let mut g = Graph::new();
        let y = tensor3(1, 4, 2, |i| i as f64 * 0.3);
        let pred = g.constant(y.clone());
        let plan = MaskPlan::new(Layout::OneD { len: 4 }, vec![true, false, true, false]);
        let loss = l2_masked_loss(&mut g, pred, &y, &[plan]).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn masked_loss_single_position_width_one() {
        // one masked position, width 1, pred - y = 2  =>  loss 4
        let mut g = Graph::new();
        let y = Tensor::new(vec![1, 2, 1], vec![0.0, 0.0]);
        let pred = g.constant(Tensor::new(vec![1, 2, 1], vec![5.0, 2.0]));
        let plan = MaskPlan::new(Layout::OneD { len: 2 }, vec![true, false]);
        let loss = l2_masked_loss(&mut g, pred, &y, &[plan]).unwrap();
        assert_eq!(g.value(loss).item(), 4.0);
    }

    #[test]
    fn masked_loss_mean_is_width_invariant() {
        // identical per-dim error: widening the tensor leaves the mean alone
        let mut g = Graph::new();
        for w in [1usize, 4] {
            let y = Tensor::zeros(vec![1, 2, w]);
            let pred = g.constant(Tensor::full(vec![1, 2, w], 2.0));
            let plan = MaskPlan::new(Layout::OneD { len: 2 }, vec![false, false]);
            let loss = l2_masked_loss(&mut g, pred, &y, &[plan]).unwrap();
            assert_eq!(g.value(loss).item(), 4.0, "width {w}");
        }
    }

    #[test]
    fn masked_loss_rejects_all_kept_plan() {
        let mut g = Graph::<f64>::new();
        let y = Tensor::zeros(vec![1, 2, 1]);
        let pred = g.constant(Tensor::zeros(vec![1, 2, 1]));
        let plan = MaskPlan::new(Layout::OneD { len: 2 }, vec![true, true]);
        assert!(l2_masked_loss(&mut g, pred, &y, &[plan]).is_err());
    }

    #[test]
    fn cls_loss_zero_at_exact_match_and_mean_target() {
        let mut g = Graph::new();
        let pooled = Tensor::new(vec![1, 2], vec![0.5, -0.5]);
        let cls = g.constant(pooled.clone());
        let loss = cls_loss(&mut g, cls, &pooled);
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn pixel_targets_match_independent_normalization() {
        let images = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let t = normalized_pixel_targets(&images, 2).unwrap();
        // one patch of [1,2,3,4]: mean 2.5, var 1.25
        let mean = 2.5;
        let var: f64 = 1.25;
        for (i, &got) in t.data().iter().enumerate() {
            let want = ((i + 1) as f64 - mean) / (var + PIXEL_NORM_EPS).sqrt();
            assert!((got - want).abs() < 1e-12);
        }
        // constant patch collapses to (eps-guarded) zeros
        let flat = Tensor::full(vec![1, 1, 2, 2], 3.0);
        let t2 = normalized_pixel_targets(&flat, 2).unwrap();
        assert!(t2.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn flop_report_ratios() {
        let backbone = BackboneConfig {
            depth: 6,
            width: 192,
            heads: 3,
            ffn_mult: 4,
            alibi: AlibiConfig::default(),
        };
        let dec = DecoderConfig::image_default(96);
        let rep = flop_report(&backbone, &dec, true, 64, 0.8, 8);
        // attention-score cost shrinks with (1 - R)^2
        let ratio = rep.student_attn_scores_per_mask / rep.teacher_attn_scores;
        assert!((ratio - 0.04).abs() < 1e-12);
        // R=0, M=1: student backbone == teacher backbone
        let rep0 = flop_report(&backbone, &dec, true, 64, 0.0, 1);
        assert!((rep0.student_backbone_per_mask - rep0.teacher_backbone).abs() < 1e-9);
        // M -> large: teacher share -> 0
        let rep_many = flop_report(&backbone, &dec, true, 64, 0.8, 4096);
        assert!(rep_many.amortized_teacher_share < 0.01);
        assert!(rep_many.amortized_teacher_share < rep.amortized_teacher_share);
    }

    fn tiny_params(m: usize, loss: LossVariant) -> TrainParams {
        TrainParams {
            masks_per_sample: m,
            mask: MaskConfig {
                strategy: MaskStrategy::InverseBlock,
                mask_ratio: 0.5,
                adjust: 0.1,
                block: 4,
                block_side: None,
            },
            loss,
            cls_weight: 0.1,
            pixel_weight: 1.0,
            k_top: 2,
            target_layer_norm: true,
            tau: TauSchedule { tau0: 0.9, tau_end: 0.99, tau_steps: 100 },
            lr: 1e-3,
            warmup_frac: 0.1,
            weight_decay: 0.01,
            total_updates: 50,
            batch_size: 2,
            seed: 7,
        }
    }

    fn tiny_state(loss: LossVariant) -> TrainState<f64> {
        let mut bank = ParamBank::new();
        let mut rng = seeded_rng(51);
        let model = build_model(
            FeatureEncoderConfig::Image { channels: 1, image_size: 8, patch: 2, cls_token: loss.uses_cls() },
            BackboneConfig { depth: 2, width: 8, heads: 2, ffn_mult: 2, alibi: AlibiConfig::default() },
            DecoderConfig { layers: 1, kernel: 3, groups: 2, width: 8, noise_std: 0.02 },
            loss,
            loss.uses_pixels().then_some(4),
            &mut bank,
            &mut rng,
        )
        .unwrap();
        TrainState::new(bank, model, 0.01)
    }

    fn batch_images(seed: u64) -> Tensor<f64> {
        let mut s = seed + 1;
        Tensor::new(
            vec![2, 1, 8, 8],
            (0..128)
                .map(|_| {
                    s ^= s << 13;
                    s ^= s >> 7;
                    s ^= s << 17;
                    ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
                })
                .collect(),
        )
    }

    #[test]
    fn forward_counts_match_contract() {
        for m in [1usize, 4] {
            let mut state = tiny_state(LossVariant::D2v2);
            let params = tiny_params(m, LossVariant::D2v2);
            let images = batch_images(3);
            let raw = RawBatch::Images(&images);
            let metrics = train_step(&mut state, &raw, &params).unwrap();
            assert_eq!(metrics.teacher_fwd, 2);
            assert_eq!(metrics.feat_fwd, 2);
            assert_eq!(metrics.student_fwd, 2 * m as u64);
        }
    }

    #[test]
    fn pixel_only_skips_the_teacher_forward() {
        let mut state = tiny_state(LossVariant::PixelOnly);
        let params = tiny_params(2, LossVariant::PixelOnly);
        let images = batch_images(5);
        let raw = RawBatch::Images(&images);
        let metrics = train_step(&mut state, &raw, &params).unwrap();
        assert_eq!(metrics.teacher_fwd, 0);
        assert_eq!(metrics.flops_teacher, 0);
        assert!(metrics.pixel_loss > 0.0);
        assert_eq!(metrics.main_loss, 0.0);
    }

    #[test]
    fn frozen_system_is_deterministic_across_identical_steps() {
        // tau = 1 freezes the teacher; lr = 0 freezes the student; the same
        // step index replays the same masks and noise
        let mut state = tiny_state(LossVariant::D2v2);
        let mut params = tiny_params(2, LossVariant::D2v2);
        params.lr = 0.0;
        params.tau = TauSchedule { tau0: 1.0, tau_end: 1.0, tau_steps: 1 };
        let images = batch_images(9);
        let raw = RawBatch::Images(&images);
        let m1 = train_step(&mut state, &raw, &params).unwrap();
        state.step = 0; // replay the same step
        let m2 = train_step(&mut state, &raw, &params).unwrap();
        assert_eq!(m1.total_loss, m2.total_loss);
        assert_eq!(m1.main_loss, m2.main_loss);
    }

    #[test]
    fn cls_weight_zero_total_equals_main() {
        let mut state = tiny_state(LossVariant::D2v2Cls);
        let mut params = tiny_params(2, LossVariant::D2v2Cls);
        params.cls_weight = 0.0;
        let images = batch_images(11);
        let raw = RawBatch::Images(&images);
        let metrics = train_step(&mut state, &raw, &params).unwrap();
        assert!(metrics.cls_loss > 0.0, "cls loss still computed");
        assert_eq!(metrics.total_loss, metrics.main_loss);
    }
}
