//! EMA teacher and contextualized target construction.
//!
//! The teacher is a name-matched copy of the student's encoder weights
//! (feature encoder + backbone; the decoder has no teacher twin). Each
//! update moves it by `teacher <- tau * teacher + (1 - tau) * student`,
//! with tau on a linear-then-constant schedule. Targets come from the
//! teacher's top-K block outputs on the full, unmasked sample:
//! instance-normalized over positions, averaged, optionally
//! layer-normalized, and detached.

use serde::{Deserialize, Serialize};

use crate::error::{D2v2Error, Result};
use crate::graph::Graph;
use crate::masking::MaskPlan;
use crate::network::{
    conv_feature_encoder, encode, is_encoder_param, masked_relative_conv, patch_embed, token_embed,
    EncoderModel, FeatureEncoderConfig, ParamBank, TokenBatch,
};
use crate::tensor::{Scalar, Tensor};

pub const TARGET_NORM_EPS: f64 = 1e-5;

/// Linear-then-constant EMA decay schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauSchedule {
    pub tau0: f64,
    pub tau_end: f64,
    pub tau_steps: u64,
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau0) || !(0.0..=1.0).contains(&self.tau_end) {
            return Err(D2v2Error::config("tau values must be in [0, 1]"));
        }
        if self.tau0 > self.tau_end {
            return Err(D2v2Error::config("tau0 must be <= tau_end"));
        }
        if self.tau_steps == 0 {
            return Err(D2v2Error::config("tau_steps must be positive"));
        }
        Ok(())
    }
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule { tau0: 0.999, tau_end: 0.9999, tau_steps: 10_000 }
    }
}

/// `tau0 + (tau_end - tau0) * min(step / tau_steps, 1)`.
pub fn tau_at(s: &TauSchedule, step: u64) -> f64 {
    let frac = (step as f64 / s.tau_steps as f64).min(1.0);
    s.tau0 + (s.tau_end - s.tau0) * frac
}

/// EMA copy of the student encoder weights. Never receives gradient: it is
/// only ever bound into graphs as constants.
#[derive(Clone)]
pub struct TeacherState<E: Scalar> {
    pub bank: ParamBank<E>,
}

impl<E: Scalar> TeacherState<E> {
    /// Snapshot the student's encoder parameters (decoder excluded). The
    /// encoder parameters come first in the build order, so the pid layout
    /// matches the student's and the same `EncoderModel` handles work on
    /// both banks.
    pub fn init(student: &ParamBank<E>) -> Self {
        let mut bank = ParamBank::new();
        for (name, t) in student.iter() {
            if is_encoder_param(name) {
                bank.add(name, t.clone());
            }
        }
        TeacherState { bank }
    }
}

/// `teacher <- tau * teacher + (1 - tau) * student`, elementwise over
/// name-matched tensors. A name-set mismatch is a structural error listing
/// the difference.
pub fn ema_update<E: Scalar>(
    teacher: &mut TeacherState<E>,
    student: &ParamBank<E>,
    tau: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(D2v2Error::config(format!("tau {tau} outside [0, 1]")));
    }
    let student_names: Vec<&str> = student
        .iter()
        .map(|(n, _)| n)
        .filter(|n| is_encoder_param(n))
        .collect();
    let teacher_names: Vec<&str> = teacher.bank.iter().map(|(n, _)| n).collect();
    if student_names != teacher_names {
        let missing: Vec<&&str> = student_names.iter().filter(|n| !teacher_names.contains(n)).collect();
        let extra: Vec<&&str> = teacher_names.iter().filter(|n| !student_names.contains(n)).collect();
        return Err(D2v2Error::config(format!(
            "teacher/student name sets differ; student-only: {missing:?}, teacher-only: {extra:?}"
        )));
    }
    let t = E::from_f64(tau);
    let one_minus = E::from_f64(1.0 - tau);
    for (name, dst) in teacher.bank.iter_mut() {
        let src = student.by_name(name).expect("checked above");
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
            *d = *d * t + s * one_minus;
        }
    }
    Ok(())
}

/// Per-position regression targets from the teacher, `[batch, L, width]`.
pub struct TargetBatch<E: Scalar> {
    pub y: Tensor<E>,
    pub k: usize,
    pub layer_normed: bool,
    /// Forward FLOPs spent by the teacher building these targets.
    pub flops: u64,
    /// Attention-score share of those FLOPs.
    pub score_flops: u64,
}

impl<E: Scalar> TargetBatch<E> {
    /// Mean target over all positions, `[batch, width]` (CLS loss target).
    pub fn pooled(&self) -> Tensor<E> {
        let s = self.y.shape();
        let (b, l, w) = (s[0], s[1], s[2]);
        let mut out = vec![E::zero(); b * w];
        let inv = E::from_f64(1.0 / l as f64);
        for bi in 0..b {
            for t in 0..l {
                let row = &self.y.data()[(bi * l + t) * w..(bi * l + t + 1) * w];
                for (o, &v) in out[bi * w..(bi + 1) * w].iter_mut().zip(row.iter()) {
                    *o += v;
                }
            }
            for o in out[bi * w..(bi + 1) * w].iter_mut() {
                *o = *o * inv;
            }
        }
        Tensor::new(vec![b, w], out)
    }
}

/// Raw input batch for one modality.
pub enum RawBatch<'a, E: Scalar> {
    Images(&'a Tensor<E>),
    Waves(&'a Tensor<E>),
    TokenIds(&'a [Vec<usize>]),
}

/// Run a bank's feature encoder over raw input (full, unmasked sample).
pub fn embed_full<E: Scalar>(
    g: &mut Graph<E>,
    bound: &crate::network::BoundParams,
    model: &EncoderModel,
    raw: &RawBatch<'_, E>,
) -> Result<TokenBatch> {
    match raw {
        RawBatch::Images(images) => patch_embed(g, bound, model, images),
        RawBatch::Waves(waves) => conv_feature_encoder(g, bound, model, waves),
        RawBatch::TokenIds(ids) => token_embed(g, bound, model, ids),
    }
}

/// Build contextualized targets: teacher-encode the full sample with a
/// trace, instance-normalize each of the last K block outputs over
/// positions, average them, optionally layer-normalize the average, and
/// detach.
pub fn build_targets<E: Scalar>(
    teacher: &TeacherState<E>,
    model: &EncoderModel,
    raw: &RawBatch<'_, E>,
    k: usize,
    layer_norm_targets: bool,
) -> Result<TargetBatch<E>> {
    let depth = model.blocks.len();
    if k == 0 || k > depth {
        return Err(D2v2Error::config(format!(
            "top-K average needs 1 <= K <= depth, got K={k} depth={depth}"
        )));
    }
    let mut g: Graph<E> = Graph::new();
    let bound = teacher.bank.bind(&mut g, false);
    let mut batch = embed_full(&mut g, &bound, model, raw)?;
    if matches!(model.feat_cfg, FeatureEncoderConfig::Speech { .. }) {
        let all_kept: Vec<MaskPlan> = (0..batch.batch_size())
            .map(|_| MaskPlan::new(batch.layout, vec![true; batch.layout.len()]))
            .collect();
        batch = masked_relative_conv(&mut g, &bound, model, &batch, &all_kept)?;
    }
    let trace = encode(&mut g, &bound, model, &batch, true)?;

    let (b, l, w) = {
        let s = g.shape(trace.output);
        (s[0], s[1], s[2])
    };
    // instance-normalize each tapped layer over positions, then average
    let mut avg = None;
    for var in trace.ffn_outputs.iter().skip(depth - k) {
        let cf = g.permute(*var, &[0, 2, 1]);
        let normed = g.instance_norm(cf, TARGET_NORM_EPS)?;
        let back = g.permute(normed, &[0, 2, 1]);
        avg = Some(match avg {
            None => back,
            Some(acc) => g.add(acc, back),
        });
    }
    let mut y = g.scale(avg.expect("k >= 1"), 1.0 / k as f64);
    if layer_norm_targets {
        let ones = g.constant(Tensor::full(vec![w], E::one()));
        let zeros = g.constant(Tensor::zeros(vec![w]));
        y = g.layer_norm(y, ones, zeros, TARGET_NORM_EPS);
    }
    g.check_finite(y, "teacher targets")?;
    assert!(!g.requires_grad(y), "teacher targets must be detached");
    let _ = (b, l);
    Ok(TargetBatch {
        y: g.value(y).clone(),
        k,
        layer_normed: layer_norm_targets,
        flops: g.flops(),
        score_flops: trace.score_flops,
    })
}
