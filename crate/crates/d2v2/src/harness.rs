//! Command implementations behind the CLI: the pretraining loop with
//! checkpointing and metrics, linear-probe evaluation of checkpoints,
//! ablation recipe grids, and CSV reporting.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::{Precision, RunConfig};
use crate::data::{epoch_order, Dataset};
use crate::error::{D2v2Error, Result};
use crate::masking::{pack_plans, plan_seed, sample_mask, seeded_rng, MaskPlan};
use crate::model::LossVariant;
use crate::probe::{probe_dataset, ProbeResult};
use crate::tensor::{Dtype, Scalar};
use crate::trainer::{eval_loss, train_step, StepMetrics, TrainState};

const AUG_SALT: u64 = 0x41554731;
const EVAL_SALT: u64 = 0x4556414c;

/// Common CLI switches threaded through every command.
#[derive(Debug, Clone, Default)]
pub struct CliOpts {
    pub seed: Option<u64>,
    /// Serialized, bit-reproducible execution. Compute here is already
    /// sequential and deterministic; the flag additionally pins the run so
    /// future parallel paths stay off.
    pub strict: bool,
    pub subsample_ratio: Option<f64>,
    pub out: Option<PathBuf>,
    /// Stop this invocation after N updates (checkpoint and exit);
    /// `--resume` picks the run back up later.
    pub stop_after: Option<u64>,
}

impl CliOpts {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(dir) = &self.out {
            cfg.out.dir = Some(dir.clone());
        }
    }
}

pub struct PretrainOutput {
    pub checkpoint: PathBuf,
    pub csv: PathBuf,
    pub final_eval_loss: f64,
    pub steps_run: u64,
}

/// Indices for one step's batch: a seeded epoch permutation of the
/// training split, consumed `batch_size` at a time.
fn batch_indices(train_n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = (train_n / batch_size).max(1);
    let epoch = step / per_epoch as u64;
    let slot = (step % per_epoch as u64) as usize;
    let order = epoch_order(train_n, seed, epoch);
    (0..batch_size).map(|i| order[(slot * batch_size + i) % train_n]).collect()
}

/// Split a dataset into training indices and a held-out tail.
fn holdout_split(n: usize, holdout: usize) -> (usize, Vec<usize>) {
    let h = holdout.min(n.saturating_sub(1));
    (n - h, ((n - h)..n).collect())
}

/// The training loop: builds or resumes state, runs `total_updates`,
/// appends one CSV row per step, checkpoints at the configured cadence,
/// and reports the held-out loss at the end.
pub fn cmd_pretrain<E: Scalar>(
    cfg: &RunConfig,
    opts: &CliOpts,
    resume_from: Option<&Path>,
) -> Result<PretrainOutput> {
    let mut dataset = cfg.load_dataset()?;
    if let Some(r) = opts.subsample_ratio {
        dataset.subsample(r, cfg.seed)?;
    }
    let mut state = match resume_from {
        Some(p) => {
            let ckpt = checkpoint::load::<E>(p)?;
            let stored = RunConfig::from_str_validated(&ckpt.config_toml)?;
            if stored.to_toml() != cfg.to_toml() {
                return Err(D2v2Error::config(
                    "resume config differs from the checkpointed config",
                ));
            }
            let mut st = checkpoint::build_state_with_dataset::<E>(cfg, &dataset)?;
            checkpoint::restore_into(&ckpt, &mut st)?;
            st
        }
        None => checkpoint::build_state_with_dataset::<E>(cfg, &dataset)?,
    };

    let out_dir = cfg.out_dir();
    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(resume_from.is_some())
            .write(true)
            .truncate(resume_from.is_none())
            .open(&csv_path)?,
    );
    if resume_from.is_none() {
        writeln!(csv, "{}", StepMetrics::CSV_HEADER)?;
    }

    let params = cfg.train_params();
    let (train_n, holdout_idx) = holdout_split(dataset.len(), cfg.data.holdout);
    if train_n < params.batch_size {
        return Err(D2v2Error::config(format!(
            "training split of {train_n} samples is smaller than batch_size {}",
            params.batch_size
        )));
    }

    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let start_step = state.step;
    let stop_at = opts
        .stop_after
        .map(|n| start_step + n)
        .unwrap_or(params.total_updates)
        .min(params.total_updates);
    while state.step < stop_at {
        let step = state.step;
        let indices = batch_indices(train_n, params.batch_size, cfg.seed, step);
        let augment = cfg.train.augment && matches!(dataset, Dataset::Images { .. });
        let mut aug_rng = seeded_rng(plan_seed(cfg.seed ^ AUG_SALT, step, 0, 0));
        let batch = dataset.batch::<E>(&indices, augment.then_some(&mut aug_rng));
        if cfg.out.dump_masks && step == start_step {
            dump_masks(&out_dir, cfg, &state, step)?;
        }
        let metrics = train_step(&mut state, &batch.raw(), &params)?;
        writeln!(csv, "{}", metrics.csv_row())?;
        if cfg.out.checkpoint_every > 0
            && state.step % cfg.out.checkpoint_every == 0
            && state.step < stop_at
        {
            csv.flush()?;
            checkpoint::save(&ckpt_path, &state, &cfg.to_toml())?;
        }
    }
    csv.flush()?;
    checkpoint::save(&ckpt_path, &state, &cfg.to_toml())?;

    let final_eval_loss = eval_holdout(&state, &dataset, &holdout_idx, cfg)?;
    Ok(PretrainOutput {
        checkpoint: ckpt_path,
        csv: csv_path,
        final_eval_loss,
        steps_run: state.step - start_step,
    })
}

/// Mean masked-prediction loss over the held-out tail, fixed eval masks.
pub fn eval_holdout<E: Scalar>(
    state: &TrainState<E>,
    dataset: &Dataset,
    holdout_idx: &[usize],
    cfg: &RunConfig,
) -> Result<f64> {
    if holdout_idx.is_empty() {
        return Ok(f64::NAN);
    }
    let params = cfg.train_params();
    // eval batches are shaped by the holdout, not the train batch size
    let bsz = 32.min(holdout_idx.len());
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in holdout_idx.chunks(bsz) {
        if chunk.len() < bsz {
            break; // fixed-size eval batches keep mask seeding aligned
        }
        let batch = dataset.batch::<E>(chunk, None);
        total += eval_loss(state, &batch.raw(), &params, cfg.seed ^ EVAL_SALT)?;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

fn dump_masks<E: Scalar>(
    out_dir: &Path,
    cfg: &RunConfig,
    state: &TrainState<E>,
    step: u64,
) -> Result<()> {
    let params = cfg.train_params();
    let layout = match &state.model.encoder.feat_cfg {
        crate::network::FeatureEncoderConfig::Image { image_size, patch, .. } => {
            crate::masking::Layout::TwoD { rows: image_size / patch, cols: image_size / patch }
        }
        crate::network::FeatureEncoderConfig::Text { .. } => {
            crate::masking::Layout::OneD { len: cfg.data.seq_len }
        }
        crate::network::FeatureEncoderConfig::Speech { layers, .. } => crate::masking::Layout::OneD {
            len: crate::network::conv_output_len(cfg.data.samples, layers)?,
        },
    };
    let mut plans: Vec<MaskPlan> = Vec::new();
    for b in 0..params.batch_size {
        for m in 0..params.masks_per_sample {
            plans.push(sample_mask(
                &params.mask,
                layout,
                &mut seeded_rng(plan_seed(params.seed, step, b as u64, m as u64)),
            )?);
        }
    }
    let bytes = pack_plans(&plans)?;
    std::fs::write(out_dir.join(format!("masks_step{step}.bin")), bytes)?;
    Ok(())
}

/// Probe a checkpoint against a labeled dataset described by `data_cfg`.
/// The model architecture comes from the checkpoint's own config snapshot.
pub fn cmd_probe<E: Scalar>(
    ckpt_path: &Path,
    data_cfg: &RunConfig,
    seed: u64,
) -> Result<ProbeResult> {
    let ckpt = checkpoint::load::<E>(ckpt_path)?;
    let stored = RunConfig::from_str_validated(&ckpt.config_toml)?;
    if stored.modality != data_cfg.modality {
        return Err(D2v2Error::config(format!(
            "checkpoint modality {:?} does not match dataset modality {:?}",
            stored.modality, data_cfg.modality
        )));
    }
    let dataset = data_cfg.load_dataset()?;
    if dataset.labels().is_none() {
        return Err(D2v2Error::data("probe needs a labeled dataset"));
    }
    let mut state = checkpoint::build_state_with_dataset::<E>(&stored, &dataset)?;
    checkpoint::restore_into(&ckpt, &mut state)?;
    probe_dataset(&state.bank, &state.model, &dataset, data_cfg.data.holdout, seed)
}

/// Resolve the element type for a command from the config, then run it.
pub fn with_precision<R>(
    precision: Precision,
    f32_run: impl FnOnce() -> Result<R>,
    f64_run: impl FnOnce() -> Result<R>,
) -> Result<R> {
    match precision {
        Precision::F32 => f32_run(),
        Precision::F64 => f64_run(),
    }
}

pub fn precision_of_checkpoint(path: &Path) -> Result<Precision> {
    Ok(match checkpoint::peek_dtype(path)? {
        Dtype::F32 => Precision::F32,
        Dtype::F64 => Precision::F64,
    })
}

// ── ablation recipes ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    Multimask,
    Masking,
    Losses,
    Alibi,
}

impl Recipe {
    pub fn parse(s: &str) -> Result<Recipe> {
        match s {
            "multimask" => Ok(Recipe::Multimask),
            "masking" => Ok(Recipe::Masking),
            "losses" => Ok(Recipe::Losses),
            "alibi" => Ok(Recipe::Alibi),
            other => Err(D2v2Error::config(format!(
                "unknown recipe {other:?}; available: multimask, masking, losses, alibi"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub cell: String,
    pub final_train_loss: f64,
    pub eval_loss: f64,
    pub probe_accuracy: f64,
    pub wall_s: f64,
}

/// Build the config grid for a recipe from a base config.
pub fn recipe_cells(recipe: Recipe, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut cells = Vec::new();
    match recipe {
        Recipe::Multimask => {
            for &bsz in &[8usize, 32] {
                for &m in &[1usize, 4, 16] {
                    let mut c = base.clone();
                    c.train.batch_size = bsz;
                    c.train.masks_per_sample = m;
                    cells.push((format!("bsz={bsz} M={m}"), c));
                }
            }
        }
        Recipe::Masking => {
            for &b in &[1usize, 3, 5] {
                let mut c = base.clone();
                c.masking.strategy = crate::masking::MaskStrategy::InverseBlock;
                c.masking.block = b;
                cells.push((format!("inverse_block B={b}"), c));
            }
            let mut blk = base.clone();
            blk.masking.strategy = crate::masking::MaskStrategy::Block;
            blk.masking.block = 3;
            cells.push(("block B=3".to_string(), blk));
            let mut rnd = base.clone();
            rnd.masking.strategy = crate::masking::MaskStrategy::Random;
            rnd.masking.block = 1;
            cells.push(("random".to_string(), rnd));
        }
        Recipe::Losses => {
            for loss in [LossVariant::D2v2, LossVariant::D2v2Cls, LossVariant::D2v2Pixel, LossVariant::PixelOnly] {
                let mut c = base.clone();
                c.train.loss = loss;
                cells.push((format!("{loss}"), c));
            }
        }
        Recipe::Alibi => {
            let mut off = base.clone();
            off.model.alibi = Some(false);
            cells.push(("alibi=off".to_string(), off));
            let mut frozen = base.clone();
            frozen.model.alibi = Some(true);
            frozen.model.alibi_learned_scalars = false;
            cells.push(("alibi=on scalars=frozen".to_string(), frozen));
            let mut learned = base.clone();
            learned.model.alibi = Some(true);
            learned.model.alibi_learned_scalars = true;
            cells.push(("alibi=on scalars=learned".to_string(), learned));
        }
    }
    cells
}

/// Run every cell of a recipe: short pretraining, held-out eval loss, and
/// a linear probe when labels exist.
pub fn cmd_ablate<E: Scalar>(recipe: Recipe, base: &RunConfig, opts: &CliOpts) -> Result<Vec<AblationRow>> {
    let out_root = base.out_dir();
    let mut rows = Vec::new();
    for (name, mut cfg) in recipe_cells(recipe, base) {
        let t0 = std::time::Instant::now();
        cfg.out.dir = Some(out_root.join(name.replace([' ', '='], "_")));
        cfg.validate()?;
        let run = cmd_pretrain::<E>(&cfg, &CliOpts { out: cfg.out.dir.clone(), ..opts.clone() }, None)?;
        let train_loss = tail_mean_total_loss(&run.csv, 20)?;
        let probe_acc = {
            let dataset = cfg.load_dataset()?;
            if dataset.labels().is_some() {
                cmd_probe::<E>(&run.checkpoint, &cfg, cfg.seed)?.accuracy
            } else {
                f64::NAN
            }
        };
        rows.push(AblationRow {
            cell: name,
            final_train_loss: train_loss,
            eval_loss: run.final_eval_loss,
            probe_accuracy: probe_acc,
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(path: &Path, recipe: Recipe, rows: &[AblationRow]) -> Result<()> {
    let mut out = String::from("cell,final_train_loss,eval_loss,probe_accuracy,wall_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.cell, r.final_train_loss, r.eval_loss, r.probe_accuracy, r.wall_s
        ));
    }
    std::fs::write(path, out)?;
    let _ = recipe;
    Ok(())
}

pub fn format_ablation_table(recipe: Recipe, rows: &[AblationRow]) -> String {
    let mut s = format!("ablation: {recipe:?}\n");
    s.push_str(&format!(
        "{:<28} {:>16} {:>12} {:>12} {:>9}\n",
        "cell", "final_train_loss", "eval_loss", "probe_acc", "wall_s"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:>16.5} {:>12.5} {:>12.4} {:>9.1}\n",
            r.cell, r.final_train_loss, r.eval_loss, r.probe_accuracy, r.wall_s
        ));
    }
    s
}

// ── metrics CSV reading and reporting ───────────────────────────────────

pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| D2v2Error::data(format!("metrics csv has no column {name}")))?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| D2v2Error::data("empty metrics csv"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| D2v2Error::data(format!("{}: row {}: {e}", path.display(), i + 2)))?;
        if row.len() != header.len() {
            return Err(D2v2Error::data(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                i + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(MetricsTable { header, rows })
}

/// Mean of total_loss over the last `n` rows.
pub fn tail_mean_total_loss(path: &Path, n: usize) -> Result<f64> {
    let table = read_metrics_csv(path)?;
    let col = table.column("total_loss")?;
    let tail = &col[col.len().saturating_sub(n)..];
    Ok(tail.iter().sum::<f64>() / tail.len().max(1) as f64)
}

/// Plain-text summary plus an SVG of the loss curve, derived only from the
/// CSV.
pub fn cmd_report(csv_path: &Path, out_dir: &Path) -> Result<String> {
    let table = read_metrics_csv(csv_path)?;
    if table.rows.is_empty() {
        return Err(D2v2Error::data("metrics csv has no rows"));
    }
    let loss = table.column("total_loss")?;
    let steps = table.column("step")?;
    let wall = table.column("wall_ms")?;
    let teacher = table.column("flops_teacher")?;
    let student = table.column("flops_student_backbone")?;
    let dec = table.column("flops_decoder")?;
    let smooth = |v: &[f64], n: usize| -> f64 {
        let t = &v[v.len().saturating_sub(n)..];
        t.iter().sum::<f64>() / t.len() as f64
    };
    let total_flops: f64 = teacher.iter().sum::<f64>() + student.iter().sum::<f64>() + dec.iter().sum::<f64>();
    let teacher_share = teacher.iter().sum::<f64>() / total_flops.max(1.0);
    let mut summary = String::new();
    summary.push_str(&format!("steps: {}\n", table.rows.len()));
    summary.push_str(&format!("first-20 mean total_loss: {:.6}\n", {
        let head = &loss[..loss.len().min(20)];
        head.iter().sum::<f64>() / head.len() as f64
    }));
    summary.push_str(&format!("last-20 mean total_loss:  {:.6}\n", smooth(&loss, 20)));
    summary.push_str(&format!("mean wall per step: {:.1} ms\n", wall.iter().sum::<f64>() / wall.len() as f64));
    summary.push_str(&format!("forward FLOPs total: {:.3e}\n", total_flops));
    summary.push_str(&format!("teacher share of forward FLOPs: {:.3}\n", teacher_share));

    std::fs::create_dir_all(out_dir)?;
    let svg_path = out_dir.join("loss_curve.svg");
    std::fs::write(&svg_path, loss_curve_svg(&steps, &loss))?;
    summary.push_str(&format!("loss curve: {}\n", svg_path.display()));
    Ok(summary)
}

fn loss_curve_svg(steps: &[f64], loss: &[f64]) -> String {
    let (w, h, margin) = (720.0, 360.0, 40.0);
    let xmax = steps.last().copied().unwrap_or(1.0).max(1.0);
    let (lo, hi) = loss.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = (hi - lo).max(1e-9);
    let pts: Vec<String> = steps
        .iter()
        .zip(loss.iter())
        .map(|(&x, &y)| {
            let px = margin + (x / xmax) * (w - 2.0 * margin);
            let py = h - margin - ((y - lo) / span) * (h - 2.0 * margin);
            format!("{px:.1},{py:.1}")
        })
        .collect();
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<polyline fill=\"none\" stroke=\"#2a6fdb\" stroke-width=\"1.5\" points=\"{pts}\"/>\n",
            "<text x=\"{tx}\" y=\"{ty}\" font-size=\"12\" fill=\"#333\">total loss vs step (min {lo:.4}, max {hi:.4})</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        pts = pts.join(" "),
        tx = margin,
        ty = margin - 12.0,
        lo = lo,
        hi = hi,
    )
}
