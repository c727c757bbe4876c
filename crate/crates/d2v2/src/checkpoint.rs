//! Versioned binary checkpoints: student weights, teacher weights under a
//! `teacher.` prefix, optimizer moments, the config snapshot, and the step
//! counter. Tensors are written in a fixed order so load followed by save
//! reproduces the file byte for byte.

use std::path::Path;

use crate::error::{D2v2Error, Result};
use crate::network::ParamBank;
use crate::optim::AdamW;
use crate::teacher::TeacherState;
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::trainer::TrainState;

const MAGIC: &[u8; 8] = b"D2V2CKPT";
const VERSION: u32 = 1;

pub struct Checkpoint<E: Scalar> {
    pub step: u64,
    pub adam_t: u64,
    pub config_toml: String,
    pub tensors: Vec<(String, Tensor<E>)>,
}

fn push_tensor<E: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<E>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Serialize the full training state.
pub fn save<E: Scalar>(path: &Path, state: &TrainState<E>, config_toml: &str) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor<E>)> = Vec::new();
    for (name, t) in state.bank.iter() {
        tensors.push((name.to_string(), t));
    }
    for (name, t) in state.teacher.bank.iter() {
        tensors.push((format!("teacher.{name}"), t));
    }
    for (name, t) in state.opt.state_tensors() {
        tensors.push((format!("opt.{name}"), t));
    }

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(E::DTYPE.code());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&state.opt.steps_taken().to_le_bytes());
    out.extend_from_slice(&(config_toml.len() as u32).to_le_bytes());
    out.extend_from_slice(config_toml.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        push_tensor(&mut out, &name, t);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Raw dtype tag without deserializing the payload.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = std::fs::read(path)
        .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 13 || &bytes[..8] != MAGIC {
        return Err(D2v2Error::data(format!("{}: not a checkpoint", path.display())));
    }
    Dtype::from_code(bytes[12])
        .ok_or_else(|| D2v2Error::data(format!("{}: unknown dtype tag", path.display())))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn fail(&self, what: &str) -> D2v2Error {
        D2v2Error::data(format!("{}: malformed at byte {}: {what}", self.path, self.off))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(self.fail("truncated"));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load<E: Scalar>(path: &Path) -> Result<Checkpoint<E>> {
    let bytes = std::fs::read(path)
        .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut cur = Cursor { bytes: &bytes, off: 0, path: path.display().to_string() };
    if cur.take(8)? != MAGIC {
        cur.off = 0;
        return Err(cur.fail("bad magic"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(D2v2Error::data(format!(
            "{}: checkpoint version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let dtype_code = cur.take(1)?[0];
    let dtype = Dtype::from_code(dtype_code).ok_or_else(|| cur.fail("unknown dtype"))?;
    if dtype != E::DTYPE {
        return Err(D2v2Error::data(format!(
            "{}: checkpoint dtype {dtype:?} does not match requested {:?}",
            path.display(),
            E::DTYPE
        )));
    }
    let step = cur.u64()?;
    let adam_t = cur.u64()?;
    let cfg_len = cur.u32()? as usize;
    let config_toml =
        String::from_utf8(cur.take(cfg_len)?.to_vec()).map_err(|_| cur.fail("config is not utf-8"))?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| cur.fail("tensor name is not utf-8"))?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * E::BYTES)?;
        let data: Vec<E> = raw.chunks_exact(E::BYTES).map(E::read_le).collect();
        tensors.push((name, Tensor::new(shape, data)));
    }
    if cur.off != bytes.len() {
        return Err(cur.fail("trailing bytes"));
    }
    Ok(Checkpoint { step, adam_t, config_toml, tensors })
}

/// Restore a training state built from the same config. Fails loudly on
/// any name or shape mismatch.
pub fn restore_into<E: Scalar>(ckpt: &Checkpoint<E>, state: &mut TrainState<E>) -> Result<()> {
    let mut student: Vec<(&str, &Tensor<E>)> = Vec::new();
    let mut teacher: Vec<(&str, &Tensor<E>)> = Vec::new();
    let mut m: Vec<&Tensor<E>> = Vec::new();
    let mut v: Vec<&Tensor<E>> = Vec::new();
    for (name, t) in &ckpt.tensors {
        if let Some(rest) = name.strip_prefix("teacher.") {
            teacher.push((rest, t));
        } else if name.strip_prefix("opt.m.").is_some() {
            m.push(t);
        } else if name.strip_prefix("opt.v.").is_some() {
            v.push(t);
        } else {
            student.push((name, t));
        }
    }

    restore_bank(&mut state.bank, &student, "student")?;
    restore_bank(&mut state.teacher.bank, &teacher, "teacher")?;
    if m.len() != state.bank.len() || v.len() != state.bank.len() {
        return Err(D2v2Error::data(format!(
            "optimizer state has {}+{} tensors for {} parameters",
            m.len(),
            v.len(),
            state.bank.len()
        )));
    }
    state
        .opt
        .restore(m.into_iter().cloned().collect(), v.into_iter().cloned().collect(), ckpt.adam_t);
    state.step = ckpt.step;
    Ok(())
}

fn restore_bank<E: Scalar>(
    bank: &mut ParamBank<E>,
    stored: &[(&str, &Tensor<E>)],
    what: &str,
) -> Result<()> {
    let want: Vec<&str> = bank.iter().map(|(n, _)| n).collect();
    let got: Vec<&str> = stored.iter().map(|(n, _)| *n).collect();
    if want != got {
        let missing: Vec<&&str> = want.iter().filter(|n| !got.contains(n)).collect();
        let extra: Vec<&&str> = got.iter().filter(|n| !want.contains(n)).collect();
        return Err(D2v2Error::data(format!(
            "{what} parameters do not match the model architecture; missing: {missing:?}, unexpected: {extra:?}"
        )));
    }
    for ((name, dst), (_, src)) in bank.iter_mut().zip(stored.iter()) {
        if dst.shape() != src.shape() {
            return Err(D2v2Error::data(format!(
                "{what} parameter {name}: shape {:?} in checkpoint, {:?} in model",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = (*src).clone();
    }
    Ok(())
}

/// Full training state restored from the checkpointed config.
pub fn resume<E: Scalar>(path: &Path) -> Result<(TrainState<E>, crate::config::RunConfig)> {
    let ckpt = load::<E>(path)?;
    let cfg = crate::config::RunConfig::from_str_validated(&ckpt.config_toml)?;
    let mut state = build_state_from_config::<E>(&cfg)?;
    restore_into(&ckpt, &mut state)?;
    Ok((state, cfg))
}

/// Fresh state (seeded initialization) for a config.
pub fn build_state_from_config<E: Scalar>(cfg: &crate::config::RunConfig) -> Result<TrainState<E>> {
    let dataset = cfg.load_dataset()?;
    build_state_with_dataset(cfg, &dataset)
}

pub fn build_state_with_dataset<E: Scalar>(
    cfg: &crate::config::RunConfig,
    dataset: &crate::data::Dataset,
) -> Result<TrainState<E>> {
    let mut bank = ParamBank::new();
    let mut rng = crate::masking::seeded_rng(cfg.seed ^ 0x1217);
    let model = crate::model::build_model(
        cfg.feature_encoder_config(dataset)?,
        cfg.backbone_config(),
        cfg.decoder_config(),
        cfg.train.loss,
        cfg.pixel_dim(),
        &mut bank,
        &mut rng,
    )?;
    let teacher = TeacherState::init(&bank);
    let opt = AdamW::new(&bank, cfg.train.weight_decay);
    Ok(TrainState { bank, model, teacher, opt, step: 0 })
}
