//! Mask planning: random, block, and inverse block strategies over 1-D
//! sequences and 2-D patch grids, with assimilation so that every plan
//! keeps exactly `floor(L * (1 - R))` positions.
//!
//! Inverse block masking chooses which positions to *keep* in contiguous
//! blocks, guaranteeing unmasked regions the student can build context
//! from. Plain block masking uses the same block mechanics but marks the
//! covered positions masked. `B = 1` inverse block masking degenerates to
//! random masking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{D2v2Error, Result};

/// Position layout of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    OneD { len: usize },
    TwoD { rows: usize, cols: usize },
}

impl Layout {
    pub fn len(&self) -> usize {
        match *self {
            Layout::OneD { len } => len,
            Layout::TwoD { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Grid coordinates of a flat position (row-major for 2-D).
    pub fn coords(&self, pos: usize) -> (usize, usize) {
        match *self {
            Layout::OneD { .. } => (0, pos),
            Layout::TwoD { cols, .. } => (pos / cols, pos % cols),
        }
    }
}

/// Per-sample keep/mask assignment. `true` means the position stays
/// visible to the student.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    layout: Layout,
    kept: Vec<bool>,
}

impl MaskPlan {
    pub fn new(layout: Layout, kept: Vec<bool>) -> Self {
        assert_eq!(layout.len(), kept.len(), "mask plan length");
        MaskPlan { layout, kept }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn kept(&self) -> &[bool] {
        &self.kept
    }

    pub fn kept_count(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&i| self.kept[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&i| !self.kept[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Block,
    InverseBlock,
}

/// Masking hyper-parameters: strategy, mask ratio `R`, start-count adjust
/// `A`, and block size `B` (positions per block; on 2-D grids the block is
/// a square of side `round(sqrt(B))` unless `block_side` overrides it).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskConfig {
    pub strategy: MaskStrategy,
    pub mask_ratio: f64,
    pub adjust: f64,
    pub block: usize,
    pub block_side: Option<usize>,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            strategy: MaskStrategy::InverseBlock,
            mask_ratio: 0.8,
            adjust: 0.1,
            block: 3,
            block_side: None,
        }
    }
}

impl MaskConfig {
    /// Hard validation plus soft warnings (the adjust parameter has a known
    /// good range but other values are legal).
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(D2v2Error::config(format!(
                "mask_ratio must be in [0, 1], got {}",
                self.mask_ratio
            )));
        }
        if self.adjust < 0.0 {
            return Err(D2v2Error::config(format!("adjust must be >= 0, got {}", self.adjust)));
        }
        if self.block < 1 {
            return Err(D2v2Error::config("block size must be >= 1"));
        }
        if let Some(side) = self.block_side {
            if side < 1 {
                return Err(D2v2Error::config("block_side must be >= 1"));
            }
        }
        let mut warnings = Vec::new();
        if self.adjust <= 0.05 || self.adjust >= 0.15 {
            warnings.push(format!(
                "adjust = {} is outside the recommended open range (0.05, 0.15)",
                self.adjust
            ));
        }
        Ok(warnings)
    }

    /// Block side used on 2-D grids.
    pub fn side_2d(&self) -> usize {
        self.block_side
            .unwrap_or_else(|| ((self.block as f64).sqrt().round() as usize).max(1))
    }
}

/// Floor that forgives f64 representation noise just below an integer
/// (e.g. 100 * (1 - 0.8) = 19.999...96 must floor to 20, not 19).
fn stable_floor(x: f64) -> f64 {
    (x + 1e-9 * (1.0 + x.abs())).floor()
}

/// Exact number of positions a finished plan keeps visible.
pub fn target_kept(len: usize, mask_ratio: f64) -> usize {
    stable_floor(len as f64 * (1.0 - mask_ratio)) as usize
}

/// Number of block starting points: `floor(L * ((1 - R) + A) / B)`,
/// clamped to `[0, L]`.
pub fn count_start_points(len: usize, mask_ratio: f64, adjust: f64, block: usize) -> usize {
    let raw = stable_floor(len as f64 * ((1.0 - mask_ratio) + adjust) / block as f64);
    (raw.max(0.0) as usize).min(len)
}

/// Deterministic per-plan seed from the run seed and the plan's position in
/// the training schedule.
pub fn plan_seed(seed: u64, epoch: u64, sample: u64, mask: u64) -> u64 {
    let mut h = seed ^ 0x6d61736b_5f763100; // domain tag
    for v in [epoch, sample, mask] {
        h ^= splitmix64(v.wrapping_add(0x9e3779b97f4a7c15));
        h = splitmix64(h);
    }
    h
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Paint one block around a start position. The window is centered on the
/// start and shifted (not clipped) at layout edges so every block covers
/// the full `B` positions / `side x side` patch square whenever it fits.
fn paint_block(cover: &mut [bool], layout: Layout, start: usize, cfg: &MaskConfig) {
    match layout {
        Layout::OneD { len } => {
            let b = cfg.block.min(len);
            let half = (b - 1) / 2;
            let lo = start.saturating_sub(half).min(len - b);
            for c in cover.iter_mut().skip(lo).take(b) {
                *c = true;
            }
        }
        Layout::TwoD { rows, cols } => {
            let side_r = cfg.side_2d().min(rows);
            let side_c = cfg.side_2d().min(cols);
            let (sr, sc) = layout.coords(start);
            let half_r = (side_r - 1) / 2;
            let half_c = (side_c - 1) / 2;
            let lo_r = sr.saturating_sub(half_r).min(rows - side_r);
            let lo_c = sc.saturating_sub(half_c).min(cols - side_c);
            for r in lo_r..lo_r + side_r {
                for c in lo_c..lo_c + side_c {
                    cover[r * cols + c] = true;
                }
            }
        }
    }
}

/// Sample positions without replacement, uniformly.
fn sample_without_replacement(rng: &mut impl Rng, len: usize, count: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, count.min(len)).into_vec()
}

/// The block-cover stage of `sample_mask`, before assimilation. Exposed so
/// the structural properties of the raw blocks (contiguity, square regions)
/// can be checked directly.
pub fn sample_mask_blocks(cfg: &MaskConfig, layout: Layout, rng: &mut impl Rng) -> Result<MaskPlan> {
    let len = layout.len();
    if len == 0 {
        return Err(D2v2Error::config("cannot mask an empty layout"));
    }
    if let Layout::TwoD { rows, cols } = layout {
        let side = cfg.side_2d();
        if side > rows.min(cols) {
            return Err(D2v2Error::config(format!(
                "block side {side} exceeds grid side {}",
                rows.min(cols)
            )));
        }
    }
    let kept = match cfg.strategy {
        MaskStrategy::Random => {
            let mut kept = vec![false; len];
            for i in sample_without_replacement(rng, len, target_kept(len, cfg.mask_ratio)) {
                kept[i] = true;
            }
            kept
        }
        MaskStrategy::InverseBlock => {
            // blocks mark the positions to KEEP
            let starts = count_start_points(len, cfg.mask_ratio, cfg.adjust, cfg.block);
            let mut cover = vec![false; len];
            for s in sample_without_replacement(rng, len, starts) {
                paint_block(&mut cover, layout, s, cfg);
            }
            cover
        }
        MaskStrategy::Block => {
            // blocks mark the positions to MASK; start count mirrors the
            // inverse formula with the masked share R in place of (1 - R)
            let starts = count_start_points(len, 1.0 - cfg.mask_ratio, cfg.adjust, cfg.block);
            let mut cover = vec![false; len];
            for s in sample_without_replacement(rng, len, starts) {
                paint_block(&mut cover, layout, s, cfg);
            }
            cover.iter().map(|&m| !m).collect()
        }
    };
    Ok(MaskPlan::new(layout, kept))
}

/// Flip uniformly chosen positions (without replacement, only in the
/// deficient or excess direction) until the plan keeps exactly
/// `target_kept` positions.
pub fn assimilate(mut plan: MaskPlan, target_kept: usize, rng: &mut impl Rng) -> MaskPlan {
    let len = plan.kept.len();
    assert!(target_kept <= len, "target kept {target_kept} > layout {len}");
    let kept_now = plan.kept_count();
    if kept_now > target_kept {
        let pool = plan.kept_indices();
        for pi in sample_without_replacement(rng, pool.len(), kept_now - target_kept) {
            plan.kept[pool[pi]] = false;
        }
    } else if kept_now < target_kept {
        let pool = plan.masked_indices();
        for pi in sample_without_replacement(rng, pool.len(), target_kept - kept_now) {
            plan.kept[pool[pi]] = true;
        }
    }
    plan
}

/// Full mask sampling: strategy-specific block cover, then assimilation to
/// exactly `floor(L * (1 - R))` kept positions.
pub fn sample_mask(cfg: &MaskConfig, layout: Layout, rng: &mut impl Rng) -> Result<MaskPlan> {
    let plan = sample_mask_blocks(cfg, layout, rng)?;
    Ok(assimilate(plan, target_kept(layout.len(), cfg.mask_ratio), rng))
}

// ── bit-packed serialization (debug dumps) ──────────────────────────────

const PACK_MAGIC: &[u8; 4] = b"MSKP";

/// Pack plans (all sharing one layout) as bit rows: magic, layout tag and
/// dims, plan count, then one `ceil(L/8)` row of little-endian bits per
/// plan.
pub fn pack_plans(plans: &[MaskPlan]) -> Result<Vec<u8>> {
    let first = plans
        .first()
        .ok_or_else(|| D2v2Error::config("no plans to pack"))?;
    let layout = first.layout;
    let mut out = Vec::new();
    out.extend_from_slice(PACK_MAGIC);
    match layout {
        Layout::OneD { len } => {
            out.push(1u8);
            out.extend_from_slice(&(len as u32).to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
        }
        Layout::TwoD { rows, cols } => {
            out.push(2u8);
            out.extend_from_slice(&(rows as u32).to_le_bytes());
            out.extend_from_slice(&(cols as u32).to_le_bytes());
        }
    }
    out.extend_from_slice(&(plans.len() as u32).to_le_bytes());
    let row_bytes = layout.len().div_ceil(8);
    for plan in plans {
        if plan.layout != layout {
            return Err(D2v2Error::config("pack_plans: mixed layouts"));
        }
        let mut row = vec![0u8; row_bytes];
        for (i, &k) in plan.kept.iter().enumerate() {
            if k {
                row[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    Ok(out)
}

pub fn unpack_plans(bytes: &[u8]) -> Result<Vec<MaskPlan>> {
    let err_at = |off: usize, what: &str| {
        D2v2Error::data(format!("mask dump malformed at byte {off}: {what}"))
    };
    if bytes.len() < 4 || &bytes[..4] != PACK_MAGIC {
        return Err(err_at(0, "bad magic"));
    }
    if bytes.len() < 17 {
        return Err(err_at(bytes.len(), "truncated header"));
    }
    let tag = bytes[4];
    let d0 = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let d1 = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    let layout = match tag {
        1 => Layout::OneD { len: d0 },
        2 => Layout::TwoD { rows: d0, cols: d1 },
        _ => return Err(err_at(4, "unknown layout tag")),
    };
    let row_bytes = layout.len().div_ceil(8);
    let mut plans = Vec::with_capacity(count);
    let mut off = 17;
    for _ in 0..count {
        if off + row_bytes > bytes.len() {
            return Err(err_at(off, "truncated plan row"));
        }
        let row = &bytes[off..off + row_bytes];
        let kept = (0..layout.len()).map(|i| row[i / 8] & (1 << (i % 8)) != 0).collect();
        plans.push(MaskPlan::new(layout, kept));
        off += row_bytes;
    }
    Ok(plans)
}
