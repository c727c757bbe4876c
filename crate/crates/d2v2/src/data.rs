//! Dataset ingestion: built-in synthetic generators for all three
//! modalities, plus the flat binary image format, raw PCM speech files, and
//! vocabulary-based text files. Batches convert to tensors on demand.
//!
//! The synthetic image task is deliberately shape-only: ten glyphs with
//! identical on-pixel counts, rendered at random scale, position, and
//! colors, under pixel noise and distractor clutter. Global color/intensity
//! statistics carry no class signal, so mean-pooled features of an
//! untrained encoder sit at chance and the probe gap measures learned
//! structure.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{D2v2Error, Result};
use crate::masking::seeded_rng;
use crate::teacher::RawBatch;
use crate::tensor::{Scalar, Tensor};

pub const IMAGE_MAGIC: &[u8; 4] = b"IMB1";

/// In-memory dataset; raw storage stays in the source precision and
/// batches convert to the training element type.
#[derive(Debug)]
pub enum Dataset {
    Images {
        /// `[n, c, h, w]` row-major bytes.
        data: Vec<u8>,
        labels: Option<Vec<usize>>,
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        classes: usize,
    },
    Waves {
        /// `[n, samples]` 16-bit PCM.
        data: Vec<i16>,
        labels: Option<Vec<usize>>,
        n: usize,
        samples: usize,
        classes: usize,
    },
    Text {
        ids: Vec<Vec<usize>>,
        labels: Option<Vec<usize>>,
        vocab: usize,
        classes: usize,
    },
}

/// One batch of raw inputs, owned.
pub enum BatchData<E: Scalar> {
    Images(Tensor<E>),
    Waves(Tensor<E>),
    Ids(Vec<Vec<usize>>),
}

impl<E: Scalar> BatchData<E> {
    pub fn raw(&self) -> RawBatch<'_, E> {
        match self {
            BatchData::Images(t) => RawBatch::Images(t),
            BatchData::Waves(t) => RawBatch::Waves(t),
            BatchData::Ids(ids) => RawBatch::TokenIds(ids),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Images { n, .. } => *n,
            Dataset::Waves { n, .. } => *n,
            Dataset::Text { ids, .. } => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        match self {
            Dataset::Images { classes, .. } => *classes,
            Dataset::Waves { classes, .. } => *classes,
            Dataset::Text { classes, .. } => *classes,
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Dataset::Images { labels, .. } => labels.as_deref(),
            Dataset::Waves { labels, .. } => labels.as_deref(),
            Dataset::Text { labels, .. } => labels.as_deref(),
        }
    }

    /// Keep the first `floor(n * ratio)` samples of a seeded permutation.
    pub fn subsample(&mut self, ratio: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(D2v2Error::config(format!("subsample ratio {ratio} outside [0, 1]")));
        }
        let n = self.len();
        let keep = ((n as f64 * ratio).floor() as usize).max(1);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeded_rng(seed ^ 0x50BB5A17u64);
        shuffle(&mut order, &mut rng);
        order.truncate(keep);
        order.sort_unstable();
        self.retain_indices(&order);
        Ok(())
    }

    fn retain_indices(&mut self, idx: &[usize]) {
        match self {
            Dataset::Images { data, labels, n, c, h, w, .. } => {
                let stride = *c * *h * *w;
                let mut nd = Vec::with_capacity(idx.len() * stride);
                for &i in idx {
                    nd.extend_from_slice(&data[i * stride..(i + 1) * stride]);
                }
                *data = nd;
                if let Some(l) = labels {
                    *l = idx.iter().map(|&i| l[i]).collect();
                }
                *n = idx.len();
            }
            Dataset::Waves { data, labels, n, samples, .. } => {
                let stride = *samples;
                let mut nd = Vec::with_capacity(idx.len() * stride);
                for &i in idx {
                    nd.extend_from_slice(&data[i * stride..(i + 1) * stride]);
                }
                *data = nd;
                if let Some(l) = labels {
                    *l = idx.iter().map(|&i| l[i]).collect();
                }
                *n = idx.len();
            }
            Dataset::Text { ids, labels, .. } => {
                *ids = idx.iter().map(|&i| ids[i].clone()).collect();
                if let Some(l) = labels {
                    *l = idx.iter().map(|&i| l[i]).collect();
                }
            }
        }
    }

    /// Assemble a batch. For images, `augment_rng` enables the
    /// pad-crop-flip augmentation (one draw per sample; the same augmented
    /// view feeds teacher and student downstream).
    pub fn batch<E: Scalar>(&self, indices: &[usize], mut augment_rng: Option<&mut ChaCha8Rng>) -> BatchData<E> {
        match self {
            Dataset::Images { data, c, h, w, .. } => {
                let stride = c * h * w;
                let mut out = Vec::with_capacity(indices.len() * stride);
                for &i in indices {
                    let mut img = data[i * stride..(i + 1) * stride].to_vec();
                    if let Some(rng) = augment_rng.as_deref_mut() {
                        img = augment_image(&img, *c, *h, *w, rng);
                    }
                    out.extend(img.iter().map(|&v| E::from_f64(v as f64 / 127.5 - 1.0)));
                }
                BatchData::Images(Tensor::new(vec![indices.len(), *c, *h, *w], out))
            }
            Dataset::Waves { data, samples, .. } => {
                let mut out = Vec::with_capacity(indices.len() * samples);
                for &i in indices {
                    out.extend(
                        data[i * samples..(i + 1) * samples]
                            .iter()
                            .map(|&v| E::from_f64(v as f64 / 32768.0)),
                    );
                }
                BatchData::Waves(Tensor::new(vec![indices.len(), *samples], out))
            }
            Dataset::Text { ids, .. } => {
                BatchData::Ids(indices.iter().map(|&i| ids[i].clone()).collect())
            }
        }
    }

    /// Natural sample length for layout computation (image side, wave
    /// samples, or token count).
    pub fn sample_len(&self) -> usize {
        match self {
            Dataset::Images { h, .. } => *h,
            Dataset::Waves { samples, .. } => *samples,
            Dataset::Text { ids, .. } => ids.first().map(|r| r.len()).unwrap_or(0),
        }
    }
}

/// Fisher-Yates with our seeded rng.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Deterministic epoch ordering of the dataset.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed ^ 0x0E90C4u64 ^ epoch.wrapping_mul(0x9e3779b97f4a7c15));
    shuffle(&mut order, &mut rng);
    order
}

// ── synthetic images ────────────────────────────────────────────────────

/// Ten 5x5 glyphs, each with exactly 10 on-cells so class is uncorrelated
/// with global intensity.
pub const GLYPHS: [[u8; 25]; 10] = [
    // thick top bar
    [1,1,1,1,1, 1,1,1,1,1, 0,0,0,0,0, 0,0,0,0,0, 0,0,0,0,0],
    // thick left bar
    [1,1,0,0,0, 1,1,0,0,0, 1,1,0,0,0, 1,1,0,0,0, 1,1,0,0,0],
    // diagonal band
    [1,1,0,0,0, 0,1,1,0,0, 0,0,1,1,0, 0,0,0,1,1, 1,0,0,0,1],
    // anti-diagonal band
    [0,0,0,1,1, 0,0,1,1,0, 0,1,1,0,0, 1,1,0,0,0, 1,0,0,0,1],
    // tall ring
    [0,1,1,1,0, 0,1,0,1,0, 0,1,0,1,0, 0,1,1,1,0, 0,0,0,0,0],
    // arrow up
    [0,0,1,0,0, 0,1,1,1,0, 1,1,1,1,1, 0,0,1,0,0, 0,0,0,0,0],
    // L with thick corner
    [1,0,0,0,0, 1,0,0,0,0, 1,0,0,0,0, 1,1,0,0,0, 1,1,1,1,1],
    // X (doubled center)
    [1,0,0,0,1, 0,1,0,1,0, 0,1,1,0,0, 0,1,0,1,0, 1,0,0,0,1],
    // dot grid
    [1,0,1,0,1, 0,0,1,0,0, 1,0,1,0,1, 0,0,0,0,0, 1,0,1,0,1],
    // wide ring
    [0,0,0,0,0, 0,1,1,1,1, 0,1,0,0,1, 0,1,1,1,1, 0,0,0,0,0],
];

#[derive(Debug, Clone)]
pub struct SyntheticImageSpec {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    /// Gaussian pixel noise std in 0-255 units.
    pub noise: f64,
    /// Random distractor dots per image.
    pub clutter: usize,
    pub seed: u64,
}

impl Default for SyntheticImageSpec {
    fn default() -> Self {
        SyntheticImageSpec { n: 1024, size: 32, classes: 10, noise: 10.0, clutter: 6, seed: 0 }
    }
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

/// Render one glyph sample into an RGB buffer.
fn render_glyph(img: &mut [u8], size: usize, glyph: &[u8; 25], rng: &mut ChaCha8Rng, noise: f64, clutter: usize) {
    let channels = 3usize;
    // colors with enough luma contrast, both drawn from the same range
    let (bg, fg) = loop {
        let bg = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
        let fg = [rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0), rng.gen_range(0.0..255.0)];
        if (luma(bg) - luma(fg)).abs() > 70.0 {
            break (bg, fg);
        }
    };
    for c in 0..channels {
        for p in 0..size * size {
            img[c * size * size + p] = bg[c] as u8;
        }
    }
    let scale = rng.gen_range(3..=(size / 6).max(4).min(size / 5));
    let extent = 5 * scale;
    let max_off = size.saturating_sub(extent);
    let (oy, ox) = (rng.gen_range(0..=max_off), rng.gen_range(0..=max_off));
    for gy in 0..5 {
        for gx in 0..5 {
            if glyph[gy * 5 + gx] == 0 {
                continue;
            }
            for py in 0..scale {
                for px in 0..scale {
                    let (y, x) = (oy + gy * scale + py, ox + gx * scale + px);
                    for c in 0..channels {
                        img[c * size * size + y * size + x] = fg[c] as u8;
                    }
                }
            }
        }
    }
    // distractor dots in random colors
    for _ in 0..clutter {
        let (y, x) = (rng.gen_range(0..size), rng.gen_range(0..size));
        let col = [rng.gen_range(0..256) as u8, rng.gen_range(0..256) as u8, rng.gen_range(0..256) as u8];
        let r = rng.gen_range(1..=2usize);
        for dy in 0..r {
            for dx in 0..r {
                if y + dy < size && x + dx < size {
                    for c in 0..channels {
                        img[c * size * size + (y + dy) * size + (x + dx)] = col[c];
                    }
                }
            }
        }
    }
    if noise > 0.0 {
        for v in img.iter_mut() {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *v = (*v as f64 + z * noise).clamp(0.0, 255.0) as u8;
        }
    }
}

/// Balanced synthetic glyph dataset (class i at indices i, i+classes, ...,
/// then shuffled by seed).
pub fn synthetic_images(spec: &SyntheticImageSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.classes > GLYPHS.len() {
        return Err(D2v2Error::config(format!(
            "synthetic images support 1..={} classes",
            GLYPHS.len()
        )));
    }
    if spec.size < 15 {
        return Err(D2v2Error::config("synthetic images need size >= 15"));
    }
    let (c, h, w) = (3usize, spec.size, spec.size);
    let stride = c * h * w;
    let mut data = vec![0u8; spec.n * stride];
    let mut labels = Vec::with_capacity(spec.n);
    let mut order: Vec<usize> = (0..spec.n).collect();
    let mut rng = seeded_rng(spec.seed ^ 0x5E17A010u64);
    shuffle(&mut order, &mut rng);
    for (slot, &i) in order.iter().enumerate() {
        let class = slot % spec.classes;
        let mut srng = seeded_rng(spec.seed ^ 0x1111_2222u64 ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        render_glyph(
            &mut data[i * stride..(i + 1) * stride],
            spec.size,
            &GLYPHS[class],
            &mut srng,
            spec.noise,
            spec.clutter,
        );
        labels.push((i, class));
    }
    labels.sort_by_key(|&(i, _)| i);
    let labels: Vec<usize> = labels.into_iter().map(|(_, c)| c).collect();
    Ok(Dataset::Images { data, labels: Some(labels), n: spec.n, c, h, w, classes: spec.classes })
}

/// Zero-pad by 2, random-crop back to size, random horizontal flip.
pub fn augment_image(img: &[u8], c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let pad = 2usize;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0u8; c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            let src = &img[(ci * h + y) * w..(ci * h + y + 1) * w];
            let dst = &mut padded[(ci * ph + y + pad) * pw + pad..(ci * ph + y + pad) * pw + pad + w];
            dst.copy_from_slice(src);
        }
    }
    let oy = rng.gen_range(0..=2 * pad);
    let ox = rng.gen_range(0..=2 * pad);
    let flip = rng.gen::<bool>();
    let mut out = vec![0u8; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { ox + w - 1 - x } else { ox + x };
                out[(ci * h + y) * w + x] = padded[(ci * ph + oy + y) * pw + sx];
            }
        }
    }
    out
}

// ── synthetic speech ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SyntheticSpeechSpec {
    pub n: usize,
    pub samples: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpeechSpec {
    fn default() -> Self {
        SyntheticSpeechSpec { n: 512, samples: 2048, classes: 10, seed: 0 }
    }
}

/// Tone/noise mixtures: class k is a harmonic stack on a class-specific
/// fundamental with random phase, amplitude, and noise floor.
pub fn synthetic_speech(spec: &SyntheticSpeechSpec) -> Result<Dataset> {
    if spec.classes == 0 {
        return Err(D2v2Error::config("speech classes must be >= 1"));
    }
    let mut data = vec![0i16; spec.n * spec.samples];
    let mut labels = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let class = i % spec.classes;
        let mut rng = seeded_rng(spec.seed ^ 0xACCE55u64 ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        let base = 0.005 + 0.012 * class as f64; // cycles per sample
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp: f64 = rng.gen_range(0.3..0.8);
        let noise_amp: f64 = rng.gen_range(0.02..0.1);
        for t in 0..spec.samples {
            let mut v = 0.0;
            for h in 1..=3 {
                v += amp / h as f64 * (std::f64::consts::TAU * base * h as f64 * t as f64 + phase * h as f64).sin();
            }
            v += noise_amp * (rng.gen::<f64>() * 2.0 - 1.0);
            data[i * spec.samples + t] = (v.clamp(-1.0, 1.0) * 32767.0) as i16;
        }
        labels.push(class);
    }
    Ok(Dataset::Waves { data, labels: Some(labels), n: spec.n, samples: spec.samples, classes: spec.classes })
}

// ── file formats ────────────────────────────────────────────────────────

/// Write the flat binary image format: magic, count, C, H, W (LE u32),
/// then raw 8-bit samples.
pub fn write_image_file(path: &Path, ds: &Dataset) -> Result<()> {
    let (data, n, c, h, w) = match ds {
        Dataset::Images { data, n, c, h, w, .. } => (data, *n, *c, *h, *w),
        _ => return Err(D2v2Error::config("write_image_file needs an image dataset")),
    };
    let mut out = Vec::with_capacity(20 + data.len());
    out.extend_from_slice(IMAGE_MAGIC);
    for v in [n as u32, c as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(data);
    std::fs::write(path, out)?;
    Ok(())
}

/// Read the flat binary image format. Malformed input reports the byte
/// offset of the problem.
pub fn read_image_file(path: &Path, labels_path: Option<&Path>, classes: usize) -> Result<Dataset> {
    let bytes = std::fs::read(path)
        .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", path.display())))?;
    let fail = |off: usize, what: &str| {
        D2v2Error::data(format!("{}: malformed at byte {off}: {what}", path.display()))
    };
    if bytes.len() < 4 || &bytes[..4] != IMAGE_MAGIC {
        return Err(fail(0, "bad magic (expected IMB1)"));
    }
    if bytes.len() < 20 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    let rd = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (n, c, h, w) = (rd(0), rd(1), rd(2), rd(3));
    let expect = 20 + n * c * h * w;
    if bytes.len() != expect {
        return Err(fail(bytes.len().min(expect), "sample payload size mismatch"));
    }
    let labels = match labels_path {
        Some(lp) => Some(read_labels(lp, n, classes)?),
        None => None,
    };
    Ok(Dataset::Images { data: bytes[20..].to_vec(), labels, n, c, h, w, classes })
}

/// One integer class id per line.
pub fn read_labels(path: &Path, expect_n: usize, classes: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let id: usize = line.parse().map_err(|_| {
            D2v2Error::data(format!("{}: line {}: not a class id", path.display(), lineno + 1))
        })?;
        if id >= classes {
            return Err(D2v2Error::data(format!(
                "{}: line {}: unknown class id {id} (classes = {classes})",
                path.display(),
                lineno + 1
            )));
        }
        labels.push(id);
    }
    if labels.len() != expect_n {
        return Err(D2v2Error::data(format!(
            "{}: {} labels for {expect_n} samples",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

/// Directory of equal-length raw `*.pcm` files (16-bit little-endian mono),
/// sorted by name.
pub fn read_pcm_dir(dir: &Path, labels_path: Option<&Path>, classes: usize) -> Result<Dataset> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "pcm").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(D2v2Error::data(format!("no .pcm files in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut samples = 0usize;
    for (i, f) in files.iter().enumerate() {
        let mut bytes = Vec::new();
        std::fs::File::open(f)
            .and_then(|mut fh| fh.read_to_end(&mut bytes))
            .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", f.display())))?;
        if bytes.len() % 2 != 0 {
            return Err(D2v2Error::data(format!("{}: odd byte count for 16-bit PCM", f.display())));
        }
        let this: Vec<i16> = bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect();
        if i == 0 {
            samples = this.len();
        } else if this.len() != samples {
            return Err(D2v2Error::data(format!(
                "{}: {} samples, expected {samples} (all files must match)",
                f.display(),
                this.len()
            )));
        }
        data.extend(this);
    }
    let n = files.len();
    let labels = match labels_path {
        Some(lp) => Some(read_labels(lp, n, classes)?),
        None => None,
    };
    Ok(Dataset::Waves { data, labels, n, samples, classes })
}

/// Vocabulary file: one token per line, id = line number. Duplicates are an
/// error naming the line.
pub fn read_vocab(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", path.display())))?;
    let mut vocab = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let tok = line.to_string();
        if vocab.contains(&tok) {
            return Err(D2v2Error::data(format!(
                "{}: line {}: duplicate token {tok:?}",
                path.display(),
                lineno + 1
            )));
        }
        vocab.push(tok);
    }
    if vocab.is_empty() {
        return Err(D2v2Error::data(format!("{}: empty vocabulary", path.display())));
    }
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenize {
    Char,
    Whitespace,
}

/// Corpus file (one sample per line) tokenized against a fixed vocabulary;
/// lines shorter than `seq_len` tokens are skipped, longer ones truncated.
pub fn read_text_file(
    path: &Path,
    vocab: &[String],
    tokenize: Tokenize,
    seq_len: usize,
    labels_path: Option<&Path>,
    classes: usize,
) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| D2v2Error::data(format!("cannot read {}: {e}", path.display())))?;
    let lookup = |tok: &str, lineno: usize| -> Result<usize> {
        vocab.iter().position(|v| v == tok).ok_or_else(|| {
            D2v2Error::data(format!(
                "{}: line {}: token {tok:?} not in vocabulary",
                path.display(),
                lineno + 1
            ))
        })
    };
    let mut ids = Vec::new();
    let mut kept_lines = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let toks: Vec<usize> = match tokenize {
            Tokenize::Char => line
                .chars()
                .map(|ch| lookup(&ch.to_string(), lineno))
                .collect::<Result<_>>()?,
            Tokenize::Whitespace => line
                .split_whitespace()
                .map(|t| lookup(t, lineno))
                .collect::<Result<_>>()?,
        };
        if toks.len() >= seq_len {
            ids.push(toks[..seq_len].to_vec());
            kept_lines.push(lineno);
        }
    }
    if ids.is_empty() {
        return Err(D2v2Error::data(format!(
            "{}: no lines with at least {seq_len} tokens",
            path.display()
        )));
    }
    let labels = match labels_path {
        Some(lp) => {
            let all = read_labels(lp, text.lines().count(), classes)?;
            Some(kept_lines.iter().map(|&l| all[l]).collect())
        }
        None => None,
    };
    Ok(Dataset::Text { ids, labels, vocab: vocab.len(), classes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_have_equal_mass_and_are_distinct() {
        for (i, g) in GLYPHS.iter().enumerate() {
            let on: u32 = g.iter().map(|&v| v as u32).sum();
            assert_eq!(on, 10, "glyph {i} has {on} on-cells");
        }
        for i in 0..GLYPHS.len() {
            for j in i + 1..GLYPHS.len() {
                assert_ne!(GLYPHS[i], GLYPHS[j], "glyphs {i} and {j} identical");
            }
        }
    }

    #[test]
    fn synthetic_images_balanced_labels() {
        let ds = synthetic_images(&SyntheticImageSpec { n: 1024, ..Default::default() }).unwrap();
        assert_eq!(ds.len(), 1024);
        let labels = ds.labels().unwrap();
        let mut counts = [0usize; 10];
        for &l in labels {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "unbalanced: {counts:?}");
    }

    #[test]
    fn synthetic_images_deterministic() {
        let spec = SyntheticImageSpec { n: 8, ..Default::default() };
        let a = synthetic_images(&spec).unwrap();
        let b = synthetic_images(&spec).unwrap();
        match (a, b) {
            (Dataset::Images { data: da, .. }, Dataset::Images { data: db, .. }) => {
                assert_eq!(da, db)
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn image_file_roundtrip_and_truncation() {
        let dir = std::env::temp_dir().join(format!("d2v2_img_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("set.bin");
        let ds = synthetic_images(&SyntheticImageSpec { n: 6, ..Default::default() }).unwrap();
        write_image_file(&path, &ds).unwrap();
        let back = read_image_file(&path, None, 10).unwrap();
        assert_eq!(back.len(), 6);
        match (&ds, &back) {
            (Dataset::Images { data: a, .. }, Dataset::Images { data: b, .. }) => assert_eq!(a, b),
            _ => unreachable!(),
        }
        // truncated file reports a byte offset
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        let err = read_image_file(&path, None, 10).unwrap_err();
        assert!(format!("{err}").contains("byte"));
        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_image_file(&path, None, 10).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn vocab_duplicate_names_line() {
        let dir = std::env::temp_dir().join(format!("d2v2_vocab_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        std::fs::write(&path, "a\nb\na\n").unwrap();
        let err = read_vocab(&path).unwrap_err();
        assert!(format!("{err}").contains("line 3"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn labels_unknown_class_is_data_error() {
        let dir = std::env::temp_dir().join(format!("d2v2_lab_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("labels.txt");
        std::fs::write(&path, "1\n9\n10\n").unwrap();
        let err = read_labels(&path, 3, 10).unwrap_err();
        assert!(format!("{err}").contains("unknown class id 10"));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn augment_preserves_shape_and_is_seed_deterministic() {
        let ds = synthetic_images(&SyntheticImageSpec { n: 1, ..Default::default() }).unwrap();
        let img = match &ds {
            Dataset::Images { data, .. } => data.clone(),
            _ => unreachable!(),
        };
        let a = augment_image(&img, 3, 32, 32, &mut seeded_rng(5));
        let b = augment_image(&img, 3, 32, 32, &mut seeded_rng(5));
        assert_eq!(a.len(), img.len());
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let order = epoch_order(100, 3, 7);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(order, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_keeps_ratio() {
        let mut ds = synthetic_images(&SyntheticImageSpec { n: 100, ..Default::default() }).unwrap();
        ds.subsample(0.25, 9).unwrap();
        assert_eq!(ds.len(), 25);
        assert_eq!(ds.labels().unwrap().len(), 25);
    }

    #[test]
    fn synthetic_speech_classes_have_distinct_spectra() {
        let ds = synthetic_speech(&SyntheticSpeechSpec { n: 4, samples: 256, classes: 2, seed: 1 }).unwrap();
        match &ds {
            Dataset::Waves { data, samples, .. } => {
                // zero-crossing rate grows with the fundamental
                let zcr = |s: &[i16]| s.windows(2).filter(|w| (w[0] < 0) != (w[1] < 0)).count();
                let a = zcr(&data[0..*samples]);
                let b = zcr(&data[*samples..2 * *samples]);
                assert!(b > a, "class 1 should oscillate faster: {a} vs {b}");
            }
            _ => unreachable!(),
        }
    }
}
