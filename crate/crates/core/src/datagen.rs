//! Synthetic planted-feature datasets with known ground-truth evidence.
//!
//! Every sample draws from its own counter-based stream `(seed, index)`, so
//! datasets are reproducible and any single sample can be regenerated alone.
//! Within a sample the label-independent background (noise texture or filler
//! tokens) is drawn before anything that depends on the label.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::hosts::PAD_TOKEN;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const SHAPE_CLASSES: [&str; 4] = ["square", "disk", "cross", "bar"];

/// Shape area bounds in pixels: 4% and 40% of a 32x32 image.
const MIN_AREA: usize = 41;
const MAX_AREA: usize = 409;
const BACKGROUND_MAX: f64 = 0.6;
const NOISE_CELLS: usize = 4;
const FIRST_WORD: usize = PAD_TOKEN + 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSample {
    /// `[1, 32, 32]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Row-major `32 * 32`; true exactly on shape pixels.
    pub truth_mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDataset {
    pub seed: u64,
    pub n_class: usize,
    pub samples: Vec<ShapeSample>,
}

impl ShapeDataset {
    pub fn images(&self) -> Vec<&Tensor> {
        self.samples.iter().map(|s| &s.image).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}

/// Value-noise texture in `[0, BACKGROUND_MAX]`: random lattice values with
/// smoothstep bilinear interpolation.
fn value_noise(rng: &mut Rng) -> Vec<f64> {
    let g = NOISE_CELLS + 1;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.gen::<f64>()).collect();
    let cell = IMAGE_SIZE as f64 / NOISE_CELLS as f64;
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let fy = (y as f64 + 0.5) / cell;
            let fx = (x as f64 + 0.5) / cell;
            let (iy, ix) = (
                (fy.floor() as usize).min(NOISE_CELLS - 1),
                (fx.floor() as usize).min(NOISE_CELLS - 1),
            );
            let (ty, tx) = (smooth(fy - iy as f64), smooth(fx - ix as f64));
            let at = |r: usize, c: usize| lattice[r * g + c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(BACKGROUND_MAX * (top * (1.0 - ty) + bot * ty));
        }
    }
    out
}

/// Rasterizes one shape of the given class, redrawing until its area lies
/// within the bounds.
fn draw_shape(class: usize, rng: &mut Rng) -> Vec<bool> {
    let n = IMAGE_SIZE;
    loop {
        let mut mask = vec![false; n * n];
        let mut set = |y: usize, x: usize| mask[y * n + x] = true;
        match class {
            0 => {
                let s = rng.gen_range(7..=20);
                let (y0, x0) = (rng.gen_range(0..=n - s), rng.gen_range(0..=n - s));
                for y in y0..y0 + s {
                    for x in x0..x0 + s {
                        set(y, x);
                    }
                }
            }
            1 => {
                let r: f64 = rng.gen_range(3.8..11.3);
                let m = r.ceil() as usize;
                let cy = rng.gen_range(m..=n - m) as f64 - 0.5;
                let cx = rng.gen_range(m..=n - m) as f64 - 0.5;
                for y in 0..n {
                    for x in 0..n {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        if dy * dy + dx * dx <= r * r {
                            set(y, x);
                        }
                    }
                }
            }
            2 => {
                let arm = rng.gen_range(9..=27);
                let t = rng.gen_range(3..=(arm / 3).max(3));
                let (y0, x0) = (rng.gen_range(0..=n - arm), rng.gen_range(0..=n - arm));
                let off = (arm - t) / 2;
                for i in 0..arm {
                    for j in off..off + t {
                        set(y0 + i, x0 + j);
                        set(y0 + j, x0 + i);
                    }
                }
            }
            _ => {
                let long = rng.gen_range(14..=30);
                let short = rng.gen_range(3..=(long / 4).max(3));
                let (h, w) = if rng.gen::<bool>() {
                    (long, short)
                } else {
                    (short, long)
                };
                let (y0, x0) = (rng.gen_range(0..=n - h), rng.gen_range(0..=n - w));
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        set(y, x);
                    }
                }
            }
        }
        let area = mask.iter().filter(|&&m| m).count();
        if (MIN_AREA..=MAX_AREA).contains(&area) {
            return mask;
        }
    }
}

/// Background texture of sample `index`, exactly as it appears under the shape.
pub fn shape_background(seed: u64, index: usize) -> Vec<f64> {
    value_noise(&mut rng::stream(seed, index as u64))
}

pub fn gen_shape_sample(seed: u64, index: usize, n_class: usize) -> ShapeSample {
    let mut rng = rng::stream(seed, index as u64);
    let mut pixels = value_noise(&mut rng);
    let label = index % n_class;
    let truth_mask = draw_shape(label, &mut rng);
    for (p, &m) in pixels.iter_mut().zip(&truth_mask) {
        if m {
            *p = 1.0;
        }
    }
    ShapeSample {
        image: Tensor::new([1, IMAGE_SIZE, IMAGE_SIZE], pixels).expect("fixed size"),
        label,
        truth_mask,
    }
}

/// `n` single-channel 32x32 images, one of four shape classes each, on a
/// label-independent value-noise background. Classes cycle with the index.
pub fn gen_shapes(n: usize, seed: u64) -> Result<ShapeDataset> {
    gen_shapes_with(n, seed, SHAPE_CLASSES.len())
}

pub fn gen_shapes_with(n: usize, seed: u64, n_class: usize) -> Result<ShapeDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if !(2..=SHAPE_CLASSES.len()).contains(&n_class) {
        return Err(Error::Config(format!(
            "shape classes must be in 2..={}",
            SHAPE_CLASSES.len()
        )));
    }
    Ok(ShapeDataset {
        seed,
        n_class,
        samples: (0..n).map(|i| gen_shape_sample(seed, i, n_class)).collect(),
    })
}

// ---- tokens ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGenConfig {
    pub n_class: usize,
    pub keywords_per_class: usize,
    /// Planted keyword occurrences per sequence.
    pub planted: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TokenGenConfig {
    fn default() -> Self {
        TokenGenConfig {
            n_class: 4,
            keywords_per_class: 4,
            planted: 2,
            min_len: 11,
            max_len: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSample {
    /// Padded with [`PAD_TOKEN`] to `max_len`.
    pub tokens: Vec<usize>,
    pub label: usize,
    /// True at planted keyword positions.
    pub truth_mask: Vec<bool>,
}

impl TokenSample {
    pub fn len(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != PAD_TOKEN).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenDataset {
    pub seed: u64,
    pub vocab_size: usize,
    pub n_class: usize,
    /// Keyword ids per class, pairwise disjoint.
    pub keywords: Vec<Vec<usize>>,
    pub samples: Vec<TokenSample>,
}

impl TokenDataset {
    pub fn sequences(&self) -> Vec<&[usize]> {
        self.samples.iter().map(|s| s.tokens.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// First id usable as a filler token.
    pub fn first_filler(&self) -> usize {
        FIRST_WORD + self.keywords.iter().map(Vec::len).sum::<usize>()
    }
}

pub fn gen_tokens(n: usize, vocab_size: usize, seed: u64) -> Result<TokenDataset> {
    gen_tokens_with(n, vocab_size, seed, &TokenGenConfig::default())
}

pub fn gen_tokens_with(
    n: usize,
    vocab_size: usize,
    seed: u64,
    cfg: &TokenGenConfig,
) -> Result<TokenDataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if cfg.n_class < 2 || cfg.keywords_per_class == 0 {
        return Err(Error::Config(
            "need at least 2 classes and 1 keyword per class".into(),
        ));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.planted > cfg.min_len {
        return Err(Error::Config(
            "need 0 < planted <= min_len <= max_len".into(),
        ));
    }
    let specials = FIRST_WORD;
    let n_kw = cfg.n_class * cfg.keywords_per_class;
    if vocab_size <= specials + n_kw {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} leaves no filler ids beyond {specials} specials and {n_kw} keywords"
        )));
    }
    let keywords: Vec<Vec<usize>> = (0..cfg.n_class)
        .map(|c| {
            (0..cfg.keywords_per_class)
                .map(|k| specials + c * cfg.keywords_per_class + k)
                .collect()
        })
        .collect();
    let filler_lo = specials + n_kw;
    let samples = (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let len = rng.gen_range(cfg.min_len..=cfg.max_len);
            let mut tokens: Vec<usize> = (0..len)
                .map(|_| rng.gen_range(filler_lo..vocab_size))
                .collect();
            let label = i % cfg.n_class;
            let positions = rand::seq::index::sample(&mut rng, len, cfg.planted);
            let mut truth_mask = vec![false; cfg.max_len];
            for p in positions.iter() {
                tokens[p] = keywords[label][rng.gen_range(0..cfg.keywords_per_class)];
                truth_mask[p] = true;
            }
            tokens.resize(cfg.max_len, PAD_TOKEN);
            TokenSample {
                tokens,
                label,
                truth_mask,
            }
        })
        .collect();
    Ok(TokenDataset {
        seed,
        vocab_size,
        n_class: cfg.n_class,
        keywords,
        samples,
    })
}

// ---- localization ------------------------------------------------------------

/// `mean_in / (mean_in + mean_out + 1e-12)`; cells outside an all-true mask
/// count as mean 0.
pub fn localization_score(saliency: &[f64], truth_mask: &[bool]) -> Result<f64> {
    if saliency.len() != truth_mask.len() {
        return Err(Error::dim(
            "localization_score",
            &[saliency.len()],
            &[truth_mask.len()],
        ));
    }
    let (mut sin, mut nin, mut sout, mut nout) = (0.0, 0usize, 0.0, 0usize);
    for (&s, &m) in saliency.iter().zip(truth_mask) {
        if m {
            sin += s;
            nin += 1;
        } else {
            sout += s;
            nout += 1;
        }
    }
    if nin == 0 {
        return Err(Error::Contract("truth mask is empty".into()));
    }
    let mean_in = sin / nin as f64;
    let mean_out = if nout == 0 { 0.0 } else { sout / nout as f64 };
    Ok(mean_in / (mean_in + mean_out + 1e-12))
}

// ---- export --------------------------------------------------------------------

const DATA_MAGIC: &[u8; 8] = b"MHEXDATA";
const DATA_VERSION: u32 = 1;
const KIND_SHAPES: u8 = 0;
const KIND_TOKENS: u8 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn header(kind: u8, seed: u64, count: usize, dims: &[usize]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    out.push(kind);
    put_u64(&mut out, seed);
    put_u64(&mut out, count as u64);
    put_u64(&mut out, dims.len() as u64);
    for &d in dims {
        put_u64(&mut out, d as u64);
    }
    out
}

/// Header `(magic, version, kind, seed, count, dims)`, then per sample: label
/// `u64`, the image as `f64` values, the mask as one byte per pixel.
pub fn export_shapes(ds: &ShapeDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = header(
        KIND_SHAPES,
        ds.seed,
        ds.samples.len(),
        &[1, IMAGE_SIZE, IMAGE_SIZE, ds.n_class],
    );
    for s in &ds.samples {
        put_u64(&mut out, s.label as u64);
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(s.truth_mask.iter().map(|&m| m as u8));
    }
    write_file(path.as_ref(), &out)
}

/// Header `(magic, version, kind, seed, count, dims = [max_len, vocab, n_class, keywords_per_class])`,
/// then per sample: label `u64`, tokens as `u64`, mask bytes.
pub fn export_tokens(ds: &TokenDataset, path: impl AsRef<Path>) -> Result<()> {
    let max_len = ds.samples.first().map_or(0, |s| s.tokens.len());
    let kpc = ds.keywords.first().map_or(0, Vec::len);
    let dims = [max_len, ds.vocab_size, ds.n_class, kpc];
    let mut out = header(KIND_TOKENS, ds.seed, ds.samples.len(), &dims);
    for s in &ds.samples {
        put_u64(&mut out, s.label as u64);
        for &t in &s.tokens {
            put_u64(&mut out, t as u64);
        }
        out.extend(s.truth_mask.iter().map(|&m| m as u8));
    }
    write_file(path.as_ref(), &out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Contract("dataset file truncated".into()));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Payload, seed, count, per-sample shape and class count.
type Header = (Vec<u8>, u64, usize, Vec<usize>, usize);

fn read_header(path: &Path, kind: u8) -> Result<Header> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor(&buf);
    if c.bytes(8)? != DATA_MAGIC {
        return Err(Error::Contract("not a dataset file".into()));
    }
    let version = u32::from_le_bytes(c.bytes(4)?.try_into().expect("4 bytes"));
    if version != DATA_VERSION || c.bytes(1)?[0] != kind {
        return Err(Error::Contract(
            "unsupported dataset version or kind".into(),
        ));
    }
    let seed = c.u64()?;
    let count = c.u64()? as usize;
    let rank = c.u64()? as usize;
    let dims = (0..rank)
        .map(|_| c.u64().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let consumed = buf.len() - c.0.len();
    Ok((buf, seed, count, dims, consumed))
}

pub fn import_shapes(path: impl AsRef<Path>) -> Result<ShapeDataset> {
    let (buf, seed, count, dims, start) = read_header(path.as_ref(), KIND_SHAPES)?;
    let mut c = Cursor(&buf[start..]);
    let px = IMAGE_SIZE * IMAGE_SIZE;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let label = c.u64()? as usize;
        let data = c
            .bytes(px * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8")))
            .collect();
        let truth_mask = c.bytes(px)?.iter().map(|&b| b != 0).collect();
        samples.push(ShapeSample {
            image: Tensor::new([1, IMAGE_SIZE, IMAGE_SIZE], data)?,
            label,
            truth_mask,
        });
    }
    let &[_, _, _, n_class] = dims.as_slice() else {
        return Err(Error::Contract("shape dataset header needs 4 dims".into()));
    };
    Ok(ShapeDataset {
        seed,
        n_class,
        samples,
    })
}

pub fn import_tokens(path: impl AsRef<Path>) -> Result<TokenDataset> {
    let (buf, seed, count, dims, start) = read_header(path.as_ref(), KIND_TOKENS)?;
    let &[max_len, vocab_size, n_class, kpc] = dims.as_slice() else {
        return Err(Error::Contract("token dataset header needs 4 dims".into()));
    };
    let mut c = Cursor(&buf[start..]);
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let label = c.u64()? as usize;
        let tokens = (0..max_len)
            .map(|_| c.u64().map(|t| t as usize))
            .collect::<Result<Vec<_>>>()?;
        let truth_mask = c.bytes(max_len)?.iter().map(|&b| b != 0).collect();
        samples.push(TokenSample {
            tokens,
            label,
            truth_mask,
        });
    }
    let specials = FIRST_WORD;
    let keywords = (0..n_class)
        .map(|cl| (0..kpc).map(|k| specials + cl * kpc + k).collect())
        .collect();
    Ok(TokenDataset {
        seed,
        vocab_size,
        n_class,
        keywords,
        samples,
    })
}

// ---- audit -----------------------------------------------------------------------

/// Held-out accuracy of a multinomial logistic probe trained by full-batch
/// gradient descent on standardized features. The first 70% of rows train,
/// the rest test.
pub fn probe_accuracy(
    features: &[Vec<f64>],
    labels: &[usize],
    n_class: usize,
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    let n = features.len();
    if n < 10 || labels.len() != n {
        return Err(Error::Contract(
            "probe needs at least 10 labelled rows".into(),
        ));
    }
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for f in features {
        for j in 0..d {
            mean[j] += f[j] / n as f64;
        }
    }
    for f in features {
        for j in 0..d {
            sd[j] += (f[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            (0..d)
                .map(|j| (f[j] - mean[j]) / (sd[j].sqrt() + 1e-12))
                .collect()
        })
        .collect();
    let split = n * 7 / 10;
    let mut w = vec![vec![0.0; d + 1]; n_class];
    let score = |w: &[Vec<f64>], row: &[f64]| -> Vec<f64> {
        w.iter()
            .map(|wc| wc[d] + row.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..epochs {
        let mut grad = vec![vec![0.0; d + 1]; n_class];
        for i in 0..split {
            let p = crate::hosts::softmax(&score(&w, &x[i]));
            for c in 0..n_class {
                let e = p[c] - (labels[i] == c) as u8 as f64;
                for j in 0..d {
                    grad[c][j] += e * x[i][j];
                }
                grad[c][d] += e;
            }
        }
        for c in 0..n_class {
            for j in 0..=d {
                w[c][j] -= lr * grad[c][j] / split as f64;
            }
        }
    }
    let mut correct = 0;
    for i in split..n {
        let s = score(&w, &x[i]);
        let pred = (0..n_class).fold(0, |b, c| if s[c] > s[b] { c } else { b });
        correct += (pred == labels[i]) as usize;
    }
    Ok(correct as f64 / (n - split) as f64)
}
