//! Class-conditional saliency from equivalent matrices: weight filtering
//! (negative mixing and salience sharpness), per-layer CAMs, cross-layer
//! aggregation, token scores, a Grad-CAM baseline and PGM/PPM/CSV/HTML output.

use std::fs;
use std::path::Path;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::hosts::{ForwardOptions, Host, Model, ResNet, Transformer};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightFilterConfig {
    /// Scale applied to negative weights, in `[0, 1]`.
    pub neg_mix: f64,
    /// Salience-sharpness keep threshold, in `[0, 1]`.
    pub ss_threshold: f64,
    pub eps: f64,
    /// Per-layer decay in `(0, 1]`; layer `l` (1 = shallowest) gets `decay^l`.
    pub layer_decay: f64,
    /// Number of shallowest token sites read by token saliency.
    pub layers: usize,
}

impl WeightFilterConfig {
    pub fn for_classes(n_class: usize) -> Self {
        WeightFilterConfig {
            neg_mix: 0.25,
            ss_threshold: 1.0 / n_class as f64 + 0.2,
            eps: 1e-8,
            layer_decay: 0.9,
            layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.neg_mix) {
            return Err(Error::Config(format!(
                "neg_mix {} outside [0,1]",
                self.neg_mix
            )));
        }
        if !unit(self.ss_threshold) {
            return Err(Error::Config(format!(
                "ss_threshold {} outside [0,1]",
                self.ss_threshold
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config(format!(
                "layer_decay {} outside (0,1]",
                self.layer_decay
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be at least 1".into()));
        }
        Ok(())
    }
}

/// Normalized map plus the raw sum and per-layer contributions behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub class_id: usize,
    /// `[H, W]` in `[0, 1]`.
    pub map: Tensor,
    /// `[H, W]` before normalization.
    pub raw: Tensor,
    /// Decayed per-layer grids at the output resolution, shallow to deep.
    pub layers: Vec<Tensor>,
}

impl SaliencyMap {
    /// Normalized map resized by nearest neighbour to `h x w`.
    pub fn upsampled(&self, h: usize, w: usize) -> Tensor {
        upsample_nearest(&self.map, h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSaliency {
    pub class_id: usize,
    /// One score per non-pad token.
    pub scores: Vec<f64>,
    /// Sequence positions the scores belong to.
    pub positions: Vec<usize>,
    /// Decayed per-layer scores, `l = 1..=L`.
    pub layers: Vec<Vec<f64>>,
}

// ---- weight filtering -----------------------------------------------------------

pub fn split_weights(w: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        w.iter().map(|&v| v.max(0.0)).collect(),
        w.iter().map(|&v| v.min(0.0)).collect(),
    )
}

/// `w_pos + α · w_neg`.
pub fn adjust_weights(w: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0,1]")));
    }
    Ok(w.iter().map(|&v| v.max(0.0) + alpha * v.min(0.0)).collect())
}

fn check_matrix(op: &'static str, w: &Tensor) -> Result<(usize, usize)> {
    match *w.shape() {
        [n, c] => Ok((n, c)),
        _ => Err(Error::dim(op, w.shape(), &[0, 0])),
    }
}

/// Column-normalized class specificity of every weight, for the positive
/// and (absolute) negative parts separately.
pub fn salience_sharpness(w_equiv: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    if !(eps > 0.0) {
        return Err(Error::Config("eps must be positive".into()));
    }
    let (n, c) = check_matrix("salience_sharpness", w_equiv)?;
    let w = w_equiv.data();
    let mut pos = vec![0.0; n * c];
    let mut neg = vec![0.0; n * c];
    for j in 0..c {
        let sp: f64 = (0..n).map(|i| w[i * c + j].max(0.0)).sum();
        let sn: f64 = (0..n).map(|i| w[i * c + j].min(0.0).abs()).sum();
        for i in 0..n {
            pos[i * c + j] = w[i * c + j].max(0.0) / (sp + eps);
            neg[i * c + j] = w[i * c + j].min(0.0).abs() / (sn + eps);
        }
    }
    Ok((Tensor::new([n, c], pos)?, Tensor::new([n, c], neg)?))
}

/// Keeps positive weights whose sharpness exceeds the threshold and
/// α-scaled negative weights whose sharpness exceeds it; zeroes the rest.
pub fn final_weights(w_equiv: &Tensor, cfg: &WeightFilterConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (ss_pos, ss_neg) = salience_sharpness(w_equiv, cfg.eps)?;
    let out = w_equiv
        .data()
        .iter()
        .zip(ss_pos.data().iter().zip(ss_neg.data()))
        .map(|(&w, (&sp, &sn))| {
            let p = if sp > cfg.ss_threshold {
                w.max(0.0)
            } else {
                0.0
            };
            let q = if sn > cfg.ss_threshold {
                w.min(0.0)
            } else {
                0.0
            };
            p + cfg.neg_mix * q
        })
        .collect();
    Tensor::new(w_equiv.shape().to_vec(), out)
}

// ---- maps -------------------------------------------------------------------------

/// `Σ_k w_k · f_k(y, x)` over `features [C, H, W]`.
pub fn cam_layer(w: &[f64], features: &Tensor) -> Result<Tensor> {
    let (c, h, wd) = match *features.shape() {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::dim(
                "cam_layer features",
                features.shape(),
                &[w.len(), 0, 0],
            ))
        }
    };
    if w.len() != c {
        return Err(Error::dim(
            "cam_layer weights vs channels",
            &[w.len()],
            &[c],
        ));
    }
    let hw = h * wd;
    let f = features.data();
    let mut out = vec![0.0; hw];
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        for (o, &v) in out.iter_mut().zip(&f[k * hw..(k + 1) * hw]) {
            *o += wk * v;
        }
    }
    Tensor::new([h, wd], out)
}

/// Nearest-neighbour resize of a `[H, W]` grid: source index `floor(i · in / out)`.
pub fn upsample_nearest(grid: &Tensor, h: usize, w: usize) -> Tensor {
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    Tensor::from_fn([h, w], |i| {
        let (y, x) = (i / w, i % w);
        grid.data()[(y * gh / h) * gw + x * gw / w]
    })
}

/// Min-max scaling to `[0, 1]`; a constant grid maps to zeros.
pub fn normalize_min_max(raw: &Tensor) -> Tensor {
    let lo = raw.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Tensor::zeros(raw.shape().to_vec());
    }
    raw.map(|v| (v - lo) / (hi - lo))
}

/// `Σ_l decay^l · CAM^(l)` with `l = 1` at the shallowest grid, every grid
/// first resized to the finest resolution among them.
pub fn aggregate_cams(class_id: usize, grids: &[Tensor], layer_decay: f64) -> Result<SaliencyMap> {
    if grids.is_empty() {
        return Err(Error::Contract(
            "aggregate_cams needs at least one grid".into(),
        ));
    }
    if let Some(g) = grids.iter().find(|g| g.rank() != 2) {
        return Err(Error::dim("aggregate_cams grid", g.shape(), &[0, 0]));
    }
    let finest = grids.iter().max_by_key(|g| g.numel()).expect("non-empty");
    let (h, w) = (finest.shape()[0], finest.shape()[1]);
    let mut raw = vec![0.0; h * w];
    let mut layers = Vec::with_capacity(grids.len());
    let mut weight = 1.0;
    for g in grids {
        weight *= layer_decay;
        let up = upsample_nearest(g, h, w).map(|v| weight * v);
        for (r, &v) in raw.iter_mut().zip(up.data()) {
            *r += v;
        }
        layers.push(up);
    }
    let raw = Tensor::new([h, w], raw)?;
    Ok(SaliencyMap {
        class_id,
        map: normalize_min_max(&raw),
        raw,
        layers,
    })
}

/// Scores of one layer: `S(j) = Σ_k w_k · A(j, k)`, evaluated by the grid
/// kernel on `A` laid out as a `[D, 1, T]` image.
pub fn token_layer_scores(w: &[f64], activations: &Tensor) -> Result<Vec<f64>> {
    let (t, d) = match *activations.shape() {
        [t, d] => (t, d),
        _ => {
            return Err(Error::dim(
                "token activations",
                activations.shape(),
                &[0, w.len()],
            ))
        }
    };
    let a = activations.data();
    let as_image = Tensor::from_fn([d, 1, t], |i| a[(i % t) * d + i / t]);
    Ok(cam_layer(w, &as_image)?.into_data())
}

/// `Σ_{l=1..L} decay^l · S^(l,c)` over the first `L` sites, each layer using
/// its own filtered equivalent-matrix row.
pub fn token_saliency(
    w_equivs: &[Tensor],
    activations: &[Tensor],
    class_id: usize,
    cfg: &WeightFilterConfig,
) -> Result<TokenSaliency> {
    cfg.validate()?;
    if cfg.layers > w_equivs.len() || cfg.layers > activations.len() {
        return Err(Error::Config(format!(
            "token saliency needs {} layers, model provides {}",
            cfg.layers,
            w_equivs.len().min(activations.len())
        )));
    }
    let mut scores: Vec<f64> = Vec::new();
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut weight = 1.0;
    for (we, a) in w_equivs.iter().zip(activations).take(cfg.layers) {
        weight *= cfg.layer_decay;
        let fw = final_weights(we, cfg)?;
        let (n, _) = check_matrix("token_saliency", &fw)?;
        if class_id >= n {
            return Err(Error::Index {
                index: class_id,
                bound: n,
            });
        }
        let s: Vec<f64> = token_layer_scores(fw.row(class_id), a)?
            .into_iter()
            .map(|v| weight * v)
            .collect();
        if scores.is_empty() {
            scores = vec![0.0; s.len()];
        } else if scores.len() != s.len() {
            return Err(Error::dim(
                "token saliency layers",
                &[scores.len()],
                &[s.len()],
            ));
        }
        for (acc, v) in scores.iter_mut().zip(&s) {
            *acc += v;
        }
        layers.push(s);
    }
    let positions = (0..scores.len()).collect();
    Ok(TokenSaliency {
        class_id,
        scores,
        positions,
        layers,
    })
}

// ---- model-level entry points -------------------------------------------------------

fn strip_batch(t: &Tensor) -> Result<Tensor> {
    match *t.shape() {
        [1, c, h, w] => t.clone().reshape([c, h, w]),
        [_, _] | [_, _, _] => Ok(t.clone()),
        _ => Err(Error::dim("site features", t.shape(), &[1, 0, 0, 0])),
    }
}

/// MHEX saliency of `class_id` for one image: every site contributes a CAM
/// built from its filtered equivalent matrix and its ReLU features.
pub fn explain_image(
    model: &ResNet,
    image: &Tensor,
    class_id: usize,
    cfg: &WeightFilterConfig,
) -> Result<SaliencyMap> {
    cfg.validate()?;
    if class_id >= model.n_class() {
        return Err(Error::Index {
            index: class_id,
            bound: model.n_class(),
        });
    }
    if model.site_count() == 0 {
        return Err(Error::Unsupported("model has no MHEX sites".into()));
    }
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let rec = model.forward_collect(&mut tape, &bound, image, &ForwardOptions::default())?;
    let grids = model
        .equivalent_matrices()?
        .iter()
        .zip(&rec.sites)
        .map(|(we, site)| {
            let fw = final_weights(we, cfg)?;
            cam_layer(
                fw.row(class_id),
                &strip_batch(tape.value(site.out.relu_features))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate_cams(class_id, &grids, cfg.layer_decay)
}

/// MHEX token saliency over the first `cfg.layers` sites; scores are aligned
/// to the non-pad positions of `tokens`.
pub fn explain_tokens(
    model: &Transformer,
    tokens: &[usize],
    class_id: usize,
    cfg: &WeightFilterConfig,
) -> Result<TokenSaliency> {
    if class_id >= model.n_class() {
        return Err(Error::Index {
            index: class_id,
            bound: model.n_class(),
        });
    }
    if cfg.layers > model.site_count() {
        return Err(Error::Config(format!(
            "token saliency needs {} layers, model has {} sites",
            cfg.layers,
            model.site_count()
        )));
    }
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let rec = model.forward_collect(&mut tape, &bound, tokens, &ForwardOptions::default())?;
    let acts: Vec<Tensor> = rec
        .sites
        .iter()
        .take(cfg.layers)
        .map(|s| tape.value(s.out.relu_features).clone())
        .collect();
    let mut ts = token_saliency(&model.equivalent_matrices()?, &acts, class_id, cfg)?;
    ts.positions = Transformer::kept_positions(tokens);
    Ok(ts)
}

/// Grad-CAM from recorded features `[C, H, W]` and `d logit / d features`
/// of the same shape: channel weights are the spatial means of the gradient.
pub fn gradcam_from(class_id: usize, features: &Tensor, grads: &Tensor) -> Result<SaliencyMap> {
    let f = strip_batch(features)?;
    let g = strip_batch(grads)?;
    if f.shape() != g.shape() || f.rank() != 3 {
        return Err(Error::dim(
            "gradcam features vs grads",
            f.shape(),
            g.shape(),
        ));
    }
    let (c, hw) = (f.shape()[0], f.shape()[1] * f.shape()[2]);
    let weights: Vec<f64> = (0..c)
        .map(|k| g.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let raw = cam_layer(&weights, &f)?.map(|v| v.max(0.0));
    Ok(SaliencyMap {
        class_id,
        map: normalize_min_max(&raw),
        layers: vec![raw.clone()],
        raw,
    })
}

/// Grad-CAM on the last block of a CNN host.
pub fn gradcam_baseline(model: &Model, image: &Tensor, class_id: usize) -> Result<SaliencyMap> {
    gradcam_resnet(model.as_resnet()?, image, class_id)
}

pub fn gradcam_resnet(model: &ResNet, image: &Tensor, class_id: usize) -> Result<SaliencyMap> {
    let n = model.n_class();
    if class_id >= n {
        return Err(Error::Index {
            index: class_id,
            bound: n,
        });
    }
    let mut tape = Tape::new();
    // parameters must require gradients so the feature node carries one
    let bound = model.params().bind(&mut tape, true);
    let (feats, logits) = model.last_features_and_logits(&mut tape, &bound, image)?;
    let pick = tape.constant(Tensor::from_fn([1, n], |i| (i == class_id) as u8 as f64));
    let sel = tape.mul(logits, pick)?;
    let score = tape.sum(sel)?;
    let grads = tape.grad_wrt(score, feats)?;
    gradcam_from(class_id, tape.value(feats), &grads)
}

// ---- output ---------------------------------------------------------------------------

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn grid_dims(map: &Tensor) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] => Ok((h, w)),
        _ => Err(Error::dim("heatmap", map.shape(), &[0, 0])),
    }
}

/// Binary 8-bit grayscale PGM of a `[H, W]` map in `[0, 1]`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = grid_dims(map)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Parses a binary PGM written by [`encode_pgm`]; returns `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Contract("malformed PGM".into());
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad());
        }
        fields.push(
            std::str::from_utf8(&bytes[start..i])
                .map_err(|_| bad())?
                .to_string(),
        );
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let data = bytes.get(i + 1..i + 1 + w * h).ok_or_else(bad)?;
    Ok((w, h, data.to_vec()))
}

const RAMP: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [40.0, 0.0, 160.0],
    [200.0, 0.0, 90.0],
    [255.0, 160.0, 0.0],
    [255.0, 255.0, 255.0],
];

/// Colour of `v ∈ [0, 1]` on the fixed five-stop ramp.
pub fn ramp_color(v: f64) -> [u8; 3] {
    let x = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let t = x - i as f64;
    let mut c = [0u8; 3];
    for k in 0..3 {
        c[k] = (RAMP[i][k] * (1.0 - t) + RAMP[i + 1][k] * t).round() as u8;
    }
    c
}

/// Binary PPM: the ramp-coloured map blended half-and-half over the
/// grayscale image (`[C, H, W]`, channel mean used). The map is resized to
/// the image by nearest neighbour.
pub fn encode_ppm_overlay(map: &Tensor, image: &Tensor) -> Result<Vec<u8>> {
    grid_dims(map)?;
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return Err(Error::dim("overlay image", image.shape(), &[0, 0, 0])),
    };
    let m = upsample_nearest(map, h, w);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        let gray = (0..c).map(|k| image.data()[k * h * w + p]).sum::<f64>() / c as f64;
        let g = gray.clamp(0.0, 1.0) * 255.0;
        let col = ramp_color(m.data()[p]);
        for ch in col {
            out.push((0.5 * g + 0.5 * ch as f64).round() as u8);
        }
    }
    Ok(out)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a PGM, or a PPM overlay when an image is given.
pub fn render_heatmap(
    map: &Tensor,
    path: impl AsRef<Path>,
    overlay: Option<&Tensor>,
) -> Result<()> {
    let bytes = match overlay {
        Some(img) => encode_ppm_overlay(map, img)?,
        None => encode_pgm(map)?,
    };
    write(path.as_ref(), &bytes)
}

/// `token,position,score` rows.
pub fn token_csv(tokens: &[usize], ts: &TokenSaliency) -> String {
    let mut s = String::from("token,position,score\n");
    for (&p, &v) in ts.positions.iter().zip(&ts.scores) {
        s.push_str(&format!("{},{p},{v}\n", tokens[p]));
    }
    s
}

/// Self-contained HTML with one span per token, background opacity equal
/// to the min-max normalized score.
pub fn token_html(
    tokens: &[usize],
    ts: &TokenSaliency,
    vocab: Option<&dyn Fn(usize) -> String>,
) -> String {
    let raw = Tensor::new(
        [1, ts.scores.len().max(1)],
        if ts.scores.is_empty() {
            vec![0.0]
        } else {
            ts.scores.clone()
        },
    )
    .expect("non-empty");
    let norm = normalize_min_max(&raw);
    let mut s = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>token saliency</title></head>\n<body style=\"font-family:monospace\">\n<p>",
    );
    for (i, &p) in ts.positions.iter().enumerate() {
        let label = vocab.map_or_else(|| format!("t{}", tokens[p]), |f| f(tokens[p]));
        let label = label
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        s.push_str(&format!(
            "<span title=\"{:.6}\" style=\"background:rgba(255,0,0,{:.3});padding:2px\">{label}</span> ",
            ts.scores[i],
            norm.data()[i]
        ));
    }
    s.push_str("</p>\n</body></html>\n");
    s
}
