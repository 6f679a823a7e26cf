//! Saliency-quality metrics: confidence drops under hard and soft masking,
//! the area-weighted drop, and insertion/deletion curves.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::saliency::TokenSaliency;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DropRecord {
    pub sample_id: usize,
    pub p_orig: f64,
    pub p_mask: f64,
    /// `max(0, (p_orig - p_mask) / p_orig)`, 0 when `p_orig` is 0.
    pub drop: f64,
    /// Binarized salient fraction of the map that produced `p_mask`.
    pub area: f64,
}

impl DropRecord {
    pub fn new(sample_id: usize, p_orig: f64, p_mask: f64, area: f64) -> Self {
        let drop = if p_orig > 0.0 {
            ((p_orig - p_mask) / p_orig).max(0.0)
        } else {
            0.0
        };
        DropRecord {
            sample_id,
            p_orig,
            p_mask,
            drop,
            area,
        }
    }
}

/// A mean over records with the division-guard exclusions counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanDrop {
    pub value: f64,
    pub used: usize,
    /// Records skipped because `p_orig` was 0.
    pub excluded: usize,
}

fn mean_over(records: &[DropRecord], f: impl Fn(&DropRecord) -> Result<f64>) -> Result<MeanDrop> {
    if records.is_empty() {
        return Err(Error::Contract("no drop records".into()));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for r in records.iter().filter(|r| r.p_orig > 0.0) {
        sum += f(r)?;
        used += 1;
    }
    let excluded = records.len() - used;
    if used == 0 {
        return Err(Error::Contract("every record has p_orig = 0".into()));
    }
    Ok(MeanDrop {
        value: sum / used as f64,
        used,
        excluded,
    })
}

/// Mean clamped relative confidence drop.
pub fn avg_drop(records: &[DropRecord]) -> Result<MeanDrop> {
    mean_over(records, |r| Ok(r.drop))
}

/// `f(x) = 5x / (1 + 256 x⁵)`: 0 at 0, maximal (= 1) at x = 0.25.
pub fn area_weight(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain {
            value: x,
            domain: "[0, 1]",
        });
    }
    Ok(5.0 * x / (1.0 + 256.0 * x.powi(5)))
}

/// Mean of `drop · f(area)`.
pub fn ead(records: &[DropRecord]) -> Result<MeanDrop> {
    mean_over(records, |r| Ok(r.drop * area_weight(r.area)?))
}

/// Per-channel mean intensity of `[C, H, W]`.
pub fn channel_means(image: &Tensor) -> Result<Vec<f64>> {
    let (c, hw) = image_dims(image)?;
    Ok((0..c)
        .map(|k| image.data()[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect())
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h * w)),
        _ => Err(Error::dim("image", image.shape(), &[0, 0, 0])),
    }
}

fn check_mask_args(image: &Tensor, cam: &Tensor, fill: &[f64]) -> Result<(usize, usize)> {
    let (c, hw) = image_dims(image)?;
    if cam.shape() != &image.shape()[1..] {
        return Err(Error::dim("mask vs image", cam.shape(), image.shape()));
    }
    if fill.len() != c {
        return Err(Error::dim("fill vs channels", &[fill.len()], &[c]));
    }
    Ok((c, hw))
}

/// `I · (1 - cam) + μ · cam`, per channel.
pub fn soft_mask(image: &Tensor, cam: &Tensor, mu: &[f64]) -> Result<Tensor> {
    let (_, hw) = check_mask_args(image, cam, mu)?;
    let m = cam.data();
    Ok(Tensor::from_fn(image.shape().to_vec(), |i| {
        let (k, p) = (i / hw, i % hw);
        image.data()[i] * (1.0 - m[p]) + mu[k] * m[p]
    }))
}

/// Pixels with `cam >= threshold` replaced by `fill`, per channel.
pub fn hard_mask(image: &Tensor, cam: &Tensor, threshold: f64, fill: &[f64]) -> Result<Tensor> {
    let (_, hw) = check_mask_args(image, cam, fill)?;
    let m = cam.data();
    Ok(Tensor::from_fn(image.shape().to_vec(), |i| {
        let (k, p) = (i / hw, i % hw);
        if m[p] >= threshold {
            fill[k]
        } else {
            image.data()[i]
        }
    }))
}

/// Fraction of cells at or above `threshold`.
pub fn saliency_area(cam: &Tensor, threshold: f64) -> f64 {
    let n = cam.numel();
    cam.data().iter().filter(|&&v| v >= threshold).count() as f64 / n as f64
}

// ---- curves ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub fractions: Vec<f64>,
    pub confidences: Vec<f64>,
}

impl Curve {
    pub fn new(fractions: Vec<f64>, confidences: Vec<f64>) -> Result<Self> {
        if fractions.len() != confidences.len() || fractions.len() < 2 {
            return Err(Error::dim(
                "curve",
                &[fractions.len()],
                &[confidences.len()],
            ));
        }
        if fractions[0] != 0.0
            || *fractions.last().expect("len >= 2") != 1.0
            || fractions.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::Contract(
                "curve fractions must rise from 0 to 1".into(),
            ));
        }
        Ok(Curve {
            fractions,
            confidences,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("fraction,confidence\n");
        for (f, c) in self.fractions.iter().zip(&self.confidences) {
            s.push_str(&format!("{f},{c}\n"));
        }
        s
    }
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &Curve) -> f64 {
    curve
        .fractions
        .windows(2)
        .zip(curve.confidences.windows(2))
        .map(|(f, c)| (f[1] - f[0]) * (c[0] + c[1]) / 2.0)
        .sum()
}

/// Pixel indices by descending saliency; ties keep row-major order.
pub fn saliency_order(cam: &Tensor) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cam.numel()).collect();
    let d = cam.data();
    idx.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
    idx
}

/// True-class probability of every image in a batch.
pub type ImageEvaluator<'a> = dyn Fn(&[&Tensor]) -> Result<Vec<f64>> + 'a;

fn progressive(
    eval: &ImageEvaluator<'_>,
    image: &Tensor,
    cam: &Tensor,
    steps: usize,
    insertion: bool,
) -> Result<Curve> {
    if steps < 2 {
        return Err(Error::Config("curves need at least 2 steps".into()));
    }
    let mu = channel_means(image)?;
    let (c, hw) = check_mask_args(image, cam, &mu)?;
    let order = saliency_order(cam);
    let baseline = Tensor::from_fn(image.shape().to_vec(), |i| mu[i / hw]);
    let (start, end) = if insertion {
        (&baseline, image)
    } else {
        (image, &baseline)
    };
    let fractions: Vec<f64> = (0..=steps).map(|k| k as f64 / steps as f64).collect();
    let mut frames = Vec::with_capacity(steps + 1);
    let mut cur = start.clone();
    let mut done = 0;
    for &f in &fractions {
        let upto = (f * hw as f64).round() as usize;
        for &p in &order[done..upto] {
            for k in 0..c {
                cur.data_mut()[k * hw + p] = end.data()[k * hw + p];
            }
        }
        done = upto;
        frames.push(cur.clone());
    }
    let refs: Vec<&Tensor> = frames.iter().collect();
    Curve::new(fractions, eval(&refs)?)
}

/// Confidence as the most salient pixels are restored onto a constant-μ baseline.
pub fn insertion_curve(
    eval: &ImageEvaluator<'_>,
    image: &Tensor,
    cam: &Tensor,
    steps: usize,
) -> Result<Curve> {
    progressive(eval, image, cam, steps, true)
}

/// Confidence as the most salient pixels are replaced by μ.
pub fn deletion_curve(
    eval: &ImageEvaluator<'_>,
    image: &Tensor,
    cam: &Tensor,
    steps: usize,
) -> Result<Curve> {
    progressive(eval, image, cam, steps, false)
}

// ---- tokens ---------------------------------------------------------------------

/// True-class probability of every sequence in a batch.
pub type TokenEvaluator<'a> = dyn Fn(&[&[usize]]) -> Result<Vec<f64>> + 'a;

/// Replaces the `ceil(top_frac · len)` highest-scoring tokens with
/// `mask_token` and records the confidence drop.
pub fn token_perturb_drop(
    eval: &TokenEvaluator<'_>,
    sample_id: usize,
    tokens: &[usize],
    saliency: &TokenSaliency,
    top_frac: f64,
    mask_token: usize,
) -> Result<DropRecord> {
    let len = saliency.scores.len();
    if tokens.is_empty() || len == 0 {
        return Err(Error::Contract("empty sequence".into()));
    }
    if !(0.0..=1.0).contains(&top_frac) {
        return Err(Error::Domain {
            value: top_frac,
            domain: "[0, 1]",
        });
    }
    let k = top_masked_count(len, top_frac);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.sort_by(|&a, &b| saliency.scores[b].total_cmp(&saliency.scores[a]));
    let mut masked = tokens.to_vec();
    for &i in &idx[..k] {
        masked[saliency.positions[i]] = mask_token;
    }
    let p = eval(&[tokens, &masked])?;
    Ok(DropRecord::new(
        sample_id,
        p[0],
        p[1],
        k as f64 / len as f64,
    ))
}

/// `ceil(top_frac · len)`, guarded against float noise just above an integer.
pub fn top_masked_count(len: usize, top_frac: f64) -> usize {
    let x = top_frac * len as f64;
    ((x - 1e-9).ceil().max(0.0) as usize).min(len)
}

// ---- random baselines and tests ------------------------------------------------------

/// A uniformly random map whose binarized (0.5) area is `round(area · H · W)` cells.
pub fn random_map_with_area(h: usize, w: usize, area: f64, rng: &mut Rng) -> Tensor {
    let n = h * w;
    let k = ((area.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut data = vec![0.0; n];
    for (rank, &i) in idx.iter().enumerate() {
        data[i] = if rank < k {
            rng.gen_range(0.5..=1.0)
        } else {
            rng.gen_range(0.0..0.5)
        };
    }
    Tensor::new([h, w], data).expect("h * w cells")
}

/// One-sided sign test that `a` tends to exceed `b`: ties are dropped and
/// the result is `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_greater(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let mut wins = 0;
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        if x != y {
            n += 1;
            if x > y {
                wins += 1;
            }
        }
    }
    if n == 0 {
        return (0, 0, 1.0);
    }
    // log-space binomial tail
    let ln_half_n = -(n as f64) * std::f64::consts::LN_2;
    let mut ln_c = 0.0f64;
    let mut terms = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            ln_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= wins {
            terms.push(ln_c + ln_half_n);
        }
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let p = m.exp() * terms.iter().map(|t| (t - m).exp()).sum::<f64>();
    (wins, n, p.min(1.0))
}

// ---- reports --------------------------------------------------------------------------

/// Aggregate metric values of one saliency method.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub method: String,
    pub avg_drop: f64,
    pub sad: f64,
    pub ead: f64,
    pub insertion_auc: f64,
    pub deletion_auc: f64,
    pub n: usize,
    pub excluded: usize,
}

pub const RECORD_CSV_HEADER: &str = "id,p_orig,p_mask,drop,area,f_area";
pub const SUMMARY_CSV_HEADER: &str =
    "method,avg_drop,sad,ead,insertion_auc,deletion_auc,n,excluded";

pub fn records_csv(records: &[DropRecord]) -> Result<String> {
    let mut s = format!("{RECORD_CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sample_id,
            r.p_orig,
            r.p_mask,
            r.drop,
            r.area,
            area_weight(r.area)?
        ));
    }
    Ok(s)
}

pub fn summary_csv(rows: &[MetricSummary]) -> String {
    let mut s = format!("{SUMMARY_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method, r.avg_drop, r.sad, r.ead, r.insertion_auc, r.deletion_auc, r.n, r.excluded
        ));
    }
    s
}

/// Per-sample outcome of evaluating one map on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    /// Hard-mask (threshold 0.5, μ fill) record.
    pub hard: DropRecord,
    /// Soft-mask record.
    pub soft: DropRecord,
    pub insertion: Curve,
    pub deletion: Curve,
}

/// Every image metric for one sample. `cam` must be normalized and match
/// the image's spatial size; `p_orig` comes from the unmasked image.
pub fn image_metrics(
    eval: &ImageEvaluator<'_>,
    sample_id: usize,
    image: &Tensor,
    cam: &Tensor,
    steps: usize,
) -> Result<ImageMetrics> {
    let mu = channel_means(image)?;
    let area = saliency_area(cam, 0.5);
    let hard = hard_mask(image, cam, 0.5, &mu)?;
    let soft = soft_mask(image, cam, &mu)?;
    let p = eval(&[image, &hard, &soft])?;
    Ok(ImageMetrics {
        hard: DropRecord::new(sample_id, p[0], p[1], area),
        soft: DropRecord::new(sample_id, p[0], p[2], area),
        insertion: insertion_curve(eval, image, cam, steps)?,
        deletion: deletion_curve(eval, image, cam, steps)?,
    })
}

/// Aggregates per-sample image metrics; EAD weights the hard-mask drops.
pub fn summarize(method: &str, per_sample: &[ImageMetrics]) -> Result<MetricSummary> {
    let hard: Vec<DropRecord> = per_sample.iter().map(|m| m.hard.clone()).collect();
    let soft: Vec<DropRecord> = per_sample.iter().map(|m| m.soft.clone()).collect();
    let a = avg_drop(&hard)?;
    let n = per_sample.len() as f64;
    Ok(MetricSummary {
        method: method.to_string(),
        avg_drop: a.value,
        sad: avg_drop(&soft)?.value,
        ead: ead(&hard)?.value,
        insertion_auc: per_sample.iter().map(|m| auc(&m.insertion)).sum::<f64>() / n,
        deletion_auc: per_sample.iter().map(|m| auc(&m.deletion)).sum::<f64>() / n,
        n: per_sample.len(),
        excluded: a.excluded,
    })
}
