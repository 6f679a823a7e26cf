//! Collaboration between the gate and supervision gradients on a shared
//! `W1`, correlation statistics, block-wise collaboration maps and the
//! ReLU entropy-reduction check.

use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Tape;
use crate::block::W1GradMask;
use crate::error::{Error, Result};
use crate::hosts::{softmax, ForwardOptions, Host, ResNet};
use crate::metrics::{channel_means, soft_mask, DropRecord};
use crate::rng::{self, streams};
use crate::saliency::{explain_image, WeightFilterConfig};
use crate::tensor::Tensor;

/// Denominator guard of the gradient cosine.
pub const COSINE_EPS: f64 = 1e-8;

/// `a · b / (‖a‖ ‖b‖ + ε)` over flattened gradients.
pub fn gradient_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("gradient_cosine", a.shape(), b.shape()));
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    Ok(dot / (na.sqrt() * nb.sqrt() + COSINE_EPS))
}

/// The two `W1` gradients of one site: the gate-side gradient (from the next
/// site's supervision loss) and the supervision-side gradient (from the
/// site's own loss).
#[derive(Clone, Debug, PartialEq)]
pub struct SiteGradients {
    pub gate: Tensor,
    pub supervision: Tensor,
}

impl SiteGradients {
    pub fn cosine(&self) -> Result<f64> {
        gradient_cosine(&self.gate, &self.supervision)
    }
}

/// Computes both `W1` gradients of `site` on one forward pass, optionally
/// restricting the `W1` gradient to a spatial region of the site input.
pub fn site_gradients<H: Host>(
    model: &H,
    input: &H::Input,
    label: usize,
    site: usize,
    mask: Option<W1GradMask>,
) -> Result<SiteGradients> {
    let n_sites = model.site_count();
    if site + 1 >= n_sites {
        return Err(Error::Contract(format!(
            "site {site} has no successor (model has {n_sites} sites)"
        )));
    }
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let opts = ForwardOptions {
        w1_mask: mask.map(|m| (site, m)),
        ..Default::default()
    };
    let rec = model.forward_collect(&mut tape, &bound, input, &opts)?;
    let own = tape.softmax_cross_entropy(rec.sites[site].out.ds_logits, &[label])?;
    let next = tape.softmax_cross_entropy(rec.sites[site + 1].out.ds_logits, &[label])?;
    let w1 = bound.var(model.site_params()[site].w1);
    Ok(SiteGradients {
        gate: tape.grad_wrt(next, w1)?,
        supervision: tape.grad_wrt(own, w1)?,
    })
}

/// Collaboration strength of `site` for one sample.
pub fn collaboration_cosine<H: Host>(
    model: &H,
    input: &H::Input,
    label: usize,
    site: usize,
) -> Result<f64> {
    site_gradients(model, input, label, site, None)?.cosine()
}

/// Spatial resolution `(H, W)` of a CNN site's input.
pub fn site_resolution(model: &ResNet, site: usize) -> Result<(usize, usize)> {
    let block = *model.cfg().mhex_sites.get(site).ok_or(Error::Index {
        index: site,
        bound: model.site_count(),
    })?;
    let r = model.cfg().block_resolution(block);
    Ok((r, r))
}

/// Mask of grid cell `(i, j)`: feature rows `floor(i·H/g) .. floor((i+1)·H/g)`
/// and likewise for columns.
pub fn grid_cell_mask(h: usize, w: usize, grid: usize, i: usize, j: usize) -> Tensor {
    let (r0, r1) = (i * h / grid, (i + 1) * h / grid);
    let (c0, c1) = (j * w / grid, (j + 1) * w / grid);
    Tensor::from_fn([h, w], |p| {
        let (y, x) = (p / w, p % w);
        (y >= r0 && y < r1 && x >= c0 && x < c1) as u8 as f64
    })
}

/// `grid x grid` map of gradient cosines, each cell restricting the `W1`
/// gradients to its region of the site input.
pub fn blockwise_quality(
    model: &ResNet,
    image: &Tensor,
    label: usize,
    site: usize,
    grid: usize,
) -> Result<Tensor> {
    if grid == 0 {
        return Err(Error::Config("grid must be at least 1".into()));
    }
    let (h, w) = site_resolution(model, site)?;
    if grid > h || grid > w {
        return Err(Error::Config(format!(
            "grid {grid} exceeds the {h}x{w} feature resolution of site {site}"
        )));
    }
    let mut out = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let mask = W1GradMask {
                mask: grid_cell_mask(h, w, grid, i, j),
            };
            out.push(site_gradients(model, image, label, site, Some(mask))?.cosine()?);
        }
    }
    Tensor::new([grid, grid], out)
}

/// Maps cosines from `[-1, 1]` to `[0, 1]` for rendering.
pub fn cosine_to_unit(map: &Tensor) -> Tensor {
    map.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

// ---- statistics ---------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationResult {
    pub r: f64,
    pub t: f64,
    /// Two-sided p-value from Student's t with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

/// Lanczos approximation (g = 7, 9 terms) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, &g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction of the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const TOL: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < TOL {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain {
            value: a.min(b),
            domain: "a, b > 0",
        });
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain {
            value: x,
            domain: "[0, 1]",
        });
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the expansion converges fast on this side of the mean; use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x) / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x) / b)
    }
}

/// Two-sided tail `P(|T| >= |t|)` of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    if t.is_infinite() {
        return Ok(0.0);
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Sample Pearson correlation with its t statistic and two-sided p-value.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::dim("pearson", &[n], &[y.len()]));
    }
    if n < 3 {
        return Err(Error::Contract("pearson needs at least 3 pairs".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let t = if r.abs() == 1.0 {
        r.signum() * f64::INFINITY
    } else {
        r * df.sqrt() / (1.0 - r * r).sqrt()
    };
    Ok(CorrelationResult {
        r,
        t,
        p: student_t_two_sided(t, df)?,
        n,
    })
}

// ---- correlation triangle ------------------------------------------------------------

/// One sample's collaboration strength at one site, with the sample's
/// confidence and soft-mask drop.
#[derive(Clone, Debug, PartialEq)]
pub struct CollabRecord {
    pub sample_id: usize,
    pub site: usize,
    pub cosine: f64,
    pub p_orig: f64,
    pub sad_drop: f64,
}

/// Sites whose collaboration is measured: the last three with a successor.
pub fn triangle_sites(site_count: usize) -> Vec<usize> {
    let with_successor = site_count.saturating_sub(1);
    (with_successor.saturating_sub(3)..with_successor).collect()
}

/// Collaboration records of one image at every triangle site. `p_orig` is
/// the final head's probability of `label`; the soft-mask drop uses the MHEX
/// map for `label`.
pub fn collab_records(
    model: &ResNet,
    sample_id: usize,
    image: &Tensor,
    label: usize,
    wcfg: &WeightFilterConfig,
) -> Result<Vec<CollabRecord>> {
    let sites = triangle_sites(model.site_count());
    if sites.is_empty() {
        return Err(Error::Unsupported("need at least two MHEX sites".into()));
    }
    let prob = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let opts = ForwardOptions {
            skip_sites: true,
            ..Default::default()
        };
        let heads = model.forward_heads(&mut tape, &bound, &[x], &opts)?;
        Ok(softmax(tape.value(heads.final_logits).row(0))[label])
    };
    let p_orig = prob(image)?;
    let s = image.shape();
    let cam = explain_image(model, image, label, wcfg)?.upsampled(s[1], s[2]);
    let masked = soft_mask(image, &cam, &channel_means(image)?)?;
    let sad_drop = DropRecord::new(sample_id, p_orig, prob(&masked)?, 0.0).drop;
    sites
        .into_iter()
        .map(|site| {
            Ok(CollabRecord {
                sample_id,
                site,
                cosine: collaboration_cosine(model, image, label, site)?,
                p_orig,
                sad_drop,
            })
        })
        .collect()
}

/// Which quantities a triangle entry correlates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrianglePair {
    CosineSad,
    CosinePOrig,
    SadPOrig,
}

impl TrianglePair {
    pub fn label(self) -> &'static str {
        match self {
            TrianglePair::CosineSad => "cosine~sad",
            TrianglePair::CosinePOrig => "cosine~p_orig",
            TrianglePair::SadPOrig => "sad~p_orig",
        }
    }
}

#[derive(Debug)]
pub struct TriangleEntry {
    pub pair: TrianglePair,
    /// Site of the cosine; `None` for the site-independent edge.
    pub site: Option<usize>,
    pub result: Result<CorrelationResult>,
}

/// Cosine-vs-SAD and cosine-vs-p_orig per site, then SAD-vs-p_orig once.
/// Each entry carries its own result, so one degenerate pair does not hide
/// the others.
pub fn correlation_triangle(records: &[CollabRecord]) -> Vec<TriangleEntry> {
    let mut sites: Vec<usize> = records.iter().map(|r| r.site).collect();
    sites.sort_unstable();
    sites.dedup();
    let mut out = Vec::with_capacity(2 * sites.len() + 1);
    for pair in [TrianglePair::CosineSad, TrianglePair::CosinePOrig] {
        for &s in &sites {
            let rs: Vec<&CollabRecord> = records.iter().filter(|r| r.site == s).collect();
            let cos: Vec<f64> = rs.iter().map(|r| r.cosine).collect();
            let other: Vec<f64> = rs
                .iter()
                .map(|r| {
                    if pair == TrianglePair::CosineSad {
                        r.sad_drop
                    } else {
                        r.p_orig
                    }
                })
                .collect();
            out.push(TriangleEntry {
                pair,
                site: Some(s),
                result: pearson(&cos, &other),
            });
        }
    }
    // one row per sample for the site-independent edge
    let first = sites.first().copied();
    let per_sample: Vec<&CollabRecord> = records.iter().filter(|r| Some(r.site) == first).collect();
    let sad: Vec<f64> = per_sample.iter().map(|r| r.sad_drop).collect();
    let p: Vec<f64> = per_sample.iter().map(|r| r.p_orig).collect();
    out.push(TriangleEntry {
        pair: TrianglePair::SadPOrig,
        site: None,
        result: pearson(&sad, &p),
    });
    out
}

/// `pair,site,r,t,p,n`; undefined correlations are written as `NaN` with n = 0.
pub fn triangle_csv(entries: &[TriangleEntry]) -> String {
    let mut s = String::from("pair,site,r,t,p,n\n");
    for e in entries {
        let site = e.site.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        match &e.result {
            Ok(c) => s.push_str(&format!(
                "{},{site},{},{},{},{}\n",
                e.pair.label(),
                c.r,
                c.t,
                c.p,
                c.n
            )),
            Err(_) => s.push_str(&format!("{},{site},NaN,NaN,NaN,0\n", e.pair.label())),
        }
    }
    s
}

pub fn collab_csv(records: &[CollabRecord]) -> String {
    let mut s = String::from("id,site,cosine,p_orig,sad_drop\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.sample_id, r.site, r.cosine, r.p_orig, r.sad_drop
        ));
    }
    s
}

// ---- entropy ---------------------------------------------------------------------------

/// Histogram estimate of differential entropy: `-Σ p_i ln p_i + ln Δ`.
pub fn histogram_entropy(samples: &[f64], bins: usize) -> Result<f64> {
    if samples.is_empty() || bins == 0 {
        return Err(Error::Contract("histogram needs samples and bins".into()));
    }
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Contract("histogram of a constant sample".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in samples {
        counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
    }
    let n = samples.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(h + width.ln())
}

/// Monte-Carlo entropy reduction of ReLU on standard normal input.
///
/// The post-ReLU entropy is the mixed sum of a discrete term `q ln(1/q)` for
/// the mass `q` at zero and the histogram entropy of the positive part.
pub fn relu_entropy_drop(n_samples: usize, bins: usize, seed: u64) -> Result<f64> {
    if n_samples < 100_000 {
        return Err(Error::Config(
            "relu_entropy_drop needs at least 1e5 samples".into(),
        ));
    }
    let mut rng = rng::stream(seed, streams::ENTROPY);
    let t: Vec<f64> = (0..n_samples)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let h_t = histogram_entropy(&t, bins)?;
    let positive: Vec<f64> = t.iter().cloned().filter(|&v| v > 0.0).collect();
    let q = 1.0 - positive.len() as f64 / n_samples as f64;
    let discrete = if q > 0.0 { q * (1.0 / q).ln() } else { 0.0 };
    let continuous = histogram_entropy(&positive, bins)?;
    Ok(h_t - (discrete + continuous))
}
