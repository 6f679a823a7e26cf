//! The MHEX unit: a sigmoid channel gate and a deep-supervision head that
//! share one square matrix `W1`, read through the equivalent matrix
//! `W2 * W1`.
//!
//! Site activations come in three layouts: batched images `[N,C,H,W]`, a
//! single image `[C,H,W]`, or a token matrix `[T,D]` whose "global average
//! pool" is the mean over the sequence. Pooled vectors are always `[N,C]`
//! (with `N = 1` for the single-sample layouts).

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, View};
use crate::tensor::Tensor;

/// How the per-head logits are combined into one training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Cross-entropy of the summed logits of every head.
    Pretrain,
    /// Sum of the per-head cross-entropies.
    Finetune,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Pretrain => "pretrain",
            LossMode::Finetune => "finetune",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(LossMode::Pretrain),
            "finetune" => Ok(LossMode::Finetune),
            other => Err(Error::Config(format!(
                "unknown loss mode {other:?} (expected pretrain|finetune)"
            ))),
        }
    }
}

/// Parameter values of one MHEX site.
#[derive(Clone, Debug, PartialEq)]
pub struct MhexParams {
    /// `[C, C]`, shared by the gate and the supervision head.
    pub w1: Tensor,
    /// `[n_class, C]`.
    pub w2: Tensor,
    /// Projection of the global feature map: a 1x1 kernel `[C, C_global, 1, 1]`
    /// for image hosts or a linear map `[D_global, C]` for token hosts.
    pub proj_global: Tensor,
}

impl MhexParams {
    pub fn new(w1: Tensor, w2: Tensor, proj_global: Tensor) -> Result<Self> {
        let p = MhexParams {
            w1,
            w2,
            proj_global,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn n_class(&self) -> usize {
        self.w2.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        match (self.w1.shape(), self.w2.shape()) {
            ([a, b], [_, c]) if a == b && b == c => Ok(()),
            _ => Err(Error::dim("mhex params", self.w1.shape(), self.w2.shape())),
        }
    }

    pub fn equivalent_matrix(&self) -> Result<Tensor> {
        equivalent_matrix(&self.w1, &self.w2)
    }
}

/// Everything one site produces during a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MhexOutput {
    /// Gate `[N,C]`, every entry in (0, 1).
    pub gate: Var,
    /// `gate ⊙ x`, same shape as the site input.
    pub x_att: Var,
    /// Supervision logits `[N, n_class]`.
    pub ds_logits: Var,
    /// `ReLU(x + x_global)`, the features saliency is read from.
    pub relu_features: Var,
}

/// Restricts which positions of the site input feed the gradient of `W1`.
///
/// The forward value is unchanged: positions outside the mask still
/// contribute to the pooled vector, but through a detached copy of `W1`.
#[derive(Clone, Debug)]
pub struct W1GradMask {
    /// Spatial mask `[H,W]` for images or `[T]` for tokens, entries in {0,1}.
    pub mask: Tensor,
}

/// `W2 * W1`, the linear map from site channels to class scores.
pub fn equivalent_matrix(w1: &Tensor, w2: &Tensor) -> Result<Tensor> {
    let (s1, s2) = (w1.shape(), w2.shape());
    let (n, c) = match (s1, s2) {
        ([a, b], [n, c]) if a == b && b == c => (*n, *c),
        _ => return Err(Error::dim("equivalent_matrix", s2, s1)),
    };
    let mut out = vec![0.0; n * c];
    gemm(
        View::new(w2.data(), n, c),
        View::new(w1.data(), c, c),
        &mut out,
        0.0,
    );
    Tensor::new([n, c], out)
}

/// Pools a site tensor to `[N,C]`.
pub fn pool(tape: &mut Tape, x: Var) -> Result<Var> {
    match *tape.shape(x) {
        [_, _, _, _] => tape.global_avg_pool(x),
        [c, _, _] => {
            let p = tape.global_avg_pool(x)?;
            tape.reshape(p, [1, c])
        }
        [_, d] => {
            let p = tape.mean_rows(x)?;
            tape.reshape(p, [1, d])
        }
        ref s => Err(Error::Contract(format!(
            "cannot pool a site tensor of shape {s:?}"
        ))),
    }
}

fn channels_of(shape: &[usize]) -> Option<usize> {
    match *shape {
        [_, c, _, _] | [c, _, _] | [_, c] => Some(c),
        _ => None,
    }
}

/// Broadcasts a `[H,W]`/`[T]` mask to the full site shape.
fn expand_mask(site_shape: &[usize], mask: &Tensor) -> Result<Tensor> {
    let m = mask.data();
    let full = match *site_shape {
        [n, c, h, w] if mask.shape() == [h, w] => {
            let mut v = Vec::with_capacity(n * c * h * w);
            for _ in 0..n * c {
                v.extend_from_slice(m);
            }
            v
        }
        [c, h, w] if mask.shape() == [h, w] => m.repeat(c),
        [t, d] if mask.shape() == [t] => {
            m.iter().flat_map(|&v| std::iter::repeat_n(v, d)).collect()
        }
        _ => return Err(Error::dim("w1 gradient mask", site_shape, mask.shape())),
    };
    Tensor::new(site_shape.to_vec(), full)
}

/// `pool(src) · W1ᵀ`, optionally with the W1 gradient restricted to the
/// masked positions of `src`.
fn pooled_through_w1(
    tape: &mut Tape,
    src: Var,
    w1t: Var,
    w1t_detached: Option<Var>,
    mask: Option<&W1GradMask>,
) -> Result<Var> {
    match (mask, w1t_detached) {
        (Some(m), Some(w1d)) => {
            let shape = tape.shape(src).to_vec();
            let inside = expand_mask(&shape, &m.mask)?;
            let outside = inside.map(|v| 1.0 - v);
            let inside = tape.constant(inside);
            let outside = tape.constant(outside);
            let src_in = tape.mul(src, inside)?;
            let src_out = tape.mul(src, outside)?;
            let p_in = pool(tape, src_in)?;
            let p_out = pool(tape, src_out)?;
            let a = tape.matmul(p_in, w1t)?;
            let b = tape.matmul(p_out, w1d)?;
            tape.add(a, b)
        }
        _ => {
            let p = pool(tape, src)?;
            tape.matmul(p, w1t)
        }
    }
}

fn check_site(tape: &Tape, x: Var, x_global: Var, w1: Var) -> Result<usize> {
    let (sx, sg) = (tape.shape(x), tape.shape(x_global));
    if sx != sg {
        return Err(Error::dim("mhex site input vs projected global", sx, sg));
    }
    let c = channels_of(sx).ok_or_else(|| Error::dim("mhex site input", sx, &[]))?;
    if tape.shape(w1) != [c, c] {
        return Err(Error::dim("mhex W1 vs site channels", tape.shape(w1), sx));
    }
    Ok(c)
}

/// `g = σ(W1 · GAP(x + x_global))`, `x_att = g ⊙ x`.
pub fn attention_gate(tape: &mut Tape, x: Var, x_global: Var, w1: Var) -> Result<(Var, Var)> {
    check_site(tape, x, x_global, w1)?;
    let w1t = tape.transpose(w1)?;
    let s = tape.add(x, x_global)?;
    let pre = pooled_through_w1(tape, s, w1t, None, None)?;
    let g = tape.sigmoid(pre)?;
    let x_att = tape.scale_channels(x, g)?;
    Ok((g, x_att))
}

/// `W2 · W1 · GAP(ReLU(x + x_global))`; returns the logits and the ReLU features.
pub fn ds_logits(tape: &mut Tape, x: Var, x_global: Var, w1: Var, w2: Var) -> Result<(Var, Var)> {
    check_site(tape, x, x_global, w1)?;
    let w1t = tape.transpose(w1)?;
    let w2t = tape.transpose(w2)?;
    let s = tape.add(x, x_global)?;
    let relu = tape.relu(s)?;
    let h = pooled_through_w1(tape, relu, w1t, None, None)?;
    let logits = tape.matmul(h, w2t)?;
    Ok((logits, relu))
}

/// Full site evaluation: gate and supervision head sharing one `W1`.
pub fn mhex_forward(
    tape: &mut Tape,
    x: Var,
    x_global: Var,
    w1: Var,
    w2: Var,
    mask: Option<&W1GradMask>,
) -> Result<MhexOutput> {
    check_site(tape, x, x_global, w1)?;
    if tape.shape(w2).len() != 2 || tape.shape(w2)[1] != tape.shape(w1)[0] {
        return Err(Error::dim("mhex W2 vs W1", tape.shape(w2), tape.shape(w1)));
    }
    let w1t = tape.transpose(w1)?;
    let w1t_detached = match mask {
        Some(_) => {
            let d = tape.stop_grad(w1t)?;
            Some(d)
        }
        None => None,
    };
    let w2t = tape.transpose(w2)?;
    let s = tape.add(x, x_global)?;

    let pre = pooled_through_w1(tape, s, w1t, w1t_detached, mask)?;
    let gate = tape.sigmoid(pre)?;
    let x_att = tape.scale_channels(x, gate)?;

    let relu_features = tape.relu(s)?;
    let h = pooled_through_w1(tape, relu_features, w1t, w1t_detached, mask)?;
    let ds_logits = tape.matmul(h, w2t)?;
    Ok(MhexOutput {
        gate,
        x_att,
        ds_logits,
        relu_features,
    })
}

/// Combined loss over all heads (the host's final head included).
pub fn mhex_loss(tape: &mut Tape, heads: &[Var], targets: &[usize], mode: LossMode) -> Result<Var> {
    let Some((&first, rest)) = heads.split_first() else {
        return Err(Error::Contract("mhex_loss needs at least one head".into()));
    };
    let shape = tape.shape(first).to_vec();
    if let Some(&bad) = rest.iter().find(|&&h| tape.shape(h) != shape.as_slice()) {
        return Err(Error::dim("mhex_loss heads", &shape, tape.shape(bad)));
    }
    match mode {
        LossMode::Pretrain => {
            let mut total = first;
            for &h in rest {
                total = tape.add(total, h)?;
            }
            tape.softmax_cross_entropy(total, targets)
        }
        LossMode::Finetune => {
            let mut loss = tape.softmax_cross_entropy(first, targets)?;
            for &h in rest {
                let l = tape.softmax_cross_entropy(h, targets)?;
                loss = tape.add(loss, l)?;
            }
            Ok(loss)
        }
    }
}
