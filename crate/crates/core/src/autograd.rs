//! Reverse-mode differentiation over a recorded tape of tensor primitives.
//!
//! Every primitive appends one node whose inputs already live on the tape, so
//! node order is a topological order and a single reverse sweep visits each
//! node once. The graph stays alive until [`Tape::clear`] so that several
//! scalar losses recorded in one forward pass can each be differentiated with
//! [`Tape::grad_wrt`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::linalg::{gemm, View};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    out_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_plane()
    }
}

/// `[outer, channels, inner]` view of an activation tensor.
#[derive(Clone, Copy, Debug)]
struct ChannelLayout {
    outer: usize,
    channels: usize,
    inner: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResizeGeom {
    planes: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Sum(usize),
    Reshape(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AddChannelBias {
        x: usize,
        bias: usize,
        layout: ChannelLayout,
    },
    AddRowBias(usize, usize),
    ScaleChannels {
        x: usize,
        gate: usize,
        layout: ChannelLayout,
        broadcast: bool,
    },
    GlobalAvgPool {
        x: usize,
        inner: usize,
    },
    MeanRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    NearestResize {
        x: usize,
        geom: ResizeGeom,
    },
    AvgPool {
        x: usize,
        geom: ResizeGeom,
        factor: usize,
    },
    PadChannels {
        x: usize,
        outer: usize,
        from: usize,
        inner: usize,
    },
    BroadcastRows(usize),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRowBias(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | Relu(a)
            | Sigmoid(a)
            | Sum(a)
            | Reshape(a)
            | MeanRows(a)
            | SoftmaxRows(a)
            | BroadcastRows(a) => vec![*a],
            Conv2d { input, kernel, .. } => vec![*input, *kernel],
            AddChannelBias { x, bias, .. } => vec![*x, *bias],
            ScaleChannels { x, gate, .. } => vec![*x, *gate],
            GlobalAvgPool { x, .. }
            | NearestResize { x, .. }
            | AvgPool { x, .. }
            | PadChannels { x, .. }
            | SliceCols { x, .. } => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            GatherRows { table, .. } => vec![*table],
            ConcatCols(v) | ConcatRows(v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

type Adjoints = Vec<Option<Vec<f64>>>;

fn accumulate(adj: &mut Adjoints, idx: usize, delta: Vec<f64>) {
    match &mut adj[idx] {
        Some(a) => a.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(adj: &mut Adjoints, idx: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[idx].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn spatial_layout(shape: &[usize], op: &'static str) -> Result<ChannelLayout> {
    match *shape {
        [c, h, w] => Ok(ChannelLayout {
            outer: 1,
            channels: c,
            inner: h * w,
        }),
        [n, c, h, w] => Ok(ChannelLayout {
            outer: n,
            channels: c,
            inner: h * w,
        }),
        _ => Err(Error::Contract(format!(
            "{op} expects [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops the recorded graph. Vars issued before this call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract("variable is not on this tape".into()));
        }
        Ok(v.index)
    }

    /// Value of a variable. Panics if `v` belongs to another tape.
    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.check(v).expect("value() on a foreign variable");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.check(v).expect("foreign variable")].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(
            op.inputs().iter().all(|&i| i < self.nodes.len()),
            "inputs must precede their consumer"
        );
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same value, cut off from the gradient flow.
    pub fn stop_grad(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(
            View::new(self.nodes[ia].value.data(), m, k),
            View::new(self.nodes[ib].value.data(), k, n),
            &mut out,
            0.0,
        );
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::MatMul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let [m, n] = *t.shape() else {
            return Err(Error::Contract(format!(
                "transpose expects a matrix, got {:?}",
                t.shape()
            )));
        };
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let value = Tensor::new([n, m], out)?;
        Ok(self.push(value, Op::Transpose(ia)))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| v * s);
        Ok(self.push(value, Op::Scale(ia, s)))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.push(value, Op::Relu(ia)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(stable_sigmoid);
        Ok(self.push(value, Op::Sigmoid(ia)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(ia)))
    }

    // ---- convolution and spatial ops -----------------------------------

    /// Cross-correlation of `[C,H,W]` (or `[N,C,H,W]`) with `[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ix, ik) = (self.check(x)?, self.check(kernel)?);
        let (sx, sk) = (self.nodes[ix].value.shape(), self.nodes[ik].value.shape());
        let (batch, batched, c, h, w) = match *sx {
            [c, h, w] => (1, false, c, h, w),
            [n, c, h, w] => (n, true, c, h, w),
            _ => return Err(Error::dim("conv2d", sx, sk)),
        };
        let [o, kc, kh, kw] = *sk else {
            return Err(Error::dim("conv2d", sx, sk));
        };
        if kc != c {
            return Err(Error::dim("conv2d", sx, sk));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if kh > ph || kw > pw {
            return Err(Error::Config(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {ph}x{pw}"
            )));
        }
        if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d output extent is not integral: ({h}+2*{pad}-{kh})/{stride}"
            )));
        }
        let geom = ConvGeom {
            batch,
            channels: c,
            height: h,
            width: w,
            out_channels: o,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        };
        let cols = im2col(self.nodes[ix].value.data(), &geom);
        let plane = geom.out_plane();
        let ncols = geom.col_cols();
        let mut big = vec![0.0; o * ncols];
        gemm(
            View::new(self.nodes[ik].value.data(), o, geom.col_rows()),
            View::new(&cols, geom.col_rows(), ncols),
            &mut big,
            0.0,
        );
        let mut out = vec![0.0; batch * o * plane];
        for n in 0..batch {
            for oc in 0..o {
                let src = &big[oc * ncols + n * plane..oc * ncols + (n + 1) * plane];
                out[(n * o + oc) * plane..(n * o + oc + 1) * plane].copy_from_slice(src);
            }
        }
        let shape = if batched {
            vec![batch, o, geom.out_h, geom.out_w]
        } else {
            vec![o, geom.out_h, geom.out_w]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input: ix,
                kernel: ik,
                geom,
                cols,
            },
        ))
    }

    /// Adds a per-channel bias `[C]` to `[C,H,W]` or `[N,C,H,W]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let layout = spatial_layout(tx.shape(), "add_channel_bias")?;
        if tb.shape() != [layout.channels] {
            return Err(Error::dim("add_channel_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let mut out = tx.data().to_vec();
        for (chunk_idx, chunk) in out.chunks_mut(layout.inner).enumerate() {
            let bc = b[chunk_idx % layout.channels];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::AddChannelBias {
                x: ix,
                bias: ib,
                layout,
            },
        ))
    }

    /// Adds a `[D]` bias along the last axis of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let d = *tx.shape().last().unwrap_or(&1);
        if tb.shape() != [d] {
            return Err(Error::dim("add_row_bias", tx.shape(), tb.shape()));
        }
        let b = tb.data();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::AddRowBias(ix, ib)))
    }

    /// Channel-wise multiply. Images `[N,C,H,W]` take a gate `[N,C]`,
    /// `[C,H,W]` takes `[C]` or `[1,C]`; token matrices `[T,D]` take a
    /// `[D]`/`[1,D]` gate broadcast over the sequence.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (ix, ig) = (self.check(x)?, self.check(gate)?);
        let (tx, tg) = (&self.nodes[ix].value, &self.nodes[ig].value);
        let (layout, broadcast) = match *tx.shape() {
            [t, d] => (
                ChannelLayout {
                    outer: t,
                    channels: d,
                    inner: 1,
                },
                true,
            ),
            _ => {
                let l = spatial_layout(tx.shape(), "scale_channels")?;
                (l, false)
            }
        };
        let expected = if broadcast {
            layout.channels
        } else {
            layout.outer * layout.channels
        };
        if tg.numel() != expected {
            return Err(Error::dim("scale_channels", tx.shape(), tg.shape()));
        }
        let g = tg.data();
        let mut out = tx.data().to_vec();
        for o in 0..layout.outer {
            for c in 0..layout.channels {
                let gv = if broadcast {
                    g[c]
                } else {
                    g[o * layout.channels + c]
                };
                let base = (o * layout.channels + c) * layout.inner;
                out[base..base + layout.inner]
                    .iter_mut()
                    .for_each(|v| *v *= gv);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::ScaleChannels {
                x: ix,
                gate: ig,
                layout,
                broadcast,
            },
        ))
    }

    /// Spatial mean per channel: `[C,H,W] -> [C]`, `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let layout = spatial_layout(tx.shape(), "global_avg_pool")?;
        let inv = 1.0 / layout.inner as f64;
        let out: Vec<f64> = tx
            .data()
            .chunks(layout.inner)
            .map(|c| c.iter().sum::<f64>() * inv)
            .collect();
        let shape = if tx.rank() == 3 {
            vec![layout.channels]
        } else {
            vec![layout.outer, layout.channels]
        };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::GlobalAvgPool {
                x: ix,
                inner: layout.inner,
            },
        ))
    }

    /// Mean over the rows of a `[T,D]` matrix, giving `[D]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let [t, d] = *tx.shape() else {
            return Err(Error::Contract(format!(
                "mean_rows expects [T,D], got {:?}",
                tx.shape()
            )));
        };
        let mut out = vec![0.0; d];
        for row in tx.data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|v| *v /= t as f64);
        let value = Tensor::new([d], out)?;
        Ok(self.push(value, Op::MeanRows(ix)))
    }

    /// Standardizes along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let tx = &self.nodes[ix].value;
        let d = *tx.shape().last().unwrap_or(&1);
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), g.shape()));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let [_, c] = *tx.shape() else {
            return Err(Error::Contract(format!(
                "softmax_rows expects a matrix, got {:?}",
                tx.shape()
            )));
        };
        let mut out = tx.data().to_vec();
        out.chunks_mut(c).for_each(softmax_in_place);
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftmaxRows(ix)))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`. Accepts
    /// `[B,C]` logits or a single `[C]` vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let tl = &self.nodes[il].value;
        let (b, c) = match *tl.shape() {
            [c] => (1, c),
            [b, c] => (b, c),
            _ => {
                return Err(Error::Contract(format!(
                    "cross entropy expects [B,C] logits, got {:?}",
                    tl.shape()
                )))
            }
        };
        if targets.len() != b {
            return Err(Error::dim(
                "softmax_cross_entropy",
                tl.shape(),
                &[targets.len()],
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                index: bad,
                bound: c,
            });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Nearest-neighbour resize of the two trailing spatial axes.
    pub fn nearest_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let shape = tx.shape();
        if shape.len() < 3 || out_h == 0 || out_w == 0 {
            return Err(Error::Contract(format!(
                "nearest_resize expects [..,H,W] and positive target, got {shape:?}"
            )));
        }
        let (in_h, in_w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let geom = ResizeGeom {
            planes: tx.numel() / (in_h * in_w),
            in_h,
            in_w,
            out_h,
            out_w,
        };
        let src = tx.data();
        let mut out = vec![0.0; geom.planes * out_h * out_w];
        for p in 0..geom.planes {
            for y in 0..out_h {
                let sy = y * in_h / out_h;
                for xx in 0..out_w {
                    let sx = xx * in_w / out_w;
                    out[(p * out_h + y) * out_w + xx] = src[(p * in_h + sy) * in_w + sx];
                }
            }
        }
        let mut new_shape = shape.to_vec();
        let r = new_shape.len();
        new_shape[r - 2] = out_h;
        new_shape[r - 1] = out_w;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(value, Op::NearestResize { x: ix, geom }))
    }

    /// Non-overlapping `factor x factor` average pooling.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let shape = tx.shape();
        spatial_layout(shape, "avg_pool")?;
        let (in_h, in_w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if factor == 0 || in_h % factor != 0 || in_w % factor != 0 {
            return Err(Error::Config(format!(
                "avg_pool factor {factor} does not divide {in_h}x{in_w}"
            )));
        }
        let geom = ResizeGeom {
            planes: tx.numel() / (in_h * in_w),
            in_h,
            in_w,
            out_h: in_h / factor,
            out_w: in_w / factor,
        };
        let src = tx.data();
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; geom.planes * geom.out_h * geom.out_w];
        for p in 0..geom.planes {
            for y in 0..in_h {
                for xx in 0..in_w {
                    out[(p * geom.out_h + y / factor) * geom.out_w + xx / factor] +=
                        src[(p * in_h + y) * in_w + xx] * inv;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        let r = new_shape.len();
        new_shape[r - 2] = geom.out_h;
        new_shape[r - 1] = geom.out_w;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(
            value,
            Op::AvgPool {
                x: ix,
                geom,
                factor,
            },
        ))
    }

    /// Zero-extends the channel axis of `[C,H,W]`/`[N,C,H,W]` to `channels`.
    pub fn pad_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let layout = spatial_layout(tx.shape(), "pad_channels")?;
        if channels < layout.channels {
            return Err(Error::Config(format!(
                "pad_channels cannot shrink {} to {channels}",
                layout.channels
            )));
        }
        let mut out = vec![0.0; layout.outer * channels * layout.inner];
        for o in 0..layout.outer {
            let src =
                &tx.data()[o * layout.channels * layout.inner..][..layout.channels * layout.inner];
            out[o * channels * layout.inner..][..src.len()].copy_from_slice(src);
        }
        let mut shape = tx.shape().to_vec();
        let r = shape.len();
        shape[r - 3] = channels;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::PadChannels {
                x: ix,
                outer: layout.outer,
                from: layout.channels,
                inner: layout.inner,
            },
        ))
    }

    /// Repeats a `[D]` (or `[1,D]`) vector into `rows` rows.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let iv = self.check(v)?;
        let tv = &self.nodes[iv].value;
        let d = tv.numel();
        if !(tv.shape() == [d] || tv.shape() == [1, d]) || rows == 0 {
            return Err(Error::Contract(format!(
                "broadcast_rows expects a vector, got {:?}",
                tv.shape()
            )));
        }
        let out = tv.data().repeat(rows);
        let value = Tensor::new([rows, d], out)?;
        Ok(self.push(value, Op::BroadcastRows(iv)))
    }

    /// Row lookup `table[ids[t], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let tt = &self.nodes[it].value;
        let [v, d] = *tt.shape() else {
            return Err(Error::Contract("gather_rows expects a [V,D] table".into()));
        };
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new([ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table: it,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.check(x)?;
        let tx = &self.nodes[ix].value;
        let [r, c] = *tx.shape() else {
            return Err(Error::Contract("slice_cols expects a matrix".into()));
        };
        if len == 0 || start + len > c {
            return Err(Error::Index {
                index: start + len,
                bound: c,
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for row in tx.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new([r, len], out)?;
        Ok(self.push(value, Op::SliceCols { x: ix, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let rows = match idx.first().map(|&i| self.nodes[i].value.shape()) {
            Some(&[r, _]) => r,
            _ => return Err(Error::Contract("concat_cols expects matrices".into())),
        };
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            match *self.nodes[i].value.shape() {
                [r, c] if r == rows => widths.push(c),
                _ => {
                    return Err(Error::dim(
                        "concat_cols",
                        &[rows],
                        self.nodes[i].value.shape(),
                    ))
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new([rows, total], out)?;
        Ok(self.push(value, Op::ConcatCols(idx)))
    }

    /// Stacks matrices `[r_i, C]` (or vectors `[C]`, as one row) vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Contract("concat_rows with no parts".into()));
        };
        let cols = *self.nodes[first].value.shape().last().unwrap_or(&1);
        let mut out = Vec::new();
        for &i in &idx {
            let t = &self.nodes[i].value;
            let ok =
                matches!(*t.shape(), [c] if c == cols) || matches!(*t.shape(), [_, c] if c == cols);
            if !ok {
                return Err(Error::dim("concat_rows", &[cols], t.shape()));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        let value = Tensor::new([rows, cols], out)?;
        Ok(self.push(value, Op::ConcatRows(idx)))
    }

    // ---- differentiation -----------------------------------------------

    fn scalar_index(&self, loss: Var) -> Result<usize> {
        let il = self.check(loss)?;
        if self.nodes[il].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        Ok(il)
    }

    /// Accumulates `dloss/dleaf` into every gradient-requiring leaf reachable
    /// from `loss`. Repeated calls add up until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.scalar_index(loss)?;
        let adj = self.sweep(il, 0, &|_, n| matches!(n.op, Op::Leaf));
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if let (Some(a), true) = (a, node.requires_grad) {
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(a).for_each(|(g, d)| *g += d),
                    slot @ None => *slot = Some(a),
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Gradient accumulated by [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let i = self.check(v).ok()?;
        let node = &self.nodes[i];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// `dloss/dparam` without touching accumulated gradients. Unreached
    /// parameters get a zero tensor.
    pub fn grad_wrt(&self, loss: Var, param: Var) -> Result<Tensor> {
        let il = self.scalar_index(loss)?;
        let ip = self.check(param)?;
        let shape = self.nodes[ip].value.shape().to_vec();
        if ip > il {
            return Ok(Tensor::zeros(shape));
        }
        let mut adj = self.sweep(il, ip, &|i, _| i == ip);
        match adj[ip].take() {
            Some(g) => Tensor::new(shape, g),
            None => Ok(Tensor::zeros(shape)),
        }
    }

    /// Gradients of one loss with respect to several parameters in a single sweep.
    pub fn grads_wrt(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let il = self.scalar_index(loss)?;
        let idx: Vec<usize> = params
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let lowest = idx.iter().copied().min().unwrap_or(il);
        let mut adj = if lowest > il {
            vec![None; il + 1]
        } else {
            self.sweep(il, lowest, &|i, _| idx.contains(&i))
        };
        Ok(idx
            .iter()
            .map(|&i| {
                let shape = self.nodes[i].value.shape().to_vec();
                match adj.get_mut(i).and_then(Option::take) {
                    Some(g) => Tensor::new(shape, g).expect("grad shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    /// Reverse sweep from `loss` down to node `lowest`. Adjoints are dropped
    /// as soon as they have been pushed to the inputs unless `keep` asks for them.
    fn sweep(&self, loss: usize, lowest: usize, keep: &dyn Fn(usize, &Node) -> bool) -> Adjoints {
        let mut adj: Adjoints = vec![None; loss + 1];
        adj[loss] = Some(vec![1.0]);
        for i in (lowest..=loss).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                if !keep(i, node) {
                    adj[i] = None;
                }
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(node, &g, &mut adj);
            if keep(i, node) {
                adj[i] = Some(g);
            }
        }
        adj
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn backprop_node(&self, node: &Node, g: &[f64], adj: &mut Adjoints) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    accumulate_with(adj, *a, m * k, |ga| {
                        gemm(
                            View::new(g, m, n),
                            View::transposed(tb.data(), k, n),
                            ga,
                            1.0,
                        )
                    });
                }
                if self.needs(*b) {
                    accumulate_with(adj, *b, k * n, |gb| {
                        gemm(
                            View::transposed(ta.data(), m, k),
                            View::new(g, m, n),
                            gb,
                            1.0,
                        )
                    });
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (m, n) = (self.val(*a).shape()[0], self.val(*a).shape()[1]);
                    accumulate_with(adj, *a, m * n, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(adj, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    accumulate(
                        adj,
                        *a,
                        g.iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                    );
                }
                if self.needs(*b) {
                    accumulate(
                        adj,
                        *b,
                        g.iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                    );
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.iter().map(|v| v * s).collect());
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = self.val(*a).data();
                    accumulate(
                        adj,
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    );
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = node.value.data();
                    accumulate(
                        adj,
                        *a,
                        g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    );
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let n = self.val(*a).numel();
                    accumulate(adj, *a, vec![g[0]; n]);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let plane = geom.out_plane();
                let ncols = geom.col_cols();
                let o = geom.out_channels;
                let mut g_big = vec![0.0; o * ncols];
                for n in 0..geom.batch {
                    for oc in 0..o {
                        g_big[oc * ncols + n * plane..oc * ncols + (n + 1) * plane]
                            .copy_from_slice(&g[(n * o + oc) * plane..(n * o + oc + 1) * plane]);
                    }
                }
                let rows = geom.col_rows();
                if self.needs(*kernel) {
                    accumulate_with(adj, *kernel, o * rows, |gk| {
                        gemm(
                            View::new(&g_big, o, ncols),
                            View::transposed(cols, rows, ncols),
                            gk,
                            1.0,
                        )
                    });
                }
                if self.needs(*input) {
                    let mut dcols = vec![0.0; rows * ncols];
                    gemm(
                        View::transposed(self.val(*kernel).data(), o, rows),
                        View::new(&g_big, o, ncols),
                        &mut dcols,
                        0.0,
                    );
                    let len = self.val(*input).numel();
                    accumulate_with(adj, *input, len, |gx| col2im(&dcols, geom, gx));
                }
            }
            Op::AddChannelBias { x, bias, layout } => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.to_vec());
                }
                if self.needs(*bias) {
                    accumulate_with(adj, *bias, layout.channels, |gb| {
                        for (ci, chunk) in g.chunks(layout.inner).enumerate() {
                            gb[ci % layout.channels] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.to_vec());
                }
                if self.needs(*bias) {
                    let d = self.val(*bias).numel();
                    accumulate_with(adj, *bias, d, |gb| {
                        for row in g.chunks(d) {
                            gb.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                        }
                    });
                }
            }
            Op::ScaleChannels {
                x,
                gate,
                layout,
                broadcast,
            } => {
                let xv = self.val(*x).data();
                let gv = self.val(*gate).data();
                let idx = |o: usize, c: usize| {
                    if *broadcast {
                        c
                    } else {
                        o * layout.channels + c
                    }
                };
                if self.needs(*x) {
                    accumulate_with(adj, *x, xv.len(), |gx| {
                        for o in 0..layout.outer {
                            for c in 0..layout.channels {
                                let s = gv[idx(o, c)];
                                let base = (o * layout.channels + c) * layout.inner;
                                for i in base..base + layout.inner {
                                    gx[i] += g[i] * s;
                                }
                            }
                        }
                    });
                }
                if self.needs(*gate) {
                    accumulate_with(adj, *gate, gv.len(), |gg| {
                        for o in 0..layout.outer {
                            for c in 0..layout.channels {
                                let base = (o * layout.channels + c) * layout.inner;
                                let s: f64 =
                                    (base..base + layout.inner).map(|i| g[i] * xv[i]).sum();
                                gg[idx(o, c)] += s;
                            }
                        }
                    });
                }
            }
            Op::GlobalAvgPool { x, inner } => {
                if self.needs(*x) {
                    let inv = 1.0 / *inner as f64;
                    let mut gx = Vec::with_capacity(g.len() * inner);
                    for &gv in g {
                        gx.extend(std::iter::repeat_n(gv * inv, *inner));
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::MeanRows(x) => {
                if self.needs(*x) {
                    let t = self.val(*x).shape()[0];
                    let inv = 1.0 / t as f64;
                    let row: Vec<f64> = g.iter().map(|v| v * inv).collect();
                    accumulate(adj, *x, row.repeat(t));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.val(*gamma).data();
                let d = gam.len();
                if self.needs(*x) {
                    accumulate_with(adj, *x, xhat.len(), |gx| {
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let hr = &xhat[r * d..(r + 1) * d];
                            let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                            let m1 = dh.iter().sum::<f64>() / d as f64;
                            let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gx[r * d + j] += rs * (dh[j] - m1 - hr[j] * m2);
                            }
                        }
                    });
                }
                if self.needs(*gamma) {
                    accumulate_with(adj, *gamma, d, |gg| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    });
                }
                if self.needs(*beta) {
                    accumulate_with(adj, *beta, d, |gb| {
                        for gr in g.chunks(d) {
                            gb.iter_mut().zip(gr).for_each(|(b, v)| *b += v);
                        }
                    });
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let c = node.value.shape()[1];
                    let y = node.value.data();
                    let mut gx = vec![0.0; y.len()];
                    for ((gxr, yr), gr) in gx.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let b = targets.len();
                    let c = probs.len() / b;
                    let s = g[0] / b as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * c + t] -= s;
                    }
                    accumulate(adj, *logits, gl);
                }
            }
            Op::NearestResize { x, geom } => {
                if self.needs(*x) {
                    let len = geom.planes * geom.in_h * geom.in_w;
                    accumulate_with(adj, *x, len, |gx| {
                        for p in 0..geom.planes {
                            for y in 0..geom.out_h {
                                let sy = y * geom.in_h / geom.out_h;
                                for xx in 0..geom.out_w {
                                    let sx = xx * geom.in_w / geom.out_w;
                                    gx[(p * geom.in_h + sy) * geom.in_w + sx] +=
                                        g[(p * geom.out_h + y) * geom.out_w + xx];
                                }
                            }
                        }
                    });
                }
            }
            Op::AvgPool { x, geom, factor } => {
                if self.needs(*x) {
                    let inv = 1.0 / (factor * factor) as f64;
                    let len = geom.planes * geom.in_h * geom.in_w;
                    accumulate_with(adj, *x, len, |gx| {
                        for p in 0..geom.planes {
                            for y in 0..geom.in_h {
                                for xx in 0..geom.in_w {
                                    gx[(p * geom.in_h + y) * geom.in_w + xx] += g
                                        [(p * geom.out_h + y / factor) * geom.out_w + xx / factor]
                                        * inv;
                                }
                            }
                        }
                    });
                }
            }
            Op::PadChannels {
                x,
                outer,
                from,
                inner,
            } => {
                if self.needs(*x) {
                    let to = g.len() / (outer * inner);
                    let mut gx = Vec::with_capacity(outer * from * inner);
                    for o in 0..*outer {
                        gx.extend_from_slice(&g[o * to * inner..][..from * inner]);
                    }
                    accumulate(adj, *x, gx);
                }
            }
            Op::BroadcastRows(v) => {
                if self.needs(*v) {
                    let d = self.val(*v).numel();
                    accumulate_with(adj, *v, d, |gv| {
                        for row in g.chunks(d) {
                            gv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    });
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let d = self.val(*table).shape()[1];
                    let len = self.val(*table).numel();
                    accumulate_with(adj, *table, len, |gt| {
                        for (t, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[t * d + j];
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let c = self.val(*x).shape()[1];
                    let len = node.value.shape()[1];
                    let n = self.val(*x).numel();
                    accumulate_with(adj, *x, n, |gx| {
                        for (r, row) in g.chunks(len).enumerate() {
                            for j in 0..len {
                                gx[r * c + start + j] += row[j];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).shape()[1];
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(adj, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    if self.needs(p) {
                        accumulate(adj, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_plane();
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let src = &x[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (c * g.kh + i) * g.kw + j;
                    let dst = &mut cols[row * ncols + n * plane..][..plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        let dst_row = &mut dst[oy * g.out_w..][..g.out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane = g.out_plane();
    let ncols = g.col_cols();
    for n in 0..g.batch {
        for c in 0..g.channels {
            let dst = &mut dx[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
            for i in 0..g.kh {
                for j in 0..g.kw {
                    let row = (c * g.kh + i) * g.kw + j;
                    let src = &dcols[row * ncols + n * plane..][..plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + i) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let ix = (ox * g.stride + j) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
