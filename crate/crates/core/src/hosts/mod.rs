//! Toy MHEX-instrumented hosts: a small residual CNN and a small transformer
//! encoder, with parameter accounting, training and checkpointing.
//!
//! The backbone never reads anything an MHEX site produces, so stripping all
//! sites leaves the final head bit-identical. Sites are chained to each
//! other instead: the gated features `x_att` of one site are added to the
//! input of the next site, which is what lets the next site's supervision
//! loss reach this site's `W1`.

mod checkpoint;
mod resnet;
mod train;
mod transformer;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};
pub use resnet::{ResNet, ResNetConfig};
pub use train::{
    evaluate_heads, predict_proba, softmax, train, EpochLog, PredictionHead, TrainConfig, TrainLog,
};
pub use transformer::{Transformer, TransformerConfig, MASK_TOKEN, PAD_TOKEN};

use crate::autograd::{Tape, Var};
use crate::block::{MhexOutput, W1GradMask};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Places every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Copies every parameter whose name also exists in `other` (shapes must agree).
    pub fn copy_matching(&mut self, other: &ParamSet) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            if let Some(src) = other.get(name) {
                if src.shape() != t.shape() {
                    return Err(Error::dim("copy_matching", t.shape(), src.shape()));
                }
                *t = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }
}

/// Tape handles for a [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }
}

/// Parameter indices of one MHEX site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SiteParams {
    pub w1: usize,
    pub w2: usize,
    pub proj: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Detach the backbone activations before they enter MHEX sites, so
    /// deep-supervision gradients stop at the site inputs.
    pub stop_ds_gradient: bool,
    /// Evaluate only the backbone and the final head.
    pub skip_sites: bool,
    /// Restrict the W1 gradient of one site to a spatial region.
    pub w1_mask: Option<(usize, W1GradMask)>,
}

#[derive(Clone, Debug)]
pub struct SiteRecord {
    /// Host block (ResNet) or layer (transformer) the site reads.
    pub position: usize,
    /// Raw backbone activations at the site, `f^(l)` or `A^(l)`.
    pub activations: Var,
    /// Site input after the chain from the previous site is added.
    pub input: Var,
    /// Projected and resized global features.
    pub x_global: Var,
    pub out: MhexOutput,
}

/// All artifacts of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    /// Final host head, `[N, n_class]`.
    pub final_logits: Var,
    pub sites: Vec<SiteRecord>,
    /// Final-stage features the global context is built from.
    pub global_features: Var,
}

impl ForwardRecord {
    pub fn heads(&self) -> HeadLogits {
        HeadLogits {
            final_logits: self.final_logits,
            site_logits: self.sites.iter().map(|s| s.out.ds_logits).collect(),
        }
    }
}

/// Logits of every head for a batch, each `[B, n_class]`.
#[derive(Clone, Debug)]
pub struct HeadLogits {
    pub final_logits: Var,
    pub site_logits: Vec<Var>,
}

impl HeadLogits {
    /// Site heads shallow to deep, then the final host head.
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.site_logits.clone();
        v.push(self.final_logits);
        v
    }
}

/// Parameter count added by MHEX sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhexParamCount {
    /// `Σ (C² + n_class·C)` over sites: the shared `W1` and `W2`.
    pub core: usize,
    /// Global projections and any per-site normalization.
    pub auxiliary: usize,
}

impl MhexParamCount {
    pub fn total(&self) -> usize {
        self.core + self.auxiliary
    }
}

/// `Σ (C² + n_class·C)` over the site channel widths.
pub fn count_site_params(site_channels: &[usize], n_class: usize) -> usize {
    site_channels.iter().map(|&c| c * c + n_class * c).sum()
}

/// A model that can be trained and explained.
pub trait Host: Send + Sync {
    type Input: ?Sized + Sync;

    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn n_class(&self) -> usize;
    fn site_count(&self) -> usize;
    fn site_params(&self) -> &[SiteParams];
    fn config(&self) -> KvConfig;
    fn mhex_param_count(&self) -> MhexParamCount;

    /// Logits of every head for a batch.
    fn forward_heads(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&Self::Input],
        opts: &ForwardOptions,
    ) -> Result<HeadLogits>;

    /// Full record (activations, gates, features) for one input.
    fn forward_collect(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &Self::Input,
        opts: &ForwardOptions,
    ) -> Result<ForwardRecord>;

    /// `W2 · W1` of every site, shallow to deep.
    fn equivalent_matrices(&self) -> Result<Vec<Tensor>> {
        self.site_params()
            .iter()
            .map(|s| {
                let p = self.params();
                crate::block::equivalent_matrix(&p.tensors()[s.w1], &p.tensors()[s.w2])
            })
            .collect()
    }
}

/// Either host, for code that picks the architecture at run time.
#[derive(Clone, Debug)]
pub enum Model {
    ResNet(ResNet),
    Transformer(Transformer),
}

impl Model {
    pub fn from_config(cfg: &KvConfig) -> Result<Self> {
        match cfg.raw("arch") {
            Some("resnet") => Ok(Model::ResNet(ResNet::new(ResNetConfig::from_kv(cfg)?)?)),
            Some("transformer") => Ok(Model::Transformer(Transformer::new(
                TransformerConfig::from_kv(cfg)?,
            )?)),
            other => Err(Error::Config(format!("unknown arch {other:?}"))),
        }
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::ResNet(m) => m.params(),
            Model::Transformer(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::ResNet(m) => m.params_mut(),
            Model::Transformer(m) => m.params_mut(),
        }
    }

    pub fn config(&self) -> KvConfig {
        match self {
            Model::ResNet(m) => m.config(),
            Model::Transformer(m) => m.config(),
        }
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        save_checkpoint(&self.config(), self.params(), path)
    }

    pub fn as_resnet(&self) -> Result<&ResNet> {
        match self {
            Model::ResNet(m) => Ok(m),
            Model::Transformer(_) => Err(Error::Unsupported("operation needs a CNN host".into())),
        }
    }

    pub fn as_transformer(&self) -> Result<&Transformer> {
        match self {
            Model::Transformer(m) => Ok(m),
            Model::ResNet(_) => Err(Error::Unsupported(
                "operation needs a transformer host".into(),
            )),
        }
    }
}

// ---- initialization ------------------------------------------------------

/// Kaiming-style normal init with the given fan-in.
pub(crate) fn kaiming(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
}

/// Uniform in `[-bound, bound]`.
pub(crate) fn small_uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound))
}
