use crate::autograd::{Tape, Var};
use crate::block::{mhex_forward, W1GradMask};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

use super::{
    count_site_params, kaiming, small_uniform, Bound, ForwardOptions, ForwardRecord, HeadLogits,
    Host, MhexParamCount, ParamSet, SiteParams, SiteRecord,
};

/// Token id used for masking perturbations.
pub const MASK_TOKEN: usize = 0;
/// Padding id; padded positions are dropped before the encoder runs.
pub const PAD_TOKEN: usize = 1;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_hidden: usize,
    pub max_seq: usize,
    pub n_class: usize,
    /// Number of shallowest sites read by token saliency.
    pub saliency_layers: usize,
    pub seed: u64,
}

impl TransformerConfig {
    pub fn toy(vocab_size: usize, n_class: usize, seed: u64) -> Self {
        TransformerConfig {
            vocab_size,
            d_model: 32,
            n_heads: 4,
            n_layers: 4,
            ffn_hidden: 64,
            max_seq: 20,
            n_class,
            saliency_layers: 3,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1");
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.saliency_layers == 0 || self.saliency_layers > self.n_layers {
            return bad("saliency_layers must be in 1..=n_layers");
        }
        if self.n_class < 2 {
            return bad("n_class must be at least 2");
        }
        if self.vocab_size <= PAD_TOKEN + 1 {
            return bad("vocab_size must leave room beyond the mask and pad ids");
        }
        if self.max_seq == 0 || self.ffn_hidden == 0 {
            return bad("max_seq and ffn_hidden must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("arch", "transformer")
            .set("vocab_size", self.vocab_size)
            .set("d_model", self.d_model)
            .set("n_heads", self.n_heads)
            .set("n_layers", self.n_layers)
            .set("ffn_hidden", self.ffn_hidden)
            .set("max_seq", self.max_seq)
            .set("n_class", self.n_class)
            .set("saliency_layers", self.saliency_layers)
            .set("init_seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let cfg = TransformerConfig {
            vocab_size: kv.get("vocab_size")?,
            d_model: kv.get("d_model")?,
            n_heads: kv.get("n_heads")?,
            n_layers: kv.get("n_layers")?,
            ffn_hidden: kv.get("ffn_hidden")?,
            max_seq: kv.get("max_seq")?,
            n_class: kv.get("n_class")?,
            saliency_layers: kv.get("saliency_layers")?,
            seed: kv.get("init_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// One site per layer; auxiliary parameters are the global projection and
    /// the LayerNorm applied to the chained `x_att`.
    pub fn count_mhex_params(&self) -> MhexParamCount {
        let d = self.d_model;
        let chans = vec![d; self.n_layers];
        MhexParamCount {
            core: count_site_params(&chans, self.n_class),
            auxiliary: self.n_layers * (d * d + 2 * d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerParams {
    ln1: (usize, usize),
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

/// Pre-LN transformer encoder with one MHEX site after the attention
/// sublayer of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    cfg: TransformerConfig,
    params: ParamSet,
    tok: usize,
    pos: usize,
    layers: Vec<LayerParams>,
    ln_f: (usize, usize),
    head_w: usize,
    head_b: usize,
    sites: Vec<SiteParams>,
    site_ln: Vec<(usize, usize)>,
}

fn push_ln(params: &mut ParamSet, prefix: &str, d: usize) -> (usize, usize) {
    (
        params.push(format!("{prefix}.g"), Tensor::full([d], 1.0)),
        params.push(format!("{prefix}.b"), Tensor::zeros([d])),
    )
}

impl Transformer {
    pub fn new(cfg: TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, streams::INIT);
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let hdim = cfg.ffn_hidden;
        let tok = params.push("embed.tok", kaiming(&[cfg.vocab_size, d], d, 0.5, &mut rng));
        let pos = params.push("embed.pos", kaiming(&[cfg.max_seq, d], d, 0.25, &mut rng));

        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            let p = format!("layer{l}");
            let ln1 = push_ln(&mut params, &format!("{p}.ln1"), d);
            let lin =
                |params: &mut ParamSet, rng: &mut rng::Rng, name: &str, i: usize, o: usize| {
                    params.push(
                        format!("{p}.{name}"),
                        kaiming(&[i, o], i, 0.5f64.sqrt(), rng),
                    )
                };
            let wq = lin(&mut params, &mut rng, "attn.wq", d, d);
            let wk = lin(&mut params, &mut rng, "attn.wk", d, d);
            let wv = lin(&mut params, &mut rng, "attn.wv", d, d);
            let wo = lin(&mut params, &mut rng, "attn.wo", d, d);
            let bo = params.push(format!("{p}.attn.bo"), Tensor::zeros([d]));
            let ln2 = push_ln(&mut params, &format!("{p}.ln2"), d);
            let f1w = lin(&mut params, &mut rng, "ffn.w1", d, hdim);
            let f1b = params.push(format!("{p}.ffn.b1"), Tensor::zeros([hdim]));
            let f2w = lin(&mut params, &mut rng, "ffn.w2", hdim, d);
            let f2b = params.push(format!("{p}.ffn.b2"), Tensor::zeros([d]));
            layers.push(LayerParams {
                ln1,
                wq,
                wk,
                wv,
                wo,
                bo,
                ln2,
                ff1: (f1w, f1b),
                ff2: (f2w, f2b),
            });
        }
        let ln_f = push_ln(&mut params, "ln_f", d);
        let head_w = params.push(
            "head.w",
            kaiming(&[d, cfg.n_class], d, 0.5f64.sqrt(), &mut rng),
        );
        let head_b = params.push("head.b", Tensor::zeros([cfg.n_class]));

        let bound = 1.0 / (d as f64).sqrt();
        let mut sites = Vec::new();
        let mut site_ln = Vec::new();
        for i in 0..cfg.n_layers {
            let w1 = params.push(
                format!("site{i}.w1"),
                small_uniform(&[d, d], bound, &mut rng),
            );
            let w2 = params.push(
                format!("site{i}.w2"),
                small_uniform(&[cfg.n_class, d], bound, &mut rng),
            );
            let proj = params.push(
                format!("site{i}.proj"),
                small_uniform(&[d, d], bound, &mut rng),
            );
            sites.push(SiteParams { w1, w2, proj });
            site_ln.push(push_ln(&mut params, &format!("site{i}.ln"), d));
        }
        Ok(Transformer {
            cfg,
            params,
            tok,
            pos,
            layers,
            ln_f,
            head_w,
            head_b,
            sites,
            site_ln,
        })
    }

    pub fn cfg(&self) -> &TransformerConfig {
        &self.cfg
    }

    /// Positions of the non-pad tokens, in order.
    pub fn kept_positions(tokens: &[usize]) -> Vec<usize> {
        (0..tokens.len())
            .filter(|&j| tokens[j] != PAD_TOKEN)
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if tokens.len() > self.cfg.max_seq {
            return Err(Error::dim(
                "token sequence",
                &[tokens.len()],
                &[self.cfg.max_seq],
            ));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Index {
                index: t,
                bound: self.cfg.vocab_size,
            });
        }
        let kept = Self::kept_positions(tokens);
        if kept.is_empty() {
            return Err(Error::Contract("sequence has no non-pad tokens".into()));
        }
        Ok(kept)
    }

    fn ln(&self, tape: &mut Tape, bound: &Bound, x: Var, p: (usize, usize)) -> Result<Var> {
        tape.layer_norm(x, bound.var(p.0), bound.var(p.1), LN_EPS)
    }

    fn linear(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        w: usize,
        b: Option<usize>,
    ) -> Result<Var> {
        let y = tape.matmul(x, bound.var(w))?;
        match b {
            Some(b) => tape.add_row_bias(y, bound.var(b)),
            None => Ok(y),
        }
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, x: Var, lp: &LayerParams) -> Result<Var> {
        let q = self.linear(tape, bound, x, lp.wq, None)?;
        let k = self.linear(tape, bound, x, lp.wk, None)?;
        let v = self.linear(tape, bound, x, lp.wv, None)?;
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax_rows(s)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        self.linear(tape, bound, cat, lp.wo, Some(lp.bo))
    }

    /// Backbone on one sequence; returns the post-attention residual stream of
    /// every layer, the final normalized features and the logits `[1, n_class]`.
    fn backbone(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
    ) -> Result<(Vec<Var>, Var, Var)> {
        let kept = self.check_tokens(tokens)?;
        let ids: Vec<usize> = kept.iter().map(|&j| tokens[j]).collect();
        let e = tape.gather_rows(bound.var(self.tok), &ids)?;
        let p = tape.gather_rows(bound.var(self.pos), &kept)?;
        let mut h = tape.add(e, p)?;
        let mut sites = Vec::with_capacity(self.layers.len());
        for lp in &self.layers {
            let a = self.ln(tape, bound, h, lp.ln1)?;
            let a = self.attention(tape, bound, a, lp)?;
            h = tape.add(h, a)?;
            sites.push(h);
            let f = self.ln(tape, bound, h, lp.ln2)?;
            let f = self.linear(tape, bound, f, lp.ff1.0, Some(lp.ff1.1))?;
            let f = tape.relu(f)?;
            let f = self.linear(tape, bound, f, lp.ff2.0, Some(lp.ff2.1))?;
            h = tape.add(h, f)?;
        }
        let hf = self.ln(tape, bound, h, self.ln_f)?;
        let pooled = tape.mean_rows(hf)?;
        let d = self.cfg.d_model;
        let pooled = tape.reshape(pooled, [1, d])?;
        let logits = self.linear(tape, bound, pooled, self.head_w, Some(self.head_b))?;
        Ok((sites, hf, logits))
    }

    fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: &[usize],
        opts: &ForwardOptions,
    ) -> Result<ForwardRecord> {
        let (acts, hf, final_logits) = self.backbone(tape, bound, tokens)?;
        let global = if opts.stop_ds_gradient {
            tape.stop_grad(hf)?
        } else {
            hf
        };
        let mut sites = Vec::new();
        if opts.skip_sites {
            return Ok(ForwardRecord {
                final_logits,
                sites,
                global_features: global,
            });
        }
        let t = tape.shape(hf)[0];
        let d = self.cfg.d_model;
        let gmean = tape.mean_rows(global)?;
        let gmean = tape.reshape(gmean, [1, d])?;
        let mut prev_att: Option<Var> = None;
        for (i, (sp, &ln)) in self.sites.iter().zip(&self.site_ln).enumerate() {
            let a = acts[i];
            let a = if opts.stop_ds_gradient {
                tape.stop_grad(a)?
            } else {
                a
            };
            let input = match prev_att {
                None => a,
                Some(att) => {
                    let n = self.ln(tape, bound, att, ln)?;
                    tape.add(a, n)?
                }
            };
            let g = tape.matmul(gmean, bound.var(sp.proj))?;
            let x_global = tape.broadcast_rows(g, t)?;
            let mask: Option<&W1GradMask> = match &opts.w1_mask {
                Some((site, m)) if *site == i => Some(m),
                _ => None,
            };
            let out = mhex_forward(
                tape,
                input,
                x_global,
                bound.var(sp.w1),
                bound.var(sp.w2),
                mask,
            )?;
            prev_att = Some(out.x_att);
            sites.push(SiteRecord {
                position: i,
                activations: a,
                input,
                x_global,
                out,
            });
        }
        Ok(ForwardRecord {
            final_logits,
            sites,
            global_features: global,
        })
    }
}

impl Host for Transformer {
    type Input = [usize];

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn n_class(&self) -> usize {
        self.cfg.n_class
    }

    fn site_count(&self) -> usize {
        self.sites.len()
    }

    fn site_params(&self) -> &[SiteParams] {
        &self.sites
    }

    fn config(&self) -> KvConfig {
        self.cfg.to_kv()
    }

    fn mhex_param_count(&self) -> MhexParamCount {
        self.cfg.count_mhex_params()
    }

    fn forward_heads(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&[usize]],
        opts: &ForwardOptions,
    ) -> Result<HeadLogits> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut finals = Vec::with_capacity(batch.len());
        let mut per_site: Vec<Vec<Var>> = Vec::new();
        for tokens in batch {
            let rec = self.run(tape, bound, tokens, opts)?;
            finals.push(rec.final_logits);
            if per_site.is_empty() {
                per_site = vec![Vec::with_capacity(batch.len()); rec.sites.len()];
            }
            for (dst, s) in per_site.iter_mut().zip(&rec.sites) {
                dst.push(s.out.ds_logits);
            }
        }
        let final_logits = tape.concat_rows(&finals)?;
        let site_logits = per_site
            .iter()
            .map(|v| tape.concat_rows(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(HeadLogits {
            final_logits,
            site_logits,
        })
    }

    fn forward_collect(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &[usize],
        opts: &ForwardOptions,
    ) -> Result<ForwardRecord> {
        self.run(tape, bound, input, opts)
    }
}
