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

#[derive(Clone, Debug, PartialEq)]
pub struct ResNetConfig {
    /// Channel width of each stage; the first block of every stage after the
    /// first halves the resolution.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub in_channels: usize,
    pub image_size: usize,
    pub n_class: usize,
    /// Global block indices carrying an MHEX site, strictly increasing.
    pub mhex_sites: Vec<usize>,
    pub seed: u64,
}

impl ResNetConfig {
    /// Toy defaults: stages 8/16/32/64, two blocks each, 1x32x32 input, sites
    /// on the downsampling residual connections plus the final block.
    pub fn toy(n_class: usize, seed: u64) -> Self {
        let mut cfg = ResNetConfig {
            stage_channels: vec![8, 16, 32, 64],
            blocks_per_stage: 2,
            in_channels: 1,
            image_size: 32,
            n_class,
            mhex_sites: Vec::new(),
            seed,
        };
        cfg.mhex_sites = cfg.downsampling_sites();
        cfg
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_channels.len() * self.blocks_per_stage
    }

    /// First block of every stage that changes resolution, plus the last block.
    pub fn downsampling_sites(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (1..self.stage_channels.len())
            .map(|s| s * self.blocks_per_stage)
            .collect();
        let last = self.total_blocks() - 1;
        if v.last() != Some(&last) {
            v.push(last);
        }
        v
    }

    pub fn every_block_sites(&self) -> Vec<usize> {
        (0..self.total_blocks()).collect()
    }

    pub fn block_channels(&self, block: usize) -> usize {
        self.stage_channels[block / self.blocks_per_stage]
    }

    pub fn block_resolution(&self, block: usize) -> usize {
        self.image_size >> (block / self.blocks_per_stage)
    }

    pub fn site_channels(&self) -> Vec<usize> {
        self.mhex_sites
            .iter()
            .map(|&b| self.block_channels(b))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return bad("stage_channels must be non-empty and positive");
        }
        if self.stage_channels.windows(2).any(|w| w[1] < w[0]) {
            return bad("stage_channels must be non-decreasing across stages");
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1");
        }
        if !(self.in_channels == 1 || self.in_channels == 3) {
            return bad("in_channels must be 1 or 3");
        }
        if self.n_class < 2 {
            return bad("n_class must be at least 2");
        }
        let shrink = 1usize << (self.stage_channels.len() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(shrink) {
            return bad("image_size must be divisible by 2^(stages-1)");
        }
        if self.mhex_sites.windows(2).any(|w| w[1] <= w[0]) {
            return bad("mhex_sites must be strictly increasing");
        }
        if self.mhex_sites.iter().any(|&b| b >= self.total_blocks()) {
            return bad("mhex_sites index past the last block");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("arch", "resnet")
            .set_list("stage_channels", &self.stage_channels)
            .set("blocks_per_stage", self.blocks_per_stage)
            .set("in_channels", self.in_channels)
            .set("image_size", self.image_size)
            .set("n_class", self.n_class)
            .set_list("mhex_sites", &self.mhex_sites)
            .set("init_seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let cfg = ResNetConfig {
            stage_channels: kv.get_list("stage_channels")?,
            blocks_per_stage: kv.get("blocks_per_stage")?,
            in_channels: kv.get("in_channels")?,
            image_size: kv.get("image_size")?,
            n_class: kv.get("n_class")?,
            mhex_sites: kv.get_list("mhex_sites")?,
            seed: kv.get("init_seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// MHEX parameters this config adds; projections are the 1x1 global maps.
    pub fn count_mhex_params(&self) -> MhexParamCount {
        let chans = self.site_channels();
        let global = *self.stage_channels.last().unwrap_or(&0);
        MhexParamCount {
            core: count_site_params(&chans, self.n_class),
            auxiliary: chans.iter().map(|c| c * global).sum(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockParams {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    shortcut: Option<usize>,
    downsample: bool,
}

/// Residual CNN with optional MHEX sites.
#[derive(Clone, Debug, PartialEq)]
pub struct ResNet {
    cfg: ResNetConfig,
    params: ParamSet,
    stem_w: usize,
    stem_b: usize,
    blocks: Vec<BlockParams>,
    head_w: usize,
    head_b: usize,
    sites: Vec<SiteParams>,
}

impl ResNet {
    pub fn new(cfg: ResNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, streams::INIT);
        let mut params = ParamSet::new();
        let c0 = cfg.stage_channels[0];
        let cin = cfg.in_channels;
        let stem_w = params.push("stem.w", kaiming(&[c0, cin, 3, 3], cin * 9, 1.0, &mut rng));
        let stem_b = params.push("stem.b", Tensor::zeros([c0]));

        let mut blocks = Vec::new();
        let mut prev = c0;
        for b in 0..cfg.total_blocks() {
            let c = cfg.block_channels(b);
            let downsample = b > 0 && b % cfg.blocks_per_stage == 0;
            let conv1_w = params.push(
                format!("block{b}.conv1.w"),
                kaiming(&[c, prev, 3, 3], prev * 9, 1.0, &mut rng),
            );
            let conv1_b = params.push(format!("block{b}.conv1.b"), Tensor::zeros([c]));
            // damped second conv keeps the un-normalized residual sum near identity at init
            let conv2_w = params.push(
                format!("block{b}.conv2.w"),
                kaiming(&[c, c, 3, 3], c * 9, 0.25, &mut rng),
            );
            let conv2_b = params.push(format!("block{b}.conv2.b"), Tensor::zeros([c]));
            let shortcut = (c != prev).then(|| {
                params.push(
                    format!("block{b}.shortcut.w"),
                    kaiming(&[c, prev, 1, 1], prev, 1.0, &mut rng),
                )
            });
            blocks.push(BlockParams {
                conv1_w,
                conv1_b,
                conv2_w,
                conv2_b,
                shortcut,
                downsample,
            });
            prev = c;
        }
        let head_w = params.push(
            "head.w",
            kaiming(&[prev, cfg.n_class], prev, 1.0 / 2f64.sqrt(), &mut rng),
        );
        let head_b = params.push("head.b", Tensor::zeros([cfg.n_class]));

        let global = prev;
        let mut sites = Vec::new();
        for (i, &b) in cfg.mhex_sites.iter().enumerate() {
            let c = cfg.block_channels(b);
            let bound = 1.0 / (c as f64).sqrt();
            let w1 = params.push(
                format!("site{i}.w1"),
                small_uniform(&[c, c], bound, &mut rng),
            );
            let w2 = params.push(
                format!("site{i}.w2"),
                small_uniform(&[cfg.n_class, c], bound, &mut rng),
            );
            let proj = params.push(
                format!("site{i}.proj"),
                small_uniform(&[c, global, 1, 1], 1.0 / (global as f64).sqrt(), &mut rng),
            );
            sites.push(SiteParams { w1, w2, proj });
        }

        Ok(ResNet {
            cfg,
            params,
            stem_w,
            stem_b,
            blocks,
            head_w,
            head_b,
            sites,
        })
    }

    pub fn cfg(&self) -> &ResNetConfig {
        &self.cfg
    }

    /// The same backbone with every MHEX site removed.
    pub fn strip_mhex(&self) -> Result<ResNet> {
        let mut cfg = self.cfg.clone();
        cfg.mhex_sites.clear();
        let mut bare = ResNet::new(cfg)?;
        bare.params.copy_matching(&self.params)?;
        Ok(bare)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = [
            self.cfg.in_channels,
            self.cfg.image_size,
            self.cfg.image_size,
        ];
        if x.shape() != want {
            return Err(Error::dim("resnet input", x.shape(), &want));
        }
        Ok(())
    }

    fn stack(&self, tape: &mut Tape, batch: &[&Tensor]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut data = Vec::with_capacity(batch.len() * batch[0].numel());
        for x in batch {
            self.check_input(x)?;
            data.extend_from_slice(x.data());
        }
        let s = self.cfg.image_size;
        let t = Tensor::new([batch.len(), self.cfg.in_channels, s, s], data)?;
        Ok(tape.constant(t))
    }

    fn conv(
        &self,
        tape: &mut Tape,
        x: Var,
        bound: &Bound,
        w: usize,
        b: Option<usize>,
    ) -> Result<Var> {
        let k = bound.var(w);
        let pad = tape.shape(k)[2] / 2;
        let y = tape.conv2d(x, k, 1, pad)?;
        match b {
            Some(b) => tape.add_channel_bias(y, bound.var(b)),
            None => Ok(y),
        }
    }

    /// Backbone pass; returns every block output and the final logits.
    fn backbone(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<(Vec<Var>, Var)> {
        let h = self.conv(tape, x, bound, self.stem_w, Some(self.stem_b))?;
        let mut h = tape.relu(h)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for bp in &self.blocks {
            let inp = if bp.downsample {
                tape.avg_pool(h, 2)?
            } else {
                h
            };
            let a = self.conv(tape, inp, bound, bp.conv1_w, Some(bp.conv1_b))?;
            let a = tape.relu(a)?;
            let a = self.conv(tape, a, bound, bp.conv2_w, Some(bp.conv2_b))?;
            let short = match bp.shortcut {
                Some(w) => self.conv(tape, inp, bound, w, None)?,
                None => inp,
            };
            let s = tape.add(a, short)?;
            h = tape.relu(s)?;
            outs.push(h);
        }
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.matmul(pooled, bound.var(self.head_w))?;
        let logits = tape.add_row_bias(logits, bound.var(self.head_b))?;
        Ok((outs, logits))
    }

    fn run(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<ForwardRecord> {
        let (outs, final_logits) = self.backbone(tape, bound, x)?;
        let last = *outs.last().expect("at least one block");
        let global = if opts.stop_ds_gradient {
            tape.stop_grad(last)?
        } else {
            last
        };
        let mut sites = Vec::new();
        if opts.skip_sites {
            return Ok(ForwardRecord {
                final_logits,
                sites,
                global_features: global,
            });
        }
        let mut prev_att: Option<Var> = None;
        for (i, (&block, sp)) in self.cfg.mhex_sites.iter().zip(&self.sites).enumerate() {
            let f = outs[block];
            let f = if opts.stop_ds_gradient {
                tape.stop_grad(f)?
            } else {
                f
            };
            let &[_, _, h, w] = tape.shape(f) else {
                unreachable!("batched block output")
            };
            let input = match prev_att {
                None => f,
                Some(att) => {
                    let ph = tape.shape(att)[2];
                    let pooled = if ph == h {
                        att
                    } else {
                        tape.avg_pool(att, ph / h)?
                    };
                    let c = tape.shape(f)[1];
                    let padded = tape.pad_channels(pooled, c)?;
                    tape.add(f, padded)?
                }
            };
            let g = tape.conv2d(global, bound.var(sp.proj), 1, 0)?;
            let x_global = tape.nearest_resize(g, h, w)?;
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
                position: block,
                activations: f,
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

    /// Batched forward returning the full record.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[&Tensor],
        opts: &ForwardOptions,
    ) -> Result<ForwardRecord> {
        let x = self.stack(tape, batch)?;
        self.run(tape, bound, x, opts)
    }

    /// Features of the last block and the final logits, for gradient-based baselines.
    pub fn last_features_and_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &Tensor,
    ) -> Result<(Var, Var)> {
        let x = self.stack(tape, &[input])?;
        let (outs, logits) = self.backbone(tape, bound, x)?;
        Ok((*outs.last().expect("blocks"), logits))
    }
}

impl Host for ResNet {
    type Input = Tensor;

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
        batch: &[&Tensor],
        opts: &ForwardOptions,
    ) -> Result<HeadLogits> {
        Ok(self.forward_batch(tape, bound, batch, opts)?.heads())
    }

    fn forward_collect(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &Tensor,
        opts: &ForwardOptions,
    ) -> Result<ForwardRecord> {
        self.forward_batch(tape, bound, &[input], opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sites_are_downsampling_blocks_plus_last() {
        let cfg = ResNetConfig::toy(4, 0);
        assert_eq!(cfg.mhex_sites, vec![2, 4, 6, 7]);
        assert_eq!(cfg.site_channels(), vec![16, 32, 64, 64]);
        assert_eq!(cfg.block_resolution(2), 16);
        assert_eq!(cfg.block_resolution(7), 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ResNetConfig::toy(4, 0);
        cfg.n_class = 1;
        assert!(matches!(ResNet::new(cfg), Err(Error::Config(_))));
        let mut cfg = ResNetConfig::toy(4, 0);
        cfg.stage_channels = vec![16, 8];
        assert!(ResNet::new(cfg).is_err());
        let mut cfg = ResNetConfig::toy(4, 0);
        cfg.mhex_sites = vec![8];
        assert!(ResNet::new(cfg).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = ResNetConfig::toy(3, 17);
        assert_eq!(ResNetConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }
}
