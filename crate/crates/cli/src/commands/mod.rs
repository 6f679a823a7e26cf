pub mod analyze;
pub mod evaluate;
pub mod explain;
pub mod generate;
pub mod train;

use anyhow::{Context, Result};
use mhex_core::hosts::{predict_proba, Host, PredictionHead};
use mhex_core::saliency::WeightFilterConfig;

use crate::run::Run;
use crate::SaliencyArgs;

pub fn weight_filter(
    run: &mut Run,
    args: &SaliencyArgs,
    n_class: usize,
) -> Result<WeightFilterConfig> {
    let d = WeightFilterConfig::for_classes(n_class);
    let cfg = WeightFilterConfig {
        neg_mix: run.pick("alpha", args.alpha, || d.neg_mix)?,
        ss_threshold: run.pick("ss", args.ss, || d.ss_threshold)?,
        layer_decay: run.pick("decay", args.decay, || d.layer_decay)?,
        layers: run.pick("layers", args.layers, || d.layers)?,
        eps: d.eps,
    };
    cfg.validate().context("saliency settings")?;
    Ok(cfg)
}

/// Probability of `label` under the host head for every input.
pub fn class_prob<H: Host>(
    model: &H,
    inputs: &[&H::Input],
    label: usize,
) -> mhex_core::Result<Vec<f64>> {
    Ok(predict_proba(model, inputs, PredictionHead::Host, 64)?
        .into_iter()
        .map(|p| p[label])
        .collect())
}
