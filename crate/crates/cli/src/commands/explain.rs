use anyhow::{bail, Context, Result};
use mhex_core::datagen::IMAGE_SIZE;
use mhex_core::hosts::Model;
use mhex_core::saliency::{
    explain_image, explain_tokens, gradcam_resnet, render_heatmap, token_csv, token_html,
};
use mhex_core::Tensor;
use rayon::prelude::*;

use super::weight_filter;
use crate::data::{self, Data};
use crate::run::Run;
use crate::ExplainArgs;

fn parse_ids(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .with_context(|| format!("bad sample id `{t}`"))
        })
        .collect()
}

pub fn run(args: ExplainArgs) -> Result<()> {
    let mut run = Run::start("explain", &args.common)?;
    let (model, spec) = data::load_for_checkpoint(&mut run, args.checkpoint, &args.data, 200)?;
    let ids = parse_ids(&run.pick("samples", args.samples, || "0,1,2,3".to_string())?)?;
    let n_class = match &model {
        Model::ResNet(m) => m.cfg().n_class,
        Model::Transformer(m) => m.cfg().n_class,
    };
    let class = run.pick_opt("class", args.class)?;
    if let Some(c) = class {
        if c >= n_class {
            bail!("class {c} out of range for {n_class} classes");
        }
    }
    let wcfg = weight_filter(&mut run, &args.saliency, n_class)?;
    let grad_cam = run.switch("grad_cam", args.grad_cam)?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= spec.n) {
        bail!(
            "unknown sample id {bad}: the dataset has {} samples",
            spec.n
        );
    }
    let data = spec.generate()?;

    match (&model, &data) {
        (Model::ResNet(m), Data::Shapes(ds)) => {
            let maps: Vec<Vec<(&str, Tensor)>> = run.install(|| {
                ids.par_iter()
                    .map(|&i| {
                        let s = &ds.samples[i];
                        let c = class.unwrap_or(s.label);
                        let mut out = vec![(
                            "mhex",
                            explain_image(m, &s.image, c, &wcfg)?.upsampled(IMAGE_SIZE, IMAGE_SIZE),
                        )];
                        if grad_cam {
                            out.push((
                                "gradcam",
                                gradcam_resnet(m, &s.image, c)?.upsampled(IMAGE_SIZE, IMAGE_SIZE),
                            ));
                        }
                        Ok(out)
                    })
                    .collect::<mhex_core::Result<_>>()
            })?;
            for (&i, per) in ids.iter().zip(&maps) {
                for (method, map) in per {
                    let stem = format!("{method}_{i:04}");
                    let pgm = run.path(&format!("{stem}.pgm"));
                    render_heatmap(map, &pgm, None)?;
                    render_heatmap(
                        map,
                        run.path(&format!("{stem}.ppm")),
                        Some(&ds.samples[i].image),
                    )?;
                    run.artifact(Some(i), method, &pgm);
                }
            }
        }
        (Model::Transformer(m), Data::Tokens(ds)) => {
            if grad_cam {
                bail!("--grad-cam needs a CNN checkpoint");
            }
            let scores = run.install(|| {
                ids.par_iter()
                    .map(|&i| {
                        let s = &ds.samples[i];
                        explain_tokens(m, &s.tokens, class.unwrap_or(s.label), &wcfg)
                    })
                    .collect::<mhex_core::Result<Vec<_>>>()
            })?;
            for (&i, ts) in ids.iter().zip(&scores) {
                let tokens = &ds.samples[i].tokens;
                let csv = run.write(&format!("mhex_{i:04}.csv"), token_csv(tokens, ts))?;
                run.write(&format!("mhex_{i:04}.html"), token_html(tokens, ts, None))?;
                run.artifact(Some(i), "mhex", &csv);
            }
        }
        _ => unreachable!("dataset kind follows the checkpoint"),
    }
    println!("explained {} samples", ids.len());
    run.finish()
}
