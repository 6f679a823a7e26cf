use anyhow::Result;
use mhex_core::datagen::{localization_score, IMAGE_SIZE};
use mhex_core::hosts::{Model, ResNet, Transformer, MASK_TOKEN};
use mhex_core::metrics::{
    avg_drop, ead, image_metrics, random_map_with_area, records_csv, saliency_area, summarize,
    summary_csv, token_perturb_drop, DropRecord, ImageMetrics, MetricSummary,
};
use mhex_core::rng::{self, streams};
use mhex_core::saliency::{
    explain_image, explain_tokens, gradcam_resnet, TokenSaliency, WeightFilterConfig,
};
use mhex_core::Tensor;
use rand::Rng as _;
use rayon::prelude::*;

use super::{class_prob, weight_filter};
use crate::data::{self, Data};
use crate::run::Run;
use crate::EvaluateArgs;

struct Settings {
    wcfg: WeightFilterConfig,
    steps: usize,
    top_frac: f64,
    oracle: bool,
    force_area: bool,
}

/// Per-method results of one sample, in method order.
struct SampleResult {
    drops: Vec<DropRecord>,
    image: Vec<ImageMetrics>,
    localization: Vec<f64>,
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let mut run = Run::start("evaluate", &args.common)?;
    let (model, spec) = data::load_for_checkpoint(&mut run, args.checkpoint, &args.data, 200)?;
    let n_class = match &model {
        Model::ResNet(m) => m.cfg().n_class,
        Model::Transformer(m) => m.cfg().n_class,
    };
    let s = Settings {
        wcfg: weight_filter(&mut run, &args.saliency, n_class)?,
        steps: run.pick("steps", args.steps, || 16)?,
        top_frac: run.pick("top_frac", args.top_frac, || 0.1)?,
        oracle: run.switch("oracle", args.oracle)?,
        force_area: run.switch("force_area_quarter", args.force_area_quarter)?,
    };
    let data = spec.generate()?;
    let seed = run.seed;

    let (methods, results) = match (&model, &data) {
        (Model::ResNet(m), Data::Shapes(ds)) => {
            let mut methods = vec!["mhex", "gradcam", "random"];
            if s.oracle {
                methods.push("oracle");
            }
            let results = run.install(|| {
                ds.samples
                    .par_iter()
                    .enumerate()
                    .map(|(i, smp)| {
                        image_sample(m, i, &smp.image, smp.label, &smp.truth_mask, seed, &s)
                    })
                    .collect::<mhex_core::Result<Vec<_>>>()
            })?;
            (methods, results)
        }
        (Model::Transformer(m), Data::Tokens(ds)) => {
            let mut methods = vec!["mhex", "random"];
            if s.oracle {
                methods.push("oracle");
            }
            let results = run.install(|| {
                ds.samples
                    .par_iter()
                    .enumerate()
                    .map(|(i, smp)| {
                        token_sample(m, i, &smp.tokens, smp.label, &smp.truth_mask, seed, &s)
                    })
                    .collect::<mhex_core::Result<Vec<_>>>()
            })?;
            (methods, results)
        }
        _ => unreachable!("dataset kind follows the checkpoint"),
    };

    let mut summaries = Vec::new();
    let mut loc = String::from("method,mean_localization,n\n");
    for (k, method) in methods.iter().enumerate() {
        let drops: Vec<DropRecord> = results.iter().map(|r| r.drops[k].clone()).collect();
        let path = run.write(&format!("records_{method}.csv"), records_csv(&drops)?)?;
        run.artifact(None, method, &path);
        let summary = if results.iter().all(|r| !r.image.is_empty()) {
            let per: Vec<ImageMetrics> = results.iter().map(|r| r.image[k].clone()).collect();
            summarize(method, &per)?
        } else {
            let a = avg_drop(&drops)?;
            MetricSummary {
                method: method.to_string(),
                avg_drop: a.value,
                sad: f64::NAN,
                ead: ead(&drops)?.value,
                insertion_auc: f64::NAN,
                deletion_auc: f64::NAN,
                n: drops.len(),
                excluded: a.excluded,
            }
        };
        let mean_loc =
            results.iter().map(|r| r.localization[k]).sum::<f64>() / results.len() as f64;
        loc.push_str(&format!("{method},{mean_loc},{}\n", results.len()));
        println!(
            "{method:>8}: AVG Drop {:.4}  EAD {:.4}  localization {mean_loc:.4}",
            summary.avg_drop, summary.ead
        );
        summaries.push(summary);
    }
    let p = run.write("summary.csv", summary_csv(&summaries))?;
    run.artifact(None, "summary", &p);
    let p = run.write("localization.csv", loc)?;
    run.artifact(None, "localization", &p);
    run.finish()
}

fn mask_map(mask: &[bool]) -> mhex_core::Result<Tensor> {
    Tensor::new(
        [IMAGE_SIZE, IMAGE_SIZE],
        mask.iter().map(|&m| m as u8 as f64).collect(),
    )
}

fn image_sample(
    m: &ResNet,
    i: usize,
    image: &Tensor,
    label: usize,
    truth: &[bool],
    seed: u64,
    s: &Settings,
) -> mhex_core::Result<SampleResult> {
    let n = IMAGE_SIZE;
    let mhex = explain_image(m, image, label, &s.wcfg)?.upsampled(n, n);
    let gradcam = gradcam_resnet(m, image, label)?.upsampled(n, n);
    let mut rng = rng::stream(seed, streams::RANDOM_SALIENCY + i as u64);
    let random = random_map_with_area(n, n, saliency_area(&mhex, 0.5), &mut rng);
    let mut maps = vec![mhex, gradcam, random];
    if s.oracle {
        maps.push(mask_map(truth)?);
    }
    let eval = |xs: &[&Tensor]| class_prob(m, xs, label);
    let mut out = SampleResult {
        drops: Vec::new(),
        image: Vec::new(),
        localization: Vec::new(),
    };
    for map in &maps {
        let mut im = image_metrics(&eval, i, image, map, s.steps)?;
        if s.force_area {
            im.hard.area = 0.25;
            im.soft.area = 0.25;
        }
        out.drops.push(im.hard.clone());
        out.image.push(im);
        out.localization
            .push(localization_score(map.data(), truth)?);
    }
    Ok(out)
}

fn token_sample(
    m: &Transformer,
    i: usize,
    tokens: &[usize],
    label: usize,
    truth: &[bool],
    seed: u64,
    s: &Settings,
) -> mhex_core::Result<SampleResult> {
    let mhex = explain_tokens(m, tokens, label, &s.wcfg)?;
    let mut rng = rng::stream(seed, streams::RANDOM_SALIENCY + i as u64);
    let with_scores = |scores: Vec<f64>| TokenSaliency {
        scores,
        ..mhex.clone()
    };
    let random = with_scores(mhex.positions.iter().map(|_| rng.gen::<f64>()).collect());
    let mut maps = vec![mhex.clone(), random];
    if s.oracle {
        maps.push(with_scores(
            mhex.positions
                .iter()
                .map(|&p| truth[p] as u8 as f64)
                .collect(),
        ));
    }
    let eval = |xs: &[&[usize]]| class_prob(m, xs, label);
    let kept_truth: Vec<bool> = mhex.positions.iter().map(|&p| truth[p]).collect();
    let mut out = SampleResult {
        drops: Vec::new(),
        image: Vec::new(),
        localization: Vec::new(),
    };
    for ts in &maps {
        let mut d = token_perturb_drop(&eval, i, tokens, ts, s.top_frac, MASK_TOKEN)?;
        if s.force_area {
            d.area = 0.25;
        }
        out.drops.push(d);
        // token scores can be negative; localization needs a non-negative map
        let lo = ts.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = ts.scores.iter().map(|v| v - lo).collect();
        out.localization
            .push(localization_score(&shifted, &kept_truth)?);
    }
    Ok(out)
}
