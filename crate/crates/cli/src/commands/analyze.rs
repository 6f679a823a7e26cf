use anyhow::{bail, Result};
use mhex_core::analysis::{
    blockwise_quality, collab_csv, collab_records, correlation_triangle, cosine_to_unit,
    relu_entropy_drop, triangle_csv, CollabRecord,
};
use mhex_core::hosts::{Host, Model};
use mhex_core::saliency::render_heatmap;
use mhex_core::Tensor;
use rayon::prelude::*;

use super::weight_filter;
use crate::data::{self, Data};
use crate::run::Run;
use crate::AnalyzeArgs;

const HALF_LN_2: f64 = 0.5 * std::f64::consts::LN_2;

pub fn run(args: AnalyzeArgs) -> Result<()> {
    let mut run = Run::start("analyze", &args.common)?;
    let (model, spec) = data::load_for_checkpoint(&mut run, args.checkpoint, &args.data, 50)?;
    let Model::ResNet(m) = &model else {
        bail!("analyze needs a CNN checkpoint");
    };
    let wcfg = weight_filter(&mut run, &args.saliency, m.cfg().n_class)?;
    let grid = run.pick("grid", args.grid, || 7)?;
    let site = run.pick("site", args.site, || 0)?;
    let entropy_n = run.pick("entropy_samples", args.entropy_samples, || 1_000_000)?;
    if site >= m.site_count() {
        bail!("site {site} out of range for {} sites", m.site_count());
    }
    let Data::Shapes(ds) = spec.generate()? else {
        unreachable!("dataset kind follows the checkpoint")
    };

    let per: Vec<(Vec<CollabRecord>, Tensor)> = run.install(|| {
        ds.samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let recs = collab_records(m, i, &s.image, s.label, &wcfg)?;
                let q = blockwise_quality(m, &s.image, s.label, site, grid)?;
                Ok((recs, q))
            })
            .collect::<mhex_core::Result<_>>()
    })?;

    let records: Vec<CollabRecord> = per.iter().flat_map(|(r, _)| r.iter().cloned()).collect();
    let p = run.write("collab.csv", collab_csv(&records))?;
    run.artifact(None, "collab", &p);
    let triangle = correlation_triangle(&records);
    let p = run.write("triangle.csv", triangle_csv(&triangle))?;
    run.artifact(None, "triangle", &p);
    for e in &triangle {
        let site = e.site.map_or_else(|| "-".to_string(), |s| s.to_string());
        match &e.result {
            Ok(c) => println!(
                "{:>14} site {site}: r {:+.3}  p {:.3}  n {}",
                e.pair.label(),
                c.r,
                c.p,
                c.n
            ),
            Err(err) => println!("{:>14} site {site}: {err}", e.pair.label()),
        }
    }

    let mut blocks = String::from("id,site,row,col,quality\n");
    for (i, (_, q)) in per.iter().enumerate() {
        for r in 0..grid {
            for c in 0..grid {
                blocks.push_str(&format!("{i},{site},{r},{c},{}\n", q.data()[r * grid + c]));
            }
        }
        let pgm = run.path(&format!("blockwise_{i:04}.pgm"));
        render_heatmap(&cosine_to_unit(q), &pgm, None)?;
        run.artifact(Some(i), "blockwise", &pgm);
    }
    let p = run.write("blockwise.csv", blocks)?;
    run.artifact(None, "blockwise", &p);

    let dh = relu_entropy_drop(entropy_n, 200, run.seed)?;
    println!("relu entropy drop {dh:.5} (1/2 ln 2 = {HALF_LN_2:.5})");
    let p = run.write(
        "entropy.csv",
        format!("samples,estimate,target\n{entropy_n},{dh},{HALF_LN_2}\n"),
    )?;
    run.artifact(None, "entropy", &p);
    run.finish()
}
