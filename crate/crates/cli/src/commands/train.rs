use anyhow::{Context, Result};
use mhex_core::block::LossMode;
use mhex_core::hosts::{
    train, Model, ResNet, ResNetConfig, TrainConfig, TrainLog, Transformer, TransformerConfig,
};

use crate::data::{self, Data, TRAIN_DATA_SEED};
use crate::run::Run;
use crate::{SiteLayout, TrainArgs};

pub fn run(args: TrainArgs) -> Result<()> {
    let mut run = Run::start("train", &args.common)?;
    let spec = data::resolve(&mut run, &args.data, 2000, TRAIN_DATA_SEED)?;
    let d = TrainConfig::default();
    let mode: LossMode = run
        .pick("mode", args.mode, || d.mode.to_string())?
        .parse()
        .context("--mode")?;
    let cfg = TrainConfig {
        epochs: run.pick("epochs", args.epochs, || d.epochs)?,
        lr: run.pick("lr", args.lr, || d.lr)?,
        batch_size: run.pick("batch_size", args.batch_size, || d.batch_size)?,
        mode,
        seed: run.seed,
        ..d
    };
    let data = spec.generate()?;
    let n_class = data.n_class();

    let (model, log) = match &data {
        Data::Shapes(ds) => {
            let layout = run.pick("sites", args.sites.map(layout_name), || {
                "downsampling".to_string()
            })?;
            let mut mc = ResNetConfig::toy(n_class, run.seed);
            mc.mhex_sites = match layout.as_str() {
                "downsampling" => mc.downsampling_sites(),
                "every" => mc.every_block_sites(),
                other => anyhow::bail!("unknown site layout `{other}`"),
            };
            let mut m = ResNet::new(mc)?;
            let log = train(&mut m, &ds.images(), &ds.labels(), &cfg)?;
            (Model::ResNet(m), log)
        }
        Data::Tokens(ds) => {
            let mut m = Transformer::new(TransformerConfig::toy(spec.vocab, n_class, run.seed))?;
            let log = train(&mut m, &ds.sequences(), &ds.labels(), &cfg)?;
            (Model::Transformer(m), log)
        }
    };
    report(&log, n_class);

    let ckpt = run.path("model.ckpt");
    model.save(&ckpt)?;
    run.artifact(None, "checkpoint", &ckpt);
    let log_path = run.write("train_log.csv", log.to_csv())?;
    run.artifact(None, "train_log", &log_path);
    run.finish()
}

fn layout_name(l: SiteLayout) -> String {
    match l {
        SiteLayout::Downsampling => "downsampling".into(),
        SiteLayout::Every => "every".into(),
    }
}

fn report(log: &TrainLog, n_class: usize) {
    for e in &log.epochs {
        let accs: Vec<String> = e.head_accuracy.iter().map(|a| format!("{a:.3}")).collect();
        eprintln!(
            "epoch {} loss {:.4} head accuracy [{}]",
            e.epoch,
            e.running_loss,
            accs.join(", ")
        );
    }
    match log.epochs.last().and_then(|e| e.head_accuracy.last()) {
        Some(a) => println!(
            "final-head training accuracy {a:.4} (chance {:.4})",
            1.0 / n_class as f64
        ),
        None => println!("no epochs run; checkpoint holds the initialization"),
    }
}
