use anyhow::Result;
use mhex_core::datagen::{export_shapes, export_tokens};

use crate::data::{self, Data, TRAIN_DATA_SEED};
use crate::run::Run;
use crate::GenerateArgs;

pub fn run(args: GenerateArgs) -> Result<()> {
    let mut run = Run::start("generate", &args.common)?;
    let spec = data::resolve(&mut run, &args.data, 2000, TRAIN_DATA_SEED)?;
    let path = run.path("dataset.bin");
    match spec.generate()? {
        Data::Shapes(d) => export_shapes(&d, &path)?,
        Data::Tokens(d) => export_tokens(&d, &path)?,
    }
    run.artifact(None, "dataset", &path);
    println!(
        "{} {} samples, seed {}",
        spec.n,
        spec.kind.name(),
        spec.seed
    );
    run.finish()
}
