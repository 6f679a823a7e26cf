use anyhow::{bail, Context, Result};
use mhex_core::datagen::{gen_shapes, gen_tokens, ShapeDataset, TokenDataset};
use mhex_core::hosts::{load_checkpoint, Model};
use std::path::PathBuf;

use crate::run::Run;
use crate::{DataArgs, DatasetKind};

pub const TRAIN_DATA_SEED: u64 = 7;
pub const HELD_OUT_DATA_SEED: u64 = 1_000_003;
pub const DEFAULT_VOCAB: usize = 64;

pub enum Data {
    Shapes(ShapeDataset),
    Tokens(TokenDataset),
}

impl Data {
    pub fn n_class(&self) -> usize {
        match self {
            Data::Shapes(d) => d.n_class,
            Data::Tokens(d) => d.n_class,
        }
    }
}

pub struct DataSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub seed: u64,
    pub vocab: usize,
}

impl DataSpec {
    pub fn generate(&self) -> Result<Data> {
        Ok(match self.kind {
            DatasetKind::Shapes => Data::Shapes(gen_shapes(self.n, self.seed)?),
            DatasetKind::Tokens => Data::Tokens(gen_tokens(self.n, self.vocab, self.seed)?),
        })
    }
}

fn parse_kind(
    run: &mut Run,
    flag: Option<DatasetKind>,
    default: DatasetKind,
) -> Result<DatasetKind> {
    let name = run.pick("dataset", flag.map(|k| k.name().to_string()), || {
        default.name().to_string()
    })?;
    match name.as_str() {
        "shapes" => Ok(DatasetKind::Shapes),
        "tokens" => Ok(DatasetKind::Tokens),
        other => bail!("unknown dataset `{other}`"),
    }
}

/// Resolves the data flags of `train` and `generate`.
pub fn resolve(
    run: &mut Run,
    args: &DataArgs,
    n_default: usize,
    seed_default: u64,
) -> Result<DataSpec> {
    let kind = parse_kind(run, args.dataset, DatasetKind::Shapes)?;
    let n = run.pick("n", args.n, || n_default)?;
    let seed = run.pick("data_seed", args.data_seed, || seed_default)?;
    let vocab = match kind {
        DatasetKind::Tokens => run.pick("vocab", args.vocab, || DEFAULT_VOCAB)?,
        DatasetKind::Shapes => DEFAULT_VOCAB,
    };
    Ok(DataSpec {
        kind,
        n,
        seed,
        vocab,
    })
}

/// Loads a checkpoint and resolves held-out data matching its architecture.
pub fn load_for_checkpoint(
    run: &mut Run,
    ckpt: Option<PathBuf>,
    args: &DataArgs,
    n_default: usize,
) -> Result<(Model, DataSpec)> {
    let path: PathBuf = run
        .pick_opt("checkpoint", ckpt.map(|p| p.display().to_string()))?
        .map(PathBuf::from)
        .context("--checkpoint is required")?;
    let model = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    let native = match &model {
        Model::ResNet(_) => DatasetKind::Shapes,
        Model::Transformer(_) => DatasetKind::Tokens,
    };
    let kind = parse_kind(run, args.dataset, native)?;
    if kind != native {
        bail!(
            "checkpoint expects {} data, got --dataset {}",
            native.name(),
            kind.name()
        );
    }
    let n = run.pick("n", args.n, || n_default)?;
    let seed = run.pick("data_seed", args.data_seed, || HELD_OUT_DATA_SEED)?;
    let vocab = match &model {
        Model::Transformer(t) => {
            let v = run.pick("vocab", args.vocab, || t.cfg().vocab_size)?;
            if v != t.cfg().vocab_size {
                bail!(
                    "checkpoint vocabulary is {}, got --vocab {v}",
                    t.cfg().vocab_size
                );
            }
            v
        }
        Model::ResNet(_) => DEFAULT_VOCAB,
    };
    Ok((
        model,
        DataSpec {
            kind,
            n,
            seed,
            vocab,
        },
    ))
}
