use rand::seq::SliceRandom;

use crate::autograd::Tape;
use crate::block::{mhex_loss, LossMode};
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

use super::{ForwardOptions, Host};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mode: LossMode,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub stop_ds_gradient: bool,
    /// Also measure the full training-set loss before training and after
    /// every epoch (one extra forward pass per epoch).
    pub eval_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 1e-3,
            batch_size: 32,
            mode: LossMode::Finetune,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            stop_ds_gradient: false,
            eval_loss: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean minibatch loss seen while training this epoch.
    pub running_loss: f64,
    /// Training-set loss after the epoch, when requested.
    pub eval_loss: Option<f64>,
    /// Running training accuracy per head: sites shallow to deep, then the final head.
    pub head_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// CSV with one row per epoch.
    pub fn to_csv(&self) -> String {
        let heads = self.epochs.first().map_or(0, |e| e.head_accuracy.len());
        let mut s = String::from("epoch,running_loss,eval_loss");
        for h in 0..heads {
            if h + 1 == heads {
                s.push_str(",acc_final");
            } else {
                s.push_str(&format!(",acc_site{h}"));
            }
        }
        s.push('\n');
        if let Some(l) = self.initial_loss {
            s.push_str(&format!("0,,{l}{}\n", ",".repeat(heads)));
        }
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{}",
                e.epoch,
                e.running_loss,
                e.eval_loss.map(|v| v.to_string()).unwrap_or_default()
            ));
            for a in &e.head_accuracy {
                s.push_str(&format!(",{a}"));
            }
            s.push('\n');
        }
        s
    }
}

struct AdamW {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl AdamW {
    fn new(params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        AdamW {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
                p[j] -= cfg.lr * (step + cfg.weight_decay * p[j]);
            }
        }
    }
}

fn check_dataset<I: ?Sized>(inputs: &[&I], labels: &[usize], n_class: usize) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::Contract("dataset is empty".into()));
    }
    if inputs.len() != labels.len() {
        return Err(Error::dim(
            "inputs vs labels",
            &[inputs.len()],
            &[labels.len()],
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_class) {
        return Err(Error::Index {
            index: l,
            bound: n_class,
        });
    }
    Ok(())
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean training loss over the whole dataset, evaluated in batches.
fn dataset_loss<H: Host>(
    model: &H,
    inputs: &[&H::Input],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let opts = ForwardOptions::default();
    let mut total = 0.0;
    for (xs, ys) in inputs
        .chunks(cfg.batch_size)
        .zip(labels.chunks(cfg.batch_size))
    {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let heads = model.forward_heads(&mut tape, &bound, xs, &opts)?;
        let loss = mhex_loss(&mut tape, &heads.all(), ys, cfg.mode)?;
        total += tape.value(loss).item()? * xs.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Minimizes the combined MHEX loss with AdamW at a constant learning rate.
pub fn train<H: Host>(
    model: &mut H,
    inputs: &[&H::Input],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    check_dataset(inputs, labels, model.n_class())?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config("lr must be finite and non-negative".into()));
    }
    let initial_loss = if cfg.eval_loss {
        Some(dataset_loss(model, inputs, labels, cfg)?)
    } else {
        None
    };
    let opts = ForwardOptions {
        stop_ds_gradient: cfg.stop_ds_gradient,
        ..Default::default()
    };
    let mut opt = AdamW::new(model.params().tensors());
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let n_heads = model.site_count() + 1;
    let mut log = TrainLog {
        initial_loss,
        epochs: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 1..=cfg.epochs {
        let mut rng = rng::stream(cfg.seed, streams::SHUFFLE + epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = vec![0usize; n_heads];
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&H::Input> = batch.iter().map(|&i| inputs[i]).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let heads = model.forward_heads(&mut tape, &bound, &xs, &opts)?;
            let all = heads.all();
            let loss = mhex_loss(&mut tape, &all, &ys, cfg.mode)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            loss_sum += lv * batch.len() as f64;
            for (h, &v) in all.iter().enumerate() {
                let t = tape.value(v);
                for (r, &y) in ys.iter().enumerate() {
                    if argmax(t.row(r)) == y {
                        correct[h] += 1;
                    }
                }
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = bound.vars.iter().map(|&v| tape.grad(v)).collect();
            opt.update(model.params_mut().tensors_mut(), &grads, cfg);
        }
        if model.params().tensors().iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        let n = inputs.len() as f64;
        let eval_loss = if cfg.eval_loss {
            Some(dataset_loss(model, inputs, labels, cfg)?)
        } else {
            None
        };
        log.epochs.push(EpochLog {
            epoch,
            running_loss: loss_sum / n,
            eval_loss,
            head_accuracy: correct.iter().map(|&c| c as f64 / n).collect(),
        });
    }
    Ok(log)
}

/// Which head produces the model's prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PredictionHead {
    /// The original host classifier.
    #[default]
    Host,
    /// The deepest MHEX supervision head.
    DeepestSite,
}

/// Class probabilities for every input, `batch_size` inputs per forward pass.
pub fn predict_proba<H: Host>(
    model: &H,
    inputs: &[&H::Input],
    head: PredictionHead,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let opts = ForwardOptions {
        skip_sites: head == PredictionHead::Host,
        ..Default::default()
    };
    let mut out = Vec::with_capacity(inputs.len());
    for xs in inputs.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let heads = model.forward_heads(&mut tape, &bound, xs, &opts)?;
        let v = match head {
            PredictionHead::Host => heads.final_logits,
            PredictionHead::DeepestSite => *heads
                .site_logits
                .last()
                .ok_or_else(|| Error::Unsupported("model has no MHEX sites".into()))?,
        };
        let t = tape.value(v);
        for r in 0..xs.len() {
            out.push(softmax(t.row(r)));
        }
    }
    Ok(out)
}

/// Accuracy of every head: sites shallow to deep, then the final head.
pub fn evaluate_heads<H: Host>(
    model: &H,
    inputs: &[&H::Input],
    labels: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>> {
    check_dataset(inputs, labels, model.n_class())?;
    let opts = ForwardOptions::default();
    let mut correct = vec![0usize; model.site_count() + 1];
    for (xs, ys) in inputs
        .chunks(batch_size.max(1))
        .zip(labels.chunks(batch_size.max(1)))
    {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let heads = model.forward_heads(&mut tape, &bound, xs, &opts)?;
        for (h, v) in heads.all().into_iter().enumerate() {
            let t = tape.value(v);
            for (r, &y) in ys.iter().enumerate() {
                if argmax(t.row(r)) == y {
                    correct[h] += 1;
                }
            }
        }
    }
    Ok(correct
        .iter()
        .map(|&c| c as f64 / inputs.len() as f64)
        .collect())
}
