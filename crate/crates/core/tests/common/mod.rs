#![allow(dead_code)]

pub mod oracles;
pub mod primitives;

use mhex_core::rng;
use mhex_core::{Result, Tape, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};

pub fn randn(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    let mut r = rng::stream(seed, stream);
    Tensor::from_fn(shape.to_vec(), |_| StandardNormal.sample(&mut r))
}

/// Central finite differences (h = 1e-4) against the tape's gradients.
/// Returns the worst norm-wise relative error over all inputs.
pub fn fd_check<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let h = 1e-4;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars).expect("build");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
        })
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
        let l = build(&mut t, &vs).expect("build");
        t.value(l).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            *slot = (up - down) / (2.0 * h);
        }
        let a = analytic[i].data();
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = a
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-8, f64::max);
        worst = worst.max(diff / scale);
    }
    worst
}

/// Contracts a tensor-valued output to a scalar with fixed random weights so
/// that every output element receives a distinct upstream gradient.
pub fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let w = randn(tape.shape(out), seed, 999);
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

/// `x` and `y` with sample correlation exactly `r`.
pub fn correlated(n: usize, r: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let standardize = |v: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let c: Vec<f64> = v.iter().map(|a| a - m).collect();
        let s = c.iter().map(|a| a * a).sum::<f64>().sqrt();
        c.iter().map(|a| a / s).collect()
    };
    let x = standardize(randn(&[n], seed, 1).data());
    let z = randn(&[n], seed, 2);
    let dot: f64 = x.iter().zip(z.data()).map(|(a, b)| a * b).sum();
    let resid: Vec<f64> = z.data().iter().zip(&x).map(|(b, a)| b - dot * a).collect();
    let e = standardize(&resid);
    let y = x
        .iter()
        .zip(&e)
        .map(|(a, b)| r * a + (1.0 - r * r).sqrt() * b)
        .collect();
    (x, y)
}
