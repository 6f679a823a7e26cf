mod common;

use common::randn;
use mhex_core::block::{
    attention_gate, ds_logits, equivalent_matrix, mhex_forward, mhex_loss, LossMode, MhexParams,
};
use mhex_core::saliency::cam_layer;
use mhex_core::{Error, Tape, Tensor};
use proptest::prelude::*;

fn ce(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}

#[test]
fn gate_broadcast_matches_elementwise_oracle() {
    for seed in 0..5 {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[2, 3, 4, 5], seed, 1));
        let xg = tape.constant(randn(&[2, 3, 4, 5], seed, 2));
        let w1 = tape.param(randn(&[3, 3], seed, 3));
        let (g, att) = attention_gate(&mut tape, x, xg, w1).unwrap();
        let (xv, gv, av) = (tape.value(x), tape.value(g), tape.value(att));
        for n in 0..2 {
            for c in 0..3 {
                for p in 0..20 {
                    let i = (n * 3 + c) * 20 + p;
                    assert_eq!(av.data()[i], gv.data()[n * 3 + c] * xv.data()[i]);
                }
            }
        }
    }
}

#[test]
fn gate_uses_sequence_mean_for_tokens() {
    let mut tape = Tape::new();
    let xv = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, -4.0]).unwrap();
    let x = tape.constant(xv);
    let xg = tape.constant(Tensor::zeros([2, 2]));
    let w1 = tape.param(Tensor::eye(2));
    let (g, _) = attention_gate(&mut tape, x, xg, w1).unwrap();
    let s = |v: f64| 1.0 / (1.0 + (-v).exp());
    let g = tape.value(g).data().to_vec();
    assert!((g[0] - s(2.0)).abs() < 1e-15);
    assert!((g[1] - s(-1.0)).abs() < 1e-15);
}

#[test]
fn global_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros([3, 4, 4]));
    let xg = tape.constant(Tensor::zeros([3, 2, 2]));
    let w1 = tape.param(Tensor::zeros([3, 3]));
    assert!(matches!(
        attention_gate(&mut tape, x, xg, w1),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn ds_logits_vanish_when_relu_kills_input() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full([3, 4, 4], -1.0));
    let xg = tape.constant(Tensor::full([3, 4, 4], 0.5));
    let w1 = tape.param(randn(&[3, 3], 1, 1));
    let w2 = tape.param(randn(&[2, 3], 1, 2));
    let (logits, _) = ds_logits(&mut tape, x, xg, w1, w2).unwrap();
    assert!(tape.value(logits).data().iter().all(|&v| v == 0.0));
}

#[test]
fn ds_logits_with_identities_are_pooled_relu() {
    let mut tape = Tape::new();
    let xv = randn(&[3, 2, 2], 4, 1);
    let gv = randn(&[3, 2, 2], 4, 2);
    let x = tape.constant(xv.clone());
    let xg = tape.constant(gv.clone());
    let w1 = tape.param(Tensor::eye(3));
    let w2 = tape.param(Tensor::eye(3));
    let (logits, _) = ds_logits(&mut tape, x, xg, w1, w2).unwrap();
    for c in 0..3 {
        let want: f64 = (0..4)
            .map(|p| (xv.data()[c * 4 + p] + gv.data()[c * 4 + p]).max(0.0))
            .sum::<f64>()
            / 4.0;
        assert!((tape.value(logits).data()[c] - want).abs() < 1e-14);
    }
}

#[test]
fn ds_logits_equal_spatial_mean_of_cam() {
    for seed in 0..100 {
        let (c, n, h, w) = (4, 3, 3, 5);
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[c, h, w], seed, 1));
        let xg = tape.constant(randn(&[c, h, w], seed, 2));
        let w1v = randn(&[c, c], seed, 3);
        let w2v = randn(&[n, c], seed, 4);
        let w1 = tape.param(w1v.clone());
        let w2 = tape.param(w2v.clone());
        let out = mhex_forward(&mut tape, x, xg, w1, w2, None).unwrap();
        let weq = equivalent_matrix(&w1v, &w2v).unwrap();
        let feats = tape.value(out.relu_features);
        for k in 0..n {
            let cam = cam_layer(weq.row(k), feats).unwrap();
            let mean = cam.data().iter().sum::<f64>() / (h * w) as f64;
            assert!((tape.value(out.ds_logits).data()[k] - mean).abs() < 1e-8);
        }
    }
}

#[test]
fn equivalent_matrix_identities_and_oracle() {
    let w1 = randn(&[4, 4], 2, 1);
    let w2 = randn(&[3, 4], 2, 2);
    assert_eq!(equivalent_matrix(&w1, &Tensor::eye(4)).unwrap(), w1);
    assert_eq!(equivalent_matrix(&Tensor::eye(4), &w2).unwrap(), w2);
    let got = equivalent_matrix(&w1, &w2).unwrap();
    for i in 0..3 {
        for j in 0..4 {
            let want: f64 = (0..4)
                .map(|k| w2.data()[i * 4 + k] * w1.data()[k * 4 + j])
                .sum();
            assert!((got.data()[i * 4 + j] - want).abs() < 1e-10);
        }
    }
    assert!(equivalent_matrix(&randn(&[3, 4], 0, 0), &w2).is_err());
}

#[test]
fn params_validate_shapes() {
    let ok = MhexParams::new(
        Tensor::zeros([4, 4]),
        Tensor::zeros([2, 4]),
        Tensor::zeros([4, 8, 1, 1]),
    )
    .unwrap();
    assert_eq!((ok.channels(), ok.n_class()), (4, 2));
    assert_eq!(ok.equivalent_matrix().unwrap().shape(), &[2, 4]);
    assert!(MhexParams::new(
        Tensor::zeros([4, 3]),
        Tensor::zeros([2, 4]),
        Tensor::zeros([4, 8, 1, 1])
    )
    .is_err());
    assert!(MhexParams::new(
        Tensor::zeros([4, 4]),
        Tensor::zeros([2, 3]),
        Tensor::zeros([4, 8, 1, 1])
    )
    .is_err());
}

#[test]
fn loss_modes_single_head_coincide() {
    let mut tape = Tape::new();
    let h = tape.param(randn(&[3, 5], 7, 1));
    let a = mhex_loss(&mut tape, &[h], &[0, 4, 2], LossMode::Pretrain).unwrap();
    let b = mhex_loss(&mut tape, &[h], &[0, 4, 2], LossMode::Finetune).unwrap();
    assert_eq!(tape.value(a).item().unwrap(), tape.value(b).item().unwrap());
}

#[test]
fn finetune_with_identical_heads_scales_loss() {
    let mut tape = Tape::new();
    let h = tape.param(randn(&[2, 4], 8, 1));
    let one = mhex_loss(&mut tape, &[h], &[1, 3], LossMode::Finetune).unwrap();
    let three = mhex_loss(&mut tape, &[h, h, h], &[1, 3], LossMode::Finetune).unwrap();
    let (one, three) = (
        tape.value(one).item().unwrap(),
        tape.value(three).item().unwrap(),
    );
    assert!((three - 3.0 * one).abs() < 1e-12);
}

#[test]
fn two_random_heads_match_hand_computation() {
    for seed in 0..10 {
        let a = randn(&[1, 4], seed, 1);
        let b = randn(&[1, 4], seed, 2);
        let target = seed as usize % 4;
        let mut tape = Tape::new();
        let (ha, hb) = (tape.param(a.clone()), tape.param(b.clone()));
        let pre = mhex_loss(&mut tape, &[ha, hb], &[target], LossMode::Pretrain).unwrap();
        let fine = mhex_loss(&mut tape, &[ha, hb], &[target], LossMode::Finetune).unwrap();
        let summed: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        assert!((tape.value(pre).item().unwrap() - ce(&summed, target)).abs() < 1e-10);
        let want = ce(a.data(), target) + ce(b.data(), target);
        assert!((tape.value(fine).item().unwrap() - want).abs() < 1e-10);
    }
}

#[test]
fn empty_head_list_is_contract_error() {
    let mut tape = Tape::new();
    assert!(matches!(
        mhex_loss(&mut tape, &[], &[0], LossMode::Finetune),
        Err(Error::Contract(_))
    ));
}

#[test]
fn loss_mode_parses_and_prints() {
    for m in [LossMode::Pretrain, LossMode::Finetune] {
        assert_eq!(m.to_string().parse::<LossMode>().unwrap(), m);
    }
    assert!("both".parse::<LossMode>().is_err());
}

#[test]
fn mhex_forward_is_differentiable() {
    let inputs = [
        randn(&[3, 2, 2], 3, 1),
        randn(&[3, 2, 2], 3, 2),
        randn(&[3, 3], 3, 3),
        randn(&[2, 3], 3, 4),
    ];
    let err = common::fd_check(&inputs, |tape, v| {
        let out = mhex_forward(tape, v[0], v[1], v[2], v[3], None)?;
        let a = common::project(tape, out.x_att, 11)?;
        let l = tape.softmax_cross_entropy(out.ds_logits, &[1])?;
        tape.add(a, l)
    });
    assert!(err < 1e-4, "relative error {err}");
}

proptest! {
    #[test]
    fn gate_is_strictly_inside_unit_interval(seed in 0u64..10_000, scale in 0.01f64..5.0) {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[2, 3, 3], seed, 1).map(|v| v * scale));
        let xg = tape.constant(randn(&[2, 3, 3], seed, 2));
        let w1 = tape.param(randn(&[2, 2], seed, 3));
        let out = mhex_forward(&mut tape, x, xg, w1, w1, None).unwrap();
        prop_assert!(tape.value(out.gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
        prop_assert!(tape.value(out.relu_features).data().iter().all(|&v| v >= 0.0));
    }
}
