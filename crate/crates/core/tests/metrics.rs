mod common;

use common::randn;
use mhex_core::metrics::*;
use mhex_core::rng;
use mhex_core::saliency::TokenSaliency;
use mhex_core::{Error, Result, Tensor};
use proptest::prelude::*;
use statrs::distribution::{Binomial, DiscreteCDF};

fn rec(p: f64, q: f64, area: f64) -> DropRecord {
    DropRecord::new(0, p, q, area)
}

#[test]
fn avg_drop_examples() {
    assert_eq!(
        avg_drop(&[rec(0.8, 0.8, 0.1), rec(0.3, 0.3, 0.1)])
            .unwrap()
            .value,
        0.0
    );
    assert_eq!(avg_drop(&[rec(0.8, 0.4, 0.1)]).unwrap().value, 0.5);
    assert_eq!(rec(0.4, 0.9, 0.1).drop, 0.0);
    let m = avg_drop(&[rec(0.0, 0.3, 0.1), rec(0.5, 0.25, 0.1)]).unwrap();
    assert_eq!((m.value, m.used, m.excluded), (0.5, 1, 1));
    assert!(matches!(avg_drop(&[]), Err(Error::Contract(_))));
    assert!(avg_drop(&[rec(0.0, 0.1, 0.1)]).is_err());
}

#[test]
fn area_weight_shape() {
    assert_eq!(area_weight(0.25).unwrap(), 1.0);
    assert_eq!(area_weight(0.0).unwrap(), 0.0);
    let h = 1e-6;
    let d = (area_weight(0.25 + h).unwrap() - area_weight(0.25 - h).unwrap()) / (2.0 * h);
    assert!(d.abs() < 1e-4);
    let grid: Vec<f64> = (0..=10_000)
        .map(|i| area_weight(i as f64 * 1e-4).unwrap())
        .collect();
    let best = (0..grid.len())
        .max_by(|&a, &b| grid[a].total_cmp(&grid[b]))
        .unwrap();
    assert_eq!(best, 2500);
    assert_eq!(grid.iter().filter(|&&v| v == grid[best]).count(), 1);
    assert!(matches!(area_weight(1.5), Err(Error::Domain { .. })));
    assert!(area_weight(-0.1).is_err());
}

#[test]
fn ead_examples() {
    let rs = [rec(0.9, 0.3, 0.25), rec(0.6, 0.5, 0.25)];
    assert!((ead(&rs).unwrap().value - avg_drop(&rs).unwrap().value).abs() < 1e-15);
    assert_eq!(ead(&[rec(0.5, 0.5, 0.7)]).unwrap().value, 0.0);
    let two = [rec(0.8, 0.4, 0.5), rec(1.0, 0.0, 0.1)];
    let f = |x: f64| 5.0 * x / (1.0 + 256.0 * x.powi(5));
    let want = (0.5 * f(0.5) + 1.0 * f(0.1)) / 2.0;
    assert!((ead(&two).unwrap().value - want).abs() < 1e-15);
}

#[test]
fn soft_mask_examples() {
    let img = randn(&[2, 3, 3], 1, 1);
    let mu = channel_means(&img).unwrap();
    assert_eq!(soft_mask(&img, &Tensor::zeros([3, 3]), &mu).unwrap(), img);
    let full = soft_mask(&img, &Tensor::full([3, 3], 1.0), &mu).unwrap();
    for (i, v) in full.data().iter().enumerate() {
        assert!((v - mu[i / 9]).abs() < 1e-15);
    }
    let half = soft_mask(&img, &Tensor::full([3, 3], 0.5), &mu).unwrap();
    for (i, v) in half.data().iter().enumerate() {
        assert!((v - (img.data()[i] + mu[i / 9]) / 2.0).abs() < 1e-15);
    }
    assert!(matches!(
        soft_mask(&img, &Tensor::zeros([2, 3]), &mu),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn hard_mask_examples() {
    let img = randn(&[1, 4, 4], 2, 1);
    let fill = [0.25];
    let cam = Tensor::from_fn([4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
    assert_eq!(hard_mask(&img, &cam, 1.5, &fill).unwrap(), img);
    assert!(hard_mask(&img, &cam, 0.0, &fill)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.25));
    let m = hard_mask(&img, &cam, 0.5, &fill).unwrap();
    for p in 0..16 {
        let black = (p / 4 + p % 4) % 2 == 1;
        assert_eq!(m.data()[p], if black { 0.25 } else { img.data()[p] });
    }
}

#[test]
fn saliency_area_examples() {
    assert_eq!(saliency_area(&Tensor::zeros([4, 4]), 0.5), 0.0);
    assert_eq!(saliency_area(&Tensor::full([4, 4], 1.0), 0.5), 1.0);
    assert_eq!(
        saliency_area(&Tensor::from_fn([4, 4], |i| (i < 8) as u8 as f64), 0.5),
        0.5
    );
}

#[test]
fn auc_examples() {
    let c = Curve::new(vec![0.0, 0.5, 1.0], vec![1.0, 1.0, 1.0]).unwrap();
    assert_eq!(auc(&c), 1.0);
    let line = Curve::new(vec![0.0, 0.25, 1.0], vec![0.0, 0.25, 1.0]).unwrap();
    assert!((auc(&line) - 0.5).abs() < 1e-15);
    assert!(Curve::new(vec![0.0, 0.7], vec![1.0, 1.0]).is_err());
    assert!(Curve::new(vec![0.0, 1.0], vec![1.0]).is_err());
    assert_eq!(line.to_csv().lines().next(), Some("fraction,confidence"));
}

#[test]
fn auc_matches_refined_riemann_sum() {
    for seed in 0..20 {
        let ys = randn(&[11], seed, 1).map(|v| 1.0 / (1.0 + (-v).exp()));
        let xs: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let c = Curve::new(xs.clone(), ys.data().to_vec()).unwrap();
        // midpoint rule on the piecewise-linear interpolant
        let n = 100_000;
        let interp = |x: f64| {
            let i = ((x * 10.0) as usize).min(9);
            let t = (x - xs[i]) * 10.0;
            ys.data()[i] * (1.0 - t) + ys.data()[i + 1] * t
        };
        let riemann: f64 = (0..n)
            .map(|k| interp((k as f64 + 0.5) / n as f64))
            .sum::<f64>()
            / n as f64;
        assert!((auc(&c) - riemann).abs() < 1e-6);
    }
}

#[test]
fn saliency_order_is_stable() {
    let cam = Tensor::new([2, 3], vec![0.5, 1.0, 0.5, 0.0, 1.0, 0.5]).unwrap();
    assert_eq!(saliency_order(&cam), vec![1, 4, 0, 2, 5, 3]);
}

fn mean_pixel_eval(xs: &[&Tensor]) -> Result<Vec<f64>> {
    Ok(xs
        .iter()
        .map(|x| x.data().iter().sum::<f64>() / x.numel() as f64)
        .collect())
}

#[test]
fn curve_endpoints() {
    let img = randn(&[1, 6, 6], 3, 1).map(f64::abs);
    let cam = randn(&[6, 6], 3, 2);
    let p = |x: &Tensor| mean_pixel_eval(&[x]).unwrap()[0];
    let ins = insertion_curve(&mean_pixel_eval, &img, &cam, 12).unwrap();
    let del = deletion_curve(&mean_pixel_eval, &img, &cam, 12).unwrap();
    assert_eq!(ins.fractions.len(), 13);
    assert_eq!(del.confidences[0], p(&img));
    assert_eq!(*ins.confidences.last().unwrap(), p(&img));
    assert_eq!(del.confidences[0], *ins.confidences.last().unwrap());
    let flat = |xs: &[&Tensor]| -> Result<Vec<f64>> { Ok(vec![0.3; xs.len()]) };
    let c = deletion_curve(&flat, &img, &cam, 4).unwrap();
    assert!(c.confidences.iter().all(|&v| v == 0.3));
    assert!(matches!(
        insertion_curve(&flat, &img, &cam, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn deletion_removes_most_salient_first() {
    // evaluator reads pixel 0 only; a map ranking pixel 0 first loses it at the first step
    let img = Tensor::from_fn([1, 4, 4], |i| if i == 0 { 1.0 } else { 0.0 });
    let eval =
        |xs: &[&Tensor]| -> Result<Vec<f64>> { Ok(xs.iter().map(|x| x.data()[0]).collect()) };
    let good = Tensor::from_fn([4, 4], |i| if i == 0 { 1.0 } else { 0.0 });
    let bad = Tensor::from_fn([4, 4], |i| if i == 0 { 0.0 } else { 1.0 });
    let g = deletion_curve(&eval, &img, &good, 16).unwrap();
    let b = deletion_curve(&eval, &img, &bad, 16).unwrap();
    assert!(auc(&g) < auc(&b));
}

fn ts(scores: Vec<f64>) -> TokenSaliency {
    let n = scores.len();
    TokenSaliency {
        class_id: 0,
        scores,
        positions: (0..n).collect(),
        layers: vec![],
    }
}

#[test]
fn token_perturbation_examples() {
    assert_eq!(top_masked_count(7, 0.1), 1);
    assert_eq!(top_masked_count(20, 0.1), 2);
    assert_eq!(top_masked_count(10, 0.0), 0);
    assert_eq!(top_masked_count(3, 1.0), 3);

    // classifier confident only while token 5 is present
    let eval = |xs: &[&[usize]]| -> Result<Vec<f64>> {
        Ok(xs
            .iter()
            .map(|x| if x.contains(&5) { 0.9 } else { 0.25 })
            .collect())
    };
    let tokens = [7, 5, 8, 9, 10, 11, 12];
    let r = token_perturb_drop(
        &eval,
        3,
        &tokens,
        &ts(vec![0.0, 2.0, 0.1, 0.0, 0.0, 0.0, 0.0]),
        0.1,
        0,
    )
    .unwrap();
    assert_eq!((r.sample_id, r.p_orig, r.p_mask), (3, 0.9, 0.25));
    assert!((r.area - 1.0 / 7.0).abs() < 1e-15);
    let none = token_perturb_drop(&eval, 0, &tokens, &ts(vec![0.0; 7]), 0.0, 0).unwrap();
    assert_eq!(none.drop, 0.0);
    assert!(matches!(
        token_perturb_drop(&eval, 0, &[], &ts(vec![]), 0.1, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn token_perturbation_uses_positions() {
    let eval = |xs: &[&[usize]]| -> Result<Vec<f64>> {
        Ok(xs
            .iter()
            .map(|x| if x[3] == 0 { 0.1 } else { 0.8 })
            .collect())
    };
    let tokens = [4, 1, 1, 6];
    let s = TokenSaliency {
        class_id: 0,
        scores: vec![0.0, 1.0],
        positions: vec![0, 3],
        layers: vec![],
    };
    let r = token_perturb_drop(&eval, 0, &tokens, &s, 0.5, 0).unwrap();
    assert!((r.drop - 0.875).abs() < 1e-15);
}

#[test]
fn sign_test_matches_binomial_tail() {
    let a: Vec<f64> = (0..30).map(|i| if i < 21 { 1.0 } else { 0.0 }).collect();
    let mut b = vec![0.5; 30];
    b[29] = 0.0;
    let (wins, n, p) = sign_test_greater(&a, &b);
    assert_eq!((wins, n), (21, 29));
    let want = 1.0 - Binomial::new(0.5, 29).unwrap().cdf(20);
    assert!((p - want).abs() < 1e-12);
    assert_eq!(sign_test_greater(&[1.0], &[1.0]), (0, 0, 1.0));
    let (_, _, tiny) = sign_test_greater(&vec![1.0; 200], &vec![0.0; 200]);
    assert!(tiny > 0.0 && (tiny.ln() + 200.0 * std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn truth_aligned_masking_beats_random_maps() {
    // an evaluator whose confidence lives on a planted square
    let n = 120;
    let mut g = rng::stream(5, 0);
    let (mut truth_drops, mut random_drops) = (Vec::new(), Vec::new());
    for s in 0..n {
        let off = s % 5;
        let truth = Tensor::from_fn([8, 8], |i| {
            let (y, x) = (i / 8, i % 8);
            (y >= off && y < off + 3 && x >= off && x < off + 3) as u8 as f64
        });
        let img = Tensor::from_fn([1, 8, 8], |i| 0.2 + 0.8 * truth.data()[i]);
        let t2 = truth.clone();
        let eval = move |xs: &[&Tensor]| -> Result<Vec<f64>> {
            Ok(xs
                .iter()
                .map(|x| {
                    let inside: f64 = (0..64)
                        .filter(|&i| t2.data()[i] > 0.0)
                        .map(|i| x.data()[i])
                        .sum::<f64>()
                        / 9.0;
                    1.0 / (1.0 + (-(8.0 * inside - 4.0)).exp())
                })
                .collect())
        };
        let area = saliency_area(&truth, 0.5);
        let random = random_map_with_area(8, 8, area, &mut g);
        let mu = channel_means(&img).unwrap();
        let p = eval(&[
            &img,
            &hard_mask(&img, &truth, 0.5, &mu).unwrap(),
            &hard_mask(&img, &random, 0.5, &mu).unwrap(),
        ])
        .unwrap();
        truth_drops.push(DropRecord::new(s, p[0], p[1], area).drop);
        random_drops.push(DropRecord::new(s, p[0], p[2], area).drop);
    }
    let (_, _, p) = sign_test_greater(&truth_drops, &random_drops);
    assert!(p < 0.01, "p = {p}");
}

#[test]
fn csv_contracts() {
    let rows = [rec(0.8, 0.4, 0.25)];
    let csv = records_csv(&rows).unwrap();
    assert_eq!(csv, format!("{RECORD_CSV_HEADER}\n0,0.8,0.4,0.5,0.25,1\n"));
    let s = MetricSummary {
        method: "mhex".into(),
        avg_drop: 0.5,
        sad: 0.25,
        ead: 0.5,
        insertion_auc: 0.7,
        deletion_auc: 0.2,
        n: 1,
        excluded: 0,
    };
    let out = summary_csv(&[s]);
    assert_eq!(out.lines().next(), Some(SUMMARY_CSV_HEADER));
    assert_eq!(out.lines().nth(1), Some("mhex,0.5,0.25,0.5,0.7,0.2,1,0"));
}

#[test]
fn image_metrics_and_summary() {
    let img = randn(&[1, 8, 8], 4, 1).map(f64::abs);
    let cam = Tensor::from_fn([8, 8], |i| (i % 8) as f64 / 7.0);
    let eval = |xs: &[&Tensor]| -> Result<Vec<f64>> {
        Ok(xs.iter().map(|x| x.data()[7].clamp(0.01, 0.99)).collect())
    };
    let m = image_metrics(&eval, 2, &img, &cam, 8).unwrap();
    assert_eq!(m.hard.sample_id, 2);
    assert_eq!(m.hard.area, 0.5);
    assert_eq!(m.insertion.fractions.len(), 9);
    let s = summarize("mhex", &[m.clone(), m]).unwrap();
    assert_eq!(s.n, 2);
    assert!((0.0..=1.0).contains(&s.avg_drop) && (0.0..=1.0).contains(&s.ead));
}

proptest! {
    #[test]
    fn drops_lie_in_unit_interval(ps in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..30)) {
        let rs: Vec<DropRecord> = ps.iter().map(|&(a, b, x)| rec(a, b, x)).collect();
        for r in &rs {
            prop_assert!((0.0..=1.0).contains(&r.drop));
        }
        if let Ok(m) = avg_drop(&rs) {
            prop_assert!((0.0..=1.0).contains(&m.value));
            prop_assert!((0.0..=1.0).contains(&ead(&rs).unwrap().value));
        }
    }

    #[test]
    fn random_map_has_requested_area(seed in 0u64..10_000, area in 0.0f64..=1.0) {
        let mut g = rng::stream(seed, 0);
        let m = random_map_with_area(6, 7, area, &mut g);
        let want = (area * 42.0).round() / 42.0;
        prop_assert!((saliency_area(&m, 0.5) - want).abs() < 1e-12);
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn deletion_start_equals_insertion_end(seed in 0u64..1_000) {
        let img = randn(&[2, 4, 4], seed, 1);
        let cam = randn(&[4, 4], seed, 2);
        let eval = |xs: &[&Tensor]| -> Result<Vec<f64>> {
            Ok(xs.iter().map(|x| x.data().iter().map(|v| v.sin()).sum::<f64>()).collect())
        };
        let ins = insertion_curve(&eval, &img, &cam, 5).unwrap();
        let del = deletion_curve(&eval, &img, &cam, 5).unwrap();
        prop_assert_eq!(del.confidences[0], *ins.confidences.last().unwrap());
    }
}
