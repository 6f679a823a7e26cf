mod common;

use common::{correlated, randn};
use mhex_core::analysis::*;
use mhex_core::block::W1GradMask;
use mhex_core::hosts::{ResNet, ResNetConfig, Transformer, TransformerConfig};
use mhex_core::saliency::WeightFilterConfig;
use mhex_core::{Error, Tensor};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::{beta, gamma};

fn toy() -> ResNet {
    ResNet::new(ResNetConfig::toy(4, 11)).unwrap()
}

fn image(seed: u64) -> Tensor {
    randn(&[1, 32, 32], seed, 1).map(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0))
}

#[test]
fn cosine_examples() {
    let a = randn(&[3, 3], 1, 1);
    assert!((gradient_cosine(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    let e1 = Tensor::new([2], vec![1.0, 0.0]).unwrap();
    let e2 = Tensor::new([2], vec![0.0, 3.0]).unwrap();
    assert!(gradient_cosine(&e1, &e2).unwrap().abs() < 1e-9);
    assert_eq!(
        gradient_cosine(&Tensor::zeros([4]), &Tensor::zeros([4])).unwrap(),
        0.0
    );
    assert!(matches!(
        gradient_cosine(&e1, &a),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn collaboration_needs_a_successor_site() {
    let m = toy();
    let img = image(1);
    let c = collaboration_cosine(&m, &img, 2, 0).unwrap();
    assert!((-1.0..=1.0).contains(&c));
    assert!(matches!(
        collaboration_cosine(&m, &img, 2, 3),
        Err(Error::Contract(_))
    ));
    let t = Transformer::new(TransformerConfig::toy(40, 4, 2)).unwrap();
    let tokens = [4usize, 30, 31, 32, 1];
    let c = collaboration_cosine(&t, &tokens[..], 1, 1).unwrap();
    assert!((-1.0..=1.0).contains(&c));
}

#[test]
fn site_gradients_are_nonzero_and_shaped() {
    let m = toy();
    let g = site_gradients(&m, &image(2), 0, 1, None).unwrap();
    assert_eq!(g.gate.shape(), &[32, 32]);
    assert_eq!(g.supervision.shape(), &[32, 32]);
    assert!(g.gate.data().iter().any(|&v| v != 0.0));
    assert!(g.supervision.data().iter().any(|&v| v != 0.0));
}

#[test]
fn blockwise_grid_one_is_global_cosine() {
    let m = toy();
    for seed in 0..3 {
        let img = image(seed);
        let q = blockwise_quality(&m, &img, 1, 1, 1).unwrap();
        let c = collaboration_cosine(&m, &img, 1, 1).unwrap();
        assert_eq!(q.shape(), &[1, 1]);
        assert!((q.data()[0] - c).abs() < 1e-9);
    }
}

#[test]
fn disjoint_cell_gradients_sum_to_full_gradient() {
    let m = toy();
    let img = image(4);
    let (h, w) = site_resolution(&m, 0).unwrap();
    let left = Tensor::from_fn([h, w], |p| (p % w < w / 2) as u8 as f64);
    let right = left.map(|v| 1.0 - v);
    let full = site_gradients(&m, &img, 3, 0, None).unwrap();
    let a = site_gradients(&m, &img, 3, 0, Some(W1GradMask { mask: left })).unwrap();
    let b = site_gradients(&m, &img, 3, 0, Some(W1GradMask { mask: right })).unwrap();
    let pairs = [
        (&a.gate, &b.gate, &full.gate),
        (&a.supervision, &b.supervision, &full.supervision),
    ];
    for (x, y, whole) in pairs {
        let scale = whole.data().iter().fold(1e-12f64, |s, v| s.max(v.abs()));
        for i in 0..whole.numel() {
            assert!((x.data()[i] + y.data()[i] - whole.data()[i]).abs() <= 1e-9 * scale);
        }
    }
}

#[test]
fn blockwise_rejects_bad_grids() {
    let m = toy();
    let img = image(0);
    assert_eq!(site_resolution(&m, 3).unwrap(), (4, 4));
    assert!(matches!(
        blockwise_quality(&m, &img, 0, 2, 5),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        blockwise_quality(&m, &img, 0, 0, 0),
        Err(Error::Config(_))
    ));
    let q = blockwise_quality(&m, &img, 0, 2, 2).unwrap();
    assert!(q.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let unit = cosine_to_unit(&q);
    assert!(unit.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn zero_activation_cell_scores_zero() {
    // an empty cell routes nothing through the live W1
    let m = toy();
    let (h, w) = site_resolution(&m, 0).unwrap();
    let empty = W1GradMask {
        mask: Tensor::zeros([h, w]),
    };
    let g = site_gradients(&m, &image(5), 0, 0, Some(empty)).unwrap();
    assert!(g.gate.data().iter().all(|&v| v == 0.0));
    assert_eq!(g.cosine().unwrap(), 0.0);
}

#[test]
fn grid_cells_partition_the_map() {
    let (h, w, g) = (16, 16, 7);
    let mut cover = vec![0.0; h * w];
    for i in 0..g {
        for j in 0..g {
            for (c, v) in cover.iter_mut().zip(grid_cell_mask(h, w, g, i, j).data()) {
                *c += v;
            }
        }
    }
    assert!(cover.iter().all(|&c| c == 1.0));
}

#[test]
fn special_functions_match_reference() {
    for &x in &[0.1, 0.5, 1.0, 2.5, 7.0, 33.3, 170.0] {
        assert!(
            (ln_gamma(x) - gamma::ln_gamma(x)).abs() < 1e-10 * (1.0 + gamma::ln_gamma(x).abs())
        );
    }
    for &(a, b, x) in &[
        (0.5, 0.5, 0.3),
        (9.0, 0.5, 0.8),
        (2.0, 3.0, 0.1),
        (10.0, 10.0, 0.5),
        (0.5, 40.0, 0.01),
    ] {
        let want = beta::beta_reg(a, b, x);
        assert!(
            (incomplete_beta(a, b, x).unwrap() - want).abs() < 1e-10,
            "I({x}; {a}, {b})"
        );
    }
    assert_eq!(incomplete_beta(2.0, 2.0, 0.0).unwrap(), 0.0);
    assert_eq!(incomplete_beta(2.0, 2.0, 1.0).unwrap(), 1.0);
    assert!(matches!(
        incomplete_beta(2.0, 2.0, 1.5),
        Err(Error::Domain { .. })
    ));
    assert!(incomplete_beta(0.0, 2.0, 0.5).is_err());
}

#[test]
fn student_t_matches_reference() {
    for df in [1.0, 3.0, 18.0, 100.0] {
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        for t in [0.0, 0.3, 1.0, 2.1, 5.0, -4.0] {
            let want = 2.0 * (1.0 - dist.cdf(f64::abs(t)));
            assert!((student_t_two_sided(t, df).unwrap() - want).abs() < 1e-10);
        }
    }
    assert_eq!(student_t_two_sided(f64::INFINITY, 5.0).unwrap(), 0.0);
}

#[test]
fn pearson_fixtures() {
    let x: Vec<f64> = (0..10).map(f64::from).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let r = pearson(&x, &y).unwrap();
    assert_eq!((r.r, r.p, r.n), (1.0, 0.0, 10));
    assert!(r.t.is_infinite());

    let cx = [-1.0, 1.0, 0.0, 0.0];
    let cy = [0.0, 0.0, -1.0, 1.0];
    let r = pearson(&cx, &cy).unwrap();
    assert_eq!((r.r, r.t, r.p), (0.0, 0.0, 1.0));

    let (x, y) = correlated(20, 0.444, 3);
    let r = pearson(&x, &y).unwrap();
    assert!((r.r - 0.444).abs() < 1e-12);
    assert!((r.t - 2.10).abs() < 0.01);
    assert!((r.p - 0.05).abs() < 0.005);
}

#[test]
fn pearson_matches_reference_p_values() {
    for seed in 0..20 {
        let x = randn(&[15], seed, 1);
        let y = randn(&[15], seed, 2)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a + 0.5 * b)
            .collect::<Vec<_>>();
        let r = pearson(x.data(), &y).unwrap();
        let dist = StudentsT::new(0.0, 1.0, 13.0).unwrap();
        let want = 2.0 * (1.0 - dist.cdf(r.t.abs()));
        assert!((r.p - want).abs() < 1e-10);
    }
}

#[test]
fn pearson_errors() {
    assert!(matches!(
        pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
        Err(Error::UndefinedCorrelation(_))
    ));
    assert!(matches!(
        pearson(&[1.0, 2.0], &[1.0, 2.0]),
        Err(Error::Contract(_))
    ));
    assert!(matches!(
        pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]),
        Err(Error::Dimension { .. })
    ));
}

fn record(id: usize, site: usize, cosine: f64, p_orig: f64, sad: f64) -> CollabRecord {
    CollabRecord {
        sample_id: id,
        site,
        cosine,
        p_orig,
        sad_drop: sad,
    }
}

#[test]
fn triangle_layout() {
    assert_eq!(triangle_sites(4), vec![0, 1, 2]);
    assert_eq!(triangle_sites(8), vec![4, 5, 6]);
    assert_eq!(triangle_sites(2), vec![0]);
    assert!(triangle_sites(1).is_empty());

    let mut rs = Vec::new();
    for i in 0..12 {
        let (c, _) = correlated(12, 0.8, i as u64);
        for s in 4..7 {
            rs.push(record(i, s, c[i] + s as f64, (i as f64 * 0.37).sin(), c[i]));
        }
    }
    let tri = correlation_triangle(&rs);
    assert_eq!(tri.len(), 7);
    let pairs: Vec<_> = tri.iter().map(|e| (e.pair, e.site)).collect();
    use TrianglePair::*;
    assert_eq!(
        pairs,
        vec![
            (CosineSad, Some(4)),
            (CosineSad, Some(5)),
            (CosineSad, Some(6)),
            (CosinePOrig, Some(4)),
            (CosinePOrig, Some(5)),
            (CosinePOrig, Some(6)),
            (SadPOrig, None)
        ]
    );
    let csv = triangle_csv(&tri);
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.starts_with("pair,site,r,t,p,n\ncosine~sad,4,"));
    assert!(csv.lines().last().unwrap().starts_with("sad~p_orig,-,"));
    assert_eq!(collab_csv(&rs).lines().count(), rs.len() + 1);
}

#[test]
fn identical_samples_give_undefined_entries() {
    let rs: Vec<CollabRecord> = (0..5)
        .flat_map(|i| (0..3).map(move |s| record(i, s, 0.2, 0.9, 0.1)))
        .collect();
    let tri = correlation_triangle(&rs);
    assert_eq!(tri.len(), 7);
    assert!(tri
        .iter()
        .all(|e| matches!(e.result, Err(Error::UndefinedCorrelation(_)))));
    assert!(triangle_csv(&tri)
        .lines()
        .skip(1)
        .all(|l| l.ends_with("NaN,NaN,NaN,0")));
}

#[test]
fn planted_dependence_is_recovered() {
    let n = 40;
    let noise = randn(&[n], 8, 1);
    let rs: Vec<CollabRecord> = (0..n)
        .map(|i| {
            let c = i as f64 / n as f64;
            record(
                i,
                0,
                c,
                0.5 + 0.01 * noise.data()[i],
                c + 0.2 * noise.data()[(i + 7) % n],
            )
        })
        .collect();
    let tri = correlation_triangle(&rs);
    let r = tri[0].result.as_ref().unwrap();
    assert_eq!(tri[0].pair, TrianglePair::CosineSad);
    assert!(r.r > 0.0 && r.p < 0.05);
}

#[test]
fn collab_records_on_a_host() {
    let m = toy();
    let rs = collab_records(&m, 7, &image(9), 2, &WeightFilterConfig::for_classes(4)).unwrap();
    assert_eq!(rs.iter().map(|r| r.site).collect::<Vec<_>>(), vec![0, 1, 2]);
    for r in &rs {
        assert_eq!(r.sample_id, 7);
        assert!((-1.0..=1.0).contains(&r.cosine));
        assert!((0.0..=1.0).contains(&r.p_orig) && (0.0..=1.0).contains(&r.sad_drop));
    }
}

#[test]
fn histogram_entropy_of_uniform() {
    let xs: Vec<f64> = (0..100_000).map(|i| 3.0 * i as f64 / 100_000.0).collect();
    assert!((histogram_entropy(&xs, 50).unwrap() - 3f64.ln()).abs() < 1e-3);
    assert!(histogram_entropy(&[1.0, 1.0], 4).is_err());
    assert!(histogram_entropy(&[], 4).is_err());
}

#[test]
fn relu_entropy_drop_hits_half_ln_two() {
    let target = 0.5 * std::f64::consts::LN_2;
    let est = relu_entropy_drop(1_000_000, 200, 0).unwrap();
    assert!((est - target).abs() < 0.02, "estimate {est}");
    assert!(matches!(
        relu_entropy_drop(99_999, 200, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn relu_entropy_error_shrinks_with_n() {
    let target = 0.5 * std::f64::consts::LN_2;
    let err = |n: usize| {
        (0..10)
            .map(|s| (relu_entropy_drop(n, 200, s).unwrap() - target).abs())
            .sum::<f64>()
            / 10.0
    };
    assert!(err(400_000) < err(100_000));
}

proptest! {
    #[test]
    fn cosine_symmetric_and_scale_free(seed in 0u64..10_000, k in 0.01f64..100.0) {
        let a = randn(&[5], seed, 1);
        let b = randn(&[5], seed, 2);
        let ab = gradient_cosine(&a, &b).unwrap();
        prop_assert!((ab - gradient_cosine(&b, &a).unwrap()).abs() < 1e-15);
        prop_assert!((ab - gradient_cosine(&a.map(|v| 3.0 * v), &b.map(|v| k * v)).unwrap()).abs() < 1e-7);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn pearson_affine_behaviour(seed in 0u64..10_000, a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let x = randn(&[12], seed, 1);
        let y = randn(&[12], seed, 2);
        let base = pearson(x.data(), y.data()).unwrap();
        let up: Vec<f64> = y.data().iter().map(|v| a * v + b).collect();
        let down: Vec<f64> = y.data().iter().map(|v| -a * v + b).collect();
        prop_assert!((pearson(x.data(), &up).unwrap().r - base.r).abs() < 1e-10);
        prop_assert!((pearson(x.data(), &down).unwrap().r + base.r).abs() < 1e-10);
        prop_assert!((0.0..=1.0).contains(&base.p));
    }

    #[test]
    fn p_value_decreases_in_abs_t(t in 0.0f64..20.0, dt in 0.01f64..5.0, n in 3usize..200) {
        let df = (n - 2) as f64;
        prop_assert!(student_t_two_sided(t + dt, df).unwrap() <= student_t_two_sided(t, df).unwrap());
    }
}
