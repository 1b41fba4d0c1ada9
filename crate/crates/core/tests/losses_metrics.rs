use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::data::Mask;
use tumorseg::losses::*;
use tumorseg::metrics::*;

const EPS: f64 = 1e-7;

fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| rng.random_range(0.02..0.98))
}

fn random_target(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    Mask::new(Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(p)))).unwrap()
}

// Scalar-loop references, written against the textbook formulas.

fn ce_oracle(p: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let (h, w) = p.dim();
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            let q = p[[i, j]].max(EPS).min(1.0 - EPS);
            let y = t[[i, j]];
            s += -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        }
    }
    s / (h * w) as f64
}

fn dice_oracle(p: &Array2<f64>, t: &Array2<f64>) -> f64 {
    let (h, w) = p.dim();
    let (mut pt, mut sp, mut st) = (0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            pt += p[[i, j]] * t[[i, j]];
            sp += p[[i, j]];
            st += t[[i, j]];
        }
    }
    1.0 - (2.0 * pt + 1.0) / (sp + st + 1.0)
}

fn kl_oracle(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let (h, w) = p.dim();
    let mut s = 0.0;
    for i in 0..h {
        for j in 0..w {
            let pa = p[[i, j]].max(EPS).min(1.0 - EPS);
            let qb = q[[i, j]].max(EPS).min(1.0 - EPS);
            let a = [pa, 1.0 - pa];
            let b = [qb, 1.0 - qb];
            let kl_ab: f64 = (0..2).map(|k| a[k] * (a[k] / b[k]).ln()).sum();
            let kl_ba: f64 = (0..2).map(|k| b[k] * (b[k] / a[k]).ln()).sum();
            s += 0.5 * (kl_ab + kl_ba);
        }
    }
    s / (h * w) as f64
}

#[test]
fn cross_entropy_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let p = random_probs(&mut rng, 8, 8);
        let t = random_target(&mut rng, 8, 8);
        let got = cross_entropy(p.view(), t.view()).unwrap();
        assert!((got - ce_oracle(&p, &t)).abs() < 1e-10);
    }
}

#[test]
fn dice_matches_summation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let p = random_probs(&mut rng, 8, 8);
        let t = random_target(&mut rng, 8, 8);
        let got = dice_loss(p.view(), t.view()).unwrap();
        assert!((got - dice_oracle(&p, &t)).abs() < 1e-10);
        assert!((0.0..=1.0).contains(&got));
    }
}

#[test]
fn symmetric_kl_matches_textbook_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let p = random_probs(&mut rng, 8, 8);
        let q = random_probs(&mut rng, 8, 8);
        let got = symmetric_kl(p.view(), q.view()).unwrap();
        assert!((got - kl_oracle(&p, &q)).abs() < 1e-10);
    }
}

#[test]
fn composite_losses_recompose_from_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    for _ in 0..10 {
        let p1 = random_probs(&mut rng, 8, 8);
        let p2 = random_probs(&mut rng, 8, 8);
        let t = random_target(&mut rng, 8, 8);
        let rd = rdrop_supervised_loss(p1.view(), p2.view(), t.view(), &w).unwrap();
        let oracle = ce_oracle(&p1, &t) + ce_oracle(&p2, &t) + kl_oracle(&p1, &p2);
        assert!((rd - oracle).abs() < 1e-10);
        let ad = adaptation_loss(p1.view(), t.view(), &w).unwrap();
        assert!((ad - (dice_oracle(&p1, &t) + ce_oracle(&p1, &t))).abs() < 1e-10);
    }
}

#[test]
fn degenerate_weights_reduce_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p1 = random_probs(&mut rng, 6, 6);
    let p2 = random_probs(&mut rng, 6, 6);
    let t = random_target(&mut rng, 6, 6);
    let zero = LossWeights {
        lambda_u: 0.0,
        alpha: 0.0,
        gamma: 0.0,
    };
    let ce1 = cross_entropy(p1.view(), t.view()).unwrap();
    let ce2 = cross_entropy(p2.view(), t.view()).unwrap();
    assert_eq!(rdrop_supervised_loss(p1.view(), p2.view(), t.view(), &zero).unwrap(), ce1 + ce2);
    let same = rdrop_supervised_loss(p1.view(), p1.view(), t.view(), &LossWeights::default()).unwrap();
    assert_eq!(same, 2.0 * ce1);
    assert_eq!(
        adaptation_loss(p1.view(), t.view(), &zero).unwrap(),
        dice_loss(p1.view(), t.view()).unwrap()
    );
    let tm = t.clone();
    let perfect = adaptation_loss(tm.view(), t.view(), &LossWeights::default()).unwrap();
    assert!(perfect.abs() < 1e-5);
}

fn assert_grad_close(analytic: f64, numeric: f64) {
    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
    assert!(rel < 1e-4, "analytic {analytic} numeric {numeric} rel {rel}");
}

fn check_grad(f: impl Fn(&Array2<f64>) -> f64, grad: &Array2<f64>, x: &Array2<f64>) {
    let h = 1e-5;
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let mut plus = x.clone();
        plus[[i, j]] += h;
        let mut minus = x.clone();
        minus[[i, j]] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        assert_grad_close(grad[[i, j]], numeric);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = LossWeights {
        lambda_u: 0.7,
        alpha: 1.3,
        gamma: 0.8,
    };
    for _ in 0..20 {
        let p1 = random_probs(&mut rng, 6, 6);
        let p2 = random_probs(&mut rng, 6, 6);
        let t = random_target(&mut rng, 6, 6);

        let g = cross_entropy_grad(p1.view(), t.view()).unwrap();
        check_grad(|x| cross_entropy(x.view(), t.view()).unwrap(), &g, &p1);

        let g = dice_loss_grad(p1.view(), t.view()).unwrap();
        check_grad(|x| dice_loss(x.view(), t.view()).unwrap(), &g, &p1);

        let (gp, gq) = symmetric_kl_grad(p1.view(), p2.view()).unwrap();
        check_grad(|x| symmetric_kl(x.view(), p2.view()).unwrap(), &gp, &p1);
        check_grad(|x| symmetric_kl(p1.view(), x.view()).unwrap(), &gq, &p2);

        let (g1, g2) = rdrop_supervised_loss_grad(p1.view(), p2.view(), t.view(), &w).unwrap();
        check_grad(|x| rdrop_supervised_loss(x.view(), p2.view(), t.view(), &w).unwrap(), &g1, &p1);
        check_grad(|x| rdrop_supervised_loss(p1.view(), x.view(), t.view(), &w).unwrap(), &g2, &p2);

        let g = adaptation_loss_grad(p1.view(), t.view(), &w).unwrap();
        check_grad(|x| adaptation_loss(x.view(), t.view(), &w).unwrap(), &g, &p1);

        // Total objective: labeled two-pass term plus weighted unlabeled KL.
        let u1 = random_probs(&mut rng, 6, 6);
        let u2 = random_probs(&mut rng, 6, 6);
        let total = |a: &Array2<f64>| {
            let l = rdrop_supervised_loss(p1.view(), p2.view(), t.view(), &w).unwrap();
            total_ssl_loss(l, symmetric_kl(a.view(), u2.view()).unwrap(), &w)
        };
        let (gu, _) = symmetric_kl_grad(u1.view(), u2.view()).unwrap();
        check_grad(total, &(gu * w.lambda_u), &u1);
    }
}

#[test]
fn losses_accept_batched_arrays() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = Array3::from_shape_fn((3, 4, 4), |_| rng.random_range(0.1..0.9));
    let t = Array3::from_shape_fn((3, 4, 4), |_| f64::from(rng.random_bool(0.5) as u8));
    let batched = cross_entropy(p.view(), t.view()).unwrap();
    let per_slice: f64 = (0..3)
        .map(|k| {
            let a = p.index_axis(ndarray::Axis(0), k).to_owned();
            let b = t.index_axis(ndarray::Axis(0), k).to_owned();
            ce_oracle(&a, &b)
        })
        .sum::<f64>()
        / 3.0;
    assert!((batched - per_slice).abs() < 1e-12);
}

fn confusion_oracle(p: &Mask, g: &Mask) -> [f64; 5] {
    let (h, w) = p.shape();
    let (mut tp, mut fp, mut tn, mut fnn) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            match (p.get(i, j), g.get(i, j)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fnn += 1.0,
                (false, false) => tn += 1.0,
            }
        }
    }
    let safe = |n: f64, d: f64| if d > 0.0 { n / d } else { 0.0 };
    let both_empty = tp + fp + fnn == 0.0;
    let one_if_empty = |v: f64| if both_empty { 1.0 } else { v };
    [
        one_if_empty(safe(2.0 * tp, 2.0 * tp + fp + fnn)),
        one_if_empty(safe(tp, tp + fp + fnn)),
        one_if_empty(safe(tp, tp + fnn)),
        safe(tn, tn + fp),
        one_if_empty(safe(tp, tp + fp)),
    ]
}

#[test]
fn metrics_match_confusion_oracle_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut oracle_dsc = Vec::new();
    let mut pairs = Vec::new();
    for k in 0..200 {
        let density = [0.0, 0.05, 0.3, 0.7][k % 4];
        let p = random_mask(&mut rng, 16, 16, density);
        let g = random_mask(&mut rng, 16, 16, [0.0, 0.2, 0.5][k % 3]);
        let got = confusion_metrics(&p, &g).unwrap().values();
        let want = confusion_oracle(&p, &g);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-9, "{got:?} vs {want:?}");
            assert!((0.0..=1.0).contains(a));
        }
        oracle_dsc.push(want[0]);
        pairs.push((format!("s{k}"), p, g));
    }
    let report = MetricReport::evaluate("x", pairs.iter().map(|(id, p, g)| (id.as_str(), p, g))).unwrap();
    let n = oracle_dsc.len() as f64;
    let mean = oracle_dsc.iter().sum::<f64>() / n;
    let std = (oracle_dsc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((report.summary.dsc.mean - mean).abs() < 1e-15);
    assert!((report.summary.dsc.std - std).abs() < 1e-15);
    let listed: Vec<f64> = report.per_slice.iter().map(|s| s.metrics.dsc).collect();
    let (m2, s2) = aggregate_mean_std(&listed).unwrap();
    assert_eq!((m2, s2), (report.summary.dsc.mean, report.summary.dsc.std));
}

#[test]
fn half_coverage_example() {
    let k = 12;
    let mut gt = Mask::zeros(8, 8);
    let mut pred = Mask::zeros(8, 8);
    for i in 0..2 * k {
        gt.set(i / 8, i % 8, true);
        if i < k {
            pred.set(i / 8, i % 8, true);
        }
    }
    let m = confusion_metrics(&pred, &gt).unwrap();
    assert!((m.dsc - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!((m.jac, m.se, m.pre), (0.5, 0.5, 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_is_non_negative_and_exactly_symmetric(
        p in proptest::collection::vec(0.0f64..=1.0, 16),
        q in proptest::collection::vec(0.0f64..=1.0, 16),
    ) {
        let p = Array2::from_shape_vec((4, 4), p).unwrap();
        let q = Array2::from_shape_vec((4, 4), q).unwrap();
        let a = symmetric_kl(p.view(), q.view()).unwrap();
        let b = symmetric_kl(q.view(), p.view()).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(symmetric_kl(p.view(), p.view()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn dsc_and_jaccard_are_linked(bits in proptest::collection::vec(0u8..4, 64)) {
        let p = Mask::new(Array2::from_shape_fn((8, 8), |(i, j)| bits[i * 8 + j] & 1)).unwrap();
        let g = Mask::new(Array2::from_shape_fn((8, 8), |(i, j)| bits[i * 8 + j] >> 1)).unwrap();
        let m = confusion_metrics(&p, &g).unwrap();
        if !(p.is_empty() && g.is_empty()) {
            prop_assert!((m.dsc - 2.0 * m.jac / (1.0 + m.jac)).abs() < 1e-12);
        }
    }

    #[test]
    fn stepping_toward_target_never_increases_losses(
        p in proptest::collection::vec(0.0f64..=1.0, 25),
        t in proptest::collection::vec(0u8..2, 25),
        step in 0.0f64..=1.0,
    ) {
        let p = Array2::from_shape_vec((5, 5), p).unwrap();
        let t = Array2::from_shape_vec((5, 5), t.into_iter().map(f64::from).collect()).unwrap();
        let moved = &p + &((&t - &p) * step);
        let ce0 = cross_entropy(p.view(), t.view()).unwrap();
        let ce1 = cross_entropy(moved.view(), t.view()).unwrap();
        prop_assert!(ce1 <= ce0 + 1e-12);
        let d0 = dice_loss(p.view(), t.view()).unwrap();
        let d1 = dice_loss(moved.view(), t.view()).unwrap();
        prop_assert!(d1 <= d0 + 1e-12);
    }

    #[test]
    fn aggregate_mean_lies_within_range(values in proptest::collection::vec(0.0f64..=1.0, 1..50)) {
        let (mean, std) = aggregate_mean_std(&values).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo && mean <= hi);
        prop_assert!(std >= 0.0);
    }
}
