use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::data::{generate_synthetic_corpus, LabeledSample, Mask, Origin};
use tumorseg::perturb::*;

/// 8-connected component count, iterative DFS.
fn count_components(m: &Mask) -> usize {
    let (h, w) = m.shape();
    let mut seen = vec![vec![false; w]; h];
    let mut n = 0;
    for sy in 0..h {
        for sx in 0..w {
            if !m.get(sy, sx) || seen[sy][sx] {
                continue;
            }
            n += 1;
            let mut stack = vec![(sy, sx)];
            seen[sy][sx] = true;
            while let Some((y, x)) = stack.pop() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if m.get(ny, nx) && !seen[ny][nx] {
                            seen[ny][nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
        }
    }
    n
}

fn euclid_disc(h: usize, w: usize, cy: f64, cx: f64, r: f64) -> Mask {
    Mask::new(Array2::from_shape_fn((h, w), |(y, x)| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        u8::from(dy * dy + dx * dx <= r * r)
    }))
    .unwrap()
}

fn random_blob(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let r = rng.random_range(4.0..10.0);
    let cy = rng.random_range(r..h as f64 - r);
    let cx = rng.random_range(r..w as f64 - r);
    euclid_disc(h, w, cy, cx, r)
}

fn arb_mask() -> impl Strategy<Value = Mask> {
    (4usize..20, 4usize..20, any::<u64>()).prop_map(|(h, w, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let density = rng.random_range(0.0..0.6);
        Mask::new(Array2::from_shape_fn((h, w), |_| u8::from(rng.random_bool(density)))).unwrap()
    })
}

#[test]
fn noise_on_blank_mask_adds_one_to_five_blobs() {
    let cfg = PerturbConfig::default();
    let blank = Mask::zeros(64, 64);
    for seed in 0..200 {
        let out = add_background_noise(&blank, &cfg, seed);
        let n = count_components(&out);
        assert!((1..=5).contains(&n), "seed {seed}: {n} components");
    }
}

#[test]
fn occlusion_removes_the_requested_fraction() {
    let mut m = Mask::zeros(40, 50);
    for y in 5..30 {
        for x in 5..45 {
            m.set(y, x, true);
        }
    }
    assert_eq!(m.count(), 1000);
    let cfg = PerturbConfig {
        occlusion_fraction: (0.3, 0.3),
        ..Default::default()
    };
    for seed in 0..50 {
        let out = occlude_foreground(&m, &cfg, seed);
        assert!((650..=750).contains(&out.count()), "{}", out.count());
        assert!(out.is_subset_of(&m));
        let removed = Mask::new(&m.data().to_owned() - &out.data()).unwrap();
        assert_eq!(count_components(&removed), 1);
    }
}

#[test]
fn elastic_area_ratio_stays_bounded() {
    let cfg = PerturbConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..500 {
        let m = random_blob(&mut rng, 48, 48);
        let out = elastic_deform(&m, &cfg, trial);
        let ratio = out.count() as f64 / m.count() as f64;
        assert!((0.5..=2.0).contains(&ratio), "trial {trial}: ratio {ratio}");
    }
}

#[test]
fn closing_recovers_discs() {
    for big in 3..=10 {
        let m = euclid_disc(40, 40, 20.0, 20.0, big as f64);
        for r in 1..=4 {
            assert_eq!(erode(&dilate(&m, r), r), m, "disc {big}, radius {r}");
        }
    }
}

#[test]
fn fire_rates_match_the_configured_probability() {
    let cfg = PerturbConfig::default();
    let m = euclid_disc(16, 16, 8.0, 8.0, 4.0);
    let mut counts = std::collections::HashMap::new();
    let mut kept = 0usize;
    let mut black = 0usize;
    for seed in 0..10_000u64 {
        let (_, trace) = perturb_traced(&m, &cfg, seed);
        if trace.all_black {
            black += 1;
            continue;
        }
        kept += 1;
        for op in trace.applied {
            *counts.entry(op).or_insert(0usize) += 1;
        }
    }
    for op in PerturbOp::ALL {
        let rate = counts[&op] as f64 / kept as f64;
        assert!((rate - 0.4).abs() <= 0.02, "{op}: {rate}");
    }
    let black_rate = black as f64 / 10_000.0;
    assert!((black_rate - 0.05).abs() < 0.01, "{black_rate}");
}

#[test]
fn every_error_mode_occurs() {
    let cfg = PerturbConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen = std::collections::HashSet::new();
    for seed in 0..2000 {
        let m = random_blob(&mut rng, 40, 40);
        seen.insert(classify_error(&perturb(&m, &cfg, seed), &m));
    }
    for class in [
        ErrorClass::OverSegmentation,
        ErrorClass::UnderSegmentation,
        ErrorClass::BoundaryShift,
        ErrorClass::AllBlack,
    ] {
        assert!(seen.contains(&class), "{class:?} never produced");
    }
}

fn labeled(n: usize) -> Vec<LabeledSample> {
    generate_synthetic_corpus(n * 3, 32, 32, 4)
        .into_iter()
        .filter(|(s, _)| s.has_tumor)
        .take(n)
        .map(|(s, m)| LabeledSample::new(s, m, Origin::Original).unwrap())
        .collect()
}

#[test]
fn adaptation_set_has_expected_size_and_channels() {
    let pairs = labeled(10);
    let cfg = PerturbConfig::default();
    let set = build_adaptation_training_set(&pairs, 1, &cfg, 0).unwrap();
    assert_eq!(set.len(), 10);
    let set = build_adaptation_training_set(&pairs, 3, &cfg, 0).unwrap();
    assert_eq!(set.len(), 30);
    for (k, s) in set.iter().enumerate() {
        assert!(s.pseudo().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(s.image().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(s.target, pairs[k % 10].mask);
    }
    assert_eq!(set, build_adaptation_training_set(&pairs, 3, &cfg, 0).unwrap());
    assert!(build_adaptation_training_set(&[], 1, &cfg, 0).is_err());
    assert!(build_adaptation_training_set(&pairs, 0, &cfg, 0).is_err());
}

#[test]
fn all_black_fraction_in_adaptation_set() {
    let pairs = labeled(20);
    let cfg = PerturbConfig {
        all_black: 0.2,
        ..PerturbConfig::identity()
    };
    let set = build_adaptation_training_set(&pairs, 100, &cfg, 5).unwrap();
    let black = set.iter().filter(|s| s.pseudo().iter().all(|v| *v == 0.0)).count();
    let frac = black as f64 / set.len() as f64;
    // 2000 Bernoulli(0.2) draws: sd ~ 0.009.
    assert!((frac - 0.2).abs() < 0.03, "{frac}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn perturb_outputs_are_valid_and_deterministic(m in arb_mask(), seed in any::<u64>()) {
        let cfg = PerturbConfig::default();
        let a = perturb(&m, &cfg, seed);
        prop_assert_eq!(a.shape(), m.shape());
        prop_assert!(a.data().iter().all(|v| *v <= 1));
        prop_assert_eq!(a, perturb(&m, &cfg, seed));
    }

    #[test]
    fn operations_respect_monotonicity(m in arb_mask(), seed in any::<u64>(), r in 1usize..5) {
        let cfg = PerturbConfig::default();
        prop_assert!(m.is_subset_of(&add_background_noise(&m, &cfg, seed)));
        prop_assert!(occlude_foreground(&m, &cfg, seed).is_subset_of(&m));
        let e = erode(&m, r);
        let d = dilate(&m, r);
        prop_assert!(e.is_subset_of(&m));
        prop_assert!(m.is_subset_of(&d));
        let el = elastic_deform(&m, &cfg, seed);
        prop_assert!(el.data().iter().all(|v| *v <= 1));
    }
}
