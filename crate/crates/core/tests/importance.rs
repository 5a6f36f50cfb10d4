use firerisk_core::importance::{feature_importance, fit_forest, select_features, Dataset, ForestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn names(p: usize) -> Vec<String> {
    (0..p).map(|k| format!("x{k}")).collect()
}

/// `y = 2·1[x0 > 0.5] + ε`, the other columns pure noise.
fn step_data(n: usize, p: usize, seed: u64) -> Dataset<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let r: Vec<f64> = (0..p).map(|_| rng.gen::<f64>()).collect();
        let e: f64 = rng.sample(StandardNormal);
        y.push(if r[0] > 0.5 { 2.0 } else { 0.0 } + e);
        rows.push(r);
    }
    Dataset::new(names(p), rows, y).unwrap()
}

fn config(seed: u64) -> ForestConfig {
    ForestConfig {
        n_trees: 100,
        n_permutations: 99,
        seed,
        ..ForestConfig::default()
    }
}

#[test]
fn exchangeable_copies_share_importance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut rows, mut y) = (Vec::new(), Vec::new());
    for _ in 0..400 {
        let s: f64 = rng.gen();
        let noise: f64 = rng.gen();
        let e: f64 = rng.sample(StandardNormal);
        rows.push(vec![s, s, noise]);
        y.push(3.0 * s + 0.5 * e);
    }
    let data = Dataset::new(names(3), rows, y).unwrap();
    let cfg = ForestConfig {
        n_trees: 300,
        mtry: Some(1),
        ..config(2)
    };
    let r = feature_importance(&data, &cfg, 0.05).unwrap();
    for f in ["x0", "x1"] {
        let s = r.score(f).unwrap();
        assert!((s - 0.5).abs() <= 0.15, "{f}: {s}");
    }
    assert!(r.score("x2").unwrap() < 0.05);
}

#[test]
fn noise_features_score_low() {
    let mut ok = 0;
    for seed in 0..20 {
        let r = feature_importance(&step_data(500, 4, 100 + seed), &config(seed), 0.05).unwrap();
        assert_eq!(r.ranked[0].feature, "x0", "seed {seed}");
        if (1..4).all(|k| r.score(&format!("x{k}")).unwrap() < 0.05) {
            ok += 1;
        }
    }
    assert!(ok >= 19, "{ok}/20");
}

#[test]
fn root_splits_on_signal() {
    let mut ok = 0;
    for seed in 0..20 {
        let data = step_data(500, 4, 200 + seed);
        let cfg = ForestConfig {
            mtry: Some(4),
            n_trees: 20,
            ..config(seed)
        };
        let forest = fit_forest(&data, &cfg).unwrap();
        let on_signal = forest.trees.iter().filter(|t| t.root_feature() == Some(0)).count();
        if on_signal == forest.trees.len() {
            ok += 1;
        }
    }
    assert!(ok >= 19, "{ok}/20");
}

#[test]
fn ranking_invariant_under_affine_maps() {
    let data = step_data(300, 3, 7);
    let moved = (0..3).fold(data.clone(), |d, f| d.map_feature(f, |v| 4.0 * v - 1.5));
    let a = feature_importance(&data, &config(3), 0.05).unwrap();
    let b = feature_importance(&moved, &config(3), 0.05).unwrap();
    let order = |r: &firerisk_core::ImportanceReport| r.ranked.iter().map(|f| f.feature.clone()).collect::<Vec<_>>();
    assert_eq!(order(&a), order(&b));
    for (x, y) in a.ranked.iter().zip(&b.ranked) {
        assert!((x.score - y.score).abs() < 1e-9);
    }
}

/// With the response shuffled, the permutation test stops most trees at the root.
#[test]
fn null_response_rarely_splits() {
    let data = step_data(500, 6, 9);
    let mut y = data.response().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for i in (1..y.len()).rev() {
        y.swap(i, rng.gen_range(0..=i));
    }
    let forest = fit_forest(&data.with_response(y), &config(4)).unwrap();
    let split = forest.trees.iter().filter(|t| t.root_feature().is_some()).count();
    assert!(split * 4 < forest.trees.len(), "{split} of {} trees split", forest.trees.len());
}

#[test]
fn selection_falls_back_to_top_feature() {
    let r = firerisk_core::ImportanceReport::from_scores(&names(3), &[0.01, 0.02, 0.0], 0.05);
    let s = select_features(&r, 0.05);
    assert!(s.fallback);
    assert_eq!(s.features, vec!["x1".to_string()]);
    let r = firerisk_core::ImportanceReport::from_scores(&names(3), &[0.6, 0.3, 0.1], 0.05);
    let s = select_features(&r, 0.05);
    assert!(!s.fallback);
    assert_eq!(s.features.len(), 3);
}

#[test]
fn too_few_rows_rejected() {
    let data = step_data(3, 2, 1);
    assert!(fit_forest(&data, &config(1)).is_err());
}
