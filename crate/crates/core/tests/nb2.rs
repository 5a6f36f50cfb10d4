use approx::assert_abs_diff_eq;
use firerisk_core::nb2::{
    estimate_alpha_ols, fit_nb2, fit_poisson, loglik_gradient, nb2_loglik, poisson_loglik, FitOptions,
};
use firerisk_core::simulate::sample_nb2;
use firerisk_core::CountData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One covariate on `[0, 2]`, unit exposure, NB2 counts (`alpha = 0` is Poisson).
fn sample(n: usize, b: [f64; 2], alpha: f64, seed: u64) -> CountData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = rng.gen_range(0.0..2.0);
        y.push(sample_nb2((b[0] + b[1] * x).exp(), alpha, &mut rng));
        rows.push(vec![x]);
    }
    CountData::new(rows, y, vec![1.0; n]).unwrap()
}

fn names() -> Vec<String> {
    vec!["x".into()]
}

#[test]
fn poisson_recovery() {
    let d = sample(5000, [0.5, 0.3], 0.0, 11);
    let fit = fit_poisson(&d, &FitOptions::default()).unwrap();
    assert_abs_diff_eq!(fit.coefficients[0], 0.5, epsilon = 0.06);
    assert_abs_diff_eq!(fit.coefficients[1], 0.3, epsilon = 0.05);
}

#[test]
fn two_step_alpha_near_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mu = vec![4.0; 10_000];
    let y: Vec<u64> = mu.iter().map(|m| sample_nb2(*m, 0.5, &mut rng)).collect();
    let a = estimate_alpha_ols(&y, &mu, 1e-8);
    assert!((0.4..=0.6).contains(&a.alpha), "{}", a.alpha);
    assert!(!a.effectively_poisson);
}

#[test]
fn fit_beats_every_grid_neighbour() {
    let d = sample(400, [0.2, 0.6], 0.7, 13);
    let m = fit_nb2(&d, &names(), &FitOptions::default()).unwrap();
    let best = nb2_loglik(&d, &m.coefficients, m.alpha).unwrap();
    let steps = [-0.1, -0.02, -0.005, 0.0, 0.005, 0.02, 0.1];
    for d0 in steps {
        for d1 in steps {
            for da in steps {
                let b = [m.coefficients[0] + d0, m.coefficients[1] + d1];
                let ll = nb2_loglik(&d, &b, m.alpha * (da as f64).exp()).unwrap();
                assert!(ll <= best + 1e-9, "({d0}, {d1}, {da}): {ll} > {best}");
            }
        }
    }
}

#[test]
fn gradient_vanishes_at_optimum() {
    let d = sample(3000, [0.4, 0.5], 0.4, 14);
    let m = fit_nb2(&d, &names(), &FitOptions::default()).unwrap();
    assert!(m.diagnostics.converged);
    let g = loglik_gradient(&d, &m.coefficients, m.alpha).unwrap();
    for gi in g {
        assert!(gi.abs() / 3000.0 < 1e-6, "{gi}");
    }
}

/// Residual variance within bins of fitted means against `μ + αμ²`.
#[test]
fn variance_function_by_mean_bins() {
    let n = 50_000;
    let d = sample(n, [0.5, 0.5], 0.5, 15);
    let m = fit_nb2(&d, &names(), &FitOptions::default()).unwrap();
    let mut cells: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let mu = m.mean(d.row(i), 1.0).unwrap();
            (mu, (d.counts()[i] as f64 - mu).powi(2))
        })
        .collect();
    cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for bin in cells.chunks(n / 5) {
        let k = bin.len() as f64;
        let empirical = bin.iter().map(|c| c.1).sum::<f64>() / k;
        let model = bin.iter().map(|c| c.0 + m.alpha * c.0 * c.0).sum::<f64>() / k;
        assert!((empirical / model - 1.0).abs() < 0.15, "{empirical} vs {model}");
    }
}

#[test]
fn exposure_scaling_moves_only_the_intercept() {
    let d = sample(2000, [0.3, 0.4], 0.3, 16);
    let opts = FitOptions::default();
    let a = fit_nb2(&d, &names(), &opts).unwrap();
    let b = fit_nb2(&d.with_scaled_exposure(5.0), &names(), &opts).unwrap();
    assert_abs_diff_eq!(b.coefficients[0], a.coefficients[0] - 5f64.ln(), epsilon = 1e-6);
    assert_abs_diff_eq!(b.coefficients[1], a.coefficients[1], epsilon = 1e-6);
    assert_abs_diff_eq!(b.alpha, a.alpha, epsilon = 1e-6);
}

#[test]
fn nests_poisson() {
    let opts = FitOptions::default();
    // overdispersed: strictly better than Poisson
    let d = sample(2000, [0.5, 0.3], 0.5, 17);
    let pois = poisson_loglik(&d, &fit_poisson(&d, &opts).unwrap().coefficients).unwrap();
    let m = fit_nb2(&d, &names(), &opts).unwrap();
    assert!(m.diagnostics.log_likelihood > pois + 10.0);
    // Poisson data: no worse than Poisson, up to the floor's O(α) gap
    for seed in 0..5 {
        let d = sample(2000, [0.5, 0.3], 0.0, 100 + seed);
        let pois = poisson_loglik(&d, &fit_poisson(&d, &opts).unwrap().coefficients).unwrap();
        let m = fit_nb2(&d, &names(), &opts).unwrap();
        assert!(m.diagnostics.log_likelihood >= pois - 1e-6 * pois.abs(), "seed {seed}");
        assert!(m.alpha < 0.05, "seed {seed}: α = {}", m.alpha);
    }
}

#[test]
fn f32_fit_tracks_f64() {
    let d = sample(2000, [0.5, 0.3], 0.5, 18);
    let m64 = fit_nb2(&d, &names(), &FitOptions::default()).unwrap();
    let rows: Vec<Vec<f32>> = (0..d.n()).map(|i| vec![d.row(i)[0] as f32]).collect();
    let d32 = firerisk_core::nb2::CountData::<f32>::new(rows, d.counts().to_vec(), vec![1.0; d.n()]).unwrap();
    let opts = FitOptions {
        tol: 1e-5,
        ..FitOptions::default()
    };
    let m32 = fit_nb2(&d32, &names(), &opts).unwrap();
    for (a, b) in m64.coefficients.iter().zip(&m32.coefficients) {
        assert_abs_diff_eq!(*a, *b as f64, epsilon = 1e-3);
    }
    assert_abs_diff_eq!(m64.alpha, m32.alpha as f64, epsilon = 1e-3);
}
