use puridiver::robust::{fit_gmm_1d, posterior_small, Augmenter, EmOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn augmentations_are_unbiased() {
    let std = vec![1.0, 2.0, 0.5];
    let aug = Augmenter::new(std.clone());
    let x = [1.0, -3.0, 0.25];
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mean = [0.0; 3];
    for _ in 0..n {
        for (m, v) in mean.iter_mut().zip(aug.weak(&x, &mut rng)) {
            *m += v / n as f64;
        }
    }
    for k in 0..3 {
        let sd = aug.weak_sigma * std[k];
        assert!((mean[k] - x[k]).abs() < 3.0 * sd / (n as f64).sqrt(), "feature {k}: {}", mean[k]);
    }
}

#[test]
fn strong_dropout_rate() {
    let mut aug = Augmenter::new(vec![1.0; 50]);
    aug.strong_sigma = 0.0;
    let x = vec![1.0; 50];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trials = 400;
    let mut zeros = 0usize;
    for _ in 0..trials {
        zeros += aug.strong(&x, &mut rng).iter().filter(|&&v| v == 0.0).count();
    }
    let rate = zeros as f64 / (trials * 50) as f64;
    let p = aug.strong_drop;
    let sigma = (p * (1.0 - p) / (trials * 50) as f64).sqrt();
    assert!((rate - p).abs() < 3.0 * sigma, "dropout rate {rate}");
}

#[test]
fn em_recovers_an_equal_mixture() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Normal::new(0.5, 0.1).unwrap();
    let b = Normal::new(3.0, 0.2).unwrap();
    let mut values: Vec<f64> = (0..500).map(|_| a.sample(&mut rng)).collect();
    values.extend((0..500).map(|_| b.sample(&mut rng)));
    let fit = fit_gmm_1d(&values, EmOptions::default()).unwrap();
    assert!(!fit.degenerate);
    assert!((fit.mean_small - 0.5).abs() < 0.05);
    assert!((fit.mean_large - 3.0).abs() < 0.05);
    assert!((fit.var_small - 0.01).abs() < 0.005);
    assert!((fit.var_large - 0.04).abs() < 0.015);
    assert!((fit.weight_small - 0.5).abs() < 0.02);
    assert!(posterior_small(&fit, 0.5) > 0.999);
    assert!(posterior_small(&fit, 3.0) < 0.001);
}
