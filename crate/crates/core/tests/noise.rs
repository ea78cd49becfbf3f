mod common;

use cubedagger::exploration::{perturb_candidates, perturbation_gain, temporal_consistency, RedNoise};
use ndarray::Array2;

/// One stream per channel, `steps` long.
fn streams(noise: &mut RedNoise, steps: usize) -> Vec<Vec<f64>> {
    let channels = noise.memory().len();
    let mut out = vec![Vec::with_capacity(steps); channels];
    for _ in 0..steps {
        for (c, v) in noise.step().iter().enumerate() {
            out[c].push(*v);
        }
    }
    out
}

#[test]
fn gamma_for_the_collection_rate() {
    let g = temporal_consistency(0.05, 3.0).unwrap();
    assert!((g - (-1.0f64 / 60.0).exp()).abs() < 1e-15);
    assert!((g - 0.98347).abs() < 1e-5);
    assert_eq!(temporal_consistency(0.05, 0.0).unwrap(), 0.0);
    assert!(temporal_consistency(0.0, 3.0).is_err());
}

#[test]
fn ar1_variance_and_lag_one() {
    let mut noise = RedNoise::with_gamma(1, 1, 0.9835, 5).unwrap();
    let xs = streams(&mut noise, 1_000_000).remove(0);
    let (_, var) = common::mean_var(&xs);
    let r1 = common::autocorrelation(&xs, 1);
    assert!((var - 1.0).abs() < 0.01, "variance {var}");
    assert!((r1 - 0.9835).abs() < 0.01, "lag-1 {r1}");
}

#[test]
fn autocorrelation_decays_geometrically() {
    for gamma in [0.5, 0.9, 0.98347] {
        let mut noise = RedNoise::with_gamma(1, 1, gamma, 17).unwrap();
        let xs = streams(&mut noise, 1_000_000).remove(0);
        for lag in 1..=10 {
            let r = common::autocorrelation(&xs, lag);
            let expected = gamma.powi(lag as i32);
            assert!((r - expected).abs() < 0.02, "gamma {gamma} lag {lag}: {r} vs {expected}");
        }
    }
}

/// Marginal variance across 10^5 independent channels stays at one from the
/// first step on, including close to the frozen limit.
#[test]
fn marginal_variance_is_stationary() {
    for gamma in [0.0, 0.5, 0.9, 0.99, 0.999] {
        let mut noise = RedNoise::with_gamma(500, 200, gamma, 23).unwrap();
        let check = |m: &[f64], step: usize| {
            let (_, var) = common::mean_var(m);
            assert!((var - 1.0).abs() < 0.02, "gamma {gamma} step {step}: variance {var}");
        };
        check(noise.memory().as_slice().unwrap(), 0);
        for step in 1..=1000 {
            let m = noise.step();
            if [1, 10, 100, 1000].contains(&step) {
                check(m.as_slice().unwrap(), step);
            }
        }
    }
}

/// Time-averaged variance over consecutive 10^5-step windows of one channel.
#[test]
fn windowed_variance_is_stationary() {
    for gamma in [0.0, 0.5] {
        let mut noise = RedNoise::with_gamma(1, 1, gamma, 29).unwrap();
        let xs = streams(&mut noise, 1_000_000).remove(0);
        for (w, window) in xs.chunks(100_000).enumerate() {
            let (_, var) = common::mean_var(window);
            assert!((var - 1.0).abs() < 0.02, "gamma {gamma} window {w}: {var}");
        }
    }
}

#[test]
fn channels_are_independent() {
    for gamma in [0.0, 0.9] {
        let mut noise = RedNoise::with_gamma(3, 2, gamma, 31).unwrap();
        let xs = streams(&mut noise, 1_000_000);
        for a in 0..xs.len() {
            for b in a + 1..xs.len() {
                let r = common::correlation(&xs[a], &xs[b]);
                assert!(r.abs() < 0.01, "gamma {gamma} channels {a},{b}: {r}");
            }
        }
    }
}

#[test]
fn same_seed_same_stream() {
    let mut a = RedNoise::new(10, 2, 0.05, 3.0, 99).unwrap();
    let mut b = RedNoise::new(10, 2, 0.05, 3.0, 99).unwrap();
    assert_eq!(a.memory(), b.memory());
    for _ in 0..1000 {
        assert_eq!(a.step().to_owned(), b.step().to_owned());
    }
    let mut c = RedNoise::new(10, 2, 0.05, 3.0, 100).unwrap();
    assert_ne!(a.step().to_owned(), c.step().to_owned());
}

#[test]
fn gain_by_substitution() {
    for (k, expected) in [(1, 2.0 / 3.0), (4, 4.0 / 3.0), (9, 2.0), (10, 2.0 * 10f64.sqrt() / 3.0)] {
        assert!((perturbation_gain(k) - expected).abs() < 1e-15, "K = {k}");
    }
    assert!((perturbation_gain(10) - 2.108).abs() < 1e-3);
}

#[test]
fn perturbation_scales_each_head() {
    let means = Array2::from_shape_fn((4, 2), |(k, i)| k as f64 - i as f64);
    let scales = Array2::from_shape_fn((4, 2), |(k, _)| 0.1 * (k + 1) as f64);
    let noise = Array2::from_shape_fn((4, 2), |(k, i)| if (k + i) % 2 == 0 { 1.0 } else { -0.5 });
    let out = perturb_candidates(means.view(), scales.view(), noise.view()).unwrap();
    for ((k, i), v) in out.indexed_iter() {
        let expected = means[[k, i]] + (4.0 / 3.0) * scales[[k, i]] * noise[[k, i]];
        assert!((v - expected).abs() < 1e-15);
    }
    let zero = Array2::zeros((4, 2));
    assert_eq!(perturb_candidates(means.view(), scales.view(), zero.view()).unwrap(), means);
    let wrong = Array2::zeros((3, 2));
    assert!(perturb_candidates(means.view(), scales.view(), wrong.view()).is_err());
}
