//! Finite-difference checks of the policy losses on small random nets.

use std::ops::Range;

use cubedagger::policy::{Batch, EnsemblePolicy, LossGrad, PolicyConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u64 = 20;
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

pub struct Trial {
    pub policy: EnsemblePolicy,
    pub batch: Batch,
    pub lambda: Array2<f64>,
    pub residual: Array2<f64>,
}

/// A random net with at most 200 parameters, random constraint heads and a
/// random batch.
pub fn trial(seed: u64) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let state_dim = rng.random_range(1..=3);
    let action_dim = rng.random_range(1..=2);
    let cfg = PolicyConfig {
        heads: rng.random_range(1..=3),
        hidden: [rng.random_range(2..=6), rng.random_range(2..=6)],
        sigma_bar: rng.random_range(0.05..0.5),
        ..PolicyConfig::new(state_dim, action_dim)
    };
    let mut policy = EnsemblePolicy::new(cfg.clone(), seed).unwrap();
    assert!(policy.num_params() <= 200, "{} parameters", policy.num_params());
    let heads = policy.lambda_range().start..policy.num_params();
    for p in &mut policy.params_mut()[heads] {
        *p = rng.random_range(-0.5..0.5);
    }
    let n = rng.random_range(1..=6);
    let states = Array2::from_shape_fn((n, state_dim), |_| rng.random_range(-1.0..1.0));
    let actions = Array2::from_shape_fn((n, action_dim), |_| rng.random_range(-1.0..1.0));
    let lambda = Array2::from_shape_fn((n, action_dim), |_| rng.random_range(-3.0..3.0));
    // Residuals on both sides of the allowable error.
    let tol = cfg.allowable_error();
    let residual = Array2::from_shape_fn((n, action_dim), |_| rng.random_range(-3.0 * tol..3.0 * tol));
    Trial {
        policy,
        batch: Batch::new(states, actions).unwrap(),
        lambda,
        residual,
    }
}

fn finite_difference(
    policy: &EnsemblePolicy,
    range: Range<usize>,
    loss: &dyn Fn(&EnsemblePolicy) -> f64,
) -> Vec<f64> {
    let mut probe = policy.clone();
    range
        .map(|j| {
            let x = policy.params()[j];
            probe.params_mut()[j] = x + STEP;
            let up = loss(&probe);
            probe.params_mut()[j] = x - STEP;
            let down = loss(&probe);
            probe.params_mut()[j] = x;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Max-norm relative error `|g - fd|_inf / max(|g|_inf, |fd|_inf)`.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub type Eval = fn(&Trial, &EnsemblePolicy) -> LossGrad;

/// Compares the analytic gradient with finite differences on `range` and
/// requires it to vanish elsewhere. Returns the worst relative error.
pub fn check(range: fn(&EnsemblePolicy) -> Range<usize>, eval: Eval) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..TRIALS {
        let t = trial(seed);
        let analytic = eval(&t, &t.policy).grad;
        let r = range(&t.policy);
        let numeric = finite_difference(&t.policy, r.clone(), &|p| eval(&t, p).loss);
        let err = relative_error(&analytic[r.clone()], &numeric);
        if err > TOLERANCE {
            return Err(format!("seed {seed}: relative error {err:e}"));
        }
        if let Some(j) = (0..analytic.len()).find(|j| !r.contains(j) && analytic[*j] != 0.0) {
            return Err(format!("seed {seed}: gradient leaks to parameter {j}"));
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn everything(p: &EnsemblePolicy) -> Range<usize> {
    0..p.num_params()
}

/// The four losses with the parameter range each one trains.
pub fn losses() -> [(&'static str, fn(&EnsemblePolicy) -> Range<usize>, Eval); 4] {
    [
        ("bc_loss", everything, |t, p| p.bc_loss(&t.batch).unwrap()),
        ("ctrl_loss", everything, |t, p| p.ctrl_loss(&t.batch, &t.lambda).unwrap()),
        ("lambda_loss", EnsemblePolicy::lambda_range, |t, p| {
            p.lambda_loss(&t.batch, &t.residual).unwrap()
        }),
        ("delta_loss", EnsemblePolicy::delta_range, |t, p| {
            p.delta_loss(&t.batch, &t.residual, &t.lambda).unwrap()
        }),
    ]
}
