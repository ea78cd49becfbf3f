//! Time-consistent exploration noise.
//!
//! Red noise is produced by a first-order autoregressive filter whose
//! innovation is scaled so that every channel stays unit-variance:
//! `x_t = gamma * x_{t-1} + sqrt(1 - gamma^2) * w_t`, with `x_0 = w_0`.
//! One independent channel exists per (ensemble head, action dimension).

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NoiseError {
    #[error("step period must be positive and finite, got {0}")]
    InvalidPeriod(f64),
    #[error("time constant must be nonnegative, got {0}")]
    InvalidTimeConstant(f64),
    #[error("temporal consistency must lie in [0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Memory of an AR(1) red-noise generator.
#[derive(Debug, Clone)]
pub struct RedNoise {
    gamma: f64,
    innovation_gain: f64,
    memory: Array2<f64>,
    rng: ChaCha8Rng,
}

/// `exp(-dt / T)`; a zero time constant yields white noise.
pub fn temporal_consistency(dt: f64, time_constant: f64) -> Result<f64, NoiseError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(NoiseError::InvalidPeriod(dt));
    }
    if !(time_constant >= 0.0) {
        return Err(NoiseError::InvalidTimeConstant(time_constant));
    }
    if time_constant == 0.0 {
        return Ok(0.0);
    }
    Ok((-dt / time_constant).exp())
}

impl RedNoise {
    pub fn new(
        heads: usize,
        action_dim: usize,
        dt: f64,
        time_constant: f64,
        seed: u64,
    ) -> Result<Self, NoiseError> {
        let gamma = temporal_consistency(dt, time_constant)?;
        Self::with_gamma(heads, action_dim, gamma, seed)
    }

    pub fn with_gamma(
        heads: usize,
        action_dim: usize,
        gamma: f64,
        seed: u64,
    ) -> Result<Self, NoiseError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(NoiseError::InvalidGamma(gamma));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memory = Array2::from_shape_simple_fn((heads, action_dim), || {
            StandardNormal.sample(&mut rng)
        });
        Ok(Self {
            gamma,
            innovation_gain: (1.0 - gamma * gamma).sqrt(),
            memory,
            rng,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Current noise values, one row per head.
    pub fn memory(&self) -> ArrayView2<'_, f64> {
        self.memory.view()
    }

    /// Advances every channel by one step and returns the new values.
    pub fn step(&mut self) -> ArrayView2<'_, f64> {
        let (gamma, gain) = (self.gamma, self.innovation_gain);
        let rng = &mut self.rng;
        self.memory.mapv_inplace(|x| {
            let white: f64 = StandardNormal.sample(rng);
            gamma * x + gain * white
        });
        self.memory.view()
    }
}

/// Gain applied to each head's scale when injecting noise: `2 sqrt(K) / 3`.
pub fn perturbation_gain(heads: usize) -> f64 {
    2.0 * (heads as f64).sqrt() / 3.0
}

/// `means + gain * scales * noise`, elementwise, with one row per head.
pub fn perturb_candidates(
    means: ArrayView2<'_, f64>,
    scales: ArrayView2<'_, f64>,
    noise: ArrayView2<'_, f64>,
) -> Result<Array2<f64>, NoiseError> {
    if means.dim() != scales.dim() || means.dim() != noise.dim() {
        return Err(NoiseError::Shape(format!(
            "means {:?}, scales {:?}, noise {:?}",
            means.dim(),
            scales.dim(),
            noise.dim()
        )));
    }
    let gain = perturbation_gain(means.nrows());
    let mut out = means.to_owned();
    ndarray::Zip::from(&mut out)
        .and(scales)
        .and(noise)
        .for_each(|m, s, n| *m += gain * s * n);
    Ok(out)
}
