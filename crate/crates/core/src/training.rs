//! Aggregated dataset and the per-episode replay pass.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::optim::Adam;
use crate::policy::{Batch, EnsemblePolicy, PolicyError};

/// Append-only store of (state, expert action) pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
}

impl Dataset {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
        }
    }

    pub fn push(&mut self, state: &[f64], expert_action: &[f64]) {
        assert_eq!(state.len(), self.state_dim, "state dimension");
        assert_eq!(expert_action.len(), self.action_dim, "action dimension");
        self.states.extend_from_slice(state);
        self.actions.extend_from_slice(expert_action);
    }

    pub fn len(&self) -> usize {
        if self.state_dim == 0 {
            0
        } else {
            self.states.len() / self.state_dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, n: usize) -> &[f64] {
        &self.states[n * self.state_dim..(n + 1) * self.state_dim]
    }

    pub fn action(&self, n: usize) -> &[f64] {
        &self.actions[n * self.action_dim..(n + 1) * self.action_dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.states
            .chunks_exact(self.state_dim)
            .zip(self.actions.chunks_exact(self.action_dim))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch, PolicyError> {
        let states = Array2::from_shape_fn((indices.len(), self.state_dim), |(r, c)| {
            self.state(indices[r])[c]
        });
        let actions = Array2::from_shape_fn((indices.len(), self.action_dim), |(r, c)| {
            self.action(indices[r])[c]
        });
        Batch::new(states, actions)
    }

    pub fn all(&self) -> Result<Batch, PolicyError> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingMode {
    /// Behavioural cloning only; the constraint heads are frozen.
    Cloning,
    /// Behavioural cloning with the uncertainty constraint, its multiplier
    /// and its slack.
    Controlled,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochSummary {
    pub steps: usize,
    pub policy_loss: f64,
    pub lambda_loss: f64,
    pub delta_loss: f64,
    /// Fraction of (sample, dimension) pairs whose maximum log-deviation was
    /// inside the constraint band, measured before each update. `None` when
    /// training without the constraint.
    pub band_fraction: Option<f64>,
}

/// One uniformly shuffled pass over the dataset in minibatches of
/// `batch_size` (the last batch may be smaller). Returns `None` for an
/// empty dataset.
pub fn train_epoch(
    policy: &mut EnsemblePolicy,
    optimizer: &mut Adam,
    dataset: &Dataset,
    batch_size: usize,
    mode: TrainingMode,
    rng: &mut ChaCha8Rng,
) -> Result<Option<EpochSummary>, PolicyError> {
    if dataset.is_empty() {
        log::warn!("skipping training pass on an empty dataset");
        return Ok(None);
    }
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);

    let (band_lo, band_hi) = policy.config().band();
    let mut summary = EpochSummary::default();
    let mut in_band = 0usize;
    let mut entries = 0usize;
    for chunk in order.chunks(batch_size) {
        let batch = dataset.batch(chunk)?;
        match mode {
            TrainingMode::Cloning => {
                let bc = policy.bc_loss(&batch)?;
                summary.policy_loss += bc.loss;
                let range = policy.policy_range();
                optimizer.step(policy.params_mut(), &bc.grad, &[range]);
            }
            TrainingMode::Controlled => {
                let cs = policy.constraint_state(&batch)?;
                in_band += cs
                    .max_log_dev
                    .iter()
                    .filter(|v| (band_lo..=band_hi).contains(*v))
                    .count();
                entries += cs.max_log_dev.len();
                let ctrl = policy.ctrl_loss(&batch, &cs.lambda)?;
                let lam = policy.lambda_loss(&batch, &cs.residual)?;
                let del = policy.delta_loss(&batch, &cs.residual, &cs.lambda)?;
                summary.policy_loss += ctrl.loss;
                summary.lambda_loss += lam.loss;
                summary.delta_loss += del.loss;
                let mut grad = ctrl.grad;
                for (g, (l, d)) in grad.iter_mut().zip(lam.grad.iter().zip(&del.grad)) {
                    *g += l + d;
                }
                let n = policy.num_params();
                optimizer.step(policy.params_mut(), &grad, &[0..n]);
            }
        }
        summary.steps += 1;
    }
    let steps = summary.steps as f64;
    summary.policy_loss /= steps;
    summary.lambda_loss /= steps;
    summary.delta_loss /= steps;
    summary.band_fraction = (entries > 0).then(|| in_band as f64 / entries as f64);
    Ok(Some(summary))
}
