//! Shared-trunk ensemble of diagonal-Gaussian policy heads.
//!
//! The network is `state -> tanh(dense) -> tanh(dense) -> features`, with K
//! linear heads producing a mean and a log-scale per action dimension. Two
//! additional linear heads read the (gradient-stopped) features: one gives
//! the state-dependent Lagrange multiplier of the uncertainty constraint and
//! one the raw slack variable.
//!
//! All parameters live in a single flat vector. Losses return their gradient
//! over that vector, which keeps the optimizer, checkpointing and
//! finite-difference checks independent of the network structure.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp of the head scale.
pub const MIN_SCALE: f64 = 1e-4;
/// Upper clamp of the head scale.
pub const MAX_SCALE: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite {which} loss ({value}) on a batch of {batch} samples")]
    NonFiniteLoss {
        which: &'static str,
        value: f64,
        batch: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid policy configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub heads: usize,
    pub hidden: [usize; 2],
    /// Numerical-stabilisation constant of the uncertainty constraint.
    pub epsilon: f64,
    /// Ensemble-uncertainty threshold.
    pub sigma_bar: f64,
    /// Clamp the Lagrange multiplier at zero instead of leaving it signed.
    #[serde(default)]
    pub nonnegative_lambda: bool,
}

impl PolicyConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            heads: 10,
            hidden: [100, 100],
            epsilon: 1e-4,
            sigma_bar: 0.1,
            nonnegative_lambda: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PolicyError::Config(m.to_string()));
        if self.state_dim == 0 || self.action_dim == 0 {
            return fail("state and action dimensions must be positive");
        }
        if self.heads == 0 {
            return fail("at least one head is required");
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return fail("epsilon must lie in (0, 0.5)");
        }
        if !(self.sigma_bar > 0.0) {
            return fail("sigma_bar must be positive");
        }
        Ok(())
    }

    /// Width of the slack domain, `ln(1 + eps) - ln(2 eps)`.
    pub fn slack_width(&self) -> f64 {
        (1.0 + self.epsilon).ln() - (2.0 * self.epsilon).ln()
    }

    /// Allowable constraint error: ten percent of the slack domain.
    pub fn allowable_error(&self) -> f64 {
        0.1 * self.slack_width()
    }

    /// Lower and upper edge of the band on `max_k ln(|a - a_k| / sigma_bar + eps)`.
    pub fn band(&self) -> (f64, f64) {
        ((2.0 * self.epsilon).ln(), (1.0 + self.epsilon).ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tensor {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Tensor {
    fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    w0: Tensor,
    b0: Tensor,
    w1: Tensor,
    b1: Tensor,
    wh: Tensor,
    bh: Tensor,
    wl: Tensor,
    bl: Tensor,
    wd: Tensor,
    bd: Tensor,
    total: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig) -> Self {
        let mut offset = 0;
        let mut next = |rows: usize, cols: usize| {
            let t = Tensor { offset, rows, cols };
            offset += rows * cols;
            t
        };
        let [h0, h1] = cfg.hidden;
        let out = cfg.heads * 2 * cfg.action_dim;
        let w0 = next(h0, cfg.state_dim);
        let b0 = next(1, h0);
        let w1 = next(h1, h0);
        let b1 = next(1, h1);
        let wh = next(out, h1);
        let bh = next(1, out);
        let wl = next(cfg.action_dim, h1);
        let bl = next(1, cfg.action_dim);
        let wd = next(cfg.action_dim, h1);
        let bd = next(1, cfg.action_dim);
        Self {
            w0,
            b0,
            w1,
            b1,
            wh,
            bh,
            wl,
            bl,
            wd,
            bd,
            total: offset,
        }
    }
}

fn mat<'a>(params: &'a [f64], t: Tensor) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((t.rows, t.cols), &params[t.range()]).expect("layout")
}

fn vecv<'a>(params: &'a [f64], t: Tensor) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params[t.range()])
}

fn put_mat(grad: &mut [f64], t: Tensor, value: &Array2<f64>) {
    for (dst, src) in grad[t.range()].iter_mut().zip(value.iter()) {
        *dst += *src;
    }
}

fn put_vec(grad: &mut [f64], t: Tensor, value: &Array1<f64>) {
    for (dst, src) in grad[t.range()].iter_mut().zip(value.iter()) {
        *dst += *src;
    }
}

fn dense(input: &Array2<f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    input.dot(&w.t()) + &b
}

/// A minibatch of (state, expert action) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
}

impl Batch {
    pub fn new(states: Array2<f64>, actions: Array2<f64>) -> Result<Self> {
        if states.nrows() != actions.nrows() {
            return Err(PolicyError::DimensionMismatch {
                what: "batch rows",
                expected: states.nrows(),
                got: actions.nrows(),
            });
        }
        if states.nrows() == 0 {
            return Err(PolicyError::EmptyBatch);
        }
        Ok(Self { states, actions })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Outputs of all heads at a single state, one row per head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub means: Array2<f64>,
    pub scales: Array2<f64>,
}

impl HeadOutputs {
    pub fn heads(&self) -> usize {
        self.means.nrows()
    }

    /// Ensemble mean `a_pi`.
    pub fn ensemble_mean(&self) -> Array1<f64> {
        crate::consensus::ensemble_statistics(self.means.view()).0
    }

    /// Ensemble standard deviation `sigma_pi` (population form).
    pub fn ensemble_std(&self) -> Array1<f64> {
        crate::consensus::ensemble_statistics(self.means.view()).1
    }

    /// Per-head, per-dimension Gaussian log-density of `candidates`.
    pub fn log_density(&self, candidates: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros(self.means.dim());
        Zip::from(&mut out)
            .and(candidates)
            .and(&self.means)
            .and(&self.scales)
            .for_each(|o, &x, &m, &s| *o = crate::consensus::gaussian_log_density(x, m, s));
        out
    }
}

struct Cache {
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
    lambda_raw: Array2<f64>,
    delta_raw: Array2<f64>,
}

/// Loss value with its gradient over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Constraint quantities at a batch, all `B x |A|`. These are treated as
/// constants by the losses that consume them.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintState {
    pub lambda: Array2<f64>,
    pub delta: Array2<f64>,
    /// `max_k ln(|a - a_k| / sigma_bar + eps)`.
    pub max_log_dev: Array2<f64>,
    /// Constraint residual `e`.
    pub residual: Array2<f64>,
}

/// `max_k ln(|a_i - a_i^k| / sigma_bar + eps)` for each dimension, with the
/// arg-max head (lowest index on ties).
pub fn max_log_deviation(
    expert: ArrayView1<'_, f64>,
    candidates: ArrayView2<'_, f64>,
    sigma_bar: f64,
    epsilon: f64,
) -> (Array1<f64>, Vec<usize>) {
    let dim = expert.len();
    let mut best = Array1::from_elem(dim, f64::NEG_INFINITY);
    let mut arg = vec![0; dim];
    for (k, row) in candidates.rows().into_iter().enumerate() {
        for i in 0..dim {
            let v = ((expert[i] - row[i]).abs() / sigma_bar + epsilon).ln();
            if v > best[i] {
                best[i] = v;
                arg[i] = k;
            }
        }
    }
    (best, arg)
}

/// Constraint residual `e_i = ln(2 eps) + delta_i - max_k ln(|a_i - a_i^k| / sigma_bar + eps)`.
pub fn constraint_residual(
    expert: ArrayView1<'_, f64>,
    candidates: ArrayView2<'_, f64>,
    delta: ArrayView1<'_, f64>,
    sigma_bar: f64,
    epsilon: f64,
) -> Array1<f64> {
    let (dev, _) = max_log_deviation(expert, candidates, sigma_bar, epsilon);
    (2.0 * epsilon).ln() + &delta - &dev
}

/// Ensemble policy with its constraint heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePolicy {
    config: PolicyConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl EnsemblePolicy {
    /// Random initialisation. The trunk is drawn once; each head has its
    /// own stream so that heads start out different. The multiplier and
    /// slack heads start at zero.
    pub fn new(config: PolicyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];

        let fill = |params: &mut [f64], rng: &mut ChaCha8Rng, t: Tensor, rows: Range<usize>, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let cols = t.cols;
            for r in rows {
                for c in 0..cols {
                    params[t.offset + r * cols + c] = rng.random_range(-bound..bound);
                }
            }
        };
        let mut trunk_rng = ChaCha8Rng::seed_from_u64(seed);
        fill(&mut params, &mut trunk_rng, layout.w0, 0..layout.w0.rows, config.state_dim);
        fill(&mut params, &mut trunk_rng, layout.b0, 0..1, config.state_dim);
        fill(&mut params, &mut trunk_rng, layout.w1, 0..layout.w1.rows, config.hidden[0]);
        fill(&mut params, &mut trunk_rng, layout.b1, 0..1, config.hidden[0]);

        let per_head = 2 * config.action_dim;
        for k in 0..config.heads {
            let mut head_rng = ChaCha8Rng::seed_from_u64(seed);
            head_rng.set_stream(k as u64 + 1);
            let rows = k * per_head..(k + 1) * per_head;
            fill(&mut params, &mut head_rng, layout.wh, rows.clone(), config.hidden[1]);
            let bound = 1.0 / (config.hidden[1] as f64).sqrt();
            for r in rows {
                params[layout.bh.offset + r] = head_rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: PolicyConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(PolicyError::DimensionMismatch {
                what: "parameter vector",
                expected: layout.total,
                got: params.len(),
            });
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    /// Trunk and head parameters.
    pub fn policy_range(&self) -> Range<usize> {
        0..self.layout.wl.offset
    }

    /// Lagrange-multiplier head parameters.
    pub fn lambda_range(&self) -> Range<usize> {
        self.layout.wl.offset..self.layout.wd.offset
    }

    /// Slack head parameters.
    pub fn delta_range(&self) -> Range<usize> {
        self.layout.wd.offset..self.layout.total
    }

    /// Zeroes the multiplier and slack heads.
    pub fn reset_constraint_heads(&mut self) {
        let range = self.layout.wl.offset..self.layout.total;
        self.params[range].iter_mut().for_each(|p| *p = 0.0);
    }

    /// Copies head `from` onto head `to`.
    pub fn copy_head(&mut self, from: usize, to: usize) {
        let per_head = 2 * self.config.action_dim;
        let (wh, bh) = (self.layout.wh, self.layout.bh);
        let row_len = wh.cols * per_head;
        let src = wh.offset + from * row_len;
        let dst = wh.offset + to * row_len;
        self.params.copy_within(src..src + row_len, dst);
        let src = bh.offset + from * per_head;
        let dst = bh.offset + to * per_head;
        self.params.copy_within(src..src + per_head, dst);
    }

    fn check_states(&self, states: &ArrayView2<'_, f64>) -> Result<()> {
        if states.ncols() != self.config.state_dim {
            return Err(PolicyError::DimensionMismatch {
                what: "state",
                expected: self.config.state_dim,
                got: states.ncols(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(PolicyError::EmptyBatch);
        }
        self.check_states(&batch.states.view())?;
        if batch.actions.ncols() != self.config.action_dim {
            return Err(PolicyError::DimensionMismatch {
                what: "action",
                expected: self.config.action_dim,
                got: batch.actions.ncols(),
            });
        }
        Ok(())
    }

    fn run(&self, states: ArrayView2<'_, f64>) -> Cache {
        let p = &self.params;
        let l = &self.layout;
        let x = states.to_owned();
        let h1 = dense(&x, mat(p, l.w0), vecv(p, l.b0)).mapv_into(f64::tanh);
        let h2 = dense(&h1, mat(p, l.w1), vecv(p, l.b1)).mapv_into(f64::tanh);
        let out = dense(&h2, mat(p, l.wh), vecv(p, l.bh));
        let lambda_raw = dense(&h2, mat(p, l.wl), vecv(p, l.bl));
        let delta_raw = dense(&h2, mat(p, l.wd), vecv(p, l.bd));
        Cache {
            x,
            h1,
            h2,
            out,
            lambda_raw,
            delta_raw,
        }
    }

    fn mean_at(&self, cache: &Cache, b: usize, k: usize, i: usize) -> f64 {
        cache.out[[b, k * 2 * self.config.action_dim + i]]
    }

    fn log_scale_raw(&self, cache: &Cache, b: usize, k: usize, i: usize) -> f64 {
        let a = self.config.action_dim;
        cache.out[[b, k * 2 * a + a + i]]
    }

    fn head_outputs(&self, cache: &Cache, b: usize) -> HeadOutputs {
        let (k, a) = (self.config.heads, self.config.action_dim);
        let means = Array2::from_shape_fn((k, a), |(k, i)| self.mean_at(cache, b, k, i));
        let scales = Array2::from_shape_fn((k, a), |(k, i)| {
            self.log_scale_raw(cache, b, k, i)
                .clamp(MIN_SCALE.ln(), MAX_SCALE.ln())
                .exp()
        });
        HeadOutputs { means, scales }
    }

    pub fn forward(&self, state: &[f64]) -> Result<HeadOutputs> {
        let view = ArrayView2::from_shape((1, state.len()), state).expect("row");
        self.check_states(&view)?;
        let cache = self.run(view);
        Ok(self.head_outputs(&cache, 0))
    }

    pub fn forward_batch(&self, states: ArrayView2<'_, f64>) -> Result<Vec<HeadOutputs>> {
        self.check_states(&states)?;
        let cache = self.run(states);
        Ok((0..states.nrows()).map(|b| self.head_outputs(&cache, b)).collect())
    }

    fn lambda_of(&self, raw: f64) -> f64 {
        if self.config.nonnegative_lambda {
            raw.max(0.0)
        } else {
            raw
        }
    }

    fn slack_of(&self, raw: f64) -> f64 {
        self.config.slack_width() / (1.0 + (-raw).exp())
    }

    /// Multiplier and transformed slack at a single state.
    pub fn constraint_heads(&self, state: &[f64]) -> Result<(Array1<f64>, Array1<f64>)> {
        let view = ArrayView2::from_shape((1, state.len()), state).expect("row");
        self.check_states(&view)?;
        let cache = self.run(view);
        let lambda = cache.lambda_raw.row(0).mapv(|r| self.lambda_of(r));
        let delta = cache.delta_raw.row(0).mapv(|r| self.slack_of(r));
        Ok((lambda, delta))
    }

    pub fn constraint_state(&self, batch: &Batch) -> Result<ConstraintState> {
        self.check_batch(batch)?;
        let cache = self.run(batch.states.view());
        Ok(self.constraint_from_cache(&cache, batch))
    }

    fn constraint_from_cache(&self, cache: &Cache, batch: &Batch) -> ConstraintState {
        let (n, a) = (batch.len(), self.config.action_dim);
        let lambda = cache.lambda_raw.mapv(|r| self.lambda_of(r));
        let delta = cache.delta_raw.mapv(|r| self.slack_of(r));
        let mut max_log_dev = Array2::zeros((n, a));
        for b in 0..n {
            let outputs = self.head_outputs(cache, b);
            let (dev, _) = max_log_deviation(
                batch.actions.row(b),
                outputs.means.view(),
                self.config.sigma_bar,
                self.config.epsilon,
            );
            max_log_dev.row_mut(b).assign(&dev);
        }
        let residual = (2.0 * self.config.epsilon).ln() + &delta - &max_log_dev;
        ConstraintState {
            lambda,
            delta,
            max_log_dev,
            residual,
        }
    }

    /// Behavioural-cloning loss: batch mean of the summed head negative log-likelihoods.
    pub fn bc_loss(&self, batch: &Batch) -> Result<LossGrad> {
        self.check_batch(batch)?;
        self.policy_loss(batch, None, "behavioural cloning")
    }

    /// Behavioural cloning plus the multiplier-weighted deviation term.
    /// `lambda` (`B x |A|`) is a constant of this loss.
    pub fn ctrl_loss(&self, batch: &Batch, lambda: &Array2<f64>) -> Result<LossGrad> {
        self.check_batch(batch)?;
        if lambda.dim() != batch.actions.dim() {
            return Err(PolicyError::DimensionMismatch {
                what: "multiplier",
                expected: batch.actions.len(),
                got: lambda.len(),
            });
        }
        self.policy_loss(batch, Some(lambda), "controlled")
    }

    fn policy_loss(
        &self,
        batch: &Batch,
        lambda: Option<&Array2<f64>>,
        which: &'static str,
    ) -> Result<LossGrad> {
        let cache = self.run(batch.states.view());
        let (n, k_heads, a) = (batch.len(), self.config.heads, self.config.action_dim);
        let inv_n = 1.0 / n as f64;
        let (ln_min, ln_max) = (MIN_SCALE.ln(), MAX_SCALE.ln());
        let half_ln_2pi = 0.5 * (2.0 * PI).ln();
        let (sigma_bar, eps) = (self.config.sigma_bar, self.config.epsilon);

        let mut loss = 0.0;
        let mut d_out = Array2::zeros(cache.out.dim());
        for b in 0..n {
            for k in 0..k_heads {
                for i in 0..a {
                    let mu = self.mean_at(&cache, b, k, i);
                    let raw = self.log_scale_raw(&cache, b, k, i);
                    let ls = raw.clamp(ln_min, ln_max);
                    let sigma = ls.exp();
                    let z = (batch.actions[[b, i]] - mu) / sigma;
                    loss += half_ln_2pi + ls + 0.5 * z * z;
                    d_out[[b, k * 2 * a + i]] += -z / sigma * inv_n;
                    if raw > ln_min && raw < ln_max {
                        d_out[[b, k * 2 * a + a + i]] += (1.0 - z * z) * inv_n;
                    }
                }
            }
            if let Some(lambda) = lambda {
                for i in 0..a {
                    let target = batch.actions[[b, i]];
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0;
                    for k in 0..k_heads {
                        let dev = (target - self.mean_at(&cache, b, k, i)).abs();
                        if dev > best {
                            best = dev;
                            arg = k;
                        }
                    }
                    let inner = best / sigma_bar + eps;
                    let l = lambda[[b, i]];
                    loss -= l * inner.ln();
                    let mu = self.mean_at(&cache, b, arg, i);
                    let sign = if mu == target {
                        0.0
                    } else {
                        (mu - target).signum()
                    };
                    d_out[[b, arg * 2 * a + i]] += -l * sign / (sigma_bar * inner) * inv_n;
                }
            }
        }
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(PolicyError::NonFiniteLoss {
                which,
                value: loss,
                batch: n,
            });
        }
        let grad = self.backprop_policy(&cache, &d_out);
        Ok(LossGrad { loss, grad })
    }

    fn backprop_policy(&self, cache: &Cache, d_out: &Array2<f64>) -> Vec<f64> {
        let p = &self.params;
        let l = &self.layout;
        let mut grad = vec![0.0; l.total];
        put_mat(&mut grad, l.wh, &d_out.t().dot(&cache.h2));
        put_vec(&mut grad, l.bh, &d_out.sum_axis(Axis(0)));
        let mut d_z2 = d_out.dot(&mat(p, l.wh));
        Zip::from(&mut d_z2)
            .and(&cache.h2)
            .for_each(|d, &h| *d *= 1.0 - h * h);
        put_mat(&mut grad, l.w1, &d_z2.t().dot(&cache.h1));
        put_vec(&mut grad, l.b1, &d_z2.sum_axis(Axis(0)));
        let mut d_z1 = d_z2.dot(&mat(p, l.w1));
        Zip::from(&mut d_z1)
            .and(&cache.h1)
            .for_each(|d, &h| *d *= 1.0 - h * h);
        put_mat(&mut grad, l.w0, &d_z1.t().dot(&cache.x));
        put_vec(&mut grad, l.b0, &d_z1.sum_axis(Axis(0)));
        grad
    }

    /// Multiplier loss: batch mean of `-lambda(s) . e`, with `e` constant.
    pub fn lambda_loss(&self, batch: &Batch, residual: &Array2<f64>) -> Result<LossGrad> {
        self.check_batch(batch)?;
        let cache = self.run(batch.states.view());
        let inv_n = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut d_raw = Array2::zeros(cache.lambda_raw.dim());
        Zip::from(&mut d_raw)
            .and(&cache.lambda_raw)
            .and(residual)
            .for_each(|d, &raw, &e| {
                loss -= self.lambda_of(raw) * e;
                let pass = if self.config.nonnegative_lambda && raw <= 0.0 {
                    0.0
                } else {
                    1.0
                };
                *d = -e * pass * inv_n;
            });
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(PolicyError::NonFiniteLoss {
                which: "multiplier",
                value: loss,
                batch: batch.len(),
            });
        }
        let mut grad = vec![0.0; self.layout.total];
        put_mat(&mut grad, self.layout.wl, &d_raw.t().dot(&cache.h2));
        put_vec(&mut grad, self.layout.bl, &d_raw.sum_axis(Axis(0)));
        Ok(LossGrad { loss, grad })
    }

    /// Slack loss on the raw (pre-transform) slack: outside the allowable
    /// error it follows `sign(e)`, inside it follows `lambda`. Both `e` and
    /// `lambda` are constants.
    pub fn delta_loss(
        &self,
        batch: &Batch,
        residual: &Array2<f64>,
        lambda: &Array2<f64>,
    ) -> Result<LossGrad> {
        self.check_batch(batch)?;
        let cache = self.run(batch.states.view());
        let inv_n = 1.0 / batch.len() as f64;
        let tolerance = self.config.allowable_error();
        let mut loss = 0.0;
        let mut d_raw = Array2::zeros(cache.delta_raw.dim());
        Zip::from(&mut d_raw)
            .and(&cache.delta_raw)
            .and(residual)
            .and(lambda)
            .for_each(|d, &raw, &e, &l| {
                let coef = if e.abs() > tolerance { e.signum() } else { l };
                loss += raw * coef;
                *d = coef * inv_n;
            });
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(PolicyError::NonFiniteLoss {
                which: "slack",
                value: loss,
                batch: batch.len(),
            });
        }
        let mut grad = vec![0.0; self.layout.total];
        put_mat(&mut grad, self.layout.wd, &d_raw.t().dot(&cache.h2));
        put_vec(&mut grad, self.layout.bd, &d_raw.sum_axis(Axis(0)));
        Ok(LossGrad { loss, grad })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> PolicyConfig {
        PolicyConfig {
            heads: 3,
            hidden: [5, 4],
            ..PolicyConfig::new(2, 2)
        }
    }

    #[test]
    fn layout_is_contiguous() {
        let p = EnsemblePolicy::new(tiny(), 0).unwrap();
        // 5*2+5 + 4*5+4 + 12*4+12 + 2*4+2 + 2*4+2
        assert_eq!(p.num_params(), 15 + 24 + 60 + 10 + 10);
        assert_eq!(p.policy_range().end, p.lambda_range().start);
        assert_eq!(p.lambda_range().end, p.delta_range().start);
        assert_eq!(p.delta_range().end, p.num_params());
        assert!(p.params()[p.lambda_range().start..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_heads_have_zero_spread() {
        let mut p = EnsemblePolicy::new(tiny(), 1).unwrap();
        for k in 1..3 {
            p.copy_head(0, k);
        }
        let out = p.forward(&[0.3, -0.2]).unwrap();
        assert!(out.ensemble_std().iter().all(|s| *s == 0.0));
    }

    #[test]
    fn fresh_heads_disagree() {
        let p = EnsemblePolicy::new(tiny(), 1).unwrap();
        let out = p.forward(&[0.3, -0.2]).unwrap();
        assert!(out.ensemble_std().iter().all(|s| *s > 0.0));
        assert!(out.scales.iter().all(|s| (MIN_SCALE..=MAX_SCALE).contains(s)));
    }

    #[test]
    fn forward_rejects_wrong_state() {
        let p = EnsemblePolicy::new(tiny(), 1).unwrap();
        assert!(matches!(
            p.forward(&[0.0; 3]),
            Err(PolicyError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn ensemble_statistics_match_head_outputs() {
        let p = EnsemblePolicy::new(tiny(), 4).unwrap();
        let out = p.forward(&[0.1, 0.9]).unwrap();
        let mean = out.ensemble_mean();
        let std = out.ensemble_std();
        for i in 0..2 {
            let col: Vec<f64> = (0..3).map(|k| out.means[[k, i]]).collect();
            let m = (col[0] + col[1] + col[2]) / 3.0;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0;
            assert!((mean[i] - m).abs() < 1e-15);
            assert!((std[i] - v.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_residual_nll() {
        // Force every head to output mean 0 and log-scale 0 by zeroing the head layer.
        let mut p = EnsemblePolicy::new(tiny(), 2).unwrap();
        let (wh, bh) = (p.layout.wh, p.layout.bh);
        p.params[wh.range()].iter_mut().for_each(|v| *v = 0.0);
        p.params[bh.range()].iter_mut().for_each(|v| *v = 0.0);
        let batch = Batch::new(array![[0.5, 0.5]], array![[0.0, 0.0]]).unwrap();
        let l = p.bc_loss(&batch).unwrap();
        let expected = 3.0 * 2.0 * 0.5 * (2.0 * PI).ln();
        assert!((l.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn residual_edges() {
        let eps = 1e-4;
        let expert = array![0.2, -0.4];
        let cands = array![[0.2, -0.4], [0.2, -0.4]];
        let e = constraint_residual(expert.view(), cands.view(), array![0.0, 0.0].view(), 0.1, eps);
        for v in e.iter() {
            assert!((v - 2f64.ln()).abs() < 1e-12);
        }
        let cands = array![[0.3, -0.4], [0.2, -0.3]];
        let e = constraint_residual(expert.view(), cands.view(), array![0.0, 0.0].view(), 0.1, eps);
        for v in e.iter() {
            assert!((v - ((2.0 * eps).ln() - (1.0 + eps).ln())).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_multiplier_reduces_to_bc() {
        let p = EnsemblePolicy::new(tiny(), 3).unwrap();
        let batch =
            Batch::new(array![[0.1, 0.2], [0.3, -0.5]], array![[0.1, 0.0], [-0.2, 0.4]]).unwrap();
        let bc = p.bc_loss(&batch).unwrap();
        let ctrl = p.ctrl_loss(&batch, &Array2::zeros((2, 2))).unwrap();
        assert_eq!(bc.loss, ctrl.loss);
        assert_eq!(bc.grad, ctrl.grad);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let empty = Batch::new(Array2::zeros((0, 2)), Array2::zeros((0, 2)));
        assert_eq!(empty, Err(PolicyError::EmptyBatch));
    }

    #[test]
    fn losses_touch_only_their_parameters() {
        let p = EnsemblePolicy::new(tiny(), 3).unwrap();
        let batch =
            Batch::new(array![[0.1, 0.2], [0.3, -0.5]], array![[0.1, 0.0], [-0.2, 0.4]]).unwrap();
        let cs = p.constraint_state(&batch).unwrap();
        let ctrl = p.ctrl_loss(&batch, &Array2::from_elem((2, 2), 0.5)).unwrap();
        assert!(ctrl.grad[p.lambda_range().start..].iter().all(|g| *g == 0.0));
        let lam = p.lambda_loss(&batch, &cs.residual).unwrap();
        let del = p.delta_loss(&batch, &cs.residual, &cs.lambda).unwrap();
        for (i, g) in lam.grad.iter().enumerate() {
            if !p.lambda_range().contains(&i) {
                assert_eq!(*g, 0.0);
            }
        }
        for (i, g) in del.grad.iter().enumerate() {
            if !p.delta_range().contains(&i) {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn slack_transform_stays_in_domain() {
        let p = EnsemblePolicy::new(tiny(), 0).unwrap();
        let w = p.config().slack_width();
        for raw in [-1e3, -5.0, 0.0, 5.0, 1e3] {
            let d = p.slack_of(raw);
            assert!((0.0..=w).contains(&d));
        }
        assert!((w - 8.517).abs() < 1e-3);
    }
}
