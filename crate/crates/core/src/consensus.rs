//! Weighted L_p-norm consensus over action candidates.
//!
//! Each action dimension is handled independently. The candidates (K agent
//! proposals and, during data collection, the expert action) are weighted,
//! their distribution shape is summarised by the ratio of mean absolute
//! deviation to standard deviation, that ratio selects the exponent `p`, and
//! the executed value is the minimiser of `sum_j w_j |x_j - c|^p` over the
//! candidate range.
//!
//! Three closed forms bound the family: `p -> 1` gives the weighted median,
//! `p = 2` the weighted mean and `p -> inf` the midrange. Everything in
//! between is solved with the ITP bracketing root finder on the first-order
//! stationarity condition.

use std::f64::consts::{LN_2, PI};

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack allowed on the weight normalisation and on the `[0, 1]` ratio domain.
const NORMALISATION_SLACK: f64 = 1e-9;

/// Distance from 2 under which the exponent is treated as exactly 2.
const MEAN_EXPONENT_SLACK: f64 = 1e-9;

/// Relative spread under which a candidate set is considered degenerate.
const DEGENERATE_SPREAD: f64 = 1e-9;

/// Floor of the expert-disagreement scale, as a fraction of the uncertainty threshold.
pub const SCALE_FLOOR_RATIO: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsensusError {
    #[error("candidate set is empty")]
    Empty,
    #[error("got {values} candidate values but {weights} weights")]
    LengthMismatch { values: usize, weights: usize },
    #[error("candidate value {index} is not finite")]
    NonFiniteValue { index: usize },
    #[error("weight {index} is negative or not finite: {value}")]
    InvalidWeight { index: usize, value: f64 },
    #[error("weights sum to {0}, expected 1")]
    Unnormalized(f64),
    #[error("shape ratio {0} is outside [0, 1]")]
    RatioDomain(f64),
    #[error("invalid bracket [{lo}, {hi}]")]
    InvalidInterval { lo: f64, hi: f64 },
    #[error("root is not bracketed: g({lo}) = {g_lo}, g({hi}) = {g_hi}")]
    NotBracketed { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },
    #[error("function value at {0} is NaN")]
    NanResidual(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid consensus configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ConsensusError>;

/// Weighted candidates for a single action dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    values: Vec<f64>,
    weights: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl CandidateSet {
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(ConsensusError::Empty);
        }
        if values.len() != weights.len() {
            return Err(ConsensusError::LengthMismatch {
                values: values.len(),
                weights: weights.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(ConsensusError::NonFiniteValue { index });
        }
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(ConsensusError::InvalidWeight { index, value });
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > NORMALISATION_SLACK {
            return Err(ConsensusError::Unnormalized(total));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            values,
            weights,
            lo,
            hi,
        })
    }

    /// Equal weights over all values.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        let w = 1.0 / values.len().max(1) as f64;
        let weights = vec![w; values.len()];
        Self::new(values, weights)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    fn spread(&self) -> f64 {
        self.hi - self.lo
    }

    fn weighted(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Location and shape summary of a weighted candidate set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeStats {
    pub mu: f64,
    pub sigma_std: f64,
    pub sigma_mae: f64,
    pub rho: f64,
    /// Set when the spread is too small for the ratio to be meaningful; `rho`
    /// then carries the Gaussian reference value.
    pub degenerate: bool,
}

/// Solver settings for the consensus problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    /// Exponent cap; at or above it the midrange is returned.
    pub p_max: f64,
    /// Exponents in `[1, 1 + p_median_tol]` use the weighted median.
    pub p_median_tol: f64,
    pub itp_max_iters: usize,
    /// Root tolerance, in units of the candidate range.
    pub itp_eps: f64,
    /// Truncation gain; divided by the bracket width before use.
    pub kappa1: f64,
    pub kappa2: f64,
    pub n0: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            p_max: 100.0,
            p_median_tol: 0.05,
            itp_max_iters: 16,
            itp_eps: 1e-10,
            kappa1: 0.2,
            kappa2: 2.0,
            n0: 1,
        }
    }
}

impl ConsensusConfig {
    /// Half the iteration budget, for control loops driven by a human.
    pub fn real_time() -> Self {
        Self {
            itp_max_iters: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        let fail = |msg: &str| Err(ConsensusError::Config(msg.to_string()));
        if !(self.p_max > 2.0) {
            return fail("p_max must exceed 2");
        }
        if !(self.p_median_tol >= 0.0) {
            return fail("p_median_tol must be nonnegative");
        }
        if self.itp_max_iters == 0 {
            return fail("itp_max_iters must be at least 1");
        }
        if !(self.itp_eps > 0.0) {
            return fail("itp_eps must be positive");
        }
        if !(self.kappa1 > 0.0) {
            return fail("kappa1 must be positive");
        }
        if !(self.kappa2 >= 1.0 && self.kappa2 < 1.0 + golden) {
            return fail("kappa2 must lie in [1, 1 + golden ratio)");
        }
        Ok(())
    }
}

/// Mean absolute deviation over standard deviation for a Gaussian sample.
pub fn gaussian_ratio() -> f64 {
    (2.0 / PI).sqrt()
}

/// Exponent that maps the Gaussian ratio to one half: `ln 2 / ln sqrt(pi / 2)`.
fn ratio_power() -> f64 {
    LN_2 / (0.5 * (PI / 2.0).ln())
}

pub fn compute_shape_stats(cands: &CandidateSet) -> ShapeStats {
    let mu: f64 = cands.weighted().map(|(x, w)| w * x).sum();
    let var: f64 = cands.weighted().map(|(x, w)| w * (x - mu).powi(2)).sum();
    let sigma_std = var.sqrt();
    let sigma_mae: f64 = cands.weighted().map(|(x, w)| w * (x - mu).abs()).sum();
    let degenerate = sigma_std < DEGENERATE_SPREAD * (cands.spread() + 1e-12);
    let rho = if degenerate {
        gaussian_ratio()
    } else {
        (sigma_mae / sigma_std).clamp(0.0, 1.0)
    };
    ShapeStats {
        mu,
        sigma_std,
        sigma_mae,
        rho,
        degenerate,
    }
}

pub fn rho_to_q(rho: f64) -> Result<f64> {
    if !(-NORMALISATION_SLACK..=1.0 + NORMALISATION_SLACK).contains(&rho) {
        return Err(ConsensusError::RatioDomain(rho));
    }
    Ok(2.0 * rho.clamp(0.0, 1.0).powf(ratio_power()) - 1.0)
}

/// The exponent implied by `rho` before clamping; infinite at `rho = 1`.
pub fn rho_to_p_unclamped(rho: f64) -> f64 {
    1.0 / (1.0 - rho.clamp(0.0, 1.0).powf(ratio_power()))
}

pub fn rho_to_p(rho: f64, cfg: &ConsensusConfig) -> f64 {
    let p = rho_to_p_unclamped(rho);
    if p.is_nan() || p >= cfg.p_max {
        cfg.p_max
    } else {
        p.max(1.0)
    }
}

/// Finds the root of a monotone `g` bracketed by `[lo, hi]` with the
/// Interpolate-Truncate-Project method.
///
/// The iteration budget caps the effective tolerance: when `itp_max_iters`
/// is too small for `itp_eps`, the tolerance is widened to what the
/// minmax guarantee delivers within the budget, i.e. `(hi - lo) / 2^(max_iters - n0 + 1)`.
/// `kappa1` is interpreted relative to the initial bracket width.
pub fn itp_root<F>(mut g: F, lo: f64, hi: f64, cfg: &ConsensusConfig) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(ConsensusError::InvalidInterval { lo, hi });
    }
    let (g_lo, g_hi) = (g(lo), g(hi));
    if g_lo.is_nan() {
        return Err(ConsensusError::NanResidual(lo));
    }
    if g_hi.is_nan() {
        return Err(ConsensusError::NanResidual(hi));
    }
    if (g_lo > 0.0 && g_hi > 0.0) || (g_lo < 0.0 && g_hi < 0.0) {
        return Err(ConsensusError::NotBracketed { lo, hi, g_lo, g_hi });
    }
    if g_lo == 0.0 {
        return Ok(lo);
    }
    if g_hi == 0.0 {
        return Ok(hi);
    }
    // Orient so that the residual increases across the bracket.
    let orient = if g_lo < 0.0 { 1.0 } else { -1.0 };
    let (mut a, mut b) = (lo, hi);
    let (mut ya, mut yb) = (orient * g_lo, orient * g_hi);

    let width = hi - lo;
    let kappa1 = cfg.kappa1 / width;
    let budget = cfg.itp_max_iters.saturating_sub(cfg.n0);
    let eps = cfg.itp_eps.max(width / 2f64.powi(budget as i32 + 1));
    let n_half = (width / (2.0 * eps)).log2().ceil().max(0.0) as i32;
    let n_max = n_half + cfg.n0 as i32;

    let mut j = 0;
    while b - a > 2.0 * eps && j < cfg.itp_max_iters {
        let mid = 0.5 * (a + b);
        let radius = eps * 2f64.powi(n_max - j as i32) - 0.5 * (b - a);
        let delta = kappa1 * (b - a).powf(cfg.kappa2);

        // Interpolate.
        let x_f = (yb * a - ya * b) / (yb - ya);
        // Truncate.
        let sigma = (mid - x_f).signum();
        let x_t = if delta <= (mid - x_f).abs() {
            x_f + sigma * delta
        } else {
            mid
        };
        // Project.
        let x_itp = if (x_t - mid).abs() <= radius {
            x_t
        } else {
            mid - sigma * radius
        };

        let y_itp = orient * g(x_itp);
        if y_itp.is_nan() {
            return Err(ConsensusError::NanResidual(x_itp));
        }
        if y_itp > 0.0 {
            b = x_itp;
            yb = y_itp;
        } else if y_itp < 0.0 {
            a = x_itp;
            ya = y_itp;
        } else {
            return Ok(x_itp);
        }
        j += 1;
    }
    Ok(0.5 * (a + b))
}

pub fn weighted_mean(cands: &CandidateSet) -> f64 {
    cands.weighted().map(|(x, w)| w * x).sum()
}

/// Lower weighted median; when the cumulative weight lands exactly on one
/// half, the midpoint of the flat optimum is returned.
pub fn weighted_median(cands: &CandidateSet) -> f64 {
    let mut order: Vec<(f64, f64)> = cands.weighted().filter(|(_, w)| *w > 0.0).collect();
    if order.is_empty() {
        return 0.5 * (cands.lo + cands.hi);
    }
    order.sort_by(|l, r| l.0.total_cmp(&r.0));
    let half = 0.5 * order.iter().map(|(_, w)| w).sum::<f64>();
    let mut cum = 0.0;
    for (idx, &(x, w)) in order.iter().enumerate() {
        cum += w;
        if (cum - half).abs() <= 1e-12 {
            return match order.get(idx + 1) {
                Some(&(next, _)) => 0.5 * (x + next),
                None => x,
            };
        }
        if cum > half {
            return x;
        }
    }
    order[order.len() - 1].0
}

/// Midpoint of the extreme candidates that carry weight.
pub fn midrange(cands: &CandidateSet) -> f64 {
    let (lo, hi) = cands
        .weighted()
        .filter(|(_, w)| *w > 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| {
            (lo.min(x), hi.max(x))
        });
    if lo.is_finite() {
        0.5 * (lo + hi)
    } else {
        0.5 * (cands.lo + cands.hi)
    }
}

/// Minimiser of the weighted L_p deviation of `c` from the candidates over
/// `[lo, hi]`.
pub fn solve_lp_center(cands: &CandidateSet, p: f64, cfg: &ConsensusConfig) -> Result<f64> {
    let spread = cands.spread();
    if spread <= 0.0 {
        return Ok(cands.lo);
    }
    let p = p.max(1.0);
    let center = if p <= 1.0 + cfg.p_median_tol {
        weighted_median(cands)
    } else if (p - 2.0).abs() <= MEAN_EXPONENT_SLACK {
        weighted_mean(cands)
    } else if p >= cfg.p_max {
        midrange(cands)
    } else {
        // Work on [0, 1] so that large exponents cannot overflow; the root is
        // unchanged by the affine rescaling.
        let scaled: Vec<(f64, f64)> = cands
            .weighted()
            .map(|(x, w)| ((x - cands.lo) / spread, w))
            .collect();
        let power = p - 1.0;
        let residual = |u: f64| -> f64 {
            scaled
                .iter()
                .map(|&(d, w)| {
                    let r = u - d;
                    w * r.abs().powf(power) * r.signum()
                })
                .sum()
        };
        let u = itp_root(residual, 0.0, 1.0, cfg)?;
        cands.lo + u * spread
    };
    Ok(center.clamp(cands.lo, cands.hi))
}

/// Expert-side inputs to the weight of the expert candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertTerms {
    /// Expert action in this dimension.
    pub action: f64,
    /// Mean of the agent candidates.
    pub agent_mean: f64,
    /// Mean squared difference between the expert action and the agent candidates.
    pub mse: f64,
    /// Ensemble-uncertainty threshold.
    pub sigma_bar: f64,
}

impl ExpertTerms {
    pub fn from_candidates(action: f64, agents: &[f64], sigma_bar: f64) -> Self {
        let k = agents.len().max(1) as f64;
        let agent_mean = agents.iter().sum::<f64>() / k;
        let mse = agents.iter().map(|x| (action - x).powi(2)).sum::<f64>() / k;
        Self {
            action,
            agent_mean,
            mse,
            sigma_bar,
        }
    }

    /// Log of the unnormalised expert weight: the peak density of a normal
    /// with scale `sigma_bar / 3` over the density of the expert action under
    /// the agents' disagreement normal.
    pub fn log_weight(&self) -> f64 {
        let peak = gaussian_log_density(self.action, self.action, self.sigma_bar / 3.0);
        let scale = self.mse.sqrt().max(SCALE_FLOOR_RATIO * self.sigma_bar);
        peak - gaussian_log_density(self.action, self.agent_mean, scale)
    }
}

pub fn gaussian_log_density(x: f64, mean: f64, scale: f64) -> f64 {
    let z = (x - mean) / scale;
    -0.5 * (2.0 * PI).ln() - scale.ln() - 0.5 * z * z
}

/// Normalised candidate weights for one dimension.
///
/// Agent confidences are supplied as log-densities so that strongly
/// disagreeing experts do not overflow. The expert weight, when present, is
/// appended last. If every agent density underflows and no expert is
/// present the weights fall back to uniform.
pub fn compute_weights(agent_log_likelihoods: &[f64], expert: Option<&ExpertTerms>) -> Vec<f64> {
    let mut logs: Vec<f64> = agent_log_likelihoods
        .iter()
        .map(|l| if l.is_nan() { f64::NEG_INFINITY } else { *l })
        .collect();
    if let Some(terms) = expert {
        logs.push(terms.log_weight());
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        if top == f64::INFINITY {
            let hits = logs.iter().filter(|l| **l == f64::INFINITY).count() as f64;
            return logs
                .iter()
                .map(|l| if *l == f64::INFINITY { 1.0 / hits } else { 0.0 })
                .collect();
        }
        let n = logs.len().max(1) as f64;
        return vec![1.0 / n; logs.len()];
    }
    let unnorm: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|w| w / total).collect()
}

/// Expert side of a consensus call.
#[derive(Debug, Clone, Copy)]
pub struct ExpertInput<'a> {
    pub action: &'a [f64],
    pub sigma_bar: f64,
}

/// Per-dimension outcome of a consensus call.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub action: Vec<f64>,
    /// Normalised expert weight per dimension, when the expert took part.
    pub expert_weight: Option<Vec<f64>>,
    pub exponent: Vec<f64>,
}

/// Executed action from K agent candidates (rows of `candidates`) and an
/// optional expert action.
pub fn consensus_action(
    candidates: ArrayView2<'_, f64>,
    log_likelihoods: ArrayView2<'_, f64>,
    expert: Option<ExpertInput<'_>>,
    cfg: &ConsensusConfig,
) -> Result<Consensus> {
    let (heads, dim) = candidates.dim();
    if heads == 0 {
        return Err(ConsensusError::Empty);
    }
    if log_likelihoods.dim() != (heads, dim) {
        return Err(ConsensusError::DimensionMismatch {
            expected: heads * dim,
            got: log_likelihoods.len(),
        });
    }
    if let Some(e) = &expert {
        if e.action.len() != dim {
            return Err(ConsensusError::DimensionMismatch {
                expected: dim,
                got: e.action.len(),
            });
        }
    }

    let mut action = Vec::with_capacity(dim);
    let mut exponent = Vec::with_capacity(dim);
    let mut expert_weight = expert.map(|_| Vec::with_capacity(dim));
    for i in 0..dim {
        let column: ArrayView1<'_, f64> = candidates.column(i);
        let mut values: Vec<f64> = column.to_vec();
        let lls = log_likelihoods.column(i).to_vec();
        let terms = expert.map(|e| ExpertTerms::from_candidates(e.action[i], &values, e.sigma_bar));
        let weights = compute_weights(&lls, terms.as_ref());
        if let (Some(t), Some(ew)) = (&terms, expert_weight.as_mut()) {
            values.push(t.action);
            ew.push(weights[heads]);
        }
        let set = CandidateSet::new(values, weights)?;
        let stats = compute_shape_stats(&set);
        let p = rho_to_p(stats.rho, cfg);
        action.push(solve_lp_center(&set, p, cfg)?);
        exponent.push(p);
    }
    Ok(Consensus {
        action,
        expert_weight,
        exponent,
    })
}

/// Per-dimension mean and standard deviation of the K candidate rows.
pub fn ensemble_statistics(candidates: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let k = candidates.nrows().max(1) as f64;
    let mean = candidates.sum_axis(ndarray::Axis(0)) / k;
    let mut var: Array1<f64> = Array1::zeros(candidates.ncols());
    for row in candidates.rows() {
        var.zip_mut_with(&(&row - &mean), |v: &mut f64, d: &f64| *v += d * d);
    }
    (mean, var.mapv(|v| (v / k).sqrt()))
}
