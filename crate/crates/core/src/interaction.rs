//! The data-collection loop and its arbitration strategies.
//!
//! Every step the expert labels the visited state, the ensemble proposes
//! candidates, an arbitration rule picks the executed action, and the
//! (state, expert action) pair is appended to the dataset. After each
//! episode the dataset is replayed once.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{consensus_action, ConsensusConfig, ConsensusError, ExpertInput};
use crate::envs::{apply_disturbance, DisturbanceSpec, EnvError, Environment, Task};
use crate::exploration::{perturb_candidates, NoiseError, RedNoise};
use crate::optim::Adam;
use crate::policy::{EnsemblePolicy, HeadOutputs, PolicyConfig, PolicyError};
use crate::training::{train_epoch, Dataset, EpochSummary, TrainingMode};
use crate::ActionVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InteractionError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("unknown condition {0:?} (expected EV1, EV2, C1, C2, C3 or Expert)")]
    UnknownCondition(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, InteractionError>;

/// Named experimental conditions. `Expert` is a control that always executes
/// the expert action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditionName {
    EV1,
    EV2,
    C1,
    C2,
    C3,
    Expert,
}

impl ConditionName {
    pub const ALL: [ConditionName; 6] = [
        ConditionName::EV1,
        ConditionName::EV2,
        ConditionName::C1,
        ConditionName::C2,
        ConditionName::C3,
        ConditionName::Expert,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionName::EV1 => "EV1",
            ConditionName::EV2 => "EV2",
            ConditionName::C1 => "C1",
            ConditionName::C2 => "C2",
            ConditionName::C3 => "C3",
            ConditionName::Expert => "Expert",
        }
    }
}

impl fmt::Display for ConditionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionName {
    type Err = InteractionError;

    fn from_str(s: &str) -> Result<Self> {
        ConditionName::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| InteractionError::UnknownCondition(s.to_string()))
    }
}

/// How the switching rule compares deviations with its thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyCheck {
    /// Every dimension must be within both thresholds.
    #[default]
    Elementwise,
    /// Euclidean norms of the deviation and of the spread are compared.
    Norm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub name: ConditionName,
    /// Switching threshold on the expert-agent deviation.
    pub delta_bar: f64,
    /// Threshold on the ensemble spread; also scales the constraint.
    pub sigma_bar: f64,
    pub use_ctrl_loss: bool,
    pub use_consensus: bool,
    /// Red-noise time constant in seconds; 0 disables the noise.
    pub noise_t: f64,
    #[serde(default)]
    pub safety: SafetyCheck,
}

/// Red-noise time constant used by the noisy condition.
pub const DEFAULT_NOISE_T: f64 = 3.0;

impl ConditionConfig {
    pub fn preset(name: ConditionName) -> Self {
        let base = Self {
            name,
            delta_bar: 0.1,
            sigma_bar: 0.1,
            use_ctrl_loss: false,
            use_consensus: false,
            noise_t: 0.0,
            safety: SafetyCheck::Elementwise,
        };
        match name {
            ConditionName::EV1 => Self {
                delta_bar: 1.0,
                ..base
            },
            ConditionName::EV2 | ConditionName::Expert => base,
            ConditionName::C1 => Self {
                use_ctrl_loss: true,
                ..base
            },
            ConditionName::C2 => Self {
                use_ctrl_loss: true,
                use_consensus: true,
                ..base
            },
            ConditionName::C3 => Self {
                use_ctrl_loss: true,
                use_consensus: true,
                noise_t: DEFAULT_NOISE_T,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.delta_bar) || !positive(self.sigma_bar) {
            return Err(InteractionError::Config(format!(
                "thresholds must be positive (delta_bar {}, sigma_bar {})",
                self.delta_bar, self.sigma_bar
            )));
        }
        if !(self.noise_t >= 0.0 && self.noise_t.is_finite()) {
            return Err(InteractionError::Config(format!(
                "noise_t must be nonnegative, got {}",
                self.noise_t
            )));
        }
        if self.noise_t > 0.0 && !self.use_consensus {
            return Err(InteractionError::Config(
                "red noise perturbs consensus candidates and needs use_consensus".into(),
            ));
        }
        Ok(())
    }

    pub fn training_mode(&self) -> TrainingMode {
        if self.use_ctrl_loss {
            TrainingMode::Controlled
        } else {
            TrainingMode::Cloning
        }
    }

    /// Inference used when the frozen policy acts alone.
    pub fn inference_mode(&self) -> InferenceMode {
        if self.use_consensus {
            InferenceMode::Consensus
        } else {
            InferenceMode::EnsembleMean
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    EnsembleMean,
    Consensus,
}

/// `true` when the agent is trusted to act alone.
pub fn inside_safety_set(
    expert: ArrayView1<'_, f64>,
    mean: ArrayView1<'_, f64>,
    std: ArrayView1<'_, f64>,
    delta_bar: f64,
    sigma_bar: f64,
    check: SafetyCheck,
) -> bool {
    match check {
        SafetyCheck::Elementwise => expert
            .iter()
            .zip(mean.iter())
            .zip(std.iter())
            .all(|((a, m), s)| (a - m).abs() <= delta_bar && *s <= sigma_bar),
        SafetyCheck::Norm => {
            let dev = expert
                .iter()
                .zip(mean.iter())
                .map(|(a, m)| (a - m).powi(2))
                .sum::<f64>()
                .sqrt();
            let spread = std.iter().map(|s| s * s).sum::<f64>().sqrt();
            dev <= delta_bar && spread <= sigma_bar
        }
    }
}

/// Outcome of one arbitration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arbitration {
    pub executed: ActionVector,
    pub ensemble_mean: ActionVector,
    pub ensemble_std: ActionVector,
    /// Normalised expert weight per dimension under consensus.
    pub expert_weight: Option<Vec<f64>>,
    /// Whether the switching rule handed control to the agent.
    pub agent_in_control: bool,
}

/// Holds the per-run arbitration state: condition, solver settings and the
/// red-noise memory.
#[derive(Debug, Clone)]
pub struct Arbiter {
    condition: ConditionConfig,
    consensus: ConsensusConfig,
    noise: Option<RedNoise>,
}

impl Arbiter {
    pub fn new(
        condition: ConditionConfig,
        consensus: ConsensusConfig,
        heads: usize,
        action_dim: usize,
        dt: f64,
        seed: u64,
    ) -> Result<Self> {
        condition.validate()?;
        consensus.validate()?;
        let noise = if condition.noise_t > 0.0 {
            Some(RedNoise::new(heads, action_dim, dt, condition.noise_t, seed)?)
        } else {
            None
        };
        Ok(Self {
            condition,
            consensus,
            noise,
        })
    }

    pub fn condition(&self) -> &ConditionConfig {
        &self.condition
    }

    pub fn consensus_config(&self) -> &ConsensusConfig {
        &self.consensus
    }

    pub fn noise(&self) -> Option<&RedNoise> {
        self.noise.as_ref()
    }

    /// Picks the executed action from the head outputs and the expert action.
    pub fn arbitrate(&mut self, outputs: &HeadOutputs, expert: &[f64]) -> Result<Arbitration> {
        let (mean, std) = (outputs.ensemble_mean(), outputs.ensemble_std());
        let c = self.condition;
        let mut out = Arbitration {
            executed: expert.to_vec(),
            ensemble_mean: mean.to_vec(),
            ensemble_std: std.to_vec(),
            expert_weight: None,
            agent_in_control: false,
        };
        if c.name == ConditionName::Expert {
            return Ok(out);
        }
        if !c.use_consensus {
            let trusted = inside_safety_set(
                ArrayView1::from(expert),
                mean.view(),
                std.view(),
                c.delta_bar,
                c.sigma_bar,
                c.safety,
            );
            if trusted {
                out.executed = mean.to_vec();
                out.agent_in_control = true;
            }
            return Ok(out);
        }
        let (candidates, log_likelihoods) = match self.noise.as_mut() {
            Some(noise) => {
                let perturbed =
                    perturb_candidates(outputs.means.view(), outputs.scales.view(), noise.step())?;
                let lls = outputs.log_density(perturbed.view());
                (perturbed, lls)
            }
            None => (outputs.means.clone(), outputs.log_density(outputs.means.view())),
        };
        let result = consensus_action(
            candidates.view(),
            log_likelihoods.view(),
            Some(ExpertInput {
                action: expert,
                sigma_bar: c.sigma_bar,
            }),
            &self.consensus,
        )?;
        out.executed = result.action;
        out.expert_weight = result.expert_weight;
        Ok(out)
    }
}

/// Executed action of the frozen policy acting alone.
pub fn agent_action(
    outputs: &HeadOutputs,
    mode: InferenceMode,
    consensus: &ConsensusConfig,
) -> Result<ActionVector> {
    match mode {
        InferenceMode::EnsembleMean => Ok(outputs.ensemble_mean().to_vec()),
        InferenceMode::Consensus => {
            let lls = outputs.log_density(outputs.means.view());
            Ok(consensus_action(outputs.means.view(), lls.view(), None, consensus)?.action)
        }
    }
}

/// `mean_i |a_i - b_i|`.
pub fn action_diff(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: Vec<f64>,
    pub expert_action: ActionVector,
    pub executed_action: ActionVector,
    pub reward: f64,
    pub diff: f64,
    pub expert_weight: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    pub score: f64,
    pub terminated: bool,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mean_diff(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.diff))
    }
}

/// An episode that stopped on an error, with the steps recorded so far.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("episode aborted after {} steps: {error}", record.len())]
pub struct EpisodeAbort {
    pub record: EpisodeRecord,
    pub error: InteractionError,
}

/// Applies one arbitrated step: queries the policy, arbitrates against
/// `expert`, stores `(state, expert)` and advances `env`.
pub fn interact(
    env: &mut dyn Environment,
    policy: &EnsemblePolicy,
    arbiter: &mut Arbiter,
    dataset: &mut Dataset,
    expert: &[f64],
) -> Result<(StepRecord, bool)> {
    let state = env.state().to_vec();
    let outputs = policy.forward(&state)?;
    let arb = arbiter.arbitrate(&outputs, expert)?;
    dataset.push(&state, expert);
    let transition = env.step(&arb.executed)?;
    let diff = action_diff(expert, &arb.executed);
    let record = StepRecord {
        step: 0,
        state,
        expert_action: expert.to_vec(),
        executed_action: arb.executed,
        reward: transition.reward,
        diff,
        expert_weight: arb.expert_weight,
    };
    Ok((record, transition.terminated || transition.truncated))
}

/// Runs one collection episode from `env.reset(episode_seed)` with the
/// environment's scripted expert.
pub fn run_episode(
    env: &mut dyn Environment,
    episode_seed: u64,
    policy: &EnsemblePolicy,
    arbiter: &mut Arbiter,
    dataset: &mut Dataset,
    on_step: &mut dyn FnMut(&StepRecord),
) -> std::result::Result<EpisodeRecord, EpisodeAbort> {
    env.reset(episode_seed);
    let mut record = EpisodeRecord::default();
    for step in 0..env.spec().horizon {
        let expert = env.expert(env.state());
        match interact(env, policy, arbiter, dataset, &expert) {
            Ok((mut s, done)) => {
                s.step = step;
                record.score += s.reward;
                on_step(&s);
                record.steps.push(s);
                if done {
                    record.terminated = step + 1 < env.spec().horizon;
                    break;
                }
            }
            Err(error) => return Err(EpisodeAbort { record, error }),
        }
    }
    Ok(record)
}

/// Policy and optimiser settings shared by all conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySettings {
    pub heads: usize,
    pub hidden: [usize; 2],
    pub learning_rate: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub nonnegative_lambda: bool,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            heads: 10,
            hidden: [100, 100],
            learning_rate: 1e-3,
            epsilon: 1e-4,
            batch_size: 50,
            nonnegative_lambda: false,
        }
    }
}

impl PolicySettings {
    pub fn policy_config(&self, task: Task, sigma_bar: f64) -> PolicyConfig {
        let spec = task.spec();
        PolicyConfig {
            heads: self.heads,
            hidden: self.hidden,
            epsilon: self.epsilon,
            sigma_bar,
            nonnegative_lambda: self.nonnegative_lambda,
            ..PolicyConfig::new(spec.state_dim, spec.action_dim)
        }
    }
}

/// Everything that determines a single (task, condition, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task: Task,
    pub condition: ConditionConfig,
    pub seed: u64,
    pub episodes: usize,
    pub policy: PolicySettings,
    pub consensus: ConsensusConfig,
    pub disturbance: DisturbanceSpec,
    pub eval_rollouts: usize,
}

impl RunSpec {
    pub fn new(task: Task, condition: ConditionName, seed: u64, episodes: usize) -> Self {
        Self {
            task,
            condition: ConditionConfig::preset(condition),
            seed,
            episodes,
            policy: PolicySettings::default(),
            consensus: ConsensusConfig::default(),
            disturbance: task.disturbance(),
            eval_rollouts: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.condition.validate()?;
        self.consensus.validate()?;
        self.policy_config().validate()?;
        self.disturbance.validate()?;
        if self.policy.learning_rate <= 0.0 || self.policy.batch_size == 0 {
            return Err(InteractionError::Config(
                "learning_rate and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn policy_config(&self) -> PolicyConfig {
        self.policy.policy_config(self.task, self.condition.sigma_bar)
    }
}

/// Independent seeds for each random component of a run. Episode initial
/// states and evaluation seeds depend only on the run seed, so every
/// condition sees the same episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSeeds {
    pub policy: u64,
    pub noise: u64,
    pub shuffle: u64,
    pub episodes: u64,
    pub evaluation: u64,
}

impl RunSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            policy: rng.random(),
            noise: rng.random(),
            shuffle: rng.random(),
            episodes: rng.random(),
            evaluation: rng.random(),
        }
    }

    pub fn episode(&self, n: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.episodes);
        rng.set_stream(n as u64);
        rng.random()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub score: f64,
    pub normalized_score: f64,
    pub mean_diff: f64,
    pub length: usize,
    pub dataset_size: usize,
    pub training: Option<EpochSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub task: Task,
    pub condition: ConditionName,
    pub seed: u64,
    pub retention: f64,
    pub robustness: f64,
    pub normalized_retention: f64,
    pub normalized_robustness: f64,
    pub mean_diff: f64,
    pub episodes: Vec<EpisodeSummary>,
}

/// Hooks for logging and checkpointing during a run.
pub trait RunObserver {
    fn on_step(&mut self, _episode: usize, _step: &StepRecord) {}
    fn on_episode(
        &mut self,
        _summary: &EpisodeSummary,
        _policy: &EnsemblePolicy,
        _optimizer: &Adam,
    ) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Quiet;

impl RunObserver for Quiet {}

pub struct RunOutcome {
    pub result: RunResult,
    pub policy: EnsemblePolicy,
    pub optimizer: Adam,
    pub dataset: Dataset,
}

/// Alternates collection episodes and training passes, then measures the
/// frozen policy under disturbance.
pub fn run_experiment(spec: &RunSpec, observer: &mut dyn RunObserver) -> Result<RunOutcome> {
    spec.validate()?;
    let seeds = RunSeeds::derive(spec.seed);
    let env_spec = spec.task.spec();
    let pcfg = spec.policy_config();
    let heads = pcfg.heads;
    let mut policy = EnsemblePolicy::new(pcfg, seeds.policy)?;
    let mut optimizer = Adam::new(policy.num_params(), spec.policy.learning_rate);
    let mut arbiter = Arbiter::new(
        spec.condition,
        spec.consensus,
        heads,
        env_spec.action_dim,
        env_spec.dt,
        seeds.noise,
    )?;
    let mut shuffle = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut dataset = Dataset::new(env_spec.state_dim, env_spec.action_dim);
    let mut env = spec.task.make();
    let reference = spec.task.reference();
    let mut episodes = Vec::with_capacity(spec.episodes);

    for n in 0..spec.episodes {
        let record = run_episode(
            env.as_mut(),
            seeds.episode(n),
            &policy,
            &mut arbiter,
            &mut dataset,
            &mut |s| observer.on_step(n, s),
        )
        .map_err(|abort| {
            log::error!("{} {} seed {}: {abort}", spec.task, spec.condition.name, spec.seed);
            abort.error
        })?;
        let training = train_epoch(
            &mut policy,
            &mut optimizer,
            &dataset,
            spec.policy.batch_size,
            spec.condition.training_mode(),
            &mut shuffle,
        )?;
        let summary = EpisodeSummary {
            episode: n,
            score: record.score,
            normalized_score: reference.normalize(record.score),
            mean_diff: record.mean_diff(),
            length: record.len(),
            dataset_size: dataset.len(),
            training,
        };
        log::debug!(
            "{} {} seed {} episode {n}: score {:.3} diff {:.4}",
            spec.task,
            spec.condition.name,
            spec.seed,
            summary.score,
            summary.mean_diff
        );
        observer.on_episode(&summary, &policy, &optimizer)?;
        episodes.push(summary);
    }

    let robustness = evaluate_policy(
        &policy,
        spec.task,
        &spec.disturbance,
        spec.eval_rollouts,
        spec.condition.inference_mode(),
        &spec.consensus,
        seeds.evaluation,
    )?
    .mean;
    let retention = mean(episodes.iter().map(|e| e.score));
    let result = RunResult {
        task: spec.task,
        condition: spec.condition.name,
        seed: spec.seed,
        retention,
        robustness,
        normalized_retention: reference.normalize(retention),
        normalized_robustness: reference.normalize(robustness),
        mean_diff: mean(episodes.iter().map(|e| e.mean_diff)),
        episodes,
    };
    Ok(RunOutcome {
        result,
        policy,
        optimizer,
        dataset,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl Evaluation {
    fn from_scores(scores: Vec<f64>) -> Self {
        let m = mean(scores.iter().copied());
        let var = mean(scores.iter().map(|s| (s - m).powi(2)));
        Self {
            scores,
            mean: m,
            std: var.sqrt(),
        }
    }
}

/// Mean score of `actor` over `rollouts` disturbed episodes. Rollout `i`
/// starts from a seed drawn from `seed`; the disturbance draws come from a
/// separate stream so that clean and disturbed runs share initial states.
pub fn evaluate_actor(
    task: Task,
    disturbance: &DisturbanceSpec,
    rollouts: usize,
    seed: u64,
    actor: &mut dyn FnMut(&dyn Environment) -> Result<ActionVector>,
) -> Result<Evaluation> {
    disturbance.validate()?;
    let mut env = task.make();
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut scores = Vec::with_capacity(rollouts);
    for i in 0..rollouts {
        let episode_seed: u64 = seeds.random();
        let mut shocks = ChaCha8Rng::seed_from_u64(seed);
        shocks.set_stream(i as u64 + 1);
        env.reset(episode_seed);
        let mut score = 0.0;
        for _ in 0..env.spec().horizon {
            let action = actor(env.as_ref())?;
            let action = apply_disturbance(&action, disturbance, &mut shocks);
            let t = env.step(&action)?;
            score += t.reward;
            if t.done() {
                break;
            }
        }
        scores.push(score);
    }
    Ok(Evaluation::from_scores(scores))
}

/// Agent-only rollouts of a frozen policy; the expert takes no part.
pub fn evaluate_policy(
    policy: &EnsemblePolicy,
    task: Task,
    disturbance: &DisturbanceSpec,
    rollouts: usize,
    mode: InferenceMode,
    consensus: &ConsensusConfig,
    seed: u64,
) -> Result<Evaluation> {
    evaluate_actor(task, disturbance, rollouts, seed, &mut |env| {
        let outputs = policy.forward(env.state())?;
        agent_action(&outputs, mode, consensus)
    })
}

/// Rollouts of the scripted expert under the same protocol.
pub fn evaluate_expert(
    task: Task,
    disturbance: &DisturbanceSpec,
    rollouts: usize,
    seed: u64,
) -> Result<Evaluation> {
    evaluate_actor(task, disturbance, rollouts, seed, &mut |env| {
        Ok(env.expert(env.state()))
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Head outputs with the given means and a common scale; handy for driving
/// arbitration without a network.
pub fn synthetic_outputs(means: Array2<f64>, scale: f64) -> HeadOutputs {
    let scales = Array2::from_elem(means.dim(), scale);
    HeadOutputs { means, scales }
}
