//! Human-in-the-loop session driven tick by tick, and the websocket schema.
//!
//! The session owns one interaction loop. A client streams expert actions;
//! the latest one is held until replaced. Each tick advances one step when
//! the session is running and some action has arrived, and training happens
//! at episode boundaries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::ConsensusConfig;
use crate::envs::{Environment, Shape, Task};
use crate::interaction::{
    interact, Arbiter, ConditionConfig, ConditionName, EpisodeSummary, InteractionError,
    PolicySettings, Result, RunSeeds,
};
use crate::optim::Adam;
use crate::policy::EnsemblePolicy;
use crate::training::{train_epoch, Dataset};
use crate::ActionVector;

/// Version carried in the `v` field of every websocket message.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub step: usize,
    /// Running reward sum of the current episode.
    pub score: f64,
    pub mean_diff: f64,
    pub dataset_size: usize,
    pub last_score: Option<f64>,
    /// Mean score of the completed episodes.
    pub retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub tick: u64,
    pub condition: ConditionName,
    pub running: bool,
    pub env_state: Vec<f64>,
    pub rendered_geometry: Vec<Shape>,
    pub last_a_c: Option<ActionVector>,
    pub last_diff: Option<f64>,
    pub expert_weight: Option<Vec<f64>>,
    /// Tick echoed by the client action used in the last step.
    pub action_tick: Option<u64>,
    pub episode_stats: EpisodeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAction {
    /// Latest server tick the client had seen.
    pub tick: u64,
    pub expert_action: ActionVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum ControlCommand {
    Start,
    Pause,
    /// Restarts the current episode.
    Reset,
    SetCondition { condition: ConditionName },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TeleopMessage {
    ServerState(ServerState),
    ClientAction(ClientAction),
    Control(ControlCommand),
    Error { message: String },
}

#[derive(Serialize)]
struct EnvelopeOut<'a> {
    v: u32,
    #[serde(flatten)]
    message: &'a TeleopMessage,
}

#[derive(Deserialize)]
struct EnvelopeIn {
    #[serde(flatten)]
    message: TeleopMessage,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("malformed message: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("message has no numeric `v` field")]
    MissingVersion,
    #[error("schema version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
}

impl TeleopMessage {
    pub fn encode(&self) -> String {
        serde_json::to_string(&EnvelopeOut {
            v: SCHEMA_VERSION,
            message: self,
        })
        .expect("teleop messages serialise")
    }

    /// Parses a message; unknown fields are ignored, a different schema
    /// version is an error.
    pub fn decode(text: &str) -> std::result::Result<Self, SchemaError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("v")
            .and_then(serde_json::Value::as_u64)
            .ok_or(SchemaError::MissingVersion)?;
        if found != u64::from(SCHEMA_VERSION) {
            return Err(SchemaError::Version {
                found,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value::<EnvelopeIn>(value)?.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopConfig {
    pub task: Task,
    pub condition: ConditionName,
    pub seed: u64,
    pub tick_hz: f64,
    pub policy: PolicySettings,
    pub consensus: ConsensusConfig,
}

impl Default for TeleopConfig {
    fn default() -> Self {
        Self {
            task: Task::PointPush,
            condition: ConditionName::C3,
            seed: 0,
            tick_hz: 20.0,
            policy: PolicySettings {
                learning_rate: 1e-4,
                ..PolicySettings::default()
            },
            consensus: ConsensusConfig::real_time(),
        }
    }
}

impl TeleopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tick_hz > 0.0 && self.tick_hz.is_finite()) {
            return Err(InteractionError::Config(format!(
                "tick_hz must be positive, got {}",
                self.tick_hz
            )));
        }
        if self.policy.learning_rate <= 0.0 || self.policy.batch_size == 0 {
            return Err(InteractionError::Config(
                "learning_rate and batch_size must be positive".into(),
            ));
        }
        self.consensus.validate()?;
        ConditionConfig::preset(self.condition).validate()
    }
}

#[derive(Debug, Clone)]
struct Held {
    tick: u64,
    action: ActionVector,
}

pub struct TeleopSession {
    config: TeleopConfig,
    condition: ConditionConfig,
    seeds: RunSeeds,
    env: Box<dyn Environment>,
    policy: EnsemblePolicy,
    optimizer: Adam,
    dataset: Dataset,
    arbiter: Arbiter,
    shuffle: ChaCha8Rng,
    tick: u64,
    running: bool,
    held: Option<Held>,
    episode: usize,
    step: usize,
    score: f64,
    diff_sum: f64,
    last_a_c: Option<ActionVector>,
    last_diff: Option<f64>,
    expert_weight: Option<Vec<f64>>,
    action_tick: Option<u64>,
    completed: Vec<EpisodeSummary>,
}

impl TeleopSession {
    /// A paused session at the start of episode 0. Seeds follow the
    /// headless runner, so a client that replays the scripted expert sees
    /// the same episodes.
    pub fn new(config: TeleopConfig) -> Result<Self> {
        config.validate()?;
        let seeds = RunSeeds::derive(config.seed);
        let condition = ConditionConfig::preset(config.condition);
        let spec = config.task.spec();
        let pcfg = config.policy.policy_config(config.task, condition.sigma_bar);
        let heads = pcfg.heads;
        let policy = EnsemblePolicy::new(pcfg, seeds.policy)?;
        let optimizer = Adam::new(policy.num_params(), config.policy.learning_rate);
        let arbiter = Arbiter::new(
            condition,
            config.consensus,
            heads,
            spec.action_dim,
            spec.dt,
            seeds.noise,
        )?;
        let mut env = config.task.make();
        env.reset(seeds.episode(0));
        Ok(Self {
            condition,
            seeds,
            env,
            policy,
            optimizer,
            dataset: Dataset::new(spec.state_dim, spec.action_dim),
            arbiter,
            shuffle: ChaCha8Rng::seed_from_u64(seeds.shuffle),
            tick: 0,
            running: false,
            held: None,
            episode: 0,
            step: 0,
            score: 0.0,
            diff_sum: 0.0,
            last_a_c: None,
            last_diff: None,
            expert_weight: None,
            action_tick: None,
            completed: Vec::new(),
            config,
        })
    }

    pub fn config(&self) -> &TeleopConfig {
        &self.config
    }

    pub fn condition(&self) -> &ConditionConfig {
        &self.condition
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    pub fn policy(&self) -> &EnsemblePolicy {
        &self.policy
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn completed(&self) -> &[EpisodeSummary] {
        &self.completed
    }

    /// Stores the client's action for the following ticks. Entries are
    /// clipped to the action bounds.
    pub fn submit(&mut self, action: ClientAction) -> Result<()> {
        let dim = self.env.spec().action_dim;
        if action.expert_action.len() != dim {
            return Err(InteractionError::Config(format!(
                "client action has {} entries, task expects {dim}",
                action.expert_action.len()
            )));
        }
        if action.expert_action.iter().any(|a| !a.is_finite()) {
            return Err(InteractionError::Config("client action is not finite".into()));
        }
        self.held = Some(Held {
            tick: action.tick,
            action: action
                .expert_action
                .iter()
                .map(|a| a.clamp(-1.0, 1.0))
                .collect(),
        });
        Ok(())
    }

    pub fn control(&mut self, command: ControlCommand) -> Result<()> {
        match command {
            ControlCommand::Start => self.running = true,
            ControlCommand::Pause => self.running = false,
            ControlCommand::Reset => self.restart_episode(),
            ControlCommand::SetCondition { condition } => self.set_condition(condition)?,
        }
        Ok(())
    }

    /// Applies a client message. Server-side messages are rejected.
    pub fn handle(&mut self, message: TeleopMessage) -> Result<()> {
        match message {
            TeleopMessage::ClientAction(a) => self.submit(a),
            TeleopMessage::Control(c) => self.control(c),
            TeleopMessage::ServerState(_) | TeleopMessage::Error { .. } => Err(
                InteractionError::Config("clients may only send actions and controls".into()),
            ),
        }
    }

    /// Advances the loop by one tick and reports the resulting state. An
    /// environment failure discards the current episode.
    pub fn tick(&mut self) -> Result<ServerState> {
        self.tick += 1;
        if self.running {
            if let Some(held) = self.held.clone() {
                if let Err(e) = self.advance(&held) {
                    log::error!("teleop episode {} aborted: {e}", self.episode);
                    self.restart_episode();
                    return Err(e);
                }
            }
        }
        Ok(self.state())
    }

    fn advance(&mut self, held: &Held) -> Result<()> {
        let (record, done) = interact(
            self.env.as_mut(),
            &self.policy,
            &mut self.arbiter,
            &mut self.dataset,
            &held.action,
        )?;
        self.step += 1;
        self.score += record.reward;
        self.diff_sum += record.diff;
        self.last_diff = Some(record.diff);
        self.last_a_c = Some(record.executed_action);
        self.expert_weight = record.expert_weight;
        self.action_tick = Some(held.tick);
        if done {
            self.finish_episode()?;
        }
        Ok(())
    }

    fn finish_episode(&mut self) -> Result<()> {
        let training = train_epoch(
            &mut self.policy,
            &mut self.optimizer,
            &self.dataset,
            self.config.policy.batch_size,
            self.condition.training_mode(),
            &mut self.shuffle,
        )?;
        let summary = EpisodeSummary {
            episode: self.episode,
            score: self.score,
            normalized_score: self.config.task.reference().normalize(self.score),
            mean_diff: self.diff_sum / self.step.max(1) as f64,
            length: self.step,
            dataset_size: self.dataset.len(),
            training,
        };
        log::info!(
            "teleop episode {}: score {:.3} diff {:.4}",
            summary.episode,
            summary.score,
            summary.mean_diff
        );
        self.completed.push(summary);
        self.episode += 1;
        self.restart_episode();
        Ok(())
    }

    fn restart_episode(&mut self) {
        self.env.reset(self.seeds.episode(self.episode));
        self.step = 0;
        self.score = 0.0;
        self.diff_sum = 0.0;
    }

    /// Switches the arbitration rule. The multiplier and slack heads, their
    /// optimiser moments and the noise memory start over, as does the
    /// current episode; the ensemble and the dataset are kept.
    pub fn set_condition(&mut self, name: ConditionName) -> Result<()> {
        let condition = ConditionConfig::preset(name);
        if condition.sigma_bar != self.policy.config().sigma_bar {
            return Err(InteractionError::Config(format!(
                "condition {name} uses sigma_bar {}, the policy was built for {}",
                condition.sigma_bar,
                self.policy.config().sigma_bar
            )));
        }
        let spec = self.env.spec();
        self.arbiter = Arbiter::new(
            condition,
            self.config.consensus,
            self.policy.config().heads,
            spec.action_dim,
            spec.dt,
            self.seeds.noise,
        )?;
        self.condition = condition;
        self.policy.reset_constraint_heads();
        self.optimizer
            .reset_range(self.policy.lambda_range().start..self.policy.num_params());
        self.restart_episode();
        Ok(())
    }

    pub fn state(&self) -> ServerState {
        let retention = if self.completed.is_empty() {
            None
        } else {
            Some(
                self.completed.iter().map(|e| e.score).sum::<f64>()
                    / self.completed.len() as f64,
            )
        };
        ServerState {
            tick: self.tick,
            condition: self.condition.name,
            running: self.running,
            env_state: self.env.state().to_vec(),
            rendered_geometry: self.env.geometry(),
            last_a_c: self.last_a_c.clone(),
            last_diff: self.last_diff,
            expert_weight: self.expert_weight.clone(),
            action_tick: self.action_tick,
            episode_stats: EpisodeStats {
                episode: self.episode,
                step: self.step,
                score: self.score,
                mean_diff: if self.step > 0 {
                    self.diff_sum / self.step as f64
                } else {
                    0.0
                },
                dataset_size: self.dataset.len(),
                last_score: self.completed.last().map(|e| e.score),
                retention,
            },
        }
    }
}
