//! Experiment configuration file.
//!
//! A TOML document with top-level run settings and optional `[policy]`,
//! `[consensus]`, `[noise]`, `[disturbance]` and `[teleop]` tables. Every
//! key has a default, so an empty file is a valid configuration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cubedagger::consensus::ConsensusConfig;
use cubedagger::envs::{DisturbanceSpec, Task};
use cubedagger::interaction::{ConditionConfig, ConditionName, PolicySettings, RunSpec, DEFAULT_NOISE_T};
use cubedagger::teleop::TeleopConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Red-noise time constant in seconds for conditions that explore. The
    /// step period is the task's `dt`.
    pub t: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self { t: DEFAULT_NOISE_T }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeleopSection {
    pub port: u16,
    pub tick_hz: f64,
    pub learning_rate: f64,
}

impl Default for TeleopSection {
    fn default() -> Self {
        Self {
            port: 8080,
            tick_hz: 20.0,
            learning_rate: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: String,
    /// Condition names, or `"all"` for EV1, EV2, C1, C2 and C3.
    pub conditions: Vec<String>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    /// Disturbed rollouts averaged into Robustness.
    pub eval_rollouts: usize,
    /// Snapshot period in episodes; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Write one JSON line per interaction step.
    pub step_log: bool,
    pub out: PathBuf,
    /// Overrides the ensemble-spread threshold of every condition.
    pub sigma_bar: Option<f64>,
    pub policy: PolicySettings,
    pub consensus: ConsensusConfig,
    pub noise: NoiseSection,
    /// Defaults to the task's disturbance model.
    pub disturbance: Option<DisturbanceSpec>,
    pub teleop: TeleopSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::PointPush.name().to_string(),
            conditions: vec!["C3".into()],
            seeds: vec![0, 1, 2],
            episodes: 50,
            eval_rollouts: 5,
            checkpoint_every: 5,
            step_log: true,
            out: PathBuf::from("runs"),
            sigma_bar: None,
            policy: PolicySettings::default(),
            consensus: ConsensusConfig::default(),
            noise: NoiseSection::default(),
            disturbance: None,
            teleop: TeleopSection::default(),
        }
    }
}

const ABLATION: [ConditionName; 5] = [
    ConditionName::EV1,
    ConditionName::EV2,
    ConditionName::C1,
    ConditionName::C2,
    ConditionName::C3,
];

/// Parses `"all"`, a single name, or a comma-separated list.
pub fn parse_conditions(items: &[String]) -> Result<Vec<ConditionName>> {
    let mut out = Vec::new();
    for item in items.iter().flat_map(|s| s.split(',')) {
        let item = item.trim();
        if item.is_empty() {
            continue;
        }
        if item.eq_ignore_ascii_case("all") {
            out.extend(ABLATION);
        } else {
            out.push(item.parse::<ConditionName>()?);
        }
    }
    let mut seen = HashSet::new();
    out.retain(|c| seen.insert(*c));
    Ok(out)
}

/// `"21"` means seeds 0..21; `"0,4,9"` lists them.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let text = text.trim();
    if !text.contains(',') {
        let n: u64 = text
            .parse()
            .with_context(|| format!("invalid seed count {text:?}"))?;
        return Ok((0..n).collect());
    }
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .with_context(|| format!("invalid seed {s:?}"))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).context("parsing configuration")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn task(&self) -> Result<Task> {
        Ok(self.task.parse::<Task>()?)
    }

    /// Canonical form: names spelled out, task disturbance filled in.
    pub fn resolved(&self) -> Result<Self> {
        self.validate()?;
        let task = self.task()?;
        Ok(Self {
            task: task.name().to_string(),
            conditions: parse_conditions(&self.conditions)?
                .iter()
                .map(|c| c.to_string())
                .collect(),
            disturbance: Some(self.disturbance.unwrap_or_else(|| task.disturbance())),
            ..self.clone()
        })
    }

    fn condition(&self, name: ConditionName) -> ConditionConfig {
        let mut c = ConditionConfig::preset(name);
        if let Some(s) = self.sigma_bar {
            c.sigma_bar = s;
        }
        if c.noise_t > 0.0 {
            c.noise_t = self.noise.t;
        }
        c
    }

    /// Checks everything a run needs before any run starts.
    pub fn validate(&self) -> Result<()> {
        let task = self.task()?;
        let conditions = parse_conditions(&self.conditions)?;
        if conditions.is_empty() {
            bail!("no conditions given");
        }
        if self.seeds.is_empty() {
            bail!("no seeds given");
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            bail!("seed {dup} is listed twice");
        }
        if !(self.noise.t >= 0.0 && self.noise.t.is_finite()) {
            bail!("noise.t must be nonnegative, got {}", self.noise.t);
        }
        if !(self.teleop.tick_hz > 0.0 && self.teleop.tick_hz.is_finite()) {
            bail!("teleop.tick_hz must be positive");
        }
        for name in conditions {
            self.spec(task, name, self.seeds[0])
                .validate()
                .with_context(|| format!("condition {name}"))?;
        }
        Ok(())
    }

    fn spec(&self, task: Task, name: ConditionName, seed: u64) -> RunSpec {
        RunSpec {
            condition: self.condition(name),
            policy: self.policy,
            consensus: self.consensus,
            disturbance: self.disturbance.unwrap_or_else(|| task.disturbance()),
            eval_rollouts: self.eval_rollouts,
            ..RunSpec::new(task, name, seed, self.episodes)
        }
    }

    /// One run per (condition, seed), conditions outermost.
    pub fn run_specs(&self) -> Result<Vec<RunSpec>> {
        self.validate()?;
        let task = self.task()?;
        let mut specs = Vec::new();
        for name in parse_conditions(&self.conditions)? {
            for &seed in &self.seeds {
                specs.push(self.spec(task, name, seed));
            }
        }
        Ok(specs)
    }

    /// Session settings for the teleop bridge: first condition and seed.
    pub fn teleop_config(&self) -> Result<TeleopConfig> {
        self.validate()?;
        let condition = parse_conditions(&self.conditions)?[0];
        Ok(TeleopConfig {
            task: self.task()?,
            condition,
            seed: self.seeds[0],
            tick_hz: self.teleop.tick_hz,
            policy: PolicySettings {
                learning_rate: self.teleop.learning_rate,
                ..self.policy
            },
            consensus: ConsensusConfig {
                itp_max_iters: ConsensusConfig::real_time().itp_max_iters,
                ..self.consensus
            },
        })
    }
}
