//! Experiment runner, checkpoint evaluator and teleoperation bridge.

pub mod config;
pub mod runner;
pub mod serve;

use std::path::Path;

use anyhow::Result;
use cubedagger::checkpoint::Checkpoint;
use cubedagger::envs::{DisturbanceSpec, Task};
use cubedagger::interaction::{evaluate_policy, Evaluation};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: Task,
    pub condition: String,
    pub episode: usize,
    pub disturbance: DisturbanceSpec,
    pub evaluation: Evaluation,
}

/// Agent-only rollouts of a saved policy. The inference mode follows the
/// condition the checkpoint was trained under.
pub fn evaluate_checkpoint(
    path: &Path,
    task: Option<Task>,
    disturbance: Option<DisturbanceSpec>,
    rollouts: usize,
    seed: u64,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(path)?;
    let task = task.unwrap_or(ck.task);
    let policy = ck.policy()?;
    let disturbance = disturbance.unwrap_or_else(|| task.disturbance());
    let evaluation = evaluate_policy(
        &policy,
        task,
        &disturbance,
        rollouts,
        ck.condition.inference_mode(),
        &ck.consensus,
        seed,
    )?;
    Ok(EvalReport {
        task,
        condition: ck.condition.name.to_string(),
        episode: ck.episode,
        disturbance,
        evaluation,
    })
}
