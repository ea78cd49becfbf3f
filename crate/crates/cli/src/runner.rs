//! Runs the (condition, seed) matrix and writes its outputs.
//!
//! Layout under the output directory:
//!
//! ```text
//! resolved_config.toml
//! results.json          config + per-run results + failures
//! summary.csv           task, condition, seed, retention, robustness, mean_diff
//! episodes.csv          one row per collection episode
//! curves.csv            per-condition Score/Diff across seeds, by episode
//! bars.csv              per-condition Retention/Robustness across seeds
//! steps/<run>.jsonl     one record per interaction step
//! checkpoints/<run>/episode_NNN.json
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cubedagger::checkpoint::Checkpoint;
use cubedagger::interaction::{
    run_experiment, EpisodeSummary, InteractionError, RunObserver, RunResult, RunSpec, StepRecord,
};
use cubedagger::optim::Adam;
use cubedagger::policy::EnsemblePolicy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub task: String,
    pub condition: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub config: ExperimentConfig,
    pub results: Vec<RunResult>,
    pub failures: Vec<RunFailure>,
}

pub fn run_label(spec: &RunSpec) -> String {
    format!("{}_{}_seed{}", spec.task, spec.condition.name, spec.seed)
}

struct FileObserver {
    spec: RunSpec,
    steps: Option<BufWriter<File>>,
    checkpoints: Option<PathBuf>,
    every: usize,
    io_error: Option<std::io::Error>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    episode: usize,
    #[serde(flatten)]
    step: &'a StepRecord,
}

impl RunObserver for FileObserver {
    fn on_step(&mut self, episode: usize, step: &StepRecord) {
        let Some(w) = self.steps.as_mut() else {
            return;
        };
        if self.io_error.is_some() {
            return;
        }
        let line = serde_json::to_string(&StepLine { episode, step }).expect("step records serialise");
        if let Err(e) = writeln!(w, "{line}") {
            self.io_error = Some(e);
        }
    }

    fn on_episode(
        &mut self,
        summary: &EpisodeSummary,
        policy: &EnsemblePolicy,
        optimizer: &Adam,
    ) -> cubedagger::interaction::Result<()> {
        let done = summary.episode + 1;
        let Some(dir) = self.checkpoints.as_ref() else {
            return Ok(());
        };
        if self.every == 0 || done % self.every != 0 {
            return Ok(());
        }
        let ck = Checkpoint::new(
            self.spec.task,
            self.spec.condition,
            self.spec.consensus,
            self.spec.seed,
            done,
            policy,
            Some(optimizer),
        );
        ck.save(&dir.join(format!("episode_{done:03}.json")))
            .map_err(|e| InteractionError::Config(format!("writing checkpoint: {e}")))
    }
}

fn run_one(spec: &RunSpec, config: &ExperimentConfig, out: &Path) -> Result<RunResult> {
    let label = run_label(spec);
    let steps = if config.step_log {
        let path = out.join("steps").join(format!("{label}.jsonl"));
        Some(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    } else {
        None
    };
    let checkpoints = if config.checkpoint_every > 0 {
        let dir = out.join("checkpoints").join(&label);
        fs::create_dir_all(&dir)?;
        Some(dir)
    } else {
        None
    };
    let mut observer = FileObserver {
        spec: spec.clone(),
        steps,
        checkpoints,
        every: config.checkpoint_every,
        io_error: None,
    };
    let outcome = run_experiment(spec, &mut observer)?;
    if let Some(e) = observer.io_error.take() {
        return Err(e).context("writing step log");
    }
    if let Some(mut w) = observer.steps.take() {
        w.flush()?;
    }
    log::info!(
        "{label}: retention {:.3} robustness {:.3} diff {:.4}",
        outcome.result.retention,
        outcome.result.robustness,
        outcome.result.mean_diff
    );
    Ok(outcome.result)
}

/// Runs every (condition, seed) pair in parallel. A failing run is recorded
/// and the rest continue. Results come back in matrix order.
pub fn run_matrix(config: &ExperimentConfig, out: &Path) -> Result<MatrixReport> {
    let config = config.resolved()?;
    let specs = config.run_specs()?;
    fs::create_dir_all(out.join("steps"))?;
    fs::write(out.join("resolved_config.toml"), config.to_toml()?)?;

    let outcomes: Vec<(RunSpec, Result<RunResult>)> = specs
        .into_par_iter()
        .map(|spec| {
            let r = run_one(&spec, &config, out);
            (spec, r)
        })
        .collect();

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (spec, outcome) in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::error!("{} failed: {e:#}", run_label(&spec));
                failures.push(RunFailure {
                    task: spec.task.to_string(),
                    condition: spec.condition.name.to_string(),
                    seed: spec.seed,
                    error: format!("{e:#}"),
                });
            }
        }
    }
    let report = MatrixReport {
        config,
        results,
        failures,
    };
    write_outputs(&report, out)?;
    Ok(report)
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    task: &'a str,
    condition: &'a str,
    seed: u64,
    retention: f64,
    robustness: f64,
    mean_diff: f64,
}

#[derive(Serialize)]
struct EpisodeRow<'a> {
    task: &'a str,
    condition: &'a str,
    seed: u64,
    episode: usize,
    score: f64,
    normalized_score: f64,
    mean_diff: f64,
    length: usize,
    dataset_size: usize,
    policy_loss: Option<f64>,
    band_fraction: Option<f64>,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    task: &'a str,
    condition: &'a str,
    episode: usize,
    runs: usize,
    score_mean: f64,
    score_std: f64,
    normalized_score_mean: f64,
    diff_mean: f64,
    diff_std: f64,
}

#[derive(Serialize)]
struct BarRow<'a> {
    task: &'a str,
    condition: &'a str,
    runs: usize,
    retention_median: f64,
    retention_mean: f64,
    retention_std: f64,
    robustness_median: f64,
    robustness_mean: f64,
    robustness_std: f64,
    normalized_retention_mean: f64,
    normalized_robustness_mean: f64,
    mean_diff: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

pub fn write_outputs(report: &MatrixReport, out: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    fs::write(out.join("results.json"), json)?;

    let mut summary = csv_writer(&out.join("summary.csv"))?;
    let mut episodes = csv_writer(&out.join("episodes.csv"))?;
    for r in &report.results {
        let (task, condition) = (r.task.name(), r.condition.as_str());
        summary.serialize(SummaryRow {
            task,
            condition,
            seed: r.seed,
            retention: r.retention,
            robustness: r.robustness,
            mean_diff: r.mean_diff,
        })?;
        for e in &r.episodes {
            episodes.serialize(EpisodeRow {
                task,
                condition,
                seed: r.seed,
                episode: e.episode,
                score: e.score,
                normalized_score: e.normalized_score,
                mean_diff: e.mean_diff,
                length: e.length,
                dataset_size: e.dataset_size,
                policy_loss: e.training.map(|t| t.policy_loss),
                band_fraction: e.training.and_then(|t| t.band_fraction),
            })?;
        }
    }
    summary.flush()?;
    episodes.flush()?;

    let mut curves = csv_writer(&out.join("curves.csv"))?;
    let mut bars = csv_writer(&out.join("bars.csv"))?;
    for condition in &report.config.conditions {
        let runs: Vec<&RunResult> = report
            .results
            .iter()
            .filter(|r| r.condition.as_str() == condition)
            .collect();
        if runs.is_empty() {
            continue;
        }
        let task = runs[0].task.name();
        let longest = runs.iter().map(|r| r.episodes.len()).max().unwrap_or(0);
        for ep in 0..longest {
            let at: Vec<&EpisodeSummary> = runs.iter().filter_map(|r| r.episodes.get(ep)).collect();
            let scores: Vec<f64> = at.iter().map(|e| e.score).collect();
            let normalized: Vec<f64> = at.iter().map(|e| e.normalized_score).collect();
            let diffs: Vec<f64> = at.iter().map(|e| e.mean_diff).collect();
            let (score_mean, score_std) = mean_std(&scores);
            let (diff_mean, diff_std) = mean_std(&diffs);
            curves.serialize(CurveRow {
                task,
                condition,
                episode: ep,
                runs: at.len(),
                score_mean,
                score_std,
                normalized_score_mean: mean_std(&normalized).0,
                diff_mean,
                diff_std,
            })?;
        }
        let ret: Vec<f64> = runs.iter().map(|r| r.retention).collect();
        let rob: Vec<f64> = runs.iter().map(|r| r.robustness).collect();
        let (retention_mean, retention_std) = mean_std(&ret);
        let (robustness_mean, robustness_std) = mean_std(&rob);
        let nret: Vec<f64> = runs.iter().map(|r| r.normalized_retention).collect();
        let nrob: Vec<f64> = runs.iter().map(|r| r.normalized_robustness).collect();
        let diffs: Vec<f64> = runs.iter().map(|r| r.mean_diff).collect();
        bars.serialize(BarRow {
            task,
            condition,
            runs: runs.len(),
            retention_median: median(&ret),
            retention_mean,
            retention_std,
            robustness_median: median(&rob),
            robustness_mean,
            robustness_std,
            normalized_retention_mean: mean_std(&nret).0,
            normalized_robustness_mean: mean_std(&nrob).0,
            mean_diff: mean_std(&diffs).0,
        })?;
    }
    curves.flush()?;
    bars.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_eq!(s, 1.0);
    }
}
