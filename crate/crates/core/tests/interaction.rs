//! Collection loop, arbitration and the experiment runner.

use cubedagger::consensus::ConsensusConfig;
use cubedagger::envs::{DisturbanceSpec, Environment, Task};
use cubedagger::interaction::{
    action_diff, agent_action, evaluate_actor, evaluate_policy, run_episode, run_experiment, synthetic_outputs,
    Arbiter, ConditionConfig, ConditionName, EpisodeRecord, EpisodeSummary, InferenceMode,
    PolicySettings, Quiet, RunObserver, RunSeeds, RunSpec,
};
use cubedagger::optim::Adam;
use cubedagger::policy::EnsemblePolicy;
use cubedagger::training::Dataset;
use ndarray::Array2;

fn small_policy() -> PolicySettings {
    PolicySettings {
        heads: 3,
        hidden: [16, 16],
        ..PolicySettings::default()
    }
}

fn small_spec(condition: ConditionName, seed: u64, episodes: usize) -> RunSpec {
    RunSpec {
        policy: small_policy(),
        eval_rollouts: 2,
        ..RunSpec::new(Task::PointPush, condition, seed, episodes)
    }
}

fn arbiter(condition: ConditionName, heads: usize, dim: usize) -> Arbiter {
    Arbiter::new(
        ConditionConfig::preset(condition),
        ConsensusConfig::default(),
        heads,
        dim,
        0.05,
        0,
    )
    .unwrap()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn dataset_holds_expert_actions_only() {
    for condition in [ConditionName::EV1, ConditionName::C2, ConditionName::C3] {
        let outcome = run_experiment(&small_spec(condition, 3, 6), &mut Quiet).unwrap();
        let env = Task::PointPush.make();
        assert!(!outcome.dataset.is_empty());
        for (n, (s, a)) in outcome.dataset.iter().enumerate() {
            assert_eq!(a, env.expert(s).as_slice(), "{condition} pair {n}");
        }
    }
}

/// The executed action differs from the expert's while the stored one does not.
#[test]
fn stored_action_is_not_the_executed_one() {
    let task = Task::PointPush;
    let spec = small_spec(ConditionName::C3, 0, 1);
    let policy = EnsemblePolicy::new(spec.policy_config(), 1).unwrap();
    let mut arb = Arbiter::new(spec.condition, spec.consensus, 3, 2, 0.05, 2).unwrap();
    let mut data = Dataset::new(4, 2);
    let mut env = task.make();
    let record = run_episode(env.as_mut(), 5, &policy, &mut arb, &mut data, &mut |_| {}).unwrap();
    let differing = record
        .steps
        .iter()
        .filter(|s| s.executed_action != s.expert_action)
        .count();
    assert!(differing > 0, "consensus never moved away from the expert");
    for (step, (s, a)) in record.steps.iter().zip(data.iter()) {
        assert_eq!(step.state.as_slice(), s);
        assert_eq!(step.expert_action.as_slice(), a);
    }
}

#[test]
fn reruns_are_bit_identical() {
    for condition in [ConditionName::EV2, ConditionName::C3] {
        let spec = small_spec(condition, 11, 5);
        let a = run_experiment(&spec, &mut Quiet).unwrap();
        let b = run_experiment(&spec, &mut Quiet).unwrap();
        assert_eq!(a.result, b.result, "{condition}");
        assert!(a.result.retention.to_bits() == b.result.retention.to_bits());
        assert!(a.result.robustness.to_bits() == b.result.robustness.to_bits());
        let bits = |p: &EnsemblePolicy| p.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.policy), bits(&b.policy), "{condition}");
        assert_eq!(a.optimizer, b.optimizer);
        assert!(a.dataset.iter().eq(b.dataset.iter()));
    }
}

#[test]
fn dataset_grows_by_episode_length() {
    let result = run_experiment(&small_spec(ConditionName::C2, 4, 6), &mut Quiet)
        .unwrap()
        .result;
    let mut size = 0;
    for e in &result.episodes {
        assert!(e.length >= 1 && e.length <= Task::PointPush.spec().horizon);
        size += e.length;
        assert_eq!(e.dataset_size, size, "episode {}", e.episode);
    }
}

/// Candidates drift linearly away from a fixed expert action across the trust
/// boundary of the switching rule.
fn boundary_stream() -> Vec<Array2<f64>> {
    const N: usize = 100;
    let delta_bar = ConditionConfig::preset(ConditionName::EV2).delta_bar;
    let offsets = [-0.02, -0.01, 0.0, 0.01, 0.02];
    (0..=2 * N)
        .map(|t| {
            let center = delta_bar * (t as f64 / N as f64);
            Array2::from_shape_fn((offsets.len(), 1), |(k, _)| center + offsets[k])
        })
        .collect()
}

fn max_step(xs: &[f64]) -> f64 {
    xs.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
}

#[test]
fn consensus_is_continuous_where_switching_jumps() {
    let stream = boundary_stream();
    let expert = [0.0];
    let run = |condition| {
        let mut arb = arbiter(condition, 5, 1);
        stream
            .iter()
            .map(|m| arb.arbitrate(&synthetic_outputs(m.clone(), 0.05), &expert).unwrap().executed[0])
            .collect::<Vec<f64>>()
    };
    let switched = run(ConditionName::EV2);
    let blended = run(ConditionName::C2);
    let candidates: Vec<f64> = stream.iter().map(|m| m[[2, 0]]).collect();
    let delta_bar = ConditionConfig::preset(ConditionName::EV2).delta_bar;

    assert!(max_step(&switched) >= delta_bar - 1e-12, "switching jump {}", max_step(&switched));
    assert!(
        max_step(&blended) <= max_step(&candidates) + 1e-12,
        "consensus step {} vs candidate step {}",
        max_step(&blended),
        max_step(&candidates)
    );
    assert!(max_step(&blended) < max_step(&switched));
}

#[test]
fn far_vague_candidates_defer_to_the_expert() {
    let mut arb = arbiter(ConditionName::C2, 5, 2);
    let means = Array2::from_shape_fn((5, 2), |(k, i)| 0.9 - 0.4 * i as f64 + 0.05 * k as f64);
    let outputs = synthetic_outputs(means, 50.0);
    let expert = [-0.8, -0.7];
    let arb = arb.arbitrate(&outputs, &expert).unwrap();
    let weights = arb.expert_weight.unwrap();
    for i in 0..2 {
        assert!(weights[i] > 0.999, "dimension {i}: expert weight {}", weights[i]);
        assert!((arb.executed[i] - expert[i]).abs() < 1e-3, "{:?}", arb.executed);
    }
}

/// An untrained ensemble pulls away from the expert less than its own mean
/// does.
#[test]
fn untrained_consensus_is_conservative() {
    let task = Task::PointPush;
    let spec = RunSpec::new(task, ConditionName::C2, 0, 1);
    let policy = EnsemblePolicy::new(spec.policy_config(), 9).unwrap();
    let mut arb = arbiter(ConditionName::C2, spec.policy.heads, 2);
    let mut env = task.make();
    let mut checked = 0;
    for seed in 0..5 {
        let mut state = env.reset(seed);
        for _ in 0..40 {
            let expert = env.expert(&state);
            let outputs = policy.forward(&state).unwrap();
            let a = arb.arbitrate(&outputs, &expert).unwrap();
            let mean_gap = distance(&a.ensemble_mean, &expert);
            if mean_gap > 1e-6 {
                assert!(distance(&a.executed, &expert) < mean_gap);
                checked += 1;
            }
            let t = env.step(&expert).unwrap();
            state = t.state.clone();
            if t.done() {
                break;
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn untrained_switching_hands_control_to_the_expert() {
    let task = Task::PointPush;
    let spec = RunSpec::new(task, ConditionName::EV2, 0, 1);
    let mut env = task.make();
    for seed in 0..5 {
        let policy = EnsemblePolicy::new(spec.policy_config(), seed).unwrap();
        let mut arb = arbiter(ConditionName::EV2, spec.policy.heads, 2);
        let mut data = Dataset::new(4, 2);
        let record = run_episode(env.as_mut(), seed, &policy, &mut arb, &mut data, &mut |_| {}).unwrap();
        let expert_only = expert_score(env.as_mut(), seed);
        let agent_steps = record.steps.iter().filter(|s| s.diff > 0.0).count();
        assert!(agent_steps * 20 <= record.len(), "agent acted on {agent_steps} steps");
        assert!(
            (record.score - expert_only).abs() <= 0.05 * expert_only.abs(),
            "seed {seed}: {} vs expert {expert_only}",
            record.score
        );
    }
}

fn expert_score(env: &mut dyn Environment, seed: u64) -> f64 {
    let mut state = env.reset(seed);
    let mut total = 0.0;
    for _ in 0..env.spec().horizon {
        let t = env.step(&env.expert(&state)).unwrap();
        total += t.reward;
        state = t.state.clone();
        if t.done() {
            break;
        }
    }
    total
}

#[test]
fn expert_condition_retention_is_the_expert_average() {
    let task = Task::Pendulum;
    let spec = RunSpec {
        policy: small_policy(),
        eval_rollouts: 1,
        ..RunSpec::new(task, ConditionName::Expert, 8, 12)
    };
    let outcome = run_experiment(&spec, &mut Quiet).unwrap();
    let seeds = RunSeeds::derive(8);
    let mut env = task.make();
    let scores: Vec<f64> = (0..12).map(|n| expert_score(env.as_mut(), seeds.episode(n))).collect();
    let expected = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!((outcome.result.retention - expected).abs() < 1e-9);
    assert!(outcome.result.episodes.iter().all(|e| e.mean_diff == 0.0));
}

#[test]
fn zero_episodes_leave_the_policy_untrained() {
    for condition in [ConditionName::EV2, ConditionName::C3] {
        let spec = small_spec(condition, 6, 0);
        let outcome = run_experiment(&spec, &mut Quiet).unwrap();
        let seeds = RunSeeds::derive(6);
        let fresh = EnsemblePolicy::new(spec.policy_config(), seeds.policy).unwrap();
        assert_eq!(outcome.policy, fresh);
        assert!(outcome.dataset.is_empty());
        let baseline = evaluate_policy(
            &fresh,
            spec.task,
            &spec.disturbance,
            spec.eval_rollouts,
            spec.condition.inference_mode(),
            &spec.consensus,
            seeds.evaluation,
        )
        .unwrap()
        .mean;
        assert_eq!(outcome.result.robustness, baseline, "{condition}");
    }
}

#[test]
fn evaluation_without_disturbance_is_clean_performance() {
    let task = Task::MultiArm;
    let policy = EnsemblePolicy::new(RunSpec::new(task, ConditionName::EV2, 0, 1).policy_config(), 2).unwrap();
    let cfg = ConsensusConfig::default();
    let eval = evaluate_policy(&policy, task, &DisturbanceSpec::none(), 4, InferenceMode::EnsembleMean, &cfg, 5).unwrap();
    let direct = evaluate_actor(task, &DisturbanceSpec::none(), 4, 5, &mut |env| {
        Ok(policy.forward(env.state())?.ensemble_mean().to_vec())
    })
    .unwrap();
    assert_eq!(eval.scores, direct.scores);
}

#[test]
fn collapsed_ensemble_consensus_matches_the_mean() {
    let task = Task::Pendulum;
    let mut policy = EnsemblePolicy::new(RunSpec::new(task, ConditionName::C2, 0, 1).policy_config(), 4).unwrap();
    for k in 1..policy.config().heads {
        policy.copy_head(0, k);
    }
    let cfg = ConsensusConfig::default();
    let dist = task.disturbance();
    let mean = evaluate_policy(&policy, task, &dist, 5, InferenceMode::EnsembleMean, &cfg, 1).unwrap();
    let cons = evaluate_policy(&policy, task, &dist, 5, InferenceMode::Consensus, &cfg, 1).unwrap();
    for (a, b) in mean.scores.iter().zip(&cons.scores) {
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn diff_is_nonnegative_and_episodes_fit_the_horizon() {
    let task = Task::PointPush;
    let spec = small_spec(ConditionName::C3, 2, 1);
    let policy = EnsemblePolicy::new(spec.policy_config(), 0).unwrap();
    let mut arb = Arbiter::new(spec.condition, spec.consensus, 3, 2, 0.05, 0).unwrap();
    let mut data = Dataset::new(4, 2);
    let mut env = task.make();
    let record: EpisodeRecord = run_episode(env.as_mut(), 1, &policy, &mut arb, &mut data, &mut |_| {}).unwrap();
    assert!(record.len() <= task.spec().horizon);
    for s in &record.steps {
        assert!(s.diff >= 0.0);
        assert_eq!(s.diff, action_diff(&s.expert_action, &s.executed_action));
    }
    let total: f64 = record.steps.iter().map(|s| s.reward).sum();
    assert!((record.score - total).abs() < 1e-9);
}

/// Mean agent-only gap to the expert on a fixed set of states, recorded
/// after every training pass.
struct GapProbe {
    states: Vec<Vec<f64>>,
    mode: InferenceMode,
    consensus: ConsensusConfig,
    gaps: Vec<f64>,
}

impl RunObserver for GapProbe {
    fn on_episode(
        &mut self,
        _summary: &EpisodeSummary,
        policy: &EnsemblePolicy,
        _optimizer: &Adam,
    ) -> cubedagger::interaction::Result<()> {
        let env = Task::PointPush.make();
        let total: f64 = self
            .states
            .iter()
            .map(|s| {
                let outputs = policy.forward(s).unwrap();
                let a = agent_action(&outputs, self.mode, &self.consensus).unwrap();
                action_diff(&env.expert(s), &a)
            })
            .sum();
        self.gaps.push(total / self.states.len() as f64);
        Ok(())
    }
}

fn probe_states() -> Vec<Vec<f64>> {
    let mut env = Task::PointPush.make();
    let mut states = Vec::new();
    for seed in 500..505 {
        let mut s = env.reset(seed);
        for step in 0..200 {
            if step % 5 == 0 {
                states.push(s.clone());
            }
            let t = env.step(&env.expert(&s)).unwrap();
            s = t.state.clone();
            if t.done() {
                break;
            }
        }
    }
    states
}

/// The agent acting alone approaches the expert under every condition.
/// Executed Diff shrinks where the agent is in control from the start (EV1);
/// where the switching rule never trusts an untrained ensemble (EV2, C1) it
/// starts at zero and must not grow. Under consensus (C2, C3) the agent's
/// share grows with its confidence, so executed Diff is only reported.
#[test]
fn diff_shrinks_over_episodes() {
    let states = probe_states();
    for condition in [
        ConditionName::EV1,
        ConditionName::EV2,
        ConditionName::C1,
        ConditionName::C2,
        ConditionName::C3,
    ] {
        let spec = RunSpec {
            eval_rollouts: 1,
            ..RunSpec::new(Task::PointPush, condition, 0, 50)
        };
        let mut probe = GapProbe {
            states: states.clone(),
            mode: spec.condition.inference_mode(),
            consensus: spec.consensus,
            gaps: Vec::new(),
        };
        let result = run_experiment(&spec, &mut probe).unwrap().result;
        let diffs: Vec<f64> = result.episodes.iter().map(|e| e.mean_diff).collect();
        let (first, last) = (median(&diffs[..10]), median(&diffs[40..]));
        let (gap_first, gap_last) = (median(&probe.gaps[..10]), median(&probe.gaps[40..]));
        println!(
            "{condition}: executed Diff {first:.4} -> {last:.4}, agent gap {gap_first:.4} -> {gap_last:.4}"
        );
        assert!(gap_last < gap_first, "{condition}: agent gap {gap_first} -> {gap_last}");
        match condition {
            ConditionName::EV1 => assert!(last < first, "{condition}: {first} -> {last}"),
            ConditionName::EV2 | ConditionName::C1 => {
                assert!(first < 1e-3 && last <= first + 1e-3, "{condition}: {first} -> {last}")
            }
            _ => {}
        }
    }
}
