//! Deterministic toy tasks with scripted experts.
//!
//! * `PointPush`: a point pusher must shove a disc onto the origin without
//!   grasping it. State `[ox - px, oy - py, ox, oy]`, action = pusher
//!   velocity. The episode ends when the disc reaches the goal.
//! * `Pendulum`: an inverted pendulum held upright by torque. State
//!   `[theta, omega]`, theta measured from upright.
//! * `MultiArm`: a planar six-link arm whose joints are driven by
//!   acceleration commands and whose tip must reach a target. State
//!   `[q(6), qdot(6), tx, ty]`.
//!
//! All dynamics are explicit Euler with `dt = 0.05` and a 200-step horizon.
//! Actions are clipped to `[-1, 1]` per dimension before use.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ActionVector;

pub const DEFAULT_DT: f64 = 0.05;
pub const DEFAULT_HORIZON: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("unknown task {0:?} (expected PointPush, Pendulum or MultiArm)")]
    UnknownTask(String),
    #[error("action has {got} entries, task expects {expected}")]
    ActionDimension { expected: usize, got: usize },
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("invalid disturbance: {0}")]
    Disturbance(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub dt: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl Transition {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Primitive used by the teleoperation panel to draw a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Circle { x: f64, y: f64, r: f64, role: String },
    Segment { x0: f64, y0: f64, x1: f64, y1: f64, role: String },
}

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;
    /// Samples an initial state; identical seeds give identical states.
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Transition, EnvError>;
    fn state(&self) -> &[f64];
    /// Scripted expert action at `state`.
    fn expert(&self, state: &[f64]) -> ActionVector;
    fn geometry(&self) -> Vec<Shape>;
}

fn clip_action(action: &[f64]) -> Vec<f64> {
    action.iter().map(|a| a.clamp(-1.0, 1.0)).collect()
}

fn finish(
    spec: &EnvSpec,
    step: usize,
    state: &[f64],
    reward: f64,
    terminated: bool,
) -> Result<Transition, EnvError> {
    if !state.iter().all(|v| v.is_finite()) || !reward.is_finite() {
        return Err(EnvError::NonFinite { step });
    }
    Ok(Transition {
        state: state.to_vec(),
        reward,
        terminated,
        truncated: !terminated && step >= spec.horizon,
    })
}

/// Task selector. Names parse case-insensitively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    PointPush,
    Pendulum,
    MultiArm,
}

/// Score anchors used to normalise episode scores: `floor` is the mean
/// score of the zero-action policy and `expert` the mean score of the
/// scripted expert, both over seeds 0..100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreReference {
    pub floor: f64,
    pub expert: f64,
    pub expert_worst: f64,
}

impl ScoreReference {
    /// Maps the floor to 0 and the expert mean to 1.
    pub fn normalize(&self, score: f64) -> f64 {
        (score - self.floor) / (self.expert - self.floor)
    }
}

impl Task {
    pub const ALL: [Task; 3] = [Task::PointPush, Task::Pendulum, Task::MultiArm];

    pub fn name(&self) -> &'static str {
        match self {
            Task::PointPush => "PointPush",
            Task::Pendulum => "Pendulum",
            Task::MultiArm => "MultiArm",
        }
    }

    pub fn make(&self) -> Box<dyn Environment> {
        match self {
            Task::PointPush => Box::new(PointPush::new()),
            Task::Pendulum => Box::new(Pendulum::new()),
            Task::MultiArm => Box::new(MultiArm::new()),
        }
    }

    pub fn spec(&self) -> EnvSpec {
        self.make().spec().clone()
    }

    /// Disturbance used for robustness evaluation: 5% per dimension, up to
    /// the largest action (half of it for the pendulum).
    pub fn disturbance(&self) -> DisturbanceSpec {
        let magnitude = match self {
            Task::Pendulum => 0.5,
            _ => 1.0,
        };
        DisturbanceSpec {
            probability: 0.05,
            magnitude,
        }
    }

    /// Frozen 100-seed rollout statistics (see `tests/environments.rs`).
    pub fn reference(&self) -> ScoreReference {
        match self {
            Task::PointPush => ScoreReference {
                floor: POINT_PUSH_REFERENCE.0,
                expert: POINT_PUSH_REFERENCE.1,
                expert_worst: POINT_PUSH_REFERENCE.2,
            },
            Task::Pendulum => ScoreReference {
                floor: PENDULUM_REFERENCE.0,
                expert: PENDULUM_REFERENCE.1,
                expert_worst: PENDULUM_REFERENCE.2,
            },
            Task::MultiArm => ScoreReference {
                floor: MULTI_ARM_REFERENCE.0,
                expert: MULTI_ARM_REFERENCE.1,
                expert_worst: MULTI_ARM_REFERENCE.2,
            },
        }
    }
}

// (zero-action mean, expert mean, expert worst) over seeds 0..100.
const POINT_PUSH_REFERENCE: (f64, f64, f64) = (-159.242633, -19.210482, -59.177379);
const PENDULUM_REFERENCE: (f64, f64, f64) = (15.772587, 199.861486, 199.528749);
const MULTI_ARM_REFERENCE: (f64, f64, f64) = (-174.649025, -16.600005, -46.565669);

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "pointpush" => Ok(Task::PointPush),
            "pendulum" => Ok(Task::Pendulum),
            "multiarm" => Ok(Task::MultiArm),
            _ => Err(EnvError::UnknownTask(s.to_string())),
        }
    }
}

fn spec(name: &str, state_dim: usize, action_dim: usize) -> EnvSpec {
    EnvSpec {
        name: name.to_string(),
        state_dim,
        action_dim,
        dt: DEFAULT_DT,
        horizon: DEFAULT_HORIZON,
    }
}

fn check_action(spec: &EnvSpec, action: &[f64]) -> Result<(), EnvError> {
    if action.len() != spec.action_dim {
        return Err(EnvError::ActionDimension {
            expected: spec.action_dim,
            got: action.len(),
        });
    }
    Ok(())
}

/// Non-prehensile pushing of a disc onto the origin.
///
/// Positions are kept internally; the observation is the object relative to
/// the pusher followed by the object relative to the goal.
#[derive(Debug, Clone)]
pub struct PointPush {
    spec: EnvSpec,
    /// `[px, py, ox, oy]`.
    positions: [f64; 4],
    state: Vec<f64>,
    steps: usize,
}

impl PointPush {
    /// Pusher speed at full action, units per second.
    pub const SPEED: f64 = 1.0;
    /// Sum of pusher and object radii.
    pub const CONTACT: f64 = 0.1;
    /// Inner and outer radius of the ring the object starts in.
    pub const RING: (f64, f64) = (0.3, 0.5);
    pub const ARENA: f64 = 2.0;
    /// The episode ends once the object is this close to the goal.
    pub const GOAL_RADIUS: f64 = 0.05;

    pub fn new() -> Self {
        let mut env = Self {
            spec: spec("PointPush", 4, 2),
            positions: [0.0, 0.0, Self::RING.0, 0.0],
            state: vec![0.0; 4],
            steps: 0,
        };
        env.observe();
        env
    }

    /// Pusher and object positions, `[px, py, ox, oy]`.
    pub fn positions(&self) -> [f64; 4] {
        self.positions
    }

    /// Places pusher and object at arbitrary positions.
    pub fn set_positions(&mut self, positions: [f64; 4]) {
        self.positions = positions;
        self.steps = 0;
        self.observe();
    }

    fn observe(&mut self) {
        let [px, py, ox, oy] = self.positions;
        self.state = vec![ox - px, oy - py, ox, oy];
    }

    /// Scripted pushing controller: a smooth vector field that heads for a
    /// standoff point behind the object (as seen from the goal), circles the
    /// object counterclockwise while on the wrong side, and pushes along the
    /// object-goal line once aligned.
    pub fn expert_action(state: &[f64]) -> ActionVector {
        // d: pusher to object, o: goal to object.
        let (dx, dy, ox, oy) = (state[0], state[1], state[2], state[3]);
        let goal_dist = (ox * ox + oy * oy).sqrt();
        if goal_dist < 1e-9 {
            return vec![0.0, 0.0];
        }
        let (ux, uy) = (-ox / goal_dist, -oy / goal_dist);
        let dist = (dx * dx + dy * dy).sqrt().max(1e-9);
        let (nx, ny) = (dx / dist, dy / dist);
        // 0 when the pusher sits directly behind the object, 1 when in front.
        let misalign = (0.5 * (1.0 - (nx * ux + ny * uy))).clamp(0.0, 1.0);
        let standoff = 0.9 * Self::CONTACT + 0.2 * misalign.sqrt();
        let forward = (goal_dist / 0.2).min(1.0) * (1.0 - misalign).powi(8);
        let gain = 2.0 + 6.0 * (1.0 - misalign).powi(8);
        let near = (-(dist - Self::CONTACT).max(0.0) / 0.2).exp();
        let circle = 2.0 * misalign.sqrt() * near;
        vec![
            (forward * ux + gain * (dx - ux * standoff) + circle * ny).clamp(-1.0, 1.0),
            (forward * uy + gain * (dy - uy * standoff) - circle * nx).clamp(-1.0, 1.0),
        ]
    }
}

impl Default for PointPush {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for PointPush {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = rng.random_range(-1.0..1.0);
        let py = rng.random_range(-1.0..1.0);
        // Uniform over the annulus area.
        let (r0, r1) = Self::RING;
        let r = rng.random_range(r0 * r0..r1 * r1).sqrt();
        let phi = rng.random_range(0.0..2.0 * PI);
        self.set_positions([px, py, px + r * phi.cos(), py + r * phi.sin()]);
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition, EnvError> {
        check_action(&self.spec, action)?;
        let a = clip_action(action);
        let dt = self.spec.dt;
        let arena = Self::ARENA;
        let s = &mut self.positions;
        s[0] = (s[0] + dt * Self::SPEED * a[0]).clamp(-arena, arena);
        s[1] = (s[1] + dt * Self::SPEED * a[1]).clamp(-arena, arena);
        let (dx, dy) = (s[2] - s[0], s[3] - s[1]);
        let d = (dx * dx + dy * dy).sqrt();
        if d < Self::CONTACT {
            // Resolve penetration by sliding the object along the contact normal.
            let (nx, ny) = if d > 1e-12 { (dx / d, dy / d) } else { (a[0], a[1]) };
            let n = (nx * nx + ny * ny).sqrt().max(1e-12);
            s[2] = (s[0] + Self::CONTACT * nx / n).clamp(-arena, arena);
            s[3] = (s[1] + Self::CONTACT * ny / n).clamp(-arena, arena);
        }
        let dist = (s[2] * s[2] + s[3] * s[3]).sqrt();
        self.steps += 1;
        self.observe();
        finish(&self.spec, self.steps, &self.state, -dist, dist < Self::GOAL_RADIUS)
    }

    fn state(&self) -> &[f64] {
        &self.state
    }

    fn expert(&self, state: &[f64]) -> ActionVector {
        Self::expert_action(state)
    }

    fn geometry(&self) -> Vec<Shape> {
        let [px, py, ox, oy] = self.positions;
        vec![
            Shape::Circle {
                x: 0.0,
                y: 0.0,
                r: Self::GOAL_RADIUS,
                role: "goal".into(),
            },
            Shape::Circle {
                x: ox,
                y: oy,
                r: 0.06,
                role: "object".into(),
            },
            Shape::Circle {
                x: px,
                y: py,
                r: Self::CONTACT - 0.06,
                role: "pusher".into(),
            },
        ]
    }
}

/// Inverted pendulum balanced by a bounded torque.
#[derive(Debug, Clone)]
pub struct Pendulum {
    spec: EnvSpec,
    state: Vec<f64>,
    steps: usize,
    /// Viscous damping; zero by default.
    pub damping: f64,
}

impl Pendulum {
    /// Gravity over length.
    pub const GRAVITY: f64 = 10.0;
    /// Angular acceleration at full action.
    pub const MAX_ACCEL: f64 = 15.0;
    /// The pendulum counts as fallen beyond this angle.
    pub const FALL_ANGLE: f64 = 1.0;
    pub const INIT_ANGLE: f64 = 0.3;

    pub fn new() -> Self {
        Self {
            spec: spec("Pendulum", 2, 1),
            state: vec![0.0, 0.0],
            steps: 0,
            damping: 0.0,
        }
    }

    /// PD controller on angle and rate.
    pub fn expert_action(state: &[f64]) -> ActionVector {
        let (theta, omega) = (state[0], state[1]);
        vec![(-(30.0 * theta + 8.0 * omega) / Self::MAX_ACCEL).clamp(-1.0, 1.0)]
    }

    /// Angular acceleration for a given state and clipped action.
    pub fn acceleration(&self, theta: f64, omega: f64, action: f64) -> f64 {
        Self::GRAVITY * theta.sin() - self.damping * omega + Self::MAX_ACCEL * action
    }

    /// Conserved quantity of the undamped, unforced system.
    pub fn energy(state: &[f64]) -> f64 {
        0.5 * state[1] * state[1] + Self::GRAVITY * state[0].cos()
    }

    /// Places the pendulum at an arbitrary state.
    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.state = vec![theta, omega];
        self.steps = 0;
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = rng.random_range(-Self::INIT_ANGLE..=Self::INIT_ANGLE);
        self.set_state(theta, 0.0);
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition, EnvError> {
        check_action(&self.spec, action)?;
        let u = clip_action(action)[0];
        let dt = self.spec.dt;
        let (theta, omega) = (self.state[0], self.state[1]);
        let alpha = self.acceleration(theta, omega, u);
        self.state = vec![theta + dt * omega, omega + dt * alpha];
        self.steps += 1;
        let (theta, omega) = (self.state[0], self.state[1]);
        let reward = theta.cos() - 0.1 * omega * omega;
        let fallen = theta.abs() > Self::FALL_ANGLE;
        finish(&self.spec, self.steps, &self.state, reward, fallen)
    }

    fn state(&self) -> &[f64] {
        &self.state
    }

    fn expert(&self, state: &[f64]) -> ActionVector {
        Self::expert_action(state)
    }

    fn geometry(&self) -> Vec<Shape> {
        let theta = self.state[0];
        let (x, y) = (theta.sin(), theta.cos());
        vec![
            Shape::Segment {
                x0: 0.0,
                y0: 0.0,
                x1: x,
                y1: y,
                role: "rod".into(),
            },
            Shape::Circle {
                x,
                y,
                r: 0.08,
                role: "bob".into(),
            },
        ]
    }
}

/// Planar six-link arm with acceleration-commanded joints.
#[derive(Debug, Clone)]
pub struct MultiArm {
    spec: EnvSpec,
    state: Vec<f64>,
    steps: usize,
}

impl MultiArm {
    pub const LINKS: usize = 6;
    pub const LINK_LENGTH: f64 = 0.2;
    /// Joint acceleration at full action, rad/s^2.
    pub const MAX_ACCEL: f64 = 10.0;
    pub const DAMPING: f64 = 2.0;

    pub fn new() -> Self {
        Self {
            spec: spec("MultiArm", 2 * Self::LINKS + 2, Self::LINKS),
            state: vec![0.0; 2 * Self::LINKS + 2],
            steps: 0,
        }
    }

    /// Tip position for joint angles `q` (relative angles, base at the origin).
    pub fn tip(q: &[f64]) -> (f64, f64) {
        let (mut x, mut y, mut angle) = (0.0, 0.0, 0.0);
        for qi in q {
            angle += qi;
            x += Self::LINK_LENGTH * angle.cos();
            y += Self::LINK_LENGTH * angle.sin();
        }
        (x, y)
    }

    /// Jacobian-transpose reaching with a velocity loop on each joint.
    pub fn expert_action(state: &[f64]) -> ActionVector {
        let n = Self::LINKS;
        let (q, qd) = (&state[..n], &state[n..2 * n]);
        let (tx, ty) = (state[2 * n], state[2 * n + 1]);
        let (x, y) = Self::tip(q);
        let (ex, ey) = (tx - x, ty - y);
        // Joint j moves every link from j onward; its column of the Jacobian is
        // the perpendicular of (tip - joint_j).
        let mut joints = Vec::with_capacity(n);
        let (mut jx, mut jy, mut angle) = (0.0, 0.0, 0.0);
        for qi in q {
            joints.push((jx, jy));
            angle += qi;
            jx += Self::LINK_LENGTH * angle.cos();
            jy += Self::LINK_LENGTH * angle.sin();
        }
        (0..n)
            .map(|j| {
                let (px, py) = joints[j];
                let (dx, dy) = (x - px, y - py);
                let grad = -dy * ex + dx * ey;
                let target_rate = (6.0 * grad).clamp(-2.0, 2.0);
                let accel = 8.0 * (target_rate - qd[j]) + Self::DAMPING * qd[j];
                (accel / Self::MAX_ACCEL).clamp(-1.0, 1.0)
            })
            .collect()
    }
}

impl Default for MultiArm {
    fn default() -> Self {
        Self::new()
    }
}

impl Environment for MultiArm {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::LINKS;
        let mut state = vec![0.0; 2 * n + 2];
        for qi in state.iter_mut().take(n) {
            *qi = rng.random_range(-0.5..0.5);
        }
        let radius = rng.random_range(0.4..1.0);
        let phi = rng.random_range(-PI / 2.0..PI / 2.0);
        state[2 * n] = radius * phi.cos();
        state[2 * n + 1] = radius * phi.sin();
        self.state = state;
        self.steps = 0;
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition, EnvError> {
        check_action(&self.spec, action)?;
        let a = clip_action(action);
        let n = Self::LINKS;
        let dt = self.spec.dt;
        for j in 0..n {
            let (q, qd) = (self.state[j], self.state[n + j]);
            self.state[j] = q + dt * qd;
            self.state[n + j] = qd + dt * (Self::MAX_ACCEL * a[j] - Self::DAMPING * qd);
        }
        self.steps += 1;
        let (x, y) = Self::tip(&self.state[..n]);
        let (tx, ty) = (self.state[2 * n], self.state[2 * n + 1]);
        let reward = -((x - tx).powi(2) + (y - ty).powi(2)).sqrt();
        finish(&self.spec, self.steps, &self.state, reward, false)
    }

    fn state(&self) -> &[f64] {
        &self.state
    }

    fn expert(&self, state: &[f64]) -> ActionVector {
        Self::expert_action(state)
    }

    fn geometry(&self) -> Vec<Shape> {
        let n = Self::LINKS;
        let mut shapes = Vec::with_capacity(n + 1);
        let (mut x, mut y, mut angle) = (0.0, 0.0, 0.0);
        for qi in &self.state[..n] {
            angle += qi;
            let (nx, ny) = (
                x + Self::LINK_LENGTH * angle.cos(),
                y + Self::LINK_LENGTH * angle.sin(),
            );
            shapes.push(Shape::Segment {
                x0: x,
                y0: y,
                x1: nx,
                y1: ny,
                role: "link".into(),
            });
            (x, y) = (nx, ny);
        }
        shapes.push(Shape::Circle {
            x: self.state[2 * n],
            y: self.state[2 * n + 1],
            r: 0.04,
            role: "target".into(),
        });
        shapes
    }
}

/// Random action disturbance applied per dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSpec {
    /// Per-step, per-dimension trigger probability.
    pub probability: f64,
    /// Half-width of the uniform disturbance, in normalised action units.
    pub magnitude: f64,
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self {
            probability: 0.0,
            magnitude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(EnvError::Disturbance(format!(
                "probability {} outside [0, 1]",
                self.probability
            )));
        }
        if !(self.magnitude >= 0.0 && self.magnitude.is_finite()) {
            return Err(EnvError::Disturbance(format!(
                "magnitude {} must be nonnegative",
                self.magnitude
            )));
        }
        Ok(())
    }
}

/// Adds `U(-magnitude, magnitude)` to each dimension with the given
/// probability, then clips to the action bounds.
pub fn apply_disturbance<R: Rng + ?Sized>(
    action: &[f64],
    spec: &DisturbanceSpec,
    rng: &mut R,
) -> ActionVector {
    action
        .iter()
        .map(|&a| {
            let hit = rng.random::<f64>() < spec.probability;
            if hit {
                (a + rng.random_range(-spec.magnitude..=spec.magnitude)).clamp(-1.0, 1.0)
            } else {
                a
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert_eq!("point_push".parse::<Task>().unwrap(), Task::PointPush);
        assert!(matches!("Hopper".parse::<Task>(), Err(EnvError::UnknownTask(_))));
    }

    #[test]
    fn reset_is_seeded() {
        for t in Task::ALL {
            let mut a = t.make();
            let mut b = t.make();
            assert_eq!(a.reset(3), b.reset(3));
            assert_ne!(a.reset(3), b.reset(4));
        }
    }

    #[test]
    fn pendulum_rests_upright() {
        let mut env = Pendulum::new();
        env.set_state(0.0, 0.0);
        let t = env.step(&[0.0]).unwrap();
        assert!(t.state[0].abs() < 1e-6 && t.state[1].abs() < 1e-6);
        assert_eq!(Pendulum::expert_action(&[0.0, 0.0]), vec![0.0]);
    }

    #[test]
    fn pendulum_initial_angle_range() {
        let mut env = Pendulum::new();
        for seed in 0..1000 {
            let s = env.reset(seed);
            assert!(s[0].abs() <= Pendulum::INIT_ANGLE && s[1] == 0.0);
        }
    }

    #[test]
    fn pendulum_terminates_when_fallen() {
        let mut env = Pendulum::new();
        env.set_state(0.99, 2.0);
        let t = env.step(&[0.0]).unwrap();
        assert!(t.terminated && !t.truncated);
    }

    #[test]
    fn truncates_at_horizon() {
        let mut env = PointPush::new();
        env.reset(0);
        let mut last = None;
        for _ in 0..DEFAULT_HORIZON {
            last = Some(env.step(&[0.0, 0.0]).unwrap());
        }
        assert!(last.unwrap().truncated);
    }

    #[test]
    fn wrong_action_width_is_an_error() {
        let mut env = MultiArm::new();
        env.reset(0);
        assert!(matches!(
            env.step(&[0.0; 2]),
            Err(EnvError::ActionDimension { expected: 6, got: 2 })
        ));
    }

    #[test]
    fn nan_action_aborts() {
        let mut env = Pendulum::new();
        env.reset(0);
        assert!(matches!(
            env.step(&[f64::NAN]),
            Err(EnvError::NonFinite { step: 1 })
        ));
    }

    #[test]
    fn pusher_moves_object_on_contact() {
        let mut env = PointPush::new();
        env.set_positions([-0.5, 0.0, -0.42, 0.0]);
        let t = env.step(&[1.0, 0.0]).unwrap();
        assert!(t.state[2] > -0.42);
        let gap = (t.state[0].powi(2) + t.state[1].powi(2)).sqrt();
        assert!((gap - PointPush::CONTACT).abs() < 1e-12);
    }

    #[test]
    fn push_reward_tracks_goal_distance() {
        let mut env = PointPush::new();
        env.set_positions([-0.5, 0.0, -0.42, 0.0]);
        let r0 = env.step(&[1.0, 0.0]).unwrap().reward;
        let r1 = env.step(&[1.0, 0.0]).unwrap().reward;
        assert!(r1 > r0);
    }

    #[test]
    fn expert_pushes_along_goal_line_when_aligned() {
        // Pusher directly behind the object, object on the x-axis.
        let a = PointPush::expert_action(&[0.09, 0.0, -0.5, 0.0]);
        assert!(a[0] > 0.5);
        assert!(a[1].abs() < 1e-9);
    }

    #[test]
    fn disturbance_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = vec![0.3, -0.2, 0.9];
        assert_eq!(apply_disturbance(&a, &DisturbanceSpec::none(), &mut rng), a);
        let zero = DisturbanceSpec {
            probability: 1.0,
            magnitude: 0.0,
        };
        assert_eq!(apply_disturbance(&a, &zero, &mut rng), a);
        let full = DisturbanceSpec {
            probability: 1.0,
            magnitude: 5.0,
        };
        assert!(apply_disturbance(&a, &full, &mut rng)
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
        assert!(DisturbanceSpec {
            probability: 1.5,
            magnitude: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn arm_tip_at_rest_is_fully_extended() {
        let (x, y) = MultiArm::tip(&[0.0; 6]);
        assert!((x - 1.2).abs() < 1e-12 && y.abs() < 1e-12);
    }
}
