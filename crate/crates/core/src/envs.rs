//! Point-robot task families with disjoint train and out-of-distribution
//! task spaces.
//!
//! All three families share a damped double integrator on the plane:
//!
//! ```text
//! v' = damping * v + accel_scale * clip(a, -1, 1) / mass
//! p' = p + v'
//! ```
//!
//! `point-goal` and `point-vel` only change the reward, `point-mass` changes
//! both the reward and the transition (through `mass`).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    PointGoal,
    PointVel,
    PointMass,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::PointGoal => "point-goal",
            TaskFamily::PointVel => "point-vel",
            TaskFamily::PointMass => "point-mass",
        }
    }

    /// Whether the transition function depends on the task.
    pub fn varies_dynamics(self) -> bool {
        matches!(self, TaskFamily::PointMass)
    }

    pub fn param_dim(self) -> usize {
        match self {
            TaskFamily::PointGoal => 2,
            TaskFamily::PointVel | TaskFamily::PointMass => 1,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-goal" => Ok(TaskFamily::PointGoal),
            "point-vel" => Ok(TaskFamily::PointVel),
            "point-mass" => Ok(TaskFamily::PointMass),
            other => Err(Error::Config(format!("unknown task family `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A sampled task. `params` are in the family's native units:
/// goal `(x, y)` for point-goal, target speed for point-vel, mass scale for point-mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub params: Vec<f64>,
    pub split: Split,
}

/// Half-open intervals `[lo, hi)`.
fn in_union(x: f64, intervals: &[(f64, f64)]) -> bool {
    intervals.iter().any(|&(lo, hi)| x >= lo && x < hi)
}

/// Uniform draw over a union of half-open intervals, weighted by length.
fn sample_union(intervals: &[(f64, f64)], rng: &mut impl Rng) -> f64 {
    let total: f64 = intervals.iter().map(|(lo, hi)| hi - lo).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(lo, hi) in intervals {
        let w = hi - lo;
        if u < w {
            return lo + u;
        }
        u -= w;
    }
    let (lo, hi) = intervals[intervals.len() - 1];
    lo + rng.gen::<f64>() * (hi - lo)
}

const GOAL_TRAIN_RADII: [(f64, f64); 2] = [(0.0, 1.0), (2.5, 3.0)];
const GOAL_TEST_RADIUS: f64 = 1.75;
const SCALAR_TRAIN: [(f64, f64); 2] = [(0.0, 0.5), (3.0, 3.5)];
const SCALAR_TEST: [f64; 5] = [0.75, 1.25, 1.75, 2.25, 2.75];

impl TaskSpec {
    /// Membership in the family's training task space.
    pub fn in_train_space(&self) -> bool {
        match self.family {
            TaskFamily::PointGoal => {
                let r = self.params[0].hypot(self.params[1]);
                in_union(r, &GOAL_TRAIN_RADII)
            }
            TaskFamily::PointVel | TaskFamily::PointMass => in_union(self.params[0], &SCALAR_TRAIN),
        }
    }

    /// Membership in the family's test task space.
    pub fn in_test_space(&self) -> bool {
        match self.family {
            TaskFamily::PointGoal => {
                let r = self.params[0].hypot(self.params[1]);
                (r - GOAL_TEST_RADIUS).abs() < 1e-9
            }
            TaskFamily::PointVel | TaskFamily::PointMass => {
                SCALAR_TEST.iter().any(|&v| (self.params[0] - v).abs() < 1e-12)
            }
        }
    }

    pub fn in_declared_space(&self) -> bool {
        match self.split {
            Split::Train => self.in_train_space(),
            Split::Test => self.in_test_space(),
        }
    }
}

/// Draws `n` tasks from the requested space. Test spaces are finite sets and
/// are enumerated in a fixed order (cycled when `n` exceeds their size), so
/// the seed only affects training draws.
pub fn sample_tasks(family: TaskFamily, split: Split, n: usize, rng: &mut impl Rng) -> Vec<TaskSpec> {
    let make = |params: Vec<f64>| TaskSpec { family, params, split };
    match (family, split) {
        (TaskFamily::PointGoal, Split::Train) => (0..n)
            .map(|_| {
                let r = sample_union(&GOAL_TRAIN_RADII, rng);
                let theta = rng.gen::<f64>() * 2.0 * PI;
                make(vec![r * theta.cos(), r * theta.sin()])
            })
            .collect(),
        (TaskFamily::PointGoal, Split::Test) => (0..n)
            .map(|k| {
                let theta = (k % 4) as f64 * PI / 2.0;
                make(vec![GOAL_TEST_RADIUS * theta.cos(), GOAL_TEST_RADIUS * theta.sin()])
            })
            .collect(),
        (_, Split::Train) => (0..n).map(|_| make(vec![sample_union(&SCALAR_TRAIN, rng)])).collect(),
        (_, Split::Test) => (0..n).map(|k| make(vec![SCALAR_TEST[k % SCALAR_TEST.len()]])).collect(),
    }
}

/// Size of the finite test set of a family.
pub fn test_set_size(family: TaskFamily) -> usize {
    match family {
        TaskFamily::PointGoal => 4,
        TaskFamily::PointVel | TaskFamily::PointMass => SCALAR_TEST.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub horizon: usize,
    pub init_noise: f64,
    pub damping: f64,
    pub accel_scale: f64,
    /// Multiplier from point-vel task units to per-step speed.
    pub velocity_scale: f64,
    /// Added to the point-mass scale so the effective mass stays positive.
    pub mass_offset: f64,
    /// Quadratic action cost of the point-mass family.
    pub control_cost: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            horizon: 64,
            init_noise: 0.0,
            damping: 0.8,
            accel_scale: 0.2,
            velocity_scale: 0.25,
            mass_offset: 0.5,
            control_cost: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub t: usize,
}

impl EnvState {
    pub fn observation(&self) -> [f64; STATE_DIM] {
        [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }

    pub fn from_observation(obs: &[f64], t: usize) -> Self {
        Self { position: [obs[0], obs[1]], velocity: [obs[2], obs[3]], t }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// Stateless simulator for every point family; `task` selects reward and dynamics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointEnv {
    pub config: EnvConfig,
}

impl PointEnv {
    pub fn new(config: EnvConfig) -> Self {
        Self { config }
    }

    pub fn horizon(&self) -> usize {
        self.config.horizon
    }

    pub fn effective_mass(&self, task: &TaskSpec) -> f64 {
        match task.family {
            TaskFamily::PointMass => self.config.mass_offset + task.params[0],
            _ => 1.0,
        }
    }

    pub fn reset(&self, _task: &TaskSpec, rng: &mut impl Rng) -> EnvState {
        let k = self.config.init_noise;
        let mut position = [0.0; 2];
        for p in &mut position {
            let u: f64 = rng.gen_range(-1.0..=1.0);
            *p = k * u;
        }
        EnvState { position, velocity: [0.0; 2], t: 0 }
    }

    /// Reward and next observation as pure functions of `(task, s, a)`.
    /// `action` is clipped to `[-1, 1]`.
    pub fn dynamics(&self, task: &TaskSpec, obs: &[f64], action: &[f64]) -> ([f64; STATE_DIM], f64) {
        let c = &self.config;
        let mass = self.effective_mass(task);
        let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        let v = [c.damping * obs[2] + c.accel_scale * a[0] / mass, c.damping * obs[3] + c.accel_scale * a[1] / mass];
        let p = [obs[0] + v[0], obs[1] + v[1]];
        let reward = match task.family {
            TaskFamily::PointGoal => -((p[0] - task.params[0]).abs() + (p[1] - task.params[1]).abs()),
            TaskFamily::PointVel => -(v[0] - c.velocity_scale * task.params[0]).abs(),
            TaskFamily::PointMass => v[0] - c.control_cost * (a[0] * a[0] + a[1] * a[1]),
        };
        ([p[0], p[1], v[0], v[1]], reward)
    }

    pub fn step(&self, task: &TaskSpec, state: &EnvState, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != ACTION_DIM {
            return Err(Error::Input(format!("expected {ACTION_DIM} action components, got {}", action.len())));
        }
        if action.iter().any(|x| !x.is_finite()) {
            return Err(Error::Input("non-finite action".into()));
        }
        if state.t >= self.config.horizon {
            return Err(Error::Input("step called on a finished episode".into()));
        }
        let (obs, reward) = self.dynamics(task, &state.observation(), action);
        let t = state.t + 1;
        Ok(StepOutcome { next: EnvState::from_observation(&obs, t), reward, done: t == self.config.horizon })
    }
}
