//! Episodic environments behind a common interface.
//!
//! Every environment draws its initial state from a ChaCha stream keyed by
//! the seed passed to [`Environment::reset`], so a `(seed, actions)` pair
//! always reproduces the same trajectory.

mod acrobot;
mod cartpole;
pub mod gridworld;
mod mountain_car;
mod point_mass;

pub use acrobot::Acrobot;
pub use cartpole::CartPole;
pub use gridworld::GridWorld;
pub use mountain_car::MountainCar;
pub use point_mass::PointMass1D;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::theory::TabularMdp;

/// Feature vector handed to policies.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub features: Vec<f64>,
}

impl Observation {
    pub fn new(features: Vec<f64>) -> Self {
        Observation { features }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { dim: usize, low: f64, high: f64 },
}

impl ActionSpace {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ActionSpace::Discrete(n) if n < 2 => {
                Err(Error::contract("discrete action space needs at least 2 actions"))
            }
            ActionSpace::Continuous { dim, low, high } if dim == 0 || low >= high => Err(
                Error::contract("continuous action space needs dim > 0 and low < high"),
            ),
            _ => Ok(()),
        }
    }

    pub fn contains(&self, action: &Action) -> bool {
        match (self, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) => a < n,
            (ActionSpace::Continuous { dim, low, high }, Action::Continuous(v)) => {
                v.len() == *dim && v.iter().all(|x| (*low..=*high).contains(x))
            }
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send {
    fn name(&self) -> &'static str;
    fn feature_dim(&self) -> usize;
    fn action_space(&self) -> ActionSpace;
    fn time_limit(&self) -> usize;

    /// Human-readable description of each feature, in order.
    fn feature_labels(&self) -> Vec<String>;

    /// Identifiers used for discrete actions in program text.
    fn action_names(&self) -> Vec<String> {
        match self.action_space() {
            ActionSpace::Discrete(n) => (0..n).map(|i| format!("a{i}")).collect(),
            ActionSpace::Continuous { .. } => Vec::new(),
        }
    }

    /// Discount used when the training config does not set one.
    fn default_gamma(&self) -> f64 {
        0.99
    }

    /// Fixed multipliers that bring each feature to roughly unit range
    /// before it reaches a learned affine map.
    fn feature_scale(&self) -> Vec<f64> {
        vec![1.0; self.feature_dim()]
    }

    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: &Action) -> Result<StepResult>;

    /// Explicit transition/reward tensors, for finite-state environments.
    fn as_tabular(&self, _gamma: f64) -> Result<TabularMdp> {
        Err(Error::Unsupported(format!(
            "{} has a continuous state space",
            self.name()
        )))
    }

    /// Same environment with training-only reward shaping disabled.
    fn evaluation_copy(&self) -> Box<dyn Environment>;
}

pub(crate) fn reset_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tracks the per-episode step budget shared by all environments.
#[derive(Clone, Debug, Default)]
pub(crate) struct EpisodeClock {
    pub steps: usize,
    pub done: bool,
    pub started: bool,
}

impl EpisodeClock {
    pub fn reset(&mut self) {
        self.steps = 0;
        self.done = false;
        self.started = true;
    }

    pub fn begin_step(&self, name: &str) -> Result<()> {
        if !self.started {
            return Err(Error::contract(format!("{name}: step before reset")));
        }
        if self.done {
            return Err(Error::contract(format!(
                "{name}: step after episode end; call reset"
            )));
        }
        Ok(())
    }

    /// Advances the clock and returns the truncation flag.
    pub fn finish_step(&mut self, terminated: bool, limit: usize) -> bool {
        self.steps += 1;
        let truncated = !terminated && self.steps >= limit;
        self.done = terminated || truncated;
        truncated
    }
}

/// Names accepted by [`make_env`].
pub const ENV_NAMES: [&str; 5] = [
    "cartpole",
    "mountaincar",
    "acrobot",
    "gridworld4x4",
    "pointmass1d",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvOptions {
    /// MountainCar shaping coefficient; `None` disables shaping.
    pub mountaincar_shaping: Option<f64>,
    /// Per-step reward in the grid world.
    pub gridworld_step_reward: f64,
}

impl Default for EnvOptions {
    fn default() -> Self {
        EnvOptions {
            mountaincar_shaping: Some(mountain_car::DEFAULT_SHAPING),
            gridworld_step_reward: 0.0,
        }
    }
}

/// Builds an environment from its registry name.
pub fn make_env(name: &str, opts: &EnvOptions) -> Result<Box<dyn Environment>> {
    Ok(match name {
        "cartpole" => Box::new(CartPole::new()),
        "mountaincar" => Box::new(MountainCar::new(opts.mountaincar_shaping)),
        "acrobot" => Box::new(Acrobot::new()),
        "gridworld4x4" => Box::new(GridWorld::new(opts.gridworld_step_reward)),
        "pointmass1d" => Box::new(PointMass1D::new()),
        other => {
            return Err(Error::Config(format!(
                "unknown environment {other:?}; expected one of {ENV_NAMES:?}"
            )))
        }
    })
}

/// Builds the evaluation form of an environment (no shaping).
pub fn make_eval_env(name: &str, opts: &EnvOptions) -> Result<Box<dyn Environment>> {
    Ok(make_env(name, opts)?.evaluation_copy())
}
