//! MountainCar-v0 with optional distance-based reward shaping.

use rand::Rng;

use super::{reset_rng, Action, ActionSpace, Environment, EpisodeClock, Observation, StepResult};
use crate::error::{Error, Result};

pub const MIN_POSITION: f64 = -1.2;
pub const MAX_POSITION: f64 = 0.6;
pub const MAX_SPEED: f64 = 0.07;
pub const GOAL_POSITION: f64 = 0.5;
pub const GOAL_VELOCITY: f64 = 0.0;
pub const FORCE: f64 = 0.001;
pub const GRAVITY: f64 = 0.0025;
pub const TIME_LIMIT: usize = 200;
/// Reward per unit decrease of `|position - goal|`.
pub const DEFAULT_SHAPING: f64 = 100.0;

#[derive(Clone, Debug, Default)]
pub struct MountainCar {
    position: f64,
    velocity: f64,
    shaping: Option<f64>,
    clock: EpisodeClock,
}

impl MountainCar {
    pub fn new(shaping: Option<f64>) -> Self {
        MountainCar {
            shaping,
            ..Default::default()
        }
    }

    pub fn set_state(&mut self, position: f64, velocity: f64) {
        self.position = position;
        self.velocity = velocity;
        self.clock.reset();
    }

    pub fn shaping(&self) -> Option<f64> {
        self.shaping
    }
}

impl Environment for MountainCar {
    fn name(&self) -> &'static str {
        "mountaincar"
    }

    fn feature_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }

    fn time_limit(&self) -> usize {
        TIME_LIMIT
    }

    fn feature_labels(&self) -> Vec<String> {
        vec!["position".into(), "velocity".into()]
    }

    fn action_names(&self) -> Vec<String> {
        vec!["Left".into(), "Coast".into(), "Right".into()]
    }

    /// Reaching the goal takes 100+ steps; a 0.99 horizon cannot see it.
    fn default_gamma(&self) -> f64 {
        0.999
    }

    fn feature_scale(&self) -> Vec<f64> {
        let half_range = (MAX_POSITION - MIN_POSITION) / 2.0;
        vec![1.0 / half_range, 1.0 / MAX_SPEED]
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = reset_rng(seed);
        self.position = rng.random_range(-0.6..-0.4);
        self.velocity = 0.0;
        self.clock.reset();
        Observation::new(vec![self.position, self.velocity])
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        self.clock.begin_step(self.name())?;
        let push = match action {
            Action::Discrete(a) if *a < 3 => *a as f64 - 1.0,
            other => {
                return Err(Error::contract(format!(
                    "mountaincar: invalid action {other:?}"
                )))
            }
        };
        let prev = self.position;
        self.velocity += push * FORCE + (3.0 * self.position).cos() * -GRAVITY;
        self.velocity = self.velocity.clamp(-MAX_SPEED, MAX_SPEED);
        self.position += self.velocity;
        self.position = self.position.clamp(MIN_POSITION, MAX_POSITION);
        if self.position == MIN_POSITION && self.velocity < 0.0 {
            self.velocity = 0.0;
        }
        let terminated = self.position >= GOAL_POSITION && self.velocity >= GOAL_VELOCITY;
        let mut reward = -1.0;
        if let Some(c) = self.shaping {
            reward += c * ((prev - GOAL_POSITION).abs() - (self.position - GOAL_POSITION).abs());
        }
        let truncated = self.clock.finish_step(terminated, TIME_LIMIT);
        Ok(StepResult {
            observation: Observation::new(vec![self.position, self.velocity]),
            reward,
            terminated,
            truncated,
        })
    }

    fn evaluation_copy(&self) -> Box<dyn Environment> {
        Box::new(MountainCar::new(None))
    }
}
