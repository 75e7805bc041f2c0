//! One-dimensional point mass pushed toward the origin by a bounded force.

use rand::Rng;

use super::{reset_rng, Action, ActionSpace, Environment, EpisodeClock, Observation, StepResult};
use crate::error::{Error, Result};

const DT: f64 = 0.1;
pub const GOAL: f64 = 0.0;
pub const TIME_LIMIT: usize = 100;

#[derive(Clone, Debug, Default)]
pub struct PointMass1D {
    position: f64,
    velocity: f64,
    clock: EpisodeClock,
}

impl PointMass1D {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Environment for PointMass1D {
    fn name(&self) -> &'static str {
        "pointmass1d"
    }

    fn feature_dim(&self) -> usize {
        2
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous {
            dim: 1,
            low: -1.0,
            high: 1.0,
        }
    }

    fn time_limit(&self) -> usize {
        TIME_LIMIT
    }

    fn feature_labels(&self) -> Vec<String> {
        vec!["position".into(), "velocity".into()]
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = reset_rng(seed);
        self.position = rng.random_range(-1.0..1.0);
        self.velocity = 0.0;
        self.clock.reset();
        Observation::new(vec![self.position, self.velocity])
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        self.clock.begin_step(self.name())?;
        if !self.action_space().contains(action) {
            return Err(Error::contract(format!(
                "pointmass1d: action {action:?} outside [-1, 1]"
            )));
        }
        let Action::Continuous(force) = action else {
            unreachable!()
        };
        self.velocity += force[0] * DT;
        self.position += self.velocity * DT;
        let truncated = self.clock.finish_step(false, TIME_LIMIT);
        Ok(StepResult {
            observation: Observation::new(vec![self.position, self.velocity]),
            reward: -(self.position - GOAL).abs(),
            terminated: false,
            truncated,
        })
    }

    fn evaluation_copy(&self) -> Box<dyn Environment> {
        Box::new(PointMass1D::new())
    }
}
