//! CartPole-v1: a pole hinged to a cart on a frictionless track.

use rand::Rng;

use super::{reset_rng, Action, ActionSpace, Environment, EpisodeClock, Observation, StepResult};
use crate::error::{Error, Result};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
const TOTAL_MASS: f64 = CART_MASS + POLE_MASS;
/// Half the pole length.
pub const POLE_HALF_LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = POLE_MASS * POLE_HALF_LENGTH;
pub const FORCE_MAG: f64 = 10.0;
pub const TAU: f64 = 0.02;
pub const X_THRESHOLD: f64 = 2.4;
pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;
pub const TIME_LIMIT: usize = 500;

#[derive(Clone, Debug, Default)]
pub struct CartPole {
    state: [f64; 4],
    clock: EpisodeClock,
}

impl CartPole {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets the physical state directly (x, ẋ, θ, θ̇).
    pub fn set_state(&mut self, state: [f64; 4]) {
        self.state = state;
        self.clock.reset();
    }

    pub fn state(&self) -> [f64; 4] {
        self.state
    }

    /// One explicit Euler step of the cart-pole equations of motion.
    pub fn dynamics(state: [f64; 4], push_right: bool) -> [f64; 4] {
        let [x, x_dot, theta, theta_dot] = state;
        let force = if push_right { FORCE_MAG } else { -FORCE_MAG };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (POLE_HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        [
            x + TAU * x_dot,
            x_dot + TAU * x_acc,
            theta + TAU * theta_dot,
            theta_dot + TAU * theta_acc,
        ]
    }
}

impl Environment for CartPole {
    fn name(&self) -> &'static str {
        "cartpole"
    }

    fn feature_dim(&self) -> usize {
        4
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(2)
    }

    fn time_limit(&self) -> usize {
        TIME_LIMIT
    }

    fn feature_labels(&self) -> Vec<String> {
        ["cart position", "cart velocity", "pole angle", "pole angular velocity"]
            .map(String::from)
            .to_vec()
    }

    fn action_names(&self) -> Vec<String> {
        vec!["Left".into(), "Right".into()]
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = reset_rng(seed);
        for s in &mut self.state {
            *s = rng.random_range(-0.05..0.05);
        }
        self.clock.reset();
        Observation::new(self.state.to_vec())
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        self.clock.begin_step(self.name())?;
        let push_right = match action {
            Action::Discrete(0) => false,
            Action::Discrete(1) => true,
            other => return Err(Error::contract(format!("cartpole: invalid action {other:?}"))),
        };
        self.state = Self::dynamics(self.state, push_right);
        let [x, _, theta, _] = self.state;
        let terminated = !(-X_THRESHOLD..=X_THRESHOLD).contains(&x)
            || !(-THETA_THRESHOLD..=THETA_THRESHOLD).contains(&theta);
        let truncated = self.clock.finish_step(terminated, TIME_LIMIT);
        Ok(StepResult {
            observation: Observation::new(self.state.to_vec()),
            reward: 1.0,
            terminated,
            truncated,
        })
    }

    fn evaluation_copy(&self) -> Box<dyn Environment> {
        Box::new(CartPole::new())
    }
}
