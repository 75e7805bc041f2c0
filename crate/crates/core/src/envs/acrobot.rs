//! Acrobot-v1: two-link underactuated pendulum, RK4 integration.

use std::f64::consts::PI;

use rand::Rng;

use super::{reset_rng, Action, ActionSpace, Environment, EpisodeClock, Observation, StepResult};
use crate::error::{Error, Result};

const DT: f64 = 0.2;
const LINK_LENGTH_1: f64 = 1.0;
const LINK_MASS_1: f64 = 1.0;
const LINK_MASS_2: f64 = 1.0;
const LINK_COM_POS_1: f64 = 0.5;
const LINK_COM_POS_2: f64 = 0.5;
const LINK_MOI: f64 = 1.0;
const MAX_VEL_1: f64 = 4.0 * PI;
const MAX_VEL_2: f64 = 9.0 * PI;
const TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];
pub const TIME_LIMIT: usize = 500;

#[derive(Clone, Debug, Default)]
pub struct Acrobot {
    /// θ1, θ2, θ̇1, θ̇2
    state: [f64; 4],
    clock: EpisodeClock,
}

fn derivs(s: [f64; 4], torque: f64) -> [f64; 4] {
    let (m1, m2, l1) = (LINK_MASS_1, LINK_MASS_2, LINK_LENGTH_1);
    let (lc1, lc2) = (LINK_COM_POS_1, LINK_COM_POS_2);
    let (i1, i2) = (LINK_MOI, LINK_MOI);
    let g = 9.8;
    let [theta1, theta2, dtheta1, dtheta2] = s;
    let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * theta2.cos()) + i1 + i2;
    let d2 = m2 * (lc2 * lc2 + l1 * lc2 * theta2.cos()) + i2;
    let phi2 = m2 * lc2 * g * (theta1 + theta2 - PI / 2.0).cos();
    let phi1 = -m2 * l1 * lc2 * dtheta2 * dtheta2 * theta2.sin()
        - 2.0 * m2 * l1 * lc2 * dtheta2 * dtheta1 * theta2.sin()
        + (m1 * lc1 + m2 * l1) * g * (theta1 - PI / 2.0).cos()
        + phi2;
    let ddtheta2 = (torque + d2 / d1 * phi1
        - m2 * l1 * lc2 * dtheta1 * dtheta1 * theta2.sin()
        - phi2)
        / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
    let ddtheta1 = -(d2 * ddtheta2 + phi1) / d1;
    [dtheta1, dtheta2, ddtheta1, ddtheta2]
}

fn rk4(y0: [f64; 4], torque: f64, dt: f64) -> [f64; 4] {
    let axpy = |y: [f64; 4], k: [f64; 4], h: f64| std::array::from_fn(|i| y[i] + h * k[i]);
    let k1 = derivs(y0, torque);
    let k2 = derivs(axpy(y0, k1, dt / 2.0), torque);
    let k3 = derivs(axpy(y0, k2, dt / 2.0), torque);
    let k4 = derivs(axpy(y0, k3, dt), torque);
    std::array::from_fn(|i| y0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

fn wrap(mut x: f64, lo: f64, hi: f64) -> f64 {
    let diff = hi - lo;
    while x > hi {
        x -= diff;
    }
    while x < lo {
        x += diff;
    }
    x
}

impl Acrobot {
    pub fn new() -> Self {
        Self::default()
    }

    fn observe(&self) -> Observation {
        let [t1, t2, d1, d2] = self.state;
        Observation::new(vec![t1.cos(), t1.sin(), t2.cos(), t2.sin(), d1, d2])
    }

    fn is_terminal(&self) -> bool {
        let [t1, t2, _, _] = self.state;
        -t1.cos() - (t2 + t1).cos() > 1.0
    }
}

impl Environment for Acrobot {
    fn name(&self) -> &'static str {
        "acrobot"
    }

    fn feature_dim(&self) -> usize {
        6
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(3)
    }

    fn time_limit(&self) -> usize {
        TIME_LIMIT
    }

    fn feature_labels(&self) -> Vec<String> {
        [
            "cos(theta1)",
            "sin(theta1)",
            "cos(theta2)",
            "sin(theta2)",
            "theta1 velocity",
            "theta2 velocity",
        ]
        .map(String::from)
        .to_vec()
    }

    fn action_names(&self) -> Vec<String> {
        vec!["TorqueNeg".into(), "TorqueZero".into(), "TorquePos".into()]
    }

    fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = reset_rng(seed);
        for s in &mut self.state {
            *s = rng.random_range(-0.1..0.1);
        }
        self.clock.reset();
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        self.clock.begin_step(self.name())?;
        let torque = match action {
            Action::Discrete(a) if *a < 3 => TORQUES[*a],
            other => return Err(Error::contract(format!("acrobot: invalid action {other:?}"))),
        };
        let mut ns = rk4(self.state, torque, DT);
        ns[0] = wrap(ns[0], -PI, PI);
        ns[1] = wrap(ns[1], -PI, PI);
        ns[2] = ns[2].clamp(-MAX_VEL_1, MAX_VEL_1);
        ns[3] = ns[3].clamp(-MAX_VEL_2, MAX_VEL_2);
        self.state = ns;
        let terminated = self.is_terminal();
        let truncated = self.clock.finish_step(terminated, TIME_LIMIT);
        Ok(StepResult {
            observation: self.observe(),
            reward: if terminated { 0.0 } else { -1.0 },
            terminated,
            truncated,
        })
    }

    fn evaluation_copy(&self) -> Box<dyn Environment> {
        Box::new(Acrobot::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hanging_at_rest_is_an_equilibrium() {
        let next = rk4([0.0; 4], 0.0, DT);
        assert!(next.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn observation_is_trigonometric_encoding() {
        let mut env = Acrobot::new();
        let o = env.reset(3);
        let f = &o.features;
        assert!((f[0] * f[0] + f[1] * f[1] - 1.0).abs() < 1e-12);
        assert!((f[2] * f[2] + f[3] * f[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_into_range() {
        assert!((wrap(3.5, -PI, PI) - (3.5 - 2.0 * PI)).abs() < 1e-15);
        assert!((wrap(-4.0, -PI, PI) - (-4.0 + 2.0 * PI)).abs() < 1e-15);
        assert_eq!(wrap(1.0, -PI, PI), 1.0);
    }

    #[test]
    fn pumping_torque_eventually_reaches_goal() {
        // Torque in the direction of the second joint's velocity pumps energy.
        let mut env = Acrobot::new();
        env.reset(0);
        let mut a = 2;
        for _ in 0..TIME_LIMIT {
            let r = env.step(&Action::Discrete(a)).unwrap();
            if r.terminated {
                return;
            }
            assert!(!r.truncated);
            a = if r.observation.features[5] > 0.0 { 2 } else { 0 };
        }
        panic!("energy pumping policy never reached the goal height");
    }
}

