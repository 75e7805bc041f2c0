//! Deterministic 4×4 grid world used as the exact-evaluation testbed.
//!
//! The agent starts in the top-left cell (state 0) and must reach the
//! bottom-right cell (state 15), which pays +1 and ends the episode. Moves
//! into a wall leave the agent in place.

use super::{Action, ActionSpace, Environment, EpisodeClock, Observation, StepResult};
use crate::error::{Error, Result};
use crate::theory::TabularMdp;

pub const SIDE: usize = 4;
pub const N_STATES: usize = SIDE * SIDE;
pub const START: usize = 0;
pub const GOAL: usize = N_STATES - 1;
pub const GOAL_REWARD: f64 = 1.0;
pub const TIME_LIMIT: usize = 100;

#[derive(Clone, Debug, Default)]
pub struct GridWorld {
    cell: usize,
    step_reward: f64,
    clock: EpisodeClock,
}

impl GridWorld {
    pub fn new(step_reward: f64) -> Self {
        GridWorld {
            cell: START,
            step_reward,
            clock: EpisodeClock::default(),
        }
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    /// Successor cell for action 0=up, 1=down, 2=left, 3=right.
    pub fn successor(cell: usize, action: usize) -> usize {
        let (r, c) = (cell / SIDE, cell % SIDE);
        let (r, c) = match action {
            0 if r > 0 => (r - 1, c),
            1 if r + 1 < SIDE => (r + 1, c),
            2 if c > 0 => (r, c - 1),
            3 if c + 1 < SIDE => (r, c + 1),
            _ => (r, c),
        };
        r * SIDE + c
    }

    pub fn one_hot(cell: usize) -> Observation {
        let mut f = vec![0.0; N_STATES];
        f[cell] = 1.0;
        Observation::new(f)
    }

    fn reward_for(&self, next: usize) -> f64 {
        if next == GOAL {
            GOAL_REWARD
        } else {
            self.step_reward
        }
    }
}

impl Environment for GridWorld {
    fn name(&self) -> &'static str {
        "gridworld4x4"
    }

    fn feature_dim(&self) -> usize {
        N_STATES
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete(4)
    }

    fn time_limit(&self) -> usize {
        TIME_LIMIT
    }

    fn feature_labels(&self) -> Vec<String> {
        (0..N_STATES)
            .map(|s| format!("at cell ({}, {})", s / SIDE, s % SIDE))
            .collect()
    }

    fn action_names(&self) -> Vec<String> {
        ["Up", "Down", "Left", "Right"].map(String::from).to_vec()
    }

    fn reset(&mut self, _seed: u64) -> Observation {
        self.cell = START;
        self.clock.reset();
        Self::one_hot(self.cell)
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        self.clock.begin_step(self.name())?;
        let a = match action {
            Action::Discrete(a) if *a < 4 => *a,
            other => return Err(Error::contract(format!("gridworld: invalid action {other:?}"))),
        };
        let next = Self::successor(self.cell, a);
        let reward = self.reward_for(next);
        self.cell = next;
        let terminated = next == GOAL;
        let truncated = self.clock.finish_step(terminated, TIME_LIMIT);
        Ok(StepResult {
            observation: Self::one_hot(next),
            reward,
            terminated,
            truncated,
        })
    }

    /// The goal becomes an absorbing zero-reward state; the step limit is
    /// not represented (it only matters beyond `γ^100`).
    fn as_tabular(&self, gamma: f64) -> Result<TabularMdp> {
        let (ns, na) = (N_STATES, 4);
        let mut p = vec![0.0; ns * na * ns];
        let mut r = vec![0.0; ns * na * ns];
        for s in 0..ns {
            for a in 0..na {
                let idx = (s * na + a) * ns;
                if s == GOAL {
                    p[idx + GOAL] = 1.0;
                    continue;
                }
                let next = Self::successor(s, a);
                p[idx + next] = 1.0;
                r[idx + next] = self.reward_for(next);
            }
        }
        let mut mu0 = vec![0.0; ns];
        mu0[START] = 1.0;
        TabularMdp::new(ns, na, p, r, gamma, mu0)
    }

    fn evaluation_copy(&self) -> Box<dyn Environment> {
        Box::new(GridWorld::new(self.step_reward))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Environment;

    #[test]
    fn reset_is_one_hot_start() {
        let mut env = GridWorld::new(0.0);
        let o = env.reset(123);
        assert_eq!(o.features.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(o.features.iter().sum::<f64>(), 1.0);
        assert_eq!(o.features[START], 1.0);
    }

    #[test]
    fn wall_bump_stays_in_place() {
        let mut env = GridWorld::new(-0.01);
        env.reset(0);
        let r = env.step(&Action::Discrete(0)).unwrap();
        assert_eq!(env.cell(), START);
        assert_eq!(r.reward, -0.01);
        let r = env.step(&Action::Discrete(2)).unwrap();
        assert_eq!(env.cell(), START);
        assert_eq!(r.reward, -0.01);
    }

    #[test]
    fn shortest_path_reaches_goal() {
        let mut env = GridWorld::new(0.0);
        env.reset(0);
        let mut last = None;
        for a in [1, 1, 1, 3, 3, 3] {
            last = Some(env.step(&Action::Discrete(a)).unwrap());
        }
        let last = last.unwrap();
        assert!(last.terminated);
        assert_eq!(last.reward, 1.0);
    }

    #[test]
    fn tabular_rows_are_one_hot_stochastic() {
        let mdp = GridWorld::new(0.0).as_tabular(0.9).unwrap();
        for s in 0..N_STATES {
            for a in 0..4 {
                let row = mdp.transition_row(s, a);
                assert_eq!(row.iter().sum::<f64>(), 1.0);
                assert_eq!(row.iter().filter(|&&x| x == 1.0).count(), 1);
            }
        }
    }
}
