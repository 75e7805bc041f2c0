use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::{Action, Environment};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::relaxed_policy::RelaxedPolicy;
use crate::trainer::critic::Critic;
use crate::trainer::evaluate::clip_action;

/// Transitions gathered by all workers, concatenated in worker order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutBatch {
    pub feature_dim: usize,
    /// Row-major `N × F`.
    pub features: Vec<f64>,
    /// Actions as sampled, before clamping to the action box.
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// `V(s_{t+1})`, zero after termination.
    pub next_values: Vec<f64>,
    /// Whether the accumulation in GAE stops after step `t`: episode ends
    /// and the last step of each worker's segment.
    pub cuts: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Indices `t` at which an episode ended.
    pub episode_ends: Vec<usize>,
    /// Training (possibly shaped) returns of episodes completed here.
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn features_of(&self, t: usize) -> &[f64] {
        &self.features[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    fn append(&mut self, other: RolloutBatch) {
        let offset = self.len();
        self.features.extend(other.features);
        self.actions.extend(other.actions);
        self.rewards.extend(other.rewards);
        self.terminated.extend(other.terminated);
        self.truncated.extend(other.truncated);
        self.log_probs.extend(other.log_probs);
        self.values.extend(other.values);
        self.next_values.extend(other.next_values);
        self.cuts.extend(other.cuts);
        self.advantages.extend(other.advantages);
        self.returns.extend(other.returns);
        self.episode_ends.extend(other.episode_ends.into_iter().map(|t| t + offset));
        self.episode_returns.extend(other.episode_returns);
    }

    /// Fills advantages and returns (`Â + V`).
    pub fn compute_gae(&mut self, gamma: f64, lambda: f64) {
        self.advantages = compute_gae(&self.rewards, &self.values, &self.next_values, &self.cuts, gamma, lambda);
        self.returns = self.advantages.iter().zip(&self.values).map(|(a, v)| a + v).collect();
    }
}

/// `Â_t = Σ_l (γλ)^l δ_{t+l}` with `δ_t = r_t + γ V'_t − V_t`, where the
/// sum stops at the first cut.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    cuts: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        if cuts[t] {
            acc = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

/// Rescales to zero mean and unit standard deviation.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    for a in adv.iter_mut() {
        *a = (*a - mean) / (std + 1e-8);
    }
}

/// One environment instance with its own action-sampling stream. Episodes
/// continue across rollouts.
pub struct Worker {
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    obs: Vec<f64>,
    episode_return: f64,
}

impl Worker {
    pub fn new(mut env: Box<dyn Environment>, seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + index);
        let obs = env.reset(rng.random()).features;
        Worker {
            env,
            rng,
            obs,
            episode_return: 0.0,
        }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    fn collect(&mut self, policy: &RelaxedPolicy, critic: &Critic, n: usize) -> Result<RolloutBatch> {
        let f = self.obs.len();
        let space = self.env.action_space();
        let mut b = RolloutBatch {
            feature_dim: f,
            ..Default::default()
        };
        let mut boundary = Vec::with_capacity(n);
        for t in 0..n {
            let (action, lp) = policy.sample_action(&self.obs, &mut self.rng)?;
            let v = critic.value(&self.obs);
            let r = self.env.step(&clip_action(&space, action.clone()))?;
            b.features.extend_from_slice(&self.obs);
            b.actions.push(action);
            b.log_probs.push(lp);
            b.values.push(v);
            b.rewards.push(r.reward);
            b.terminated.push(r.terminated);
            b.truncated.push(r.truncated);
            self.episode_return += r.reward;
            let last = t + 1 == n;
            let next_value = if r.terminated {
                Some(0.0)
            } else if r.truncated || last {
                Some(critic.value(&r.observation.features))
            } else {
                None
            };
            boundary.push(next_value);
            b.cuts.push(r.done() || last);
            if r.done() {
                b.episode_ends.push(t);
                b.episode_returns.push(self.episode_return);
                self.episode_return = 0.0;
                let seed = self.rng.random();
                self.obs = self.env.reset(seed).features;
            } else {
                self.obs = r.observation.features;
            }
        }
        b.next_values = boundary
            .iter()
            .enumerate()
            .map(|(t, nv)| nv.unwrap_or_else(|| b.values[t + 1]))
            .collect();
        Ok(b)
    }
}

/// Builds `num_envs` workers from fresh environments, seeded from `seed`.
pub fn make_workers(
    make: impl Fn() -> Result<Box<dyn Environment>>,
    num_envs: usize,
    seed: u64,
) -> Result<Vec<Worker>> {
    (0..num_envs)
        .map(|w| Ok(Worker::new(make()?, seed, w as u64)))
        .collect()
}

/// Gathers exactly `n_steps` transitions; worker `w` contributes
/// `n_steps / W` plus one if `w < n_steps mod W`.
pub fn collect_rollouts(
    policy: &RelaxedPolicy,
    critic: &Critic,
    workers: &mut [Worker],
    n_steps: usize,
    exec: Execution,
) -> Result<RolloutBatch> {
    let w = workers.len();
    if w == 0 || n_steps < w {
        return Err(Error::contract("need at least one step per worker"));
    }
    for wk in workers.iter() {
        if wk.obs.len() != policy.feature_dim() {
            return Err(Error::Dimension {
                expected: policy.feature_dim(),
                got: wk.obs.len(),
            });
        }
    }
    let mut tasks: Vec<(usize, &mut Worker)> = workers
        .iter_mut()
        .enumerate()
        .map(|(i, wk)| (n_steps / w + usize::from(i < n_steps % w), wk))
        .collect();
    let parts = exec.map_mut(&mut tasks, |(n, wk)| wk.collect(policy, critic, *n));
    let mut batch = RolloutBatch {
        feature_dim: policy.feature_dim(),
        ..Default::default()
    };
    for p in parts {
        batch.append(p?);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(r: &[f64], v: &[f64], nv: &[f64], cuts: &[bool], g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let mut out = vec![0.0; n];
        for t in 0..n {
            let mut s = 0.0;
            for k in t..n {
                let delta = r[k] + g * nv[k] - v[k];
                s += (g * l).powi((k - t) as i32) * delta;
                if cuts[k] {
                    break;
                }
            }
            out[t] = s;
        }
        out
    }

    fn random_batch(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let nv = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut cuts: Vec<bool> = (0..n).map(|_| rng.random_bool(0.2)).collect();
        cuts[n - 1] = true;
        (r, v, nv, cuts)
    }

    #[test]
    fn gae_matches_double_loop() {
        for seed in 0..50 {
            let (r, v, nv, cuts) = random_batch(seed, 20);
            let a = compute_gae(&r, &v, &nv, &cuts, 0.99, 0.95);
            let b = brute_force(&r, &v, &nv, &cuts, 0.99, 0.95);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gae_limits() {
        let (r, v, nv, cuts) = random_batch(7, 20);
        let a0 = compute_gae(&r, &v, &nv, &cuts, 0.9, 0.0);
        for t in 0..20 {
            assert_eq!(a0[t], r[t] + 0.9 * nv[t] - v[t]);
        }
        let g0 = compute_gae(&r, &v, &nv, &cuts, 0.0, 0.95);
        for t in 0..20 {
            assert_eq!(g0[t], r[t] - v[t]);
        }
    }

    #[test]
    fn normalization_moments() {
        let mut a: Vec<f64> = (0..100).map(|i| (i as f64).sin() * 3.0 + 2.0).collect();
        normalize_advantages(&mut a);
        let m = a.iter().sum::<f64>() / 100.0;
        let s = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 100.0).sqrt();
        assert!(m.abs() < 1e-12);
        assert!((s - 1.0).abs() < 1e-6);
    }
}
