use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace, Environment};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::program::DiscreteProgram;
use crate::relaxed_policy::RelaxedPolicy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    /// Population standard deviation of the episode returns.
    pub std: f64,
    pub returns: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl EvalStats {
    pub fn from_episodes(episodes: Vec<(f64, usize)>) -> Self {
        let n = episodes.len().max(1) as f64;
        let (returns, lengths): (Vec<f64>, Vec<usize>) = episodes.into_iter().unzip();
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        EvalStats {
            mean,
            std: var.sqrt(),
            returns,
            lengths,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Most probable action of the mixture (mean for Gaussian heads).
    Greedy,
    /// Actions sampled from the mixture.
    Sampled,
}

/// Clamps continuous actions into the box; discrete actions pass through.
pub fn clip_action(space: &ActionSpace, action: Action) -> Action {
    match (space, action) {
        (ActionSpace::Continuous { low, high, .. }, Action::Continuous(v)) => {
            Action::Continuous(v.into_iter().map(|x| x.clamp(*low, *high)).collect())
        }
        (_, a) => a,
    }
}

/// Runs one episode to termination or truncation and returns the
/// undiscounted return and the episode length.
pub fn run_episode<F>(env: &mut dyn Environment, seed: u64, mut act: F) -> Result<(f64, usize)>
where
    F: FnMut(&[f64]) -> Result<Action>,
{
    let space = env.action_space();
    let mut obs = env.reset(seed);
    let (mut ret, mut len) = (0.0, 0usize);
    loop {
        let a = clip_action(&space, act(&obs.features)?);
        let r = env.step(&a)?;
        ret += r.reward;
        len += 1;
        if r.done() {
            return Ok((ret, len));
        }
        obs = r.observation;
    }
}

fn check_compatible(env: &dyn Environment, feature_dim: usize, space: &ActionSpace) -> Result<()> {
    if env.feature_dim() != feature_dim {
        return Err(Error::Dimension {
            expected: env.feature_dim(),
            got: feature_dim,
        });
    }
    let same_kind = matches!(
        (env.action_space(), space),
        (ActionSpace::Discrete(a), ActionSpace::Discrete(b)) if a == *b
    ) || matches!(
        (env.action_space(), space),
        (ActionSpace::Continuous { dim: a, .. }, ActionSpace::Continuous { dim: b, .. }) if a == *b
    );
    if !same_kind {
        return Err(Error::contract(format!(
            "action space {:?} does not match environment {}",
            space,
            env.name()
        )));
    }
    Ok(())
}

fn run_many<F>(env: &dyn Environment, episodes: usize, exec: Execution, f: F) -> Result<EvalStats>
where
    F: Fn(usize, &mut dyn Environment) -> Result<(f64, usize)> + Sync + Send,
{
    if episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let mut envs: Vec<(usize, Box<dyn Environment>)> =
        (0..episodes).map(|i| (i, env.evaluation_copy())).collect();
    let out = exec.map_mut(&mut envs, |(i, e)| f(*i, e.as_mut()));
    Ok(EvalStats::from_episodes(out.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Returns of a program on episodes reset with seeds `seed, seed + 1, …`,
/// without reward shaping.
pub fn evaluate_program(
    program: &DiscreteProgram,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<EvalStats> {
    check_compatible(env, program.feature_dim(), program.action_space())?;
    run_many(env, episodes, exec, |i, e| {
        run_episode(e, seed.wrapping_add(i as u64), |x| program.evaluate(x))
    })
}

/// Returns of the relaxed policy. In sampled mode episode `i` draws its
/// actions from a generator seeded with `seed + i`, so results do not
/// depend on the execution strategy.
pub fn evaluate_relaxed(
    policy: &RelaxedPolicy,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
    mode: EvalMode,
    exec: Execution,
) -> Result<EvalStats> {
    check_compatible(env, policy.feature_dim(), policy.action_space())?;
    run_many(env, episodes, exec, |i, e| {
        let s = seed.wrapping_add(i as u64);
        match mode {
            EvalMode::Greedy => run_episode(e, s, |x| policy.greedy_action(x)),
            EvalMode::Sampled => {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                rng.set_stream(1);
                run_episode(e, s, |x| Ok(policy.sample_action(x, &mut rng)?.0))
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_env, EnvOptions};

    #[test]
    fn stats_are_population_moments() {
        let s = EvalStats::from_episodes(vec![(1.0, 1), (3.0, 2)]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(s.lengths, vec![1, 2]);
    }

    #[test]
    fn reference_program_balances_cartpole() {
        let env = make_env("cartpole", &EnvOptions::default()).unwrap();
        let prog = DiscreteProgram::cartpole_reference();
        let seq = evaluate_program(&prog, env.as_ref(), 5, 3, Execution::Sequential).unwrap();
        let par = evaluate_program(&prog, env.as_ref(), 5, 3, Execution::Parallel).unwrap();
        assert_eq!(seq, par);
        assert!(seq.mean > 100.0, "{}", seq.mean);
    }

    #[test]
    fn sampled_eval_is_reproducible() {
        let env = make_env("pointmass1d", &EnvOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = RelaxedPolicy::new(env.feature_dim(), env.action_space(), 3, &mut rng).unwrap();
        let a = evaluate_relaxed(&p, env.as_ref(), 4, 0, EvalMode::Sampled, Execution::Sequential).unwrap();
        let b = evaluate_relaxed(&p, env.as_ref(), 4, 0, EvalMode::Sampled, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_policy_is_rejected() {
        let env = make_env("cartpole", &EnvOptions::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = RelaxedPolicy::new(3, ActionSpace::Discrete(2), 2, &mut rng).unwrap();
        assert!(matches!(
            evaluate_relaxed(&p, env.as_ref(), 1, 0, EvalMode::Greedy, Execution::Sequential),
            Err(Error::Dimension { .. })
        ));
    }
}
