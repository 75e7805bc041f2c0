//! Central finite-difference checks of the tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamSet, Tape};
use crate::envs::{Action, ActionSpace};
use crate::error::Result;
use crate::exec::Execution;
use crate::relaxed_policy::{RelaxedPolicy, SurrogateBatch, SurrogateSettings};
use crate::trainer::critic::Critic;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding compare by absolute error instead: at a tolerance of `1e-4`
/// this allows `1e-8` of absolute error.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Largest relative error between `grads` and central differences of `f`
/// over every coordinate of `params`, plus the number of coordinates.
fn compare<F>(params: &mut ParamSet, grads: &Gradients, mut f: F) -> Result<(f64, usize)>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for b in 0..params.blocks().len() {
        let len = params.blocks()[b].data.len();
        for i in 0..len {
            let x0 = params.data_mut().nth(b).expect("block")[i];
            params.data_mut().nth(b).expect("block")[i] = x0 + FD_STEP;
            let up = f(params)?;
            params.data_mut().nth(b).expect("block")[i] = x0 - FD_STEP;
            let down = f(params)?;
            params.data_mut().nth(b).expect("block")[i] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grads.blocks[b][i], numeric));
            count += 1;
        }
    }
    Ok((worst, count))
}

fn random_policy(rng: &mut ChaCha8Rng) -> Result<RelaxedPolicy> {
    let f = rng.random_range(1..=5);
    let d = rng.random_range(1..=5);
    let space = if rng.random_bool(0.5) {
        ActionSpace::Discrete(rng.random_range(2..=4))
    } else {
        ActionSpace::Continuous {
            dim: rng.random_range(1..=2),
            low: -1.0,
            high: 1.0,
        }
    };
    let mut p = RelaxedPolicy::new(f, space, d, rng)?;
    if rng.random_bool(0.3) {
        let scale = (0..f).map(|_| rng.random_range(0.1..10.0)).collect();
        p = p.with_input_scale(scale)?;
    }
    for block in p.params_mut().data_mut() {
        for x in block.iter_mut() {
            *x = normal(rng);
        }
    }
    if d > 1 && rng.random_bool(0.2) {
        let fd = rng.random_range(1..=d);
        p.freeze_depth(fd)?;
    }
    Ok(p)
}

/// Raw features in the units the input scale expects, so the scaled
/// values stay of order one.
fn random_features(rng: &mut ChaCha8Rng, scale: &[f64]) -> Vec<f64> {
    scale.iter().map(|s| 2.0 * normal(rng) / s).collect()
}

fn random_action(rng: &mut ChaCha8Rng, space: &ActionSpace) -> Action {
    match *space {
        ActionSpace::Discrete(n) => Action::Discrete(rng.random_range(0..n)),
        ActionSpace::Continuous { dim, .. } => Action::Continuous((0..dim).map(|_| 1.5 * normal(rng)).collect()),
    }
}

/// Gradient of `ln π(a|s)` with respect to every policy parameter.
pub fn check_log_prob(seed: u64, cases: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut coords) = (0.0f64, 0);
    for _ in 0..cases {
        let mut policy = random_policy(&mut rng)?;
        let x = random_features(&mut rng, &policy.input_scale());
        let a = random_action(&mut rng, policy.action_space());
        let mut tape = Tape::new();
        let shared = policy.record_shared(&mut tape)?;
        let lp = policy.tape_log_prob(&mut tape, &shared, &x, &a)?;
        let mut grads = policy.params().zeros_like();
        tape.backward(lp)?.accumulate_into(&mut grads);
        let template = policy.clone();
        let (w, n) = compare(policy.params_mut(), &grads, |ps| {
            let mut p = template.clone();
            p.params_mut().unflatten(&ps.flatten())?;
            p.log_prob(&x, &a)
        })?;
        worst = worst.max(w);
        coords += n;
    }
    Ok(GradCheck {
        name: "log_prob".into(),
        cases,
        coordinates: coords,
        max_rel_error: worst,
    })
}

/// Gradient of the clipped surrogate with the entropy term. Actions are
/// sampled from the policy, as in a real batch, and old log-probabilities
/// are shifted so no ratio sits within `1e-3` of a clip boundary, where
/// the loss has a kink.
pub fn check_surrogate(seed: u64, cases: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut coords) = (0.0f64, 0);
    let clip = 0.2;
    for _ in 0..cases {
        let mut policy = random_policy(&mut rng)?;
        let f = policy.feature_dim();
        let scale = policy.input_scale();
        let n = rng.random_range(1..=8);
        let mut features = Vec::with_capacity(n * f);
        let mut actions = Vec::with_capacity(n);
        let mut old = Vec::with_capacity(n);
        for _ in 0..n {
            let x = random_features(&mut rng, &scale);
            let (a, lp) = policy.sample_action(&x, &mut rng)?;
            let shift = loop {
                let u: f64 = rng.random_range(-0.5..0.5);
                let r = u.exp();
                if (r - (1.0 - clip)).abs() > 1e-3 && (r - (1.0 + clip)).abs() > 1e-3 {
                    break u;
                }
            };
            old.push(lp - shift);
            features.extend(x);
            actions.push(a);
        }
        let advantages: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
        let indices: Vec<usize> = (0..n).collect();
        let settings = SurrogateSettings {
            alpha: rng.random_range(0.0..1.0),
            target_entropy: rng.random_range(0.0..1.0),
            clip,
        };
        let batch = SurrogateBatch {
            features: &features,
            actions: &actions,
            old_log_probs: &old,
            advantages: &advantages,
            indices: &indices,
        };
        let out = policy.grad_surrogate(&batch, &settings, Execution::Sequential)?;
        let template = policy.clone();
        let (w, c) = compare(policy.params_mut(), &out.grads, |ps| {
            let mut p = template.clone();
            p.params_mut().unflatten(&ps.flatten())?;
            p.surrogate_loss(&batch, &settings)
        })?;
        worst = worst.max(w);
        coords += c;
    }
    Ok(GradCheck {
        name: "surrogate".into(),
        cases,
        coordinates: coords,
        max_rel_error: worst,
    })
}

/// Gradient of the critic's `½ mean (V − target)²`.
pub fn check_critic(seed: u64, cases: usize) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst, mut coords) = (0.0f64, 0);
    for _ in 0..cases {
        let f = rng.random_range(1..=5);
        let hidden = rng.random_range(1..=8);
        let mut critic = Critic::new(f, hidden, &mut rng);
        let mut scale = vec![1.0; f];
        if rng.random_bool(0.3) {
            scale = (0..f).map(|_| rng.random_range(0.1..10.0)).collect();
            critic = critic.with_input_scale(scale.clone())?;
        }
        let n = rng.random_range(1..=6);
        let features: Vec<f64> = (0..n * f).map(|i| normal(&mut rng) / scale[i % f]).collect();
        let targets: Vec<f64> = (0..n).map(|_| 3.0 * normal(&mut rng)).collect();
        let indices: Vec<usize> = (0..n).collect();
        let (grads, _) = critic.grad_value_loss(&features, &targets, &indices, Execution::Sequential)?;
        let template = critic.clone();
        let (w, c) = compare(critic.params_mut(), &grads, |ps| {
            let mut cr = template.clone();
            cr.params_mut().unflatten(&ps.flatten())?;
            let loss = (0..n)
                .map(|i| (cr.value(&features[i * f..(i + 1) * f]) - targets[i]).powi(2))
                .sum::<f64>();
            Ok(0.5 * loss / n as f64)
        })?;
        worst = worst.max(w);
        coords += c;
    }
    Ok(GradCheck {
        name: "critic".into(),
        cases,
        coordinates: coords,
        max_rel_error: worst,
    })
}

/// All three checks with `cases` random configurations each.
pub fn check_all(seed: u64, cases: usize) -> Result<Vec<GradCheck>> {
    Ok(vec![
        check_log_prob(seed, cases)?,
        check_surrogate(seed.wrapping_add(1), cases)?,
        check_critic(seed.wrapping_add(2), cases)?,
    ])
}
