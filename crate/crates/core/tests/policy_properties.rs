use diprl_core::envs::{Action, ActionSpace};
use diprl_core::extract::discretize;
use diprl_core::relaxed_policy::{
    ActionDistribution, RelaxedPolicy, SurrogateBatch, SurrogateSettings, DEPTH_LOGITS, HEAD_LOGITS,
    PREDICATE_BIAS, PREDICATE_WEIGHTS,
};
use diprl_core::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Random discrete policy with every parameter drawn from `N(0, σ²)`.
fn random_policy(rng: &mut ChaCha8Rng, sigma: f64) -> RelaxedPolicy {
    let f = rng.random_range(1..=6);
    let d = rng.random_range(1..=6);
    let n = rng.random_range(2..=5);
    let mut p = RelaxedPolicy::new(f, ActionSpace::Discrete(n), d, rng).unwrap();
    for block in p.params_mut().data_mut() {
        for x in block.iter_mut() {
            *x = sigma * normal(rng);
        }
    }
    if rng.random_bool(0.3) {
        let scale = (0..f).map(|_| rng.random_range(0.05..20.0)).collect();
        p = p.with_input_scale(scale).unwrap();
    }
    p
}

fn features(rng: &mut ChaCha8Rng, f: usize) -> Vec<f64> {
    (0..f).map(|_| 3.0 * normal(rng)).collect()
}

#[test]
fn action_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..1000 {
        let p = random_policy(&mut rng, 1.0 + (case % 5) as f64 * 3.0);
        let x = features(&mut rng, p.feature_dim());
        let ActionDistribution::Discrete(pi) = p.action_distribution(&x).unwrap() else {
            unreachable!()
        };
        let s: f64 = pi.iter().sum();
        assert!((s - 1.0).abs() <= 1e-9, "case {case}: sum {s}");
        assert!(pi.iter().all(|&q| (0.0..=1.0 + 1e-12).contains(&q)));
    }
}

#[test]
fn gaussian_mixture_weights_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let d = rng.random_range(1..=5);
        let space = ActionSpace::Continuous { dim: 2, low: -1.0, high: 1.0 };
        let mut p = RelaxedPolicy::new(3, space, d, &mut rng).unwrap();
        for block in p.params_mut().data_mut() {
            for x in block.iter_mut() {
                *x = 2.0 * normal(&mut rng);
            }
        }
        let x = features(&mut rng, 3);
        let ActionDistribution::GaussianMixture { weights, .. } = p.action_distribution(&x).unwrap() else {
            unreachable!()
        };
        assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn gates_telescope_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let p = random_policy(&mut rng, 4.0);
        let x = features(&mut rng, p.feature_dim());
        for d in 1..=p.max_depth() {
            let g = p.gate_weights(&x, d).unwrap();
            assert_eq!(g.len(), d);
            let s: f64 = g.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "depth {d}: {s}");
        }
    }
}

#[test]
fn entropy_bounds_and_one_hot_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..500 {
        let p = random_policy(&mut rng, 3.0);
        let a = p.depth_distribution();
        let ln_d = (p.max_depth() as f64).ln();
        assert!(a.entropy >= 0.0 && a.entropy <= ln_d + 1e-12);
        assert!((a.p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!((a.mass_deleted - (1.0 - a.p_max)).abs() < 1e-15);
    }
    let mut p = RelaxedPolicy::new(2, ActionSpace::Discrete(2), 4, &mut rng).unwrap();
    p.params_mut().block_mut(DEPTH_LOGITS).copy_from_slice(&[0.0, 800.0, 0.0, 0.0]);
    let a = p.depth_distribution();
    assert!(a.entropy < 1e-9);
    assert_eq!(a.argmax_depth, 2);
}

/// One-hot depth plus predicates scaled by 10⁶: the relaxed argmax action
/// is the extracted program's action.
#[test]
fn saturated_policy_agrees_with_extracted_program() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut states = 0;
    while states < 1000 {
        let mut p = random_policy(&mut rng, 1.0);
        let d = p.max_depth();
        let star = rng.random_range(0..d);
        let theta = p.params_mut().block_mut(DEPTH_LOGITS);
        theta.fill(0.0);
        theta[star] = 1000.0;
        for id in [PREDICATE_WEIGHTS, PREDICATE_BIAS] {
            for w in p.params_mut().block_mut(id) {
                *w *= 1e6;
            }
        }
        let (program, report) = discretize(&p).unwrap();
        assert_eq!(report.chosen_depth, star + 1);
        for _ in 0..50 {
            let x = features(&mut rng, p.feature_dim());
            let relaxed = p.greedy_action(&x).unwrap();
            assert_eq!(relaxed, program.evaluate(&x).unwrap(), "state {x:?}");
            states += 1;
        }
    }
}

#[test]
fn near_deterministic_sampling_hits_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut p = RelaxedPolicy::new(2, ActionSpace::Discrete(3), 1, &mut rng).unwrap();
    p.params_mut().block_mut(HEAD_LOGITS).copy_from_slice(&[0.0, 12.0, 0.0]);
    let x = [0.3, -0.2];
    let mut draws = ChaCha8Rng::seed_from_u64(99);
    let mut hits = 0;
    for _ in 0..10_000 {
        let (a, lp) = p.sample_action(&x, &mut draws).unwrap();
        assert_eq!(lp.to_bits(), p.log_prob(&x, &a).unwrap().to_bits());
        hits += usize::from(a == Action::Discrete(1));
    }
    assert!(hits as f64 / 10_000.0 > 0.999, "{hits}");
}

#[test]
fn sampling_is_reproducible_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let p = random_policy(&mut rng, 1.0);
    let x = features(&mut rng, p.feature_dim());
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..100).map(|_| p.sample_action(&x, &mut r).unwrap().0).collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
}

/// Empirical action frequencies match `π(a|s)` within 4 standard errors.
#[test]
fn sample_frequencies_match_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for _ in 0..5 {
        let p = random_policy(&mut rng, 1.0);
        let x = features(&mut rng, p.feature_dim());
        let ActionDistribution::Discrete(pi) = p.action_distribution(&x).unwrap() else {
            unreachable!()
        };
        let n = 20_000;
        let mut counts = vec![0usize; pi.len()];
        for _ in 0..n {
            counts[p.sample_action(&x, &mut rng).unwrap().0.discrete().unwrap()] += 1;
        }
        for (c, q) in counts.iter().zip(&pi) {
            let se = (q * (1.0 - q) / n as f64).sqrt().max(1e-4);
            assert!((*c as f64 / n as f64 - q).abs() < 4.0 * se, "{counts:?} vs {pi:?}");
        }
    }
}

fn batch_parts(p: &RelaxedPolicy, rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<Action>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    for _ in 0..n {
        let x = features(rng, p.feature_dim());
        let (a, lp) = p.sample_action(&x, rng).unwrap();
        xs.extend(x);
        actions.push(a);
        old.push(lp);
    }
    (xs, actions, old)
}

#[test]
fn zero_advantage_without_penalty_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let p = random_policy(&mut rng, 1.0);
    let (xs, actions, old) = batch_parts(&p, &mut rng, 6);
    let adv = vec![0.0; 6];
    let idx: Vec<usize> = (0..6).collect();
    let batch = SurrogateBatch {
        features: &xs,
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        indices: &idx,
    };
    let settings = SurrogateSettings {
        alpha: 0.0,
        target_entropy: 0.3,
        clip: 0.2,
    };
    let out = p.grad_surrogate(&batch, &settings, Execution::Sequential).unwrap();
    assert!(out.grads.flatten().iter().all(|&g| g == 0.0));
}

#[test]
fn entropy_penalty_step_lowers_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut p = RelaxedPolicy::new(3, ActionSpace::Discrete(2), 6, &mut rng).unwrap();
    p.params_mut()
        .block_mut(DEPTH_LOGITS)
        .copy_from_slice(&[0.3, -0.2, 0.1, 0.0, 0.4, -0.1]);
    let before = p.depth_distribution().entropy;
    let (xs, actions, old) = batch_parts(&p, &mut rng, 4);
    let adv = vec![0.0; 4];
    let idx: Vec<usize> = (0..4).collect();
    let batch = SurrogateBatch {
        features: &xs,
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        indices: &idx,
    };
    let settings = SurrogateSettings {
        alpha: 0.5,
        target_entropy: 0.1 * 6f64.ln(),
        clip: 0.2,
    };
    assert!(before > settings.target_entropy);
    let out = p.grad_surrogate(&batch, &settings, Execution::Sequential).unwrap();
    let flat: Vec<f64> = p
        .params()
        .flatten()
        .iter()
        .zip(out.grads.flatten())
        .map(|(w, g)| w - 1e-2 * g)
        .collect();
    p.params_mut().unflatten(&flat).unwrap();
    assert!(p.depth_distribution().entropy < before);
}

#[test]
fn sequential_and_parallel_gradients_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let p = random_policy(&mut rng, 1.0);
    let (xs, actions, old) = batch_parts(&p, &mut rng, 64);
    let adv: Vec<f64> = (0..64).map(|_| normal(&mut rng)).collect();
    let idx: Vec<usize> = (0..64).rev().collect();
    let batch = SurrogateBatch {
        features: &xs,
        actions: &actions,
        old_log_probs: &old,
        advantages: &adv,
        indices: &idx,
    };
    let settings = SurrogateSettings {
        alpha: 0.01,
        target_entropy: 0.2,
        clip: 0.2,
    };
    let a = p.grad_surrogate(&batch, &settings, Execution::Sequential).unwrap();
    let b = p.grad_surrogate(&batch, &settings, Execution::Parallel).unwrap();
    assert_eq!(a.grads, b.grads);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
}

#[test]
fn input_scale_is_folded_into_extracted_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let p = RelaxedPolicy::new(2, ActionSpace::Discrete(3), 3, &mut rng)
        .unwrap()
        .with_input_scale(vec![2.0, 50.0])
        .unwrap();
    let raw = p.params().block(PREDICATE_WEIGHTS).to_vec();
    let pred = p.predicate(1);
    assert_eq!(pred.weights, vec![raw[2] * 2.0, raw[3] * 50.0]);
    let x = [0.7, -0.01];
    let phi = p.predicate_values(&x).unwrap();
    assert!((phi[1] - pred.value(&x)).abs() < 1e-15);
    assert!(p.clone().with_input_scale(vec![1.0, -1.0]).is_err());
    assert!(p.with_input_scale(vec![1.0]).is_err());
}
