//! Discretization of a relaxed policy into a single program.

use serde::{Deserialize, Serialize};

use crate::envs::{ActionSpace, Environment};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::program::{Clause, DiscreteProgram, TerminalAction};
use crate::relaxed_policy::RelaxedPolicy;
use crate::trainer::evaluate::{evaluate_program, evaluate_relaxed, EvalMode, EvalStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub chosen_depth: usize,
    pub p_max: f64,
    pub mass_deleted: f64,
    pub entropy: f64,
    pub normalized_entropy: f64,
    /// `1 − e^{−H}`, which sits between `m_T` and `H`.
    pub entropy_bound: f64,
    pub depth_probs: Vec<f64>,
}

impl ExtractionReport {
    pub fn bound_chain_holds(&self, tol: f64) -> bool {
        self.mass_deleted <= self.entropy_bound + tol && self.entropy_bound <= self.entropy + tol
    }
}

fn argmax_smallest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Keeps the most probable depth `d*` (ties to the smallest), copies its
/// `d* − 1` predicates verbatim, and turns heads into constant actions
/// (argmax, ties to the smallest index) or affine means.
pub fn discretize(policy: &RelaxedPolicy) -> Result<(DiscreteProgram, ExtractionReport)> {
    let arch = policy.depth_distribution();
    let d_star = arch.argmax_depth;
    let terminal = |k: usize| -> Result<TerminalAction> {
        Ok(match policy.action_space() {
            ActionSpace::Discrete(_) => TerminalAction::Discrete(argmax_smallest(policy.head_logits(k)?)),
            ActionSpace::Continuous { .. } => {
                let (weights, bias) = policy.head_affine(k)?;
                TerminalAction::Affine { weights, bias }
            }
        })
    };
    let clauses = (0..d_star - 1)
        .map(|k| {
            Ok(Clause {
                predicate: policy.predicate(k),
                action: terminal(k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let program = DiscreteProgram::new(
        policy.feature_dim(),
        policy.action_space().clone(),
        clauses,
        terminal(d_star - 1)?,
    )?;
    let report = ExtractionReport {
        chosen_depth: d_star,
        p_max: arch.p_max,
        mass_deleted: arch.mass_deleted,
        entropy: arch.entropy,
        normalized_entropy: arch.normalized_entropy,
        entropy_bound: -(-arch.entropy).exp_m1(),
        depth_probs: arch.p,
    };
    Ok((program, report))
}

/// Monte-Carlo returns of the sampled relaxed policy and the program on
/// the same episode seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub relaxed: EvalStats,
    pub extracted: EvalStats,
    /// `J_relaxed − J_extracted`.
    pub gap: f64,
    /// Standard error of the gap, treating the two samples as independent.
    pub std_error: f64,
}

pub fn extraction_gap(
    policy: &RelaxedPolicy,
    program: &DiscreteProgram,
    env: &dyn Environment,
    episodes: usize,
    seed: u64,
    exec: Execution,
) -> Result<GapEstimate> {
    if episodes == 0 {
        return Err(Error::contract("extraction gap needs at least one episode"));
    }
    let relaxed = evaluate_relaxed(policy, env, episodes, seed, EvalMode::Sampled, exec)?;
    let extracted = evaluate_program(program, env, episodes, seed, exec)?;
    let se = |s: &EvalStats| s.std / (s.returns.len() as f64).sqrt();
    Ok(GapEstimate {
        gap: relaxed.mean - extracted.mean,
        std_error: (se(&relaxed).powi(2) + se(&extracted).powi(2)).sqrt(),
        relaxed,
        extracted,
    })
}
