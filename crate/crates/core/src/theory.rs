//! Exact tabular evaluation of relaxed and extracted policies.
//!
//! Everything here is linear algebra on explicit tensors: `Q^π` from a
//! direct solve of the Bellman system, discounted visitation from the dual
//! system, and the discretization gap `J(π̃) − J(π)` computed independently
//! from exact returns, from the action-level performance-difference sum,
//! from per-depth path values, and from the keep/delete decomposition.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::program::DiscreteProgram;
use crate::relaxed_policy::RelaxedPolicy;

/// States with discounted visitation at or below this are treated as
/// unsupported when forming `κ_min` and `Δ`.
pub const SUPPORT_EPS: f64 = 1e-14;

const ROW_TOL: f64 = 1e-12;

/// Finite MDP with `P[s,a,s']` and `R[s,a,s']` stored flat at
/// `(s·n_actions + a)·n_states + s'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    p: Vec<f64>,
    r: Vec<f64>,
    gamma: f64,
    mu0: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        p: Vec<f64>,
        r: Vec<f64>,
        gamma: f64,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        let size = n_states * n_actions * n_states;
        if n_states == 0 || n_actions == 0 {
            return Err(Error::contract("tabular MDP needs at least one state and action"));
        }
        for (what, len, want) in [("P", p.len(), size), ("R", r.len(), size), ("mu0", mu0.len(), n_states)] {
            if len != want {
                return Err(Error::contract(format!("{what} has {len} entries, expected {want}")));
            }
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::contract(format!("gamma {gamma} outside (0, 1)")));
        }
        for (row_idx, row) in p.chunks(n_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::contract(format!(
                    "P[{}, {}, ·] is not a distribution (sum {sum})",
                    row_idx / n_actions,
                    row_idx % n_actions
                )));
            }
        }
        if r.iter().any(|x| !x.is_finite()) {
            return Err(Error::contract("non-finite reward"));
        }
        let mu_sum: f64 = mu0.iter().sum();
        if mu0.iter().any(|&x| !(x >= 0.0)) || (mu_sum - 1.0).abs() > ROW_TOL {
            return Err(Error::contract(format!("mu0 is not a distribution (sum {mu_sum})")));
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            p,
            r,
            gamma,
            mu0,
        })
    }

    /// Random instance: Dirichlet(1) transition rows, rewards uniform in
    /// `[-1, 1]`, Dirichlet(1) initial distribution.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Result<Self> {
        let mut dirichlet = |n: usize| -> Vec<f64> {
            let xs: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
            let s: f64 = xs.iter().sum();
            let mut out: Vec<f64> = xs.iter().map(|x| x / s).collect();
            // push the rounding residue onto the largest entry
            let resid = 1.0 - out.iter().sum::<f64>();
            let imax = (0..n).max_by(|&a, &b| out[a].total_cmp(&out[b])).unwrap_or(0);
            out[imax] += resid;
            out
        };
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            p.extend(dirichlet(n_states));
        }
        let mu0 = dirichlet(n_states);
        let r = (0..n_states * n_actions * n_states)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        TabularMdp::new(n_states, n_actions, p, r, gamma, mu0)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.mu0
    }

    fn idx(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_states
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let i = self.idx(s, a);
        &self.p[i..i + self.n_states]
    }

    pub fn reward_row(&self, s: usize, a: usize) -> &[f64] {
        let i = self.idx(s, a);
        &self.r[i..i + self.n_states]
    }

    /// `R̄(s,a) = Σ_{s'} P[s,a,s'] R[s,a,s']`.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        self.transition_row(s, a)
            .iter()
            .zip(self.reward_row(s, a))
            .map(|(p, r)| p * r)
            .sum()
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut f = vec![0.0; self.n_states];
        f[s] = 1.0;
        f
    }

    /// `P_π[s, s']` as a dense matrix.
    fn state_transition(&self, pi: &TabularPolicy) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_states, self.n_states, |s, t| {
            (0..self.n_actions)
                .map(|a| pi.prob(s, a) * self.transition_row(s, a)[t])
                .sum()
        })
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states != self.n_states || pi.n_actions != self.n_actions {
            return Err(Error::contract(format!(
                "policy table is {}x{}, MDP is {}x{}",
                pi.n_states, pi.n_actions, self.n_states, self.n_actions
            )));
        }
        Ok(())
    }
}

/// Stochastic policy table `π(a|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Dimension {
                expected: n_states * n_actions,
                got: probs.len(),
            });
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("policy row {s} is not a distribution (sum {sum})")));
            }
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize) -> Result<Vec<f64>>) -> Result<Self> {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            let row = f(s)?;
            if row.len() != n_actions {
                return Err(Error::Dimension {
                    expected: n_actions,
                    got: row.len(),
                });
            }
            probs.extend(row);
        }
        Self::new(n_states, n_actions, probs)
    }

    /// Deterministic policy from a program evaluated on one-hot states.
    pub fn from_program(program: &DiscreteProgram, n_states: usize) -> Result<Self> {
        let ActionSpace::Discrete(na) = *program.action_space() else {
            return Err(Error::Unsupported("tabular policies need discrete actions".into()));
        };
        Self::from_fn(n_states, na, |s| {
            let mut f = vec![0.0; n_states];
            f[s] = 1.0;
            let Action::Discrete(a) = program.evaluate(&f)? else {
                unreachable!("discrete program returned a continuous action")
            };
            let mut row = vec![0.0; na];
            row[a] = 1.0;
            Ok(row)
        })
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// A relaxed policy tabulated per depth: `π(a|s) = Σ_d p_d π_d(a|s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDecomposition {
    pub depth_probs: Vec<f64>,
    pub per_depth: Vec<TabularPolicy>,
}

impl PathDecomposition {
    /// Tabulates `policy` on the one-hot states of `mdp`.
    pub fn tabulate(policy: &RelaxedPolicy, mdp: &TabularMdp) -> Result<Self> {
        if policy.feature_dim() != mdp.n_states() {
            return Err(Error::Dimension {
                expected: mdp.n_states(),
                got: policy.feature_dim(),
            });
        }
        let per_depth = (1..=policy.max_depth())
            .map(|d| {
                TabularPolicy::from_fn(mdp.n_states(), mdp.n_actions(), |s| {
                    policy.depth_action_probs(&mdp.one_hot(s), d)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PathDecomposition {
            depth_probs: policy.depth_distribution().p,
            per_depth,
        })
    }

    pub fn max_depth(&self) -> usize {
        self.per_depth.len()
    }

    /// Mixture policy under `depth_probs`.
    pub fn mixture(&self) -> TabularPolicy {
        self.mixture_with(&self.depth_probs)
    }

    pub fn mixture_with(&self, depth_probs: &[f64]) -> TabularPolicy {
        let first = &self.per_depth[0];
        let (ns, na) = (first.n_states, first.n_actions);
        let mut probs = vec![0.0; ns * na];
        for (pd, pi) in depth_probs.iter().zip(&self.per_depth) {
            for (o, x) in probs.iter_mut().zip(&pi.probs) {
                *o += pd * x;
            }
        }
        TabularPolicy {
            n_states: ns,
            n_actions: na,
            probs,
        }
    }

    /// The extracted soft-gate policy: all mass on `kept_depth`.
    pub fn extracted(&self, kept_depth: usize) -> TabularPolicy {
        self.per_depth[kept_depth - 1].clone()
    }
}

fn solve(a: DMatrix<f64>, b: DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numerical(format!("{what}: singular linear system")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{what}: non-finite solution")));
    }
    Ok(x)
}

/// `V^π` from `(I − γP_π) V = r_π`.
pub fn state_values(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - mdp.state_transition(pi) * mdp.gamma;
    let b = DVector::from_fn(n, |s, _| {
        (0..mdp.n_actions)
            .map(|act| pi.prob(s, act) * mdp.expected_reward(s, act))
            .sum()
    });
    Ok(solve(a, b, "policy evaluation")?.iter().copied().collect())
}

/// `Q^π(s,a) = R̄(s,a) + γ Σ_{s'} P[s,a,s'] V^π(s')`, flat at `s·n_actions + a`.
pub fn exact_q(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    let v = state_values(mdp, pi)?;
    Ok(q_from_values(mdp, &v))
}

fn q_from_values(mdp: &TabularMdp, v: &[f64]) -> Vec<f64> {
    let mut q = Vec::with_capacity(mdp.n_states * mdp.n_actions);
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let next: f64 = mdp.transition_row(s, a).iter().zip(v).map(|(p, x)| p * x).sum();
            q.push(mdp.expected_reward(s, a) + mdp.gamma * next);
        }
    }
    q
}

/// Iterative policy evaluation of `Q^π`, stopping once successive sweeps
/// differ by less than `tol` in sup norm.
pub fn iterative_q(mdp: &TabularMdp, pi: &TabularPolicy, tol: f64, max_sweeps: usize) -> Result<Vec<f64>> {
    mdp.check_policy(pi)?;
    let mut v = vec![0.0; mdp.n_states];
    for _ in 0..max_sweeps {
        let q = q_from_values(mdp, &v);
        let next: Vec<f64> = (0..mdp.n_states)
            .map(|s| (0..mdp.n_actions).map(|a| pi.prob(s, a) * q[s * mdp.n_actions + a]).sum())
            .collect();
        let change = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if change < tol {
            return Ok(q_from_values(mdp, &v));
        }
    }
    Err(Error::Numerical(format!("value iteration did not reach {tol} in {max_sweeps} sweeps")))
}

/// `‖Q − (R̄ + γ P V_π)‖_∞`.
pub fn bellman_residual(mdp: &TabularMdp, pi: &TabularPolicy, q: &[f64]) -> f64 {
    let v = policy_values(pi, q);
    q_from_values(mdp, &v)
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// `V(s) = Σ_a π(a|s) Q(s,a)`.
pub fn policy_values(pi: &TabularPolicy, q: &[f64]) -> Vec<f64> {
    (0..pi.n_states)
        .map(|s| pi.row(s).iter().zip(&q[s * pi.n_actions..]).map(|(p, x)| p * x).sum())
        .collect()
}

/// `J(π) = Σ_s μ₀(s) V^π(s)`.
pub fn expected_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let v = state_values(mdp, pi)?;
    Ok(mdp.mu0.iter().zip(&v).map(|(m, x)| m * x).sum())
}

/// `d^π = (1 − γ) μ₀ᵀ (I − γ P_π)^{-1}`.
pub fn discounted_visitation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<Vec<f64>> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states;
    let a = DMatrix::identity(n, n) - mdp.state_transition(pi).transpose() * mdp.gamma;
    let b = DVector::from_iterator(n, mdp.mu0.iter().map(|m| (1.0 - mdp.gamma) * m));
    Ok(solve(a, b, "visitation")?.iter().copied().collect())
}

/// `Q^π_d(s) = Σ_a π_d(a|s) Q(s,a)` for every depth, indexed `[d-1][s]`.
pub fn path_values(paths: &PathDecomposition, q: &[f64]) -> Vec<Vec<f64>> {
    paths.per_depth.iter().map(|pi| policy_values(pi, q)).collect()
}

/// Entropy-side bound chain for a depth simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimplexBounds {
    pub mass_deleted: f64,
    pub entropy: f64,
    pub one_minus_exp_neg_entropy: f64,
    /// `(1 − e^{−H}) − m_T`
    pub slack_mass: f64,
    /// `H − (1 − e^{−H})`
    pub slack_entropy: f64,
}

impl SimplexBounds {
    pub fn holds(&self, tol: f64) -> bool {
        self.slack_mass >= -tol && self.slack_entropy >= -tol
    }
}

/// Natural-log Shannon entropy, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn verify_bounds(p: &[f64]) -> Result<SimplexBounds> {
    let sum: f64 = p.iter().sum();
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("not a simplex: {p:?}")));
    }
    let p_max = p.iter().copied().fold(0.0, f64::max);
    let m = 1.0 - p_max;
    let h = entropy(p);
    let b = -(-h).exp_m1();
    Ok(SimplexBounds {
        mass_deleted: m,
        entropy: h,
        one_minus_exp_neg_entropy: b,
        slack_mass: b - m,
        slack_entropy: h - b,
    })
}

/// Exact decomposition of the gap between a relaxed policy and its
/// soft-gate extraction at `kept_depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gamma: f64,
    pub depth_probs: Vec<f64>,
    pub kept_depth: usize,
    pub mass_deleted: f64,
    pub entropy: f64,
    pub j_relaxed: f64,
    pub j_extracted: f64,
    /// `J(π̃) − J(π)` from the two exact returns.
    pub gap_exact: f64,
    /// Action-level performance-difference sum under `d^{π̃}`.
    pub gap_action_form: f64,
    /// Path-level sum with retained and deleted depths.
    pub gap_path_form: f64,
    /// `m_T (Q_keep − Q_del)` form.
    pub gap_keep_del: f64,
    /// Largest pairwise disagreement among the exact, action and path forms.
    pub identity_residual: f64,
    /// `|gap_path_form − gap_keep_del|`.
    pub keep_del_residual: f64,
    pub visitation: Vec<f64>,
    pub q_keep: Vec<f64>,
    pub q_del: Vec<f64>,
    /// `min_s (Q_del − Q_keep)` over supported states, present only when
    /// every supported state has a strictly positive gap.
    pub kappa_min: Option<f64>,
    /// `−m_T κ_min / (1 − γ)`.
    pub kappa_bound: Option<f64>,
    /// `kappa_bound − gap_exact`.
    pub slack_kappa: Option<f64>,
    /// `max_s |Q_keep − Q_del|` over supported states.
    pub delta: f64,
    pub delta_mass_bound: f64,
    pub delta_entropy_bound: f64,
    /// `Δ m_T/(1−γ) − |gap|`.
    pub slack_delta_mass: f64,
    /// `Δ H/(1−γ) − Δ m_T/(1−γ)`.
    pub slack_delta_entropy: f64,
    pub simplex: SimplexBounds,
}

impl GapReport {
    /// Errors with every offending quantity if an identity or bound fails.
    pub fn check(&self, identity_tol: f64, keep_del_tol: f64, slack_tol: f64) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.identity_residual <= identity_tol) {
            problems.push(format!(
                "identity residual {:e} (exact {}, action {}, path {})",
                self.identity_residual, self.gap_exact, self.gap_action_form, self.gap_path_form
            ));
        }
        if !(self.keep_del_residual <= keep_del_tol) {
            problems.push(format!(
                "keep/del residual {:e} (path {}, keep/del {})",
                self.keep_del_residual, self.gap_path_form, self.gap_keep_del
            ));
        }
        if !self.simplex.holds(slack_tol) {
            problems.push(format!("entropy chain violated: {:?}", self.simplex));
        }
        if let Some(s) = self.slack_kappa {
            if s < -slack_tol {
                problems.push(format!("kappa bound slack {s:e}"));
            }
        }
        if self.slack_delta_mass < -slack_tol || self.slack_delta_entropy < -slack_tol {
            problems.push(format!(
                "delta bound slacks {:e}, {:e}",
                self.slack_delta_mass, self.slack_delta_entropy
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Verification(problems.join("; ")))
        }
    }
}

/// Computes `J(π̃) − J(π)` for `π = paths.mixture()` and `π̃` the depth
/// `kept_depth` path policy, three independent ways plus the keep/delete
/// rearrangement, and evaluates every bound.
pub fn verify_identity(mdp: &TabularMdp, paths: &PathDecomposition, kept_depth: usize) -> Result<GapReport> {
    let dm = paths.max_depth();
    if kept_depth == 0 || kept_depth > dm {
        return Err(Error::contract(format!("kept depth {kept_depth} outside 1..={dm}")));
    }
    let k = kept_depth - 1;
    let gamma = mdp.gamma;
    let pi = paths.mixture();
    let pi_t = paths.extracted(kept_depth);

    let q = exact_q(mdp, &pi)?;
    let j_relaxed = expected_return(mdp, &pi)?;
    let j_extracted = expected_return(mdp, &pi_t)?;
    let gap_exact = j_extracted - j_relaxed;
    let d_t = discounted_visitation(mdp, &pi_t)?;
    let scale = 1.0 / (1.0 - gamma);

    let na = mdp.n_actions;
    let gap_action_form = scale
        * (0..mdp.n_states)
            .map(|s| {
                let inner: f64 = (0..na).map(|a| (pi_t.prob(s, a) - pi.prob(s, a)) * q[s * na + a]).sum();
                d_t[s] * inner
            })
            .sum::<f64>();

    let qd = path_values(paths, &q);
    let p = &paths.depth_probs;
    let m = 1.0 - p[k];
    let gap_path_form = scale
        * (0..mdp.n_states)
            .map(|s| {
                let kept = (1.0 - p[k]) * qd[k][s];
                let deleted: f64 = (0..dm).filter(|&d| d != k).map(|d| p[d] * qd[d][s]).sum();
                d_t[s] * (kept - deleted)
            })
            .sum::<f64>();

    let q_keep: Vec<f64> = qd[k].clone();
    let q_del: Vec<f64> = (0..mdp.n_states)
        .map(|s| {
            if m > 0.0 {
                (0..dm).filter(|&d| d != k).map(|d| p[d] * qd[d][s]).sum::<f64>() / m
            } else {
                q_keep[s]
            }
        })
        .collect();
    let gap_keep_del = scale
        * (0..mdp.n_states)
            .map(|s| d_t[s] * m * (q_keep[s] - q_del[s]))
            .sum::<f64>();

    let identity_residual = [
        (gap_exact - gap_action_form).abs(),
        (gap_exact - gap_path_form).abs(),
        (gap_action_form - gap_path_form).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let keep_del_residual = (gap_path_form - gap_keep_del).abs();

    let supported: Vec<usize> = (0..mdp.n_states).filter(|&s| d_t[s] > SUPPORT_EPS).collect();
    let gaps: Vec<f64> = supported.iter().map(|&s| q_del[s] - q_keep[s]).collect();
    let kappa_min = if m > 0.0 && !gaps.is_empty() && gaps.iter().all(|&g| g > 0.0) {
        Some(gaps.iter().copied().fold(f64::INFINITY, f64::min))
    } else {
        None
    };
    let kappa_bound = kappa_min.map(|kmin| -scale * m * kmin);
    let slack_kappa = kappa_bound.map(|b| b - gap_exact);
    let delta = gaps.iter().map(|g| g.abs()).fold(0.0, f64::max);

    let simplex = verify_bounds(p)?;
    let delta_mass_bound = delta * scale * m;
    let delta_entropy_bound = delta * scale * simplex.entropy;

    Ok(GapReport {
        gamma,
        depth_probs: p.clone(),
        kept_depth,
        mass_deleted: m,
        entropy: simplex.entropy,
        j_relaxed,
        j_extracted,
        gap_exact,
        gap_action_form,
        gap_path_form,
        gap_keep_del,
        identity_residual,
        keep_del_residual,
        visitation: d_t,
        q_keep,
        q_del,
        kappa_min,
        kappa_bound,
        slack_kappa,
        delta,
        delta_mass_bound,
        delta_entropy_bound,
        slack_delta_mass: delta_mass_bound - gap_exact.abs(),
        slack_delta_entropy: delta_entropy_bound - delta_mass_bound,
        simplex,
    })
}

/// Gap between a relaxed policy and its deployed hard-threshold program.
/// Only the action-level identity applies here, since the program is not a
/// reweighting of the relaxed paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardGateReport {
    pub j_relaxed: f64,
    pub j_program: f64,
    pub gap_exact: f64,
    pub gap_action_form: f64,
    pub residual: f64,
}

pub fn verify_hard_gate(mdp: &TabularMdp, pi: &TabularPolicy, program: &DiscreteProgram) -> Result<HardGateReport> {
    let hard = TabularPolicy::from_program(program, mdp.n_states)?;
    let q = exact_q(mdp, pi)?;
    let j_relaxed = expected_return(mdp, pi)?;
    let j_program = expected_return(mdp, &hard)?;
    let d = discounted_visitation(mdp, &hard)?;
    let na = mdp.n_actions;
    let gap_action_form = (0..mdp.n_states)
        .map(|s| d[s] * (0..na).map(|a| (hard.prob(s, a) - pi.prob(s, a)) * q[s * na + a]).sum::<f64>())
        .sum::<f64>()
        / (1.0 - mdp.gamma);
    let gap_exact = j_program - j_relaxed;
    Ok(HardGateReport {
        j_relaxed,
        j_program,
        gap_exact,
        gap_action_form,
        residual: (gap_exact - gap_action_form).abs(),
    })
}

/// A random MDP with a random relaxed policy over one-hot state features.
/// Depth logits are spread wide enough that every depth can win the argmax.
pub fn random_instance<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    max_depth: usize,
    gamma: f64,
) -> Result<(TabularMdp, RelaxedPolicy)> {
    let mdp = TabularMdp::random(rng, n_states, n_actions, gamma)?;
    let mut policy = RelaxedPolicy::new(n_states, ActionSpace::Discrete(n_actions), max_depth, rng)?;
    for block in policy.params_mut().data_mut() {
        for x in block.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *x = 1.5 * z;
        }
    }
    Ok((mdp, policy))
}

/// Tolerances used by [`run_suite`].
pub const IDENTITY_TOL: f64 = 1e-8;
pub const KEEP_DEL_TOL: f64 = 1e-10;
pub const SLACK_TOL: f64 = 1e-10;

/// Outcome of the randomized identity and bound checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub reports: Vec<GapReport>,
    pub simplex_checks: usize,
    pub simplex_violations: usize,
    pub max_identity_residual: f64,
    pub max_keep_del_residual: f64,
    /// Smallest slack of the Δ bounds; `None` without instances.
    pub min_delta_slack: Option<f64>,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Random Dirichlet(1) simplex, occasionally sharpened toward one vertex.
fn random_simplex<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let n = rng.random_range(2..=8);
    let sharp = if rng.random_bool(0.3) { rng.random_range(5.0..60.0) } else { 1.0 };
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            e.powf(sharp)
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Runs `n_instances` random tabular instances through [`verify_identity`]
/// at the argmax depth, plus `10 · n_instances` random simplexes through
/// [`verify_bounds`].
pub fn run_suite(seed: u64, n_instances: usize) -> Result<SuiteReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(n_instances);
    let mut failures = Vec::new();
    for i in 0..n_instances {
        let ns = rng.random_range(2..=8);
        let na = rng.random_range(2..=4);
        let dm = rng.random_range(2..=4);
        let gamma = rng.random_range(0.5..0.95);
        let (mdp, policy) = random_instance(&mut rng, ns, na, dm, gamma)?;
        let paths = PathDecomposition::tabulate(&policy, &mdp)?;
        let kept = policy.depth_distribution().argmax_depth;
        let report = verify_identity(&mdp, &paths, kept)?;
        if let Err(e) = report.check(IDENTITY_TOL, KEEP_DEL_TOL, SLACK_TOL) {
            failures.push(format!("instance {i}: {e}"));
        }
        reports.push(report);
    }
    let simplex_checks = 10 * n_instances;
    let mut simplex_violations = 0;
    for i in 0..simplex_checks {
        let b = verify_bounds(&random_simplex(&mut rng))?;
        if !b.holds(SLACK_TOL) {
            simplex_violations += 1;
            failures.push(format!("simplex {i}: {b:?}"));
        }
    }
    let max = |f: fn(&GapReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
    Ok(SuiteReport {
        seed,
        max_identity_residual: max(|r| r.identity_residual),
        max_keep_del_residual: max(|r| r.keep_del_residual),
        min_delta_slack: reports
            .iter()
            .map(|r| r.slack_delta_mass.min(r.slack_delta_entropy))
            .reduce(f64::min),
        reports,
        simplex_checks,
        simplex_violations,
        failures,
    })
}
