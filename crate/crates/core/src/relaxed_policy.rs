//! Relaxed derivation-tree policy over if-else chains of depth `1..=D`.
//!
//! A softmax over depths picks the architecture; depth `d` gates heads
//! `1..=d` with sigmoid predicates:
//!
//! ```text
//! g_k^d = σ(φ_k) ∏_{j<k} (1 − σ(φ_j))   k < d
//! g_d^d =        ∏_{j<d} (1 − σ(φ_j))
//! π(a|s) = Σ_d p_d Σ_{k≤d} g_k^d(s) h_k(a|s)
//! ```
//!
//! Predicates and heads are shared by every depth. Collecting terms per head
//! gives `π(a|s) = Σ_k w_k(s) h_k(a|s)` with
//! `ln w_k = c_k + ln(σ(φ_k) T_k + p_k)`, where `c_k = Σ_{j<k} ln(1 − σ(φ_j))`
//! and `T_k = Σ_{d>k} p_d`. Every quantity below is computed in log space
//! from that form, both in plain `f64` code (rollouts, evaluation) and on a
//! [`Tape`] (training).

use std::borrow::Cow;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    log_sigmoid, log_softmax, logaddexp, logsumexp, sigmoid, BlockId, Gradients, ParamSet, Tape, Var,
};
use crate::envs::{Action, ActionSpace};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::program::{linear, Predicate};

pub const DEPTH_LOGITS: BlockId = BlockId(0);
pub const PREDICATE_WEIGHTS: BlockId = BlockId(1);
pub const PREDICATE_BIAS: BlockId = BlockId(2);
/// Discrete heads: `D × n` logits.
pub const HEAD_LOGITS: BlockId = BlockId(3);
/// Gaussian heads: `(D·dim) × F` mean weights.
pub const HEAD_WEIGHTS: BlockId = BlockId(3);
pub const HEAD_BIAS: BlockId = BlockId(4);
pub const HEAD_LOG_STD: BlockId = BlockId(5);

pub const INIT_PREDICATE_STD: f64 = 0.1;
pub const INIT_LOG_STD: f64 = -0.5;

/// Minibatches are split into this many chunks, each differentiated on its
/// own tape. The count is fixed so results do not depend on thread count.
pub const GRAD_CHUNKS: usize = 4;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDistribution {
    pub p: Vec<f64>,
    pub entropy: f64,
    pub normalized_entropy: f64,
    pub p_max: f64,
    pub mass_deleted: f64,
    /// 1-based; ties go to the smallest depth.
    pub argmax_depth: usize,
}

impl ArchitectureDistribution {
    fn new(p: Vec<f64>, entropy: f64) -> Self {
        let mut argmax = 0;
        for (i, &x) in p.iter().enumerate() {
            if x > p[argmax] {
                argmax = i;
            }
        }
        let p_max = p[argmax];
        let ln_d = (p.len() as f64).ln();
        ArchitectureDistribution {
            entropy,
            normalized_entropy: if p.len() > 1 { entropy / ln_d } else { 0.0 },
            p_max,
            mass_deleted: 1.0 - p_max,
            argmax_depth: argmax + 1,
            p,
        }
    }

    /// Builds the summary for an arbitrary simplex.
    pub fn from_probs(p: Vec<f64>) -> Self {
        let h = crate::theory::entropy(&p);
        Self::new(p, h)
    }
}

/// Action distribution at one state.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDistribution {
    Discrete(Vec<f64>),
    /// Mixture of diagonal Gaussians, one component per head.
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        log_std: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxedPolicy {
    max_depth: usize,
    feature_dim: usize,
    action_space: ActionSpace,
    params: ParamSet,
    /// When set, the depth distribution is one-hot at this depth and the
    /// depth logits receive no gradient.
    frozen_depth: Option<usize>,
    /// Fixed per-feature multipliers applied before every affine map.
    /// Empty means all ones. Exported programs carry `w_i · s_i`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    input_scale: Vec<f64>,
}

fn layout(feature_dim: usize, space: &ActionSpace, d: usize) -> Vec<(&'static str, Vec<usize>)> {
    let mut blocks = vec![
        ("depth_logits", vec![d]),
        ("predicate_weights", vec![d - 1, feature_dim]),
        ("predicate_bias", vec![d - 1]),
    ];
    match *space {
        ActionSpace::Discrete(n) => blocks.push(("head_logits", vec![d, n])),
        ActionSpace::Continuous { dim, .. } => {
            blocks.push(("head_weights", vec![d * dim, feature_dim]));
            blocks.push(("head_bias", vec![d * dim]));
            blocks.push(("head_log_std", vec![d * dim]));
        }
    }
    blocks
}

impl RelaxedPolicy {
    /// Uniform depth logits, predicate weights `N(0, 0.1²)`, zero biases
    /// and head logits/means, head log-std `-0.5`.
    pub fn new<R: Rng + ?Sized>(
        feature_dim: usize,
        action_space: ActionSpace,
        max_depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_depth == 0 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        action_space.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in layout(feature_dim, &action_space, max_depth) {
            let n: usize = shape.iter().product();
            let data = match name {
                "predicate_weights" => (0..n)
                    .map(|_| INIT_PREDICATE_STD * normal(rng))
                    .collect(),
                "head_log_std" => vec![INIT_LOG_STD; n],
                _ => vec![0.0; n],
            };
            params.push(name, shape, data);
        }
        Ok(RelaxedPolicy {
            max_depth,
            feature_dim,
            action_space,
            params,
            frozen_depth: None,
            input_scale: Vec::new(),
        })
    }

    /// Sets the fixed input scale; all entries must be finite and positive.
    pub fn with_input_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.is_empty() {
            self.input_scale = scale;
            return Ok(self);
        }
        if scale.len() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                got: scale.len(),
            });
        }
        if let Some(bad) = scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("input scale entry {bad} is not positive and finite")));
        }
        self.input_scale = if scale.iter().all(|&s| s == 1.0) { Vec::new() } else { scale };
        Ok(self)
    }

    /// Per-feature input multipliers (all ones when unset).
    pub fn input_scale(&self) -> Vec<f64> {
        if self.input_scale.is_empty() {
            vec![1.0; self.feature_dim]
        } else {
            self.input_scale.clone()
        }
    }

    fn scaled<'a>(&self, features: &'a [f64]) -> Cow<'a, [f64]> {
        if self.input_scale.is_empty() {
            Cow::Borrowed(features)
        } else {
            Cow::Owned(features.iter().zip(&self.input_scale).map(|(x, s)| x * s).collect())
        }
    }

    /// Rows of `weights` (each `feature_dim` long) with the input scale folded in.
    fn fold_scale(&self, weights: &[f64]) -> Vec<f64> {
        if self.input_scale.is_empty() {
            return weights.to_vec();
        }
        weights
            .chunks(self.feature_dim.max(1))
            .flat_map(|row| row.iter().zip(&self.input_scale).map(|(w, s)| w * s))
            .collect()
    }

    /// Reassembles a policy from stored parts, checking the layout.
    pub fn from_parts(
        feature_dim: usize,
        action_space: ActionSpace,
        max_depth: usize,
        params: ParamSet,
        frozen_depth: Option<usize>,
    ) -> Result<Self> {
        if max_depth == 0 {
            return Err(Error::Config("max_depth must be at least 1".into()));
        }
        action_space.validate()?;
        let expected = layout(feature_dim, &action_space, max_depth);
        let ok = params.blocks().len() == expected.len()
            && params
                .blocks()
                .iter()
                .zip(&expected)
                .all(|(b, (name, shape))| b.name == *name && &b.shape == shape && b.data.len() == shape.iter().product::<usize>());
        if !ok {
            return Err(Error::Checkpoint("parameter blocks do not match the policy layout".into()));
        }
        if let Some(d) = frozen_depth {
            if d == 0 || d > max_depth {
                return Err(Error::Checkpoint(format!("frozen depth {d} outside 1..={max_depth}")));
            }
        }
        Ok(RelaxedPolicy {
            max_depth,
            feature_dim,
            action_space,
            params,
            frozen_depth,
            input_scale: Vec::new(),
        })
    }

    /// Re-validates a deserialized policy.
    pub fn validated(self) -> Result<Self> {
        Self::from_parts(self.feature_dim, self.action_space, self.max_depth, self.params, self.frozen_depth)?
            .with_input_scale(self.input_scale)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn frozen_depth(&self) -> Option<usize> {
        self.frozen_depth
    }

    /// Fixes the architecture to depth `d` (one-hot depth distribution).
    pub fn freeze_depth(&mut self, d: usize) -> Result<()> {
        if d == 0 || d > self.max_depth {
            return Err(Error::contract(format!("depth {d} outside 1..={}", self.max_depth)));
        }
        self.frozen_depth = Some(d);
        Ok(())
    }

    fn action_dim(&self) -> usize {
        match self.action_space {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous { dim, .. } => dim,
        }
    }

    fn check_features(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    pub fn depth_distribution(&self) -> ArchitectureDistribution {
        if let Some(d) = self.frozen_depth {
            let mut p = vec![0.0; self.max_depth];
            p[d - 1] = 1.0;
            return ArchitectureDistribution::new(p, 0.0);
        }
        let theta = self.params.block(DEPTH_LOGITS);
        let p = crate::autodiff::softmax(theta);
        let lp = log_softmax(theta);
        // same summation as the tape's −dot(p, ln p)
        let h = -p.iter().zip(&lp).map(|(a, b)| a * b).sum::<f64>();
        ArchitectureDistribution::new(p, h)
    }

    /// `(ln p_d, ln Σ_{d>k} p_d)` for `k = 0..D`.
    fn log_depth_terms(&self) -> (Vec<f64>, Vec<f64>) {
        let d = self.max_depth;
        if let Some(fd) = self.frozen_depth {
            let lp = (0..d).map(|k| if k + 1 == fd { 0.0 } else { f64::NEG_INFINITY }).collect();
            let tail = (0..d).map(|k| if k + 1 < fd { 0.0 } else { f64::NEG_INFINITY }).collect();
            return (lp, tail);
        }
        let lp = log_softmax(self.params.block(DEPTH_LOGITS));
        let tail = (0..d).map(|k| logsumexp(&lp[k + 1..])).collect();
        (lp, tail)
    }

    pub fn predicate(&self, k: usize) -> Predicate {
        let f = self.feature_dim;
        Predicate::new(
            self.fold_scale(&self.params.block(PREDICATE_WEIGHTS)[k * f..(k + 1) * f]),
            self.params.block(PREDICATE_BIAS)[k],
        )
    }

    /// `φ_k(s)` for the `D − 1` predicates.
    pub fn predicate_values(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_features(features)?;
        let features = &*self.scaled(features);
        let f = self.feature_dim;
        let w = self.params.block(PREDICATE_WEIGHTS);
        let b = self.params.block(PREDICATE_BIAS);
        Ok((0..self.max_depth - 1)
            .map(|k| linear(&w[k * f..(k + 1) * f], b[k], features))
            .collect())
    }

    /// Gate weights `g^d` of the depth-`d` chain.
    pub fn gate_weights(&self, features: &[f64], d: usize) -> Result<Vec<f64>> {
        if d == 0 || d > self.max_depth {
            return Err(Error::contract(format!("depth {d} outside 1..={}", self.max_depth)));
        }
        let phi = self.predicate_values(features)?;
        let mut g = Vec::with_capacity(d);
        let mut rest = 1.0;
        for &x in &phi[..d - 1] {
            g.push(sigmoid(x) * rest);
            rest *= sigmoid(-x);
        }
        g.push(rest);
        Ok(g)
    }

    /// `ln w_k(s)`: log of the total weight head `k` receives.
    pub fn log_head_weights(&self, features: &[f64]) -> Result<Vec<f64>> {
        let phi = self.predicate_values(features)?;
        let (lp, tail) = self.log_depth_terms();
        Ok(combine_log_weights(&phi, &lp, &tail))
    }

    fn head_log_probs_discrete(&self) -> Vec<Vec<f64>> {
        let ActionSpace::Discrete(n) = self.action_space else {
            unreachable!()
        };
        self.params
            .block(HEAD_LOGITS)
            .chunks(n)
            .map(log_softmax)
            .collect()
    }

    /// Head `k`'s logits (discrete heads).
    pub fn head_logits(&self, k: usize) -> Result<&[f64]> {
        match self.action_space {
            ActionSpace::Discrete(n) => Ok(&self.params.block(HEAD_LOGITS)[k * n..(k + 1) * n]),
            _ => Err(Error::contract("head logits requested from a Gaussian policy")),
        }
    }

    /// Head `k`'s affine mean `(W, b)`, `W` row-major `dim × F`.
    pub fn head_affine(&self, k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.action_space {
            ActionSpace::Continuous { dim, .. } => {
                let f = self.feature_dim;
                let w = &self.params.block(HEAD_WEIGHTS)[k * dim * f..(k + 1) * dim * f];
                let b = &self.params.block(HEAD_BIAS)[k * dim..(k + 1) * dim];
                Ok((self.fold_scale(w), b.to_vec()))
            }
            _ => Err(Error::contract("affine head requested from a discrete policy")),
        }
    }

    fn gaussian_heads(&self, features: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let features = &*self.scaled(features);
        let dim = self.action_dim();
        let f = self.feature_dim;
        let w = self.params.block(HEAD_WEIGHTS);
        let b = self.params.block(HEAD_BIAS);
        let ls = self.params.block(HEAD_LOG_STD);
        let means = (0..self.max_depth)
            .map(|k| {
                (0..dim)
                    .map(|i| {
                        let r = k * dim + i;
                        linear(&w[r * f..(r + 1) * f], b[r], features)
                    })
                    .collect()
            })
            .collect();
        let log_std = ls.chunks(dim).map(|c| c.to_vec()).collect();
        (means, log_std)
    }

    pub fn action_distribution(&self, features: &[f64]) -> Result<ActionDistribution> {
        let logw = self.log_head_weights(features)?;
        match self.action_space {
            ActionSpace::Discrete(n) => {
                let heads = self.head_log_probs_discrete();
                let probs = (0..n)
                    .map(|a| {
                        let terms: Vec<f64> = logw.iter().zip(&heads).map(|(w, h)| w + h[a]).collect();
                        logsumexp(&terms).exp()
                    })
                    .collect();
                Ok(ActionDistribution::Discrete(probs))
            }
            ActionSpace::Continuous { .. } => {
                let (means, log_std) = self.gaussian_heads(features);
                Ok(ActionDistribution::GaussianMixture {
                    weights: logw.iter().map(|x| x.exp()).collect(),
                    means,
                    log_std,
                })
            }
        }
    }

    /// `π_d(a|s)`, the depth-`d` chain's own action distribution.
    pub fn depth_action_probs(&self, features: &[f64], d: usize) -> Result<Vec<f64>> {
        let ActionSpace::Discrete(n) = self.action_space else {
            return Err(Error::Unsupported("per-depth tables need discrete actions".into()));
        };
        let g = self.gate_weights(features, d)?;
        let heads = self.head_log_probs_discrete();
        Ok((0..n)
            .map(|a| g.iter().zip(&heads).map(|(gk, h)| gk * h[a].exp()).sum())
            .collect())
    }

    /// `ln π(a|s)`. Zero-probability actions yield `-inf`.
    pub fn log_prob(&self, features: &[f64], action: &Action) -> Result<f64> {
        let logw = self.log_head_weights(features)?;
        match (&self.action_space, action) {
            (ActionSpace::Discrete(n), Action::Discrete(a)) if a < n => {
                let heads = self.head_log_probs_discrete();
                let terms: Vec<f64> = logw.iter().zip(&heads).map(|(w, h)| w + h[*a]).collect();
                Ok(logsumexp(&terms))
            }
            (ActionSpace::Continuous { dim, .. }, Action::Continuous(x)) if x.len() == *dim => {
                let (means, log_std) = self.gaussian_heads(features);
                let terms: Vec<f64> = (0..self.max_depth)
                    .map(|k| logw[k] + gaussian_log_density(x, &means[k], &log_std[k]))
                    .collect();
                Ok(logsumexp(&terms))
            }
            _ => Err(Error::contract(format!(
                "action {action:?} does not fit {:?}",
                self.action_space
            ))),
        }
    }

    /// Draws an action and returns it with its log-probability. Gaussian
    /// samples are not clipped to the action bounds.
    pub fn sample_action<R: Rng + ?Sized>(&self, features: &[f64], rng: &mut R) -> Result<(Action, f64)> {
        let action = match self.action_distribution(features)? {
            ActionDistribution::Discrete(probs) => Action::Discrete(sample_index(&probs, rng)),
            ActionDistribution::GaussianMixture { weights, means, log_std } => {
                let k = sample_index(&weights, rng);
                Action::Continuous(
                    means[k]
                        .iter()
                        .zip(&log_std[k])
                        .map(|(m, ls)| m + ls.exp() * normal(rng))
                        .collect(),
                )
            }
        };
        let lp = self.log_prob(features, &action)?;
        Ok((action, lp))
    }

    /// Most likely discrete action (ties to the smallest index), or the
    /// mean of the heaviest Gaussian component.
    pub fn greedy_action(&self, features: &[f64]) -> Result<Action> {
        Ok(match self.action_distribution(features)? {
            ActionDistribution::Discrete(probs) => Action::Discrete(argmax(&probs)),
            ActionDistribution::GaussianMixture { weights, means, .. } => {
                Action::Continuous(means[argmax(&weights)].clone())
            }
        })
    }

    /// Records the state-independent pieces of the policy on `tape`.
    pub fn record_shared(&self, tape: &mut Tape) -> Result<SharedTerms> {
        let d = self.max_depth;
        let (lp, tail) = if self.frozen_depth.is_some() {
            let (lp, tail) = self.log_depth_terms();
            (tape.constant(&lp), tape.constant(&tail))
        } else {
            let theta = tape.param(&self.params, DEPTH_LOGITS);
            let lp = tape.log_softmax(theta)?;
            let mut parts = Vec::with_capacity(d);
            for k in 0..d - 1 {
                let rest: Vec<Var> = (k + 1..d).map(|j| tape.index(lp, j)).collect::<Result<_>>()?;
                let cat = tape.concat(&rest)?;
                parts.push(tape.logsumexp(cat)?);
            }
            parts.push(tape.scalar(f64::NEG_INFINITY));
            let tail = tape.concat(&parts)?;
            (lp, tail)
        };
        let predicates = if d > 1 {
            let mut lower = vec![0.0; d * (d - 1)];
            for k in 0..d {
                for j in 0..k.min(d - 1) {
                    lower[k * (d - 1) + j] = 1.0;
                }
            }
            Some(PredicateTerms {
                weights: tape.param(&self.params, PREDICATE_WEIGHTS),
                bias: tape.param(&self.params, PREDICATE_BIAS),
                lower: tape.constant(&lower),
                pad: tape.scalar(0.0),
            })
        } else {
            None
        };
        let heads = match self.action_space {
            ActionSpace::Discrete(n) => {
                let logits = tape.param(&self.params, HEAD_LOGITS);
                let mut rows = Vec::with_capacity(d);
                for k in 0..d {
                    let row: Vec<Var> = (0..n).map(|a| tape.index(logits, k * n + a)).collect::<Result<_>>()?;
                    let row = tape.concat(&row)?;
                    rows.push(tape.log_softmax(row)?);
                }
                let mut per_action = Vec::with_capacity(n);
                for a in 0..n {
                    let col: Vec<Var> = rows.iter().map(|&r| tape.index(r, a)).collect::<Result<_>>()?;
                    per_action.push(tape.concat(&col)?);
                }
                HeadTerms::Discrete(per_action)
            }
            ActionSpace::Continuous { dim, .. } => {
                let weights = tape.param(&self.params, HEAD_WEIGHTS);
                let bias = tape.param(&self.params, HEAD_BIAS);
                let log_std = tape.param(&self.params, HEAD_LOG_STD);
                let neg = tape.neg(log_std)?;
                let inv_std = tape.exp(neg)?;
                let mut block_sum = vec![0.0; d * d * dim];
                for k in 0..d {
                    for i in 0..dim {
                        block_sum[k * d * dim + k * dim + i] = 1.0;
                    }
                }
                let block_sum = tape.constant(&block_sum);
                let ls_sum = tape.matvec(block_sum, log_std, d)?;
                let c = tape.scalar(dim as f64 * HALF_LN_2PI);
                let log_norm = tape.add(ls_sum, c)?;
                HeadTerms::Gaussian {
                    weights,
                    bias,
                    inv_std,
                    log_norm,
                    block_sum,
                    neg_half: tape.scalar(-0.5),
                }
            }
        };
        Ok(SharedTerms {
            log_p: lp,
            log_tail: tail,
            predicates,
            heads,
        })
    }

    /// `ln w_k(s)` on the tape.
    pub fn tape_log_head_weights(&self, tape: &mut Tape, shared: &SharedTerms, features: &[f64]) -> Result<Var> {
        self.check_features(features)?;
        let Some(pt) = &shared.predicates else {
            return Ok(shared.log_p);
        };
        let d = self.max_depth;
        let x = tape.constant(&self.scaled(features));
        let wx = tape.matvec(pt.weights, x, d - 1)?;
        let phi = tape.add(wx, pt.bias)?;
        let ls = tape.log_sigmoid(phi)?;
        let neg_phi = tape.neg(phi)?;
        let lns = tape.log_sigmoid(neg_phi)?;
        let c = tape.matvec(pt.lower, lns, d)?;
        let ls_pad = tape.concat(&[ls, pt.pad])?;
        let fire = tape.add(ls_pad, shared.log_tail)?;
        let mix = tape.logaddexp(fire, shared.log_p)?;
        tape.add(c, mix)
    }

    /// `ln π(a|s)` on the tape.
    pub fn tape_log_prob(&self, tape: &mut Tape, shared: &SharedTerms, features: &[f64], action: &Action) -> Result<Var> {
        let logw = self.tape_log_head_weights(tape, shared, features)?;
        match (&shared.heads, action) {
            (HeadTerms::Discrete(per_action), Action::Discrete(a)) if *a < per_action.len() => {
                let t = tape.add(logw, per_action[*a])?;
                tape.logsumexp(t)
            }
            (
                HeadTerms::Gaussian {
                    weights,
                    bias,
                    inv_std,
                    log_norm,
                    block_sum,
                    neg_half,
                },
                Action::Continuous(a),
            ) if a.len() == self.action_dim() => {
                let d = self.max_depth;
                let dim = a.len();
                let x = tape.constant(&self.scaled(features));
                let wx = tape.matvec(*weights, x, d * dim)?;
                let mu = tape.add(wx, *bias)?;
                let rep: Vec<f64> = (0..d).flat_map(|_| a.iter().copied()).collect();
                let target = tape.constant(&rep);
                let diff = tape.sub(target, mu)?;
                let z = tape.mul(diff, *inv_std)?;
                let q = tape.square(z)?;
                let qs = tape.matvec(*block_sum, q, d)?;
                let quad = tape.mul(qs, *neg_half)?;
                let logh = tape.sub(quad, *log_norm)?;
                let t = tape.add(logw, logh)?;
                tape.logsumexp(t)
            }
            _ => Err(Error::contract(format!(
                "action {action:?} does not fit {:?}",
                self.action_space
            ))),
        }
    }

    /// Architecture entropy `H = −Σ p_d ln p_d` on the tape.
    pub fn tape_entropy(&self, tape: &mut Tape) -> Result<Var> {
        if self.frozen_depth.is_some() {
            return Ok(tape.scalar(0.0));
        }
        let theta = tape.param(&self.params, DEPTH_LOGITS);
        let p = tape.softmax(theta)?;
        let lp = tape.log_softmax(theta)?;
        let s = tape.dot(p, lp)?;
        tape.neg(s)
    }

    /// Gradient of the clipped surrogate plus `α (H − H̄)` over the
    /// minibatch `batch.indices`.
    pub fn grad_surrogate(
        &self,
        batch: &SurrogateBatch<'_>,
        settings: &SurrogateSettings,
        exec: Execution,
    ) -> Result<SurrogateOutput> {
        let n = batch.indices.len();
        if n == 0 {
            return Err(Error::contract("empty minibatch"));
        }
        let f = self.feature_dim;
        let chunk = n.div_ceil(GRAD_CHUNKS);
        let chunks: Vec<&[usize]> = batch.indices.chunks(chunk).collect();
        let inv_n = 1.0 / n as f64;
        let parts = exec.map(&chunks, |idx| -> Result<ChunkResult> {
            let mut tape = Tape::with_capacity(idx.len() * 24 + 64, idx.len() * 64 + 256);
            let shared = self.record_shared(&mut tape)?;
            let mut terms = Vec::with_capacity(idx.len());
            let mut kl = 0.0;
            let mut clipped = 0usize;
            for &i in *idx {
                let x = &batch.features[i * f..(i + 1) * f];
                let lp = self.tape_log_prob(&mut tape, &shared, x, &batch.actions[i])?;
                let old = tape.scalar(batch.old_log_probs[i]);
                let diff = tape.sub(lp, old)?;
                let ratio = tape.exp(diff)?;
                let adv = tape.scalar(batch.advantages[i]);
                let s1 = tape.mul(ratio, adv)?;
                let rc = tape.clamp(ratio, 1.0 - settings.clip, 1.0 + settings.clip)?;
                let s2 = tape.mul(rc, adv)?;
                terms.push(tape.minimum(s1, s2)?);
                let r = tape.scalar_value(ratio);
                kl += (r - 1.0) - tape.scalar_value(diff);
                if (r - 1.0).abs() > settings.clip {
                    clipped += 1;
                }
            }
            let all = tape.concat(&terms)?;
            let total = tape.sum(all)?;
            let scale = tape.scalar(-inv_n);
            let loss = tape.mul(total, scale)?;
            let mut grads = self.params.zeros_like();
            tape.backward(loss)?.accumulate_into(&mut grads);
            Ok(ChunkResult {
                grads,
                loss: tape.scalar_value(loss),
                kl,
                clipped,
            })
        });

        let mut grads = self.params.zeros_like();
        let (mut policy_loss, mut kl, mut clipped) = (0.0, 0.0, 0usize);
        for part in parts {
            let part = part?;
            grads.add_assign(&part.grads);
            policy_loss += part.loss;
            kl += part.kl;
            clipped += part.clipped;
        }

        let mut tape = Tape::new();
        let h = self.tape_entropy(&mut tape)?;
        let entropy = tape.scalar_value(h);
        let mut h_grads = self.params.zeros_like();
        if self.frozen_depth.is_none() {
            tape.backward(h)?.accumulate_into(&mut h_grads);
        }
        let entropy_grad_norm = h_grads.norm();
        if settings.alpha != 0.0 {
            h_grads.scale(settings.alpha);
            grads.add_assign(&h_grads);
        }
        let loss = policy_loss + settings.alpha * (entropy - settings.target_entropy);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite surrogate (loss {loss}); parameters: {}",
                serde_json::to_string(&self.params).unwrap_or_default()
            )));
        }
        Ok(SurrogateOutput {
            grads,
            loss,
            policy_loss,
            entropy,
            entropy_grad_norm,
            approx_kl: kl * inv_n,
            clip_fraction: clipped as f64 * inv_n,
        })
    }

    /// The same objective as [`Self::grad_surrogate`], evaluated without a
    /// tape. Used as the finite-difference reference.
    pub fn surrogate_loss(&self, batch: &SurrogateBatch<'_>, settings: &SurrogateSettings) -> Result<f64> {
        let f = self.feature_dim;
        let mut total = 0.0;
        for &i in batch.indices {
            let lp = self.log_prob(&batch.features[i * f..(i + 1) * f], &batch.actions[i])?;
            let r = (lp - batch.old_log_probs[i]).exp();
            let a = batch.advantages[i];
            let rc = r.clamp(1.0 - settings.clip, 1.0 + settings.clip);
            total += (r * a).min(rc * a);
        }
        let h = self.depth_distribution().entropy;
        Ok(-total / batch.indices.len() as f64 + settings.alpha * (h - settings.target_entropy))
    }
}

fn combine_log_weights(phi: &[f64], lp: &[f64], tail: &[f64]) -> Vec<f64> {
    let d = lp.len();
    let mut out = Vec::with_capacity(d);
    let mut c = 0.0;
    for k in 0..d {
        let ls = if k + 1 < d { log_sigmoid(phi[k]) } else { 0.0 };
        out.push(c + logaddexp(ls + tail[k], lp[k]));
        if k + 1 < d {
            c += log_sigmoid(-phi[k]);
        }
    }
    out
}

fn gaussian_log_density(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let mut quad = 0.0;
    let mut norm = 0.0;
    for ((xi, mi), li) in x.iter().zip(mean).zip(log_std) {
        let z = (xi - mi) * (-li).exp();
        quad += z * z;
        norm += li;
    }
    -0.5 * quad - (norm + x.len() as f64 * HALF_LN_2PI)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub struct PredicateTerms {
    weights: Var,
    bias: Var,
    /// Strictly lower-triangular ones, `D × (D−1)`.
    lower: Var,
    pad: Var,
}

pub enum HeadTerms {
    /// Per action `a`, the vector `(ln h_k(a))_k`.
    Discrete(Vec<Var>),
    Gaussian {
        weights: Var,
        bias: Var,
        inv_std: Var,
        log_norm: Var,
        block_sum: Var,
        neg_half: Var,
    },
}

/// Tape nodes shared by every sample on one tape.
pub struct SharedTerms {
    log_p: Var,
    log_tail: Var,
    predicates: Option<PredicateTerms>,
    heads: HeadTerms,
}

struct ChunkResult {
    grads: Gradients,
    loss: f64,
    kl: f64,
    clipped: usize,
}

/// Minibatch view into rollout storage.
#[derive(Clone, Copy, Debug)]
pub struct SurrogateBatch<'a> {
    /// Row-major `N × F`.
    pub features: &'a [f64],
    pub actions: &'a [Action],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub indices: &'a [usize],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateSettings {
    pub alpha: f64,
    pub target_entropy: f64,
    pub clip: f64,
}

#[derive(Clone, Debug)]
pub struct SurrogateOutput {
    pub grads: Gradients,
    pub loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub entropy_grad_norm: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}
