//! Discrete if-else chain programs.
//!
//! A program of depth `d` holds `d - 1` guarded clauses and a default
//! action. Clauses are tried in order; the first whose predicate value is
//! strictly positive fires, otherwise the default fires.

mod text;

pub use text::{format_coefficient, ProgramContext};

use serde::{Deserialize, Serialize};

use crate::envs::{Action, ActionSpace};
use crate::error::{Error, Result};

/// `bias + Σ weights_i · features_i`, summed left to right then offset by
/// the bias. Every predicate evaluation in the crate goes through here so
/// relaxed and discrete evaluations agree bit for bit.
#[inline]
pub fn linear(weights: &[f64], bias: f64, features: &[f64]) -> f64 {
    let s: f64 = weights.iter().zip(features).map(|(w, x)| w * x).sum();
    s + bias
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Predicate {
    pub fn new(weights: Vec<f64>, bias: f64) -> Self {
        Predicate { weights, bias }
    }

    pub fn value(&self, features: &[f64]) -> f64 {
        linear(&self.weights, self.bias, features)
    }

    pub fn holds(&self, features: &[f64]) -> bool {
        self.value(features) > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalAction {
    Discrete(usize),
    /// Mean `weights · features + bias`; `weights` is row-major
    /// `action_dim × feature_dim`.
    Affine { weights: Vec<f64>, bias: Vec<f64> },
}

impl TerminalAction {
    fn check(&self, space: &ActionSpace, feature_dim: usize) -> Result<()> {
        match (self, space) {
            (TerminalAction::Discrete(a), ActionSpace::Discrete(n)) if a < n => Ok(()),
            (TerminalAction::Affine { weights, bias }, ActionSpace::Continuous { dim, .. })
                if bias.len() == *dim && weights.len() == dim * feature_dim =>
            {
                Ok(())
            }
            _ => Err(Error::contract(format!(
                "terminal action {self:?} does not fit {space:?} with {feature_dim} features"
            ))),
        }
    }

    fn act(&self, features: &[f64], space: &ActionSpace) -> Action {
        match self {
            TerminalAction::Discrete(a) => Action::Discrete(*a),
            TerminalAction::Affine { weights, bias } => {
                let (low, high) = match space {
                    ActionSpace::Continuous { low, high, .. } => (*low, *high),
                    ActionSpace::Discrete(_) => (f64::NEG_INFINITY, f64::INFINITY),
                };
                let f = features.len();
                Action::Continuous(
                    bias.iter()
                        .enumerate()
                        .map(|(r, &b)| linear(&weights[r * f..(r + 1) * f], b, features).clamp(low, high))
                        .collect(),
                )
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub predicate: Predicate,
    pub action: TerminalAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteProgram {
    feature_dim: usize,
    action_space: ActionSpace,
    clauses: Vec<Clause>,
    default: TerminalAction,
}

impl DiscreteProgram {
    pub fn new(
        feature_dim: usize,
        action_space: ActionSpace,
        clauses: Vec<Clause>,
        default: TerminalAction,
    ) -> Result<Self> {
        for c in &clauses {
            if c.predicate.weights.len() != feature_dim {
                return Err(Error::Dimension {
                    expected: feature_dim,
                    got: c.predicate.weights.len(),
                });
            }
            c.action.check(&action_space, feature_dim)?;
        }
        default.check(&action_space, feature_dim)?;
        Ok(DiscreteProgram {
            feature_dim,
            action_space,
            clauses,
            default,
        })
    }

    pub fn depth(&self) -> usize {
        self.clauses.len() + 1
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.action_space
    }

    pub fn clauses(&self) -> &[Clause] {
        &self.clauses
    }

    pub fn default_action(&self) -> &TerminalAction {
        &self.default
    }

    /// Index of the node that fires: `0..depth-1` for clauses, `depth-1`
    /// for the default.
    pub fn firing_node(&self, features: &[f64]) -> Result<usize> {
        if features.len() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                got: features.len(),
            });
        }
        Ok(self
            .clauses
            .iter()
            .position(|c| c.predicate.holds(features))
            .unwrap_or(self.clauses.len()))
    }

    pub fn evaluate(&self, features: &[f64]) -> Result<Action> {
        let node = self.firing_node(features)?;
        let terminal = self
            .clauses
            .get(node)
            .map(|c| &c.action)
            .unwrap_or(&self.default);
        Ok(terminal.act(features, &self.action_space))
    }

    /// Bitwise equality of structure and every coefficient.
    pub fn bit_eq(&self, other: &DiscreteProgram) -> bool {
        fn bits(xs: &[f64]) -> Vec<u64> {
            xs.iter().map(|x| x.to_bits()).collect()
        }
        fn term_eq(a: &TerminalAction, b: &TerminalAction) -> bool {
            match (a, b) {
                (TerminalAction::Discrete(x), TerminalAction::Discrete(y)) => x == y,
                (
                    TerminalAction::Affine { weights: w1, bias: b1 },
                    TerminalAction::Affine { weights: w2, bias: b2 },
                ) => bits(w1) == bits(w2) && bits(b1) == bits(b2),
                _ => false,
            }
        }
        self.feature_dim == other.feature_dim
            && self.action_space == other.action_space
            && self.clauses.len() == other.clauses.len()
            && self.clauses.iter().zip(&other.clauses).all(|(a, b)| {
                a.predicate.bias.to_bits() == b.predicate.bias.to_bits()
                    && bits(&a.predicate.weights) == bits(&b.predicate.weights)
                    && term_eq(&a.action, &b.action)
            })
            && term_eq(&self.default, &other.default)
    }

    /// The CartPole program discovered in the reference experiments:
    /// `if (-0.16 - 0.31 f0 - 2.1 f1 - 6.6 f2 - 2.3 f3 > 0) Left else Right`.
    pub fn cartpole_reference() -> Self {
        DiscreteProgram::new(
            4,
            ActionSpace::Discrete(2),
            vec![Clause {
                predicate: Predicate::new(vec![-0.31, -2.1, -6.6, -2.3], -0.16),
                action: TerminalAction::Discrete(0),
            }],
            TerminalAction::Discrete(1),
        )
        .expect("valid reference program")
    }
}
