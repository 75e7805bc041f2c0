//! Two-hidden-layer tanh value network.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BlockId, Gradients, ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::relaxed_policy::GRAD_CHUNKS;

const W1: BlockId = BlockId(0);
const B1: BlockId = BlockId(1);
const W2: BlockId = BlockId(2);
const B2: BlockId = BlockId(3);
const W3: BlockId = BlockId(4);
const B3: BlockId = BlockId(5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    feature_dim: usize,
    hidden: usize,
    params: ParamSet,
    /// Fixed per-feature input multipliers; empty means all ones.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    input_scale: Vec<f64>,
}

fn matvec_tanh(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    out.extend(b.iter().enumerate().map(|(r, &br)| {
        let s: f64 = w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, c)| a * c).sum();
        (s + br).tanh()
    }));
}

impl Critic {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in.max(1) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-b..b)).collect()
        };
        params.push("w1", vec![hidden, feature_dim], uniform(hidden * feature_dim, feature_dim));
        params.push("b1", vec![hidden], vec![0.0; hidden]);
        params.push("w2", vec![hidden, hidden], uniform(hidden * hidden, hidden));
        params.push("b2", vec![hidden], vec![0.0; hidden]);
        params.push("w3", vec![hidden], uniform(hidden, hidden));
        params.push("b3", vec![1], vec![0.0]);
        Critic {
            feature_dim,
            hidden,
            params,
            input_scale: Vec::new(),
        }
    }

    /// Multiplies every input feature by `scale` before the first layer.
    pub fn with_input_scale(mut self, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != self.feature_dim {
            return Err(Error::Dimension {
                expected: self.feature_dim,
                got: scale.len(),
            });
        }
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("critic input scale must be positive and finite".into()));
        }
        self.input_scale = if scale.iter().all(|&s| s == 1.0) { Vec::new() } else { scale };
        Ok(self)
    }

    /// Re-validates a deserialized critic.
    pub fn validated(self) -> Result<Self> {
        let (f, h) = (self.feature_dim, self.hidden);
        let shapes = [vec![h, f], vec![h], vec![h, h], vec![h], vec![h], vec![1]];
        let blocks = self.params.blocks();
        let ok = blocks.len() == shapes.len()
            && blocks
                .iter()
                .zip(&shapes)
                .all(|(b, s)| &b.shape == s && b.data.len() == s.iter().product::<usize>());
        if !ok {
            return Err(Error::Checkpoint("critic parameters do not match the network layout".into()));
        }
        if self.input_scale.is_empty() {
            return Ok(self);
        }
        let scale = self.input_scale.clone();
        self.with_input_scale(scale).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn scaled<'a>(&self, features: &'a [f64]) -> Cow<'a, [f64]> {
        if self.input_scale.is_empty() {
            Cow::Borrowed(features)
        } else {
            Cow::Owned(features.iter().zip(&self.input_scale).map(|(x, s)| x * s).collect())
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn value(&self, features: &[f64]) -> f64 {
        let p = &self.params;
        let mut h1 = Vec::with_capacity(self.hidden);
        let mut h2 = Vec::with_capacity(self.hidden);
        matvec_tanh(p.block(W1), p.block(B1), &self.scaled(features), &mut h1);
        matvec_tanh(p.block(W2), p.block(B2), &h1, &mut h2);
        let s: f64 = p.block(W3).iter().zip(&h2).map(|(a, b)| a * b).sum();
        s + p.block(B3)[0]
    }

    /// Records `V(x)` on the tape, reusing the parameter leaves in `leaves`.
    pub fn tape_value(&self, tape: &mut Tape, leaves: &[Var; 6], features: &[f64]) -> Result<Var> {
        let [w1, b1, w2, b2, w3, b3] = *leaves;
        let x = tape.constant(&self.scaled(features));
        let a1 = tape.matvec(w1, x, self.hidden)?;
        let z1 = tape.add(a1, b1)?;
        let h1 = tape.tanh(z1)?;
        let a2 = tape.matvec(w2, h1, self.hidden)?;
        let z2 = tape.add(a2, b2)?;
        let h2 = tape.tanh(z2)?;
        let o = tape.dot(w3, h2)?;
        tape.add(o, b3)
    }

    pub fn record_leaves(&self, tape: &mut Tape) -> [Var; 6] {
        [W1, B1, W2, B2, W3, B3].map(|id| tape.param(&self.params, id))
    }

    /// Gradient of `½ mean (V(x_i) − target_i)²` over `indices`.
    pub fn grad_value_loss(
        &self,
        features: &[f64],
        targets: &[f64],
        indices: &[usize],
        exec: Execution,
    ) -> Result<(Gradients, f64)> {
        let n = indices.len();
        if n == 0 {
            return Err(Error::contract("empty minibatch"));
        }
        let f = self.feature_dim;
        let chunks: Vec<&[usize]> = indices.chunks(n.div_ceil(GRAD_CHUNKS)).collect();
        let scale = 0.5 / n as f64;
        let parts = exec.map(&chunks, |idx| -> Result<(Gradients, f64)> {
            let mut tape = Tape::with_capacity(idx.len() * 12 + 8, idx.len() * (6 * self.hidden + f) + self.params.len());
            let leaves = self.record_leaves(&mut tape);
            let mut sq = Vec::with_capacity(idx.len());
            for &i in *idx {
                let v = self.tape_value(&mut tape, &leaves, &features[i * f..(i + 1) * f])?;
                let t = tape.scalar(targets[i]);
                let d = tape.sub(v, t)?;
                sq.push(tape.square(d)?);
            }
            let all = tape.concat(&sq)?;
            let total = tape.sum(all)?;
            let s = tape.scalar(scale);
            let loss = tape.mul(total, s)?;
            let mut g = self.params.zeros_like();
            tape.backward(loss)?.accumulate_into(&mut g);
            Ok((g, tape.scalar_value(loss)))
        });
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for part in parts {
            let (g, l) = part?;
            grads.add_assign(&g);
            loss += l;
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Numerical(format!("non-finite value loss {loss}")));
        }
        Ok((grads, loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_plain_values_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Critic::new(4, 8, &mut rng);
        let x = [0.1, -0.4, 2.0, 0.3];
        let mut tape = Tape::new();
        let leaves = c.record_leaves(&mut tape);
        let v = c.tape_value(&mut tape, &leaves, &x).unwrap();
        assert!((tape.scalar_value(v) - c.value(&x)).abs() < 1e-14);
    }

    #[test]
    fn finite_for_extreme_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Critic::new(2, 64, &mut rng);
        assert!(c.value(&[1e12, -1e12]).is_finite());
    }
}
