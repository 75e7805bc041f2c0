use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relaxed_policy::RelaxedPolicy;
use crate::trainer::config::TrainConfig;
use crate::trainer::critic::Critic;
use crate::trainer::dual::DualState;
use crate::trainer::optim::Adam;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha stream. The word position is stored as a decimal
/// string because it does not fit in a JSON double.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCounter {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngCounter {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        RngCounter {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub step: usize,
    pub batches: usize,
    pub policy: RelaxedPolicy,
    pub critic: Critic,
    pub policy_optimizer: Adam,
    pub critic_optimizer: Adam,
    pub dual: DualState,
    pub shuffle_rng: RngCounter,
    pub worker_rngs: Vec<RngCounter>,
    pub baseline_extracted: bool,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {v}; expected {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(Error::Checkpoint("missing checkpoint version".into())),
        }
        let ck: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("version {CHECKPOINT_VERSION}: {e}")))?;
        let policy = ck.policy.clone().validated()?;
        if ck.critic.feature_dim() != policy.feature_dim() {
            return Err(Error::Checkpoint("critic and policy feature dimensions differ".into()));
        }
        let critic = ck.critic.clone().validated()?;
        Ok(Checkpoint { policy, critic, ..ck })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
