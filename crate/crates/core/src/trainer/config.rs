use serde::{Deserialize, Serialize};

use crate::envs::{make_env, ActionSpace, EnvOptions};
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub env: String,
    pub env_options: EnvOptions,
    pub seed: u64,
    pub total_steps: usize,
    /// Transitions per rollout, summed over all workers.
    pub rollout_length: usize,
    pub num_envs: usize,
    /// Discount; `None` takes the environment's default.
    pub gamma: Option<f64>,
    pub gae_lambda: f64,
    pub ppo: PpoConfig,
    pub policy: PolicyConfig,
    pub regularizer: RegularizerConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub execution: Execution,
    /// Save a checkpoint every this many rollouts (0: only the final one).
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub lr: f64,
    pub critic_lr: f64,
    pub max_grad_norm: f64,
    pub normalize_advantages: bool,
    pub critic_hidden: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Follow the environment's action space.
    #[default]
    Auto,
    Discrete,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub max_depth: usize,
    pub head: HeadKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    /// α tuned by dual ascent toward the target entropy.
    #[default]
    Auto,
    Fixed,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DualCadence {
    /// One dual step after every minibatch update.
    #[default]
    Minibatch,
    /// One dual step per rollout.
    Rollout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub mode: RegularizerMode,
    pub alpha_fixed: f64,
    /// `H̄ = target_fraction · ln D_m`.
    pub target_fraction: f64,
    pub lr_alpha: f64,
    pub log_alpha_init: f64,
    pub log_alpha_min: f64,
    pub log_alpha_max: f64,
    pub dual_cadence: DualCadence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub enabled: bool,
    /// Fraction of the budget after which the program is extracted.
    pub extract_fraction: f64,
    /// Keep training predicates, heads and critic after extraction.
    pub finetune: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Evaluate every this many rollouts.
    pub every: usize,
    /// Episode `i` of every evaluation resets with seed `seed + i`.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            env: "cartpole".into(),
            env_options: EnvOptions::default(),
            seed: 0,
            total_steps: 300_000,
            rollout_length: 2048,
            num_envs: 4,
            gamma: None,
            gae_lambda: 0.95,
            ppo: PpoConfig::default(),
            policy: PolicyConfig::default(),
            regularizer: RegularizerConfig::default(),
            baseline: BaselineConfig::default(),
            eval: EvalConfig::default(),
            execution: Execution::default(),
            checkpoint_every: 0,
        }
    }
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            epochs: 10,
            minibatch: 64,
            clip: 0.2,
            lr: 1e-3,
            critic_lr: 1e-3,
            max_grad_norm: 0.5,
            normalize_advantages: true,
            critic_hidden: 64,
        }
    }
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            max_depth: 6,
            head: HeadKind::Auto,
        }
    }
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            mode: RegularizerMode::Auto,
            alpha_fixed: 0.0,
            target_fraction: 0.1,
            lr_alpha: 1e-4,
            log_alpha_init: -10.0,
            log_alpha_min: -10.0,
            log_alpha_max: 10.0,
            dual_cadence: DualCadence::Minibatch,
        }
    }
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            enabled: false,
            extract_fraction: 0.2,
            finetune: true,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 30,
            every: 10,
            seed: 10_000,
        }
    }
}

/// Preset training modes exposed on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Diprl,
    PiprlBaseline,
    PpoOff,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diprl" => Ok(Mode::Diprl),
            "piprl-baseline" => Ok(Mode::PiprlBaseline),
            "ppo-off" => Ok(Mode::PpoOff),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}; expected diprl, piprl-baseline or ppo-off"
            ))),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply_mode(&mut self, mode: Mode) {
        match mode {
            Mode::Diprl => {
                self.regularizer.mode = RegularizerMode::Auto;
                self.baseline.enabled = false;
            }
            Mode::PiprlBaseline => {
                self.regularizer.mode = RegularizerMode::Off;
                self.baseline.enabled = true;
            }
            Mode::PpoOff => {
                self.regularizer.mode = RegularizerMode::Off;
                self.baseline.enabled = false;
            }
        }
    }

    /// The discount in effect: the configured one or the environment's.
    pub fn discount(&self) -> Result<f64> {
        match self.gamma {
            Some(g) => Ok(g),
            None => Ok(make_env(&self.env, &self.env_options)?.default_gamma()),
        }
    }

    /// Replaces environment-dependent defaults by their values.
    pub fn resolve(&mut self) -> Result<()> {
        self.gamma = Some(self.discount()?);
        Ok(())
    }

    pub fn set_alpha_fixed(&mut self, alpha: f64) {
        self.regularizer.mode = RegularizerMode::Fixed;
        self.regularizer.alpha_fixed = alpha;
    }

    /// `H̄ = target_fraction · ln D_m` (natural log).
    pub fn target_entropy(&self) -> f64 {
        self.regularizer.target_fraction * (self.policy.max_depth as f64).ln()
    }

    pub fn action_space(&self) -> Result<ActionSpace> {
        Ok(make_env(&self.env, &self.env_options)?.action_space())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let space = self.action_space()?;
        match (self.policy.head, &space) {
            (HeadKind::Discrete, ActionSpace::Continuous { .. }) | (HeadKind::Gaussian, ActionSpace::Discrete(_)) => {
                return bad(format!("head kind {:?} does not fit {} actions", self.policy.head, self.env));
            }
            _ => {}
        }
        if self.rollout_length == 0 || self.num_envs == 0 || self.num_envs > self.rollout_length {
            return bad("need 1 <= num_envs <= rollout_length".into());
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g <= 1.0) {
                return bad(format!("gamma {g} outside (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} outside [0, 1]", self.gae_lambda));
        }
        let p = &self.ppo;
        if p.epochs == 0 || p.minibatch == 0 || p.critic_hidden == 0 {
            return bad("epochs, minibatch and critic_hidden must be positive".into());
        }
        if !(p.clip > 0.0) || !(p.lr >= 0.0) || !(p.critic_lr >= 0.0) || !(p.max_grad_norm > 0.0) {
            return bad("clip and max_grad_norm must be positive, learning rates nonnegative".into());
        }
        if self.policy.max_depth == 0 {
            return bad("max_depth must be at least 1".into());
        }
        let r = &self.regularizer;
        if !(0.0..=1.0).contains(&r.target_fraction) {
            return bad(format!("target_fraction {} outside [0, 1]", r.target_fraction));
        }
        if !(r.alpha_fixed >= 0.0) || !(r.lr_alpha >= 0.0) {
            return bad("alpha_fixed and lr_alpha must be nonnegative".into());
        }
        if !(r.log_alpha_min <= r.log_alpha_init && r.log_alpha_init <= r.log_alpha_max) {
            return bad("need log_alpha_min <= log_alpha_init <= log_alpha_max".into());
        }
        if !(self.baseline.extract_fraction > 0.0 && self.baseline.extract_fraction < 1.0) {
            return bad(format!("extract_fraction {} outside (0, 1)", self.baseline.extract_fraction));
        }
        if self.eval.episodes == 0 || self.eval.every == 0 {
            return bad("eval episodes and cadence must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        assert!((c.target_entropy() - 0.1 * 6f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(TrainConfig::from_json(r#"{"env": "cartpole", "lr": 1}"#), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::from_json(r#"{"ppo": {"epoch": 3}}"#), Err(Error::Config(_))));
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = TrainConfig::from_json(r#"{"env": "mountaincar", "seed": 7}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.ppo.minibatch, 64);
    }

    #[test]
    fn invalid_values_rejected() {
        for bad in [
            r#"{"env": "pong"}"#,
            r#"{"regularizer": {"target_fraction": 1.5}}"#,
            r#"{"baseline": {"extract_fraction": 1.0}}"#,
            r#"{"policy": {"head": "gaussian"}}"#,
            r#"{"num_envs": 0}"#,
        ] {
            assert!(TrainConfig::from_json(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn modes_and_overrides() {
        let mut c = TrainConfig::default();
        c.apply_mode("piprl-baseline".parse().unwrap());
        assert!(c.baseline.enabled);
        assert_eq!(c.regularizer.mode, RegularizerMode::Off);
        c.set_alpha_fixed(0.5);
        assert_eq!(c.regularizer.mode, RegularizerMode::Fixed);
        assert_eq!(c.regularizer.alpha_fixed, 0.5);
        assert!("warp".parse::<Mode>().is_err());
    }
}
