//! PPO training of relaxed program policies.

pub mod checkpoint;
pub mod config;
pub mod critic;
pub mod dual;
pub mod evaluate;
pub mod metrics;
pub mod optim;
pub mod rollout;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{make_env, Environment};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::extract::{discretize, extraction_gap, ExtractionReport, GapEstimate};
use crate::program::DiscreteProgram;
use crate::relaxed_policy::{RelaxedPolicy, SurrogateBatch, SurrogateSettings};

pub use checkpoint::{Checkpoint, RngCounter, CHECKPOINT_VERSION};
pub use config::{
    BaselineConfig, DualCadence, EvalConfig, HeadKind, Mode, PolicyConfig, PpoConfig, RegularizerConfig,
    RegularizerMode, TrainConfig,
};
pub use critic::Critic;
pub use dual::DualState;
pub use evaluate::{evaluate_program, evaluate_relaxed, EvalMode, EvalStats};
pub use metrics::MetricsRow;
pub use optim::Adam;
pub use rollout::{collect_rollouts, compute_gae, normalize_advantages, RolloutBatch, Worker};

/// Stream of the minibatch-shuffling generator; workers use `100 + w`.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    pub alpha: f64,
    pub minibatches: usize,
    /// Set when a non-finite loss aborted the epoch; parameters were
    /// restored to their pre-epoch values.
    pub aborted: Option<String>,
}

/// Mutable optimization state shared by successive epochs.
pub struct Learner<'a> {
    pub policy: &'a mut RelaxedPolicy,
    pub critic: &'a mut Critic,
    pub policy_optimizer: &'a mut Adam,
    pub critic_optimizer: &'a mut Adam,
    pub dual: &'a mut DualState,
}

/// One shuffled pass over the batch. `advantages` are the (possibly
/// normalized) values fed to the surrogate; critic targets are
/// `batch.returns`.
pub fn ppo_epoch(
    learner: &mut Learner<'_>,
    batch: &RolloutBatch,
    advantages: &[f64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    exec: Execution,
) -> EpochMetrics {
    let saved = (
        learner.policy.clone(),
        learner.critic.clone(),
        learner.policy_optimizer.clone(),
        learner.critic_optimizer.clone(),
        learner.dual.clone(),
    );
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.shuffle(rng);
    let mut m = EpochMetrics {
        policy_loss: 0.0,
        value_loss: 0.0,
        approx_kl: 0.0,
        clip_fraction: 0.0,
        entropy: learner.policy.depth_distribution().entropy,
        alpha: learner.dual.alpha(),
        minibatches: 0,
        aborted: None,
    };
    let result = (|| -> Result<()> {
        for idx in order.chunks(cfg.ppo.minibatch) {
            let sb = SurrogateBatch {
                features: &batch.features,
                actions: &batch.actions,
                old_log_probs: &batch.log_probs,
                advantages,
                indices: idx,
            };
            let settings = SurrogateSettings {
                alpha: learner.dual.alpha(),
                target_entropy: learner.dual.target,
                clip: cfg.ppo.clip,
            };
            let mut out = learner.policy.grad_surrogate(&sb, &settings, exec)?;
            out.grads.clip_norm(cfg.ppo.max_grad_norm);
            learner.policy_optimizer.step(learner.policy.params_mut(), &out.grads);

            let (mut vg, vloss) = learner.critic.grad_value_loss(&batch.features, &batch.returns, idx, exec)?;
            vg.clip_norm(cfg.ppo.max_grad_norm);
            learner.critic_optimizer.step(learner.critic.params_mut(), &vg);

            if cfg.regularizer.dual_cadence == DualCadence::Minibatch {
                learner.dual.update(out.entropy);
            }
            m.policy_loss += out.policy_loss;
            m.value_loss += vloss;
            m.approx_kl += out.approx_kl;
            m.clip_fraction += out.clip_fraction;
            m.minibatches += 1;
        }
        Ok(())
    })();
    if let Err(e) = result {
        log::warn!("epoch aborted: {e}");
        *learner.policy = saved.0;
        *learner.critic = saved.1;
        *learner.policy_optimizer = saved.2;
        *learner.critic_optimizer = saved.3;
        *learner.dual = saved.4;
        m.aborted = Some(e.to_string());
    }
    let k = m.minibatches.max(1) as f64;
    m.policy_loss /= k;
    m.value_loss /= k;
    m.approx_kl /= k;
    m.clip_fraction /= k;
    m.entropy = learner.policy.depth_distribution().entropy;
    m.alpha = learner.dual.alpha();
    m
}

/// Return gap logged when the two-phase baseline extracts its program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineExtraction {
    pub step: usize,
    pub depth: usize,
    pub report: ExtractionReport,
    /// Sampled relaxed return just before extraction minus the extracted
    /// program's return on the same seeds.
    pub gap: GapEstimate,
}

pub struct TrainOutcome {
    pub policy: RelaxedPolicy,
    pub critic: Critic,
    pub program: DiscreteProgram,
    pub report: ExtractionReport,
    pub metrics: Vec<MetricsRow>,
    /// Relaxed-versus-extracted returns for the final policy.
    pub final_gap: GapEstimate,
    pub baseline_extraction: Option<BaselineExtraction>,
    pub steps: usize,
    pub aborted_epochs: usize,
}

/// Hooks for streaming results while training runs.
pub trait TrainObserver {
    fn on_metrics(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
    fn on_baseline_extraction(&mut self, _event: &BaselineExtraction) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(config, &mut NoObserver)
}

/// Builds the initial policy and critic exactly as training does.
pub fn initial_models(config: &TrainConfig, env: &dyn Environment) -> Result<(RelaxedPolicy, Critic)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = env.feature_scale();
    let policy = RelaxedPolicy::new(env.feature_dim(), env.action_space(), config.policy.max_depth, &mut rng)?
        .with_input_scale(scale.clone())?;
    let critic = Critic::new(env.feature_dim(), config.ppo.critic_hidden, &mut rng).with_input_scale(scale)?;
    Ok((policy, critic))
}

pub fn train_with(config: &TrainConfig, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    config.validate()?;
    let exec = config.execution;
    let env = make_env(&config.env, &config.env_options)?;
    let eval_env = env.evaluation_copy();
    let (mut policy, mut critic) = initial_models(config, env.as_ref())?;
    let mut policy_opt = Adam::new(policy.params(), config.ppo.lr);
    let mut critic_opt = Adam::new(critic.params(), config.ppo.critic_lr);
    let mut dual = DualState::new(&config.regularizer, config.target_entropy());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut workers = rollout::make_workers(
        || make_env(&config.env, &config.env_options),
        config.num_envs,
        config.seed,
    )?;

    let gamma = config.gamma.unwrap_or_else(|| env.default_gamma());
    let total = config.total_steps;
    let switch_at = (config.baseline.extract_fraction * total as f64).ceil() as usize;
    let mut metrics = Vec::new();
    let mut baseline_extraction = None;
    let mut last_gap = None;
    let (mut step, mut batches, mut aborted_epochs) = (0usize, 0usize, 0usize);

    while step < total {
        let n = config.rollout_length.min(total - step);
        let active = config.num_envs.min(n);
        let mut batch = collect_rollouts(&policy, &critic, &mut workers[..active], n, exec)?;
        batch.compute_gae(gamma, config.gae_lambda);
        let mut adv = batch.advantages.clone();
        if config.ppo.normalize_advantages {
            normalize_advantages(&mut adv);
        }
        let mut last = None;
        for _ in 0..config.ppo.epochs {
            let mut learner = Learner {
                policy: &mut policy,
                critic: &mut critic,
                policy_optimizer: &mut policy_opt,
                critic_optimizer: &mut critic_opt,
                dual: &mut dual,
            };
            let m = ppo_epoch(&mut learner, &batch, &adv, config, &mut shuffle_rng, exec);
            if m.aborted.is_some() {
                aborted_epochs += 1;
            }
            last = Some(m);
        }
        if config.regularizer.dual_cadence == DualCadence::Rollout {
            dual.update(policy.depth_distribution().entropy);
        }
        step += n;
        batches += 1;

        let baseline_due = config.baseline.enabled && baseline_extraction.is_none() && step >= switch_at;
        if baseline_due {
            let (program, report) = discretize(&policy)?;
            let gap = extraction_gap(&policy, &program, eval_env.as_ref(), config.eval.episodes, config.eval.seed, exec)?;
            let event = BaselineExtraction {
                step,
                depth: report.chosen_depth,
                report,
                gap,
            };
            log::info!(
                "baseline extraction at step {step}: depth {}, relaxed {:.2}, extracted {:.2}",
                event.depth,
                event.gap.relaxed.mean,
                event.gap.extracted.mean
            );
            observer.on_baseline_extraction(&event)?;
            policy.freeze_depth(event.depth)?;
            policy_opt.reset();
            if !config.baseline.finetune {
                policy_opt.lr = 0.0;
                critic_opt.lr = 0.0;
            }
            baseline_extraction = Some(event);
        }

        if batches % config.eval.every == 0 || step >= total {
            let (program, _) = discretize(&policy)?;
            let gap = extraction_gap(&policy, &program, eval_env.as_ref(), config.eval.episodes, config.eval.seed, exec)?;
            let arch = policy.depth_distribution();
            let m = last.as_ref().expect("at least one epoch");
            let row = MetricsRow {
                step,
                mean_return: gap.relaxed.mean,
                eval_return_greedy: gap.extracted.mean,
                arch_entropy: arch.entropy,
                norm_entropy: arch.normalized_entropy,
                alpha: dual.alpha(),
                p_max: arch.p_max,
                mass_deleted: arch.mass_deleted,
                depth_argmax: arch.argmax_depth,
                policy_loss: m.policy_loss,
                value_loss: m.value_loss,
                approx_kl: m.approx_kl,
            };
            log::info!(
                "step {step}: relaxed {:.2}, program {:.2}, H_norm {:.4}, alpha {:.3e}",
                row.mean_return,
                row.eval_return_greedy,
                row.norm_entropy,
                row.alpha
            );
            observer.on_metrics(&row)?;
            metrics.push(row);
            if step >= total {
                last_gap = Some(gap);
            }
        }

        if step >= total || (config.checkpoint_every > 0 && batches % config.checkpoint_every == 0) {
            let ck = Checkpoint {
                version: CHECKPOINT_VERSION,
                config: config.clone(),
                step,
                batches,
                policy: policy.clone(),
                critic: critic.clone(),
                policy_optimizer: policy_opt.clone(),
                critic_optimizer: critic_opt.clone(),
                dual: dual.clone(),
                shuffle_rng: RngCounter::of(&shuffle_rng),
                worker_rngs: workers.iter().map(|w| RngCounter::of(w.rng())).collect(),
                baseline_extracted: baseline_extraction.is_some(),
            };
            observer.on_checkpoint(&ck)?;
        }
    }

    let (program, report) = discretize(&policy)?;
    let final_gap = match last_gap {
        Some(g) => g,
        None => extraction_gap(&policy, &program, eval_env.as_ref(), config.eval.episodes, config.eval.seed, exec)?,
    };
    if aborted_epochs > 0 {
        log::warn!("{aborted_epochs} epochs aborted on non-finite losses");
    }
    Ok(TrainOutcome {
        policy,
        critic,
        program,
        report,
        metrics,
        final_gap,
        baseline_extraction,
        steps: step,
        aborted_epochs,
    })
}

/// Fails with [`Error::Numerical`] when every epoch of a run was aborted.
pub fn check_outcome(outcome: &TrainOutcome, config: &TrainConfig) -> Result<()> {
    let batches = config.total_steps.div_ceil(config.rollout_length);
    if batches > 0 && outcome.aborted_epochs >= batches * config.ppo.epochs {
        return Err(Error::Numerical("every epoch aborted on a non-finite loss".into()));
    }
    Ok(())
}
