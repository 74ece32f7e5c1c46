//! Clipped-surrogate PPO on token-level episodes: GAE advantages, policy and
//! value losses, and the minibatched ascent loop with gradient accumulation.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::mdp::{TokenSeq, Transition};
use crate::nn::{NnError, Optimizer, ParamStore, Upstream};
use crate::policy::{log_softmax, sentence_kl, softmax, SampledAction};
use crate::rewards::shape_rewards;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient in minibatch {minibatch} (epoch {epoch}): {source}")]
    NonFiniteGradient {
        epoch: usize,
        minibatch: usize,
        source: NnError,
    },
}

/// Update hyperparameters. Field meanings follow the usual PPO vocabulary:
/// `clip_range` is the surrogate clip epsilon, `value_coeff` weights the
/// value loss in the total objective, `kl_coeff` is the reward-shaping eta.
#[derive(Debug, Clone)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub clip_range: f64,
    pub value_coeff: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub kl_coeff: f64,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub grad_accum_steps: usize,
    pub value_clip: Option<f64>,
    pub advantage_norm: bool,
    /// Train only the value head (critic warmup); the policy surrogate still
    /// gets evaluated for stats but contributes no gradient.
    pub value_only: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            clip_range: 0.2,
            value_coeff: 0.1,
            discount: 1.0,
            gae_lambda: 0.95,
            kl_coeff: 0.05,
            ppo_epochs: 4,
            minibatch_size: 0, // 0 = full batch
            grad_accum_steps: 1,
            value_clip: Some(0.2),
            advantage_norm: false,
            value_only: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: String| Err(PpoError::InvalidConfig(m));
        if self.clip_range <= 0.0 || self.clip_range >= 1.0 {
            return bad(format!("clip_range {} outside (0,1)", self.clip_range));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return bad(format!("discount {} outside [0,1]", self.discount));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda {} outside [0,1]", self.gae_lambda));
        }
        if self.ppo_epochs < 1 {
            return bad("ppo_epochs must be >= 1".into());
        }
        if self.grad_accum_steps < 1 {
            return bad("grad_accum_steps must be >= 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        if !self.kl_coeff.is_finite() || self.kl_coeff < 0.0 {
            return bad(format!("kl_coeff {}", self.kl_coeff));
        }
        if let Some(c) = self.value_clip {
            if !c.is_finite() || c <= 0.0 {
                return bad(format!("value_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// One rolled-out episode with everything the loss needs, one entry per real
/// action token.
#[derive(Debug, Clone)]
pub struct Episode {
    pub prompt: TokenSeq,
    pub action: TokenSeq,
    pub rewards: Vec<f64>,
    pub old_logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Per-token KLs recorded at sampling time.
    pub token_kls: Vec<f64>,
    /// The agent's own task score on this episode (monitoring only; the
    /// terminal shaped reward may carry a collective score instead).
    pub task_reward: f64,
    /// Sentence KL recorded at sampling time.
    pub kl_sum: f64,
}

impl Episode {
    /// Shapes token rewards from the sampled action, runs GAE, and fills the
    /// value targets. `terminal_task` is the score handed to the terminal
    /// token (collective or individual); `own_task` is the agent's own score,
    /// kept for metrics.
    pub fn from_rollout(
        prompt: TokenSeq,
        sampled: &SampledAction,
        terminal_task: f64,
        own_task: f64,
        cfg: &PpoConfig,
    ) -> Result<Self, PpoError> {
        if sampled.is_empty() {
            return Err(PpoError::InvalidBatch("empty sampled action".into()));
        }
        let rewards = shape_rewards(terminal_task, &sampled.token_kls, cfg.kl_coeff);
        let advantages = gae(&rewards, &sampled.values, cfg.discount, cfg.gae_lambda)?;
        let returns: Vec<f64> = advantages
            .iter()
            .zip(&sampled.values)
            .map(|(a, v)| a + v)
            .collect();
        Ok(Self {
            prompt,
            action: sampled.action.clone(),
            rewards,
            old_logprobs: sampled.token_logprobs.clone(),
            values: sampled.values.clone(),
            advantages,
            returns,
            token_kls: sampled.token_kls.clone(),
            task_reward: own_task,
            kl_sum: sampled.kl_sum(),
        })
    }

    pub fn len(&self) -> usize {
        self.action.real_len()
    }

    pub fn is_empty(&self) -> bool {
        self.action.real_len() == 0
    }

    fn check(&self) -> Result<(), PpoError> {
        let n = self.len();
        if n == 0 {
            return Err(PpoError::InvalidBatch("episode with empty action".into()));
        }
        for (name, len) in [
            ("rewards", self.rewards.len()),
            ("old_logprobs", self.old_logprobs.len()),
            ("values", self.values.len()),
            ("advantages", self.advantages.len()),
            ("returns", self.returns.len()),
            ("token_kls", self.token_kls.len()),
        ] {
            if len != n {
                return Err(PpoError::LengthMismatch(format!(
                    "{name} has {len} entries for an action of {n} tokens"
                )));
            }
        }
        Ok(())
    }

    /// Materializes the per-token transition chain of this episode.
    pub fn transitions(&self) -> Vec<Transition> {
        crate::mdp::episode_transitions(&self.prompt, self.action.real_tokens(), &self.rewards)
            .expect("prompt capacity admitted the action during sampling")
    }
}

/// A batch of episodes, one record per real token across the batch.
#[derive(Debug, Clone, Default)]
pub struct TokenBatch {
    pub episodes: Vec<Episode>,
}

impl TokenBatch {
    pub fn new(episodes: Vec<Episode>) -> Self {
        Self { episodes }
    }

    pub fn token_count(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn mean_task_reward(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.task_reward))
    }

    pub fn mean_sentence_kl(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.kl_sum))
    }

    /// Mean combined metric r_c over the batch, computed from each episode's
    /// own task score and recorded sentence KL.
    pub fn mean_combined(&self, eta: f64) -> f64 {
        mean(self.episodes.iter().map(|e| e.task_reward - eta * e.kl_sum))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in it {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Generalized advantage estimation with a zero bootstrap one past the
/// terminal: adv[i] = sum_{j>=i} (gamma*lambda)^(j-i) * delta_j.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>, PpoError> {
    if rewards.len() != values.len() {
        return Err(PpoError::LengthMismatch(format!(
            "rewards {} vs values {}",
            rewards.len(),
            values.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for i in (0..n).rev() {
        let v_next = if i + 1 < n { values[i + 1] } else { 0.0 };
        let delta = rewards[i] + gamma * v_next - values[i];
        acc = delta + gamma * lambda * acc;
        adv[i] = acc;
    }
    Ok(adv)
}

/// Mean over tokens of min(ratio*adv, clip(ratio)*adv); the trainer ascends
/// this surrogate.
pub fn policy_loss(
    new_logprobs: &[f64],
    old_logprobs: &[f64],
    advantages: &[f64],
    eps: f64,
) -> f64 {
    assert_eq!(new_logprobs.len(), old_logprobs.len());
    assert_eq!(new_logprobs.len(), advantages.len());
    let n = new_logprobs.len();
    let mut sum = 0.0;
    for i in 0..n {
        let ratio = (new_logprobs[i] - old_logprobs[i]).exp();
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
        sum += (ratio * advantages[i]).min(clipped * advantages[i]);
    }
    sum / n as f64
}

/// Mean squared error between predicted values and empirical returns.
pub fn value_loss(pred_values: &[f64], target_returns: &[f64]) -> f64 {
    assert_eq!(pred_values.len(), target_returns.len());
    let n = pred_values.len();
    let sum: f64 = pred_values
        .iter()
        .zip(target_returns)
        .map(|(v, r)| (v - r) * (v - r))
        .sum();
    sum / n as f64
}

/// Per-update diagnostics; every field lands in the run's metrics row.
#[derive(Debug, Clone, Default)]
pub struct UpdateStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub grad_norm: f64,
    /// Exact mean sentence KL of the updated model against the reference,
    /// recomputed over the batch prompts/actions after the last epoch.
    pub post_kl: f64,
    pub optimizer_steps: usize,
}

struct EpisodePass {
    trace: crate::nn::ForwardTrace,
    upstream: Upstream,
    policy_sum: f64,
    value_sum: f64,
    ratio_sum: f64,
    clipped: usize,
    tokens: usize,
}

// Evaluates one episode under the current parameters: losses, and the logits
// /value cotangents scaled by `scale` (the reciprocal minibatch token count).
fn eval_episode(
    model: &ParamStore,
    ep: &Episode,
    adv: &[f64],
    cfg: &PpoConfig,
    scale: f64,
) -> EpisodePass {
    let ctx = ep.prompt.concat(&ep.action);
    let trace = model.forward(&ctx);
    let vsize = model.arch().vocab_size;
    let mut upstream = Upstream::zeros(trace.len(), vsize);
    let p_len = ep.prompt.real_len();
    let eps = cfg.clip_range;
    let beta = cfg.value_coeff;
    let mut policy_sum = 0.0;
    let mut value_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    for (t, &w) in ep.action.real_tokens().iter().enumerate() {
        let row = p_len + t - 1;
        let new_lp = log_softmax(&trace.logits[row])[w];
        let ratio = (new_lp - ep.old_logprobs[t]).exp();
        let a = adv[t];
        let unclipped = ratio * a;
        let clip_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
        let clipped_term = clip_ratio * a;
        ratio_sum += ratio;
        if ratio < 1.0 - eps || ratio > 1.0 + eps {
            clipped += 1;
        }
        let (term, dterm_dlp) = if unclipped <= clipped_term {
            (unclipped, a * ratio) // d(ratio*a)/d new_lp = a * ratio
        } else {
            // clipped branch; zero slope when the clamp is saturated
            let slope = if ratio > 1.0 - eps && ratio < 1.0 + eps {
                a * ratio
            } else {
                0.0
            };
            (clipped_term, slope)
        };
        policy_sum += term;

        let v = trace.values[row];
        let target = ep.returns[t];
        let (vloss, dv) = match cfg.value_clip {
            None => ((v - target) * (v - target), 2.0 * (v - target)),
            Some(c) => {
                let v_old = ep.values[t];
                let v_clip = v_old + (v - v_old).clamp(-c, c);
                let l_plain = (v - target) * (v - target);
                let l_clip = (v_clip - target) * (v_clip - target);
                if l_plain >= l_clip {
                    (l_plain, 2.0 * (v - target))
                } else {
                    let slope = if (v - v_old).abs() < c {
                        2.0 * (v_clip - target)
                    } else {
                        0.0
                    };
                    (l_clip, slope)
                }
            }
        };
        value_sum += vloss;

        // ascent on L = L_policy - beta * L_value
        let dlp = if cfg.value_only {
            0.0
        } else {
            dterm_dlp * scale
        };
        let probs = softmax(&trace.logits[row]);
        for (j, pj) in probs.iter().enumerate() {
            upstream.dlogits[row][j] = dlp * (if j == w { 1.0 - pj } else { -pj });
        }
        upstream.dvalues[row] = -beta * dv * scale;
    }
    EpisodePass {
        trace,
        upstream,
        policy_sum,
        value_sum,
        ratio_sum,
        clipped,
        tokens: ep.len(),
    }
}

/// The total objective L = L_policy - beta * L_value evaluated over the whole
/// batch (single-minibatch semantics). Pure in the model.
pub fn total_loss(model: &ParamStore, batch: &TokenBatch, cfg: &PpoConfig) -> f64 {
    let t: usize = batch.token_count();
    let mut psum = 0.0;
    let mut vsum = 0.0;
    for ep in &batch.episodes {
        let pass = eval_episode(model, ep, &ep.advantages, cfg, 0.0);
        psum += pass.policy_sum;
        vsum += pass.value_sum;
    }
    psum / t as f64 - cfg.value_coeff * (vsum / t as f64)
}

/// Like [`total_loss`] but also accumulates the ascent gradient into the
/// model's gradient buffer.
pub fn total_loss_grad(
    model: &mut ParamStore,
    batch: &TokenBatch,
    cfg: &PpoConfig,
) -> Result<f64, PpoError> {
    let t = batch.token_count();
    let scale = 1.0 / t as f64;
    let mut psum = 0.0;
    let mut vsum = 0.0;
    for ep in &batch.episodes {
        let pass = eval_episode(model, ep, &ep.advantages, cfg, scale);
        model
            .backward(&pass.trace, &pass.upstream)
            .map_err(|source| PpoError::NonFiniteGradient {
                epoch: 0,
                minibatch: 0,
                source,
            })?;
        psum += pass.policy_sum;
        vsum += pass.value_sum;
    }
    Ok(psum * scale - cfg.value_coeff * (vsum * scale))
}

/// Runs `ppo_epochs` passes of minibatched gradient ascent on the clipped
/// objective. Minibatch order reshuffles per epoch from `rng`; gradients
/// accumulate over `grad_accum_steps` minibatches per optimizer step. On a
/// non-finite gradient the offending step is skipped, parameters stay at
/// their last good state, and the error reports the minibatch.
pub fn update(
    model: &mut ParamStore,
    ref_model: &ParamStore,
    batch: &TokenBatch,
    cfg: &PpoConfig,
    opt: &mut Optimizer,
    rng: &mut StdRng,
) -> Result<UpdateStats, PpoError> {
    cfg.validate()?;
    if batch.episodes.is_empty() {
        return Err(PpoError::InvalidBatch("no episodes".into()));
    }
    for ep in &batch.episodes {
        ep.check()?;
    }
    let n = batch.episodes.len();
    let mb_size = if cfg.minibatch_size == 0 {
        n
    } else {
        cfg.minibatch_size.min(n)
    };

    // Advantages, optionally normalized over the whole batch.
    let advs: Vec<Vec<f64>> = if cfg.advantage_norm {
        let all: Vec<f64> = batch
            .episodes
            .iter()
            .flat_map(|e| e.advantages.iter().copied())
            .collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / all.len() as f64;
        let sd = var.sqrt().max(1e-8);
        batch
            .episodes
            .iter()
            .map(|e| e.advantages.iter().map(|a| (a - m) / sd).collect())
            .collect()
    } else {
        batch
            .episodes
            .iter()
            .map(|e| e.advantages.clone())
            .collect()
    };

    model.zero_grad();
    let mut stats = UpdateStats::default();
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut tokens_seen = 0usize;
    let mut psum = 0.0;
    let mut vsum = 0.0;
    let mut grad_norm_sum = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.ppo_epochs {
        order.shuffle(rng);
        let minibatches: Vec<&[usize]> = order.chunks(mb_size).collect();
        for (group_idx, group) in minibatches.chunks(cfg.grad_accum_steps).enumerate() {
            for (k, mb) in group.iter().enumerate() {
                let mb_tokens: usize = mb.iter().map(|&i| batch.episodes[i].len()).sum();
                let scale = 1.0 / mb_tokens as f64;
                for &i in mb.iter() {
                    let ep = &batch.episodes[i];
                    let pass = eval_episode(model, ep, &advs[i], cfg, scale);
                    model
                        .backward(&pass.trace, &pass.upstream)
                        .map_err(|source| PpoError::NonFiniteGradient {
                            epoch,
                            minibatch: group_idx * cfg.grad_accum_steps + k,
                            source,
                        })?;
                    ratio_sum += pass.ratio_sum;
                    clipped += pass.clipped;
                    tokens_seen += pass.tokens;
                    psum += pass.policy_sum / mb_tokens as f64;
                    vsum += pass.value_sum / mb_tokens as f64;
                }
            }
            if group.len() > 1 {
                model.scale_grad(1.0 / group.len() as f64);
            }
            grad_norm_sum += model.grad_norm();
            opt.step(model, cfg.learning_rate)
                .map_err(|source| PpoError::NonFiniteGradient {
                    epoch,
                    minibatch: group_idx * cfg.grad_accum_steps,
                    source,
                })?;
            stats.optimizer_steps += 1;
        }
    }
    stats.mean_ratio = ratio_sum / tokens_seen as f64;
    stats.clip_fraction = clipped as f64 / tokens_seen as f64;
    let total_minibatches = stats.optimizer_steps.max(1);
    stats.policy_loss = psum / (cfg.ppo_epochs * batch.episodes.len().div_ceil(mb_size)) as f64;
    stats.value_loss = vsum / (cfg.ppo_epochs * batch.episodes.len().div_ceil(mb_size)) as f64;
    stats.grad_norm = grad_norm_sum / total_minibatches as f64;
    stats.post_kl = mean(
        batch
            .episodes
            .iter()
            .map(|e| sentence_kl(model, ref_model, &e.prompt, &e.action)),
    );
    Ok(stats)
}
