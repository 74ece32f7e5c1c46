//! The duo trainer: a pioneer answers the raw query, an observer answers with
//! the pioneer's response spliced into its prompt, both share the collective
//! reward, and the two parameter sets periodically exchange roles.

use rand::rngs::StdRng;
use thiserror::Error;

use crate::mdp::{TokenId, TokenSeq};
use crate::nn::{Optimizer, ParamStore};
use crate::par::par_map_indexed;
use crate::policy::{sample_action, SampledAction};
use crate::ppo::{update, Episode, PpoConfig, PpoError, TokenBatch, UpdateStats};
use crate::rewards::collective_reward;
use crate::rng::{site, RngFactory};
use crate::tasks::TaskReward;

#[derive(Debug, Error)]
pub enum CoryError {
    #[error("{role:?} update failed: {source}")]
    Update { role: Role, source: PpoError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Pioneer,
    Observer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    Collective,
    Individual,
}

/// Ablation switches. Full duo training is all-on/collective; turning
/// everything down to individual/off degenerates to two independent
/// single-agent runs.
#[derive(Debug, Clone, Copy)]
pub struct CoryFlags {
    pub knowledge_transfer: bool,
    pub role_exchange: bool,
    pub reward_mode: RewardMode,
}

impl Default for CoryFlags {
    fn default() -> Self {
        Self {
            knowledge_transfer: true,
            role_exchange: true,
            reward_mode: RewardMode::Collective,
        }
    }
}

/// Structural parameters of a rollout.
#[derive(Debug, Clone, Copy)]
pub struct DuoSettings {
    pub max_new: usize,
    pub sep_id: TokenId,
}

/// Two parameter sets, the frozen reference they were duplicated from, and
/// the role binding. `swap == false` binds slot 0 to the pioneer role.
#[derive(Debug, Clone)]
pub struct AgentPair {
    params: [ParamStore; 2],
    opts: [Optimizer; 2],
    ref_model: ParamStore,
    swap: bool,
    t_rex: usize,
    k: usize,
}

impl AgentPair {
    /// Duplicates the reference model into both agents.
    pub fn duplicate(ref_model: ParamStore, t_rex: usize, adam: bool) -> Self {
        assert!(t_rex >= 1);
        let opt = || {
            if adam {
                Optimizer::adam(ref_model.param_count())
            } else {
                Optimizer::sgd()
            }
        };
        Self {
            params: [ref_model.clone(), ref_model.clone()],
            opts: [opt(), opt()],
            ref_model,
            swap: false,
            t_rex,
            k: 0,
        }
    }

    pub fn swap(&self) -> bool {
        self.swap
    }

    pub fn iteration(&self) -> usize {
        self.k
    }

    pub fn t_rex(&self) -> usize {
        self.t_rex
    }

    /// Which slot currently plays the pioneer.
    pub fn pioneer_slot(&self) -> usize {
        usize::from(self.swap)
    }

    pub fn observer_slot(&self) -> usize {
        1 - self.pioneer_slot()
    }

    pub fn pioneer_params(&self) -> &ParamStore {
        &self.params[self.pioneer_slot()]
    }

    pub fn observer_params(&self) -> &ParamStore {
        &self.params[self.observer_slot()]
    }

    pub fn agent_params(&self, slot: usize) -> &ParamStore {
        &self.params[slot]
    }

    pub fn ref_model(&self) -> &ParamStore {
        &self.ref_model
    }
}

/// Re-binds the roles of the two parameter sets. No parameter values move;
/// only the role assignment flips.
pub fn role_exchange(pair: &mut AgentPair) {
    pair.swap = !pair.swap;
}

/// One duo rollout for a single query.
#[derive(Debug, Clone)]
pub struct DuoRollout {
    pub query: TokenSeq,
    pub pioneer: SampledAction,
    pub observer: SampledAction,
    pub observer_prompt: TokenSeq,
    pub r_pio: f64,
    pub r_obs: f64,
    pub r_cory: f64,
    pub truncated: bool,
}

/// Builds the observer's prompt: `query <sep> pioneer-response <sep>`, with
/// the response's trailing eos stripped. If the concatenation would not leave
/// room for the observer's own `reserve` generated tokens within the prompt's
/// capacity, the response is truncated from the right.
pub fn observer_prompt(
    query: &TokenSeq,
    pioneer_action: &TokenSeq,
    sep_id: TokenId,
    reserve: usize,
) -> (TokenSeq, bool) {
    let capacity = query.max_len();
    let budget = capacity
        .saturating_sub(reserve)
        .saturating_sub(query.real_len() + 2);
    let reference = pioneer_action.real_tokens_without_eos();
    let take = reference.len().min(budget);
    let truncated = take < reference.len();
    let mut out = TokenSeq::empty_like(query, capacity);
    for &t in query.real_tokens() {
        out = out.append(t).expect("capacity bounds checked");
    }
    out = out.append(sep_id).expect("capacity bounds checked");
    for &t in &reference[..take] {
        out = out.append(t).expect("capacity bounds checked");
    }
    out = out.append(sep_id).expect("capacity bounds checked");
    (out, truncated)
}

/// Recovers the reference segment of an observer prompt: the tokens strictly
/// between the first and last separator.
pub fn strip_reference(obs_prompt: &TokenSeq, sep_id: TokenId) -> Option<Vec<TokenId>> {
    let toks = obs_prompt.real_tokens();
    let first = toks.iter().position(|&t| t == sep_id)?;
    let last = toks.iter().rposition(|&t| t == sep_id)?;
    if last <= first {
        return None;
    }
    Some(toks[first + 1..last].to_vec())
}

/// One single-agent rollout leg: sample an action from the query and score
/// it. The baseline runner and the duo pioneer leg share this path.
pub fn solo_step<T: TaskReward + ?Sized>(
    params: &ParamStore,
    ref_model: &ParamStore,
    query: &TokenSeq,
    task: &T,
    max_new: usize,
    rng: &mut StdRng,
) -> (SampledAction, f64) {
    let sampled = sample_action(params, ref_model, query, max_new, rng);
    let reward = task.reward(query, &sampled.action);
    (sampled, reward)
}

/// Pioneer answers the raw query; observer answers the knowledge-transfer
/// prompt (or the raw query when transfer is off); both are scored against
/// the original query and share the collective reward.
pub fn duo_step<T: TaskReward + ?Sized>(
    pair: &AgentPair,
    query: &TokenSeq,
    task: &T,
    flags: &CoryFlags,
    settings: &DuoSettings,
    rng_pio: &mut StdRng,
    rng_obs: &mut StdRng,
) -> DuoRollout {
    let (pioneer, r_pio) = solo_step(
        pair.pioneer_params(),
        pair.ref_model(),
        query,
        task,
        settings.max_new,
        rng_pio,
    );
    let (obs_prompt, truncated) = if flags.knowledge_transfer {
        observer_prompt(query, &pioneer.action, settings.sep_id, settings.max_new)
    } else {
        (query.clone(), false)
    };
    let observer = sample_action(
        pair.observer_params(),
        pair.ref_model(),
        &obs_prompt,
        settings.max_new,
        rng_obs,
    );
    let r_obs = task.reward(query, &observer.action);
    let r_cory = collective_reward(r_pio, r_obs);
    DuoRollout {
        query: query.clone(),
        pioneer,
        observer,
        observer_prompt: obs_prompt,
        r_pio,
        r_obs,
        r_cory,
        truncated,
    }
}

/// Per-agent numbers for one iteration: its role this iteration, pre-update
/// batch statistics, and the update diagnostics.
#[derive(Debug, Clone)]
pub struct AgentIterStats {
    pub role: Role,
    pub mean_task_reward: f64,
    pub mean_sentence_kl: f64,
    pub mean_combined: f64,
    pub update: UpdateStats,
}

/// Everything one duo iteration produced. Slot indices are parameter
/// identities (slot 0 is the initial pioneer), stable across role exchanges.
#[derive(Debug)]
pub struct IterationStats {
    pub iteration: usize,
    pub per_slot: [AgentIterStats; 2],
    pub exchanged: bool,
    pub truncations: usize,
    pub pioneer_batch: TokenBatch,
    pub observer_batch: TokenBatch,
    pub outcomes: Vec<(f64, f64, f64)>,
}

/// One full duo iteration: rollouts over the query batch (data-parallel),
/// per-role reward shaping and GAE, one update per agent, then the scheduled
/// role exchange. The iteration counter advances even when an update fails,
/// but parameters stay at their last good state.
pub fn cory_iteration<T: TaskReward + ?Sized>(
    pair: &mut AgentPair,
    queries: &[TokenSeq],
    task: &T,
    cfg: &PpoConfig,
    flags: &CoryFlags,
    settings: &DuoSettings,
    rngf: &RngFactory,
) -> Result<IterationStats, CoryError> {
    assert!(
        !queries.is_empty(),
        "iteration needs a nonempty query batch"
    );
    let iter = pair.k as u64;
    let shared: &AgentPair = pair;
    let rollouts: Vec<DuoRollout> = par_map_indexed(queries.len(), |q| {
        let mut rng_pio = rngf.stream(&[site::ROLLOUT, iter, q as u64, 0]);
        let mut rng_obs = rngf.stream(&[site::ROLLOUT, iter, q as u64, 1]);
        duo_step(
            shared,
            &queries[q],
            task,
            flags,
            settings,
            &mut rng_pio,
            &mut rng_obs,
        )
    });

    let truncations = rollouts.iter().filter(|r| r.truncated).count();
    let outcomes: Vec<(f64, f64, f64)> = rollouts
        .iter()
        .map(|r| (r.r_pio, r.r_obs, r.r_cory))
        .collect();

    let terminal = |own: f64, cory: f64| match flags.reward_mode {
        RewardMode::Collective => cory,
        RewardMode::Individual => own,
    };
    let build = |eps: Result<Vec<Episode>, PpoError>, role: Role| {
        eps.map(TokenBatch::new)
            .map_err(|source| CoryError::Update { role, source })
    };
    let pioneer_batch = build(
        rollouts
            .iter()
            .map(|r| {
                Episode::from_rollout(
                    r.query.clone(),
                    &r.pioneer,
                    terminal(r.r_pio, r.r_cory),
                    r.r_pio,
                    cfg,
                )
            })
            .collect(),
        Role::Pioneer,
    )?;
    let observer_batch = build(
        rollouts
            .iter()
            .map(|r| {
                Episode::from_rollout(
                    r.observer_prompt.clone(),
                    &r.observer,
                    terminal(r.r_obs, r.r_cory),
                    r.r_obs,
                    cfg,
                )
            })
            .collect(),
        Role::Observer,
    )?;
    drop(rollouts);

    let role_stats = |batch: &TokenBatch, role: Role, update: UpdateStats| AgentIterStats {
        role,
        mean_task_reward: batch.mean_task_reward(),
        mean_sentence_kl: batch.mean_sentence_kl(),
        mean_combined: batch.mean_combined(cfg.kl_coeff),
        update,
    };

    let pio_slot = pair.pioneer_slot();
    let obs_slot = pair.observer_slot();
    let pio_update = {
        let mut rng = rngf.stream(&[site::UPDATE, iter, 0]);
        update(
            &mut pair.params[pio_slot],
            &pair.ref_model,
            &pioneer_batch,
            cfg,
            &mut pair.opts[pio_slot],
            &mut rng,
        )
        .map_err(|source| CoryError::Update {
            role: Role::Pioneer,
            source,
        })?
    };
    let obs_update = {
        let mut rng = rngf.stream(&[site::UPDATE, iter, 1]);
        update(
            &mut pair.params[obs_slot],
            &pair.ref_model,
            &observer_batch,
            cfg,
            &mut pair.opts[obs_slot],
            &mut rng,
        )
        .map_err(|source| CoryError::Update {
            role: Role::Observer,
            source,
        })?
    };

    let pio_stats = role_stats(&pioneer_batch, Role::Pioneer, pio_update);
    let obs_stats = role_stats(&observer_batch, Role::Observer, obs_update);
    let per_slot = if pio_slot == 0 {
        [pio_stats, obs_stats]
    } else {
        [obs_stats, pio_stats]
    };

    let exchanged = flags.role_exchange && (pair.k + 1) % pair.t_rex == 0;
    if exchanged {
        role_exchange(pair);
    }
    pair.k += 1;

    Ok(IterationStats {
        iteration: pair.k - 1,
        per_slot,
        exchanged,
        truncations,
        pioneer_batch,
        observer_batch,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{Vocab, EOS_SYMBOL, PAD_SYMBOL, SEP_SYMBOL};
    use crate::nn::ModelArch;

    fn vocab() -> Vocab {
        Vocab::new(
            [
                PAD_SYMBOL, EOS_SYMBOL, SEP_SYMBOL, "a", "b", "c", "d", "e", "f", "g",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
        .unwrap()
    }

    struct ConstTask(f64);
    impl TaskReward for ConstTask {
        fn reward(&self, _q: &TokenSeq, _a: &TokenSeq) -> f64 {
            self.0
        }
    }

    fn pair(v: &Vocab, seed: u64) -> AgentPair {
        let mut refm = ParamStore::new(ModelArch::gru(v.size(), 6, 6, 1));
        refm.init_default(&mut RngFactory::new(seed).stream(&[site::INIT]));
        AgentPair::duplicate(refm, 5, false)
    }

    #[test]
    fn observer_prompt_template() {
        let v = vocab();
        let sep = v.sep_id();
        let q = TokenSeq::from_tokens(&v, &[3, 4], 16).unwrap();
        let a1 = TokenSeq::from_tokens(&v, &[7], 8).unwrap();
        let (p, truncated) = observer_prompt(&q, &a1, sep, 4);
        assert_eq!(p.real_tokens(), &[3, 4, sep, 7, sep]);
        assert!(!truncated);
        // trailing eos of the reference is stripped
        let a1e = TokenSeq::from_tokens(&v, &[7, v.eos_id()], 8).unwrap();
        let (p, _) = observer_prompt(&q, &a1e, sep, 4);
        assert_eq!(p.real_tokens(), &[3, 4, sep, 7, sep]);
        // empty reference (immediate eos): [q..., sep, sep]
        let empty = TokenSeq::from_tokens(&v, &[v.eos_id()], 8).unwrap();
        let (p, truncated) = observer_prompt(&q, &empty, sep, 4);
        assert_eq!(p.real_tokens(), &[3, 4, sep, sep]);
        assert!(!truncated);
    }

    #[test]
    fn observer_prompt_round_trip_and_truncation() {
        let v = vocab();
        let sep = v.sep_id();
        let q = TokenSeq::from_tokens(&v, &[3, 4, 5], 32).unwrap();
        let a1 = TokenSeq::from_tokens(&v, &[6, 7, 8, 9], 8).unwrap();
        let (p, truncated) = observer_prompt(&q, &a1, sep, 8);
        assert!(!truncated);
        assert_eq!(strip_reference(&p, sep).unwrap(), a1.real_tokens());
        // tight capacity forces right-truncation of the reference
        let q_small = TokenSeq::from_tokens(&v, &[3, 4, 5], 10).unwrap();
        let (p, truncated) = observer_prompt(&q_small, &a1, sep, 3);
        assert!(truncated);
        assert!(p.real_len() + 3 <= q_small.max_len());
        assert_eq!(strip_reference(&p, sep).unwrap(), &a1.real_tokens()[..2]);
    }

    #[test]
    fn role_exchange_is_an_involution_and_moves_no_data() {
        let v = vocab();
        let mut p = pair(&v, 3);
        // make the two stores distinguishable
        p.params[0].slice_mut("logits.b")[3] = 1.0;
        p.params[1].slice_mut("logits.b")[4] = 1.0;
        let before0 = p.params[0].params().to_vec();
        let before1 = p.params[1].params().to_vec();
        assert_eq!(p.pioneer_slot(), 0);
        role_exchange(&mut p);
        assert_eq!(p.pioneer_slot(), 1);
        assert_eq!(p.params[0].params(), &before0[..]);
        assert_eq!(p.params[1].params(), &before1[..]);
        role_exchange(&mut p);
        assert_eq!(p.pioneer_slot(), 0);
        assert_eq!(p.params[0].params(), &before0[..]);
        assert_eq!(p.params[1].params(), &before1[..]);
    }

    #[test]
    fn swapped_pair_uses_slot_one_as_pioneer() {
        let v = vocab();
        let mut p = pair(&v, 4);
        // give each slot a near-deterministic signature token
        p.params[0].slice_mut("logits.b")[3] = 50.0;
        p.params[1].slice_mut("logits.b")[4] = 50.0;
        role_exchange(&mut p);
        let q = TokenSeq::from_tokens(&v, &[5], 16).unwrap();
        let task = ConstTask(0.0);
        let flags = CoryFlags::default();
        let settings = DuoSettings {
            max_new: 1,
            sep_id: v.sep_id(),
        };
        let rngf = RngFactory::new(9);
        let mut r1 = rngf.stream(&[1]);
        let mut r2 = rngf.stream(&[2]);
        let roll = duo_step(&p, &q, &task, &flags, &settings, &mut r1, &mut r2);
        assert_eq!(roll.pioneer.action.real_tokens(), &[4]); // slot 1's signature
        assert_eq!(roll.observer.action.real_tokens(), &[3]);
    }

    #[test]
    fn duo_step_rewards() {
        let v = vocab();
        let p = pair(&v, 5);
        let q = TokenSeq::from_tokens(&v, &[3], 16).unwrap();
        let settings = DuoSettings {
            max_new: 4,
            sep_id: v.sep_id(),
        };
        let flags = CoryFlags::default();
        let rngf = RngFactory::new(1);
        let mut r1 = rngf.stream(&[1]);
        let mut r2 = rngf.stream(&[2]);
        let zero = duo_step(&p, &q, &ConstTask(0.0), &flags, &settings, &mut r1, &mut r2);
        assert_eq!(zero.r_cory, 0.0);
        assert!(!zero.pioneer.is_empty() && !zero.observer.is_empty());
        let mut r1 = rngf.stream(&[1]);
        let mut r2 = rngf.stream(&[2]);
        let one = duo_step(&p, &q, &ConstTask(1.0), &flags, &settings, &mut r1, &mut r2);
        assert_eq!(one.r_cory, 2.0);
        assert_eq!(one.r_cory, one.r_pio + one.r_obs);
    }

    #[test]
    fn iteration_with_zero_lr_keeps_params_and_fires_exchange_on_schedule() {
        let v = vocab();
        let mut p = pair(&v, 6);
        let before0 = p.params[0].params().to_vec();
        let before1 = p.params[1].params().to_vec();
        let cfg = PpoConfig {
            learning_rate: 0.0,
            ppo_epochs: 1,
            ..Default::default()
        };
        let task = ConstTask(1.0);
        let flags = CoryFlags::default();
        let settings = DuoSettings {
            max_new: 3,
            sep_id: v.sep_id(),
        };
        let rngf = RngFactory::new(2);
        let queries: Vec<TokenSeq> = (0..4)
            .map(|i| TokenSeq::from_tokens(&v, &[3 + i], 16).unwrap())
            .collect();
        let mut fired = Vec::new();
        for k in 0..12 {
            let stats =
                cory_iteration(&mut p, &queries, &task, &cfg, &flags, &settings, &rngf).unwrap();
            assert_eq!(stats.iteration, k);
            if stats.exchanged {
                fired.push(k);
            }
        }
        // T_REx = 5, k counted from 0: exchanges after iterations 4 and 9
        assert_eq!(fired, vec![4, 9]);
        assert_eq!(p.params[0].params(), &before0[..]);
        assert_eq!(p.params[1].params(), &before1[..]);
    }

    #[test]
    fn knowledge_transfer_off_uses_raw_queries() {
        let v = vocab();
        let mut p = pair(&v, 7);
        let cfg = PpoConfig {
            learning_rate: 0.0,
            ppo_epochs: 1,
            ..Default::default()
        };
        let task = ConstTask(0.5);
        let flags = CoryFlags {
            knowledge_transfer: false,
            ..Default::default()
        };
        let settings = DuoSettings {
            max_new: 3,
            sep_id: v.sep_id(),
        };
        let rngf = RngFactory::new(3);
        let queries = vec![TokenSeq::from_tokens(&v, &[3, 4], 16).unwrap()];
        let stats =
            cory_iteration(&mut p, &queries, &task, &cfg, &flags, &settings, &rngf).unwrap();
        assert_eq!(
            stats.observer_batch.episodes[0].prompt.real_tokens(),
            queries[0].real_tokens()
        );
    }

    #[test]
    fn collective_terminal_reward_embeds_the_same_scalar_for_both_agents() {
        let v = vocab();
        let mut p = pair(&v, 8);
        let cfg = PpoConfig {
            learning_rate: 0.0,
            ppo_epochs: 1,
            kl_coeff: 0.3,
            ..Default::default()
        };
        let task = ConstTask(0.7);
        let flags = CoryFlags::default();
        let settings = DuoSettings {
            max_new: 3,
            sep_id: v.sep_id(),
        };
        let rngf = RngFactory::new(4);
        let queries: Vec<TokenSeq> = (0..3)
            .map(|i| TokenSeq::from_tokens(&v, &[4 + i], 16).unwrap())
            .collect();
        let stats =
            cory_iteration(&mut p, &queries, &task, &cfg, &flags, &settings, &rngf).unwrap();
        for (i, &(r_pio, r_obs, r_cory)) in stats.outcomes.iter().enumerate() {
            assert_eq!(r_cory, r_pio + r_obs);
            for batch in [&stats.pioneer_batch, &stats.observer_batch] {
                let ep = &batch.episodes[i];
                let last = ep.len() - 1;
                // terminal shaped reward = r_cory - eta * kl_last
                let embedded = ep.rewards[last] + cfg.kl_coeff * ep.token_kls[last];
                assert!((embedded - r_cory).abs() < 1e-12);
            }
        }
    }
}
