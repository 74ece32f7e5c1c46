//! Full training runs: the duo trainer or the single-agent baseline, metrics
//! streaming, final checkpoints, and a machine-readable report.
//!
//! Every stochastic site draws from a stream keyed on (seed, site, iteration,
//! query, role), so a run is fully determined by (config, seed), and the
//! baseline consumes exactly the streams the duo trainer's pioneer leg would.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use cory_core::cory::{cory_iteration, solo_step, AgentPair, CoryFlags, DuoSettings};
use cory_core::mdp::TokenSeq;
use cory_core::nn::{Optimizer, ParamStore};
use cory_core::par::par_map_indexed;
use cory_core::policy::greedy_action;
use cory_core::ppo::{update, Episode, PpoConfig, TokenBatch, UpdateStats};
use cory_core::rng::{site, RngFactory};
use cory_core::tasks::{RewardKind, TaskReward, TaskSpec};

use crate::config::{Method, RunConfig};
use crate::error::HarnessError;
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::passk::pass_at_k;

#[derive(Debug, Clone, Serialize)]
pub struct AgentReport {
    pub agent: usize,
    /// Means over the last (up to) 10 completed iterations; absent when no
    /// iteration completed.
    pub final_task_reward: Option<f64>,
    pub final_sentence_kl: Option<f64>,
    pub final_combined: Option<f64>,
    /// Greedy pass@1 on held-out instances (objective tasks).
    pub pass_at_1: Option<f64>,
    /// Greedy mean task reward on held-out prompts (subjective tasks).
    pub eval_mean_reward: Option<f64>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub run_name: String,
    pub method: Method,
    pub task: String,
    pub seed: u64,
    pub iterations_requested: usize,
    pub iterations_completed: usize,
    pub diverged: bool,
    pub divergence: Option<String>,
    pub truncations_total: usize,
    pub agents: Vec<AgentReport>,
    pub wall_seconds: f64,
    pub out_dir: String,
    pub metrics_path: String,
    pub config: RunConfig,
}

impl RunReport {
    pub fn load(path: &Path) -> Result<serde_json::Value, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(HarnessError::io(path.display().to_string()))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::SchemaMismatch(format!("{}: {e}", path.display())))
    }
}

fn stats_row(
    iteration: usize,
    agent: usize,
    batch_stats: (f64, f64, f64),
    u: &UpdateStats,
    exchanged: bool,
    truncations: usize,
) -> MetricsRow {
    MetricsRow {
        iteration,
        agent,
        task_reward: batch_stats.0,
        sentence_kl: batch_stats.1,
        combined: batch_stats.2,
        clip_fraction: u.clip_fraction,
        grad_norm: u.grad_norm,
        mean_ratio: u.mean_ratio,
        policy_loss: u.policy_loss,
        value_loss: u.value_loss,
        post_kl: u.post_kl,
        exchanged,
        truncations,
    }
}

// One baseline iteration: rollouts on the pioneer-role rng streams, episode
// building with the agent's own reward at the terminal token, one update.
#[allow(clippy::too_many_arguments)]
fn solo_iteration(
    params: &mut ParamStore,
    opt: &mut Optimizer,
    ref_model: &ParamStore,
    queries: &[TokenSeq],
    task: &TaskSpec,
    cfg: &PpoConfig,
    max_new: usize,
    rngf: &RngFactory,
    iter: usize,
) -> Result<((f64, f64, f64), UpdateStats), cory_core::ppo::PpoError> {
    let shared: &ParamStore = params;
    let samples = par_map_indexed(queries.len(), |q| {
        let mut rng = rngf.stream(&[site::ROLLOUT, iter as u64, q as u64, 0]);
        solo_step(shared, ref_model, &queries[q], task, max_new, &mut rng)
    });
    let episodes = queries
        .iter()
        .zip(&samples)
        .map(|(q, (s, r))| Episode::from_rollout(q.clone(), s, *r, *r, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let batch = TokenBatch::new(episodes);
    let batch_stats = (
        batch.mean_task_reward(),
        batch.mean_sentence_kl(),
        batch.mean_combined(cfg.kl_coeff),
    );
    let mut rng = rngf.stream(&[site::UPDATE, iter as u64, 0]);
    let u = update(params, ref_model, &batch, cfg, opt, &mut rng)?;
    Ok((batch_stats, u))
}

fn last_n_mean(rows: &[MetricsRow], agent: usize, n: usize) -> Option<(f64, f64, f64)> {
    let mine: Vec<&MetricsRow> = rows.iter().filter(|r| r.agent == agent).collect();
    if mine.is_empty() {
        return None;
    }
    let tail = &mine[mine.len().saturating_sub(n)..];
    let m = tail.len() as f64;
    Some((
        tail.iter().map(|r| r.task_reward).sum::<f64>() / m,
        tail.iter().map(|r| r.sentence_kl).sum::<f64>() / m,
        tail.iter().map(|r| r.combined).sum::<f64>() / m,
    ))
}

fn evaluate_agent(
    params: &ParamStore,
    task: &TaskSpec,
    eval_count: usize,
    rngf: &RngFactory,
) -> (Option<f64>, Option<f64>) {
    match task.reward_kind() {
        RewardKind::Objective => {
            let mut rng = rngf.stream(&[site::EVAL, 0]);
            let instances = task.eval_instances(eval_count, &mut rng);
            (Some(pass_at_k(params, task, &instances, 1, rngf)), None)
        }
        RewardKind::Subjective => {
            let mut rng = rngf.stream(&[site::EVAL, 1]);
            let prompts = task.sample_queries(eval_count.max(1), &mut rng);
            let mean = prompts
                .iter()
                .map(|p| {
                    let a = greedy_action(params, p, task.max_action_len);
                    task.reward(p, &a)
                })
                .sum::<f64>()
                / prompts.len() as f64;
            (None, Some(mean))
        }
    }
}

/// Executes the configured training run end to end. A mid-run non-finite
/// gradient marks the run diverged (parameters stay at their last good state,
/// metrics and report are still written); divergence is not an `Err`.
pub fn run(config: &RunConfig) -> Result<RunReport, HarnessError> {
    config.validate()?;
    let start = Instant::now();
    let task = config.task_spec()?;
    let state_capacity = task.max_prompt_len;
    let arch = config.model_arch(task.vocab.size(), state_capacity);
    let rngf = RngFactory::new(config.seed);

    let ref_model = crate::pretrain::build_reference_model(
        arch,
        &task,
        config.pretrain_steps,
        config.pretrain_batch,
        config.pretrain_lr,
    );

    let run_name = config.effective_run_name();
    let out_dir: PathBuf = config.out_root().join(&run_name);
    std::fs::create_dir_all(&out_dir).map_err(HarnessError::io(out_dir.display().to_string()))?;
    let cfg_path = out_dir.join("config.txt");
    std::fs::write(&cfg_path, config.printed())
        .map_err(HarnessError::io(cfg_path.display().to_string()))?;
    let metrics_path = out_dir.join("metrics.tsv");
    let mut writer = MetricsWriter::create(&metrics_path, &run_name)?;

    let cfg = config.ppo_config();
    let settings = DuoSettings {
        max_new: config.max_action_len,
        sep_id: task.vocab.sep_id(),
    };
    let flags = CoryFlags {
        knowledge_transfer: config.knowledge_transfer,
        role_exchange: config.role_exchange,
        reward_mode: config.reward_mode(),
    };

    let mut rows: Vec<MetricsRow> = Vec::new();
    let mut diverged = false;
    let mut divergence = None;
    let mut truncations_total = 0usize;
    let mut completed = 0usize;

    // Final parameter sets by agent number (1-based).
    let final_params: Vec<ParamStore> = match config.method {
        Method::Cory => {
            let mut pair = AgentPair::duplicate(ref_model.clone(), config.t_rex, config.use_adam());
            for k in 0..config.iterations {
                let mut qrng = rngf.stream(&[site::QUERIES, k as u64]);
                let queries = task.sample_queries(config.batch_size, &mut qrng);
                let mut cfg_k = cfg.clone();
                cfg_k.value_only = k < config.value_warmup_iters;
                match cory_iteration(&mut pair, &queries, &task, &cfg_k, &flags, &settings, &rngf) {
                    Ok(stats) => {
                        truncations_total += stats.truncations;
                        for (slot, agent_stats) in stats.per_slot.iter().enumerate() {
                            let row = stats_row(
                                k,
                                slot + 1,
                                (
                                    agent_stats.mean_task_reward,
                                    agent_stats.mean_sentence_kl,
                                    agent_stats.mean_combined,
                                ),
                                &agent_stats.update,
                                stats.exchanged,
                                stats.truncations,
                            );
                            writer.write_row(&row)?;
                            rows.push(row);
                        }
                        completed = k + 1;
                    }
                    Err(e) => {
                        diverged = true;
                        divergence = Some(format!("iteration {k}: {e}"));
                        break;
                    }
                }
            }
            vec![pair.agent_params(0).clone(), pair.agent_params(1).clone()]
        }
        Method::Ppo => {
            let mut params = ref_model.clone();
            let mut opt = if config.use_adam() {
                Optimizer::adam(params.param_count())
            } else {
                Optimizer::sgd()
            };
            for k in 0..config.iterations {
                let mut qrng = rngf.stream(&[site::QUERIES, k as u64]);
                let queries = task.sample_queries(config.batch_size, &mut qrng);
                let mut cfg_k = cfg.clone();
                cfg_k.value_only = k < config.value_warmup_iters;
                match solo_iteration(
                    &mut params,
                    &mut opt,
                    &ref_model,
                    &queries,
                    &task,
                    &cfg_k,
                    config.max_action_len,
                    &rngf,
                    k,
                ) {
                    Ok((batch_stats, u)) => {
                        let row = stats_row(k, 1, batch_stats, &u, false, 0);
                        writer.write_row(&row)?;
                        rows.push(row);
                        completed = k + 1;
                    }
                    Err(e) => {
                        diverged = true;
                        divergence = Some(format!("iteration {k}: {e}"));
                        break;
                    }
                }
            }
            vec![params]
        }
    };
    writer.finish()?;

    let mut agents = Vec::new();
    for (i, params) in final_params.iter().enumerate() {
        let agent = i + 1;
        let ckpt = out_dir.join(format!("checkpoint_agent{agent}.bin"));
        params
            .save_checkpoint(&ckpt)
            .map_err(|e| HarnessError::Io {
                path: ckpt.display().to_string(),
                source: std::io::Error::other(e.to_string()),
            })?;
        let finals = last_n_mean(&rows, agent, 10);
        let (pass1, eval_mean) = evaluate_agent(params, &task, config.eval_instances, &rngf);
        agents.push(AgentReport {
            agent,
            final_task_reward: finals.map(|f| f.0),
            final_sentence_kl: finals.map(|f| f.1),
            final_combined: finals.map(|f| f.2),
            pass_at_1: pass1,
            eval_mean_reward: eval_mean,
            checkpoint: ckpt.display().to_string(),
        });
    }

    let report = RunReport {
        run_name: run_name.clone(),
        method: config.method,
        task: task.name.clone(),
        seed: config.seed,
        iterations_requested: config.iterations,
        iterations_completed: completed,
        diverged,
        divergence,
        truncations_total,
        agents,
        wall_seconds: start.elapsed().as_secs_f64(),
        out_dir: out_dir.display().to_string(),
        metrics_path: metrics_path.display().to_string(),
        config: config.clone(),
    };
    let report_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| HarnessError::Config(format!("report serialization: {e}")))?;
    std::fs::write(&report_path, json)
        .map_err(HarnessError::io(report_path.display().to_string()))?;
    Ok(report)
}
