//! Flat key-value run configuration with CLI overrides.
//!
//! Defaults follow the published hyperparameter tables where those are
//! scale-free (PPO epochs 4, discount 1, GAE lambda 0.95, clip 0.2, value
//! coefficient 0.1, value clip 0.2, role-exchange period 5, 100 iterations,
//! early stopping off); learning rate, KL coefficient, model dims, and batch
//! size are desk-scale choices tuned for the synthetic tasks.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use cory_core::nn::{ModelArch, TrunkKind};
use cory_core::ppo::PpoConfig;
use cory_core::tasks::TaskSpec;
use cory_core::RewardMode;

use crate::error::HarnessError;

pub const OUTPUT_ROOT_ENV: &str = "CORY_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ppo,
    Cory,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Ppo => write!(f, "ppo"),
            Method::Cory => write!(f, "cory"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    Arith,
    Lexicon,
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskName::Arith => write!(f, "arith"),
            TaskName::Lexicon => write!(f, "lexicon"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub task: TaskName,
    pub difficulty: u8,
    pub method: Method,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ppo_epochs: usize,
    pub minibatch_size: usize,
    pub grad_accum_steps: usize,
    pub kl_coeff: f64,
    pub clip_range: f64,
    pub value_clip: f64,
    pub value_clip_enabled: bool,
    pub value_coeff: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    pub early_stopping: bool,
    pub advantage_norm: bool,
    pub optimizer: String,
    pub t_rex: usize,
    pub knowledge_transfer: bool,
    pub role_exchange: bool,
    pub reward_mode: String,
    pub trunk: String,
    pub trunk_layers: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_action_len: usize,
    pub max_prompt_len: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub value_warmup_iters: usize,
    pub eval_instances: usize,
    pub run_name: String,
    pub out_dir: String,
    pub corpus: String,
    pub lexicon_file: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskName::Arith,
            difficulty: 1,
            method: Method::Cory,
            seed: 0,
            iterations: 100,
            batch_size: 64,
            learning_rate: 0.0025,
            ppo_epochs: 4,
            minibatch_size: 0,
            grad_accum_steps: 1,
            kl_coeff: 0.045,
            clip_range: 0.2,
            value_clip: 0.2,
            value_clip_enabled: true,
            value_coeff: 0.1,
            discount: 1.0,
            gae_lambda: 0.95,
            early_stopping: false,
            advantage_norm: false,
            optimizer: "adam".into(),
            t_rex: 5,
            knowledge_transfer: true,
            role_exchange: true,
            reward_mode: "collective".into(),
            trunk: "gru".into(),
            trunk_layers: 1,
            embed_dim: 16,
            hidden_dim: 24,
            max_action_len: 8,
            max_prompt_len: 0,
            pretrain_steps: 300,
            pretrain_batch: 32,
            pretrain_lr: 0.01,
            value_warmup_iters: 0,
            eval_instances: 200,
            run_name: String::new(),
            out_dir: String::new(),
            corpus: String::new(),
            lexicon_file: String::new(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text =
            std::fs::read_to_string(path).map_err(HarnessError::io(path.display().to_string()))?;
        let mut cfg = Self::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    idx + 1
                ))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` override strings in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), HarnessError> {
        for ov in overrides {
            let (k, v) = ov.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("override {ov:?}: expected key=value"))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let bad = |k: &str, v: &str| HarnessError::Config(format!("bad value {v:?} for {k}"));
        macro_rules! parse {
            ($field:expr, $k:expr, $v:expr) => {
                $field = $v.parse().map_err(|_| bad($k, $v))?
            };
        }
        match key {
            "task" => {
                self.task = match value {
                    "arith" => TaskName::Arith,
                    "lexicon" => TaskName::Lexicon,
                    _ => return Err(bad(key, value)),
                }
            }
            "method" => {
                self.method = match value {
                    "ppo" => Method::Ppo,
                    "cory" => Method::Cory,
                    _ => return Err(bad(key, value)),
                }
            }
            "difficulty" => parse!(self.difficulty, key, value),
            "seed" => parse!(self.seed, key, value),
            "iterations" => parse!(self.iterations, key, value),
            "batch_size" => parse!(self.batch_size, key, value),
            "learning_rate" => parse!(self.learning_rate, key, value),
            "ppo_epochs" => parse!(self.ppo_epochs, key, value),
            "minibatch_size" => parse!(self.minibatch_size, key, value),
            "grad_accum_steps" => parse!(self.grad_accum_steps, key, value),
            "kl_coeff" => parse!(self.kl_coeff, key, value),
            "clip_range" => parse!(self.clip_range, key, value),
            "value_clip" => parse!(self.value_clip, key, value),
            "value_clip_enabled" => parse!(self.value_clip_enabled, key, value),
            "value_coeff" => parse!(self.value_coeff, key, value),
            "discount" => parse!(self.discount, key, value),
            "gae_lambda" => parse!(self.gae_lambda, key, value),
            "early_stopping" => parse!(self.early_stopping, key, value),
            "advantage_norm" => parse!(self.advantage_norm, key, value),
            "optimizer" => match value {
                "sgd" | "adam" => self.optimizer = value.into(),
                _ => return Err(bad(key, value)),
            },
            "t_rex" => parse!(self.t_rex, key, value),
            "knowledge_transfer" => parse!(self.knowledge_transfer, key, value),
            "role_exchange" => parse!(self.role_exchange, key, value),
            "reward_mode" => match value {
                "collective" | "individual" => self.reward_mode = value.into(),
                _ => return Err(bad(key, value)),
            },
            "trunk" => match value {
                "gru" | "attn" => self.trunk = value.into(),
                _ => return Err(bad(key, value)),
            },
            "trunk_layers" => parse!(self.trunk_layers, key, value),
            "embed_dim" => parse!(self.embed_dim, key, value),
            "hidden_dim" => parse!(self.hidden_dim, key, value),
            "max_action_len" => parse!(self.max_action_len, key, value),
            "max_prompt_len" => parse!(self.max_prompt_len, key, value),
            "pretrain_steps" => parse!(self.pretrain_steps, key, value),
            "pretrain_batch" => parse!(self.pretrain_batch, key, value),
            "pretrain_lr" => parse!(self.pretrain_lr, key, value),
            "value_warmup_iters" => parse!(self.value_warmup_iters, key, value),
            "eval_instances" => parse!(self.eval_instances, key, value),
            "run_name" => self.run_name = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "corpus" => self.corpus = value.into(),
            "lexicon_file" => self.lexicon_file = value.into(),
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.batch_size < 1 {
            return err("batch_size must be >= 1".into());
        }
        if self.max_action_len < 1 {
            return err("max_action_len must be >= 1".into());
        }
        if self.t_rex < 1 {
            return err("t_rex must be >= 1".into());
        }
        if self.embed_dim < 1 || self.hidden_dim < 1 {
            return err("model dims must be >= 1".into());
        }
        if !(1..=2).contains(&self.trunk_layers) {
            return err(format!("trunk_layers {} outside 1..=2", self.trunk_layers));
        }
        if self.early_stopping {
            return err("early_stopping is not supported (must stay false)".into());
        }
        if self.task == TaskName::Arith && !(1..=3).contains(&self.difficulty) {
            return err(format!("difficulty {} outside 1..=3", self.difficulty));
        }
        self.ppo_config()
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn ppo_config(&self) -> PpoConfig {
        PpoConfig {
            learning_rate: self.learning_rate,
            clip_range: self.clip_range,
            value_coeff: self.value_coeff,
            discount: self.discount,
            gae_lambda: self.gae_lambda,
            kl_coeff: self.kl_coeff,
            ppo_epochs: self.ppo_epochs,
            minibatch_size: self.minibatch_size,
            grad_accum_steps: self.grad_accum_steps,
            value_clip: self.value_clip_enabled.then_some(self.value_clip),
            advantage_norm: self.advantage_norm,
            value_only: false,
        }
    }

    pub fn reward_mode(&self) -> RewardMode {
        if self.reward_mode == "individual" {
            RewardMode::Individual
        } else {
            RewardMode::Collective
        }
    }

    pub fn use_adam(&self) -> bool {
        self.optimizer == "adam"
    }

    /// Builds the task, honoring corpus/lexicon files and the prompt-length
    /// override.
    pub fn task_spec(&self) -> Result<TaskSpec, HarnessError> {
        let mut spec = match self.task {
            TaskName::Arith => TaskSpec::arith(self.difficulty, self.max_action_len),
            TaskName::Lexicon => TaskSpec::lexicon(self.max_action_len),
        };
        if self.max_prompt_len > 0 {
            spec.max_prompt_len = self.max_prompt_len;
        }
        if !self.corpus.is_empty() {
            spec = spec.with_corpus(Path::new(&self.corpus))?;
        }
        if !self.lexicon_file.is_empty() {
            spec = spec.with_lexicon_file(Path::new(&self.lexicon_file))?;
        }
        Ok(spec)
    }

    pub fn model_arch(&self, vocab_size: usize, state_capacity: usize) -> ModelArch {
        let trunk = if self.trunk == "attn" {
            TrunkKind::Attn {
                max_seq: state_capacity,
            }
        } else {
            TrunkKind::Gru {
                layers: self.trunk_layers,
            }
        };
        ModelArch {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            trunk,
        }
    }

    /// Output root: explicit `out_dir`, else the environment override, else
    /// `./runs`.
    pub fn out_root(&self) -> PathBuf {
        if !self.out_dir.is_empty() {
            return PathBuf::from(&self.out_dir);
        }
        if let Ok(env) = std::env::var(OUTPUT_ROOT_ENV) {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        PathBuf::from("runs")
    }

    pub fn effective_run_name(&self) -> String {
        if self.run_name.is_empty() {
            format!("{}-{}-s{}", self.method, self.task, self.seed)
        } else {
            self.run_name.clone()
        }
    }

    /// Sorted `key = value` listing of the effective configuration.
    pub fn printed(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("task", self.task.to_string());
        map.insert("difficulty", self.difficulty.to_string());
        map.insert("method", self.method.to_string());
        map.insert("seed", self.seed.to_string());
        map.insert("iterations", self.iterations.to_string());
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("learning_rate", self.learning_rate.to_string());
        map.insert("ppo_epochs", self.ppo_epochs.to_string());
        map.insert("minibatch_size", self.minibatch_size.to_string());
        map.insert("grad_accum_steps", self.grad_accum_steps.to_string());
        map.insert("kl_coeff", self.kl_coeff.to_string());
        map.insert("clip_range", self.clip_range.to_string());
        map.insert("value_clip", self.value_clip.to_string());
        map.insert("value_clip_enabled", self.value_clip_enabled.to_string());
        map.insert("value_coeff", self.value_coeff.to_string());
        map.insert("discount", self.discount.to_string());
        map.insert("gae_lambda", self.gae_lambda.to_string());
        map.insert("early_stopping", self.early_stopping.to_string());
        map.insert("advantage_norm", self.advantage_norm.to_string());
        map.insert("optimizer", self.optimizer.clone());
        map.insert("t_rex", self.t_rex.to_string());
        map.insert("knowledge_transfer", self.knowledge_transfer.to_string());
        map.insert("role_exchange", self.role_exchange.to_string());
        map.insert("reward_mode", self.reward_mode.clone());
        map.insert("trunk", self.trunk.clone());
        map.insert("trunk_layers", self.trunk_layers.to_string());
        map.insert("embed_dim", self.embed_dim.to_string());
        map.insert("hidden_dim", self.hidden_dim.to_string());
        map.insert("max_action_len", self.max_action_len.to_string());
        map.insert("max_prompt_len", self.max_prompt_len.to_string());
        map.insert("pretrain_steps", self.pretrain_steps.to_string());
        map.insert("pretrain_batch", self.pretrain_batch.to_string());
        map.insert("pretrain_lr", self.pretrain_lr.to_string());
        map.insert("value_warmup_iters", self.value_warmup_iters.to_string());
        map.insert("eval_instances", self.eval_instances.to_string());
        map.insert("run_name", self.run_name.clone());
        map.insert("out_dir", self.out_dir.clone());
        map.insert("corpus", self.corpus.clone());
        map.insert("lexicon_file", self.lexicon_file.clone());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_validation() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&[
            "method=ppo".into(),
            "kl_coeff=0.3".into(),
            "seed=7".into(),
            "hidden_dim=12".into(),
        ])
        .unwrap();
        assert_eq!(cfg.method, Method::Ppo);
        assert_eq!(cfg.kl_coeff, 0.3);
        assert_eq!(cfg.seed, 7);
        cfg.validate().unwrap();

        assert!(cfg.set("clip_range", "1.5").is_ok());
        assert!(cfg.validate().is_err());
        assert!(cfg.set("no_such_key", "1").is_err());
        assert!(cfg.set("method", "dpo").is_err());
    }

    #[test]
    fn early_stopping_cannot_be_enabled() {
        let mut cfg = RunConfig::default();
        cfg.set("early_stopping", "true").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = std::env::temp_dir().join("cory_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nmethod = cory\nseed = 3\nkl_coeff = 0.05\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.method, Method::Cory);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.kl_coeff, 0.05);
        // printed form parses back to the same effective config
        let printed = cfg.printed();
        let path2 = dir.join("echo.cfg");
        std::fs::write(&path2, &printed).unwrap();
        let cfg2 = RunConfig::from_file(&path2).unwrap();
        assert_eq!(cfg.printed(), cfg2.printed());
    }

    #[test]
    fn defaults_follow_the_published_table_where_scale_free() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.ppo_epochs, 4);
        assert_eq!(cfg.discount, 1.0);
        assert_eq!(cfg.gae_lambda, 0.95);
        assert_eq!(cfg.clip_range, 0.2);
        assert_eq!(cfg.value_coeff, 0.1);
        assert_eq!(cfg.value_clip, 0.2);
        assert_eq!(cfg.t_rex, 5);
        assert_eq!(cfg.iterations, 100);
        assert!(!cfg.early_stopping);
    }
}
