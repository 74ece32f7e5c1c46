//! Desk-scale laboratory for cooperative two-agent RL fine-tuning of tiny
//! causal token policies, with a single-agent PPO baseline.
//!
//! The crate is organized around a token-level sequential decision process:
//! states and actions are padded token sequences ([`mdp`]), policies are tiny
//! trainable sequence models with a value head ([`nn`], [`policy`]), rewards
//! are KL-shaped per token ([`rewards`]), updates are clipped-surrogate PPO
//! with GAE ([`ppo`]), and the duo trainer couples a pioneer and an observer
//! through knowledge transfer, a collective reward, and periodic role
//! exchange ([`cory`]). Synthetic tasks live in [`tasks`].

pub mod cory;
pub mod mdp;
pub mod nn;
pub mod par;
pub mod policy;
pub mod ppo;
pub mod rewards;
pub mod rng;
pub mod tasks;

pub use cory::{AgentPair, CoryFlags, DuoRollout, IterationStats, RewardMode};
pub use mdp::{TokenId, TokenSeq, Transition, Vocab};
pub use nn::{ForwardTrace, ModelArch, Optimizer, ParamStore, TrunkKind};
pub use policy::SampledAction;
pub use ppo::{Episode, PpoConfig, TokenBatch, UpdateStats};
pub use rng::RngFactory;
pub use tasks::TaskReward;
