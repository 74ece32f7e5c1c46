//! Finite-difference verification of the total objective's analytic gradient
//! on freshly rolled-out batches, plus KL identities at initialization.

mod common;

use common::{small_vocab, FD_REL_TOL, FD_STEP};
use cory_core::mdp::TokenSeq;
use cory_core::nn::{ModelArch, ParamStore};
use cory_core::policy::sample_action;
use cory_core::ppo::{total_loss, total_loss_grad, Episode, PpoConfig, TokenBatch};
use cory_core::rewards::shape_rewards;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn rollout_batch(
    model: &ParamStore,
    vocab: &cory_core::mdp::Vocab,
    cfg: &PpoConfig,
    episodes: usize,
    seed: u64,
) -> TokenBatch {
    let refm = model.clone();
    let mut rng = StdRng::seed_from_u64(seed);
    let eps = (0..episodes)
        .map(|_| {
            let len = rng.gen_range(1..=3);
            let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(3..vocab.size())).collect();
            let prompt = TokenSeq::from_tokens(vocab, &toks, 12).unwrap();
            let s = sample_action(model, &refm, &prompt, 5, &mut rng);
            let task = rng.gen_range(0.0..2.0);
            Episode::from_rollout(prompt, &s, task, task, cfg).unwrap()
        })
        .collect();
    TokenBatch::new(eps)
}

fn fd_total_loss(model: &ParamStore, batch: &TokenBatch, cfg: &PpoConfig) {
    let mut work = model.clone();
    work.zero_grad();
    total_loss_grad(&mut work, batch, cfg).unwrap();
    let analytic = work.grad().to_vec();
    for k in 0..model.param_count() {
        let mut plus = model.clone();
        plus.params_mut()[k] += FD_STEP;
        let mut minus = model.clone();
        minus.params_mut()[k] -= FD_STEP;
        let fd = (total_loss(&plus, batch, cfg) - total_loss(&minus, batch, cfg)) / (2.0 * FD_STEP);
        let a = analytic[k];
        assert!(
            (a - fd).abs() <= FD_REL_TOL * fd.abs().max(1.0),
            "param {k}: analytic {a} vs fd {fd}"
        );
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let v = small_vocab(5);
    let cfg = PpoConfig {
        kl_coeff: 0.1,
        ..Default::default()
    };
    for seed in 0..3u64 {
        let mut m = ParamStore::new(ModelArch::gru(v.size(), 5, 5, 1));
        m.init_uniform_all(&mut StdRng::seed_from_u64(seed * 7 + 1), 0.4);
        assert!(m.param_count() <= 2000);
        let batch = rollout_batch(&m, &v, &cfg, 3, seed * 13 + 5);
        fd_total_loss(&m, &batch, &cfg);
    }
}

#[test]
fn total_loss_gradient_matches_finite_differences_unclipped_value() {
    let v = small_vocab(5);
    let cfg = PpoConfig {
        value_clip: None,
        ..Default::default()
    };
    let mut m = ParamStore::new(ModelArch::attn(v.size(), 5, 5, 12));
    m.init_uniform_all(&mut StdRng::seed_from_u64(3), 0.4);
    let batch = rollout_batch(&m, &v, &cfg, 3, 31);
    fd_total_loss(&m, &batch, &cfg);
}

#[test]
fn kl_identities_at_initialization() {
    // freshly duplicated models: every token KL is zero and shaped rewards
    // collapse to the sparse task reward
    let v = small_vocab(7);
    let mut m = ParamStore::new(ModelArch::gru(v.size(), 8, 8, 1));
    m.init_default(&mut StdRng::seed_from_u64(5));
    let refm = m.clone();
    let mut rng = StdRng::seed_from_u64(17);
    for _ in 0..10 {
        let prompt = TokenSeq::from_tokens(&v, &[3, 4], 12).unwrap();
        let s = sample_action(&m, &refm, &prompt, 6, &mut rng);
        assert!(s.token_kls.iter().all(|&k| k.abs() <= 1e-9));
        let shaped = shape_rewards(1.0, &s.token_kls, 0.3);
        let n = shaped.len();
        for (i, &r) in shaped.iter().enumerate() {
            if i + 1 == n {
                assert!((r - 1.0).abs() <= 1e-9);
            } else {
                assert!(r.abs() <= 1e-9);
            }
        }
    }
}
