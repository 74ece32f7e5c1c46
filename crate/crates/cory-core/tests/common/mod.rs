#![allow(dead_code)]

//! Shared oracles for the integration tests. These deliberately re-derive
//! results through independent arithmetic rather than calling the code paths
//! they check.

use cory_core::mdp::{TokenSeq, Vocab, EOS_SYMBOL, PAD_SYMBOL, SEP_SYMBOL};
use cory_core::nn::{ModelArch, ParamStore, Upstream};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn small_vocab(extra: usize) -> Vocab {
    let mut symbols = vec![
        PAD_SYMBOL.to_string(),
        EOS_SYMBOL.to_string(),
        SEP_SYMBOL.to_string(),
    ];
    for i in 0..extra {
        symbols.push(format!("t{i}"));
    }
    Vocab::new(symbols).unwrap()
}

/// Brute-force GAE: the literal nested-sum expansion
/// adv[i] = sum_{j>=i} (gamma*lambda)^(j-i) * (r_j + gamma*V_{j+1} - V_j),
/// with V one past the terminal equal to zero.
pub fn brute_force_gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for j in i..n {
            let v_next = if j + 1 < n { values[j + 1] } else { 0.0 };
            let delta = rewards[j] + gamma * v_next - values[j];
            acc += (gamma * lambda).powi((j - i) as i32) * delta;
        }
        adv[i] = acc;
    }
    adv
}

/// Scalar objective used by the gradient checks: a fixed random linear
/// functional of every logits row and value produced on `ctx`.
pub struct LinearProbe {
    pub ctx: TokenSeq,
    pub upstream: Upstream,
}

impl LinearProbe {
    pub fn new(model: &ParamStore, ctx: TokenSeq, seed: u64) -> Self {
        let len = ctx.real_len();
        let v = model.arch().vocab_size;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut upstream = Upstream::zeros(len, v);
        for row in &mut upstream.dlogits {
            for x in row.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
        }
        for x in &mut upstream.dvalues {
            *x = rng.gen_range(-1.0..1.0);
        }
        Self { ctx, upstream }
    }

    /// Probe with a single nonzero cotangent on one logit.
    pub fn single_logit(model: &ParamStore, ctx: TokenSeq, pos: usize, tok: usize) -> Self {
        let len = ctx.real_len();
        let v = model.arch().vocab_size;
        let mut upstream = Upstream::zeros(len, v);
        upstream.dlogits[pos][tok] = 1.0;
        Self { ctx, upstream }
    }

    pub fn eval(&self, model: &ParamStore) -> f64 {
        let t = model.forward(&self.ctx);
        let mut s = 0.0;
        for i in 0..t.len() {
            s += self.upstream.dlogits[i]
                .iter()
                .zip(&t.logits[i])
                .map(|(u, l)| u * l)
                .sum::<f64>();
            s += self.upstream.dvalues[i] * t.values[i];
        }
        s
    }
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-4;

/// Central-difference check of `d probe.eval / d params[k]` against the
/// analytic gradient, for the given parameter indices (all when empty).
pub fn fd_check_indices(model: &ParamStore, probe: &LinearProbe, indices: &[usize]) {
    let mut work = model.clone();
    work.zero_grad();
    let trace = work.forward(&probe.ctx);
    work.backward(&trace, &probe.upstream).unwrap();
    let analytic = work.grad().to_vec();
    let all: Vec<usize>;
    let ks: &[usize] = if indices.is_empty() {
        all = (0..model.param_count()).collect();
        &all
    } else {
        indices
    };
    for &k in ks {
        let mut plus = model.clone();
        plus.params_mut()[k] += FD_STEP;
        let mut minus = model.clone();
        minus.params_mut()[k] -= FD_STEP;
        let fd = (probe.eval(&plus) - probe.eval(&minus)) / (2.0 * FD_STEP);
        let a = analytic[k];
        let denom = fd.abs().max(1.0);
        assert!(
            (a - fd).abs() <= FD_REL_TOL * denom,
            "param {k} ({}): analytic {a} vs fd {fd}",
            model
                .layout()
                .slices()
                .iter()
                .find(|s| k >= s.offset && k < s.offset + s.len)
                .map(|s| s.name.as_str())
                .unwrap_or("?")
        );
    }
}

pub fn random_model(arch: ModelArch, seed: u64, scale: f64) -> ParamStore {
    let mut m = ParamStore::new(arch);
    m.init_uniform_all(&mut StdRng::seed_from_u64(seed), scale);
    m
}

pub fn seq(vocab: &Vocab, toks: &[usize], cap: usize) -> TokenSeq {
    TokenSeq::from_tokens(vocab, toks, cap).unwrap()
}
