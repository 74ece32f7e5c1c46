//! Token-level and sentence-level policies on top of the sequence model:
//! categorical sampling at temperature 1, greedy decoding, log-probabilities,
//! and exact full-vocabulary KL against a frozen reference model.
//!
//! Log-probabilities are always taken from the raw softmax over the full
//! vocabulary. The sampler masks only the pad token (pad is a storage
//! convention, never a decision), so recorded log-probs and re-scored
//! log-probs agree exactly.

use rand::Rng;

use crate::mdp::{TokenId, TokenSeq};
use crate::nn::{Decoder, ParamStore};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let logz = z.ln() + m;
    logits.iter().map(|l| l - logz).collect()
}

/// Exact categorical KL(p || q) between two logits vectors, summed over the
/// full vocabulary. Non-negative; exactly zero for bit-identical logits.
pub fn kl_from_logits(p_logits: &[f64], q_logits: &[f64]) -> f64 {
    debug_assert_eq!(p_logits.len(), q_logits.len());
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// One sampled action with everything the update needs recorded per token:
/// raw log-prob, exact KL against the reference at the pre-decision context,
/// and the value-head output at the pre-decision context.
#[derive(Debug, Clone)]
pub struct SampledAction {
    pub action: TokenSeq,
    pub token_logprobs: Vec<f64>,
    pub token_kls: Vec<f64>,
    pub values: Vec<f64>,
}

impl SampledAction {
    pub fn len(&self) -> usize {
        self.action.real_len()
    }

    pub fn is_empty(&self) -> bool {
        self.action.real_len() == 0
    }

    /// Sentence-level KL: the sum of per-token KLs.
    pub fn kl_sum(&self) -> f64 {
        self.token_kls.iter().sum()
    }

    pub fn logprob_sum(&self) -> f64 {
        self.token_logprobs.iter().sum()
    }
}

fn prime<'m>(model: &'m ParamStore, prompt: &TokenSeq) -> (Decoder<'m>, Vec<f64>, f64) {
    assert!(
        prompt.real_len() >= 1,
        "prompt must contain at least one token"
    );
    let mut dec = Decoder::new(model);
    let mut out = None;
    for &w in prompt.real_tokens() {
        out = Some(dec.step(w));
    }
    let (logits, value) = out.expect("nonempty prompt");
    (dec, logits, value)
}

fn draw(probs: &[f64], pad_id: TokenId, rng: &mut impl Rng) -> TokenId {
    let total: f64 = probs
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != pad_id)
        .map(|(_, p)| p)
        .sum();
    let x: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = pad_id;
    for (i, &p) in probs.iter().enumerate() {
        if i == pad_id {
            continue;
        }
        acc += p;
        last = i;
        if x < acc {
            return i;
        }
    }
    last // fp residue; fall back to the last unmasked token
}

fn argmax_unmasked(logits: &[f64], pad_id: TokenId) -> TokenId {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &l) in logits.iter().enumerate() {
        if i != pad_id && l > best_v {
            best = i;
            best_v = l;
        }
    }
    best
}

/// Draws an action token by token at temperature 1, stopping at eos or after
/// `max_new` tokens. Records log-prob, exact KL against `ref_model`, and the
/// value estimate at every step. Reproducible given the rng stream.
pub fn sample_action(
    model: &ParamStore,
    ref_model: &ParamStore,
    prompt: &TokenSeq,
    max_new: usize,
    rng: &mut impl Rng,
) -> SampledAction {
    assert!(max_new >= 1);
    assert!(
        prompt.max_len() >= prompt.real_len() + max_new,
        "prompt capacity must leave room for the action"
    );
    let (mut dec, mut logits, mut value) = prime(model, prompt);
    let (mut ref_dec, mut ref_logits, _) = prime(ref_model, prompt);
    let mut action = TokenSeq::empty_like(prompt, max_new);
    let mut token_logprobs = Vec::with_capacity(max_new);
    let mut token_kls = Vec::with_capacity(max_new);
    let mut values = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        token_kls.push(kl_from_logits(&logits, &ref_logits));
        values.push(value);
        let probs = softmax(&logits);
        let w = draw(&probs, prompt.pad_id(), rng);
        token_logprobs.push(log_softmax(&logits)[w]);
        action = action.append(w).expect("action capacity is max_new");
        if w == prompt.eos_id() {
            break;
        }
        let (l, v) = dec.step(w);
        logits = l;
        value = v;
        let (rl, _) = ref_dec.step(w);
        ref_logits = rl;
    }
    SampledAction {
        action,
        token_logprobs,
        token_kls,
        values,
    }
}

/// Temperature-1 sampling without reference/value bookkeeping (evaluation).
pub fn sample_tokens(
    model: &ParamStore,
    prompt: &TokenSeq,
    max_new: usize,
    rng: &mut impl Rng,
) -> TokenSeq {
    assert!(max_new >= 1);
    let (mut dec, mut logits, _) = prime(model, prompt);
    let mut action = TokenSeq::empty_like(prompt, max_new);
    for _ in 0..max_new {
        let probs = softmax(&logits);
        let w = draw(&probs, prompt.pad_id(), rng);
        action = action.append(w).expect("action capacity is max_new");
        if w == prompt.eos_id() {
            break;
        }
        logits = dec.step(w).0;
    }
    action
}

/// Deterministic argmax decode (used for pass@1 and identity tests).
pub fn greedy_action(model: &ParamStore, prompt: &TokenSeq, max_new: usize) -> TokenSeq {
    assert!(max_new >= 1);
    let (mut dec, mut logits, _) = prime(model, prompt);
    let mut action = TokenSeq::empty_like(prompt, max_new);
    for _ in 0..max_new {
        let w = argmax_unmasked(&logits, prompt.pad_id());
        action = action.append(w).expect("action capacity is max_new");
        if w == prompt.eos_id() {
            break;
        }
        logits = dec.step(w).0;
    }
    action
}

/// Sum over the action's real tokens of log pi(w_i | prompt, w_{1:i-1});
/// pads are excluded by construction.
pub fn sentence_logprob(model: &ParamStore, prompt: &TokenSeq, action: &TokenSeq) -> f64 {
    assert!(
        action.real_len() >= 1,
        "action must contain at least one token"
    );
    let (mut dec, mut logits, _) = prime(model, prompt);
    let mut lp = 0.0;
    let toks = action.real_tokens();
    for (i, &w) in toks.iter().enumerate() {
        lp += log_softmax(&logits)[w];
        if i + 1 < toks.len() {
            logits = dec.step(w).0;
        }
    }
    lp
}

/// Exact full-vocabulary KL between the two models' next-token distributions
/// at `context`.
pub fn step_kl(model: &ParamStore, ref_model: &ParamStore, context: &TokenSeq) -> f64 {
    let (_, logits, _) = prime(model, context);
    let (_, ref_logits, _) = prime(ref_model, context);
    kl_from_logits(&logits, &ref_logits)
}

/// Sentence KL: the sum over the action's real tokens of the exact step KL
/// at each pre-decision context.
pub fn sentence_kl(
    model: &ParamStore,
    ref_model: &ParamStore,
    prompt: &TokenSeq,
    action: &TokenSeq,
) -> f64 {
    let (mut dec, mut logits, _) = prime(model, prompt);
    let (mut ref_dec, mut ref_logits, _) = prime(ref_model, prompt);
    let toks = action.real_tokens();
    let mut total = 0.0;
    for (i, &w) in toks.iter().enumerate() {
        total += kl_from_logits(&logits, &ref_logits);
        if i + 1 < toks.len() {
            logits = dec.step(w).0;
            ref_logits = ref_dec.step(w).0;
        }
    }
    total
}
