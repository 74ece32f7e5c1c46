//! pass@k evaluation: an instance passes when at least one of k generations
//! extracts to the ground truth. k = 1 uses greedy decoding; larger k draws
//! temperature-1 samples.

use rand::rngs::StdRng;

use cory_core::mdp::TokenSeq;
use cory_core::nn::ParamStore;
use cory_core::par::par_map_indexed;
use cory_core::policy::{greedy_action, sample_tokens};
use cory_core::rng::{site, RngFactory};
use cory_core::tasks::{extract_and_match, ObjectiveInstance, TaskSpec};

/// Anything that can turn a prompt into an action. The trained model is the
/// normal implementation; tests substitute hand-crafted policies.
pub trait ActionSampler: Sync {
    fn draw(&self, prompt: &TokenSeq, max_new: usize, rng: &mut StdRng) -> TokenSeq;
    fn greedy(&self, prompt: &TokenSeq, max_new: usize) -> TokenSeq;
}

impl ActionSampler for ParamStore {
    fn draw(&self, prompt: &TokenSeq, max_new: usize, rng: &mut StdRng) -> TokenSeq {
        sample_tokens(self, prompt, max_new, rng)
    }

    fn greedy(&self, prompt: &TokenSeq, max_new: usize) -> TokenSeq {
        greedy_action(self, prompt, max_new)
    }
}

/// Fraction of instances where at least one of `k` generations matches the
/// ground truth.
pub fn pass_at_k<S: ActionSampler + ?Sized>(
    policy: &S,
    task: &TaskSpec,
    instances: &[ObjectiveInstance],
    k: usize,
    rngf: &RngFactory,
) -> f64 {
    assert!(k >= 1);
    if instances.is_empty() {
        return 0.0;
    }
    let max_new = task.max_action_len;
    let passes = par_map_indexed(instances.len(), |i| {
        let inst = &instances[i];
        let hit = |action: &TokenSeq| {
            extract_and_match(action, &inst.ground_truth, &|t| task.is_digit(t)) == 1.0
        };
        if k == 1 {
            hit(&policy.greedy(&inst.prompt, max_new))
        } else {
            (0..k).any(|j| {
                let mut rng = rngf.stream(&[site::EVAL, 7, i as u64, j as u64]);
                hit(&policy.draw(&inst.prompt, max_new, &mut rng))
            })
        }
    });
    passes.iter().filter(|&&p| p).count() as f64 / instances.len() as f64
}
