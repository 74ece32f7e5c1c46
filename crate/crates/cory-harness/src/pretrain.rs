//! Builds the reference policy: brief supervised next-token training on
//! synthetic, content-random completions so the model acquires the response
//! format (answer shape, stopping) before any task reward is seen. The
//! result plays the role of the pre-trained model both agents are duplicated
//! from and the KL anchor points back to.
//!
//! Two objectives share each batch. Completion positions train the whole
//! network; interior prompt positions train only the embedding and trunk
//! (their logits-head gradient is dropped), so the trunk learns to encode
//! prompt content without next-prompt-token statistics bleeding into the
//! response prior.

use cory_core::nn::{Optimizer, ParamStore, Upstream};
use cory_core::policy::softmax;
use cory_core::rng::{site, RngFactory};
use cory_core::tasks::TaskSpec;

fn ce_rows(
    model: &ParamStore,
    trace: &cory_core::nn::ForwardTrace,
    targets: &[usize],
    rows: std::ops::Range<usize>,
    scale: f64,
) -> (Upstream, f64) {
    let vocab = model.arch().vocab_size;
    let mut upstream = Upstream::zeros(trace.len(), vocab);
    let mut ce = 0.0;
    for row in rows {
        let w = targets[row + 1];
        let probs = softmax(&trace.logits[row]);
        ce -= probs[w].ln();
        for (j, pj) in probs.iter().enumerate() {
            upstream.dlogits[row][j] = scale * (if j == w { 1.0 - pj } else { -pj });
        }
    }
    (upstream, ce)
}

/// Builds the shared reference model from scratch. Like a published
/// pre-trained checkpoint, it is the same artifact for every run seed: its
/// init and training data come from a fixed dedicated stream, so run seeds
/// vary only the RL stochasticity.
pub fn build_reference_model(
    arch: cory_core::nn::ModelArch,
    task: &TaskSpec,
    steps: usize,
    batch: usize,
    lr: f64,
) -> ParamStore {
    let factory = RngFactory::new(PRETRAIN_SEED);
    let mut model = ParamStore::new(arch);
    model.init_default(&mut factory.stream(&[site::INIT, 0]));
    if steps > 0 {
        pretrain_format(&mut model, task, steps, batch, lr, &factory);
    }
    model
}

/// Fixed provenance seed of the shared reference checkpoint.
pub const PRETRAIN_SEED: u64 = 1;

/// Mean next-token log-likelihood ascent over `steps` sampled batches.
/// Returns the final batch's completion cross-entropy (nats/token).
pub fn pretrain_format(
    model: &mut ParamStore,
    task: &TaskSpec,
    steps: usize,
    batch: usize,
    lr: f64,
    rngf: &RngFactory,
) -> f64 {
    let mut opt = Optimizer::adam(model.param_count());
    let mut last_ce = 0.0;
    let sup_step = |model: &mut ParamStore,
                    opt: &mut Optimizer,
                    examples: &[(cory_core::mdp::TokenSeq, Vec<usize>)],
                    lr: f64|
     -> f64 {
        let contexts: Vec<_> = examples
            .iter()
            .map(|(prompt, cont)| {
                let mut ctx = prompt.clone();
                for &w in cont {
                    ctx = ctx
                        .append(w)
                        .expect("pretrain sample fits the prompt capacity");
                }
                (ctx, prompt.real_len())
            })
            .collect();
        let cont_tokens: usize = examples.iter().map(|(_, c)| c.len()).sum();
        let scale = 1.0 / cont_tokens as f64;
        let mut ce = 0.0;
        for (ctx, p_len) in &contexts {
            let trace = model.forward(ctx);
            let (upstream, ce_i) = ce_rows(
                model,
                &trace,
                ctx.real_tokens(),
                p_len - 1..ctx.real_len() - 1,
                scale,
            );
            ce += ce_i;
            model
                .backward(&trace, &upstream)
                .expect("upstream shaped from the trace");
        }
        opt.step(model, lr).expect("finite supervised gradients");
        ce * scale
    };

    // phase 1: response format on raw and reference-wrapped prompts
    for step in 0..steps {
        let mut rng = rngf.stream(&[site::INIT, 1, step as u64]);
        let examples: Vec<_> = (0..batch).map(|_| task.pretrain_sample(&mut rng)).collect();
        last_ce = sup_step(model, &mut opt, &examples, lr);
    }
    // phase 2: in-context echo on reference-wrapped prompts only. The echo
    // skill is what lets an observer exploit its reference; raw-prompt
    // conditionals stay close to phase 1 because no raw samples appear here.
    for step in 0..steps * ECHO_STEP_FACTOR {
        let mut rng = rngf.stream(&[site::INIT, 2, step as u64]);
        let examples: Vec<_> = (0..batch).map(|_| task.echo_sample(&mut rng)).collect();
        sup_step(model, &mut opt, &examples, lr);
    }
    last_ce
}

const ECHO_STEP_FACTOR: usize = 2;
