//! Token-level reward shaping, the collective duo reward, and the combined
//! monitoring metric.
//!
//! Shaping charges `-eta * kl` at every real token and adds the task score
//! only at the terminal token. The combined metric is the scalarized
//! objective both training methods are judged on: task score minus eta times
//! the summed sentence KL.

/// Two-branch token shaping: `-eta*kl_i` before the terminal step,
/// `task + (-eta*kl)` at it. `task_score` already includes any collective
/// component the caller chose to hand the terminal token.
pub fn shape_rewards(task_score: f64, token_kls: &[f64], eta: f64) -> Vec<f64> {
    debug_assert!(
        !token_kls.is_empty(),
        "an action has at least one real token"
    );
    debug_assert!(token_kls.iter().all(|&k| k >= 0.0));
    debug_assert!(eta >= 0.0);
    let last = token_kls.len() - 1;
    token_kls
        .iter()
        .enumerate()
        .map(|(i, &kl)| {
            let base = -eta * kl;
            if i == last {
                task_score + base
            } else {
                base
            }
        })
        .collect()
}

/// Both agents receive the same scalar: the sum of their individual task
/// rewards.
pub fn collective_reward(r_pioneer: f64, r_observer: f64) -> f64 {
    debug_assert!(r_pioneer.is_finite() && r_observer.is_finite());
    r_pioneer + r_observer
}

/// Monitoring metric r_c = task - eta * sum(kl): rises with task skill,
/// falls as the policy drifts from the reference.
pub fn combined_metric(task_score: f64, token_kls: &[f64], eta: f64) -> f64 {
    task_score - eta * token_kls.iter().sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_kl_at_init_yields_sparse_task_reward() {
        assert_eq!(
            shape_rewards(1.0, &[0.0, 0.0, 0.0], 0.3),
            vec![0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn shaping_by_direct_substitution() {
        let r = shape_rewards(0.0, &[0.2, 0.1], 0.01);
        assert!((r[0] - (-0.002)).abs() < 1e-15);
        assert!((r[1] - (-0.001)).abs() < 1e-15);
    }

    #[test]
    fn eta_zero_is_pure_sparse_reward() {
        assert_eq!(
            shape_rewards(0.7, &[0.4, 0.9, 0.1, 2.0], 0.0),
            vec![0.0, 0.0, 0.0, 0.7]
        );
    }

    #[test]
    fn shaping_is_linear_in_eta() {
        let kls = [0.3, 0.7, 0.05];
        let task = 0.4;
        let a = shape_rewards(task, &kls, 0.1);
        let b = shape_rewards(task, &kls, 0.2);
        let c = shape_rewards(task, &kls, 0.3);
        for i in 0..kls.len() {
            let d1 = b[i] - a[i];
            let d2 = c[i] - b[i];
            assert!((d1 - d2).abs() < 1e-15);
        }
    }

    #[test]
    fn collective_reward_is_the_sum() {
        assert_eq!(collective_reward(1.0, 0.0), 1.0);
        assert_eq!(collective_reward(0.0, 0.0), 0.0);
        assert!((collective_reward(0.8, 0.6) - 1.4).abs() < 1e-15);
        assert_eq!(collective_reward(0.25, 0.5), collective_reward(0.5, 0.25));
    }

    #[test]
    fn combined_metric_by_substitution() {
        assert_eq!(combined_metric(1.0, &[0.0, 0.0], 0.3), 1.0);
        assert!((combined_metric(0.5, &[0.2, 0.3], 0.3) - 0.35).abs() < 1e-15);
        assert_eq!(combined_metric(0.42, &[3.0, 1.0], 0.0), 0.42);
    }

    #[test]
    fn shaped_sum_equals_combined_metric() {
        // sentence-level sum of shaped rewards == r_c when the terminal task
        // term carries no collective bonus
        let kls = [0.11, 0.04, 0.9, 0.33];
        let task = 0.6;
        let eta = 0.07;
        let sum: f64 = shape_rewards(task, &kls, eta).iter().sum();
        assert!((sum - combined_metric(task, &kls, eta)).abs() < 1e-12);
    }
}
