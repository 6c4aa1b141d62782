use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    sample_group, score_group, scores, GrpoConfig, GrpoError, PolicyParams, RolloutGroup, SyntheticEnv, ToyQuery,
};
use crate::scalar::{logsumexp, Scalar};

/// Objective value with its two parts, averaged the same way as the total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms<T> {
    pub objective: T,
    pub surrogate: T,
    /// Mean per-step KL estimate against the reference policy.
    pub kl: T,
    /// Share of steps whose ratio was clipped out of the gradient.
    pub clipped_fraction: f64,
}

/// Per-step softmax over the remaining candidates, walked along `order`.
/// Calls `visit(t, chosen, logprob, probs, remaining)` for each step.
fn walk<T: Scalar>(s: &[T], order: &[usize], mut visit: impl FnMut(usize, usize, T, &[T], &[bool])) {
    let mut remaining = vec![true; s.len()];
    let mut probs = vec![T::zero(); s.len()];
    for (t, &o) in order.iter().enumerate() {
        let lse = logsumexp(s.iter().zip(&remaining).filter(|(_, &r)| r).map(|(&x, _)| x));
        for c in 0..s.len() {
            probs[c] = if remaining[c] { (s[c] - lse).exp() } else { T::zero() };
        }
        visit(t, o, (s[o] - lse).min(T::zero()), &probs, &remaining);
        remaining[o] = false;
    }
}

/// Adds `coef · (v_chosen − Σ p_c v_c)` into `acc`, the item-side factor of
/// ∇ log π for one step. The full gradient is `u ⊗ acc`.
fn add_step_direction<T: Scalar>(acc: &mut [T], query: &ToyQuery<T>, chosen: usize, probs: &[T], coef: T) {
    if coef == T::zero() {
        return;
    }
    for (j, a) in acc.iter_mut().enumerate() {
        let mean: T = query.candidate_features.iter().zip(probs).map(|(v, &p)| p * v[j]).sum();
        *a = *a + coef * (query.candidate_features[chosen][j] - mean);
    }
}

fn outer_into<T: Scalar>(grad: &mut [T], u: &[T], item: &[T], scale: T) {
    let d_item = item.len();
    for (i, &ui) in u.iter().enumerate() {
        for (j, &vj) in item.iter().enumerate() {
            grad[i * d_item + j] = grad[i * d_item + j] + scale * ui * vj;
        }
    }
}

/// Gradient of the total log-probability of `order`.
pub fn policy_logprob_grad<T: Scalar>(
    params: &PolicyParams<T>,
    query: &ToyQuery<T>,
    order: &[usize],
) -> Result<(T, Vec<T>), GrpoError> {
    let s = scores(params, query)?;
    let mut acc = vec![T::zero(); params.d_item];
    let mut total = T::zero();
    walk(&s, order, |_, o, lp, probs, _| {
        total = total + lp;
        add_step_direction(&mut acc, query, o, probs, T::one());
    });
    let mut grad = vec![T::zero(); params.dim()];
    outer_into(&mut grad, &query.user_features, &acc, T::one());
    Ok((total, grad))
}

/// Which branch of the clipped surrogate each step sits on. `true` means the
/// unclipped ratio term carries gradient.
pub(crate) type BranchPattern = Vec<bool>;

fn evaluate<T: Scalar>(
    theta: &PolicyParams<T>,
    theta_old: &PolicyParams<T>,
    theta_ref: &PolicyParams<T>,
    groups: &[RolloutGroup<T>],
    config: &GrpoConfig<T>,
    want_grad: bool,
) -> Result<(ObjectiveTerms<T>, Vec<T>, BranchPattern), GrpoError> {
    let eps = config.clip_epsilon;
    let beta = config.kl_coefficient;
    let (lo, hi) = (T::one() - eps, T::one() + eps);
    let mut grad = vec![T::zero(); theta.dim()];
    let mut pattern = Vec::new();
    let (mut surrogate, mut kl) = (T::zero(), T::zero());
    let (mut clipped, mut steps) = (0usize, 0usize);
    if groups.is_empty() {
        let zero = ObjectiveTerms { objective: T::zero(), surrogate: T::zero(), kl: T::zero(), clipped_fraction: 0.0 };
        return Ok((zero, grad, pattern));
    }
    let n_groups = T::from_count(groups.len());
    for g in groups {
        if g.advantages.len() != g.rollouts.len() {
            return Err(GrpoError::Unscored);
        }
        let q = &g.query;
        let s = scores(theta, q)?;
        let s_old = scores(theta_old, q)?;
        let s_ref = scores(theta_ref, q)?;
        let group_w = T::one() / (n_groups * T::from_count(g.rollouts.len()));
        let mut acc = vec![T::zero(); theta.d_item];
        for (r, &adv) in g.rollouts.iter().zip(&g.advantages) {
            if r.order.is_empty() {
                continue;
            }
            let old = super::step_logprobs_from_scores(&s_old, &r.order);
            let refl = super::step_logprobs_from_scores(&s_ref, &r.order);
            let w = group_w / T::from_count(r.order.len());
            walk(&s, &r.order, |t, o, lp, probs, _| {
                let ratio = (lp - old[t]).exp();
                let clip = ratio.max(lo).min(hi);
                let (unclipped, clipped_term) = (ratio * adv, clip * adv);
                let active = unclipped <= clipped_term;
                let delta = refl[t] - lp;
                let k = delta.exp() - delta - T::one();
                surrogate = surrogate + w * unclipped.min(clipped_term);
                kl = kl + w * k;
                steps += 1;
                if !active {
                    clipped += 1;
                }
                pattern.push(active);
                if want_grad {
                    let mut coef = beta * (delta.exp() - T::one());
                    if active {
                        coef = coef + adv * ratio;
                    }
                    add_step_direction(&mut acc, q, o, probs, w * coef);
                }
            });
        }
        if want_grad {
            outer_into(&mut grad, &q.user_features, &acc, T::one());
        }
    }
    let terms = ObjectiveTerms {
        objective: surrogate - beta * kl,
        surrogate,
        kl,
        clipped_fraction: if steps == 0 { 0.0 } else { clipped as f64 / steps as f64 },
    };
    Ok((terms, grad, pattern))
}

/// J(θ): per-step clipped ratio surrogate minus β times the KL estimate,
/// averaged over steps, then rollouts, then groups.
pub fn grpo_objective<T: Scalar>(
    theta: &PolicyParams<T>,
    theta_old: &PolicyParams<T>,
    theta_ref: &PolicyParams<T>,
    groups: &[RolloutGroup<T>],
    config: &GrpoConfig<T>,
) -> Result<ObjectiveTerms<T>, GrpoError> {
    Ok(evaluate(theta, theta_old, theta_ref, groups, config, false)?.0)
}

/// J(θ) and its analytic gradient. On a clipped step only the KL part
/// contributes.
pub fn grpo_gradient<T: Scalar>(
    theta: &PolicyParams<T>,
    theta_old: &PolicyParams<T>,
    theta_ref: &PolicyParams<T>,
    groups: &[RolloutGroup<T>],
    config: &GrpoConfig<T>,
) -> Result<(ObjectiveTerms<T>, Vec<T>), GrpoError> {
    let (t, g, _) = evaluate(theta, theta_old, theta_ref, groups, config, true)?;
    Ok((t, g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    /// Over probes whose ±h neighbourhood stays on one surrogate branch.
    pub max_relative_error: f64,
    pub checked: usize,
    /// Probes that straddle a clip boundary.
    pub kinks: usize,
    /// Largest error among the kink probes, reported but not judged.
    pub max_kink_error: f64,
}

/// Compares the analytic gradient with central differences on
/// `probe_count` coordinates (all of them when `probe_count ≥ dim`).
/// Relative error is `|a − n| / max(|a|, |n|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    theta: &PolicyParams<f64>,
    theta_old: &PolicyParams<f64>,
    theta_ref: &PolicyParams<f64>,
    groups: &[RolloutGroup<f64>],
    config: &GrpoConfig<f64>,
    probe_count: usize,
    step: f64,
    seed: u64,
) -> Result<FdReport, GrpoError> {
    const FLOOR: f64 = 1e-6;
    let (_, grad, base) = evaluate(theta, theta_old, theta_ref, groups, config, true)?;
    let dim = theta.dim();
    let coords: Vec<usize> = if probe_count >= dim {
        (0..dim).collect()
    } else {
        index::sample(&mut ChaCha8Rng::seed_from_u64(seed), dim, probe_count).into_vec()
    };
    let mut report = FdReport { max_relative_error: 0.0, checked: 0, kinks: 0, max_kink_error: 0.0 };
    for j in coords {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let (tp, _, pp) = evaluate(&theta.axpy(step, &e), theta_old, theta_ref, groups, config, false)?;
        let (tm, _, pm) = evaluate(&theta.axpy(-step, &e), theta_old, theta_ref, groups, config, false)?;
        let numeric = (tp.objective - tm.objective) / (2.0 * step);
        let err = (grad[j] - numeric).abs() / grad[j].abs().max(numeric.abs()).max(FLOOR);
        if pp != base || pm != base {
            report.kinks += 1;
            report.max_kink_error = report.max_kink_error.max(err);
        } else {
            report.checked += 1;
            report.max_relative_error = report.max_relative_error.max(err);
        }
    }
    Ok(report)
}

/// An off-policy probe point for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct FdSetup {
    pub theta: PolicyParams<f64>,
    pub theta_old: PolicyParams<f64>,
    pub theta_ref: PolicyParams<f64>,
    pub groups: Vec<RolloutGroup<f64>>,
}

/// θ_old and θ_ref drawn uniformly in ±0.3, θ a ±0.05 perturbation of θ_old,
/// and `n_groups` scored groups sampled from θ_old.
pub fn fd_setup(
    d_user: usize,
    d_item: usize,
    n_candidates: usize,
    n_groups: usize,
    config: &GrpoConfig<f64>,
    seed: u64,
) -> Result<FdSetup, GrpoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |scale: f64| {
        let v = (0..d_user * d_item).map(|_| rng.random_range(-scale..scale)).collect();
        PolicyParams::from_vec(d_user, d_item, v)
    };
    let theta_old = draw(0.3)?;
    let theta = theta_old.axpy(1.0, &draw(0.05)?.theta);
    let theta_ref = draw(0.3)?;
    let env = SyntheticEnv::<f64>::new(d_user, d_item, n_candidates, seed);
    let groups = env
        .queries(n_groups, 0)
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let g = sample_group(&theta_old, q, config.group_size, crate::seed::derive(seed, &["fd", &i.to_string()]))?;
            Ok(score_group(&g, &config.schedule, config.std_floor))
        })
        .collect::<Result<_, GrpoError>>()?;
    Ok(FdSetup { theta, theta_old, theta_ref, groups })
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn random_params(d_u: usize, d_i: usize, scale: f64, seed: u64) -> PolicyParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::from_vec(d_u, d_i, (0..d_u * d_i).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn groups(old: &PolicyParams<f64>, n: usize, cands: usize, seed: u64) -> Vec<RolloutGroup<f64>> {
        let env = SyntheticEnv::<f64>::new(old.d_user, old.d_item, cands, seed);
        let cfg = GrpoConfig::<f64>::default();
        env.queries(n, seed + 1)
            .iter()
            .enumerate()
            .map(|(i, q)| score_group(&sample_group(old, q, 8, seed + i as u64).unwrap(), &cfg.schedule, cfg.std_floor))
            .collect()
    }

    #[test]
    fn logprob_gradient_matches_differences() {
        let p = random_params(3, 4, 1.0, 1);
        let env = SyntheticEnv::<f64>::new(3, 4, 6, 2);
        let q = &env.queries(1, 3)[0];
        let order = [3, 1, 0, 5, 2, 4];
        let (_, g) = policy_logprob_grad(&p, q, &order).unwrap();
        for j in 0..p.dim() {
            let mut e = vec![0.0; p.dim()];
            e[j] = 1e-6;
            let f = |x: &PolicyParams<f64>| policy_logprob(x, q, &order).unwrap().0;
            let n = (f(&p.axpy(1.0, &e)) - f(&p.axpy(-1.0, &e))) / 2e-6;
            assert_relative_eq!(g[j], n, epsilon = 1e-7, max_relative = 1e-6);
        }
    }

    #[test]
    fn zero_when_all_policies_match_and_rewards_tie() {
        let p = random_params(3, 3, 1.0, 4);
        let mut gs = groups(&p, 4, 5, 5);
        for g in &mut gs {
            g.advantages = vec![0.0; g.rollouts.len()];
        }
        let cfg = GrpoConfig::<f64>::default();
        let (t, grad) = grpo_gradient(&p, &p, &p, &gs, &cfg).unwrap();
        assert_eq!(t.objective, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn clip_caps_a_positive_advantage() {
        // Two candidates; the second step is deterministic, so only step one counts.
        let q =
            ToyQuery { user_features: vec![1.0], candidate_features: vec![vec![1.0], vec![0.0]], positive_index: 0 };
        let old = PolicyParams::from_vec(1, 1, vec![0.0]).unwrap();
        // Choose θ so that π(0) = 0.65 = 1.3 × 0.5.
        let theta = PolicyParams::from_vec(1, 1, vec![(0.65f64 / 0.35).ln()]).unwrap();
        let rollout = Rollout { order: vec![0, 1], step_logprobs: vec![0.5f64.ln(), 0.0], reward: Some(1.0) };
        let g = RolloutGroup { query: q, rollouts: vec![rollout], advantages: vec![1.0] };
        let cfg = GrpoConfig::<f64> { kl_coefficient: 0.0, ..Default::default() };
        let t = grpo_objective(&theta, &old, &theta, std::slice::from_ref(&g), &cfg).unwrap();
        // Steps average: (1.2 + 1.0) / 2.
        assert_relative_eq!(t.surrogate, (1.2 + 1.0) / 2.0, epsilon = 1e-12);
        let (_, grad) = grpo_gradient(&theta, &old, &theta, &[g], &cfg).unwrap();
        assert_eq!(grad, vec![0.0]);
    }

    #[test]
    fn kl_penalty_negative_away_from_reference() {
        let p = random_params(3, 3, 1.0, 6);
        let r = random_params(3, 3, 1.0, 7);
        let mut gs = groups(&p, 3, 6, 8);
        for g in &mut gs {
            g.advantages = vec![0.0; g.rollouts.len()];
        }
        let cfg = GrpoConfig::<f64>::default();
        let t = grpo_objective(&p, &p, &r, &gs, &cfg).unwrap();
        assert!(t.kl > 0.0);
        assert_relative_eq!(t.objective, -cfg.kl_coefficient * t.kl, epsilon = 1e-15);
        assert!(t.objective < 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences_off_policy() {
        let old = random_params(10, 12, 0.3, 9);
        let theta = old.axpy(1.0, &random_params(10, 12, 0.05, 10).theta);
        let reference = random_params(10, 12, 0.3, 11);
        let gs = groups(&old, 6, 8, 12);
        let cfg = GrpoConfig::<f64> { kl_coefficient: 0.05, ..Default::default() };
        let rep = finite_diff_check(&theta, &old, &reference, &gs, &cfg, 1000, 1e-6, 0).unwrap();
        assert_eq!(rep.checked + rep.kinks, 120);
        assert!(rep.checked >= 100, "{rep:?}");
        assert!(rep.max_relative_error <= 1e-5, "{rep:?}");
        let t = grpo_objective(&theta, &old, &reference, &gs, &cfg).unwrap();
        assert!(t.clipped_fraction > 0.0, "clipping not exercised: {t:?}");
    }

    #[test]
    fn f32_objective_runs() {
        let p = PolicyParams::<f32>::zeros(2, 2);
        let env = SyntheticEnv::<f32>::new(2, 2, 4, 1);
        let cfg = GrpoConfig::<f32>::default();
        let q = &env.queries(1, 2)[0];
        let g = score_group(&sample_group(&p, q, 4, 0).unwrap(), &cfg.schedule, cfg.std_floor);
        let t = grpo_objective(&p, &p, &p, &[g], &cfg).unwrap();
        assert!(t.objective.is_finite());
    }
}
