//! Toy listwise ranking policy and group-relative policy optimization.
//!
//! The policy is Plackett–Luce over bilinear scores `uᵀΘv`: an ordering is
//! emitted one candidate at a time, each step a softmax over the candidates
//! not yet placed. Steps play the role of tokens, so per-step ratios, clipping
//! and the KL penalty all have something to act on.

mod env;
mod objective;
mod train;

pub use env::{enumerate_permutations, expected_reward, expected_reward_exact, teacher_demonstrations, SyntheticEnv};
pub use objective::{fd_setup, finite_diff_check, grpo_gradient, grpo_objective, FdReport, FdSetup, ObjectiveTerms};
pub use train::{
    grpo_step, read_checkpoint, run_toy_experiment, toy_sft_fit, train, write_checkpoint, write_curve_csv,
    AnchorConfig, CurvePoint, StepStats, ToyExperiment, TrainOptions, TrainState, TrainingCurve,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::RewardSchedule;
use crate::scalar::{logsumexp, Scalar};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum GrpoError {
    #[error("order is not a permutation of {n} candidates: {order:?}")]
    InvalidOrder { n: usize, order: Vec<usize> },
    #[error("non-finite score for candidate {candidate}")]
    NonFiniteScore { candidate: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("group has no rewards or advantages assigned")]
    Unscored,
    #[error(
        "non-finite gradient at step {step} (max |g| = {max_abs}, objective = {objective}); lower the learning rate"
    )]
    NonFiniteGradient { step: usize, max_abs: f64, objective: f64 },
    #[error(
        "fit diverged at epoch {epoch}: log-likelihood fell from {before} to {after}; try a smaller learning rate"
    )]
    Diverged { epoch: usize, before: f64, after: f64 },
    #[error("no demonstrations")]
    NoDemonstrations,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Bilinear scorer parameters, row-major `d_user × d_item`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<T> {
    pub d_user: usize,
    pub d_item: usize,
    pub theta: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn zeros(d_user: usize, d_item: usize) -> Self {
        PolicyParams { d_user, d_item, theta: vec![T::zero(); d_user * d_item] }
    }

    pub fn from_vec(d_user: usize, d_item: usize, theta: Vec<T>) -> Result<Self, GrpoError> {
        if theta.len() != d_user * d_item {
            return Err(GrpoError::Shape { expected: d_user * d_item, got: theta.len() });
        }
        Ok(PolicyParams { d_user, d_item, theta })
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, c: T) -> Self {
        PolicyParams { theta: self.theta.iter().map(|&x| x * c).collect(), ..self.clone() }
    }

    /// `self + c · direction`.
    pub fn axpy(&self, c: T, direction: &[T]) -> Self {
        let theta = self.theta.iter().zip(direction).map(|(&x, &d)| x + c * d).collect();
        PolicyParams { theta, ..self.clone() }
    }

    /// `Θᵀu`, the item-side weight vector for one user.
    fn item_weights(&self, user: &[T]) -> Vec<T> {
        let mut w = vec![T::zero(); self.d_item];
        for (i, &u) in user.iter().enumerate() {
            let row = &self.theta[i * self.d_item..(i + 1) * self.d_item];
            for (wj, &t) in w.iter_mut().zip(row) {
                *wj = *wj + u * t;
            }
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyQuery<T> {
    pub user_features: Vec<T>,
    pub candidate_features: Vec<Vec<T>>,
    pub positive_index: usize,
}

impl<T: Scalar> ToyQuery<T> {
    pub fn n_candidates(&self) -> usize {
        self.candidate_features.len()
    }

    fn check(&self, params: &PolicyParams<T>) -> Result<(), GrpoError> {
        if self.user_features.len() != params.d_user {
            return Err(GrpoError::Shape { expected: params.d_user, got: self.user_features.len() });
        }
        if let Some(v) = self.candidate_features.iter().find(|v| v.len() != params.d_item) {
            return Err(GrpoError::Shape { expected: params.d_item, got: v.len() });
        }
        Ok(())
    }
}

/// Candidate scores `uᵀΘv_c`.
pub fn scores<T: Scalar>(params: &PolicyParams<T>, query: &ToyQuery<T>) -> Result<Vec<T>, GrpoError> {
    query.check(params)?;
    let w = params.item_weights(&query.user_features);
    query
        .candidate_features
        .iter()
        .enumerate()
        .map(|(c, v)| {
            let s: T = w.iter().zip(v).map(|(&a, &b)| a * b).sum();
            if s.is_finite() {
                Ok(s)
            } else {
                Err(GrpoError::NonFiniteScore { candidate: c })
            }
        })
        .collect()
}

fn check_order(n: usize, order: &[usize]) -> Result<(), GrpoError> {
    let mut seen = vec![false; n];
    let ok = order.len() == n
        && order.iter().all(|&i| {
            let fresh = i < n && !seen[i];
            if fresh {
                seen[i] = true;
            }
            fresh
        });
    if ok {
        Ok(())
    } else {
        Err(GrpoError::InvalidOrder { n, order: order.to_vec() })
    }
}

/// Per-step log-probabilities of `order` from precomputed scores.
pub(crate) fn step_logprobs_from_scores<T: Scalar>(s: &[T], order: &[usize]) -> Vec<T> {
    let mut remaining = vec![true; s.len()];
    order
        .iter()
        .map(|&o| {
            let lse = logsumexp(s.iter().zip(&remaining).filter(|(_, &r)| r).map(|(&x, _)| x));
            remaining[o] = false;
            (s[o] - lse).min(T::zero())
        })
        .collect()
}

/// Total and per-step log-probability of a full ordering.
pub fn policy_logprob<T: Scalar>(
    params: &PolicyParams<T>,
    query: &ToyQuery<T>,
    order: &[usize],
) -> Result<(T, Vec<T>), GrpoError> {
    check_order(query.n_candidates(), order)?;
    let s = scores(params, query)?;
    let steps = step_logprobs_from_scores(&s, order);
    Ok((steps.iter().copied().sum(), steps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout<T> {
    pub order: Vec<usize>,
    /// Under the policy that generated the rollout.
    pub step_logprobs: Vec<T>,
    pub reward: Option<T>,
}

impl<T> Rollout<T> {
    /// 1-based position of candidate `c`.
    pub fn rank_of(&self, c: usize) -> Option<usize> {
        self.order.iter().position(|&o| o == c).map(|i| i + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup<T> {
    pub query: ToyQuery<T>,
    pub rollouts: Vec<Rollout<T>>,
    /// Empty until computed.
    pub advantages: Vec<T>,
}

impl<T: Scalar> RolloutGroup<T> {
    pub fn rewards(&self) -> Option<Vec<T>> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }
}

/// One Plackett–Luce draw via the Gumbel-max construction: sorting
/// score + Gumbel noise yields sequential sampling without replacement.
fn sample_order<T: Scalar>(s: &[T], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let gumbel = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    let mut keyed: Vec<(f64, usize)> =
        s.iter().enumerate().map(|(i, &x)| (x.to_f64_lossy() + gumbel.sample(rng), i)).collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Draws `g` rollouts from `theta_old`, rewards left unset.
pub fn sample_group<T: Scalar>(
    theta_old: &PolicyParams<T>,
    query: &ToyQuery<T>,
    g: usize,
    seed: u64,
) -> Result<RolloutGroup<T>, GrpoError> {
    let s = scores(theta_old, query)?;
    let rollouts = (0..g)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &["rollout", &i.to_string()]));
            let order = sample_order(&s, &mut rng);
            let step_logprobs = step_logprobs_from_scores(&s, &order);
            Rollout { order, step_logprobs, reward: None }
        })
        .collect();
    Ok(RolloutGroup { query: query.clone(), rollouts, advantages: Vec::new() })
}

/// Sets each rollout's reward from the positive's rank.
pub fn assign_rewards<T: Scalar>(group: &RolloutGroup<T>, schedule: &RewardSchedule<T>) -> RolloutGroup<T> {
    let mut g = group.clone();
    let pos = g.query.positive_index;
    for r in &mut g.rollouts {
        r.reward = Some(schedule.reward(r.rank_of(pos)));
    }
    g
}

/// `(r − mean) / (std + floor)` with the population std. A group whose
/// rewards are all equal gets exact zeros.
pub fn group_advantages<T: Scalar>(rewards: &[T], std_floor: T) -> Vec<T> {
    if rewards.is_empty() {
        return Vec::new();
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![T::zero(); rewards.len()];
    }
    let n = T::from_count(rewards.len());
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let denom = var.sqrt() + std_floor;
    rewards.iter().map(|&r| (r - mean) / denom).collect()
}

/// Rewards then advantages for a freshly sampled group.
pub fn score_group<T: Scalar>(group: &RolloutGroup<T>, schedule: &RewardSchedule<T>, std_floor: T) -> RolloutGroup<T> {
    let mut g = assign_rewards(group, schedule);
    g.advantages = group_advantages(&g.rewards().expect("just assigned"), std_floor);
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig<T> {
    pub group_size: usize,
    pub clip_epsilon: T,
    pub kl_coefficient: T,
    pub learning_rate: T,
    pub batch_size: usize,
    pub std_floor: T,
    /// Gradient steps per batch before `theta_old` is refreshed.
    pub inner_updates: usize,
    pub schedule: RewardSchedule<T>,
}

impl<T: Scalar> Default for GrpoConfig<T> {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_epsilon: T::lit(0.2),
            kl_coefficient: T::lit(1.0e-3),
            learning_rate: T::lit(2.0),
            batch_size: 64,
            std_floor: T::lit(1e-8),
            inner_updates: 8,
            schedule: RewardSchedule::standard(),
        }
    }
}

impl<T: Scalar> GrpoConfig<T> {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.to_owned()));
        if self.group_size == 0 {
            return bad("group_size must be at least 1");
        }
        if !(self.clip_epsilon > T::zero() && self.clip_epsilon < T::one()) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if self.kl_coefficient < T::zero() {
            return bad("kl_coefficient must be non-negative");
        }
        if self.batch_size == 0 || self.inner_updates == 0 {
            return bad("batch_size and inner_updates must be at least 1");
        }
        if !(self.learning_rate > T::zero()) {
            return bad("learning_rate must be positive");
        }
        self.schedule.validate().map_err(|e| GrpoError::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    pub(crate) fn query(n: usize, d: usize, seed: u64) -> ToyQuery<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..d).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        ToyQuery { user_features: v(), candidate_features: (0..n).map(|_| v()).collect(), positive_index: 0 }
    }

    #[test]
    fn equal_scores_two_candidates() {
        let q =
            ToyQuery { user_features: vec![1.0], candidate_features: vec![vec![0.5], vec![0.5]], positive_index: 0 };
        let p = PolicyParams::from_vec(1, 1, vec![3.0]).unwrap();
        for order in [[0, 1], [1, 0]] {
            let (t, steps) = policy_logprob(&p, &q, &order).unwrap();
            assert_relative_eq!(t, 0.5f64.ln(), epsilon = 1e-15);
            assert_eq!(steps[1], 0.0);
        }
    }

    #[test]
    fn zero_theta_is_uniform() {
        let q = query(5, 3, 1);
        let p = PolicyParams::zeros(3, 3);
        let (t, _) = policy_logprob(&p, &q, &[4, 2, 0, 1, 3]).unwrap();
        assert_relative_eq!(t, -(120f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn invalid_orders_rejected() {
        let q = query(3, 2, 1);
        let p = PolicyParams::zeros(2, 2);
        assert!(policy_logprob(&p, &q, &[0, 1]).is_err());
        assert!(policy_logprob(&p, &q, &[0, 0, 1]).is_err());
        assert!(policy_logprob(&p, &q, &[0, 1, 3]).is_err());
        assert!(policy_logprob(&PolicyParams::zeros(3, 2), &q, &[0, 1, 2]).is_err());
    }

    #[test]
    fn non_finite_score_errors() {
        let q = query(3, 2, 1);
        let p = PolicyParams::from_vec(2, 2, vec![f64::INFINITY, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(policy_logprob(&p, &q, &[0, 1, 2]), Err(GrpoError::NonFiniteScore { .. })));
    }

    #[test]
    fn permutations_sum_to_one_for_four() {
        let q = query(4, 3, 7);
        let p = PolicyParams::from_vec(3, 3, (0..9).map(|i| (i as f64 - 4.0) * 0.7).collect()).unwrap();
        let total: f64 = enumerate_permutations(4).iter().map(|o| policy_logprob(&p, &q, o).unwrap().0.exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn sampling_is_seeded() {
        let q = query(20, 4, 2);
        let p = PolicyParams::from_vec(4, 4, vec![0.3; 16]).unwrap();
        let a = sample_group(&p, &q, 8, 11).unwrap();
        assert_eq!(a, sample_group(&p, &q, 8, 11).unwrap());
        assert_ne!(a, sample_group(&p, &q, 8, 12).unwrap());
        assert_eq!(a.rollouts.len(), 8);
        for r in &a.rollouts {
            let mut o = r.order.clone();
            o.sort();
            assert_eq!(o, (0..20).collect::<Vec<_>>());
            assert!(r.step_logprobs.iter().all(|&l| l <= 0.0));
            assert_eq!(r.step_logprobs, policy_logprob(&p, &q, &r.order).unwrap().1);
        }
    }

    #[test]
    fn sampling_matches_plackett_luce_frequencies() {
        // Empirical first-choice frequencies against softmax probabilities.
        let q = query(3, 2, 5);
        let p = PolicyParams::from_vec(2, 2, vec![1.5, -0.5, 0.8, 2.0]).unwrap();
        let s = scores(&p, &q).unwrap();
        let lse = logsumexp(s.iter().copied());
        let mut counts = [0usize; 3];
        let n = 40_000;
        let g = sample_group(&p, &q, n, 3).unwrap();
        for r in &g.rollouts {
            counts[r.order[0]] += 1;
        }
        for c in 0..3 {
            let want = (s[c] - lse).exp();
            let got = counts[c] as f64 / n as f64;
            assert!((got - want).abs() < 4.0 * (want * (1.0 - want) / n as f64).sqrt() + 1e-3, "{c}: {got} vs {want}");
        }
    }

    #[test]
    fn rewards_from_positive_rank() {
        let sched = RewardSchedule::<f64>::standard();
        let mk = |order: Vec<usize>, positive_index| {
            let n = order.len();
            let q = ToyQuery { user_features: vec![0.0], candidate_features: vec![vec![0.0]; n], positive_index };
            let r = Rollout { step_logprobs: vec![0.0; n], order, reward: None };
            assign_rewards(&RolloutGroup { query: q, rollouts: vec![r], advantages: vec![] }, &sched).rollouts[0].reward
        };
        assert_eq!(mk((0..20).collect(), 0), Some(1.0));
        assert_eq!(mk((0..20).collect(), 14), Some(-0.5));
        assert_eq!(mk(vec![1, 2, 3, 4, 0], 0), Some(0.5));
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(group_advantages(&[1.0, 1.0, 1.0], 1e-8), vec![0.0, 0.0, 0.0]);
        let a = group_advantages(&[1.0, 0.0, -1.0], 0.0);
        assert_relative_eq!(a[0], 1.5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(a[0], 1.2247, epsilon = 1e-4);
        assert_eq!(a[1], 0.0);
        assert_relative_eq!(a[2], -1.2247, epsilon = 1e-4);
        let f: Vec<f32> = group_advantages(&[1.0f32, 0.0], 1e-8);
        assert_relative_eq!(f[0], 1.0f32, epsilon = 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::<f64>::default().validate().is_ok());
        let bad = GrpoConfig::<f64> { clip_epsilon: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = GrpoConfig::<f64> { group_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
