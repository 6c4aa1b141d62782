use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{policy_logprob, sample_group, scores, GrpoError, PolicyParams, ToyQuery};
use crate::reward::RewardSchedule;
use crate::scalar::Scalar;
use crate::seed;

/// Synthetic preference world: standard-normal user and item features and a
/// hidden bilinear utility. The positive is the candidate of highest utility.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv<T> {
    pub n_candidates: usize,
    pub theta_star: PolicyParams<T>,
    pub seed: u64,
}

fn normals<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect()
}

impl<T: Scalar> SyntheticEnv<T> {
    pub fn new(d_user: usize, d_item: usize, n_candidates: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &["theta-star"]));
        let theta_star = PolicyParams { d_user, d_item, theta: normals(d_user * d_item, &mut rng) };
        SyntheticEnv { n_candidates, theta_star, seed }
    }

    pub fn query(&self, rng: &mut ChaCha8Rng) -> ToyQuery<T> {
        let p = &self.theta_star;
        let mut q = ToyQuery {
            user_features: normals(p.d_user, rng),
            candidate_features: (0..self.n_candidates).map(|_| normals(p.d_item, rng)).collect(),
            positive_index: 0,
        };
        let u = scores(p, &q).expect("features match theta_star");
        q.positive_index = argmax(&u);
        q
    }

    /// `n` queries from the stream named by `stream`.
    pub fn queries(&self, n: usize, stream: u64) -> Vec<ToyQuery<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.seed, &["queries", &stream.to_string()]));
        (0..n).map(|_| self.query(&mut rng)).collect()
    }

    /// True-utility ordering, best first.
    pub fn teacher_order(&self, query: &ToyQuery<T>) -> Vec<usize> {
        let u = scores(&self.theta_star, query).expect("features match theta_star");
        let mut order: Vec<usize> = (0..u.len()).collect();
        order.sort_by(|&a, &b| u[b].partial_cmp(&u[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        order
    }
}

fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Demonstrations pairing each query with the teacher's ordering.
pub fn teacher_demonstrations<T: Scalar>(
    env: &SyntheticEnv<T>,
    queries: &[ToyQuery<T>],
) -> Vec<(ToyQuery<T>, Vec<usize>)> {
    queries.iter().map(|q| (q.clone(), env.teacher_order(q))).collect()
}

/// Monte-Carlo mean reward over `n_samples` rollouts per query.
pub fn expected_reward<T: Scalar>(
    theta: &PolicyParams<T>,
    queries: &[ToyQuery<T>],
    n_samples: usize,
    seed: u64,
    schedule: &RewardSchedule<T>,
) -> Result<T, GrpoError> {
    let per_query: Vec<T> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let g = sample_group(theta, q, n_samples, seed::derive(seed, &["expected", &i.to_string()]))?;
            let total: T = g.rollouts.iter().map(|r| schedule.reward(r.rank_of(q.positive_index))).sum();
            Ok(total / T::from_count(n_samples))
        })
        .collect::<Result<_, GrpoError>>()?;
    Ok(per_query.into_iter().sum::<T>() / T::from_count(queries.len().max(1)))
}

/// Largest candidate count the exact mode will enumerate.
pub const MAX_EXACT_CANDIDATES: usize = 6;

/// Exact expected reward by summing reward × probability over all orderings.
pub fn expected_reward_exact<T: Scalar>(
    theta: &PolicyParams<T>,
    queries: &[ToyQuery<T>],
    schedule: &RewardSchedule<T>,
) -> Result<T, GrpoError> {
    let mut total = T::zero();
    for q in queries {
        let n = q.n_candidates();
        if n > MAX_EXACT_CANDIDATES {
            return Err(GrpoError::Config(format!(
                "exact mode supports at most {MAX_EXACT_CANDIDATES} candidates, got {n}"
            )));
        }
        for order in enumerate_permutations(n) {
            let (lp, _) = policy_logprob(theta, q, &order)?;
            let rank = order.iter().position(|&o| o == q.positive_index).map(|i| i + 1);
            total = total + lp.exp() * schedule.reward(rank);
        }
    }
    Ok(total / T::from_count(queries.len().max(1)))
}

/// Every ordering of `0..n` in lexicographic order.
pub fn enumerate_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}
