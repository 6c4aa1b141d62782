use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{round2, summarize, EvalRecord};
use crate::corpus::UserId;

pub const DEFAULT_BEST_OF_N: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivityDataset {
    Ml1m,
    Cds,
}

impl ActivityDataset {
    /// (name, min, max) with inclusive bounds; `None` is open-ended.
    pub fn bands(self) -> [(&'static str, usize, Option<usize>); 3] {
        match self {
            ActivityDataset::Ml1m => [("Low", 10, Some(24)), ("Medium", 25, Some(39)), ("High", 40, None)],
            ActivityDataset::Cds => [("Low", 10, Some(19)), ("Medium", 20, Some(39)), ("High", 40, None)],
        }
    }

    pub fn group_of(self, activity: usize) -> Option<&'static str> {
        self.bands()
            .into_iter()
            .find(|&(_, lo, hi)| activity >= lo && hi.is_none_or(|h| activity <= h))
            .map(|(name, ..)| name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityGroup {
    pub name: String,
    pub min: usize,
    pub max: Option<usize>,
    pub n_users: usize,
    /// `None` when the group has no evaluable users.
    pub ndcg_percent: Option<BTreeMap<usize, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityReport {
    pub dataset: ActivityDataset,
    pub groups: Vec<ActivityGroup>,
    /// Users whose activity falls below every band.
    pub ungrouped: usize,
}

pub fn activity_group_report(records: &[EvalRecord], dataset: ActivityDataset, k_values: &[usize]) -> ActivityReport {
    let mut by_group: BTreeMap<&str, Vec<EvalRecord>> = BTreeMap::new();
    let mut ungrouped: BTreeMap<&UserId, ()> = BTreeMap::new();
    for r in records {
        match dataset.group_of(r.user_activity) {
            Some(g) => by_group.entry(g).or_default().push(r.clone()),
            None => {
                ungrouped.insert(&r.user_id, ());
            }
        }
    }
    let ranker = records.first().map_or("", |r| r.ranker.as_str());
    let groups = dataset
        .bands()
        .into_iter()
        .map(|(name, min, max)| {
            let rows = by_group.get(name).map_or(&[][..], |v| v.as_slice());
            let m = summarize(ranker, rows, k_values);
            ActivityGroup {
                name: name.to_owned(),
                min,
                max,
                n_users: m.n_users,
                ndcg_percent: (m.n_users > 0).then_some(m.ndcg_percent),
            }
        })
        .collect();
    ActivityReport { dataset, groups, ungrouped: ungrouped.len() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfNPoint {
    pub n: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfN {
    pub points: Vec<BestOfNPoint>,
    /// Set when some requested n exceeded the attempts available.
    pub truncated: bool,
}

/// Mean over users of the max over each user's first n attempts. Values of n
/// beyond the shortest attempt list are dropped and flagged.
pub fn best_of_n(per_user: &[Vec<f64>], n_values: &[usize]) -> BestOfN {
    let available = per_user.iter().map(Vec::len).min().unwrap_or(0);
    let mut points = Vec::new();
    let mut truncated = false;
    for &n in n_values {
        if n == 0 || n > available {
            truncated = true;
            continue;
        }
        let total: f64 = per_user.iter().map(|a| a[..n].iter().copied().fold(f64::NEG_INFINITY, f64::max)).sum();
        points.push(BestOfNPoint { n, mean: total / per_user.len() as f64 });
    }
    BestOfN { points, truncated }
}

/// Best-of-N on NDCG@10 in percent. Each (user, repeat) contributes its
/// attempts in order; users average over repeats. Failed attempts score 0,
/// as in [`summarize`](super::summarize).
pub fn best_of_n_from_records(records: &[EvalRecord], n_values: &[usize]) -> BestOfN {
    let mut attempts: BTreeMap<(&UserId, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.scored()) {
        let v = if r.failed() { 0.0 } else { 100.0 * r.ndcg.get(&10).copied().unwrap_or(0.0) };
        attempts.entry((&r.user_id, r.repeat_index)).or_default().push((r.attempt, v));
    }
    let mut users: BTreeMap<&UserId, Vec<BestOfN>> = BTreeMap::new();
    for ((u, _), mut a) in attempts {
        a.sort_by_key(|&(i, _)| i);
        let scores: Vec<f64> = a.into_iter().map(|(_, v)| v).collect();
        users.entry(u).or_default().push(best_of_n(&[scores], n_values));
    }
    let shortest = users.values().flatten().map(|c| c.points.len()).min().unwrap_or(0);
    let truncated = users.values().flatten().any(|c| c.truncated || c.points.len() > shortest) || users.is_empty();
    let mut points = Vec::new();
    for i in 0..shortest {
        let n = users.values().next().unwrap()[0].points[i].n;
        let mean =
            users.values().map(|cs| cs.iter().map(|c| c.points[i].mean).sum::<f64>() / cs.len() as f64).sum::<f64>()
                / users.len() as f64;
        points.push(BestOfNPoint { n, mean: round2(mean) });
    }
    BestOfN { points, truncated }
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn best_of_n_non_decreasing(users in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 8), 1..6)) {
            let c = best_of_n(&users, &[1, 2, 4, 8]);
            for w in c.points.windows(2) {
                prop_assert!(w[1].mean >= w[0].mean);
            }
        }
    }
}
