use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentError, Ranker, RankingOutput, RankingTask};
use crate::corpus::{Interaction, ItemId};
use crate::seed;

fn ids(task: &RankingTask) -> Vec<ItemId> {
    task.candidates.iter().map(|c| c.item_id.clone()).collect()
}

/// Puts the positive first, the rest in candidate order.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleRanker;

impl Ranker for OracleRanker {
    fn rank(&self, task: &RankingTask, _nonce: u64) -> Result<RankingOutput, AgentError> {
        let mut order = ids(task);
        if let Some(p) = &task.positive_item_id {
            if let Some(i) = order.iter().position(|id| id == p) {
                let id = order.remove(i);
                order.insert(0, id);
            }
        }
        Ok(RankingOutput::from_order(order))
    }

    fn label(&self) -> String {
        "oracle".into()
    }
}

/// Leaves the positive out of the ranking entirely.
#[derive(Clone, Copy, Debug, Default)]
pub struct WorstRanker;

impl Ranker for WorstRanker {
    fn rank(&self, task: &RankingTask, _nonce: u64) -> Result<RankingOutput, AgentError> {
        let pos = task.positive_item_id.as_ref();
        Ok(RankingOutput::from_order(ids(task).into_iter().filter(|id| Some(id) != pos)))
    }

    fn label(&self) -> String {
        "worst".into()
    }
}

/// Seeded uniform permutation per (user, nonce).
#[derive(Clone, Copy, Debug)]
pub struct RandomRanker {
    pub seed: u64,
}

impl RandomRanker {
    pub fn new(seed: u64) -> Self {
        RandomRanker { seed }
    }
}

impl Ranker for RandomRanker {
    fn rank(&self, task: &RankingTask, nonce: u64) -> Result<RankingOutput, AgentError> {
        let s = seed::derive(self.seed, &["random-ranker", &task.memory.user.user_id.0, &nonce.to_string()]);
        let mut order = ids(task);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
        Ok(RankingOutput::from_order(order))
    }

    fn label(&self) -> String {
        "random".into()
    }
}

/// Sorts by descending training interaction count, ties by item id.
#[derive(Clone, Debug, Default)]
pub struct PopularityRanker {
    counts: HashMap<ItemId, usize>,
}

impl PopularityRanker {
    pub fn from_interactions<'a>(interactions: impl IntoIterator<Item = &'a Interaction>) -> Self {
        let mut counts = HashMap::new();
        for i in interactions {
            *counts.entry(i.item_id.clone()).or_insert(0) += 1;
        }
        PopularityRanker { counts }
    }

    pub fn from_counts<S: Into<String>>(counts: impl IntoIterator<Item = (S, usize)>) -> Self {
        PopularityRanker { counts: counts.into_iter().map(|(k, v)| (ItemId(k.into()), v)).collect() }
    }

    pub fn count(&self, id: &ItemId) -> usize {
        self.counts.get(id).copied().unwrap_or(0)
    }
}

impl Ranker for PopularityRanker {
    fn rank(&self, task: &RankingTask, _nonce: u64) -> Result<RankingOutput, AgentError> {
        let mut order = ids(task);
        order.sort_by(|a, b| self.count(b).cmp(&self.count(a)).then_with(|| a.cmp(b)));
        Ok(RankingOutput::from_order(order))
    }

    fn label(&self) -> String {
        "popularity".into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReferenceKind {
    Oracle,
    Worst,
    Random { seed: u64 },
    Popularity,
}

/// Builds a reference ranker; `train` feeds the popularity counts.
pub fn reference_ranker(kind: ReferenceKind, train: &[Interaction]) -> Box<dyn Ranker> {
    match kind {
        ReferenceKind::Oracle => Box::new(OracleRanker),
        ReferenceKind::Worst => Box::new(WorstRanker),
        ReferenceKind::Random { seed } => Box::new(RandomRanker::new(seed)),
        ReferenceKind::Popularity => Box::new(PopularityRanker::from_interactions(train)),
    }
}
