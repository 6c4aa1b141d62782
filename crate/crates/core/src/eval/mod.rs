//! Leave-one-out ranking evaluation with sampled negatives.

mod analysis;
mod rankers;

pub use analysis::{
    activity_group_report, best_of_n, best_of_n_from_records, ActivityDataset, ActivityGroup, ActivityReport, BestOfN,
    BestOfNPoint, DEFAULT_BEST_OF_N,
};
pub use rankers::{reference_ranker, OracleRanker, PopularityRanker, RandomRanker, ReferenceKind, WorstRanker};

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentMemory, Feedback, HistoryEntry, Ranker, RankingTask};
use crate::corpus::{InteractionSequence, Item, ItemId, UserId, UserRecord};
use crate::scalar::Scalar;
use crate::seed;

/// NDCG@k for a single relevant item at a 1-based `rank`.
pub fn ndcg_at_k<T: Scalar>(rank: Option<usize>, k: usize) -> T {
    match rank {
        Some(r) if r >= 1 && r <= k => T::one() / (T::from_count(r) + T::one()).log2(),
        _ => T::zero(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub k_values: Vec<usize>,
    pub n_negatives: usize,
    pub repeats: usize,
    /// Model samples drawn per (user, repeat); more than one feeds best-of-N.
    pub attempts: usize,
    pub negative_sampling_seed: u64,
    /// Keep items from the user's history out of the negative pool.
    pub exclude_history: bool,
    /// Draw fresh negatives for every repeat instead of reusing repeat 0's.
    pub resample_per_repeat: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            k_values: vec![1, 5, 10, 20],
            n_negatives: 19,
            repeats: 3,
            attempts: 1,
            negative_sampling_seed: 0,
            exclude_history: true,
            resample_per_repeat: true,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.repeats == 0 {
            return Err(EvalError::Protocol("repeats must be at least 1".into()));
        }
        if self.attempts == 0 {
            return Err(EvalError::Protocol("attempts must be at least 1".into()));
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(EvalError::Protocol("k_values must be non-empty and ≥ 1".into()));
        }
        Ok(())
    }

    /// Seed for the candidate set of `user` at `repeat_index`.
    pub fn candidate_seed(&self, user: &UserId, repeat_index: usize) -> u64 {
        let r = if self.resample_per_repeat { repeat_index } else { 0 };
        seed::derive(self.negative_sampling_seed, &["candidates", &user.0, &r.to_string()])
    }

    fn nonce(&self, user: &UserId, repeat_index: usize, attempt: usize) -> u64 {
        seed::derive(self.negative_sampling_seed, &["rank", &user.0, &repeat_index.to_string(), &attempt.to_string()])
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("user {user}: sequence has {len} interactions, need at least 2")]
    SequenceTooShort { user: UserId, len: usize },
    #[error("user {user}: only {available} eligible negatives, need {needed}")]
    CatalogTooSmall { user: UserId, available: usize, needed: usize },
    #[error("user {user}: item {item} not in catalog")]
    UnknownItem { user: UserId, item: ItemId },
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(String),
    #[error("records line {line}: {reason}")]
    Records { line: usize, reason: String },
}

/// Items in a fixed order with an id index.
#[derive(Clone, Debug, Default)]
pub struct Catalog {
    items: Vec<Item>,
    index: HashMap<ItemId, usize>,
}

impl Catalog {
    pub fn new(mut items: Vec<Item>) -> Self {
        items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
        items.dedup_by(|a, b| a.item_id == b.item_id);
        let index = items.iter().enumerate().map(|(i, it)| (it.item_id.clone(), i)).collect();
        Catalog { items, index }
    }

    pub fn get(&self, id: &ItemId) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One user under evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalUser {
    pub user: UserRecord,
    pub sequence: InteractionSequence,
    /// Preference description carried into the ranking prompt.
    #[serde(default)]
    pub description: String,
}

impl EvalUser {
    pub fn new(user: UserRecord, sequence: InteractionSequence) -> Self {
        EvalUser { user, sequence, description: String::new() }
    }

    /// Raw interaction count, before the sequence cap.
    pub fn activity(&self) -> usize {
        self.sequence.raw_length
    }
}

/// Pairs sequences with their user records; users without a record get an
/// anonymous one.
pub fn eval_users(users: &[UserRecord], sequences: &[InteractionSequence]) -> Vec<EvalUser> {
    let index: HashMap<&UserId, &UserRecord> = users.iter().map(|u| (&u.user_id, u)).collect();
    sequences
        .iter()
        .map(|s| {
            let user =
                index.get(&s.user_id).map_or_else(|| UserRecord::anonymous(s.user_id.0.clone()), |u| (*u).clone());
            EvalUser::new(user, s.clone())
        })
        .collect()
}

/// Memory built from every interaction except the held-out last one.
pub fn memory_for(user: &EvalUser, catalog: &Catalog) -> Result<AgentMemory, EvalError> {
    let seq = &user.sequence.interactions;
    let mut history = Vec::with_capacity(seq.len().saturating_sub(1));
    for it in &seq[..seq.len().saturating_sub(1)] {
        let item = catalog
            .get(&it.item_id)
            .ok_or_else(|| EvalError::UnknownItem { user: user.user.user_id.clone(), item: it.item_id.clone() })?;
        history.push(HistoryEntry { item: item.clone(), feedback: Feedback::from_positive(it.positive) });
    }
    let mut memory = AgentMemory::new(user.user.clone()).with_history(history);
    memory.preference_description = user.description.clone();
    Ok(memory)
}

/// Builds the ranking task for `user` at `repeat_index`, returning it with the
/// seed that generated its candidates.
pub fn make_candidates(
    user: &EvalUser,
    catalog: &Catalog,
    protocol: &EvalProtocol,
    repeat_index: usize,
) -> Result<(RankingTask, u64), EvalError> {
    let seed = protocol.candidate_seed(&user.user.user_id, repeat_index);
    Ok((candidates_from_seed(user, catalog, protocol, seed)?, seed))
}

/// Regenerates a candidate set from an explicit seed.
pub fn candidates_from_seed(
    user: &EvalUser,
    catalog: &Catalog,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<RankingTask, EvalError> {
    let uid = &user.user.user_id;
    let seq = &user.sequence.interactions;
    if seq.len() < 2 {
        return Err(EvalError::SequenceTooShort { user: uid.clone(), len: seq.len() });
    }
    let positive = &seq[seq.len() - 1].item_id;
    let positive_item = catalog
        .get(positive)
        .ok_or_else(|| EvalError::UnknownItem { user: uid.clone(), item: positive.clone() })?
        .clone();
    let excluded: HashSet<&ItemId> = if protocol.exclude_history {
        seq.iter().map(|i| &i.item_id).collect()
    } else {
        std::iter::once(positive).collect()
    };
    let pool: Vec<&Item> = catalog.items().iter().filter(|it| !excluded.contains(&it.item_id)).collect();
    if pool.len() < protocol.n_negatives {
        return Err(EvalError::CatalogTooSmall {
            user: uid.clone(),
            available: pool.len(),
            needed: protocol.n_negatives,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<Item> =
        index::sample(&mut rng, pool.len(), protocol.n_negatives).into_iter().map(|i| pool[i].clone()).collect();
    candidates.push(positive_item);
    candidates.shuffle(&mut rng);
    Ok(RankingTask { memory: memory_for(user, catalog)?, candidates, positive_item_id: Some(positive.clone()) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user_id: UserId,
    pub repeat_index: usize,
    pub attempt: usize,
    pub ranker: String,
    pub candidate_seed: u64,
    pub candidate_item_ids: Vec<ItemId>,
    pub positive_item_id: Option<ItemId>,
    pub rank_of_positive: Option<usize>,
    pub ndcg: BTreeMap<usize, f64>,
    /// Raw interaction count, for activity grouping.
    pub user_activity: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EvalRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Whether the record enters metric means: the task was built, even if
    /// the ranker then failed.
    pub fn scored(&self) -> bool {
        self.positive_item_id.is_some()
    }
}

/// Mean NDCG in percent for one ranker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub ranker: String,
    /// Users with at least one scored first-attempt record.
    pub n_users: usize,
    /// Failed first-attempt records.
    pub failures: usize,
    pub ndcg_percent: BTreeMap<usize, f64>,
}

impl MetricsRow {
    pub fn formatted(&self, k: usize) -> String {
        self.ndcg_percent.get(&k).map_or_else(|| "-".into(), |v| format!("{v:.2}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub records: Vec<EvalRecord>,
    pub summary: MetricsRow,
}

fn score_task(
    ranker: &dyn Ranker,
    user: &EvalUser,
    catalog: &Catalog,
    protocol: &EvalProtocol,
    repeat_index: usize,
) -> Vec<EvalRecord> {
    let uid = user.user.user_id.clone();
    let label = ranker.label();
    let blank = |attempt: usize, seed: u64, ids: Vec<ItemId>, pos: Option<ItemId>, failure: String| EvalRecord {
        user_id: uid.clone(),
        repeat_index,
        attempt,
        ranker: label.clone(),
        candidate_seed: seed,
        candidate_item_ids: ids,
        positive_item_id: pos,
        rank_of_positive: None,
        ndcg: BTreeMap::new(),
        user_activity: user.activity(),
        failure: Some(failure),
    };
    let (task, seed) = match make_candidates(user, catalog, protocol, repeat_index) {
        Ok(t) => t,
        Err(e) => {
            let seed = protocol.candidate_seed(&uid, repeat_index);
            return (0..protocol.attempts).map(|a| blank(a, seed, vec![], None, e.to_string())).collect();
        }
    };
    let ids: Vec<ItemId> = task.candidates.iter().map(|c| c.item_id.clone()).collect();
    let positive = task.positive_item_id.clone().expect("eval tasks carry a positive");
    (0..protocol.attempts)
        .map(|attempt| match ranker.rank(&task, protocol.nonce(&uid, repeat_index, attempt)) {
            Ok(out) => {
                let rank = out.rank_of(&positive);
                EvalRecord {
                    ndcg: protocol.k_values.iter().map(|&k| (k, ndcg_at_k::<f64>(rank, k))).collect(),
                    rank_of_positive: rank,
                    failure: None,
                    ..blank(attempt, seed, ids.clone(), Some(positive.clone()), String::new())
                }
            }
            Err(e) => blank(attempt, seed, ids.clone(), Some(positive.clone()), e.to_string()),
        })
        .collect()
}

/// Runs `ranker` over every user and repeat. Records come back ordered by
/// (user_id, repeat, attempt) regardless of thread scheduling.
pub fn leave_one_out_eval(
    ranker: &dyn Ranker,
    users: &[EvalUser],
    catalog: &Catalog,
    protocol: &EvalProtocol,
) -> Result<EvalRun, EvalError> {
    protocol.validate()?;
    let mut ordered: Vec<&EvalUser> = users.iter().collect();
    ordered.sort_by(|a, b| a.user.user_id.cmp(&b.user.user_id));
    let records: Vec<EvalRecord> = ordered
        .par_iter()
        .flat_map_iter(|u| (0..protocol.repeats).flat_map(|r| score_task(ranker, u, catalog, protocol, r)))
        .collect();
    let summary = summarize(&ranker.label(), &records, &protocol.k_values);
    Ok(EvalRun { records, summary })
}

/// Mean over users of the mean over repeats, first attempt only. A failed
/// ranking scores 0; records whose task could not be built (no positive)
/// are counted as failures but left out of the mean.
pub fn summarize(ranker: &str, records: &[EvalRecord], k_values: &[usize]) -> MetricsRow {
    let mut per_user: BTreeMap<&UserId, Vec<&EvalRecord>> = BTreeMap::new();
    let mut failures = 0;
    for r in records.iter().filter(|r| r.attempt == 0) {
        if r.failed() {
            failures += 1;
        }
        if r.scored() {
            per_user.entry(&r.user_id).or_default().push(r);
        }
    }
    let n_users = per_user.len();
    let ndcg_percent = k_values
        .iter()
        .filter(|_| n_users > 0)
        .map(|&k| {
            let total: f64 = per_user
                .values()
                .map(|rs| rs.iter().map(|r| r.ndcg.get(&k).copied().unwrap_or(0.0)).sum::<f64>() / rs.len() as f64)
                .sum();
            (k, round2(100.0 * total / n_users as f64))
        })
        .collect();
    MetricsRow { ranker: ranker.to_owned(), n_users, failures, ndcg_percent }
}

pub(crate) fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| EvalError::Io(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let f = fs::File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Records { line: i + 1, reason: e.to_string() })?);
    }
    Ok(out)
}
