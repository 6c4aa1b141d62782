//! Dataset ingestion and preprocessing: raw MovieLens / Amazon layouts, k-core
//! filtering, chronological sequences, seeded user sampling and statistics.

mod canonical;
mod raw;
pub mod synthetic;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canonical::{read_canonical, write_canonical, CanonicalCorpus, CATALOG_FILE, INTERACTIONS_FILE, USERS_FILE};
pub use raw::{load_raw, RawDataset, RawFormat};

/// Default cap on sequence length.
pub const DEFAULT_MAX_LEN: usize = 40;
/// Default minimum number of interactions per user and per item.
pub const DEFAULT_KCORE: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub String);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_owned())
    }
}

impl From<&str> for UserId {
    fn from(s: &str) -> Self {
        UserId(s.to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: ItemId,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    /// Genres for movies, brand / band for CDs.
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, String>,
}

impl Item {
    pub fn new(item_id: impl Into<String>, title: impl Into<String>) -> Self {
        Item {
            item_id: ItemId(item_id.into()),
            title: title.into(),
            year: None,
            attributes: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_year(mut self, year: i32) -> Self {
        self.year = Some(year);
        self
    }

    pub fn with_attributes<S: Into<String>>(mut self, attrs: impl IntoIterator<Item = S>) -> Self {
        self.attributes = attrs.into_iter().map(Into::into).collect();
        self
    }

    /// Title as shown to the model, e.g. `Heat (1995)`.
    pub fn display_title(&self) -> String {
        match self.year {
            Some(y) => format!("{} ({})", self.title, y),
            None => self.title.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: UserId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupation: Option<String>,
}

impl UserRecord {
    pub fn anonymous(user_id: impl Into<String>) -> Self {
        UserRecord { user_id: UserId(user_id.into()), ..Default::default() }
    }

    pub fn has_demographics(&self) -> bool {
        self.gender.is_some() || self.age.is_some() || self.occupation.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub rating: u8,
    pub timestamp: i64,
    pub positive: bool,
}

impl Interaction {
    /// Builds an interaction, deriving `positive` from `rating > 3`.
    pub fn new(
        user_id: impl Into<String>,
        item_id: impl Into<String>,
        rating: u8,
        timestamp: i64,
    ) -> Result<Self, CorpusError> {
        if !(1..=5).contains(&rating) {
            return Err(CorpusError::InvalidRating(rating as i64));
        }
        Ok(Interaction {
            user_id: UserId(user_id.into()),
            item_id: ItemId(item_id.into()),
            rating,
            timestamp,
            positive: rating > 3,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub user_id: UserId,
    /// Ascending by timestamp, at most `max_len` entries.
    pub interactions: Vec<Interaction>,
    /// Number of interactions the user had before truncation.
    pub raw_length: usize,
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn last(&self) -> Option<&Interaction> {
        self.interactions.last()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub sparsity: f64,
    /// Set when `n_users * n_items == 0`; sparsity is then reported as 0.
    #[serde(default)]
    pub degenerate: bool,
}

impl DatasetStats {
    pub fn from_counts(n_users: usize, n_items: usize, n_interactions: usize) -> Self {
        let cells = n_users as f64 * n_items as f64;
        if cells == 0.0 {
            return DatasetStats { n_users, n_items, n_interactions, sparsity: 0.0, degenerate: true };
        }
        DatasetStats {
            n_users,
            n_items,
            n_interactions,
            sparsity: 1.0 - n_interactions as f64 / cells,
            degenerate: false,
        }
    }

    pub fn sparsity_percent(&self) -> f64 {
        self.sparsity * 100.0
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: malformed line: {reason}")]
    Malformed { file: String, line: usize, reason: String },
    #[error("{file}:{line}: interaction references unknown item {item}")]
    UnknownItem { file: String, line: usize, item: String },
    #[error("rating {0} outside 1..=5")]
    InvalidRating(i64),
    #[error("duplicate interaction (user {user}, item {item}, timestamp {timestamp})")]
    DuplicateInteraction { user: String, item: String, timestamp: i64 },
    #[error("need {requested} users for the split but only {available} are eligible (short by {})", requested - available)]
    InsufficientUsers { requested: usize, available: usize },
    #[error("missing input file {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// How `build_sequences` treats repeated (user, item, timestamp) triples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DuplicatePolicy {
    #[default]
    Strict,
    Lenient,
}

/// Keeps only users and items with at least `k` interactions, iterating until
/// no further rows are removed.
pub fn kcore_filter(interactions: &[Interaction], k: usize) -> Vec<Interaction> {
    assert!(k >= 1, "k-core threshold must be at least 1");
    let mut alive: Vec<bool> = vec![true; interactions.len()];
    loop {
        let mut user_counts: HashMap<&UserId, usize> = HashMap::new();
        let mut item_counts: HashMap<&ItemId, usize> = HashMap::new();
        for (row, keep) in interactions.iter().zip(&alive) {
            if *keep {
                *user_counts.entry(&row.user_id).or_default() += 1;
                *item_counts.entry(&row.item_id).or_default() += 1;
            }
        }
        let mut removed = false;
        for (row, keep) in interactions.iter().zip(alive.iter_mut()) {
            if *keep && (user_counts[&row.user_id] < k || item_counts[&row.item_id] < k) {
                *keep = false;
                removed = true;
            }
        }
        if !removed {
            break;
        }
    }
    interactions.iter().zip(alive).filter(|(_, keep)| *keep).map(|(row, _)| row.clone()).collect()
}

/// Groups interactions per user in ascending time order and keeps the most
/// recent `max_len` of each. Output is ordered by user id. Ties in timestamp
/// keep input order.
pub fn build_sequences(
    interactions: &[Interaction],
    max_len: usize,
    duplicates: DuplicatePolicy,
) -> Result<Vec<InteractionSequence>, CorpusError> {
    let mut per_user: BTreeMap<&UserId, Vec<&Interaction>> = BTreeMap::new();
    for row in interactions {
        per_user.entry(&row.user_id).or_default().push(row);
    }
    let mut out = Vec::with_capacity(per_user.len());
    for (user_id, mut rows) in per_user {
        rows.sort_by_key(|r| r.timestamp);
        let mut seen: HashSet<(&ItemId, i64)> = HashSet::with_capacity(rows.len());
        let mut deduped = Vec::with_capacity(rows.len());
        for r in rows {
            if !seen.insert((&r.item_id, r.timestamp)) {
                match duplicates {
                    DuplicatePolicy::Strict => {
                        return Err(CorpusError::DuplicateInteraction {
                            user: user_id.0.clone(),
                            item: r.item_id.0.clone(),
                            timestamp: r.timestamp,
                        })
                    }
                    DuplicatePolicy::Lenient => continue,
                }
            }
            deduped.push(r.clone());
        }
        let raw_length = deduped.len();
        let start = raw_length.saturating_sub(max_len);
        out.push(InteractionSequence { user_id: user_id.clone(), interactions: deduped.split_off(start), raw_length });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
}

/// Draws disjoint train and test user samples uniformly without replacement.
/// Each side is returned ordered by user id.
pub fn sample_split(
    sequences: &[InteractionSequence],
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Split, CorpusError> {
    let requested = n_train + n_test;
    if requested > sequences.len() {
        return Err(CorpusError::InsufficientUsers { requested, available: sequences.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, sequences.len(), requested).into_vec();
    let mut train: Vec<_> = picked[..n_train].iter().map(|&i| sequences[i].clone()).collect();
    let mut test: Vec<_> = picked[n_train..].iter().map(|&i| sequences[i].clone()).collect();
    train.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    test.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    Ok(Split { train, test })
}

/// How many sampled users hit the length cap, and the interaction shortfall
/// relative to every user being at the cap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapReport {
    pub users: usize,
    pub users_at_cap: usize,
    pub interactions: usize,
    pub interactions_if_all_capped: usize,
    pub shortfall: usize,
}

pub fn cap_report(sequences: &[InteractionSequence], max_len: usize) -> CapReport {
    let interactions: usize = sequences.iter().map(InteractionSequence::len).sum();
    let full = sequences.len() * max_len;
    CapReport {
        users: sequences.len(),
        users_at_cap: sequences.iter().filter(|s| s.len() >= max_len).count(),
        interactions,
        interactions_if_all_capped: full,
        shortfall: full.saturating_sub(interactions),
    }
}

/// Statistics over the distinct users and items present in `interactions`.
pub fn compute_stats(interactions: &[Interaction]) -> DatasetStats {
    let users: HashSet<&UserId> = interactions.iter().map(|r| &r.user_id).collect();
    let items: HashSet<&ItemId> = interactions.iter().map(|r| &r.item_id).collect();
    DatasetStats::from_counts(users.len(), items.len(), interactions.len())
}

pub fn compute_sequence_stats(sequences: &[InteractionSequence]) -> DatasetStats {
    let rows: Vec<Interaction> = sequences.iter().flat_map(|s| s.interactions.iter().cloned()).collect();
    compute_stats(&rows)
}

/// Statistics of a raw dataset where the item and user universes are the
/// loaded catalog and user table rather than the ids seen in ratings.
pub fn compute_catalog_stats(raw: &RawDataset) -> DatasetStats {
    let n_users = if raw.users.is_empty() {
        raw.interactions.iter().map(|r| &r.user_id).collect::<HashSet<_>>().len()
    } else {
        raw.users.len()
    };
    DatasetStats::from_counts(n_users, raw.catalog.len(), raw.interactions.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ix(u: &str, i: &str, rating: u8, ts: i64) -> Interaction {
        Interaction::new(u, i, rating, ts).unwrap()
    }

    /// Independent k-core oracle: repeatedly remove every user or item whose
    /// degree is below k, one node at a time, using sets of edges.
    fn kcore_oracle(edges: &[(String, String)], k: usize) -> HashSet<(String, String)> {
        let mut live: HashSet<(String, String)> = edges.iter().cloned().collect();
        loop {
            let bad_user =
                live.iter().map(|(u, _)| u.clone()).find(|u| live.iter().filter(|(x, _)| x == u).count() < k);
            let bad_item =
                live.iter().map(|(_, i)| i.clone()).find(|i| live.iter().filter(|(_, x)| x == i).count() < k);
            match (bad_user, bad_item) {
                (Some(u), _) => live.retain(|(x, _)| *x != u),
                (None, Some(i)) => live.retain(|(_, x)| *x != i),
                (None, None) => return live,
            }
        }
    }

    #[test]
    fn positive_flag_follows_rating() {
        assert!(ix("1", "1193", 5, 978300760).positive);
        assert!(!ix("1", "1193", 3, 978300760).positive);
        assert!(ix("1", "1193", 4, 0).positive);
        assert!(Interaction::new("1", "2", 0, 0).is_err());
        assert!(Interaction::new("1", "2", 6, 0).is_err());
    }

    #[test]
    fn kcore_removes_sparse_user() {
        let mut rows = Vec::new();
        for i in 0..9 {
            rows.push(ix("sparse", &format!("i{i}"), 4, i));
        }
        for u in 0..10 {
            for i in 0..10 {
                rows.push(ix(&format!("u{u}"), &format!("i{i}"), 4, i));
            }
        }
        let out = kcore_filter(&rows, 10);
        assert!(out.iter().all(|r| r.user_id.0 != "sparse"));
        assert_eq!(out.len(), 100);
    }

    #[test]
    fn kcore_identity_when_dense_enough() {
        let mut rows = Vec::new();
        for u in 0..3 {
            for i in 0..3 {
                rows.push(ix(&format!("u{u}"), &format!("i{i}"), 2, i));
            }
        }
        assert_eq!(kcore_filter(&rows, 3), rows);
    }

    #[test]
    fn kcore_cascade_matches_oracle_on_toy_graph() {
        // Five users, k = 2. u4 is the only other rater of item "d"; dropping
        // u4 (degree 1) pushes "d" below threshold, which in turn pushes u3
        // down to a single item and removes it as well.
        let edges: Vec<(String, String)> = [
            ("u0", "a"),
            ("u0", "b"),
            ("u0", "c"),
            ("u1", "a"),
            ("u1", "b"),
            ("u1", "c"),
            ("u2", "a"),
            ("u2", "b"),
            ("u3", "c"),
            ("u3", "d"),
            ("u4", "d"),
        ]
        .iter()
        .map(|(u, i)| (u.to_string(), i.to_string()))
        .collect();
        let rows: Vec<Interaction> = edges.iter().map(|(u, i)| ix(u, i, 4, 0)).collect();
        let got: HashSet<(String, String)> =
            kcore_filter(&rows, 2).into_iter().map(|r| (r.user_id.0, r.item_id.0)).collect();
        let want = kcore_oracle(&edges, 2);
        assert_eq!(got, want);
        assert!(!got.iter().any(|(u, _)| u == "u3" || u == "u4"));
        assert!(!got.iter().any(|(_, i)| i == "d"));
        assert_eq!(got.len(), 8);
    }

    #[test]
    fn sequences_truncate_to_most_recent() {
        let rows: Vec<_> = (0..55).rev().map(|t| ix("u", &format!("i{t}"), 4, t)).collect();
        let seqs = build_sequences(&rows, 40, DuplicatePolicy::Strict).unwrap();
        assert_eq!(seqs.len(), 1);
        let s = &seqs[0];
        assert_eq!(s.len(), 40);
        assert_eq!(s.raw_length, 55);
        assert_eq!(s.interactions[0].timestamp, 15);
        assert_eq!(s.last().unwrap().timestamp, 54);
        assert!(s.interactions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn two_users_of_forty() {
        let mut rows = Vec::new();
        for u in ["a", "b"] {
            for t in 0..40 {
                rows.push(ix(u, &format!("i{t}"), 4, t));
            }
        }
        let seqs = build_sequences(&rows, 40, DuplicatePolicy::Strict).unwrap();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs.iter().map(|s| s.len()).sum::<usize>(), 80);
    }

    #[test]
    fn duplicate_triples_strict_and_lenient() {
        let rows = vec![ix("u", "i", 4, 5), ix("u", "i", 4, 5), ix("u", "j", 2, 6)];
        assert!(matches!(
            build_sequences(&rows, 40, DuplicatePolicy::Strict),
            Err(CorpusError::DuplicateInteraction { .. })
        ));
        let seqs = build_sequences(&rows, 40, DuplicatePolicy::Lenient).unwrap();
        assert_eq!(seqs[0].len(), 2);
    }

    fn toy_sequences(n: usize, len: usize) -> Vec<InteractionSequence> {
        let mut rows = Vec::new();
        for u in 0..n {
            for t in 0..len {
                rows.push(ix(&format!("u{u:03}"), &format!("i{t}"), 4, t as i64));
            }
        }
        build_sequences(&rows, 40, DuplicatePolicy::Strict).unwrap()
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let seqs = toy_sequences(50, 3);
        let a = sample_split(&seqs, 10, 20, 7).unwrap();
        let b = sample_split(&seqs, 10, 20, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let train: HashSet<_> = a.train.iter().map(|s| &s.user_id).collect();
        assert!(a.test.iter().all(|s| !train.contains(&s.user_id)));
        let c = sample_split(&seqs, 10, 20, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn split_of_everyone_is_a_partition() {
        let seqs = toy_sequences(12, 2);
        let s = sample_split(&seqs, 5, 7, 1).unwrap();
        let mut all: Vec<_> = s.train.iter().chain(&s.test).map(|x| x.user_id.clone()).collect();
        all.sort();
        assert_eq!(all, seqs.iter().map(|x| x.user_id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn split_shortfall_is_named() {
        let seqs = toy_sequences(5, 2);
        let err = sample_split(&seqs, 4, 4, 1).unwrap_err();
        assert!(err.to_string().contains("short by 3"), "{err}");
    }

    #[test]
    fn cap_report_counts_shortfall() {
        let full = toy_sequences(3, 45);
        let r = cap_report(&full, 40);
        assert_eq!((r.users_at_cap, r.interactions, r.shortfall), (3, 120, 0));
        let partial = toy_sequences(2, 30);
        let r = cap_report(&partial, 40);
        assert_eq!((r.users_at_cap, r.interactions, r.shortfall), (0, 60, 20));
    }

    #[test]
    fn stats_direct_formula() {
        let rows = vec![ix("a", "x", 4, 0), ix("a", "y", 4, 0), ix("b", "y", 4, 0), ix("b", "z", 4, 0)];
        let s = compute_stats(&rows);
        assert_eq!((s.n_users, s.n_items, s.n_interactions), (2, 3, 4));
        assert!((s.sparsity - (1.0 - 4.0 / 6.0)).abs() < 1e-12);
        assert!(!s.degenerate);
    }

    #[test]
    fn stats_empty_is_flagged() {
        let s = compute_stats(&[]);
        assert_eq!((s.n_users, s.n_items, s.n_interactions), (0, 0, 0));
        assert_eq!(s.sparsity, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn table_two_full_row_arithmetic() {
        let s = DatasetStats::from_counts(6040, 3883, 1_000_209);
        assert!((s.sparsity_percent() - 95.74).abs() < 0.01);
        let s = DatasetStats::from_counts(1000, 2739, 40_000);
        assert!((s.sparsity_percent() - 98.54).abs() < 0.01);
    }
}
