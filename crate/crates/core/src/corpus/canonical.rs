use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Interaction, InteractionSequence, Item, ItemId, Split, UserId, UserRecord};

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const USERS_FILE: &str = "users.jsonl";
pub const INTERACTIONS_FILE: &str = "interactions.jsonl";

#[derive(Serialize, Deserialize)]
struct Row {
    split: String,
    user_id: UserId,
    item_id: ItemId,
    rating: u8,
    timestamp: i64,
    positive: bool,
    user_activity: usize,
}

/// The preprocessed corpus as written by `ingest`.
#[derive(Clone, Debug, Default)]
pub struct CanonicalCorpus {
    pub catalog: Vec<Item>,
    pub users: Vec<UserRecord>,
    pub train: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
}

impl CanonicalCorpus {
    pub fn item_index(&self) -> BTreeMap<ItemId, &Item> {
        self.catalog.iter().map(|i| (i.item_id.clone(), i)).collect()
    }

    pub fn user_index(&self) -> BTreeMap<UserId, &UserRecord> {
        self.users.iter().map(|u| (u.user_id.clone(), u)).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes `catalog.jsonl`, `users.jsonl` and `interactions.jsonl` (one
/// interaction per line tagged with its split) into `dir`.
pub fn write_canonical(dir: &Path, catalog: &[Item], users: &[UserRecord], split: &Split) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(CATALOG_FILE), catalog)?;
    write_jsonl(&dir.join(USERS_FILE), users)?;
    let rows = [("train", &split.train), ("test", &split.test)].into_iter().flat_map(|(name, seqs)| {
        seqs.iter().flat_map(move |s| {
            s.interactions.iter().map(move |r| Row {
                split: name.to_owned(),
                user_id: r.user_id.clone(),
                item_id: r.item_id.clone(),
                rating: r.rating,
                timestamp: r.timestamp,
                positive: r.positive,
                user_activity: s.raw_length,
            })
        })
    });
    write_jsonl(&dir.join(INTERACTIONS_FILE), rows)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CorpusError::Malformed {
                file: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn read_canonical(dir: &Path) -> Result<CanonicalCorpus, CorpusError> {
    let catalog: Vec<Item> = read_jsonl(&dir.join(CATALOG_FILE))?;
    let users: Vec<UserRecord> = read_jsonl(&dir.join(USERS_FILE))?;
    let rows: Vec<Row> = read_jsonl(&dir.join(INTERACTIONS_FILE))?;
    let mut train: BTreeMap<UserId, InteractionSequence> = BTreeMap::new();
    let mut test: BTreeMap<UserId, InteractionSequence> = BTreeMap::new();
    for row in rows {
        let target = if row.split == "train" { &mut train } else { &mut test };
        let seq = target.entry(row.user_id.clone()).or_insert_with(|| InteractionSequence {
            user_id: row.user_id.clone(),
            interactions: Vec::new(),
            raw_length: row.user_activity,
        });
        seq.interactions.push(Interaction {
            user_id: row.user_id,
            item_id: row.item_id,
            rating: row.rating,
            timestamp: row.timestamp,
            positive: row.positive,
        });
    }
    Ok(CanonicalCorpus { catalog, users, train: train.into_values().collect(), test: test.into_values().collect() })
}
