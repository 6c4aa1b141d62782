use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Interaction, Item, ItemId, UserId, UserRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawFormat {
    Movielens,
    Amazon,
}

#[derive(Clone, Debug, Default)]
pub struct RawDataset {
    pub catalog: Vec<Item>,
    pub users: Vec<UserRecord>,
    pub interactions: Vec<Interaction>,
}

/// Loads a raw dataset directory.
///
/// MovieLens expects `ratings.dat`, `movies.dat` and optionally `users.dat`.
/// Amazon expects `reviews.jsonl` and `meta.jsonl` (newline-delimited JSON).
pub fn load_raw(format: RawFormat, dir: &Path) -> Result<RawDataset, CorpusError> {
    match format {
        RawFormat::Movielens => load_movielens(dir),
        RawFormat::Amazon => load_amazon(dir),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    Ok(bytes
        .split(|&b| b == b'\n')
        .map(|raw| {
            let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
            match std::str::from_utf8(raw) {
                Ok(s) => s.to_owned(),
                // Latin-1 maps each byte to the code point of the same value.
                Err(_) => raw.iter().map(|&b| b as char).collect(),
            }
        })
        .collect())
}

fn file_label(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

fn malformed(file: &str, line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed { file: file.to_owned(), line, reason: reason.into() }
}

/// Splits `Title (1995)` into the bare title and the year.
pub(crate) fn split_title_year(raw: &str) -> (String, Option<i32>) {
    let trimmed = raw.trim();
    if let Some(open) = trimmed.rfind(" (") {
        let tail = &trimmed[open + 2..];
        if let Some(num) = tail.strip_suffix(')') {
            if num.len() == 4 {
                if let Ok(y) = num.parse::<i32>() {
                    return (trimmed[..open].trim_end().to_owned(), Some(y));
                }
            }
        }
    }
    (trimmed.to_owned(), None)
}

fn ml_age(code: &str) -> String {
    match code {
        "1" => "Under 18",
        "18" => "18-24",
        "25" => "25-34",
        "35" => "35-44",
        "45" => "45-49",
        "50" => "50-55",
        "56" => "56+",
        other => other,
    }
    .to_owned()
}

fn ml_occupation(code: &str) -> String {
    const NAMES: [&str; 21] = [
        "other",
        "academic/educator",
        "artist",
        "clerical/admin",
        "college/grad student",
        "customer service",
        "doctor/health care",
        "executive/managerial",
        "farmer",
        "homemaker",
        "K-12 student",
        "lawyer",
        "programmer",
        "retired",
        "sales/marketing",
        "scientist",
        "self-employed",
        "technician/engineer",
        "tradesman/craftsman",
        "unemployed",
        "writer",
    ];
    code.parse::<usize>().ok().and_then(|i| NAMES.get(i)).map(|s| s.to_string()).unwrap_or_else(|| code.to_owned())
}

fn ml_gender(code: &str) -> String {
    match code {
        "M" => "Male".to_owned(),
        "F" => "Female".to_owned(),
        other => other.to_owned(),
    }
}

fn load_movielens(dir: &Path) -> Result<RawDataset, CorpusError> {
    let movies_path = dir.join("movies.dat");
    let file = file_label(&movies_path);
    let mut catalog = Vec::new();
    let mut known: HashSet<String> = HashSet::new();
    for (idx, line) in read_lines(&movies_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(3, "::").collect();
        if fields.len() != 3 {
            return Err(malformed(&file, idx + 1, "expected MovieID::Title::Genres"));
        }
        let (title, year) = split_title_year(fields[1]);
        if title.is_empty() {
            return Err(malformed(&file, idx + 1, "empty title"));
        }
        if !known.insert(fields[0].to_owned()) {
            return Err(malformed(&file, idx + 1, format!("duplicate movie id {}", fields[0])));
        }
        catalog.push(Item {
            item_id: ItemId(fields[0].to_owned()),
            title,
            year,
            attributes: fields[2].split('|').filter(|g| !g.is_empty()).map(str::to_owned).collect(),
            extra: BTreeMap::new(),
        });
    }

    let users_path = dir.join("users.dat");
    let mut users = Vec::new();
    if users_path.exists() {
        let file = file_label(&users_path);
        for (idx, line) in read_lines(&users_path)?.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split("::").collect();
            if f.len() < 4 {
                return Err(malformed(&file, idx + 1, "expected UserID::Gender::Age::Occupation::Zip"));
            }
            users.push(UserRecord {
                user_id: UserId(f[0].to_owned()),
                gender: Some(ml_gender(f[1])),
                age: Some(ml_age(f[2])),
                occupation: Some(ml_occupation(f[3])),
            });
        }
    }

    let ratings_path = dir.join("ratings.dat");
    let file = file_label(&ratings_path);
    let lines = read_lines(&ratings_path)?;
    let mut interactions = Vec::with_capacity(lines.len());
    for (idx, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split("::").collect();
        if f.len() != 4 {
            return Err(malformed(&file, idx + 1, "expected UserID::MovieID::Rating::Timestamp"));
        }
        let rating: u8 = f[2].parse().map_err(|_| malformed(&file, idx + 1, format!("bad rating {:?}", f[2])))?;
        let ts: i64 = f[3].parse().map_err(|_| malformed(&file, idx + 1, format!("bad timestamp {:?}", f[3])))?;
        if !known.contains(f[1]) {
            return Err(CorpusError::UnknownItem { file: file.clone(), line: idx + 1, item: f[1].to_owned() });
        }
        let row = Interaction::new(f[0], f[1], rating, ts).map_err(|e| malformed(&file, idx + 1, e.to_string()))?;
        interactions.push(row);
    }
    Ok(RawDataset { catalog, users, interactions })
}

#[derive(Deserialize)]
struct AmazonReview {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    overall: f64,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
}

#[derive(Deserialize)]
struct AmazonMeta {
    asin: String,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    brand: Option<String>,
}

fn amazon_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn load_amazon(dir: &Path) -> Result<RawDataset, CorpusError> {
    let meta_path = amazon_file(dir, "meta.jsonl");
    let file = file_label(&meta_path);
    let mut catalog = Vec::new();
    let mut known: HashSet<String> = HashSet::new();
    for (idx, line) in read_lines(&meta_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: AmazonMeta = serde_json::from_str(line).map_err(|e| malformed(&file, idx + 1, e.to_string()))?;
        if !known.insert(m.asin.clone()) {
            continue;
        }
        let title = m.title.map(|t| t.trim().to_owned()).filter(|t| !t.is_empty()).unwrap_or_else(|| m.asin.clone());
        let mut item = Item::new(m.asin, title);
        if let Some(brand) = m.brand.map(|b| b.trim().to_owned()).filter(|b| !b.is_empty()) {
            item.attributes.push(brand);
        }
        catalog.push(item);
    }

    let reviews_path = amazon_file(dir, "reviews.jsonl");
    let file = file_label(&reviews_path);
    let mut interactions = Vec::new();
    let mut reviewers: Vec<String> = Vec::new();
    let mut seen_reviewers: HashSet<String> = HashSet::new();
    for (idx, line) in read_lines(&reviews_path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: AmazonReview = serde_json::from_str(line).map_err(|e| malformed(&file, idx + 1, e.to_string()))?;
        if !known.contains(&r.asin) {
            return Err(CorpusError::UnknownItem { file: file.clone(), line: idx + 1, item: r.asin });
        }
        let rating = r.overall.round();
        if !(1.0..=5.0).contains(&rating) {
            return Err(malformed(&file, idx + 1, format!("overall {} outside 1..5", r.overall)));
        }
        if seen_reviewers.insert(r.reviewer_id.clone()) {
            reviewers.push(r.reviewer_id.clone());
        }
        interactions.push(Interaction::new(r.reviewer_id, r.asin, rating as u8, r.unix_review_time)?);
    }
    let users = reviewers.into_iter().map(UserRecord::anonymous).collect();
    Ok(RawDataset { catalog, users, interactions })
}
