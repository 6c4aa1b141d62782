//! Seeded generator for small datasets in the raw MovieLens and Amazon
//! layouts. Users carry a hidden set of favourite genres (or brands) and rate
//! matching items higher, so preference-aware rankers have signal to find.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{seq::IndexedRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CorpusError;

pub const GENRES: [&str; 18] = [
    "Action",
    "Adventure",
    "Animation",
    "Children's",
    "Comedy",
    "Crime",
    "Documentary",
    "Drama",
    "Fantasy",
    "Film-Noir",
    "Horror",
    "Musical",
    "Mystery",
    "Romance",
    "Sci-Fi",
    "Thriller",
    "War",
    "Western",
];

const WORDS: [&str; 24] = [
    "Midnight", "River", "Silent", "Golden", "Last", "Broken", "City", "Shadow", "Summer", "Iron", "Lost", "Crimson",
    "Winter", "Hidden", "Electric", "Paper", "Wild", "Glass", "Northern", "Secret", "Velvet", "Distant", "Burning",
    "Hollow",
];

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Inclusive range of interactions per user.
    pub min_per_user: usize,
    pub max_per_user: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n_users: 200, n_items: 400, min_per_user: 12, max_per_user: 60, seed: 0 }
    }
}

struct SynthItem {
    title: String,
    year: i32,
    genres: Vec<&'static str>,
}

fn make_items(rng: &mut ChaCha8Rng, n: usize) -> Vec<SynthItem> {
    (0..n)
        .map(|i| {
            let a = WORDS[rng.random_range(0..WORDS.len())];
            let b = WORDS[rng.random_range(0..WORDS.len())];
            let n_genres = rng.random_range(1..=3);
            let mut genres: Vec<&'static str> = GENRES.choose_multiple(rng, n_genres).copied().collect();
            genres.sort_by_key(|g| GENRES.iter().position(|x| x == g));
            SynthItem { title: format!("{a} {b} {}", i + 1), year: rng.random_range(1950..2001), genres }
        })
        .collect()
}

/// Per-user (item index, rating, timestamp) rows.
fn make_ratings(rng: &mut ChaCha8Rng, spec: &SynthSpec, items: &[SynthItem]) -> Vec<Vec<(usize, u8, i64)>> {
    let max_per_user = spec.max_per_user.min(items.len());
    (0..spec.n_users)
        .map(|_| {
            let favourites: Vec<&str> = GENRES.choose_multiple(rng, 3).copied().collect();
            let n = rng.random_range(spec.min_per_user.min(max_per_user)..=max_per_user);
            let mut picked: Vec<usize> = rand::seq::index::sample(rng, items.len(), n).into_vec();
            picked.sort_unstable();
            let mut ts: i64 = 956_703_932 + rng.random_range(0..10_000_000);
            picked
                .into_iter()
                .map(|idx| {
                    let hits = items[idx].genres.iter().filter(|g| favourites.contains(g)).count();
                    let base: i32 = if hits > 0 { 4 } else { 2 };
                    let rating = (base + rng.random_range(-1..=1) + hits.min(1) as i32).clamp(1, 5) as u8;
                    ts += rng.random_range(1..5_000);
                    (idx, rating, ts)
                })
                .collect()
        })
        .collect()
}

/// Writes `movies.dat`, `users.dat` and `ratings.dat` into `dir`.
pub fn write_movielens(dir: &Path, spec: &SynthSpec) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let items = make_items(&mut rng, spec.n_items);
    let ratings = make_ratings(&mut rng, spec, &items);

    let mut movies = String::new();
    for (i, it) in items.iter().enumerate() {
        let _ = writeln!(movies, "{}::{} ({})::{}", i + 1, it.title, it.year, it.genres.join("|"));
    }
    let mut users = String::new();
    let ages = ["1", "18", "25", "35", "45", "50", "56"];
    for u in 0..spec.n_users {
        let gender = if rng.random_bool(0.5) { "M" } else { "F" };
        let age = ages[rng.random_range(0..ages.len())];
        let occ = rng.random_range(0..21);
        let _ = writeln!(users, "{}::{}::{}::{}::{:05}", u + 1, gender, age, occ, rng.random_range(0..99_999));
    }
    let mut out = String::new();
    for (u, rows) in ratings.iter().enumerate() {
        for &(idx, rating, ts) in rows {
            let _ = writeln!(out, "{}::{}::{}::{}", u + 1, idx + 1, rating, ts);
        }
    }
    for (name, body) in [("movies.dat", movies), ("users.dat", users), ("ratings.dat", out)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| CorpusError::Io { path, source })?;
    }
    Ok(())
}

/// Writes `meta.jsonl` and `reviews.jsonl` into `dir`, using the first genre
/// of each synthetic item as its brand.
pub fn write_amazon(dir: &Path, spec: &SynthSpec) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|source| CorpusError::Io { path: dir.to_path_buf(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let items = make_items(&mut rng, spec.n_items);
    let ratings = make_ratings(&mut rng, spec, &items);
    let mut meta = String::new();
    for (i, it) in items.iter().enumerate() {
        let rec = serde_json::json!({"asin": format!("B{:06}", i + 1), "title": it.title, "brand": it.genres[0]});
        let _ = writeln!(meta, "{rec}");
    }
    let mut reviews = String::new();
    for (u, rows) in ratings.iter().enumerate() {
        for &(idx, rating, ts) in rows {
            let rec = serde_json::json!({
                "reviewerID": format!("A{:05}", u + 1),
                "asin": format!("B{:06}", idx + 1),
                "overall": rating as f64,
                "unixReviewTime": ts,
            });
            let _ = writeln!(reviews, "{rec}");
        }
    }
    for (name, body) in [("meta.jsonl", meta), ("reviews.jsonl", reviews)] {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|source| CorpusError::Io { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_raw, RawFormat};

    #[test]
    fn synthetic_layouts_load() {
        let spec = SynthSpec { n_users: 20, n_items: 50, min_per_user: 10, max_per_user: 30, seed: 3 };
        let dir = tempfile::tempdir().unwrap();
        write_movielens(dir.path(), &spec).unwrap();
        let ml = load_raw(RawFormat::Movielens, dir.path()).unwrap();
        assert_eq!(ml.catalog.len(), 50);
        assert_eq!(ml.users.len(), 20);
        write_amazon(dir.path(), &spec).unwrap();
        let az = load_raw(RawFormat::Amazon, dir.path()).unwrap();
        assert_eq!(az.interactions.len(), ml.interactions.len());
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SynthSpec { n_users: 5, n_items: 20, min_per_user: 3, max_per_user: 8, seed: 9 };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_movielens(a.path(), &spec).unwrap();
        write_movielens(b.path(), &spec).unwrap();
        for f in ["movies.dat", "users.dat", "ratings.dat"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
    }
}
