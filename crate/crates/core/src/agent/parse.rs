//! Parsing of model output for the ranking and memory-update tasks, plus the
//! inverse rendering used for round-trip checks and SFT targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Completion, RankedItem, RankingOutput};
use crate::corpus::Item;

pub const UPDATE_MARKER: &str = "Updated User description:";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    #[default]
    Strict,
    /// Skip unknown or repeated lines and append unlisted candidates.
    Lenient,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no numbered ranking lines found")]
    MissingRanking,
    #[error("line {line_no}: title not among candidates: {line:?}")]
    UnknownTitle { line_no: usize, line: String },
    #[error("line {line_no}: candidate listed twice: {line:?}")]
    DuplicateTitle { line_no: usize, line: String },
    #[error("ranking omits {} candidate(s): {}", missing.len(), missing.join(", "))]
    IncompleteRanking { missing: Vec<String> },
    #[error("no \"{UPDATE_MARKER}\" marker in response")]
    MissingUpdateMarker,
    #[error("\"{UPDATE_MARKER}\" marker is followed by an empty description")]
    EmptyUpdate,
}

/// Splits off the think block. Returns (think, remainder). A response with a
/// closing tag but no opening tag treats everything before it as the think.
pub fn split_think(text: &str) -> (Option<String>, &str) {
    const OPEN: &str = "<think>";
    const CLOSE: &str = "</think>";
    match (text.find(OPEN), text.find(CLOSE)) {
        (Some(o), Some(c)) if c > o => (Some(text[o + OPEN.len()..c].trim().to_owned()), &text[c + CLOSE.len()..]),
        (None, Some(c)) => (Some(text[..c].trim().to_owned()), &text[c + CLOSE.len()..]),
        (Some(o), None) => (Some(text[o + OPEN.len()..].trim().to_owned()), ""),
        _ => (None, text),
    }
}

/// `"12. rest"` or `"12) rest"` → `(12, "rest")`.
fn numbered(line: &str) -> Option<(usize, &str)> {
    let t = line.trim_start();
    let t = t.strip_prefix("**").unwrap_or(t);
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let n = t[..digits].parse().ok()?;
    let rest = &t[digits..];
    let rest = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')'))?;
    let rest = rest.strip_prefix("**").unwrap_or(rest);
    if !rest.starts_with(char::is_whitespace) {
        return None;
    }
    Some((n, rest.trim()))
}

fn normalize(s: &str) -> String {
    normalize_with_offsets(s).0
}

/// Lowercases, drops markdown/quote characters and collapses whitespace.
/// The offsets vector maps every byte of the result (plus one past the end)
/// to the byte offset in `s` of the character it came from.
fn normalize_with_offsets(s: &str) -> (String, Vec<usize>) {
    let mut out = String::with_capacity(s.len());
    let mut offsets = Vec::with_capacity(s.len() + 1);
    let mut pending_space: Option<usize> = None;
    for (off, ch) in s.char_indices() {
        if matches!(ch, '*' | '"' | '[' | ']' | '`') {
            continue;
        }
        if ch.is_whitespace() {
            pending_space.get_or_insert(off);
            continue;
        }
        if let Some(sp) = pending_space.take() {
            if !out.is_empty() {
                out.push(' ');
                offsets.push(sp);
            }
        }
        for lc in ch.to_lowercase() {
            let before = out.len();
            out.push(lc);
            offsets.extend(std::iter::repeat_n(off, out.len() - before));
        }
    }
    offsets.push(s.len());
    (out, offsets)
}

const SEPARATORS: [&str; 6] = [" - ", " \u{2013} ", " \u{2014} ", ": ", " -", " |"];

/// If `rest` starts with `key` followed by end-of-line or a separator,
/// returns the text after the separator.
fn strip_key<'a>(rest: &'a str, key: &str) -> Option<&'a str> {
    let tail = rest.strip_prefix(key)?;
    let tail = tail.trim_start_matches([']', '*', '"']);
    if tail.trim().is_empty() {
        return Some("");
    }
    SEPARATORS.iter().find_map(|sep| tail.strip_prefix(sep))
}

fn clean_explanation(s: &str) -> String {
    let s = s.trim();
    let s = s.strip_prefix('[').and_then(|x| x.strip_suffix(']')).unwrap_or(s);
    s.trim().to_owned()
}

struct Matcher<'a> {
    /// (candidate index, key) for exact display and bare titles.
    exact: Vec<(usize, String)>,
    normalized: Vec<(usize, String)>,
    candidates: &'a [Item],
}

impl<'a> Matcher<'a> {
    fn new(candidates: &'a [Item]) -> Self {
        let mut exact = Vec::new();
        for (i, c) in candidates.iter().enumerate() {
            exact.push((i, c.display_title()));
            if c.year.is_some() {
                exact.push((i, c.title.clone()));
            }
        }
        // longest key first so "Heat Wave" beats "Heat"
        exact.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        let mut normalized: Vec<(usize, String)> = exact.iter().map(|(i, k)| (*i, normalize(k))).collect();
        normalized.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        Matcher { exact, normalized, candidates }
    }

    /// Candidate indices whose title the line names, with the explanation.
    fn find(&self, rest: &str) -> Option<(Vec<usize>, String)> {
        let stripped = rest.trim_start_matches(['[', '*', '"']);
        for text in [rest, stripped] {
            if let Some((key, expl)) = self.exact.iter().find_map(|(_, k)| strip_key(text, k).map(|e| (k, e))) {
                let ids = self.exact.iter().filter(|(_, k)| k == key).map(|(i, _)| *i).collect();
                return Some((ids, clean_explanation(expl)));
            }
        }
        let (norm_rest, offsets) = normalize_with_offsets(rest);
        for (_, key) in &self.normalized {
            if let Some(expl) = strip_key(&norm_rest, key) {
                let ids = self.normalized.iter().filter(|(_, k)| k == key).map(|(i, _)| *i).collect();
                let start = offsets[norm_rest.len() - expl.len()];
                return Some((ids, clean_explanation(&rest[start..])));
            }
        }
        None
    }
}

/// Parses a ranking response against its candidate list.
pub fn parse_ranking_response(text: &str, candidates: &[Item], mode: ParseMode) -> Result<RankingOutput, ParseError> {
    let (think, body) = split_think(text);
    let matcher = Matcher::new(candidates);
    let mut used = vec![false; candidates.len()];
    let mut ranked = Vec::with_capacity(candidates.len());
    let mut any_numbered = false;
    for (line_no, line) in body.lines().enumerate() {
        let Some((_, rest)) = numbered(line) else { continue };
        any_numbered = true;
        let line_no = line_no + 1;
        match matcher.find(rest) {
            None => {
                if mode == ParseMode::Strict {
                    return Err(ParseError::UnknownTitle { line_no, line: line.trim().to_owned() });
                }
            }
            Some((ids, explanation)) => match ids.iter().find(|&&i| !used[i]) {
                Some(&i) => {
                    used[i] = true;
                    ranked.push(RankedItem {
                        item_id: matcher.candidates[i].item_id.clone(),
                        explanation,
                        auto: false,
                    });
                }
                None => {
                    if mode == ParseMode::Strict {
                        return Err(ParseError::DuplicateTitle { line_no, line: line.trim().to_owned() });
                    }
                }
            },
        }
    }
    if !any_numbered && mode == ParseMode::Strict {
        return Err(ParseError::MissingRanking);
    }
    let missing: Vec<usize> = (0..candidates.len()).filter(|&i| !used[i]).collect();
    let completion = if missing.is_empty() {
        Completion::Complete
    } else if mode == ParseMode::Strict {
        return Err(ParseError::IncompleteRanking {
            missing: missing.iter().map(|&i| candidates[i].display_title()).collect(),
        });
    } else {
        for &i in &missing {
            ranked.push(RankedItem { item_id: candidates[i].item_id.clone(), explanation: String::new(), auto: true });
        }
        Completion::AutoCompleted
    };
    Ok(RankingOutput { think: think.unwrap_or_default(), ranked, completion })
}

/// Renders an output in the expected response format. Auto-appended entries
/// are left out so a lenient re-parse restores them.
pub fn render_ranking_output(output: &RankingOutput, candidates: &[Item]) -> String {
    let mut s = format!("<think>\n{}\n</think>\n", output.think);
    let mut n = 0;
    for r in output.ranked.iter().filter(|r| !r.auto) {
        n += 1;
        let title = candidates
            .iter()
            .find(|c| c.item_id == r.item_id)
            .map(Item::display_title)
            .unwrap_or_else(|| r.item_id.0.clone());
        if r.explanation.is_empty() {
            s.push_str(&format!("{n}. {title}\n"));
        } else {
            s.push_str(&format!("{n}. {title} - {}\n", r.explanation));
        }
    }
    s
}

/// Extracts the updated preference description. The think block is ignored
/// and the last marker wins when the model repeats itself.
pub fn parse_reflection_response(text: &str) -> Result<String, ParseError> {
    let (_, body) = split_think(text);
    let lower = body.to_lowercase();
    let marker = UPDATE_MARKER.to_lowercase();
    let pos = lower.rfind(&marker).ok_or(ParseError::MissingUpdateMarker)?;
    let desc = body[pos + UPDATE_MARKER.len()..].trim();
    let desc = desc.strip_prefix('[').and_then(|d| d.strip_suffix(']')).unwrap_or(desc).trim();
    if desc.is_empty() {
        return Err(ParseError::EmptyUpdate);
    }
    Ok(desc.to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cands(n: usize) -> Vec<Item> {
        (0..n).map(|i| Item::new(format!("m{i}"), format!("Movie {i}")).with_year(1990 + i as i32)).collect()
    }

    fn response(order: &[usize], cands: &[Item]) -> String {
        let mut s = "<think>The user prefers dramas.</think>\n".to_owned();
        for (k, &i) in order.iter().enumerate() {
            s.push_str(&format!("{}. {} - reason {i}\n", k + 1, cands[i].display_title()));
        }
        s
    }

    #[test]
    fn well_formed_twenty() {
        let c = cands(20);
        let order: Vec<usize> = (0..20).rev().collect();
        let out = parse_ranking_response(&response(&order, &c), &c, ParseMode::Strict).unwrap();
        assert_eq!(out.ranked.len(), 20);
        assert_eq!(out.completion, Completion::Complete);
        assert_eq!(out.ranked[0].item_id.0, "m19");
        assert_eq!(out.ranked[0].explanation, "reason 19");
        assert_eq!(out.think, "The user prefers dramas.");
    }

    #[test]
    fn lenient_appends_missing() {
        let c = cands(20);
        let order: Vec<usize> = (0..18).collect();
        let text = response(&order, &c);
        let out = parse_ranking_response(&text, &c, ParseMode::Lenient).unwrap();
        assert_eq!(out.ranked.len(), 20);
        assert_eq!(out.completion, Completion::AutoCompleted);
        assert_eq!(out.ranked[18].item_id.0, "m18");
        assert_eq!(out.ranked[19].item_id.0, "m19");
        assert!(out.ranked[19].auto);
        match parse_ranking_response(&text, &c, ParseMode::Strict) {
            Err(ParseError::IncompleteRanking { missing }) => assert_eq!(missing.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_in_strict() {
        let c = cands(3);
        let text = response(&[0, 1, 1, 2], &c);
        assert!(matches!(
            parse_ranking_response(&text, &c, ParseMode::Strict),
            Err(ParseError::DuplicateTitle { line_no: 4, .. })
        ));
        let out = parse_ranking_response(&text, &c, ParseMode::Lenient).unwrap();
        assert_eq!(out.completion, Completion::Complete);
        assert_eq!(out.ranked.len(), 3);
    }

    #[test]
    fn unknown_and_missing() {
        let c = cands(2);
        let text = "<think>x</think>\n1. Movie 0 (1990)\n2. Nonexistent Film - hmm\n";
        assert!(matches!(
            parse_ranking_response(text, &c, ParseMode::Strict),
            Err(ParseError::UnknownTitle { line_no: 3, .. })
        ));
        assert_eq!(
            parse_ranking_response("<think>x</think>\nno list here", &c, ParseMode::Strict),
            Err(ParseError::MissingRanking)
        );
        let lenient = parse_ranking_response("no list", &c, ParseMode::Lenient).unwrap();
        assert_eq!(lenient.ranked.len(), 2);
        assert_eq!(lenient.completion, Completion::AutoCompleted);
    }

    #[test]
    fn normalized_and_bare_title_matches() {
        let c = vec![
            Item::new("a", "Heat").with_year(1995),
            Item::new("b", "Heat Wave").with_year(1990),
            Item::new("c", "Star Wars: Episode IV - A New Hope").with_year(1977),
        ];
        let text = "<think>t</think>\n1. heat   WAVE - loud\n2. **Star Wars: Episode IV - A New Hope (1977)** - classic\n3. [Heat] - [crime]\n";
        let out = parse_ranking_response(text, &c, ParseMode::Strict).unwrap();
        let ids: Vec<&str> = out.ranked.iter().map(|r| r.item_id.0.as_str()).collect();
        assert_eq!(ids, ["b", "c", "a"]);
        assert_eq!(out.ranked[0].explanation, "loud");
        assert_eq!(out.ranked[2].explanation, "crime");
    }

    #[test]
    fn numbers_inside_think_are_ignored() {
        let c = cands(2);
        let text =
            "<think>1. Movie 1 (1991) looks good\n2. then Movie 0</think>\n1. Movie 0 (1990)\n2. Movie 1 (1991)\n";
        let out = parse_ranking_response(text, &c, ParseMode::Strict).unwrap();
        assert_eq!(out.ranked[0].item_id.0, "m0");
    }

    #[test]
    fn colliding_titles_fill_in_order() {
        let c = vec![Item::new("x1", "Hamlet"), Item::new("x2", "Hamlet")];
        let out = parse_ranking_response("1. Hamlet\n2. Hamlet\n", &c, ParseMode::Strict).unwrap();
        assert_eq!(out.ranked[1].item_id.0, "x2");
        assert_eq!(out.think, "");
    }

    #[test]
    fn reflection_marker_rules() {
        let text = "<think>they rated it low</think>\nUpdated User description: likes 90s sci-fi";
        assert_eq!(parse_reflection_response(text).unwrap(), "likes 90s sci-fi");
        assert_eq!(parse_reflection_response("<think>x</think> nothing"), Err(ParseError::MissingUpdateMarker));
        let twice = "Updated User description: first\nUpdated User description: second";
        assert_eq!(parse_reflection_response(twice).unwrap(), "second");
        assert_eq!(parse_reflection_response("Updated User description: [bracketed]").unwrap(), "bracketed");
        assert_eq!(parse_reflection_response("Updated User description:   "), Err(ParseError::EmptyUpdate));
        // a marker only inside the think block does not count
        assert_eq!(
            parse_reflection_response("<think>Updated User description: draft</think>"),
            Err(ParseError::MissingUpdateMarker)
        );
    }

    #[test]
    fn think_variants() {
        assert_eq!(split_think("a</think>b"), (Some("a".into()), "b"));
        assert_eq!(split_think("<think>a"), (Some("a".into()), ""));
        assert_eq!(split_think("plain"), (None, "plain"));
    }
}
