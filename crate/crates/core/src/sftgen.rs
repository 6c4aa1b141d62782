//! Teacher-distilled SFT data: generation, screening, rethink augmentation
//! and corpus export.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::prompt::rethink_message;
use crate::agent::{
    build_ranking_prompt, build_reflection_prompt, parse_ranking_response, parse_reflection_response, split_think,
    Feedback, ItemDomain, ParseError, ParseMode, Prediction, RankingTask, ReflectionTask, UPDATE_MARKER,
};
use crate::corpus::{Item, ItemId};
use crate::eval::{make_candidates, memory_for, ndcg_at_k, Catalog, EvalProtocol, EvalUser};
use crate::llm::{ChatMessage, CompletionRequest, ErrorKind, LlmClient, Role};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Ranking,
    Reflection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scenario {
    Ranking { id: String, task: RankingTask },
    Reflection { id: String, task: ReflectionTask },
}

impl Scenario {
    pub fn id(&self) -> &str {
        match self {
            Scenario::Ranking { id, .. } | Scenario::Reflection { id, .. } => id,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            Scenario::Ranking { .. } => TaskKind::Ranking,
            Scenario::Reflection { .. } => TaskKind::Reflection,
        }
    }

    pub fn messages(&self, domain: ItemDomain) -> Vec<ChatMessage> {
        match self {
            Scenario::Ranking { task, .. } => build_ranking_prompt(&task.memory, &task.candidates, domain),
            Scenario::Reflection { task, .. } => build_reflection_prompt(task, domain),
        }
    }

    pub fn context(&self) -> SampleContext {
        match self {
            Scenario::Ranking { task, .. } => {
                SampleContext { candidates: task.candidates.clone(), positive_item_id: task.positive_item_id.clone() }
            }
            Scenario::Reflection { .. } => SampleContext::default(),
        }
    }
}

/// What screening needs to know about the scenario behind a sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleContext {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Item>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive_item_id: Option<ItemId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailReason {
    MissingCoT,
    MissingRanking,
    MalformedRanking,
    MissingUpdateMarker,
    NoPreferenceKeywords,
    NoPositiveItem,
    LowQuality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScreenFailure {
    pub reason: FailReason,
    /// Concrete error text, also used as rethink feedback.
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum ScreenStatus {
    Unscreened,
    Passed,
    Failed(ScreenFailure),
    /// Passed after one or more rethink rounds.
    Regenerated,
}

impl ScreenStatus {
    pub fn label(&self) -> &'static str {
        match self {
            ScreenStatus::Unscreened => "unscreened",
            ScreenStatus::Passed => "passed",
            ScreenStatus::Failed(_) => "failed",
            ScreenStatus::Regenerated => "regenerated",
        }
    }

    pub fn accepted(&self) -> bool {
        matches!(self, ScreenStatus::Passed | ScreenStatus::Regenerated)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftSample {
    pub scenario_id: String,
    pub draw: usize,
    pub task_kind: TaskKind,
    pub input_messages: Vec<ChatMessage>,
    pub target_output: String,
    pub teacher_model: String,
    /// 1 for the first answer, +1 per rethink round.
    pub attempt: usize,
    pub screen_status: ScreenStatus,
    pub quality_ndcg10: Option<f64>,
    pub context: SampleContext,
    /// Conversation that produced a regenerated answer, minus the answer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transcript: Vec<ChatMessage>,
}

pub fn default_keywords() -> Vec<String> {
    ["prefer", "enjoy", "like", "dislike", "genre", "taste", "favorite", "favourite", "interest", "fan of"]
        .iter()
        .map(|s| (*s).to_owned())
        .collect()
}

/// NDCG@10 of a positive at rank 5, the lowest score that keeps it in the top 5.
pub fn default_quality_threshold() -> f64 {
    ndcg_at_k(Some(5), 10)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub domain: ItemDomain,
    pub teacher_model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub draws_per_scenario: usize,
    pub keywords: Vec<String>,
    pub quality_threshold: f64,
    pub max_rethink_rounds: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            domain: ItemDomain::Movies,
            teacher_model: "teacher".into(),
            temperature: 0.7,
            max_output_tokens: crate::llm::DEFAULT_MAX_OUTPUT_TOKENS,
            draws_per_scenario: 1,
            keywords: default_keywords(),
            quality_threshold: default_quality_threshold(),
            max_rethink_rounds: 2,
            seed: 0,
        }
    }
}

impl SftConfig {
    pub fn digest(&self) -> String {
        seed::json_digest(self)
    }

    fn request(&self, messages: Vec<ChatMessage>, label: String, parts: &[&str]) -> CompletionRequest {
        let mut r = CompletionRequest::new(&self.teacher_model, messages)
            .temperature(self.temperature)
            .seed(seed::derive(self.seed, parts))
            .scenario(label);
        r.max_output_tokens = self.max_output_tokens;
        r
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationFailure {
    pub scenario_id: String,
    pub draw: usize,
    pub kind: ErrorKind,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub samples: Vec<SftSample>,
    pub failures: Vec<GenerationFailure>,
}

#[derive(Debug, Error)]
pub enum SftError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SftError + '_ {
    move |source| SftError::Io { path: path.to_owned(), source }
}

/// Queries the teacher once per scenario and draw. Failures are recorded
/// alongside the samples that did come back; output order follows input.
pub fn generate_samples(client: &LlmClient, scenarios: &[Scenario], config: &SftConfig) -> GenerationBatch {
    let jobs: Vec<(&Scenario, usize)> =
        scenarios.iter().flat_map(|s| (0..config.draws_per_scenario).map(move |d| (s, d))).collect();
    let results: Vec<Result<SftSample, GenerationFailure>> = jobs
        .par_iter()
        .map(|&(s, draw)| {
            let messages = s.messages(config.domain);
            let d = draw.to_string();
            let req = config.request(messages.clone(), format!("sft:{}:d{draw}", s.id()), &["sft", s.id(), &d]);
            match client.complete(&req) {
                Ok(text) => Ok(SftSample {
                    scenario_id: s.id().to_owned(),
                    draw,
                    task_kind: s.kind(),
                    input_messages: messages,
                    target_output: text,
                    teacher_model: config.teacher_model.clone(),
                    attempt: 1,
                    screen_status: ScreenStatus::Unscreened,
                    quality_ndcg10: None,
                    context: s.context(),
                    transcript: Vec::new(),
                }),
                Err(e) => {
                    log::warn!("teacher failed on scenario {} draw {draw}: {e}", s.id());
                    Err(GenerationFailure {
                        scenario_id: s.id().to_owned(),
                        draw,
                        kind: e.kind(),
                        error: e.to_string(),
                    })
                }
            }
        })
        .collect();
    let mut batch = GenerationBatch::default();
    for r in results {
        match r {
            Ok(s) => batch.samples.push(s),
            Err(f) => batch.failures.push(f),
        }
    }
    batch
}

fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

fn fail(reason: FailReason, detail: String) -> ScreenFailure {
    ScreenFailure { reason, detail }
}

fn positive_title(ctx: &SampleContext) -> String {
    ctx.positive_item_id
        .as_ref()
        .map(|p| ctx.candidates.iter().find(|c| &c.item_id == p).map_or_else(|| p.0.clone(), Item::display_title))
        .unwrap_or_default()
}

/// Checks the structural requirements of a teacher answer.
pub fn screen_format(sample: &SftSample, config: &SftConfig) -> Result<(), ScreenFailure> {
    let text = &sample.target_output;
    let (think, _) = split_think(text);
    let think = think
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| fail(FailReason::MissingCoT, "the reasoning inside <think> </think> tags is missing".into()))?;
    match sample.task_kind {
        TaskKind::Ranking => {
            let lenient = parse_ranking_response(text, &sample.context.candidates, ParseMode::Lenient)
                .expect("lenient parse is total");
            if lenient.ranked.iter().all(|r| r.auto) {
                return Err(fail(FailReason::MissingRanking, "no numbered ranking list was found".into()));
            }
            check_keywords(&think, config)?;
            if let Some(p) = &sample.context.positive_item_id {
                if lenient.ranked.iter().any(|r| &r.item_id == p && r.auto) {
                    return Err(fail(
                        FailReason::NoPositiveItem,
                        format!(
                            "the positive item \"{}\" is missing from the ranking",
                            positive_title(&sample.context)
                        ),
                    ));
                }
            }
            parse_ranking_response(text, &sample.context.candidates, ParseMode::Strict)
                .map_err(|e| fail(FailReason::MalformedRanking, format!("the ranking could not be parsed: {e}")))?;
        }
        TaskKind::Reflection => {
            match parse_reflection_response(text) {
                Err(ParseError::MissingUpdateMarker) | Err(ParseError::EmptyUpdate) => {
                    return Err(fail(
                        FailReason::MissingUpdateMarker,
                        format!("the line starting with \"{UPDATE_MARKER}\" is missing or empty"),
                    ))
                }
                Err(e) => return Err(fail(FailReason::MissingUpdateMarker, e.to_string())),
                Ok(_) => {}
            }
            check_keywords(&think, config)?;
        }
    }
    Ok(())
}

fn check_keywords(think: &str, config: &SftConfig) -> Result<(), ScreenFailure> {
    let lower = think.to_lowercase();
    if config.keywords.iter().any(|k| lower.contains(&k.to_lowercase())) {
        return Ok(());
    }
    let shown: Vec<&str> = config.keywords.iter().take(3).map(String::as_str).collect();
    Err(fail(
        FailReason::NoPreferenceKeywords,
        format!("the reasoning does not discuss the user's preferences (expected words such as {})", shown.join(", ")),
    ))
}

/// Best rank whose NDCG@10 still meets `threshold`.
fn rank_cutoff(threshold: f64) -> usize {
    (1..=10).rev().find(|&r| ndcg_at_k::<f64>(Some(r), 10) >= threshold).unwrap_or(0)
}

/// Scores a ranking sample by the NDCG@10 of its positive. Reflection
/// samples pass with no score.
pub fn screen_quality(sample: &SftSample, threshold: f64) -> Result<Option<f64>, ScreenFailure> {
    if sample.task_kind == TaskKind::Reflection {
        return Ok(None);
    }
    let Some(p) = &sample.context.positive_item_id else { return Ok(None) };
    let out = parse_ranking_response(&sample.target_output, &sample.context.candidates, ParseMode::Lenient)
        .expect("lenient parse is total");
    let rank = out.ranked.iter().position(|r| &r.item_id == p && !r.auto).map(|i| i + 1);
    let score: f64 = ndcg_at_k(rank, 10);
    if score >= threshold {
        return Ok(Some(score));
    }
    let observed = rank.map_or_else(|| "not ranked".to_owned(), |r| format!("ranked {}", ordinal(r)));
    Err(fail(
        FailReason::LowQuality,
        format!(
            "the positive item \"{}\" was {observed}; it should be within the top {}",
            positive_title(&sample.context),
            rank_cutoff(threshold)
        ),
    ))
}

/// Runs both screens and returns the sample with its status and score set.
/// Pure in the sample's content, so screening twice changes nothing.
pub fn screen(sample: &SftSample, config: &SftConfig) -> SftSample {
    let mut s = sample.clone();
    s.quality_ndcg10 = None;
    s.screen_status = match screen_format(sample, config) {
        Err(f) => ScreenStatus::Failed(f),
        Ok(()) => match screen_quality(sample, config.quality_threshold) {
            Err(f) => {
                s.quality_ndcg10 = quality_of(sample);
                ScreenStatus::Failed(f)
            }
            Ok(q) => {
                s.quality_ndcg10 = q;
                if s.attempt > 1 {
                    ScreenStatus::Regenerated
                } else {
                    ScreenStatus::Passed
                }
            }
        },
    };
    s
}

fn quality_of(sample: &SftSample) -> Option<f64> {
    screen_quality(sample, f64::NEG_INFINITY).ok().flatten()
}

fn format_hint(kind: TaskKind) -> String {
    match kind {
        TaskKind::Ranking => {
            "a numbered list that ranks every candidate once, one per line as \"N. Title - reason\"".into()
        }
        TaskKind::Reflection => format!("a final line starting with \"{UPDATE_MARKER}\" and the new description"),
    }
}

/// Feeds a failed answer back to the teacher with the concrete error and asks
/// again, up to `max_rounds` times. Returns the first answer that passes
/// both screens, or the last failure.
pub fn augment_rethink(sample: &SftSample, client: &LlmClient, config: &SftConfig, max_rounds: usize) -> SftSample {
    let ScreenStatus::Failed(_) = &sample.screen_status else { return sample.clone() };
    let mut current = sample.clone();
    let mut convo =
        if sample.transcript.is_empty() { sample.input_messages.clone() } else { sample.transcript.clone() };
    for round in 1..=max_rounds {
        let ScreenStatus::Failed(f) = &current.screen_status else { break };
        convo.push(ChatMessage::assistant(&current.target_output));
        convo.push(rethink_message(&f.detail, &format_hint(sample.task_kind)));
        let next = current.attempt + 1;
        let label = format!("sft:{}:d{}:r{next}", sample.scenario_id, sample.draw);
        let (d, a) = (sample.draw.to_string(), next.to_string());
        let req = config.request(convo.clone(), label, &["sft", &sample.scenario_id, &d, &a]);
        let text = match client.complete(&req) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("rethink round {round} for {} failed: {e}", sample.scenario_id);
                convo.truncate(convo.len() - 2);
                break;
            }
        };
        let candidate = SftSample {
            target_output: text,
            attempt: next,
            transcript: convo.clone(),
            screen_status: ScreenStatus::Unscreened,
            ..current.clone()
        };
        current = screen(&candidate, config);
    }
    current
}

/// Generates every scenario, then sends screen failures through rethink.
pub fn run_pipeline(client: &LlmClient, scenarios: &[Scenario], config: &SftConfig) -> GenerationBatch {
    let mut batch = generate_samples(client, scenarios, config);
    batch.samples = batch
        .samples
        .par_iter()
        .map(|s| {
            let s = screen(s, config);
            augment_rethink(&s, client, config, config.max_rethink_rounds)
        })
        .collect();
    batch
}

/// Ranking scenarios from held-out users plus one reflection scenario per
/// user. Users are drawn without replacement with `seed`; each reflection
/// prediction is a seeded coin flip so both agreement and discrepancy show up.
pub fn scenarios_from_users(
    users: &[EvalUser],
    catalog: &Catalog,
    protocol: &EvalProtocol,
    count: usize,
    seed: u64,
    with_reflection: bool,
) -> Vec<Scenario> {
    let mut ordered: Vec<&EvalUser> = users.iter().collect();
    ordered.sort_by(|a, b| a.user.user_id.cmp(&b.user.user_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, ordered.len(), count.min(ordered.len())).into_vec();
    let mut picked: Vec<&EvalUser> = picked.into_iter().map(|i| ordered[i]).collect();
    picked.sort_by(|a, b| a.user.user_id.cmp(&b.user.user_id));
    let mut out = Vec::new();
    for u in picked {
        let uid = &u.user.user_id.0;
        let Ok((task, _)) = make_candidates(u, catalog, protocol, 0) else { continue };
        if with_reflection {
            let last = u.sequence.last().expect("make_candidates checked length");
            if let (Some(target), Ok(memory)) = (catalog.get(&last.item_id), memory_for(u, catalog)) {
                let predicted =
                    if rng.random::<bool>() { Prediction::PredictedLiked } else { Prediction::PredictedDisliked };
                out.push(Scenario::Reflection {
                    id: format!("reflect-{uid}"),
                    task: ReflectionTask {
                        memory,
                        target: target.clone(),
                        system_prediction: predicted,
                        actual_feedback: Feedback::from_positive(last.positive),
                    },
                });
            }
        }
        out.push(Scenario::Ranking { id: format!("rank-{uid}"), task });
    }
    out
}

pub fn write_batch(path: &Path, batch: &GenerationBatch) -> Result<(), SftError> {
    let json = serde_json::to_string_pretty(batch).expect("serializable batch");
    fs::write(path, json + "\n").map_err(io_err(path))
}

pub fn read_batch(path: &Path) -> Result<GenerationBatch, SftError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| SftError::Parse {
        path: path.to_owned(),
        line: e.line(),
        reason: e.to_string(),
    })
}

#[derive(Serialize)]
struct ExportMeta<'a> {
    scenario_id: &'a str,
    task_kind: TaskKind,
    teacher_model: &'a str,
    attempt: usize,
    quality_ndcg10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    status: Option<&'a str>,
}

#[derive(Serialize)]
struct ExportRecord<'a> {
    messages: Vec<&'a ChatMessage>,
    meta: ExportMeta<'a>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedEntry {
    pub scenario_id: String,
    pub draw: usize,
    pub reason: FailReason,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: usize,
    pub exported: usize,
    pub include_failed: bool,
    pub status_counts: BTreeMap<String, usize>,
    pub fail_reasons: BTreeMap<String, usize>,
    pub failed: Vec<FailedEntry>,
    pub generation_failures: Vec<GenerationFailure>,
    pub config_digest: String,
    pub corpus_file: String,
    pub corpus_sha256: String,
}

pub const CORPUS_FILE: &str = "sft_corpus.jsonl";
pub const MANIFEST_FILE: &str = "sft_manifest.json";

/// Writes the chat-format corpus and its manifest into `dir`. Accepted samples
/// only, unless `include_failed`, in which case every sample carries a status.
pub fn export_corpus(
    batch: &GenerationBatch,
    config: &SftConfig,
    dir: &Path,
    include_failed: bool,
) -> Result<Manifest, SftError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut body = String::new();
    let mut exported = 0;
    let mut status_counts = BTreeMap::new();
    let mut fail_reasons = BTreeMap::new();
    let mut failed = Vec::new();
    for s in &batch.samples {
        *status_counts.entry(s.screen_status.label().to_owned()).or_insert(0) += 1;
        if let ScreenStatus::Failed(f) = &s.screen_status {
            *fail_reasons.entry(format!("{:?}", f.reason)).or_insert(0) += 1;
            failed.push(FailedEntry {
                scenario_id: s.scenario_id.clone(),
                draw: s.draw,
                reason: f.reason,
                detail: f.detail.clone(),
            });
        }
        if !include_failed && !s.screen_status.accepted() {
            continue;
        }
        let answer = ChatMessage { role: Role::Assistant, content: s.target_output.clone() };
        let mut messages: Vec<&ChatMessage> = s.input_messages.iter().collect();
        messages.push(&answer);
        let rec = ExportRecord {
            messages,
            meta: ExportMeta {
                scenario_id: &s.scenario_id,
                task_kind: s.task_kind,
                teacher_model: &s.teacher_model,
                attempt: s.attempt,
                quality_ndcg10: s.quality_ndcg10,
                status: include_failed.then(|| s.screen_status.label()),
            },
        };
        body.push_str(&serde_json::to_string(&rec).expect("serializable record"));
        body.push('\n');
        exported += 1;
    }
    let corpus_path = dir.join(CORPUS_FILE);
    fs::write(&corpus_path, &body).map_err(io_err(&corpus_path))?;
    let manifest = Manifest {
        samples: batch.samples.len(),
        exported,
        include_failed,
        status_counts,
        fail_reasons,
        failed,
        generation_failures: batch.failures.clone(),
        config_digest: config.digest(),
        corpus_file: CORPUS_FILE.into(),
        corpus_sha256: seed::sha256_hex(body.as_bytes()),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest") + "\n";
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// Reads an exported corpus back as raw JSON values.
pub fn read_corpus(path: &Path) -> Result<Vec<serde_json::Value>, SftError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| SftError::Parse {
            path: path.to_owned(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::simulated::{SimulatedModel, SimulatedModelConfig};
    use crate::agent::AgentMemory;
    use crate::corpus::UserRecord;
    use crate::llm::{ChatBackend, LlmError, MockBackend, MockKey, ScriptMode};
    use std::sync::Arc;

    fn cands() -> Vec<Item> {
        (0..20)
            .map(|i| {
                Item::new(format!("m{i}"), format!("Movie {i}")).with_year(1990 + i).with_attributes([if i % 2 == 0 {
                    "Drama"
                } else {
                    "Comedy"
                }])
            })
            .collect()
    }

    fn ranking_scenario(id: &str, positive: usize) -> Scenario {
        Scenario::Ranking {
            id: id.into(),
            task: RankingTask {
                memory: AgentMemory::new(UserRecord::anonymous("u1")),
                candidates: cands(),
                positive_item_id: Some(ItemId(format!("m{positive}"))),
            },
        }
    }

    fn reflection_scenario(id: &str) -> Scenario {
        Scenario::Reflection {
            id: id.into(),
            task: ReflectionTask {
                memory: AgentMemory::new(UserRecord::anonymous("u1")),
                target: cands()[0].clone(),
                system_prediction: Prediction::PredictedDisliked,
                actual_feedback: Feedback::Positive,
            },
        }
    }

    fn answer(order: &[usize], think: Option<&str>) -> String {
        let c = cands();
        let mut s = think.map(|t| format!("<think>{t}</think>\n")).unwrap_or_default();
        for (r, &i) in order.iter().enumerate() {
            s.push_str(&format!("{}. {} - fits\n", r + 1, c[i].display_title()));
        }
        s
    }

    fn sample(scenario: &Scenario, text: &str) -> SftSample {
        SftSample {
            scenario_id: scenario.id().into(),
            draw: 0,
            task_kind: scenario.kind(),
            input_messages: scenario.messages(ItemDomain::Movies),
            target_output: text.into(),
            teacher_model: "teacher".into(),
            attempt: 1,
            screen_status: ScreenStatus::Unscreened,
            quality_ndcg10: None,
            context: scenario.context(),
            transcript: vec![],
        }
    }

    const THINK: &str = "The user seems to prefer Drama.";

    fn all() -> Vec<usize> {
        (0..20).collect()
    }

    #[test]
    fn threshold_keeps_rank_five() {
        assert!((default_quality_threshold() - 0.386852807).abs() < 1e-9);
        assert_eq!(rank_cutoff(default_quality_threshold()), 5);
        assert_eq!(rank_cutoff(0.5), 3);
    }

    #[test]
    fn format_screen_classes() {
        let cfg = SftConfig::default();
        let sc = ranking_scenario("s", 0);
        let reason = |text: &str| screen_format(&sample(&sc, text), &cfg).err().map(|f| f.reason);
        assert_eq!(reason(&answer(&all(), Some(THINK))), None);
        assert_eq!(reason(&answer(&all(), None)), Some(FailReason::MissingCoT));
        assert_eq!(reason(&format!("<think>{THINK}</think>\nAll fine.")), Some(FailReason::MissingRanking));
        assert_eq!(reason(&answer(&all(), Some("Ordering the list."))), Some(FailReason::NoPreferenceKeywords));
        assert_eq!(reason(&answer(&(1..20).collect::<Vec<_>>(), Some(THINK))), Some(FailReason::NoPositiveItem));
        assert_eq!(reason(&answer(&(0..19).collect::<Vec<_>>(), Some(THINK))), Some(FailReason::MalformedRanking));
    }

    #[test]
    fn reflection_screen() {
        let cfg = SftConfig::default();
        let sc = reflection_scenario("r");
        let reason = |text: &str| screen_format(&sample(&sc, text), &cfg).err().map(|f| f.reason);
        assert_eq!(reason("<think>They enjoy drama.</think>\nUpdated User description: Prefers Drama."), None);
        assert_eq!(reason("Updated User description: Prefers Drama."), Some(FailReason::MissingCoT));
        assert_eq!(reason("<think>They enjoy drama.</think>\nPrefers Drama."), Some(FailReason::MissingUpdateMarker));
        assert_eq!(
            reason("<think>Noted.</think>\nUpdated User description: Drama."),
            Some(FailReason::NoPreferenceKeywords)
        );
        let s = screen(&sample(&sc, "<think>They enjoy drama.</think>\nUpdated User description: x"), &cfg);
        assert_eq!(s.screen_status, ScreenStatus::Passed);
        assert_eq!(s.quality_ndcg10, None);
    }

    #[test]
    fn quality_screen() {
        let sc2 = ranking_scenario("s", 1);
        let at = |rank: usize| {
            let mut order: Vec<usize> = (0..20).filter(|&i| i != 1).collect();
            order.insert(rank - 1, 1);
            sample(&sc2, &answer(&order, Some(THINK)))
        };
        assert_eq!(screen_quality(&at(1), 0.5), Ok(Some(1.0)));
        let s2 = screen_quality(&at(2), 0.5).unwrap().unwrap();
        assert!((s2 - 0.63093).abs() < 1e-5);
        let f = screen_quality(&at(11), 0.5).unwrap_err();
        assert_eq!(f.reason, FailReason::LowQuality);
        assert!(f.detail.contains("\"Movie 1 (1991)\" was ranked 11th"), "{}", f.detail);
        let cfg = SftConfig::default();
        assert_eq!(screen(&at(5), &cfg).screen_status, ScreenStatus::Passed);
        assert!(matches!(screen(&at(6), &cfg).screen_status, ScreenStatus::Failed(_)));
    }

    #[test]
    fn screening_is_idempotent() {
        let cfg = SftConfig::default();
        let sc = ranking_scenario("s", 0);
        for text in
            [answer(&all(), Some(THINK)), answer(&all(), None), answer(&(1..20).collect::<Vec<_>>(), Some(THINK))]
        {
            let once = screen(&sample(&sc, &text), &cfg);
            assert_eq!(screen(&once, &cfg), once);
        }
    }

    #[test]
    fn ordinals() {
        let got: Vec<String> = [1, 2, 3, 4, 11, 12, 13, 21, 22, 23, 101].iter().map(|&n| ordinal(n)).collect();
        assert_eq!(got, ["1st", "2nd", "3rd", "4th", "11th", "12th", "13th", "21st", "22nd", "23rd", "101st"]);
    }

    fn client(b: impl ChatBackend + 'static) -> LlmClient {
        LlmClient::direct(Arc::new(b))
    }

    #[test]
    fn generate_records_failures() {
        struct TimesOut;
        impl ChatBackend for TimesOut {
            fn send(&self, r: &CompletionRequest) -> Result<String, LlmError> {
                if r.scenario.as_deref().is_some_and(|s| s.starts_with("sft:s3:")) {
                    Err(LlmError::Timeout)
                } else {
                    Ok(answer(&all(), Some(THINK)))
                }
            }
            fn name(&self) -> &str {
                "times-out"
            }
        }
        let scenarios: Vec<_> = (0..10).map(|i| ranking_scenario(&format!("s{i}"), 0)).collect();
        let batch = generate_samples(&client(TimesOut), &scenarios, &SftConfig::default());
        assert_eq!(batch.samples.len(), 9);
        assert_eq!(batch.failures.len(), 1);
        assert_eq!(batch.failures[0].scenario_id, "s3");
        assert_eq!(batch.failures[0].kind, ErrorKind::Timeout);
        assert!(batch.samples.iter().all(|s| s.screen_status == ScreenStatus::Unscreened));
        let mock = client(SimulatedModel::new(SimulatedModelConfig::default()));
        let b = generate_samples(&mock, &[reflection_scenario("r")], &SftConfig::default());
        assert_eq!(b.samples[0].task_kind, TaskKind::Reflection);
    }

    fn scripted(responses: &[(&str, String)]) -> LlmClient {
        let m = MockBackend::new(ScriptMode::Strict);
        for (label, text) in responses {
            m.register(MockKey::label(*label), text.clone()).unwrap();
        }
        client(m)
    }

    #[test]
    fn rethink_loop_contract() {
        let cfg = SftConfig::default();
        let sc = ranking_scenario("s", 0);
        let missing = answer(&(1..20).collect::<Vec<_>>(), Some(THINK));
        let failed = screen(&sample(&sc, &missing), &cfg);
        assert!(matches!(&failed.screen_status, ScreenStatus::Failed(f) if f.reason == FailReason::NoPositiveItem));

        let fixes = scripted(&[("sft:s:d0:r2", answer(&all(), Some(THINK)))]);
        let fixed = augment_rethink(&failed, &fixes, &cfg, 3);
        assert_eq!(fixed.screen_status, ScreenStatus::Regenerated);
        assert_eq!(fixed.attempt, 2);
        assert_eq!(fixed.context, failed.context);
        assert_eq!(fixed.input_messages, failed.input_messages);
        assert_eq!(fixed.transcript.len(), failed.input_messages.len() + 2);
        assert_eq!(fixed.transcript[fixed.transcript.len() - 2].content, missing);
        assert!(fixed.transcript.last().unwrap().content.contains("\"Movie 0 (1990)\" is missing"));

        assert_eq!(augment_rethink(&failed, &fixes, &cfg, 0), failed);

        let stubborn = scripted(&[
            ("sft:s:d0:r2", missing.clone()),
            ("sft:s:d0:r3", missing.clone()),
            ("sft:s:d0:r4", missing.clone()),
        ]);
        let out = augment_rethink(&failed, &stubborn, &cfg, 3);
        assert_eq!(out.attempt, 4);
        assert!(matches!(&out.screen_status, ScreenStatus::Failed(f) if f.reason == FailReason::NoPositiveItem));
    }

    #[test]
    fn simulated_teacher_fixes_low_quality_on_rethink() {
        let cfg = SftConfig::default();
        let teacher = client(SimulatedModel::new(SimulatedModelConfig::default()));
        let sc = ranking_scenario("s", 19);
        let mut order: Vec<usize> = (0..19).collect();
        order.push(19);
        let failed = screen(&sample(&sc, &answer(&order, Some(THINK))), &cfg);
        assert!(matches!(&failed.screen_status, ScreenStatus::Failed(f) if f.reason == FailReason::LowQuality));
        let fixed = augment_rethink(&failed, &teacher, &cfg, 2);
        assert_eq!(fixed.screen_status, ScreenStatus::Regenerated);
        assert_eq!(fixed.quality_ndcg10, Some(1.0));
    }

    fn mixed_batch() -> GenerationBatch {
        let cfg = SftConfig::default();
        let samples = (0..10)
            .map(|i| {
                let sc = ranking_scenario(&format!("s{i}"), 0);
                let text = if i < 8 { answer(&all(), Some(THINK)) } else { answer(&all(), None) };
                screen(&sample(&sc, &text), &cfg)
            })
            .collect();
        GenerationBatch { samples, failures: vec![] }
    }

    #[test]
    fn export_counts_and_stability() {
        let cfg = SftConfig::default();
        let batch = mixed_batch();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = export_corpus(&batch, &cfg, d1.path(), false).unwrap();
        let m2 = export_corpus(&batch, &cfg, d2.path(), false).unwrap();
        assert_eq!(m1.exported, 8);
        assert_eq!(m1.status_counts["failed"], 2);
        assert_eq!(m1.fail_reasons["MissingCoT"], 2);
        assert_eq!(m1.failed.len(), 2);
        assert_eq!(m1, m2);
        for f in [CORPUS_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap());
        }
        let all = export_corpus(&batch, &cfg, d2.path(), true).unwrap();
        assert_eq!(all.exported, 10);
        let rows = read_corpus(&d2.path().join(CORPUS_FILE)).unwrap();
        assert_eq!(rows[9]["meta"]["status"], "failed");
        assert_eq!(rows[0]["meta"]["status"], "passed");
    }

    #[test]
    fn exported_rankings_reparse_strictly() {
        let cfg = SftConfig::default();
        let d = tempfile::tempdir().unwrap();
        export_corpus(&mixed_batch(), &cfg, d.path(), false).unwrap();
        for row in read_corpus(&d.path().join(CORPUS_FILE)).unwrap() {
            let msgs = row["messages"].as_array().unwrap();
            assert_eq!(msgs.last().unwrap()["role"], "assistant");
            let text = msgs.last().unwrap()["content"].as_str().unwrap();
            parse_ranking_response(text, &cands(), ParseMode::Strict).unwrap();
        }
    }

    #[test]
    fn pipeline_with_flawed_teacher() {
        let cfg = SftConfig::default();
        let teacher = client(SimulatedModel::new(SimulatedModelConfig { flaw_rate: 0.5, ..Default::default() }));
        let scenarios: Vec<_> = (0..30).map(|i| ranking_scenario(&format!("s{i}"), i % 20)).collect();
        let batch = run_pipeline(&teacher, &scenarios, &cfg);
        assert_eq!(batch.samples.len(), 30);
        assert!(batch.samples.iter().any(|s| s.screen_status == ScreenStatus::Regenerated));
        assert!(batch.samples.iter().all(|s| s.screen_status.accepted()));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.json");
        write_batch(&path, &batch).unwrap();
        assert_eq!(read_batch(&path).unwrap(), batch);
    }
}
