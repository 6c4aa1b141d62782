//! The dual-process user agent. A fast ranking step works from memory; when
//! the predicted reaction disagrees with the real one, reflection rewrites it.

mod parse;
pub mod prompt;
pub mod simulated;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Item, ItemId, UserRecord};
use crate::llm::{CompletionRequest, LlmClient, LlmError};

pub use parse::{
    parse_ranking_response, parse_reflection_response, render_ranking_output, split_think, ParseError, ParseMode,
    UPDATE_MARKER,
};
pub use prompt::{build_ranking_prompt, build_reflection_prompt, ItemDomain};

/// Default rank cutoff (inclusive) for "Predicted Liked".
pub const DEFAULT_LIKED_CUTOFF: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    Positive,
    Negative,
}

impl Feedback {
    pub fn from_positive(positive: bool) -> Self {
        if positive {
            Feedback::Positive
        } else {
            Feedback::Negative
        }
    }

    /// Past-tense verb used in prompts.
    pub fn word(self) -> &'static str {
        match self {
            Feedback::Positive => "liked",
            Feedback::Negative => "disliked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub item: Item,
    pub feedback: Feedback,
}

/// A user agent's memory. Treated as an immutable value: updates return a
/// new memory with `version` bumped by one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentMemory {
    pub user: UserRecord,
    pub preference_description: String,
    pub history: Vec<HistoryEntry>,
    pub version: u64,
}

impl AgentMemory {
    pub fn new(user: UserRecord) -> Self {
        AgentMemory { user, preference_description: String::new(), history: Vec::new(), version: 0 }
    }

    pub fn with_history(mut self, history: Vec<HistoryEntry>) -> Self {
        self.history = history;
        self
    }

    pub fn has_seen(&self, item_id: &ItemId) -> bool {
        self.history.iter().any(|h| &h.item.item_id == item_id)
    }
}

/// A ranking query. `positive_item_id` is the harness-side ground truth and
/// never reaches a prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingTask {
    pub memory: AgentMemory,
    pub candidates: Vec<Item>,
    pub positive_item_id: Option<ItemId>,
}

impl RankingTask {
    pub fn candidate(&self, id: &ItemId) -> Option<&Item> {
        self.candidates.iter().find(|c| &c.item_id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Completion {
    Complete,
    AutoCompleted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: ItemId,
    pub explanation: String,
    /// Appended by the lenient parser rather than listed by the model.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub auto: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingOutput {
    pub think: String,
    pub ranked: Vec<RankedItem>,
    pub completion: Completion,
}

impl RankingOutput {
    /// Builds a complete output from an ordering of item ids.
    pub fn from_order(order: impl IntoIterator<Item = ItemId>) -> Self {
        RankingOutput {
            think: String::new(),
            ranked: order
                .into_iter()
                .map(|item_id| RankedItem { item_id, explanation: String::new(), auto: false })
                .collect(),
            completion: Completion::Complete,
        }
    }

    /// 1-based rank of `item_id`, if listed.
    pub fn rank_of(&self, item_id: &ItemId) -> Option<usize> {
        self.ranked.iter().position(|r| &r.item_id == item_id).map(|p| p + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Prediction {
    PredictedLiked,
    PredictedDisliked,
}

impl Prediction {
    pub fn matches(self, actual: Feedback) -> bool {
        matches!(
            (self, actual),
            (Prediction::PredictedLiked, Feedback::Positive) | (Prediction::PredictedDisliked, Feedback::Negative)
        )
    }

    fn expected_verb(self) -> &'static str {
        match self {
            Prediction::PredictedLiked => "like",
            Prediction::PredictedDisliked => "dislike",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectionTask {
    pub memory: AgentMemory,
    pub target: Item,
    pub system_prediction: Prediction,
    pub actual_feedback: Feedback,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackSignal {
    pub predicted: Prediction,
    pub actual: Feedback,
    pub discrepant: bool,
}

impl FeedbackSignal {
    pub fn new(predicted: Prediction, actual: Feedback) -> Self {
        FeedbackSignal { predicted, actual, discrepant: !predicted.matches(actual) }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("item {0} is not in the ranking")]
    ItemNotRanked(ItemId),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

/// Maps a rank to the agent's predicted reaction: rank ≤ cutoff is liked.
pub fn classify_prediction(
    output: &RankingOutput,
    item_id: &ItemId,
    liked_cutoff: usize,
) -> Result<Prediction, AgentError> {
    let rank = output.rank_of(item_id).ok_or_else(|| AgentError::ItemNotRanked(item_id.clone()))?;
    Ok(if rank <= liked_cutoff { Prediction::PredictedLiked } else { Prediction::PredictedDisliked })
}

/// Returns a new memory with the interaction recorded and the description
/// replaced. The input is left untouched.
pub fn update_memory(memory: &AgentMemory, item: &Item, feedback: Feedback, updated_description: &str) -> AgentMemory {
    let mut next = memory.clone();
    next.history.push(HistoryEntry { item: item.clone(), feedback });
    next.preference_description = updated_description.to_owned();
    next.version += 1;
    next
}

/// Anything that can order a task's candidates.
pub trait Ranker: Send + Sync {
    /// `nonce` distinguishes repeated samples of the same task.
    fn rank(&self, task: &RankingTask, nonce: u64) -> Result<RankingOutput, AgentError>;

    fn label(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub model_name: String,
    pub domain: ItemDomain,
    pub liked_cutoff: usize,
    pub reflect: ReflectMode,
    pub parse_mode: ParseMode,
    pub rank_temperature: f64,
    pub reflect_temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            model_name: "agent".into(),
            domain: ItemDomain::Movies,
            liked_cutoff: DEFAULT_LIKED_CUTOFF,
            reflect: ReflectMode::Always,
            parse_mode: ParseMode::Lenient,
            rank_temperature: 0.2,
            reflect_temperature: 0.2,
            max_output_tokens: crate::llm::DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectMode {
    /// Reflect after every interaction.
    #[default]
    Always,
    /// Reflect only when prediction and feedback disagree.
    DiscrepancyOnly,
}

/// An agent backed by a chat model.
#[derive(Clone, Debug)]
pub struct Agent {
    pub client: LlmClient,
    pub config: AgentConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleStage {
    Rank,
    Classify,
    Reflect,
}

#[derive(Debug, Error, PartialEq)]
#[error("agent cycle failed at {stage:?}: {source}")]
pub struct CycleError {
    pub stage: CycleStage,
    #[source]
    pub source: AgentError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleOutcome {
    pub ranking: RankingOutput,
    pub signal: FeedbackSignal,
    pub memory: AgentMemory,
    pub reflected: bool,
}

impl Agent {
    pub fn new(client: LlmClient, config: AgentConfig) -> Self {
        Agent { client, config }
    }

    fn request(
        &self,
        messages: Vec<crate::llm::ChatMessage>,
        temperature: f64,
        seed: u64,
        scenario: String,
    ) -> CompletionRequest {
        let mut r = CompletionRequest::new(&self.config.model_name, messages)
            .temperature(temperature)
            .seed(seed)
            .scenario(scenario);
        r.max_output_tokens = self.config.max_output_tokens;
        r
    }

    pub fn rank_task(&self, task: &RankingTask, nonce: u64) -> Result<RankingOutput, AgentError> {
        let messages = build_ranking_prompt(&task.memory, &task.candidates, self.config.domain);
        let label = format!("rank:{}:v{}:n{}", task.memory.user.user_id, task.memory.version, nonce);
        let text = self.client.complete(&self.request(messages, self.config.rank_temperature, nonce, label))?;
        let out = parse_ranking_response(&text, &task.candidates, self.config.parse_mode)?;
        log::trace!("rank think for user {}: {}", task.memory.user.user_id, out.think);
        Ok(out)
    }

    pub fn reflect(&self, task: &ReflectionTask) -> Result<String, AgentError> {
        let messages = build_reflection_prompt(task, self.config.domain);
        let label = format!("reflect:{}:v{}", task.memory.user.user_id, task.memory.version);
        let text = self.client.complete(&self.request(
            messages,
            self.config.reflect_temperature,
            task.memory.version,
            label,
        ))?;
        if let (Some(think), _) = split_think(&text) {
            log::debug!("reflection think for user {}: {think}", task.memory.user.user_id);
        }
        Ok(parse_reflection_response(&text)?)
    }

    /// One prediction → comparison → reflection → update cycle for the item
    /// `positive_item_id` that the user actually interacted with.
    pub fn run_cycle(
        &self,
        memory: &AgentMemory,
        candidates: &[Item],
        positive_item_id: &ItemId,
        actual: Feedback,
    ) -> Result<CycleOutcome, CycleError> {
        let at = |stage| move |source| CycleError { stage, source };
        let target = candidates
            .iter()
            .find(|c| &c.item_id == positive_item_id)
            .ok_or_else(|| at(CycleStage::Classify)(AgentError::ItemNotRanked(positive_item_id.clone())))?;
        let task = RankingTask {
            memory: memory.clone(),
            candidates: candidates.to_vec(),
            positive_item_id: Some(positive_item_id.clone()),
        };
        let ranking = self.rank_task(&task, memory.version).map_err(at(CycleStage::Rank))?;
        let predicted = classify_prediction(&ranking, positive_item_id, self.config.liked_cutoff)
            .map_err(at(CycleStage::Classify))?;
        let signal = FeedbackSignal::new(predicted, actual);
        let reflect = match self.config.reflect {
            ReflectMode::Always => true,
            ReflectMode::DiscrepancyOnly => signal.discrepant,
        };
        let (memory, reflected) = if reflect {
            let description = self
                .reflect(&ReflectionTask {
                    memory: memory.clone(),
                    target: target.clone(),
                    system_prediction: predicted,
                    actual_feedback: actual,
                })
                .map_err(at(CycleStage::Reflect))?;
            (update_memory(memory, target, actual, &description), true)
        } else {
            (update_memory(memory, target, actual, &memory.preference_description), false)
        };
        Ok(CycleOutcome { ranking, signal, memory, reflected })
    }
}

impl Ranker for Agent {
    fn rank(&self, task: &RankingTask, nonce: u64) -> Result<RankingOutput, AgentError> {
        self.rank_task(task, nonce)
    }

    fn label(&self) -> String {
        format!("agent:{}", self.config.model_name)
    }
}

/// Free-function form of [`Agent::run_cycle`].
pub fn run_agent_cycle(
    agent: &Agent,
    memory: &AgentMemory,
    candidates: &[Item],
    positive_item_id: &ItemId,
    actual: Feedback,
) -> Result<CycleOutcome, CycleError> {
    agent.run_cycle(memory, candidates, positive_item_id, actual)
}
