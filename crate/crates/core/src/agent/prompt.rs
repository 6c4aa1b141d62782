//! Prompt rendering from the templates in `prompts/`. Slots are written
//! `{{name}}`; an unknown or unfilled slot is a programming error.

use serde::{Deserialize, Serialize};

use super::{AgentMemory, Feedback, Prediction, ReflectionTask};
use crate::corpus::{Item, UserRecord};
use crate::llm::ChatMessage;

pub const RANKING_SYSTEM: &str = include_str!("../../prompts/ranking_system.txt");
pub const RANKING_USER: &str = include_str!("../../prompts/ranking_user.txt");
pub const REFLECTION_SYSTEM: &str = include_str!("../../prompts/reflection_system.txt");
pub const REFLECTION_USER: &str = include_str!("../../prompts/reflection_user.txt");
pub const RETHINK_FEEDBACK: &str = include_str!("../../prompts/rethink_feedback.txt");

pub const NO_HISTORY: &str = "(no prior interactions)";
pub const NO_DESCRIPTION: &str = "(no description yet)";
pub const NO_DEMOGRAPHICS: &str = "(no demographic information)";

/// Which catalog the prompts talk about.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemDomain {
    #[default]
    Movies,
    Cds,
}

impl ItemDomain {
    pub fn noun(self) -> &'static str {
        match self {
            ItemDomain::Movies => "movie",
            ItemDomain::Cds => "CD",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            ItemDomain::Movies => "movies",
            ItemDomain::Cds => "CDs",
        }
    }

    pub fn title_noun(self) -> &'static str {
        match self {
            ItemDomain::Movies => "Movie",
            ItemDomain::Cds => "CD",
        }
    }

    pub fn title_plural(self) -> &'static str {
        match self {
            ItemDomain::Movies => "Movies",
            ItemDomain::Cds => "CDs",
        }
    }

    pub fn history_label(self) -> &'static str {
        match self {
            ItemDomain::Movies => "Viewing History",
            ItemDomain::Cds => "Listening History",
        }
    }

    pub fn attribute_label(self) -> &'static str {
        match self {
            ItemDomain::Movies => "Genres",
            ItemDomain::Cds => "Brand",
        }
    }

    fn consume_verb(self) -> &'static str {
        match self {
            ItemDomain::Movies => "watching",
            ItemDomain::Cds => "listening to",
        }
    }
}

/// Substitutes `{{slot}}` markers. Panics on a slot left unfilled.
pub fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.trim_end().to_owned();
    for (name, value) in slots {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    if let Some(pos) = out.find("{{") {
        if out[pos..].contains("}}") {
            panic!("unfilled prompt slot near {:?}", &out[pos..out.len().min(pos + 30)]);
        }
    }
    out
}

fn domain_slots(domain: ItemDomain) -> [(&'static str, &'static str); 6] {
    [
        ("item_noun", domain.noun()),
        ("item_plural", domain.plural()),
        ("item_title", domain.title_noun()),
        ("item_title_plural", domain.title_plural()),
        ("history_label", domain.history_label()),
        ("consume_verb", domain.consume_verb()),
    ]
}

fn render_with_domain(template: &str, domain: ItemDomain, extra: &[(&str, &str)]) -> String {
    let mut slots: Vec<(&str, &str)> = domain_slots(domain).to_vec();
    slots.extend_from_slice(extra);
    render(template, &slots)
}

pub fn profile_block(user: &UserRecord) -> String {
    let mut lines = Vec::new();
    if let Some(g) = &user.gender {
        lines.push(format!("Gender: {g}"));
    }
    if let Some(a) = &user.age {
        lines.push(format!("Age: {a}"));
    }
    if let Some(o) = &user.occupation {
        lines.push(format!("Occupation: {o}"));
    }
    if lines.is_empty() {
        NO_DEMOGRAPHICS.to_owned()
    } else {
        lines.join("\n")
    }
}

/// One catalog entry: `Title (Year) | Genres: A, B`.
pub fn item_line(item: &Item, domain: ItemDomain) -> String {
    let mut s = item.display_title();
    if !item.attributes.is_empty() {
        s.push_str(&format!(" | {}: {}", domain.attribute_label(), item.attributes.join(", ")));
    }
    s
}

fn history_block(memory: &AgentMemory, domain: ItemDomain) -> String {
    if memory.history.is_empty() {
        return NO_HISTORY.to_owned();
    }
    memory
        .history
        .iter()
        .enumerate()
        .map(|(i, h)| format!("{}. {} | Feedback: {}", i + 1, item_line(&h.item, domain), h.feedback.word()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn description(memory: &AgentMemory) -> &str {
    let d = memory.preference_description.trim();
    if d.is_empty() {
        NO_DESCRIPTION
    } else {
        d
    }
}

/// Fast-thinking ranking task: system instruction plus one user message with
/// demographics, description, history and numbered candidates, in that order.
pub fn build_ranking_prompt(memory: &AgentMemory, candidates: &[Item], domain: ItemDomain) -> Vec<ChatMessage> {
    let candidates_block = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {}", i + 1, item_line(c, domain)))
        .collect::<Vec<_>>()
        .join("\n");
    let profile = profile_block(&memory.user);
    let history = history_block(memory, domain);
    let user = render_with_domain(
        RANKING_USER,
        domain,
        &[
            ("profile", &profile),
            ("description", description(memory)),
            ("history", &history),
            ("candidates", &candidates_block),
        ],
    );
    vec![ChatMessage::system(render_with_domain(RANKING_SYSTEM, domain, &[])), ChatMessage::user(user)]
}

fn prediction_text(p: Prediction, domain: ItemDomain) -> String {
    match p {
        Prediction::PredictedLiked => format!(
            "Predicted Liked (the system ranked this {} highly and expected the user to like it)",
            domain.noun()
        ),
        Prediction::PredictedDisliked => format!(
            "Predicted Disliked (the system ranked this {} low and expected the user to dislike it)",
            domain.noun()
        ),
    }
}

fn feedback_text(f: Feedback) -> &'static str {
    match f {
        Feedback::Positive => "Positive (the user liked it)",
        Feedback::Negative => "Negative (the user disliked it)",
    }
}

/// Slow-thinking memory-update task for one target item.
pub fn build_reflection_prompt(task: &ReflectionTask, domain: ItemDomain) -> Vec<ChatMessage> {
    let profile = profile_block(&task.memory.user);
    let history = history_block(&task.memory, domain);
    let target = item_line(&task.target, domain);
    let prediction = prediction_text(task.system_prediction, domain);
    let comparison = if task.system_prediction.matches(task.actual_feedback) {
        "The prediction matches the user's actual feedback.".to_owned()
    } else {
        format!(
            "Discrepancy: the system predicted the user would {} this {}, but the user actually {} it.",
            task.system_prediction.expected_verb(),
            domain.noun(),
            task.actual_feedback.word()
        )
    };
    let user = render_with_domain(
        REFLECTION_USER,
        domain,
        &[
            ("profile", &profile),
            ("description", description(&task.memory)),
            ("history", &history),
            ("target", &target),
            ("prediction", &prediction),
            ("feedback", feedback_text(task.actual_feedback)),
            ("comparison", &comparison),
        ],
    );
    vec![ChatMessage::system(render_with_domain(REFLECTION_SYSTEM, domain, &[])), ChatMessage::user(user)]
}

/// User turn sent back to a teacher after a screening failure.
pub fn rethink_message(error: &str, format_hint: &str) -> ChatMessage {
    ChatMessage::user(render(RETHINK_FEEDBACK, &[("error", error), ("format_hint", format_hint)]))
}
