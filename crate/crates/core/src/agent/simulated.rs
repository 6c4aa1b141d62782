//! A deterministic stand-in for a chat model that understands the prompts
//! built in [`super::prompt`]. It scores candidates by attribute affinity
//! learned from the history and the preference description, so the harness
//! can run end to end without a real model. Output is a pure function of the
//! request and the configured seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::llm::{ChatBackend, CompletionRequest, LlmError, Role};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatedModelConfig {
    pub seed: u64,
    /// Score noise per unit of temperature.
    pub noise: f64,
    /// Probability that a first-turn answer carries a format defect.
    pub flaw_rate: f64,
}

impl Default for SimulatedModelConfig {
    fn default() -> Self {
        SimulatedModelConfig { seed: 0, noise: 1.5, flaw_rate: 0.0 }
    }
}

pub struct SimulatedModel {
    config: SimulatedModelConfig,
    name: String,
}

impl SimulatedModel {
    pub fn new(config: SimulatedModelConfig) -> Self {
        SimulatedModel { config, name: "simulated".into() }
    }
}

#[derive(Debug, Default)]
struct Entry {
    display: String,
    attributes: Vec<String>,
    liked: Option<bool>,
}

fn parse_entry(line: &str) -> Option<Entry> {
    let t = line.trim_start();
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    let rest = t[digits..].strip_prefix(". ")?;
    let mut parts = rest.split(" | ");
    let mut e = Entry { display: parts.next()?.trim().to_owned(), ..Default::default() };
    for p in parts {
        if let Some((label, value)) = p.split_once(": ") {
            if label == "Feedback" {
                e.liked = Some(value.trim() == "liked");
            } else {
                e.attributes.extend(value.split(", ").map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()));
            }
        }
    }
    Some(e)
}

#[derive(Debug, Default)]
struct TaskView {
    description: String,
    history: Vec<Entry>,
    candidates: Vec<Entry>,
    target: Option<Entry>,
    actual_positive: Option<bool>,
}

fn parse_task(text: &str) -> TaskView {
    #[derive(PartialEq)]
    enum Section {
        None,
        History,
        Candidates,
        Target,
    }
    let mut view = TaskView::default();
    let mut section = Section::None;
    for line in text.lines() {
        if let Some(d) =
            line.strip_prefix("User Description: ").or_else(|| line.strip_prefix("Current User Description: "))
        {
            view.description = d.to_owned();
            continue;
        }
        if let Some(f) = line.strip_prefix("User's Actual Feedback: ") {
            view.actual_positive = Some(f.starts_with("Positive"));
            continue;
        }
        if line.ends_with("History:") {
            section = Section::History;
            continue;
        }
        if line.starts_with("Candidate ") && line.ends_with(':') {
            section = Section::Candidates;
            continue;
        }
        if line.starts_with("Target ") && line.ends_with("Information:") {
            section = Section::Target;
            continue;
        }
        if line.trim().is_empty() {
            section = Section::None;
            continue;
        }
        if let Some(e) = parse_entry(line) {
            match section {
                Section::History => view.history.push(e),
                Section::Candidates => view.candidates.push(e),
                _ => {}
            }
        } else if section == Section::Target && view.target.is_none() {
            view.target = parse_entry(&format!("1. {line}"));
        }
    }
    view
}

/// Attribute weights from history feedback and the description's
/// "Prefers a, b; dislikes c" clauses.
fn affinities(view: &TaskView) -> BTreeMap<String, f64> {
    let mut w: BTreeMap<String, f64> = BTreeMap::new();
    for h in &view.history {
        let delta = match h.liked {
            Some(true) => 1.0,
            Some(false) => -1.0,
            None => 0.0,
        };
        for a in &h.attributes {
            *w.entry(a.clone()).or_default() += delta;
        }
    }
    let d = view.description.to_lowercase();
    for (key, sign) in [("prefers ", 2.0), ("dislikes ", -2.0)] {
        if let Some(pos) = d.find(key) {
            let start = pos + key.len();
            let clause = &view.description[start..];
            let clause = clause.split([';', '.']).next().unwrap_or("");
            for a in clause.split(", ") {
                let a = a.trim();
                if !a.is_empty() && a != "nothing in particular yet" {
                    *w.entry(a.to_owned()).or_default() += sign;
                }
            }
        }
    }
    w
}

fn top_attributes(w: &BTreeMap<String, f64>, positive: bool, n: usize) -> Vec<String> {
    let mut v: Vec<(&String, f64)> =
        w.iter().map(|(k, v)| (k, *v)).filter(|(_, v)| if positive { *v > 0.0 } else { *v < 0.0 }).collect();
    v.sort_by(|a, b| {
        let (x, y) = if positive { (b.1, a.1) } else { (a.1, b.1) };
        x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(b.0))
    });
    v.into_iter().take(n).map(|(k, _)| k.clone()).collect()
}

fn describe(w: &BTreeMap<String, f64>) -> String {
    let likes = top_attributes(w, true, 3);
    let dislikes = top_attributes(w, false, 2);
    let likes = if likes.is_empty() { "nothing in particular yet".to_owned() } else { likes.join(", ") };
    if dislikes.is_empty() {
        format!("Prefers {likes}.")
    } else {
        format!("Prefers {likes}; dislikes {}.", dislikes.join(", "))
    }
}

/// Extracts the quoted title from rethink feedback such as
/// `the positive item "Heat (1995)" was ranked 11th`.
fn corrected_title(feedback: &str) -> Option<String> {
    let start = feedback.find("positive item \"")? + "positive item \"".len();
    let end = feedback[start..].find('"')?;
    Some(feedback[start..start + end].to_owned())
}

impl SimulatedModel {
    fn rng(&self, request: &CompletionRequest) -> ChaCha8Rng {
        let nonce = request.seed.unwrap_or(0).to_string();
        ChaCha8Rng::seed_from_u64(seed::derive(self.config.seed, &[&request.digest(), &nonce]))
    }

    fn rank(&self, request: &CompletionRequest, view: &TaskView, rethink: Option<&str>) -> String {
        let w = affinities(view);
        let mut rng = self.rng(request);
        let promote = rethink.and_then(corrected_title);
        let mut scored: Vec<(usize, f64)> = view
            .candidates
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let base: f64 = c.attributes.iter().map(|a| w.get(a).copied().unwrap_or(0.0)).sum();
                let noise = (rng.random::<f64>() - 0.5) * self.config.noise * request.temperature;
                let bonus = if promote.as_deref() == Some(c.display.as_str()) { 1e6 } else { 0.0 };
                (i, base + noise + bonus)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));

        let likes = top_attributes(&w, true, 3);
        let flaw = if rethink.is_none() && rng.random::<f64>() < self.config.flaw_rate {
            Some(rng.random_range(0..4u8))
        } else {
            None
        };
        let think = if likes.is_empty() {
            "Little is known about this user yet, so I prefer broadly popular picks and keep the listed order where nothing stands out.".to_owned()
        } else {
            format!("The user seems to prefer {}. Candidates sharing these traits go first.", likes.join(", "))
        };
        let think = if flaw == Some(2) { "Ordering the list.".to_owned() } else { think };
        let mut out = String::new();
        if flaw != Some(0) {
            out.push_str(&format!("<think>{think}</think>\n"));
        }
        if flaw == Some(1) {
            out.push_str("All of these look reasonable for this user.\n");
            return out;
        }
        let keep = if flaw == Some(3) { scored.len().saturating_sub(3).max(1) } else { scored.len() };
        for (rank, (i, _)) in scored.iter().take(keep).enumerate() {
            let c = &view.candidates[*i];
            let why = c
                .attributes
                .iter()
                .find(|a| likes.contains(a))
                .map(|a| format!("matches the taste for {a}"))
                .unwrap_or_else(|| "weaker match to the profile".to_owned());
            out.push_str(&format!("{}. {} - {}\n", rank + 1, c.display, why));
        }
        out
    }

    fn reflect(&self, view: &TaskView) -> String {
        let mut w = affinities(view);
        if let (Some(t), Some(pos)) = (&view.target, view.actual_positive) {
            for a in &t.attributes {
                *w.entry(a.clone()).or_default() += if pos { 1.5 } else { -1.5 };
            }
        }
        let target = view.target.as_ref().map(|t| t.display.as_str()).unwrap_or("the target");
        let verdict = match view.actual_positive {
            Some(true) => "liked",
            Some(false) => "disliked",
            None => "reacted to",
        };
        format!(
            "<think>The user {verdict} {target}. Folding that into what the history shows about their preferences.</think>\nUpdated User description: {}",
            describe(&w)
        )
    }
}

impl ChatBackend for SimulatedModel {
    fn send(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let system = request.messages.iter().find(|m| m.role == Role::System).map(|m| m.content.as_str()).unwrap_or("");
        let task_text = request
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .ok_or_else(|| LlmError::MalformedResponse("no user message".into()))?;
        let rethink = if request.messages.iter().any(|m| m.role == Role::Assistant) {
            request.messages.last().filter(|m| m.role == Role::User).map(|m| m.content.as_str())
        } else {
            None
        };
        let view = parse_task(task_text);
        if system.contains("preference analyst") {
            Ok(self.reflect(&view))
        } else if system.contains("recommendation system") {
            Ok(self.rank(request, &view, rethink))
        } else {
            Err(LlmError::UnscriptedPrompt { digest: request.digest() })
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{
        build_ranking_prompt, build_reflection_prompt, parse_ranking_response, parse_reflection_response, AgentMemory,
        Feedback, HistoryEntry, ItemDomain, ParseMode, Prediction, ReflectionTask,
    };
    use crate::corpus::{Item, UserRecord};

    fn memory() -> AgentMemory {
        let liked = Item::new("h1", "Old War").with_year(1960).with_attributes(["War", "Drama"]);
        let disliked = Item::new("h2", "Scary").with_year(1980).with_attributes(["Horror"]);
        AgentMemory::new(UserRecord::anonymous("u")).with_history(vec![
            HistoryEntry { item: liked, feedback: Feedback::Positive },
            HistoryEntry { item: disliked, feedback: Feedback::Negative },
        ])
    }

    fn cands() -> Vec<Item> {
        vec![
            Item::new("c1", "Ghosts").with_year(1990).with_attributes(["Horror"]),
            Item::new("c2", "Front Line").with_year(1991).with_attributes(["War"]),
            Item::new("c3", "Laughs").with_year(1992).with_attributes(["Comedy"]),
        ]
    }

    #[test]
    fn ranks_by_history_affinity() {
        let model = SimulatedModel::new(SimulatedModelConfig::default());
        let c = cands();
        let req =
            CompletionRequest::new("sim", build_ranking_prompt(&memory(), &c, ItemDomain::Movies)).temperature(0.0);
        let text = model.send(&req).unwrap();
        let out = parse_ranking_response(&text, &c, ParseMode::Strict).unwrap();
        let ids: Vec<&str> = out.ranked.iter().map(|r| r.item_id.0.as_str()).collect();
        assert_eq!(ids, ["c2", "c3", "c1"]);
        assert!(out.think.contains("prefer"));
        assert_eq!(model.send(&req).unwrap(), text);
    }

    #[test]
    fn reflection_mentions_target_attributes() {
        let model = SimulatedModel::new(SimulatedModelConfig::default());
        let task = ReflectionTask {
            memory: memory(),
            target: cands()[2].clone(),
            system_prediction: Prediction::PredictedDisliked,
            actual_feedback: Feedback::Positive,
        };
        let req = CompletionRequest::new("sim", build_reflection_prompt(&task, ItemDomain::Movies));
        let desc = parse_reflection_response(&model.send(&req).unwrap()).unwrap();
        assert!(desc.starts_with("Prefers "), "{desc}");
        assert!(desc.contains("Comedy"));
        assert!(desc.contains("dislikes Horror"));
    }

    #[test]
    fn description_feeds_back_into_ranking() {
        let model = SimulatedModel::new(SimulatedModelConfig::default());
        let mut m = AgentMemory::new(UserRecord::anonymous("u"));
        m.preference_description = "Prefers Comedy; dislikes War.".into();
        let c = cands();
        let req = CompletionRequest::new("sim", build_ranking_prompt(&m, &c, ItemDomain::Movies)).temperature(0.0);
        let out = parse_ranking_response(&model.send(&req).unwrap(), &c, ParseMode::Strict).unwrap();
        assert_eq!(out.ranked[0].item_id.0, "c3");
        assert_eq!(out.ranked[2].item_id.0, "c2");
    }

    #[test]
    fn temperature_noise_is_seeded() {
        let model = SimulatedModel::new(SimulatedModelConfig { noise: 50.0, ..Default::default() });
        let c = cands();
        let base =
            CompletionRequest::new("sim", build_ranking_prompt(&memory(), &c, ItemDomain::Movies)).temperature(1.0);
        let a = model.send(&base.clone().seed(1)).unwrap();
        assert_eq!(a, model.send(&base.clone().seed(1)).unwrap());
        let distinct: std::collections::HashSet<String> =
            (0..20).map(|s| model.send(&base.clone().seed(s)).unwrap()).collect();
        assert!(distinct.len() > 1);
    }
}
