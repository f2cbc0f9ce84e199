//! Goal adaptation: prompts a goal-tracking backend, parses its structured
//! reply into a [`ContextBundle`] and applies the shift-reset rule.
//!
//! The current turn's answer never enters this module. [`GaaRequest`] has no
//! field for it, so goal tracking can run while the answer is being generated.

use std::collections::BTreeSet;

use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendError, TextBackend};
use crate::types::{ContextBundle, DEFAULT_SUMMARY_CAP};

/// Rendered in place of an absent input.
pub const NONE_MARKER: &str = "(none)";

pub const CURRENT_QUERY_HEADER: &str = "[Q_i] Current user question:";
pub const PREVIOUS_PAIR_HEADER: &str = "[(Q_{i-1}, A_{i-1})] Previous question and answer:";
pub const PREVIOUS_SUMMARY_HEADER: &str = "[S_{i-1}] Dialogue summary so far:";
const PREVIOUS_QUERY_PREFIX: &str = "Q_{i-1}: ";
const PREVIOUS_ANSWER_PREFIX: &str = "A_{i-1}: ";

const GAA_TEMPLATE: &str = "\
You are a Goal-Tracking Model specifically designed for multi-turn dialogue scenarios. \
Your task is to understand and track the user's evolving goals throughout the dialogue and \
produce coherent summaries that capture the history and progression of the conversation. \
This process involves preserving contextual continuity and relevance to the user's current \
objectives. To accomplish this, you will utilize the following inputs:
- [Q_i]: The current user question in the dialogue, which may indicate a continuation of \
previous goals or the introduction of new goals.
- [(Q_{i-1}, A_{i-1})]: The immediate previous question and answer pair, providing context \
for Q_i and potentially containing clues about changes in the user's intent since the last turn.
- [S_{i-1}]: A comprehensive summary of the dialogue history up to the interaction immediately \
preceding Q_i, encapsulating key points and actions taken that are relevant to the evolving \
goals of the user.

Task:
(1) Explicit Goal Analysis:
- Perform a detailed analysis of [Q_i] in the context of [(Q_{i-1}, A_{i-1})], to detect \
nuanced changes in the user's goals. Provide a clear and explicit textual explanation that \
articulates the current user's intent, and infer any underlying or potential needs that may \
be driving this intent.
(2) Goal-relevant Summary:
- Based on the results of the explicit goal analysis, selectively extract content from \
[S_{i-1}] and [(Q_{i-1}, A_{i-1})], that is directly related to the user's current goals. \
Integrate these key points into a new, updated summary [S_i], ensuring that it is concise yet \
comprehensive. Prune any elements that are no longer relevant to the current context or the \
user's goals to maintain focus and clarity in the evolving conversation.
(3) Detection Signal:
- Provide a detection signal [D_i] that indicates whether a goal transition has occurred \
between the previous turn and the current turn. If such a transition is detected, trigger a \
reset of [S_i] to ensure that the summary remains relevant and does not retain outdated \
information that could interfere with the user's current goal orientation.

Expected Output Format:
The expected output should be a structured JSON object, as follows:
{
  \"explicitGoalAnalysis\": \"Description of the user's current intent, and inferred potential needs of the user\",
  \"goalRelevantSummary\": \"Coherent summary incorporating key points relevant to the user's current goals\",
  \"detectionSignal\": \"Boolean indicating whether a goal transition has been detected\"
}
";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GaaError {
    #[error("invalid goal-tracking request: {0}")]
    InvalidRequest(String),
}

/// Inputs to one goal-tracking call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GaaRequest {
    pub current_query: String,
    pub previous_pair: Option<(String, String)>,
    pub previous_summary: Option<String>,
    pub round_index: usize,
}

impl GaaRequest {
    /// Builds the request for `round_index` from the carried session state,
    /// dropping inputs that the round does not use.
    pub fn for_round(
        round_index: usize,
        current_query: impl Into<String>,
        previous_pair: Option<(String, String)>,
        carried_summary: &str,
    ) -> Self {
        let current_query = current_query.into();
        match round_index {
            0 | 1 => Self {
                current_query,
                previous_pair: None,
                previous_summary: None,
                round_index: round_index.max(1),
            },
            2 => Self {
                current_query,
                previous_pair,
                previous_summary: None,
                round_index,
            },
            _ => Self {
                current_query,
                previous_pair,
                previous_summary: Some(carried_summary.to_owned()),
                round_index,
            },
        }
    }

    pub fn validate(&self) -> Result<(), GaaError> {
        let bad = |m: &str| Err(GaaError::InvalidRequest(m.to_owned()));
        match self.round_index {
            0 => bad("round_index must be >= 1"),
            1 if self.previous_pair.is_some() || self.previous_summary.is_some() => {
                bad("round 1 carries no previous turn or summary")
            }
            2 if self.previous_pair.is_none() => bad("round 2 requires the previous pair"),
            2 if self.previous_summary.is_some() => bad("round 2 has no previous summary"),
            r if r > 2 && (self.previous_pair.is_none() || self.previous_summary.is_none()) => {
                bad("rounds after 2 require the previous pair and summary")
            }
            _ => Ok(()),
        }
    }
}

/// Renders the goal-tracking prompt. Round 1 is rejected because goal
/// tracking is not run on the first round.
pub fn render_gaa_prompt(request: &GaaRequest) -> Result<String, GaaError> {
    request.validate()?;
    if request.round_index < 2 {
        return Err(GaaError::InvalidRequest(
            "goal tracking is not run on round 1".into(),
        ));
    }
    let mut out = String::with_capacity(GAA_TEMPLATE.len() + 256);
    out.push_str(GAA_TEMPLATE);
    out.push('\n');
    out.push_str(CURRENT_QUERY_HEADER);
    out.push('\n');
    out.push_str(&request.current_query);
    out.push('\n');
    out.push_str(PREVIOUS_PAIR_HEADER);
    out.push('\n');
    match &request.previous_pair {
        Some((q, a)) => {
            out.push_str(PREVIOUS_QUERY_PREFIX);
            out.push_str(q);
            out.push('\n');
            out.push_str(PREVIOUS_ANSWER_PREFIX);
            out.push_str(a);
        }
        None => out.push_str(NONE_MARKER),
    }
    out.push('\n');
    out.push_str(PREVIOUS_SUMMARY_HEADER);
    out.push('\n');
    match request.previous_summary.as_deref() {
        Some(s) if !s.is_empty() => out.push_str(s),
        _ => out.push_str(NONE_MARKER),
    }
    out.push('\n');
    Ok(out)
}

/// The slot values recovered from a rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSlots {
    pub current_query: String,
    pub previous_query: Option<String>,
    pub previous_answer: Option<String>,
    pub previous_summary: Option<String>,
}

/// Inverse of the slot section of [`render_gaa_prompt`]. Used by mock
/// backends that need to react to the prompt's inputs.
pub fn extract_prompt_slots(prompt: &str) -> Option<PromptSlots> {
    let q_at = prompt.rfind(CURRENT_QUERY_HEADER)?;
    let rest = &prompt[q_at + CURRENT_QUERY_HEADER.len()..];
    let p_at = rest.find(PREVIOUS_PAIR_HEADER)?;
    let current_query = rest[..p_at].trim_matches('\n').to_owned();
    let rest = &rest[p_at + PREVIOUS_PAIR_HEADER.len()..];
    let s_at = rest.find(PREVIOUS_SUMMARY_HEADER)?;
    let pair = rest[..s_at].trim_matches('\n');
    let summary = rest[s_at + PREVIOUS_SUMMARY_HEADER.len()..].trim_matches('\n');

    let (previous_query, previous_answer) = if pair == NONE_MARKER {
        (None, None)
    } else {
        let body = pair.strip_prefix(PREVIOUS_QUERY_PREFIX)?;
        let split = body.find(&format!("\n{PREVIOUS_ANSWER_PREFIX}"))?;
        (
            Some(body[..split].to_owned()),
            Some(body[split + 1 + PREVIOUS_ANSWER_PREFIX.len()..].to_owned()),
        )
    };
    let previous_summary = (summary != NONE_MARKER).then(|| summary.to_owned());
    Some(PromptSlots {
        current_query,
        previous_query,
        previous_answer,
        previous_summary,
    })
}

/// A goal-tracking reply that could not be turned into a bundle.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unparseable goal-tracking reply ({reason})")]
pub struct ParseFailure {
    pub raw: String,
    pub reason: String,
}

fn as_flag(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// Extracts the JSON object in `raw` (code fences and surrounding prose are
/// tolerated) and maps its three keys onto a [`ContextBundle`].
pub fn parse_gaa_response(raw: &str) -> Result<ContextBundle, ParseFailure> {
    let fail = |reason: &str| ParseFailure {
        raw: raw.to_owned(),
        reason: reason.to_owned(),
    };
    let start = raw.find('{').ok_or_else(|| fail("no JSON object"))?;
    let end = raw.rfind('}').ok_or_else(|| fail("no JSON object"))?;
    if end < start {
        return Err(fail("no JSON object"));
    }
    let value: Value =
        serde_json::from_str(&raw[start..=end]).map_err(|e| fail(&format!("invalid JSON: {e}")))?;
    let text = |key: &str| -> Result<String, ParseFailure> {
        match value.get(key) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(fail(&format!("`{key}` is not a string"))),
            None => Err(fail(&format!("missing `{key}`"))),
        }
    };
    let explicit_goal = text("explicitGoalAnalysis")?;
    let summary = text("goalRelevantSummary")?;
    let shift_detected = value
        .get("detectionSignal")
        .ok_or_else(|| fail("missing `detectionSignal`"))
        .and_then(|v| as_flag(v).ok_or_else(|| fail("`detectionSignal` is not a boolean")))?;
    Ok(ContextBundle {
        explicit_goal,
        summary,
        shift_detected,
    })
}

/// Summary carried into the next goal-tracking call: empty after a detected
/// shift, the new summary otherwise.
pub fn step_goal_state(bundle: &ContextBundle) -> String {
    if bundle.shift_detected {
        String::new()
    } else {
        bundle.summary.clone()
    }
}

/// Applies [`step_goal_state`] to the bundle itself, so the stored bundle and
/// the carried summary agree.
pub fn apply_reset(mut bundle: ContextBundle) -> ContextBundle {
    bundle.summary = step_goal_state(&bundle);
    bundle
}

#[derive(Debug, Clone, Copy)]
pub struct GaaOptions {
    /// Extra attempts after the first one, on transport or parse failure.
    pub retries: usize,
    pub summary_cap: usize,
}

impl Default for GaaOptions {
    fn default() -> Self {
        Self {
            retries: 1,
            summary_cap: DEFAULT_SUMMARY_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GaaFailure {
    Parse(ParseFailure),
    Transport(BackendError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GaaOutcome {
    pub bundle: ContextBundle,
    /// Set when the bundle is the fail-soft fallback.
    pub failure: Option<GaaFailure>,
}

impl GaaOutcome {
    pub fn is_fallback(&self) -> bool {
        self.failure.is_some()
    }
}

fn fail_soft(request: &GaaRequest, summary_cap: usize) -> ContextBundle {
    ContextBundle {
        explicit_goal: String::new(),
        summary: request.previous_summary.clone().unwrap_or_default(),
        shift_detected: false,
    }
    .capped(summary_cap)
}

/// Render, call, parse. After the retries are exhausted a fail-soft bundle
/// (no goal, inherited summary, no shift) is returned with the failure.
pub fn adapt_goal(
    request: &GaaRequest,
    backend: &dyn TextBackend,
    options: GaaOptions,
) -> Result<GaaOutcome, GaaError> {
    let prompt = render_gaa_prompt(request)?;
    let mut last = None;
    for attempt in 0..=options.retries {
        match backend.complete(&prompt) {
            Ok(raw) => match parse_gaa_response(&raw) {
                Ok(bundle) => {
                    return Ok(GaaOutcome {
                        bundle: bundle.capped(options.summary_cap),
                        failure: None,
                    })
                }
                Err(e) => {
                    tracing::warn!(attempt, reason = %e.reason, "goal tracker reply unparseable");
                    last = Some(GaaFailure::Parse(e));
                }
            },
            Err(e) => {
                tracing::warn!(attempt, error = %e, "goal tracker call failed");
                last = Some(GaaFailure::Transport(e));
            }
        }
    }
    Ok(GaaOutcome {
        bundle: fail_soft(request, options.summary_cap),
        failure: last,
    })
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "are", "you", "what", "how", "can", "does", "with", "about", "that",
    "this", "which", "who", "why", "when", "where", "any", "there", "some", "should", "would",
    "more", "tell", "from", "have", "your", "into",
];

/// Lowercased alphanumeric words of at least three characters, minus common
/// function words.
pub fn content_words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().count() >= 3)
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Deterministic goal tracker for tests and offline replay.
///
/// A shift is reported when the current query shares no content word with
/// the previous query or the previous summary. Without a shift the summary
/// appends the previous query to the inherited summary, keeping the last
/// `max_segments` segments.
#[derive(Debug, Clone, Copy)]
pub struct KeywordShiftBackend {
    pub max_segments: usize,
}

impl Default for KeywordShiftBackend {
    fn default() -> Self {
        Self { max_segments: 3 }
    }
}

impl TextBackend for KeywordShiftBackend {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let slots = extract_prompt_slots(prompt)
            .ok_or_else(|| BackendError::Malformed("prompt has no input slots".into()))?;
        let current = content_words(&slots.current_query);
        let mut context = slots
            .previous_query
            .as_deref()
            .map(content_words)
            .unwrap_or_default();
        if let Some(s) = &slots.previous_summary {
            context.extend(content_words(s));
        }
        let shift = !current.is_empty() && !context.is_empty() && current.is_disjoint(&context);
        let summary = if shift {
            String::new()
        } else {
            let mut segments: Vec<&str> = slots
                .previous_summary
                .as_deref()
                .map(|s| s.split(" | ").collect())
                .unwrap_or_default();
            if let Some(q) = slots.previous_query.as_deref() {
                segments.push(q);
            }
            let skip = segments.len().saturating_sub(self.max_segments);
            segments[skip..].join(" | ")
        };
        let reply = serde_json::json!({
            "explicitGoalAnalysis": format!("user intent: {}", slots.current_query),
            "goalRelevantSummary": summary,
            "detectionSignal": shift,
        });
        Ok(reply.to_string())
    }
}
