//! Shared domain types for sessions, turns, guidance phrases and training records.
//!
//! Every type here is a plain value object: cheap to clone, `Send + Sync`, and
//! serialized as one JSON object per line with snake_case keys.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Number of guidance phrases served per turn unless configured otherwise.
pub const DEFAULT_K: usize = 3;

/// Maximum summary length in characters.
pub const DEFAULT_SUMMARY_CAP: usize = 2048;

/// Normalized form used for guidance distinctness: trimmed and case-folded.
pub fn normalize_text(text: &str) -> String {
    text.trim().to_lowercase()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Decoded,
    ClickedHistory,
    Fixture,
}

/// One follow-up phrase offered to the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidancePhrase {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_score: Option<f64>,
    pub origin: Origin,
}

impl GuidancePhrase {
    pub fn new(text: impl Into<String>, origin: Origin) -> Self {
        Self {
            text: text.into(),
            ce_score: None,
            origin,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.ce_score = Some(score);
        self
    }

    pub fn normalized(&self) -> String {
        normalize_text(&self.text)
    }
}

/// Goal-tracking output attached to a turn: explicit goal, carried summary and
/// the shift signal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub explicit_goal: String,
    pub summary: String,
    pub shift_detected: bool,
}

impl ContextBundle {
    /// The bundle used on the first round, where goal tracking does not run.
    pub fn empty() -> Self {
        Self::default()
    }

    /// Truncates the summary to at most `cap` characters.
    pub fn capped(mut self, cap: usize) -> Self {
        if self.summary.chars().count() > cap {
            self.summary = self.summary.chars().take(cap).collect();
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based round number.
    pub index: usize,
    pub query: String,
    pub answer: String,
    pub context: ContextBundle,
    pub guidance: Vec<GuidancePhrase>,
    /// 0-based position of the clicked phrase within `guidance`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clicked_index: Option<usize>,
}

impl Turn {
    pub fn clicked(&self) -> Option<&GuidancePhrase> {
        self.clicked_index.and_then(|i| self.guidance.get(i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub turns: Vec<Turn>,
    pub current_summary: String,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            turns: Vec::new(),
            current_summary: String::new(),
        }
    }

    /// Round number the next turn will get.
    pub fn next_round(&self) -> usize {
        self.turns.len() + 1
    }

    pub fn turn(&self, index: usize) -> Option<&Turn> {
        index
            .checked_sub(1)
            .and_then(|i| self.turns.get(i))
            .filter(|t| t.index == index)
    }

    pub fn turn_mut(&mut self, index: usize) -> Option<&mut Turn> {
        index
            .checked_sub(1)
            .and_then(|i| self.turns.get_mut(i))
            .filter(|t| t.index == index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub session_id: String,
    pub turn_index: usize,
    pub guidance_index: usize,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arity {
    OnePair,
    KPair,
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arity::OnePair => "one-pair",
            Arity::KPair => "k-pair",
        })
    }
}

impl std::str::FromStr for Arity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "one-pair" | "1-pair" => Ok(Arity::OnePair),
            "k-pair" => Ok(Arity::KPair),
            other => Err(format!("unknown preference format `{other}`")),
        }
    }
}

/// A preference pair `(x, y_w, y_l)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub input: String,
    pub chosen: String,
    pub rejected: String,
    pub arity: Arity,
}

impl PreferenceRecord {
    /// Checks the record invariants for the given guidance arity `k`.
    pub fn check(&self, k: usize) -> Result<(), String> {
        if self.chosen == self.rejected {
            return Err("chosen and rejected are identical".into());
        }
        if self.arity == Arity::KPair {
            for (side, text) in [("chosen", &self.chosen), ("rejected", &self.rejected)] {
                let n = text.split('\n').count();
                if n != k {
                    return Err(format!("{side} has {n} phrases, expected {k}"));
                }
            }
        } else {
            for (side, text) in [("chosen", &self.chosen), ("rejected", &self.rejected)] {
                if text.contains('\n') {
                    return Err(format!("one-pair {side} must be a single phrase"));
                }
            }
        }
        Ok(())
    }
}

/// Human judgement of one served turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session_id: String,
    pub turn_index: usize,
    pub relevance: bool,
    pub applicability: bool,
    pub diversity: bool,
    pub redline_violation: bool,
}

impl AnnotationRecord {
    /// Relevant, applicable, diverse and free of redline violations.
    pub fn meets_offline_criteria(&self) -> bool {
        self.relevance && self.applicability && self.diversity && !self.redline_violation
    }
}

/// Limits used when validating a session.
#[derive(Debug, Clone, Copy)]
pub struct ValidationLimits {
    pub k: usize,
    pub summary_cap: usize,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            summary_cap: DEFAULT_SUMMARY_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NonContiguousTurnIndices { position: usize, found: usize },
    GuidanceArity { turn: usize, found: usize, expected: usize },
    DuplicateGuidance { turn: usize, text: String },
    EmptyGuidance { turn: usize, position: usize },
    CeScoreOutOfRange { turn: usize, position: usize },
    ClickedIndexOutOfRange { turn: usize, index: usize, k: usize },
    SummaryTooLong { turn: Option<usize>, length: usize, cap: usize },
    CurrentSummaryMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonContiguousTurnIndices { position, found } => write!(
                f,
                "non-contiguous turn indices: position {} holds index {found}",
                position + 1
            ),
            Violation::GuidanceArity {
                turn,
                found,
                expected,
            } => write!(f, "turn {turn}: guidance has {found} entries, expected {expected}"),
            Violation::DuplicateGuidance { turn, text } => {
                write!(f, "turn {turn}: duplicate guidance `{text}`")
            }
            Violation::EmptyGuidance { turn, position } => {
                write!(f, "turn {turn}: guidance {} is empty", position + 1)
            }
            Violation::CeScoreOutOfRange { turn, position } => write!(
                f,
                "turn {turn}: guidance {} has ce_score outside [0,1]",
                position + 1
            ),
            Violation::ClickedIndexOutOfRange { turn, index, k } => write!(
                f,
                "turn {turn}: clicked_index out of range ({index} not in [0, {k}))"
            ),
            Violation::SummaryTooLong { turn, length, cap } => match turn {
                Some(t) => write!(f, "turn {t}: summary length {length} exceeds cap {cap}"),
                None => write!(f, "current summary length {length} exceeds cap {cap}"),
            },
            Violation::CurrentSummaryMismatch => {
                f.write_str("current summary differs from the latest turn's summary")
            }
        }
    }
}

/// Reports every invariant violation in `session`. An empty report means the
/// session is valid.
pub fn validate_session(session: &Session, limits: ValidationLimits) -> Vec<Violation> {
    let mut report = Vec::new();
    for (position, turn) in session.turns.iter().enumerate() {
        if turn.index != position + 1 {
            report.push(Violation::NonContiguousTurnIndices {
                position,
                found: turn.index,
            });
        }
        let t = turn.index;
        if turn.guidance.len() != limits.k {
            report.push(Violation::GuidanceArity {
                turn: t,
                found: turn.guidance.len(),
                expected: limits.k,
            });
        }
        let mut seen = HashSet::new();
        for (i, g) in turn.guidance.iter().enumerate() {
            let norm = g.normalized();
            if norm.is_empty() {
                report.push(Violation::EmptyGuidance { turn: t, position: i });
            } else if !seen.insert(norm) {
                report.push(Violation::DuplicateGuidance {
                    turn: t,
                    text: g.text.clone(),
                });
            }
            if let Some(s) = g.ce_score {
                if !(0.0..=1.0).contains(&s) {
                    report.push(Violation::CeScoreOutOfRange { turn: t, position: i });
                }
            }
        }
        if let Some(c) = turn.clicked_index {
            if c >= turn.guidance.len() {
                report.push(Violation::ClickedIndexOutOfRange {
                    turn: t,
                    index: c,
                    k: turn.guidance.len(),
                });
            }
        }
        let len = turn.context.summary.chars().count();
        if len > limits.summary_cap {
            report.push(Violation::SummaryTooLong {
                turn: Some(t),
                length: len,
                cap: limits.summary_cap,
            });
        }
    }
    let len = session.current_summary.chars().count();
    if len > limits.summary_cap {
        report.push(Violation::SummaryTooLong {
            turn: None,
            length: len,
            cap: limits.summary_cap,
        });
    }
    let expected = session
        .turns
        .last()
        .map(|t| t.context.summary.as_str())
        .unwrap_or("");
    if session.current_summary != expected {
        report.push(Violation::CurrentSummaryMismatch);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phrases(texts: &[&str]) -> Vec<GuidancePhrase> {
        texts
            .iter()
            .map(|t| GuidancePhrase::new(*t, Origin::Decoded))
            .collect()
    }

    fn turn(index: usize, texts: &[&str]) -> Turn {
        Turn {
            index,
            query: format!("q{index}"),
            answer: format!("a{index}"),
            context: ContextBundle::empty(),
            guidance: phrases(texts),
            clicked_index: None,
        }
    }

    #[test]
    fn empty_session_is_valid() {
        assert!(validate_session(&Session::new("s"), ValidationLimits::default()).is_empty());
    }

    #[test]
    fn clicked_index_out_of_range_is_reported() {
        let mut s = Session::new("s");
        s.turns.push(turn(1, &["a", "b", "c"]));
        let mut t2 = turn(2, &["d", "e", "f"]);
        t2.clicked_index = Some(5);
        s.turns.push(t2);
        let report = validate_session(&s, ValidationLimits::default());
        assert_eq!(report.len(), 1);
        assert!(report[0].to_string().contains("clicked_index out of range"));
    }

    #[test]
    fn gap_in_turn_indices_is_reported() {
        let mut s = Session::new("s");
        s.turns.push(turn(1, &["a", "b", "c"]));
        s.turns.push(turn(3, &["d", "e", "f"]));
        let report = validate_session(&s, ValidationLimits::default());
        assert!(report
            .iter()
            .any(|v| v.to_string().contains("non-contiguous turn indices")));
    }

    #[test]
    fn duplicates_are_detected_after_trim_and_case_fold() {
        let mut s = Session::new("s");
        s.turns.push(turn(1, &["Buy stocks", "  buy STOCKS ", "sell"]));
        let report = validate_session(&s, ValidationLimits::default());
        assert!(matches!(report[..], [Violation::DuplicateGuidance { turn: 1, .. }]));
    }

    #[test]
    fn summary_cap_and_mismatch() {
        let mut s = Session::new("s");
        let mut t = turn(1, &["a", "b", "c"]);
        t.context.summary = "x".repeat(10);
        s.turns.push(t);
        s.current_summary = "x".repeat(10);
        let limits = ValidationLimits { k: 3, summary_cap: 8 };
        let report = validate_session(&s, limits);
        assert_eq!(report.len(), 2);
        s.current_summary = "y".into();
        assert!(validate_session(&s, ValidationLimits::default())
            .contains(&Violation::CurrentSummaryMismatch));
    }

    #[test]
    fn capped_counts_characters() {
        let b = ContextBundle {
            summary: "ééééé".into(),
            ..Default::default()
        }
        .capped(3);
        assert_eq!(b.summary, "ééé");
    }

    #[test]
    fn serde_keys_and_enums() {
        let g = GuidancePhrase::new("x", Origin::ClickedHistory).with_score(0.5);
        let line = serde_json::to_string(&g).unwrap();
        assert_eq!(line, r#"{"text":"x","ce_score":0.5,"origin":"clicked-history"}"#);
        let r = PreferenceRecord {
            input: "p".into(),
            chosen: "a".into(),
            rejected: "b".into(),
            arity: Arity::OnePair,
        };
        assert!(serde_json::to_string(&r).unwrap().contains(r#""arity":"one-pair""#));
    }

    #[test]
    fn preference_record_checks() {
        let mut r = PreferenceRecord {
            input: "p".into(),
            chosen: "a\nb\nc".into(),
            rejected: "d\ne\nf".into(),
            arity: Arity::KPair,
        };
        assert!(r.check(3).is_ok());
        assert!(r.check(2).is_err());
        r.rejected = r.chosen.clone();
        assert!(r.check(3).is_err());
    }

    #[test]
    fn offline_criteria_conjunction() {
        let mut a = AnnotationRecord {
            session_id: "s".into(),
            turn_index: 1,
            relevance: true,
            applicability: true,
            diversity: true,
            redline_violation: false,
        };
        assert!(a.meets_offline_criteria());
        a.redline_violation = true;
        assert!(!a.meets_offline_criteria());
    }
}
