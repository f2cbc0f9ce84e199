//! Teacher candidate generation and the fine-tuning export built from a
//! human-edited selection of keepers.
//!
//! The teacher is asked for a reasoning block followed by `n` numbered
//! phrases:
//!
//! ```text
//! Thought: <reasoning>
//! Guidance:
//! 1. <phrase>
//! 2. <phrase>
//! ```

use std::collections::{BTreeMap, BTreeSet};

use proguide_core::backend::TextBackend;
use proguide_core::objectives::{serialize_record, SftSample, TrainingRecord};
use proguide_core::prompt::{join_guidance, render_guidance_prompt};
use proguide_core::{normalize_text, ContextBundle};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const TEACHER_SUFFIX: &str = "\
Before the list, explain your reasoning on a line starting with `Thought:`. Then write \
`Guidance:` on its own line followed by exactly {n} numbered questions, one per line.
";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DistillError {
    #[error("candidate count {n} must exceed k {k}")]
    CandidateCount { n: usize, k: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub query: String,
    pub answer: String,
    #[serde(default)]
    pub context: ContextBundle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Flag {
    Transport { message: String },
    MissingThought,
    MissingGuidance,
    WrongCount { expected: usize, found: usize },
    DuplicateCandidates,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub conversation: Conversation,
    pub thought: Option<String>,
    pub candidates: Vec<String>,
    pub raw: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<Flag>,
}

/// One line of the selection file: the 0-based candidate indices to keep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub id: String,
    pub keep: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftExport {
    pub samples: Vec<SftSample>,
    /// JSONL lines without trailing newlines, one per sample.
    pub lines: Vec<String>,
    pub rejected: Vec<Rejection>,
}

pub fn teacher_prompt(conversation: &Conversation, n: usize) -> String {
    let mut prompt = render_guidance_prompt(&conversation.query, &conversation.answer, &conversation.context, n);
    prompt.push('\n');
    prompt.push_str(&TEACHER_SUFFIX.replace("{n}", &n.to_string()));
    prompt
}

fn strip_numbering(line: &str) -> &str {
    let rest = line.trim_start_matches(|c: char| c.is_ascii_digit());
    if rest.len() < line.len() {
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return r.trim();
        }
    }
    line.strip_prefix("- ").unwrap_or(line).trim()
}

/// Splits a teacher response into its reasoning and candidate phrases.
pub fn parse_teacher_response(raw: &str) -> (Option<String>, Vec<String>) {
    let mut thought: Vec<&str> = Vec::new();
    let mut candidates = Vec::new();
    let mut section = None;
    for line in raw.lines() {
        let t = line.trim();
        if let Some(rest) = t.strip_prefix("Thought:") {
            section = Some(false);
            thought.push(rest.trim());
        } else if let Some(rest) = t.strip_prefix("Guidance:") {
            section = Some(true);
            if !rest.trim().is_empty() {
                candidates.push(strip_numbering(rest.trim()).to_owned());
            }
        } else if t.is_empty() {
            continue;
        } else {
            match section {
                Some(false) => thought.push(t),
                Some(true) => candidates.push(strip_numbering(t).to_owned()),
                None => {}
            }
        }
    }
    let thought = thought.join("\n");
    let thought = (!thought.trim().is_empty()).then_some(thought);
    candidates.retain(|c| !c.is_empty());
    (thought, candidates)
}

fn check(thought: &Option<String>, candidates: &[String], n: usize) -> Option<Flag> {
    if thought.is_none() {
        return Some(Flag::MissingThought);
    }
    if candidates.is_empty() {
        return Some(Flag::MissingGuidance);
    }
    if candidates.len() != n {
        return Some(Flag::WrongCount {
            expected: n,
            found: candidates.len(),
        });
    }
    let distinct: BTreeSet<String> = candidates.iter().map(|c| normalize_text(c)).collect();
    (distinct.len() != candidates.len()).then_some(Flag::DuplicateCandidates)
}

/// Asks the teacher for `n` candidates per conversation. Failed calls and
/// malformed responses are kept but flagged.
pub fn generate_distillation_set(
    conversations: &[Conversation],
    teacher: &dyn TextBackend,
    n: usize,
    k: usize,
) -> Result<Vec<CandidateRecord>, DistillError> {
    if n <= k {
        return Err(DistillError::CandidateCount { n, k });
    }
    Ok(conversations
        .iter()
        .map(|c| match teacher.complete(&teacher_prompt(c, n)) {
            Ok(raw) => {
                let (thought, candidates) = parse_teacher_response(&raw);
                let flag = check(&thought, &candidates, n);
                if let Some(f) = &flag {
                    tracing::warn!(id = %c.id, flag = ?f, "teacher response flagged");
                }
                CandidateRecord {
                    conversation: c.clone(),
                    thought,
                    candidates,
                    raw,
                    flag,
                }
            }
            Err(e) => CandidateRecord {
                conversation: c.clone(),
                thought: None,
                candidates: Vec::new(),
                raw: String::new(),
                flag: Some(Flag::Transport { message: e.to_string() }),
            },
        })
        .collect())
}

/// Fine-tuning samples from unflagged records with a valid selection of
/// exactly `k` keepers. The reasoning block is not part of the sample.
pub fn export_sft(records: &[CandidateRecord], selections: &[Selection], k: usize) -> SftExport {
    let by_id: BTreeMap<&str, &Selection> = selections.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = SftExport {
        samples: Vec::new(),
        lines: Vec::new(),
        rejected: Vec::new(),
    };
    for r in records {
        let id = r.conversation.id.clone();
        let reject = |reason: String| Rejection { id: id.clone(), reason };
        if let Some(flag) = &r.flag {
            out.rejected.push(reject(format!("flagged: {flag:?}")));
            continue;
        }
        let Some(sel) = by_id.get(id.as_str()) else {
            out.rejected.push(reject("no selection".into()));
            continue;
        };
        if sel.keep.len() != k {
            out.rejected.push(reject(format!("selection keeps {} phrases, expected {k}", sel.keep.len())));
            continue;
        }
        let distinct: BTreeSet<usize> = sel.keep.iter().copied().collect();
        if distinct.len() != k {
            out.rejected.push(reject("selection repeats an index".into()));
            continue;
        }
        let Some(kept) = sel.keep.iter().map(|&i| r.candidates.get(i)).collect::<Option<Vec<_>>>() else {
            out.rejected.push(reject(format!("selection index out of range for {} candidates", r.candidates.len())));
            continue;
        };
        let c = &r.conversation;
        let sample = SftSample {
            prompt: render_guidance_prompt(&c.query, &c.answer, &c.context, k),
            response: join_guidance(&kept),
        };
        match serialize_record(&TrainingRecord::Sft(sample.clone()), k) {
            Ok(line) => {
                out.lines.push(line);
                out.samples.push(sample);
            }
            Err(e) => out.rejected.push(reject(e.to_string())),
        }
    }
    out
}
