//! Scripted session driver. A script is JSONL, one operation per line:
//!
//! ```text
//! {"op":"create","session":"a"}
//! {"op":"turn","session":"a","query":"how do index funds work"}
//! {"op":"click","session":"a","turn":1,"guidance":2}
//! {"op":"turn","session":"a"}
//! {"op":"export","format":"k-pair"}
//! ```
//!
//! Session names are script-local labels. A turn without a query asks the
//! phrase clicked on the session's latest turn.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use proguide_core::Arity;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineError, ExportSummary, TurnOutput};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ScriptOp {
    Create {
        session: String,
    },
    Turn {
        session: String,
        #[serde(default)]
        query: Option<String>,
    },
    Click {
        session: String,
        turn: usize,
        guidance: usize,
    },
    Export {
        format: Arity,
    },
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("script line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("script line {line}: unknown session label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("script line {line}: session `{label}` has no clicked phrase to ask")]
    NoClickedPhrase { line: usize, label: String },
    #[error("script line {line}: {source}")]
    Engine {
        line: usize,
        #[source]
        source: EngineError,
    },
    #[error("cannot read script: {0}")]
    Io(#[from] std::io::Error),
}

pub fn parse_script(text: &str) -> Result<Vec<(usize, ScriptOp)>, ReplayError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|op| (i + 1, op))
                .map_err(|e| ReplayError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    /// Script label to engine session id.
    pub sessions: BTreeMap<String, String>,
    pub turns: Vec<TurnOutput>,
    pub clicks: usize,
    pub exports: Vec<(PathBuf, ExportSummary)>,
}

/// Runs `ops` against `engine`. Exports are written into `export_dir`.
pub fn run_script(engine: &Engine, ops: &[(usize, ScriptOp)], export_dir: &Path) -> Result<ReplayReport, ReplayError> {
    let mut report = ReplayReport::default();
    continue_script(engine, ops, export_dir, &mut report)?;
    Ok(report)
}

/// Runs `ops` on top of an earlier partial run whose labels are in `report`.
pub fn continue_script(
    engine: &Engine,
    ops: &[(usize, ScriptOp)],
    export_dir: &Path,
    report: &mut ReplayReport,
) -> Result<(), ReplayError> {
    for (line, op) in ops {
        let line = *line;
        let id_of = |label: &str, report: &ReplayReport| {
            report.sessions.get(label).cloned().ok_or_else(|| ReplayError::UnknownLabel {
                line,
                label: label.to_owned(),
            })
        };
        let engine_err = |source| ReplayError::Engine { line, source };
        match op {
            ScriptOp::Create { session } => {
                let id = engine.create_session().map_err(engine_err)?;
                report.sessions.insert(session.clone(), id);
            }
            ScriptOp::Turn { session, query } => {
                let id = id_of(session, report)?;
                let query = match query {
                    Some(q) => q.clone(),
                    None => {
                        let s = engine.get_session(&id).map_err(engine_err)?;
                        s.turns
                            .last()
                            .and_then(|t| t.clicked())
                            .map(|g| g.text.clone())
                            .ok_or_else(|| ReplayError::NoClickedPhrase {
                                line,
                                label: session.clone(),
                            })?
                    }
                };
                report.turns.push(engine.handle_turn(&id, &query).map_err(engine_err)?);
            }
            ScriptOp::Click { session, turn, guidance } => {
                let id = id_of(session, report)?;
                engine.record_click(&id, *turn, *guidance).map_err(engine_err)?;
                report.clicks += 1;
            }
            ScriptOp::Export { format } => {
                let (path, _, summary) = engine.write_export(export_dir, *format).map_err(engine_err)?;
                report.exports.push((path, summary));
            }
        }
    }
    Ok(())
}
