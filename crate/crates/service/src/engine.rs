//! Per-turn orchestration, click recording, preference export and state
//! recovery from the event log.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use proguide_core::backend::{fnv1a64, BackendError, EchoBackend, TextBackend};
use proguide_core::click::{CeModel, ClickScorer};
use proguide_core::dbs::{dbs_decode, CandidateMatrix, DbsError, TokenId, TokenScorer};
use proguide_core::goal::{adapt_goal, apply_reset, GaaOptions, GaaRequest, KeywordShiftBackend};
use proguide_core::metrics::{ctr, latency_report, LatencySample, Stage, StageLatency};
use proguide_core::objectives::{one_pair_records, serialize_record, DpoTrainingMeta, TrainingRecord};
use proguide_core::prompt::render_guidance_prompt;
use proguide_core::rank::{build_k_pair, rank, LexicalSimilarity, RankError, RankInput};
use proguide_core::{
    normalize_text, Arity, ClickEvent, ContextBundle, GuidancePhrase, Origin, Session, Turn,
};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::{ConfigError, EngineConfig};
use crate::corpus::default_scorer;
use crate::events::{EventKind, EventLog, EventRecord, LogError};
use crate::http::{HttpClickScorer, HttpTextBackend};

pub const EVENT_LOG_FILE: &str = "events.jsonl";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{session}` has no turn {turn}")]
    UnknownTurn { session: String, turn: usize },
    #[error("turn {turn} of session `{session}` already has a click")]
    DuplicateClick { session: String, turn: usize },
    #[error("guidance index {index} out of range for {len} phrases")]
    GuidanceIndex { index: usize, len: usize },
    #[error("query is empty")]
    EmptyQuery,
    #[error("answer backend failed: {0}")]
    Answer(BackendError),
    #[error("click scorer failed: {0}")]
    ClickScore(BackendError),
    #[error("decoder produced {found} distinct phrases, {needed} needed")]
    InsufficientGuidance { needed: usize, found: usize },
    #[error("decoder error: {0}")]
    Decode(#[from] DbsError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("rank stage error: {0}")]
    Rank(#[from] RankError),
    #[error("cannot rebuild state from the event log: {0}")]
    Replay(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("backend setup failed: {0}")]
    Setup(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

/// The models a turn depends on.
#[derive(Clone)]
pub struct Backends {
    pub goal: Arc<dyn TextBackend>,
    pub answer: Arc<dyn TextBackend>,
    pub teacher: Option<Arc<dyn TextBackend>>,
    pub scorer: Arc<dyn TokenScorer>,
    pub ce: Arc<dyn ClickScorer>,
}

impl Backends {
    /// Remote endpoints where configured; otherwise the keyword goal tracker,
    /// the echo answerer, the corpus table and a trained or zero click model.
    pub fn from_config(config: &EngineConfig) -> Result<Self, EngineError> {
        let timeout = Duration::from_millis(config.endpoints.timeout_ms);
        let text = |url: &Option<String>| url.as_ref().map(|u| Arc::new(HttpTextBackend::new(u, timeout)));
        let goal: Arc<dyn TextBackend> = match text(&config.endpoints.goal) {
            Some(b) => b,
            None => Arc::new(KeywordShiftBackend::default()),
        };
        let answer: Arc<dyn TextBackend> = match text(&config.endpoints.answer) {
            Some(b) => b,
            None => Arc::new(EchoBackend),
        };
        let teacher = text(&config.endpoints.teacher).map(|b| b as Arc<dyn TextBackend>);
        let scorer: Arc<dyn TokenScorer> = match &config.scorer_table {
            Some(path) => Arc::new(proguide_core::dbs::PromptBiased {
                inner: proguide_core::dbs::TableScorer::from_file(path).map_err(|e| EngineError::Setup(e.to_string()))?,
                bonus: config.prompt_bonus,
            }),
            None => Arc::new(default_scorer(config.prompt_bonus).map_err(|e| EngineError::Setup(e.to_string()))?),
        };
        let ce: Arc<dyn ClickScorer> = match (&config.endpoints.ce, &config.ce_model) {
            (Some(url), _) => Arc::new(HttpClickScorer::new(url, timeout)),
            (None, Some(path)) => Arc::new(CeModel::load(path).map_err(|e| EngineError::Setup(e.to_string()))?),
            (None, None) => {
                tracing::warn!("no click model configured; every candidate scores 0.5");
                Arc::new(CeModel::zero())
            }
        };
        Ok(Self {
            goal,
            answer,
            teacher,
            scorer,
            ce,
        })
    }
}

/// Start and end of a stage, in milliseconds from the start of the turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start_ms: f64,
    pub end_ms: f64,
}

impl Interval {
    fn between(origin: Instant, start: Instant, end: Instant) -> Self {
        Self {
            start_ms: (start - origin).as_secs_f64() * 1e3,
            end_ms: (end - origin).as_secs_f64() * 1e3,
        }
    }

    pub fn duration_ms(&self) -> f64 {
        self.end_ms - self.start_ms
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start_ms < other.end_ms && other.start_ms < self.end_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTimings {
    pub gaa: Option<Interval>,
    pub answer: Interval,
    pub decode: Interval,
    pub ce: Interval,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutput {
    pub session_id: String,
    pub turn_index: usize,
    pub answer: String,
    pub guidance: Vec<GuidancePhrase>,
    pub context: ContextBundle,
    pub timings: TurnTimings,
}

/// Everything the engine knows about one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session: Session,
    /// Scored candidate matrix per turn index.
    pub matrices: BTreeMap<usize, CandidateMatrix>,
}

#[derive(Serialize, Deserialize)]
struct SessionPayload {
    id: String,
}

#[derive(Serialize, Deserialize)]
struct TurnPayload {
    session_id: String,
    turn: Turn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    matrix: Option<CandidateMatrix>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub format: Arity,
    pub clicked_turns: usize,
    pub emitted: usize,
    pub skipped: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Export {
    /// JSONL lines without trailing newlines.
    pub lines: Vec<String>,
    pub summary: ExportSummary,
}

impl Export {
    pub fn to_jsonl(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMetadata {
    pub summary: ExportSummary,
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
    pub dpo: DpoTrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sessions: usize,
    pub turns: usize,
    pub clicked_turns: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ctr: Option<f64>,
    pub latency: BTreeMap<Stage, StageLatency>,
}

/// Deterministic session id for the `n`-th session under `seed`.
pub fn session_id(seed: u64, n: u64) -> String {
    format!("s-{:016x}", fnv1a64(format!("{seed}:{n}").as_bytes()))
}

/// Lowercased word tokens of the prompt followed by EOS.
pub fn encode_prompt(scorer: &dyn TokenScorer, prompt: &str) -> Vec<TokenId> {
    let words: String = prompt
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    let vocab = scorer.vocab();
    let mut tokens = vocab.encode(&words);
    tokens.push(vocab.eos());
    tokens
}

/// Fills in the click probability of every candidate.
pub fn score_matrix(matrix: &mut CandidateMatrix, query: &str, ce: &dyn ClickScorer) -> Result<(), BackendError> {
    let mut cache: HashMap<String, f64> = HashMap::new();
    for c in matrix.iter_mut() {
        let p = match cache.get(&c.text) {
            Some(&p) => p,
            None => {
                let p = ce.probability(query, &c.text)?;
                cache.insert(c.text.clone(), p);
                p
            }
        };
        c.ce_score = Some(p);
    }
    Ok(())
}

/// The `k` distinct non-empty phrases with the highest click scores; ties go
/// to the earlier matrix position (group, then rank). Phrases that repeat the
/// query are skipped.
pub fn select_guidance(matrix: &CandidateMatrix, query: &str, k: usize) -> Result<Vec<GuidancePhrase>, EngineError> {
    let query = normalize_text(query);
    let mut best: Vec<(String, f64)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for c in matrix.iter().filter(|c| !c.padded) {
        let key = normalize_text(&c.text);
        if key.is_empty() || key == query {
            continue;
        }
        let ce = c.ce_score.unwrap_or(0.0);
        match index.get(&key) {
            Some(&i) if best[i].1 >= ce => {}
            Some(&i) => best[i].1 = ce,
            None => {
                index.insert(key, best.len());
                best.push((c.text.clone(), ce));
            }
        }
    }
    if best.len() < k {
        return Err(EngineError::InsufficientGuidance {
            needed: k,
            found: best.len(),
        });
    }
    let mut order: Vec<usize> = (0..best.len()).collect();
    order.sort_by(|&a, &b| best[b].1.total_cmp(&best[a].1).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .map(|i| GuidancePhrase::new(best[i].0.clone(), Origin::Decoded).with_score(best[i].1))
        .collect())
}

pub struct Engine {
    config: EngineConfig,
    backends: Backends,
    log: EventLog,
    sessions: RwLock<BTreeMap<String, Arc<Mutex<SessionState>>>>,
    created: AtomicU64,
    latencies: Mutex<Vec<LatencySample>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

impl Engine {
    /// Opens the event log under the configured data directory and rebuilds
    /// the session state it records.
    pub fn open(config: EngineConfig, backends: Backends) -> Result<Self, EngineError> {
        config.validate()?;
        let (log, records) = EventLog::open(config.data_dir.join(EVENT_LOG_FILE), config.logical_clock)?;
        let engine = Self {
            config,
            backends,
            log,
            sessions: RwLock::new(BTreeMap::new()),
            created: AtomicU64::new(0),
            latencies: Mutex::new(Vec::new()),
        };
        for r in &records {
            engine.apply(r)?;
        }
        tracing::info!(events = records.len(), sessions = engine.created.load(Ordering::SeqCst), "state restored");
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn log_path(&self) -> &Path {
        self.log.path()
    }

    fn apply(&self, record: &EventRecord) -> Result<(), EngineError> {
        let bad = |m: String| EngineError::Replay(format!("event {}: {m}", record.seq));
        match record.kind {
            EventKind::Session => {
                let p: SessionPayload = serde_json::from_value(record.payload.clone()).map_err(|e| bad(e.to_string()))?;
                let mut sessions = self.sessions.write().unwrap_or_else(|e| e.into_inner());
                if sessions.contains_key(&p.id) {
                    return Err(bad(format!("session {} created twice", p.id)));
                }
                sessions.insert(
                    p.id.clone(),
                    Arc::new(Mutex::new(SessionState {
                        session: Session::new(p.id),
                        matrices: BTreeMap::new(),
                    })),
                );
                self.created.fetch_add(1, Ordering::SeqCst);
            }
            EventKind::Turn => {
                let p: TurnPayload = serde_json::from_value(record.payload.clone()).map_err(|e| bad(e.to_string()))?;
                let state = self.session(&p.session_id).map_err(|e| bad(e.to_string()))?;
                let mut state = lock(&state);
                if p.turn.index != state.session.next_round() {
                    return Err(bad(format!("turn {} out of order", p.turn.index)));
                }
                Self::apply_turn(&mut state, p.turn, p.matrix);
            }
            EventKind::Click => {
                let c: ClickEvent = serde_json::from_value(record.payload.clone()).map_err(|e| bad(e.to_string()))?;
                let state = self.session(&c.session_id).map_err(|e| bad(e.to_string()))?;
                let mut state = lock(&state);
                let turn = state
                    .session
                    .turn_mut(c.turn_index)
                    .ok_or_else(|| bad(format!("click on missing turn {}", c.turn_index)))?;
                turn.clicked_index = Some(c.guidance_index);
            }
            EventKind::Export | EventKind::Error => {}
        }
        Ok(())
    }

    fn apply_turn(state: &mut SessionState, turn: Turn, matrix: Option<CandidateMatrix>) {
        state.session.current_summary = turn.context.summary.clone();
        if let Some(m) = matrix {
            state.matrices.insert(turn.index, m);
        }
        state.session.turns.push(turn);
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>, EngineError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| EngineError::UnknownSession(id.to_owned()))
    }

    fn log_error(&self, session: &str, turn: usize, stage: &str, message: &str) {
        let payload = json!({"session_id": session, "turn_index": turn, "stage": stage, "message": message});
        if let Err(e) = self.log.append(EventKind::Error, payload) {
            tracing::error!(error = %e, "cannot record error event");
        }
    }

    pub fn create_session(&self) -> Result<String, EngineError> {
        let mut sessions = self.sessions.write().unwrap_or_else(|e| e.into_inner());
        let mut n = self.created.load(Ordering::SeqCst);
        let mut id = session_id(self.config.seed, n);
        while sessions.contains_key(&id) {
            n += 1;
            id = session_id(self.config.seed, n);
        }
        self.log.append(EventKind::Session, serde_json::to_value(SessionPayload { id: id.clone() }).unwrap())?;
        sessions.insert(
            id.clone(),
            Arc::new(Mutex::new(SessionState {
                session: Session::new(id.clone()),
                matrices: BTreeMap::new(),
            })),
        );
        self.created.store(n + 1, Ordering::SeqCst);
        Ok(id)
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect()
    }

    pub fn get_session(&self, id: &str) -> Result<Session, EngineError> {
        let state = self.session(id)?;
        let session = lock(&state).session.clone();
        Ok(session)
    }

    pub fn session_state(&self, id: &str) -> Result<SessionState, EngineError> {
        let state = self.session(id)?;
        let snapshot = lock(&state).clone();
        Ok(snapshot)
    }

    /// Every session's state, ordered by id.
    pub fn snapshot(&self) -> Vec<SessionState> {
        let sessions: Vec<_> = self.sessions.read().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        sessions.iter().map(|s| lock(s).clone()).collect()
    }

    /// Runs one round: goal tracking (from round 2) alongside the answer
    /// call, then prompt assembly, diverse decoding, click scoring and top-`k`
    /// selection. The turn is logged before it becomes visible.
    pub fn handle_turn(&self, session_id: &str, query: &str) -> Result<TurnOutput, EngineError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        let state = self.session(session_id)?;
        let mut state = lock(&state);
        let origin = Instant::now();
        let round = state.session.next_round();
        let previous_pair = state.session.turns.last().map(|t| (t.query.clone(), t.answer.clone()));
        let carried = state.session.current_summary.clone();

        let call_answer = || {
            let start = Instant::now();
            let r = self.backends.answer.complete(query);
            (r, Interval::between(origin, start, Instant::now()))
        };
        let (answer, answer_iv, gaa) = if round == 1 {
            let (a, iv) = call_answer();
            (a, iv, None)
        } else {
            let request = GaaRequest::for_round(round, query, previous_pair, &carried);
            let options = GaaOptions {
                retries: self.config.gaa_retries,
                summary_cap: self.config.summary_cap,
            };
            thread::scope(|s| {
                let goal = s.spawn(|| {
                    let start = Instant::now();
                    let r = adapt_goal(&request, self.backends.goal.as_ref(), options);
                    (r, Interval::between(origin, start, Instant::now()))
                });
                let (a, iv) = call_answer();
                let g = goal.join().map_err(|_| EngineError::Internal("goal tracker panicked".into()));
                (a, iv, Some(g))
            })
        };
        let answer = match answer {
            Ok(a) => a,
            Err(e) => {
                self.log_error(session_id, round, "answer", &e.to_string());
                return Err(EngineError::Answer(e));
            }
        };
        let (context, gaa_iv) = match gaa {
            None => (ContextBundle::empty(), None),
            Some(joined) => {
                let (outcome, iv) = joined?;
                let outcome = outcome.map_err(|e| EngineError::Internal(e.to_string()))?;
                if let Some(f) = &outcome.failure {
                    self.log_error(session_id, round, "gaa", &format!("{f:?}"));
                }
                (apply_reset(outcome.bundle), Some(iv))
            }
        };

        let prompt = render_guidance_prompt(query, &answer, &context, self.config.k);
        let decode_start = Instant::now();
        let tokens = encode_prompt(self.backends.scorer.as_ref(), &prompt);
        let mut matrix = dbs_decode(self.backends.scorer.as_ref(), &tokens, &self.config.dbs)?;
        let ce_start = Instant::now();
        if let Err(e) = score_matrix(&mut matrix, query, self.backends.ce.as_ref()) {
            self.log_error(session_id, round, "ce", &e.to_string());
            return Err(EngineError::ClickScore(e));
        }
        let ce_end = Instant::now();
        let guidance = match select_guidance(&matrix, query, self.config.k) {
            Ok(g) => g,
            Err(e) => {
                self.log_error(session_id, round, "select", &e.to_string());
                return Err(e);
            }
        };

        let turn = Turn {
            index: round,
            query: query.to_owned(),
            answer: answer.clone(),
            context: context.clone(),
            guidance: guidance.clone(),
            clicked_index: None,
        };
        let payload = TurnPayload {
            session_id: session_id.to_owned(),
            turn,
            matrix: self.config.persist_matrix.then_some(matrix),
        };
        self.log.append(
            EventKind::Turn,
            serde_json::to_value(&payload).map_err(|e| EngineError::Internal(e.to_string()))?,
        )?;
        Self::apply_turn(&mut state, payload.turn, payload.matrix);
        drop(state);

        let timings = TurnTimings {
            gaa: gaa_iv,
            answer: answer_iv,
            decode: Interval::between(origin, decode_start, ce_start),
            ce: Interval::between(origin, ce_start, ce_end),
            total_ms: ms(origin.elapsed()),
        };
        self.record_latency(&timings);
        Ok(TurnOutput {
            session_id: session_id.to_owned(),
            turn_index: round,
            answer,
            guidance,
            context,
            timings,
        })
    }

    fn record_latency(&self, t: &TurnTimings) {
        let mut samples = lock(&self.latencies);
        if let Some(g) = t.gaa {
            samples.push(LatencySample { stage: Stage::Gaa, duration_ms: g.duration_ms() });
        }
        for (stage, iv) in [(Stage::Answer, t.answer), (Stage::Decode, t.decode), (Stage::Ce, t.ce)] {
            samples.push(LatencySample { stage, duration_ms: iv.duration_ms() });
        }
        samples.push(LatencySample { stage: Stage::Total, duration_ms: t.total_ms });
    }

    pub fn latency_samples(&self) -> Vec<LatencySample> {
        lock(&self.latencies).clone()
    }

    pub fn record_click(&self, session_id: &str, turn_index: usize, guidance_index: usize) -> Result<ClickEvent, EngineError> {
        let state = self.session(session_id)?;
        let mut state = lock(&state);
        let turn = state.session.turn(turn_index).ok_or_else(|| EngineError::UnknownTurn {
            session: session_id.to_owned(),
            turn: turn_index,
        })?;
        if turn.clicked_index.is_some() {
            return Err(EngineError::DuplicateClick {
                session: session_id.to_owned(),
                turn: turn_index,
            });
        }
        if guidance_index >= turn.guidance.len() {
            return Err(EngineError::GuidanceIndex {
                index: guidance_index,
                len: turn.guidance.len(),
            });
        }
        let mut event = ClickEvent {
            session_id: session_id.to_owned(),
            turn_index,
            guidance_index,
            timestamp: 0,
        };
        self.log.append_with(EventKind::Click, |ts| {
            event.timestamp = ts;
            serde_json::to_value(&event).unwrap_or_default()
        })?;
        if let Some(t) = state.session.turn_mut(turn_index) {
            t.clicked_index = Some(guidance_index);
        }
        Ok(event)
    }

    fn pair_seed(&self, session: &str, turn: usize) -> u64 {
        self.config.seed ^ fnv1a64(format!("{session}:{turn}").as_bytes())
    }

    fn matrix_for(&self, state: &SessionState, turn: &Turn) -> Result<CandidateMatrix, EngineError> {
        if let Some(m) = state.matrices.get(&turn.index) {
            return Ok(m.clone());
        }
        let prompt = render_guidance_prompt(&turn.query, &turn.answer, &turn.context, self.config.k);
        let tokens = encode_prompt(self.backends.scorer.as_ref(), &prompt);
        let mut m = dbs_decode(self.backends.scorer.as_ref(), &tokens, &self.config.dbs)?;
        score_matrix(&mut m, &turn.query, self.backends.ce.as_ref()).map_err(EngineError::ClickScore)?;
        Ok(m)
    }

    /// Preference records for every clicked turn, sessions in id order.
    pub fn export_preferences(&self, format: Arity) -> Result<Export, EngineError> {
        let k = self.config.k;
        let mut lines = Vec::new();
        let mut summary = ExportSummary {
            format,
            clicked_turns: 0,
            emitted: 0,
            skipped: BTreeMap::new(),
        };
        for state in self.snapshot() {
            for turn in &state.session.turns {
                let (Some(ci), Some(clicked)) = (turn.clicked_index, turn.clicked()) else {
                    continue;
                };
                summary.clicked_turns += 1;
                let records = match format {
                    Arity::OnePair => {
                        let prompt = render_guidance_prompt(&turn.query, &turn.answer, &turn.context, k);
                        one_pair_records(&prompt, &turn.guidance, ci)
                    }
                    Arity::KPair => {
                        let input = RankInput {
                            matrix: self.matrix_for(&state, turn)?,
                            clicked: clicked.clone(),
                            query: turn.query.clone(),
                            k,
                            lambda: self.config.lambda,
                            seed: self.pair_seed(&state.session.id, turn.index),
                        };
                        let outcome = rank(&input, &LexicalSimilarity)?;
                        if let Some(reason) = &outcome.skipped {
                            *summary.skipped.entry(reason.label().to_owned()).or_insert(0) += 1;
                            continue;
                        }
                        vec![build_k_pair(&turn.query, &turn.answer, &turn.context, &outcome, k)?]
                    }
                };
                for r in records {
                    match serialize_record(&TrainingRecord::Preference(r), k) {
                        Ok(line) => {
                            lines.push(line);
                            summary.emitted += 1;
                        }
                        Err(e) => {
                            tracing::warn!(error = %e, "dropping invalid preference record");
                            *summary.skipped.entry("invalid_record".into()).or_insert(0) += 1;
                        }
                    }
                }
            }
        }
        self.log.append(
            EventKind::Export,
            serde_json::to_value(&summary).map_err(|e| EngineError::Internal(e.to_string()))?,
        )?;
        Ok(Export { lines, summary })
    }

    /// Writes `preferences.<format>.jsonl` and its metadata sidecar into
    /// `dir`, returning both paths.
    pub fn write_export(&self, dir: &Path, format: Arity) -> Result<(PathBuf, PathBuf, ExportSummary), EngineError> {
        let export = self.export_preferences(format)?;
        fs::create_dir_all(dir)?;
        let data = dir.join(format!("preferences.{format}.jsonl"));
        let meta = dir.join(format!("preferences.{format}.meta.json"));
        fs::write(&data, export.to_jsonl())?;
        let metadata = ExportMetadata {
            summary: export.summary.clone(),
            k: self.config.k,
            lambda: self.config.lambda,
            seed: self.config.seed,
            dpo: DpoTrainingMeta {
                beta: self.config.beta,
                ..DpoTrainingMeta::default()
            },
        };
        fs::write(&meta, serde_json::to_string_pretty(&metadata).map_err(|e| EngineError::Internal(e.to_string()))?)?;
        Ok((data, meta, export.summary))
    }

    pub fn metrics(&self) -> MetricsReport {
        let states = self.snapshot();
        let turns: usize = states.iter().map(|s| s.session.turns.len()).sum();
        let clicks: Vec<ClickEvent> = states
            .iter()
            .flat_map(|s| {
                s.session.turns.iter().filter_map(|t| {
                    t.clicked_index.map(|g| ClickEvent {
                        session_id: s.session.id.clone(),
                        turn_index: t.index,
                        guidance_index: g,
                        timestamp: 0,
                    })
                })
            })
            .collect();
        MetricsReport {
            sessions: states.len(),
            turns,
            clicked_turns: clicks.len(),
            ctr: ctr(&clicks, turns).ok(),
            latency: latency_report(&self.latency_samples()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proguide_core::dbs::ScoredCandidate;

    fn cand(text: &str, ce: f64, padded: bool) -> ScoredCandidate {
        ScoredCandidate {
            tokens: vec![],
            text: text.into(),
            lm_score: -1.0,
            penalty_total: 0.0,
            score: -1.0,
            forced: false,
            padded,
            ce_score: Some(ce),
        }
    }

    #[test]
    fn selection_is_distinct_and_ce_ordered() {
        let m = CandidateMatrix {
            num_groups: 2,
            beams_per_group: 3,
            rows: vec![
                vec![cand("a b", 0.2, false), cand("c", 0.9, false), cand("c", 0.9, true)],
                vec![cand("A B", 0.6, false), cand("", 1.0, false), cand("d", 0.6, false), cand("q", 1.0, false)],
            ],
        };
        let g = select_guidance(&m, "Q", 3).unwrap();
        let texts: Vec<&str> = g.iter().map(|p| p.text.as_str()).collect();
        assert_eq!(texts, vec!["c", "a b", "d"]);
        assert_eq!(g[1].ce_score, Some(0.6));
        assert!(matches!(
            select_guidance(&m, "q", 4),
            Err(EngineError::InsufficientGuidance { needed: 4, found: 3 })
        ));
    }

    #[test]
    fn session_ids_are_seeded() {
        assert_eq!(session_id(1, 0), session_id(1, 0));
        assert_ne!(session_id(1, 0), session_id(1, 1));
        assert_ne!(session_id(1, 0), session_id(2, 0));
    }

    #[test]
    fn intervals_overlap() {
        let a = Interval { start_ms: 0.0, end_ms: 10.0 };
        assert!(a.overlaps(&Interval { start_ms: 5.0, end_ms: 15.0 }));
        assert!(!a.overlaps(&Interval { start_ms: 10.0, end_ms: 15.0 }));
    }
}
