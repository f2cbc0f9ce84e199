#![allow(dead_code)]

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use proguide_core::backend::{BackendError, TextBackend};
use proguide_core::click::train_ce;
use proguide_core::goal::extract_prompt_slots;
use proguide_core::synthetic::{keyword_rule_dataset, pseudo_words};
use proguide_service::config::EngineConfig;
use proguide_service::engine::{Backends, Engine};
use proguide_service::replay::{parse_script, run_script};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Local stand-in backends, logical clock, data under `dir`.
pub fn config(dir: &Path) -> EngineConfig {
    EngineConfig {
        data_dir: dir.to_owned(),
        logical_clock: true,
        ..EngineConfig::default()
    }
}

pub fn open(config: &EngineConfig) -> Engine {
    Engine::open(config.clone(), Backends::from_config(config).unwrap()).unwrap()
}

pub fn open_with(config: &EngineConfig, goal: Arc<dyn TextBackend>, answer: Arc<dyn TextBackend>) -> Engine {
    let mut b = Backends::from_config(config).unwrap();
    b.goal = goal;
    b.answer = answer;
    Engine::open(config.clone(), b).unwrap()
}

/// Click model trained on the keyword-rule data, saved under `dir`.
pub fn trained_ce(dir: &Path) -> PathBuf {
    let data = keyword_rule_dataset(&pseudo_words(60, 0), 2000, 0);
    let model = train_ce(&data, Default::default()).unwrap();
    let path = dir.join("ce.json");
    model.save(&path).unwrap();
    path
}

pub struct ReplayArtifacts {
    pub log: Vec<u8>,
    pub one_pair: Vec<u8>,
    pub k_pair: Vec<u8>,
    pub k_pair_emitted: usize,
}

/// Runs the 20-turn script in a fresh data directory under `root`.
pub fn run_replay(root: &Path, ce: &Path) -> ReplayArtifacts {
    let data = root.join("data");
    let out = root.join("out");
    let config = EngineConfig {
        ce_model: Some(ce.to_owned()),
        ..self::config(&data)
    };
    let engine = open(&config);
    let ops = parse_script(&fs::read_to_string(fixture("replay_20.jsonl")).unwrap()).unwrap();
    let report = run_script(&engine, &ops, &out).unwrap();
    assert_eq!(report.turns.len(), 20);
    ReplayArtifacts {
        log: fs::read(engine.log_path()).unwrap(),
        one_pair: fs::read(out.join("preferences.one-pair.jsonl")).unwrap(),
        k_pair: fs::read(out.join("preferences.k-pair.jsonl")).unwrap(),
        k_pair_emitted: report.exports[1].1.emitted,
    }
}

/// Goal tracker whose shift flag is looked up by the current query. The
/// summary names the query it was produced for. Every call records the query
/// and the summary slot it was shown.
pub struct ScriptedGoal {
    pub shifts: HashMap<String, bool>,
    pub seen: Mutex<Vec<(String, Option<String>)>>,
}

impl ScriptedGoal {
    pub fn new(shifts: HashMap<String, bool>) -> Self {
        Self {
            shifts,
            seen: Mutex::new(Vec::new()),
        }
    }
}

impl TextBackend for ScriptedGoal {
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        let slots = extract_prompt_slots(prompt).ok_or_else(|| BackendError::Malformed("no slots".into()))?;
        let q = slots.current_query;
        self.seen.lock().unwrap().push((q.clone(), slots.previous_summary));
        Ok(serde_json::json!({
            "explicitGoalAnalysis": format!("goal of {q}"),
            "goalRelevantSummary": format!("summary after {q}"),
            "detectionSignal": self.shifts.get(&q).copied().unwrap_or(false),
        })
        .to_string())
    }
}

/// Queries from the built-in corpus, in a fixed order.
pub const QUERIES: &[&str] = &[
    "how do index funds work",
    "what are the risks of index funds",
    "what fees do index funds charge",
    "what causes a peanut allergy",
    "how is a food allergy diagnosed",
    "how do i plan a trip to japan",
    "do i need a visa for japan",
    "how do i cook rice on the stove",
    "how do i start running",
    "how do i improve my sleep",
];
