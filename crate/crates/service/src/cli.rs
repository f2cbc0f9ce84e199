//! Command-line interface.

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use proguide_core::backend::{FixtureBackend, TextBackend};
use proguide_core::click::{read_examples, train_ce, CeExample};
use proguide_core::dbs::{dbs_decode, TableScorer, TokenScorer};
use proguide_core::metrics::{accuracy, ctr, delta_gsb, latency_table, spearman, GsbCounts};
use proguide_core::synthetic::{keyword_rule_dataset, pseudo_words};
use proguide_core::{AnnotationRecord, Arity, ClickEvent};
use serde::de::DeserializeOwned;
use serde_json::json;

use crate::config::{EngineConfig, CONFIG_ENV};
use crate::corpus::default_scorer;
use crate::distill::{export_sft, generate_distillation_set, CandidateRecord, Conversation, Selection};
use crate::engine::{Backends, Engine};
use crate::http::HttpTextBackend;
use crate::replay::{parse_script, run_script};

pub type CliResult<T = ()> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Debug, Parser)]
#[command(name = "proguide", version, about = "Proactive guidance service and tools")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override the configuration file and environment.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub groups: Option<usize>,
    #[arg(long, global = true)]
    pub beams: Option<usize>,
    #[arg(long, global = true)]
    pub diversity_weight: Option<f64>,
    #[arg(long, global = true)]
    pub ngram_order: Option<usize>,
    #[arg(long, global = true)]
    pub max_length: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub beta: Option<f64>,
    #[arg(long, global = true)]
    pub summary_cap: Option<usize>,
    #[arg(long, global = true)]
    pub scorer_table: Option<PathBuf>,
    #[arg(long, global = true)]
    pub ce_model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub logical_clock: bool,
    #[arg(long, global = true)]
    pub goal_url: Option<String>,
    #[arg(long, global = true)]
    pub answer_url: Option<String>,
    #[arg(long, global = true)]
    pub teacher_url: Option<String>,
    #[arg(long, global = true)]
    pub ce_url: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Decode once and print the candidate matrix as JSON lines.
    Decode {
        /// Space-separated prompt tokens.
        #[arg(long, default_value = "")]
        prompt: String,
    },
    /// Train the click estimator.
    TrainCe {
        /// JSONL examples with `query`, `guidance` and `label`.
        #[arg(long, conflicts_with = "synthetic")]
        data: Option<PathBuf>,
        /// Train on this many keyword-rule examples instead.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Export preference records from the event log.
    BuildPairs {
        #[arg(long, default_value = "one-pair")]
        format: Arity,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher candidate generation and fine-tuning export.
    Distill {
        #[command(subcommand)]
        step: DistillStep,
    },
    /// Compute evaluation metrics from files.
    Eval {
        #[command(subcommand)]
        metric: EvalMetric,
    },
    /// Run a scripted session file.
    Replay {
        #[arg(long)]
        script: PathBuf,
        /// Directory for exports requested by the script.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DistillStep {
    Generate {
        /// JSONL conversations with `id`, `query`, `answer` and optional `context`.
        #[arg(long)]
        conversations: PathBuf,
        /// Fixture teacher responses; the configured teacher URL otherwise.
        #[arg(long)]
        teacher_fixture: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    Export {
        #[arg(long)]
        candidates: PathBuf,
        /// JSONL lines of `{"id": ..., "keep": [indices]}`.
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum EvalMetric {
    /// ΔGSB from a counts object or one good/same/bad judgment per line.
    Gsb { file: PathBuf },
    /// Click-through rate from a JSONL click log.
    Ctr {
        file: PathBuf,
        #[arg(long)]
        turns: usize,
    },
    /// Offline accuracy from JSONL annotation records.
    Acc { file: PathBuf },
    /// Rank correlation of two comma-separated series.
    Spearman { x: String, y: String },
    /// Per-stage latency table from a saved metrics report.
    Latency { file: PathBuf },
}

impl ConfigArgs {
    /// Defaults, then the file, then `PROGUIDE_*` variables, then flags.
    pub fn resolve(&self, env: impl Fn(&str) -> Option<String>) -> CliResult<EngineConfig> {
        let mut c = match &self.config {
            Some(p) => EngineConfig::from_file(p)?,
            None => EngineConfig::default(),
        };
        c.apply_env(env)?;
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.data_dir, c.data_dir);
        set!(self.seed, c.seed);
        set!(self.k, c.k);
        set!(self.groups, c.dbs.num_groups);
        set!(self.beams, c.dbs.beams_per_group);
        set!(self.diversity_weight, c.dbs.diversity_weight);
        set!(self.ngram_order, c.dbs.ngram_order);
        set!(self.max_length, c.dbs.max_length);
        set!(self.lambda, c.lambda);
        set!(self.beta, c.beta);
        set!(self.summary_cap, c.summary_cap);
        if self.scorer_table.is_some() {
            c.scorer_table = self.scorer_table.clone();
        }
        if self.ce_model.is_some() {
            c.ce_model = self.ce_model.clone();
        }
        if self.logical_clock {
            c.logical_clock = true;
        }
        for (flag, slot) in [
            (&self.goal_url, &mut c.endpoints.goal),
            (&self.answer_url, &mut c.endpoints.answer),
            (&self.teacher_url, &mut c.endpoints.teacher),
            (&self.ce_url, &mut c.endpoints.ce),
        ] {
            if flag.is_some() {
                *slot = flag.clone();
            }
        }
        c.validate()?;
        Ok(c)
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1).into()))
        .collect()
}

fn write_jsonl<T: serde::Serialize>(path: &Path, items: &[T]) -> CliResult {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    write_file(path, &text)
}

fn write_file(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn parse_series(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}").into()))
        .collect()
}

fn read_gsb(path: &Path) -> CliResult<GsbCounts> {
    let text = fs::read_to_string(path)?;
    if let Ok(c) = serde_json::from_str::<GsbCounts>(&text) {
        return Ok(c);
    }
    let mut c = GsbCounts::default();
    for (i, line) in text.lines().enumerate() {
        match line.trim().to_ascii_lowercase().as_str() {
            "" => {}
            "good" | "g" => c.good += 1,
            "same" | "s" => c.same += 1,
            "bad" | "b" => c.bad += 1,
            other => return Err(format!("{}:{}: unknown judgment `{other}`", path.display(), i + 1).into()),
        }
    }
    Ok(c)
}

fn decoder_scorer(config: &EngineConfig) -> CliResult<Box<dyn TokenScorer>> {
    Ok(match &config.scorer_table {
        Some(p) => Box::new(TableScorer::from_file(p)?),
        None => Box::new(default_scorer(config.prompt_bonus)?),
    })
}

/// Runs a non-serving subcommand, writing human-readable output to `out`.
pub fn run(config: &EngineConfig, command: &Command, out: &mut dyn Write) -> CliResult {
    match command {
        Command::Serve { .. } => Err("serve must be started from the binary entry point".into()),
        Command::Decode { prompt } => {
            let scorer = decoder_scorer(config)?;
            let tokens = scorer.vocab().encode(prompt);
            let matrix = dbs_decode(scorer.as_ref(), &tokens, &config.dbs)?;
            for (g, row) in matrix.rows.iter().enumerate() {
                for (r, c) in row.iter().enumerate() {
                    let line = json!({
                        "group": g, "rank": r, "text": c.text, "lm_score": c.lm_score,
                        "score": c.score, "forced": c.forced, "padded": c.padded,
                    });
                    writeln!(out, "{line}")?;
                }
            }
            Ok(())
        }
        Command::TrainCe {
            data,
            synthetic,
            out: model_path,
            epochs,
            learning_rate,
        } => {
            let examples: Vec<CeExample> = match (data, synthetic) {
                (Some(p), _) => read_examples(p)?,
                (None, Some(n)) => keyword_rule_dataset(&pseudo_words(60, config.seed), *n, config.seed),
                (None, None) => return Err("train-ce needs --data or --synthetic".into()),
            };
            let mut params = config.ce_training;
            params.seed = config.seed;
            if let Some(e) = epochs {
                params.epochs = *e;
            }
            if let Some(lr) = learning_rate {
                params.learning_rate = *lr;
            }
            let model = train_ce(&examples, params)?;
            model.save(model_path)?;
            let r = &model.report;
            for (e, loss) in r.train_losses.iter().enumerate() {
                writeln!(out, "epoch {e} train_bce {loss:.6}")?;
            }
            if let Some(auc) = r.validation_auc {
                writeln!(out, "validation_auc {auc:.4}")?;
            }
            Ok(())
        }
        Command::BuildPairs { format, out: dir } => {
            let engine = Engine::open(config.clone(), Backends::from_config(config)?)?;
            let (data, meta, summary) = engine.write_export(dir, *format)?;
            writeln!(out, "{}", serde_json::to_string(&summary)?)?;
            writeln!(out, "wrote {} and {}", data.display(), meta.display())?;
            Ok(())
        }
        Command::Distill { step } => match step {
            DistillStep::Generate {
                conversations,
                teacher_fixture,
                n,
                out: path,
            } => {
                let convs: Vec<Conversation> = read_jsonl(conversations)?;
                let timeout = Duration::from_millis(config.endpoints.timeout_ms);
                let teacher: Box<dyn TextBackend> = match (teacher_fixture, &config.endpoints.teacher) {
                    (Some(p), _) => Box::new(FixtureBackend::from_file(p)?),
                    (None, Some(url)) => Box::new(HttpTextBackend::new(url, timeout)),
                    (None, None) => return Err("distill generate needs --teacher-fixture or a teacher URL".into()),
                };
                let records = generate_distillation_set(&convs, teacher.as_ref(), n.unwrap_or(config.distill_n), config.k)?;
                let flagged = records.iter().filter(|r| r.flag.is_some()).count();
                write_jsonl(path, &records)?;
                writeln!(out, "{} records, {flagged} flagged", records.len())?;
                Ok(())
            }
            DistillStep::Export {
                candidates,
                selection,
                out: path,
            } => {
                let records: Vec<CandidateRecord> = read_jsonl(candidates)?;
                let selections: Vec<Selection> = read_jsonl(selection)?;
                let export = export_sft(&records, &selections, config.k);
                let text: String = export.lines.iter().map(|l| format!("{l}\n")).collect();
                write_file(path, &text)?;
                writeln!(out, "{} samples, {} rejected", export.samples.len(), export.rejected.len())?;
                for r in &export.rejected {
                    writeln!(out, "rejected {}: {}", r.id, r.reason)?;
                }
                Ok(())
            }
        },
        Command::Eval { metric } => {
            match metric {
                EvalMetric::Gsb { file } => writeln!(out, "{:.3}", delta_gsb(read_gsb(file)?)?)?,
                EvalMetric::Ctr { file, turns } => {
                    let clicks: Vec<ClickEvent> = read_jsonl(file)?;
                    writeln!(out, "{:.3}", ctr(&clicks, *turns)?)?
                }
                EvalMetric::Acc { file } => {
                    let anns: Vec<AnnotationRecord> = read_jsonl(file)?;
                    writeln!(out, "{:.3}", accuracy(&anns)?)?
                }
                EvalMetric::Spearman { x, y } => writeln!(out, "{:.3}", spearman(&parse_series(x)?, &parse_series(y)?)?)?,
                EvalMetric::Latency { file } => {
                    let report: crate::engine::MetricsReport = serde_json::from_str(&fs::read_to_string(file)?)?;
                    write!(out, "{}", latency_table(&report.latency))?
                }
            }
            Ok(())
        }
        Command::Replay { script, out: dir } => {
            let ops = parse_script(&fs::read_to_string(script)?)?;
            let engine = Engine::open(config.clone(), Backends::from_config(config)?)?;
            let report = run_script(&engine, &ops, dir)?;
            writeln!(
                out,
                "{} sessions, {} turns, {} clicks, {} exports",
                report.sessions.len(),
                report.turns.len(),
                report.clicks,
                report.exports.len()
            )?;
            Ok(())
        }
    }
}

/// Opens the engine and serves HTTP until interrupted.
pub fn serve(config: &EngineConfig, addr: SocketAddr) -> CliResult {
    let engine = Arc::new(Engine::open(config.clone(), Backends::from_config(config)?)?);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(crate::api::serve(engine, addr))?;
    Ok(())
}

