//! Reference training objectives: token-level negative log-likelihood for
//! fine-tuning and the DPO loss with its analytic gradient over a tabular
//! softmax policy. Also the JSONL schemas of the exported training records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dbs::{TokenId, TokenScorer};
use crate::prompt::split_guidance;
use crate::types::{Arity, GuidancePhrase, PreferenceRecord};

pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("target sequence is empty")]
    EmptyTarget,
    #[error("token {0} is outside the vocabulary")]
    UnknownToken(TokenId),
    #[error("no parameter for context `{context}`, candidate `{candidate}`")]
    MissingEntry { context: String, candidate: String },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("item {0} has identical chosen and rejected candidates")]
    IdenticalPair(usize),
    #[error("record does not match its arity: {0}")]
    Arity(String),
    #[error("malformed record: {0}")]
    Malformed(String),
}

/// `-Σ_t log P(y_t | y_<t, x)` under `scorer`.
pub fn sft_loss(scorer: &dyn TokenScorer, input: &[TokenId], target: &[TokenId]) -> Result<f64, ObjectiveError> {
    if target.is_empty() {
        return Err(ObjectiveError::EmptyTarget);
    }
    let v = scorer.vocab().len();
    if let Some(&t) = input.iter().chain(target).find(|&&t| t as usize >= v) {
        return Err(ObjectiveError::UnknownToken(t));
    }
    let mut prefix = input.to_vec();
    let mut loss = 0.0;
    for &t in target {
        loss -= scorer.log_probs(&prefix)[t as usize];
        prefix.push(t);
    }
    Ok(loss)
}

/// Softmax policy over a finite candidate set per context:
/// `log π(y|x) = θ[x,y] - log Σ_y' exp θ[x,y']`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub theta: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Same shape as [`ToyPolicy::theta`].
pub type GradTable = BTreeMap<String, BTreeMap<String, f64>>;

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl ToyPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every context gets the same candidates with θ = 0.
    pub fn uniform<C: AsRef<str>, Y: AsRef<str>>(contexts: &[C], candidates: &[Y]) -> Self {
        let mut p = Self::new();
        for c in contexts {
            for y in candidates {
                p.set(c.as_ref(), y.as_ref(), 0.0);
            }
        }
        p
    }

    pub fn set(&mut self, context: &str, candidate: &str, value: f64) {
        self.theta
            .entry(context.to_owned())
            .or_default()
            .insert(candidate.to_owned(), value);
    }

    pub fn get(&self, context: &str, candidate: &str) -> Option<f64> {
        self.theta.get(context)?.get(candidate).copied()
    }

    fn row(&self, context: &str, candidate: &str) -> Result<&BTreeMap<String, f64>, ObjectiveError> {
        self.theta
            .get(context)
            .filter(|r| r.contains_key(candidate))
            .ok_or_else(|| ObjectiveError::MissingEntry {
                context: context.to_owned(),
                candidate: candidate.to_owned(),
            })
    }

    pub fn log_prob(&self, context: &str, candidate: &str) -> Result<f64, ObjectiveError> {
        let row = self.row(context, candidate)?;
        Ok(row[candidate] - log_sum_exp(row.values().copied()))
    }

    pub fn prob(&self, context: &str, candidate: &str) -> Result<f64, ObjectiveError> {
        self.log_prob(context, candidate).map(f64::exp)
    }

    /// Gradient step `θ -= lr * grad`.
    pub fn step(&mut self, grad: &GradTable, lr: f64) {
        for (x, row) in grad {
            if let Some(theta_row) = self.theta.get_mut(x) {
                for (y, g) in row {
                    if let Some(t) = theta_row.get_mut(y) {
                        *t -= lr * g;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpoItem {
    pub context: String,
    pub chosen: String,
    pub rejected: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoBatch {
    pub items: Vec<DpoItem>,
    pub beta: f64,
}

impl DpoBatch {
    fn validate(&self) -> Result<(), ObjectiveError> {
        if self.items.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        if !(self.beta > 0.0) {
            return Err(ObjectiveError::Beta(self.beta));
        }
        if let Some(i) = self.items.iter().position(|it| it.chosen == it.rejected) {
            return Err(ObjectiveError::IdenticalPair(i));
        }
        Ok(())
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    crate::click::logistic(t)
}

/// β-scaled difference of policy/reference log-ratios for one item.
fn margin(policy: &ToyPolicy, reference: &ToyPolicy, item: &DpoItem, beta: f64) -> Result<f64, ObjectiveError> {
    let w = policy.log_prob(&item.context, &item.chosen)? - reference.log_prob(&item.context, &item.chosen)?;
    let l = policy.log_prob(&item.context, &item.rejected)? - reference.log_prob(&item.context, &item.rejected)?;
    Ok(beta * (w - l))
}

/// Mean of `-log σ(margin)` over the batch.
pub fn dpo_loss(policy: &ToyPolicy, reference: &ToyPolicy, batch: &DpoBatch) -> Result<f64, ObjectiveError> {
    batch.validate()?;
    let mut total = 0.0;
    for item in &batch.items {
        total += softplus(-margin(policy, reference, item, batch.beta)?);
    }
    Ok(total / batch.items.len() as f64)
}

/// Analytic gradient of [`dpo_loss`] with respect to the policy parameters.
///
/// With `s = σ(-margin)` each item contributes
/// `-(β s / N) * (∂ log π(y_w|x) - ∂ log π(y_l|x))`, where
/// `∂ log π(y|x) / ∂θ[x,y'] = [y = y'] - π(y'|x)`.
pub fn dpo_grad(policy: &ToyPolicy, reference: &ToyPolicy, batch: &DpoBatch) -> Result<GradTable, ObjectiveError> {
    batch.validate()?;
    let mut grad: GradTable = policy
        .theta
        .iter()
        .map(|(x, row)| (x.clone(), row.keys().map(|y| (y.clone(), 0.0)).collect()))
        .collect();
    let n = batch.items.len() as f64;
    for item in &batch.items {
        let s = sigmoid(-margin(policy, reference, item, batch.beta)?);
        let coeff = -batch.beta * s / n;
        let row = policy.row(&item.context, &item.chosen)?;
        let log_z = log_sum_exp(row.values().copied());
        let g_row = grad.get_mut(&item.context).expect("shape copied from policy");
        for (y, theta) in row {
            let pi = (theta - log_z).exp();
            let d_w = f64::from(u8::from(*y == item.chosen)) - pi;
            let d_l = f64::from(u8::from(*y == item.rejected)) - pi;
            *g_row.get_mut(y).expect("shape copied from policy") += coeff * (d_w - d_l);
        }
    }
    Ok(grad)
}

/// DPO hyperparameters carried as export metadata only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoTrainingMeta {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for DpoTrainingMeta {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            learning_rate: 1e-6,
            batch_size: 16,
            epochs: 2,
        }
    }
}

/// A fine-tuning sample: prompt and `k` newline-joined phrases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftSample {
    pub prompt: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainingRecord {
    Sft(SftSample),
    Preference(PreferenceRecord),
}

#[derive(Serialize)]
struct PairLine<'a> {
    prompt: &'a str,
    chosen: &'a str,
    rejected: &'a str,
}

fn check_arity(record: &TrainingRecord, k: usize) -> Result<(), ObjectiveError> {
    match record {
        TrainingRecord::Sft(s) => {
            let n = s.response.split('\n').count();
            if n != k || split_guidance(&s.response).len() != k {
                return Err(ObjectiveError::Arity(format!("response has {n} phrases, expected {k}")));
            }
            Ok(())
        }
        TrainingRecord::Preference(p) => p.check(k).map_err(ObjectiveError::Arity),
    }
}

/// One JSONL line (without the trailing newline). `k` is the guidance arity
/// that SFT responses and `k`-pair sides must have.
pub fn serialize_record(record: &TrainingRecord, k: usize) -> Result<String, ObjectiveError> {
    check_arity(record, k)?;
    let line = match record {
        TrainingRecord::Sft(s) => serde_json::to_string(s),
        TrainingRecord::Preference(p) => serde_json::to_string(&PairLine {
            prompt: &p.input,
            chosen: &p.chosen,
            rejected: &p.rejected,
        }),
    };
    line.map_err(|e| ObjectiveError::Malformed(e.to_string()))
}

/// Inverse of [`serialize_record`]. Pair arity is inferred from the content:
/// sides containing newlines are `k`-pair, single phrases are one-pair.
pub fn parse_record(line: &str) -> Result<TrainingRecord, ObjectiveError> {
    let value: Value = serde_json::from_str(line).map_err(|e| ObjectiveError::Malformed(e.to_string()))?;
    let field = |key: &str| -> Result<String, ObjectiveError> {
        value
            .get(key)
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| ObjectiveError::Malformed(format!("missing string `{key}`")))
    };
    let prompt = field("prompt")?;
    if value.get("response").is_some() {
        return Ok(TrainingRecord::Sft(SftSample {
            prompt,
            response: field("response")?,
        }));
    }
    let chosen = field("chosen")?;
    let rejected = field("rejected")?;
    let arity = if chosen.contains('\n') || rejected.contains('\n') {
        Arity::KPair
    } else {
        Arity::OnePair
    };
    Ok(TrainingRecord::Preference(PreferenceRecord {
        input: prompt,
        chosen,
        rejected,
        arity,
    }))
}

/// One-pair records for a clicked turn: the clicked phrase against each
/// unclicked sibling, in serving order.
pub fn one_pair_records(prompt: &str, guidance: &[GuidancePhrase], clicked_index: usize) -> Vec<PreferenceRecord> {
    let Some(clicked) = guidance.get(clicked_index) else {
        return Vec::new();
    };
    guidance
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != clicked_index)
        .map(|(_, g)| PreferenceRecord {
            input: prompt.to_owned(),
            chosen: clicked.text.clone(),
            rejected: g.text.clone(),
            arity: Arity::OnePair,
        })
        .collect()
}
