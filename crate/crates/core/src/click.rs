//! Click estimator: hashed character n-gram logistic regression over
//! `(query, guidance)` pairs, trained with binary cross-entropy.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{fnv1a64, BackendError};

pub const HASH_BITS: u32 = 18;
pub const HASH_DIM: usize = 1 << HASH_BITS;
/// Probabilities are clamped to `[EPS, 1 - EPS]` inside the loss.
pub const EPS: f64 = 1e-12;

const NGRAM_ORDERS: std::ops::RangeInclusive<usize> = 2..=4;

pub const NS_QUERY: &str = "q";
pub const NS_GUIDANCE: &str = "g";
pub const NS_SHARED: &str = "x";
pub const NS_OVERLAP: &str = "o";

#[derive(Debug, Error)]
pub enum CeError {
    #[error("labels and predictions differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("training data contains only label {0}; both classes are required")]
    SingleClass(u8),
    #[error("invalid hyperparameters: {0}")]
    Hyperparams(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Sparse features sorted by index, without duplicates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureVector(Vec<(u32, f64)>);

impl FeatureVector {
    fn from_map(map: BTreeMap<u32, f64>) -> Self {
        Self(map.into_iter().filter(|(_, v)| *v != 0.0).collect())
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, weights: &[f64]) -> f64 {
        self.0.iter().map(|&(i, v)| weights[i as usize] * v).sum()
    }
}

/// Hash-space index of `key` within `namespace`.
pub fn feature_index(namespace: &str, key: &str) -> u32 {
    let mut bytes = Vec::with_capacity(namespace.len() + key.len() + 1);
    bytes.extend_from_slice(namespace.as_bytes());
    bytes.push(0x1f);
    bytes.extend_from_slice(key.as_bytes());
    (fnv1a64(&bytes) % HASH_DIM as u64) as u32
}

/// Distinct character n-grams of orders 2 to 4, lowercased, with counts.
pub fn char_ngrams(text: &str) -> BTreeMap<String, usize> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    let mut out = BTreeMap::new();
    for n in NGRAM_ORDERS {
        for w in chars.windows(n) {
            *out.entry(w.iter().collect::<String>()).or_insert(0) += 1;
        }
    }
    out
}

fn add_normalized(out: &mut BTreeMap<u32, f64>, namespace: &str, counts: &BTreeMap<String, f64>) {
    let norm = counts.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    for (k, v) in counts {
        *out.entry(feature_index(namespace, k)).or_insert(0.0) += v / norm;
    }
}

/// Query n-grams, guidance n-grams (each L2-normalized in its own namespace),
/// the n-grams shared by both, and per-order overlap ratios.
pub fn featurize(query: &str, guidance: &str) -> FeatureVector {
    let q = char_ngrams(query);
    let g = char_ngrams(guidance);
    let mut out = BTreeMap::new();
    let as_f = |m: &BTreeMap<String, usize>| m.iter().map(|(k, &v)| (k.clone(), v as f64)).collect();
    add_normalized(&mut out, NS_QUERY, &as_f(&q));
    add_normalized(&mut out, NS_GUIDANCE, &as_f(&g));

    let shared: BTreeMap<String, f64> = q
        .keys()
        .filter(|k| g.contains_key(*k))
        .map(|k| (k.clone(), 1.0))
        .collect();
    add_normalized(&mut out, NS_SHARED, &shared);

    for n in NGRAM_ORDERS {
        let qs: BTreeSet<&String> = q.keys().filter(|k| k.chars().count() == n).collect();
        let gs: BTreeSet<&String> = g.keys().filter(|k| k.chars().count() == n).collect();
        let inter = qs.intersection(&gs).count();
        if inter > 0 {
            let union = qs.union(&gs).count();
            *out.entry(feature_index(NS_OVERLAP, &n.to_string())).or_insert(0.0) +=
                inter as f64 / union as f64;
        }
    }
    FeatureVector::from_map(out)
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy. Labels may be soft (any value in `[0, 1]`).
pub fn bce_loss(labels: &[f64], predictions: &[f64]) -> Result<f64, CeError> {
    if labels.len() != predictions.len() {
        return Err(CeError::LengthMismatch(labels.len(), predictions.len()));
    }
    if labels.is_empty() {
        return Err(CeError::Empty);
    }
    let total: f64 = labels
        .iter()
        .zip(predictions)
        .map(|(&y, &p)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok((total / labels.len() as f64).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CeExample {
    pub query: String,
    pub guidance: String,
    pub label: u8,
}

impl CeExample {
    pub fn new(query: impl Into<String>, guidance: impl Into<String>, label: bool) -> Self {
        Self {
            query: query.into(),
            guidance: guidance.into(),
            label: u8::from(label),
        }
    }
}

/// Reads `{"query":…, "guidance":…, "label":0|1}` lines.
pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<CeExample>, CeError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let ex: CeExample = serde_json::from_str(line)?;
        if ex.label > 1 {
            return Err(CeError::Hyperparams(format!("label {} is not 0 or 1", ex.label)));
        }
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CeHyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for CeHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 5,
            seed: 0,
            validation_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: usize,
    pub train_examples: usize,
    pub validation_examples: usize,
    /// Entry 0 is the loss before training, entry `e` after epoch `e`.
    pub train_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub report: TrainingReport,
}

#[derive(Serialize, Deserialize)]
struct CeModelFile {
    dim: usize,
    bias: f64,
    weights: Vec<(u32, f64)>,
    report: TrainingReport,
}

impl CeModel {
    pub fn zero() -> Self {
        Self {
            weights: vec![0.0; HASH_DIM],
            bias: 0.0,
            report: TrainingReport::default(),
        }
    }

    pub fn logit(&self, features: &FeatureVector) -> f64 {
        features.dot(&self.weights) + self.bias
    }

    pub fn predict_features(&self, features: &FeatureVector) -> f64 {
        logistic(self.logit(features)).clamp(EPS, 1.0 - EPS)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CeError> {
        let file = CeModelFile {
            dim: self.weights.len(),
            bias: self.bias,
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
            report: self.report.clone(),
        };
        fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CeError> {
        let file: CeModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if file.dim != HASH_DIM {
            return Err(CeError::Hyperparams(format!(
                "model dimension {} does not match {HASH_DIM}",
                file.dim
            )));
        }
        let mut weights = vec![0.0; file.dim];
        for (i, w) in file.weights {
            *weights
                .get_mut(i as usize)
                .ok_or_else(|| CeError::Hyperparams(format!("weight index {i} out of range")))? = w;
        }
        Ok(Self {
            weights,
            bias: file.bias,
            report: file.report,
        })
    }
}

/// Click probability of `guidance` as a follow-up to `query`.
pub fn predict_ce(model: &CeModel, query: &str, guidance: &str) -> f64 {
    model.predict_features(&featurize(query, guidance))
}

/// Anything that can estimate a click probability.
pub trait ClickScorer: Send + Sync {
    fn probability(&self, query: &str, guidance: &str) -> Result<f64, BackendError>;
}

impl ClickScorer for CeModel {
    fn probability(&self, query: &str, guidance: &str) -> Result<f64, BackendError> {
        Ok(predict_ce(self, query, guidance))
    }
}

impl<T: ClickScorer + ?Sized> ClickScorer for std::sync::Arc<T> {
    fn probability(&self, query: &str, guidance: &str) -> Result<f64, BackendError> {
        (**self).probability(query, guidance)
    }
}

/// A featurized example.
pub type Encoded = (FeatureVector, f64);

pub fn encode(examples: &[CeExample]) -> Vec<Encoded> {
    examples
        .iter()
        .map(|e| (featurize(&e.query, &e.guidance), f64::from(e.label)))
        .collect()
}

/// Mean BCE of `model` over encoded examples.
pub fn dataset_loss(model: &CeModel, data: &[Encoded]) -> Result<f64, CeError> {
    let preds: Vec<f64> = data.iter().map(|(x, _)| model.predict_features(x)).collect();
    let labels: Vec<f64> = data.iter().map(|(_, y)| *y).collect();
    bce_loss(&labels, &preds)
}

/// Gradient of [`dataset_loss`] with respect to the weights (sparse) and bias.
pub fn loss_gradient(model: &CeModel, data: &[Encoded]) -> (BTreeMap<u32, f64>, f64) {
    let n = data.len() as f64;
    let mut grad = BTreeMap::new();
    let mut bias = 0.0;
    for (x, y) in data {
        let err = (logistic(model.logit(x)) - y) / n;
        for &(i, v) in x.entries() {
            *grad.entry(i).or_insert(0.0) += err * v;
        }
        bias += err;
    }
    (grad, bias)
}

/// Area under the ROC curve, ties counted as one half.
pub fn auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(l, _)| **l == 1)
        .map(|(_, r)| r)
        .sum();
    Some((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Plain SGD on the BCE loss.
///
/// Examples are put in canonical order before the seeded shuffle, so the
/// result depends only on the multiset of examples and the hyperparameters.
pub fn train_ce(dataset: &[CeExample], params: CeHyperparams) -> Result<CeModel, CeError> {
    if !(params.learning_rate > 0.0) {
        return Err(CeError::Hyperparams("learning_rate must be > 0".into()));
    }
    if !(0.0..1.0).contains(&params.validation_fraction) {
        return Err(CeError::Hyperparams("validation_fraction must be in [0, 1)".into()));
    }
    if dataset.is_empty() {
        return Err(CeError::Empty);
    }
    if let Some(bad) = dataset.iter().find(|e| e.label > 1) {
        return Err(CeError::Hyperparams(format!("label {} is not 0 or 1", bad.label)));
    }
    let positives = dataset.iter().filter(|e| e.label == 1).count();
    if positives == 0 {
        return Err(CeError::SingleClass(0));
    }
    if positives == dataset.len() {
        return Err(CeError::SingleClass(1));
    }

    let mut ordered = dataset.to_vec();
    ordered.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    ordered.shuffle(&mut rng);
    let n_val = (params.validation_fraction * ordered.len() as f64).round() as usize;
    let n_val = n_val.min(ordered.len() - 1);
    let validation = encode(&ordered[..n_val]);
    let train = encode(&ordered[n_val..]);

    let mut model = CeModel::zero();
    let mut report = TrainingReport {
        epochs: params.epochs,
        train_examples: train.len(),
        validation_examples: validation.len(),
        ..Default::default()
    };
    let record = |model: &CeModel, report: &mut TrainingReport| -> Result<(), CeError> {
        report.train_losses.push(dataset_loss(model, &train)?);
        if !validation.is_empty() {
            report.validation_losses.push(dataset_loss(model, &validation)?);
        }
        Ok(())
    };
    record(&model, &mut report)?;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let (x, y) = &train[i];
            let step = params.learning_rate * (logistic(model.logit(x)) - y);
            for &(j, v) in x.entries() {
                model.weights[j as usize] -= step * v;
            }
            model.bias -= step;
        }
        record(&model, &mut report)?;
        tracing::debug!(
            epoch = epoch + 1,
            train = report.train_losses.last().copied().unwrap_or_default(),
            "click estimator epoch"
        );
    }
    if !validation.is_empty() {
        let labels: Vec<u8> = ordered[..n_val].iter().map(|e| e.label).collect();
        let scores: Vec<f64> = validation.iter().map(|(x, _)| model.logit(x)).collect();
        report.validation_auc = auc(&labels, &scores);
    }
    model.report = report;
    Ok(model)
}
