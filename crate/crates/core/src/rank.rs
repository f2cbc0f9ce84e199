//! Rank stage of the generate-rank pipeline: pools decoded candidates across
//! beam groups, selects a diverse preferred set with maximal marginal
//! relevance starting from the real click, samples a dispreferred set scored
//! strictly below it, and assembles `k`-pair preference records.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dbs::CandidateMatrix;
use crate::prompt::{join_guidance, render_guidance_prompt};
use crate::types::{normalize_text, Arity, ContextBundle, GuidancePhrase, PreferenceRecord};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RankError {
    #[error("candidate matrix is empty")]
    EmptyMatrix,
    #[error("candidate at group {group}, rank {rank} has no click score")]
    MissingScore { group: usize, rank: usize },
    #[error("click score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("lambda {0} outside [0, 1]")]
    Lambda(f64),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("outcome was skipped: {0}")]
    Skipped(SkipReason),
    #[error("outcome violates the pair invariants: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum SkipReason {
    PoolTooSmall { needed: usize, available: usize },
    NotEnoughDispreferred { needed: usize, eligible: usize },
}

impl SkipReason {
    /// Short stable label used for skip counters.
    pub fn label(&self) -> &'static str {
        match self {
            SkipReason::PoolTooSmall { .. } => "pool_too_small",
            SkipReason::NotEnoughDispreferred { .. } => "not_enough_dispreferred",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::PoolTooSmall { needed, available } => {
                write!(f, "pool has {available} usable candidates, {needed} needed")
            }
            SkipReason::NotEnoughDispreferred { needed, eligible } => {
                write!(f, "{eligible} candidates score below the preferred set, {needed} needed")
            }
        }
    }
}

/// Pairwise text similarity in `[0, 1]`.
pub trait Similarity {
    fn sim(&self, a: &str, b: &str) -> f64;
}

impl<F: Fn(&str, &str) -> f64> Similarity for F {
    fn sim(&self, a: &str, b: &str) -> f64 {
        self(a, b)
    }
}

/// Term-frequency cosine over word unigrams and bigrams.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalSimilarity;

impl Similarity for LexicalSimilarity {
    fn sim(&self, a: &str, b: &str) -> f64 {
        similarity(a, b)
    }
}

fn term_counts(text: &str) -> BTreeMap<String, f64> {
    let words: Vec<String> = text
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let mut out = BTreeMap::new();
    for w in &words {
        *out.entry(w.clone()).or_insert(0.0) += 1.0;
    }
    for pair in words.windows(2) {
        *out.entry(format!("{} {}", pair[0], pair[1])).or_insert(0.0) += 1.0;
    }
    out
}

/// Cosine similarity of unigram+bigram term-frequency vectors. Zero when
/// either side has no words.
pub fn similarity(a: &str, b: &str) -> f64 {
    let (ta, tb) = (term_counts(a), term_counts(b));
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    if ta == tb {
        return 1.0;
    }
    let dot: f64 = ta.iter().filter_map(|(k, v)| tb.get(k).map(|w| v * w)).sum();
    let na = ta.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = tb.values().map(|v| v * v).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(0.0, 1.0)
}

/// A phrase with its click score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPhrase {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
}

/// A pooled candidate and where it came from in the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub text: String,
    pub ce: f64,
    pub group: usize,
    pub rank: usize,
}

fn checked_score(m: &CandidateMatrix, group: usize, rank: usize) -> Result<f64, RankError> {
    let c = &m.rows[group][rank];
    let s = c.ce_score.ok_or(RankError::MissingScore { group, rank })?;
    if !(0.0..=1.0).contains(&s) {
        return Err(RankError::ScoreOutOfRange(s));
    }
    Ok(s)
}

/// Transposed pooling: column `i` gathers every group's rank-`i` candidate
/// and contributes its highest-scoring member (lowest group on ties).
/// Duplicate texts keep the higher-scoring copy; empty texts are dropped.
/// The pool is ordered by rank.
pub fn group_pool(matrix: &CandidateMatrix) -> Result<Vec<PoolEntry>, RankError> {
    if matrix.is_empty() {
        return Err(RankError::EmptyMatrix);
    }
    let cols = matrix.rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut winners: Vec<PoolEntry> = Vec::new();
    for rank in 0..cols {
        let mut best: Option<PoolEntry> = None;
        for (group, row) in matrix.rows.iter().enumerate() {
            if rank >= row.len() {
                continue;
            }
            let ce = checked_score(matrix, group, rank)?;
            if best.as_ref().map_or(true, |b| ce > b.ce) {
                best = Some(PoolEntry {
                    text: row[rank].text.clone(),
                    ce,
                    group,
                    rank,
                });
            }
        }
        winners.extend(best);
    }
    let mut keep: HashMap<String, usize> = HashMap::new();
    for (i, w) in winners.iter().enumerate() {
        let key = normalize_text(&w.text);
        if key.is_empty() {
            continue;
        }
        match keep.get(&key) {
            Some(&j) if winners[j].ce >= w.ce => {}
            _ => {
                keep.insert(key, i);
            }
        }
    }
    let mut idx: Vec<usize> = keep.into_values().collect();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| winners[i].clone()).collect())
}

fn better_pick(a: (f64, &PoolEntry), b: (f64, &PoolEntry)) -> bool {
    // true when a beats b
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1.ce != b.1.ce {
        return a.1.ce > b.1.ce;
    }
    a.1.text < b.1.text
}

/// Greedy maximal marginal relevance seeded with the clicked phrase.
///
/// Picks `k - 1` pool entries, each maximizing
/// `lambda * ce - (1 - lambda) * max_{s in selected} sim(candidate, s)`,
/// ties going to the higher score and then the lexicographically smaller
/// text. Pool entries equal to the clicked phrase are ignored. Returns the
/// clicked phrase followed by the picks in order.
pub fn mmr_select(
    clicked: &GuidancePhrase,
    pool: &[PoolEntry],
    k: usize,
    lambda: f64,
    sim: &dyn Similarity,
) -> Result<Vec<ScoredPhrase>, SkipReason> {
    let clicked_key = clicked.normalized();
    let mut remaining: Vec<&PoolEntry> = pool
        .iter()
        .filter(|p| normalize_text(&p.text) != clicked_key)
        .collect();
    let needed = k.saturating_sub(1);
    if remaining.len() < needed {
        return Err(SkipReason::PoolTooSmall {
            needed,
            available: remaining.len(),
        });
    }
    let mut selected = vec![ScoredPhrase {
        text: clicked.text.clone(),
        ce: clicked.ce_score,
    }];
    // Running max similarity of each remaining entry to the selected set.
    let mut max_sim: Vec<f64> = remaining.iter().map(|p| sim.sim(&p.text, &clicked.text)).collect();
    for _ in 0..needed {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, p) in remaining.iter().enumerate() {
            let score = lambda * p.ce - (1.0 - lambda) * max_sim[i];
            if i == 0 || better_pick((score, p), (best_score, remaining[best])) {
                best = i;
                best_score = score;
            }
        }
        let pick = remaining.remove(best);
        max_sim.remove(best);
        for (i, p) in remaining.iter().enumerate() {
            max_sim[i] = max_sim[i].max(sim.sim(&p.text, &pick.text));
        }
        selected.push(ScoredPhrase {
            text: pick.text.clone(),
            ce: Some(pick.ce),
        });
    }
    Ok(selected)
}

/// Seeded uniform sample of `k` phrases scoring strictly below
/// `preferred_min_ce`. `None` when fewer than `k` qualify.
pub fn sample_dispreferred(
    unselected: &[ScoredPhrase],
    preferred_min_ce: f64,
    k: usize,
    seed: u64,
) -> Result<Vec<ScoredPhrase>, SkipReason> {
    let mut eligible: Vec<&ScoredPhrase> = unselected
        .iter()
        .filter(|u| u.ce.is_some_and(|c| c < preferred_min_ce))
        .collect();
    if eligible.len() < k {
        return Err(SkipReason::NotEnoughDispreferred {
            needed: k,
            eligible: eligible.len(),
        });
    }
    eligible.sort_by(|a, b| a.text.cmp(&b.text));
    if eligible.len() > k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (picked, _) = eligible.partial_shuffle(&mut rng, k);
        return Ok(picked.iter().map(|p| (*p).clone()).collect());
    }
    Ok(eligible.into_iter().cloned().collect())
}

/// Everything the rank stage needs for one clicked turn.
#[derive(Debug, Clone)]
pub struct RankInput {
    /// Every entry must carry a click score.
    pub matrix: CandidateMatrix,
    pub clicked: GuidancePhrase,
    pub query: String,
    pub k: usize,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub preferred: Vec<ScoredPhrase>,
    pub dispreferred: Vec<ScoredPhrase>,
    pub pool: Vec<PoolEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<SkipReason>,
}

impl RankOutcome {
    /// Lowest click score among preferred phrases other than the click seed.
    pub fn preferred_min_ce(&self) -> f64 {
        self.preferred
            .iter()
            .skip(1)
            .filter_map(|p| p.ce)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn dispreferred_max_ce(&self) -> f64 {
        self.dispreferred
            .iter()
            .filter_map(|p| p.ce)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Disjointness and the strict score separation between the two sides.
    pub fn check(&self, k: usize) -> Result<(), RankError> {
        if let Some(r) = &self.skipped {
            return Err(RankError::Skipped(r.clone()));
        }
        if self.preferred.len() != k || self.dispreferred.len() != k {
            return Err(RankError::Invariant(format!(
                "expected {k}+{k} phrases, got {}+{}",
                self.preferred.len(),
                self.dispreferred.len()
            )));
        }
        for d in &self.dispreferred {
            let key = normalize_text(&d.text);
            if self.preferred.iter().any(|p| normalize_text(&p.text) == key) {
                return Err(RankError::Invariant(format!("`{}` is on both sides", d.text)));
            }
        }
        if self.dispreferred.iter().any(|d| d.ce.is_none()) {
            return Err(RankError::Invariant("dispreferred phrase without score".into()));
        }
        let (lo, hi) = (self.preferred_min_ce(), self.dispreferred_max_ce());
        if hi >= lo {
            return Err(RankError::Invariant(format!(
                "max dispreferred score {hi} is not below min preferred score {lo}"
            )));
        }
        Ok(())
    }
}

/// Distinct non-empty matrix texts not on the preferred side, each with the
/// highest score any copy received.
fn unselected(matrix: &CandidateMatrix, preferred: &[ScoredPhrase]) -> Vec<ScoredPhrase> {
    let taken: Vec<String> = preferred.iter().map(|p| normalize_text(&p.text)).collect();
    let mut best: BTreeMap<String, ScoredPhrase> = BTreeMap::new();
    for c in matrix.iter() {
        let key = normalize_text(&c.text);
        if key.is_empty() || taken.contains(&key) {
            continue;
        }
        let ce = c.ce_score;
        match best.get_mut(&key) {
            Some(e) if e.ce >= ce => {}
            Some(e) => e.ce = ce,
            None => {
                best.insert(
                    key,
                    ScoredPhrase {
                        text: c.text.clone(),
                        ce,
                    },
                );
            }
        }
    }
    best.into_values().collect()
}

/// Runs pooling, MMR selection and dispreferred sampling for one turn.
/// Shortages produce a skipped outcome rather than an error.
pub fn rank(input: &RankInput, sim: &dyn Similarity) -> Result<RankOutcome, RankError> {
    if input.k == 0 {
        return Err(RankError::ZeroK);
    }
    if !(0.0..=1.0).contains(&input.lambda) {
        return Err(RankError::Lambda(input.lambda));
    }
    let pool = group_pool(&input.matrix)?;
    let preferred = match mmr_select(&input.clicked, &pool, input.k, input.lambda, sim) {
        Ok(p) => p,
        Err(reason) => {
            return Ok(RankOutcome {
                preferred: Vec::new(),
                dispreferred: Vec::new(),
                pool,
                skipped: Some(reason),
            })
        }
    };
    let mut outcome = RankOutcome {
        preferred,
        dispreferred: Vec::new(),
        pool,
        skipped: None,
    };
    let rest = unselected(&input.matrix, &outcome.preferred);
    match sample_dispreferred(&rest, outcome.preferred_min_ce(), input.k, input.seed) {
        Ok(d) => outcome.dispreferred = d,
        Err(reason) => outcome.skipped = Some(reason),
    }
    Ok(outcome)
}

/// Assembles the `k`-pair record for a ranked turn.
pub fn build_k_pair(
    query: &str,
    answer: &str,
    context: &ContextBundle,
    outcome: &RankOutcome,
    k: usize,
) -> Result<PreferenceRecord, RankError> {
    outcome.check(k)?;
    let texts = |side: &[ScoredPhrase]| -> Vec<String> { side.iter().map(|p| p.text.clone()).collect() };
    let record = PreferenceRecord {
        input: render_guidance_prompt(query, answer, context, k),
        chosen: join_guidance(&texts(&outcome.preferred)),
        rejected: join_guidance(&texts(&outcome.dispreferred)),
        arity: Arity::KPair,
    };
    record.check(k).map_err(RankError::Invariant)?;
    Ok(record)
}
