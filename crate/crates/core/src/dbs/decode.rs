use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::iter;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ngram::ngram_set;
use super::scorer::{TokenId, TokenScorer};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DbsError {
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("prompt token {0} is outside the scorer vocabulary")]
    PromptToken(TokenId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbsConfig {
    pub num_groups: usize,
    pub beams_per_group: usize,
    pub diversity_weight: f64,
    pub ngram_order: usize,
    pub max_length: usize,
}

impl Default for DbsConfig {
    fn default() -> Self {
        Self {
            num_groups: 4,
            beams_per_group: 4,
            diversity_weight: 0.5,
            ngram_order: 2,
            max_length: 32,
        }
    }
}

impl DbsConfig {
    pub fn validate(&self) -> Result<(), DbsError> {
        let bad = |m: &str| Err(DbsError::Config(m.to_owned()));
        if self.num_groups == 0 {
            return bad("num_groups must be >= 1");
        }
        if self.beams_per_group == 0 {
            return bad("beams_per_group must be >= 1");
        }
        if !(self.diversity_weight >= 0.0 && self.diversity_weight.is_finite()) {
            return bad("diversity_weight must be finite and >= 0");
        }
        if self.ngram_order == 0 {
            return bad("ngram_order must be >= 1");
        }
        if self.max_length == 0 {
            return bad("max_length must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    /// Generated tokens, ending in EOS unless `forced`.
    pub tokens: Vec<TokenId>,
    pub text: String,
    /// Sum of the scorer's token log-probabilities.
    pub lm_score: f64,
    /// Sum of the weighted dissimilarity terms applied at each step.
    pub penalty_total: f64,
    /// `lm_score` plus the weighted dissimilarity at the step the candidate
    /// was last selected. Rows are sorted by this value.
    pub score: f64,
    /// Reached `max_length` without emitting EOS.
    pub forced: bool,
    /// Copy of the row's last real candidate, used to fill the row.
    #[serde(default)]
    pub padded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce_score: Option<f64>,
}

/// `num_groups` rows of `beams_per_group` candidates, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateMatrix {
    pub num_groups: usize,
    pub beams_per_group: usize,
    pub rows: Vec<Vec<ScoredCandidate>>,
}

impl CandidateMatrix {
    pub fn get(&self, group: usize, rank: usize) -> Option<&ScoredCandidate> {
        self.rows.get(group).and_then(|r| r.get(rank))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScoredCandidate> {
        self.rows.iter().flatten()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ScoredCandidate> {
        self.rows.iter_mut().flatten()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    lm: f64,
    penalty: f64,
    score: f64,
    forced: bool,
}

fn token_order(a: (&[TokenId], TokenId), b: (&[TokenId], TokenId)) -> Ordering {
    a.0.iter()
        .chain(iter::once(&a.1))
        .cmp(b.0.iter().chain(iter::once(&b.1)))
}

fn by_score_then_tokens(a: &Hyp, b: &Hyp) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// N-grams of the sequences chosen so far at one timestep.
#[derive(Default)]
struct ChosenGrams {
    /// Number of chosen sequences containing each n-gram.
    count: HashMap<Vec<TokenId>, usize>,
    /// Last tokens of the chosen n-grams, keyed by the tokens before it.
    next: HashMap<Vec<TokenId>, Vec<TokenId>>,
}

impl ChosenGrams {
    fn add(&mut self, gram: &[TokenId]) {
        let c = self.count.entry(gram.to_vec()).or_insert(0);
        if *c == 0 {
            let (last, head) = gram.split_last().expect("non-empty n-gram");
            self.next.entry(head.to_vec()).or_default().push(*last);
        }
        *c += 1;
    }

    /// Adds to `extra[v]` the count of every chosen n-gram that appending `v`
    /// to `tokens` would create and that `known` does not already hold.
    fn new_shared(&self, tokens: &[TokenId], n: usize, known: &HashSet<&[TokenId]>, extra: &mut [usize]) {
        let mut gram = Vec::with_capacity(n);
        for len in 1..=n.min(tokens.len() + 1) {
            let head = &tokens[tokens.len() + 1 - len..];
            let Some(lasts) = self.next.get(head) else {
                continue;
            };
            for &v in lasts {
                gram.clear();
                gram.extend_from_slice(head);
                gram.push(v);
                if !known.contains(gram.as_slice()) {
                    extra[v as usize] += self.count[&gram];
                }
            }
        }
    }
}

/// Diverse beam search.
///
/// Groups are decoded in order at every timestep. Group `g` ranks each
/// extension by its cumulative log-probability plus `diversity_weight` times
/// its dissimilarity against the sequences chosen at this timestep by groups
/// `0..g`. EOS-terminated selections move to the group's finished pool;
/// sequences still open at `max_length` are force-terminated. Each row holds
/// the group's best `beams_per_group` finished candidates. Ties are broken by
/// comparing token ids lexicographically. Dissimilarity ignores EOS.
pub fn dbs_decode(
    scorer: &dyn TokenScorer,
    prompt: &[TokenId],
    config: &DbsConfig,
) -> Result<CandidateMatrix, DbsError> {
    config.validate()?;
    let vocab = scorer.vocab();
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= vocab.len()) {
        return Err(DbsError::PromptToken(bad));
    }
    let eos = vocab.eos();
    let n = config.ngram_order;
    let width = config.beams_per_group;
    let w = config.diversity_weight;

    let root = Hyp {
        tokens: Vec::new(),
        lm: 0.0,
        penalty: 0.0,
        score: 0.0,
        forced: false,
    };
    let mut active: Vec<Vec<Hyp>> = vec![vec![root]; config.num_groups];
    let mut finished: Vec<Vec<Hyp>> = vec![Vec::new(); config.num_groups];
    let mut prefix = prompt.to_vec();

    for step in 0..config.max_length {
        let last_step = step + 1 == config.max_length;
        let mut chosen = ChosenGrams::default();
        let mut extra = vec![0usize; vocab.len()];
        for g in 0..config.num_groups {
            if active[g].is_empty() {
                continue;
            }
            // (beam, token, lm, delta, adjusted)
            let mut cands: Vec<(usize, TokenId, f64, f64, f64)> = Vec::new();
            for (bi, beam) in active[g].iter().enumerate() {
                prefix.truncate(prompt.len());
                prefix.extend_from_slice(&beam.tokens);
                let lp = scorer.log_probs(&prefix);
                let known = ngram_set(&beam.tokens, n);
                let base: usize = known.iter().map(|g| chosen.count.get(*g).copied().unwrap_or(0)).sum();
                extra.iter_mut().for_each(|x| *x = 0);
                chosen.new_shared(&beam.tokens, n, &known, &mut extra);
                for (v, &logp) in lp.iter().enumerate() {
                    let shared = if v as TokenId == eos { base } else { base + extra[v] };
                    let delta = -(shared as f64);
                    let lm = beam.lm + logp;
                    cands.push((bi, v as TokenId, lm, delta, lm + w * delta));
                }
            }
            let beams = &active[g];
            let rank = |a: &(usize, TokenId, f64, f64, f64), b: &(usize, TokenId, f64, f64, f64)| {
                b.4.total_cmp(&a.4)
                    .then_with(|| token_order((&beams[a.0].tokens, a.1), (&beams[b.0].tokens, b.1)))
            };
            if cands.len() > width {
                cands.select_nth_unstable_by(width - 1, rank);
                cands.truncate(width);
            }
            cands.sort_by(rank);

            let mut next = Vec::with_capacity(width);
            for (bi, v, lm, delta, adjusted) in cands {
                let parent = &beams[bi];
                let mut tokens = parent.tokens.clone();
                tokens.push(v);
                let content = if v == eos { &tokens[..tokens.len() - 1] } else { &tokens[..] };
                for gram in ngram_set(content, n) {
                    chosen.add(gram);
                }
                let hyp = Hyp {
                    tokens,
                    lm,
                    penalty: parent.penalty + w * delta,
                    score: adjusted,
                    forced: false,
                };
                if v == eos {
                    finished[g].push(hyp);
                } else if last_step {
                    finished[g].push(Hyp { forced: true, ..hyp });
                } else {
                    next.push(hyp);
                }
            }
            active[g] = next;
        }
        if active.iter().all(Vec::is_empty) {
            break;
        }
    }

    let rows = finished
        .into_iter()
        .map(|mut pool| {
            pool.sort_by(by_score_then_tokens);
            pool.truncate(width);
            let mut row: Vec<ScoredCandidate> = pool
                .into_iter()
                .map(|h| ScoredCandidate {
                    text: vocab.decode(&h.tokens),
                    tokens: h.tokens,
                    lm_score: h.lm,
                    penalty_total: h.penalty,
                    score: h.score,
                    forced: h.forced,
                    padded: false,
                    ce_score: None,
                })
                .collect();
            if let Some(last) = row.last().cloned() {
                while row.len() < width {
                    row.push(ScoredCandidate {
                        padded: true,
                        ..last.clone()
                    });
                }
            }
            row
        })
        .collect();
    Ok(CandidateMatrix {
        num_groups: config.num_groups,
        beams_per_group: width,
        rows,
    })
}
