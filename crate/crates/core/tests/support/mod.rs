//! Reference implementations used as test oracles. Everything here is written
//! for clarity: no incremental bookkeeping, every quantity rescanned.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use proguide_core::dbs::{TableScorer, TokenId, TokenScorer, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn trigram_scorer() -> TableScorer {
    TableScorer::from_file(fixture("trigram.tsv")).expect("trigram fixture")
}

/// Pseudo-random scorer: the distribution for a prefix is drawn from a
/// generator seeded by the prefix. Coarse weights make exact score ties
/// common, which exercises the tie-break rule.
pub struct HashScorer {
    vocab: Vocabulary,
    seed: u64,
    coarse: bool,
}

impl HashScorer {
    pub fn new(vocab_size: usize, seed: u64, coarse: bool) -> Self {
        assert!(vocab_size >= 2);
        let mut tokens: Vec<String> = (0..vocab_size - 1).map(|i| format!("t{i}")).collect();
        tokens.push("</s>".into());
        Self {
            vocab: Vocabulary::new(tokens, "</s>").unwrap(),
            seed,
            coarse,
        }
    }
}

impl TokenScorer for HashScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in prefix {
            h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(u64::from(t) + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let w: Vec<f64> = (0..self.vocab.len())
            .map(|_| {
                if self.coarse {
                    f64::from(rng.gen_range(1u32..=3))
                } else {
                    rng.gen_range(0.05..1.0)
                }
            })
            .collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| (x / z).ln()).collect()
    }
}

pub fn distinct_ngrams(seq: &[TokenId], n: usize) -> BTreeSet<Vec<TokenId>> {
    let mut out = BTreeSet::new();
    for len in 1..=n {
        if len > seq.len() {
            break;
        }
        for start in 0..=seq.len() - len {
            out.insert(seq[start..start + len].to_vec());
        }
    }
    out
}

pub fn shared_count(a: &[TokenId], b: &[TokenId], n: usize) -> usize {
    distinct_ngrams(a, n).intersection(&distinct_ngrams(b, n)).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefCandidate {
    pub tokens: Vec<TokenId>,
    pub lm: f64,
    pub penalty: f64,
    pub score: f64,
    pub forced: bool,
    pub padded: bool,
}

fn content(tokens: &[TokenId], eos: TokenId) -> &[TokenId] {
    match tokens.last() {
        Some(&t) if t == eos => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

fn finish_rows(finished: Vec<Vec<RefCandidate>>, width: usize) -> Vec<Vec<RefCandidate>> {
    finished
        .into_iter()
        .map(|mut pool| {
            pool.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tokens.cmp(&b.tokens)));
            pool.truncate(width);
            if let Some(last) = pool.last().cloned() {
                while pool.len() < width {
                    pool.push(RefCandidate { padded: true, ..last.clone() });
                }
            }
            pool
        })
        .collect()
}

/// Straightforward diverse beam search. For every extension the penalty is
/// recomputed from scratch against every sequence already chosen at this
/// timestep by earlier groups.
pub fn naive_dbs(
    scorer: &dyn TokenScorer,
    prompt: &[TokenId],
    groups: usize,
    width: usize,
    weight: f64,
    n: usize,
    max_len: usize,
) -> Vec<Vec<RefCandidate>> {
    let eos = scorer.vocab().eos();
    let v = scorer.vocab().len();
    let root = RefCandidate {
        tokens: vec![],
        lm: 0.0,
        penalty: 0.0,
        score: 0.0,
        forced: false,
        padded: false,
    };
    let mut active = vec![vec![root]; groups];
    let mut finished: Vec<Vec<RefCandidate>> = vec![vec![]; groups];
    for step in 0..max_len {
        let mut chosen: Vec<Vec<TokenId>> = Vec::new();
        for g in 0..groups {
            if active[g].is_empty() {
                continue;
            }
            let mut cands = Vec::new();
            for beam in &active[g] {
                let mut prefix = prompt.to_vec();
                prefix.extend(&beam.tokens);
                let lp = scorer.log_probs(&prefix);
                for tok in 0..v as TokenId {
                    let mut ext = beam.tokens.clone();
                    ext.push(tok);
                    let shared: usize = chosen
                        .iter()
                        .map(|c| shared_count(content(&ext, eos), c, n))
                        .sum();
                    let delta = -(shared as f64);
                    let lm = beam.lm + lp[tok as usize];
                    cands.push(RefCandidate {
                        tokens: ext,
                        lm,
                        penalty: beam.penalty + weight * delta,
                        score: lm + weight * delta,
                        forced: false,
                        padded: false,
                    });
                }
            }
            cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.tokens.cmp(&b.tokens)));
            cands.truncate(width);
            let mut next = Vec::new();
            for c in cands {
                chosen.push(content(&c.tokens, eos).to_vec());
                if c.tokens.last() == Some(&eos) {
                    finished[g].push(c);
                } else if step + 1 == max_len {
                    finished[g].push(RefCandidate { forced: true, ..c });
                } else {
                    next.push(c);
                }
            }
            active[g] = next;
        }
    }
    finish_rows(finished, width)
}

/// Ordinary beam search of the given width, ranked by log-probability alone.
pub fn beam_search(scorer: &dyn TokenScorer, prompt: &[TokenId], width: usize, max_len: usize) -> Vec<RefCandidate> {
    let eos = scorer.vocab().eos();
    let mut beams = vec![(Vec::<TokenId>::new(), 0.0f64)];
    let mut done: Vec<RefCandidate> = Vec::new();
    for step in 0..max_len {
        if beams.is_empty() {
            break;
        }
        let mut cands: Vec<(Vec<TokenId>, f64)> = Vec::new();
        for (toks, lm) in &beams {
            let mut prefix = prompt.to_vec();
            prefix.extend(toks);
            for (t, lp) in scorer.log_probs(&prefix).into_iter().enumerate() {
                let mut ext = toks.clone();
                ext.push(t as TokenId);
                cands.push((ext, lm + lp));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        cands.truncate(width);
        beams.clear();
        for (toks, lm) in cands {
            let ended = toks.last() == Some(&eos);
            if ended || step + 1 == max_len {
                done.push(RefCandidate {
                    tokens: toks,
                    lm,
                    penalty: 0.0,
                    score: lm,
                    forced: !ended,
                    padded: false,
                });
            } else {
                beams.push((toks, lm));
            }
        }
    }
    finish_rows(vec![done], width).remove(0)
}

/// Greedy MMR written directly from its definition, recomputing every term.
pub fn greedy_mmr_trace(
    clicked: &str,
    pool: &[(String, f64)],
    k: usize,
    lambda: f64,
    sim: impl Fn(&str, &str) -> f64,
) -> Option<Vec<String>> {
    let mut selected: Vec<String> = vec![clicked.to_string()];
    let mut remaining: Vec<(String, f64)> = pool
        .iter()
        .filter(|(t, _)| t.as_str() != clicked)
        .cloned()
        .collect();
    while selected.len() < k {
        if remaining.is_empty() {
            return None;
        }
        let value = |(t, ce): &(String, f64)| {
            let max_sim = selected.iter().map(|s| sim(t, s)).fold(f64::NEG_INFINITY, f64::max);
            lambda * ce - (1.0 - lambda) * max_sim
        };
        let mut best = 0;
        for i in 1..remaining.len() {
            let (vi, vb) = (value(&remaining[i]), value(&remaining[best]));
            let better = vi > vb
                || (vi == vb
                    && (remaining[i].1 > remaining[best].1
                        || (remaining[i].1 == remaining[best].1 && remaining[i].0 < remaining[best].0)));
            if better {
                best = i;
            }
        }
        selected.push(remaining.remove(best).0);
    }
    Some(selected)
}

/// Finite-difference derivative by central differences.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// A random DPO problem: policy, reference and batch over a few contexts and
/// candidates, drawn from `seed`.
pub fn random_dpo_instance(
    seed: u64,
) -> (
    proguide_core::objectives::ToyPolicy,
    proguide_core::objectives::ToyPolicy,
    proguide_core::objectives::DpoBatch,
) {
    use proguide_core::objectives::{DpoBatch, DpoItem, ToyPolicy};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts: Vec<String> = (0..rng.gen_range(1..=3)).map(|i| format!("x{i}")).collect();
    let mut policy = ToyPolicy::new();
    let mut reference = ToyPolicy::new();
    let mut cands_of = Vec::new();
    for x in &contexts {
        let ys: Vec<String> = (0..rng.gen_range(2..=5)).map(|j| format!("y{j}")).collect();
        for y in &ys {
            policy.set(x, y, rng.gen_range(-2.0..2.0));
            reference.set(x, y, rng.gen_range(-2.0..2.0));
        }
        cands_of.push(ys);
    }
    let items = (0..rng.gen_range(1..=6))
        .map(|_| {
            let c = rng.gen_range(0..contexts.len());
            let ys = &cands_of[c];
            let w = rng.gen_range(0..ys.len());
            let mut l = rng.gen_range(0..ys.len() - 1);
            if l >= w {
                l += 1;
            }
            DpoItem {
                context: contexts[c].clone(),
                chosen: ys[w].clone(),
                rejected: ys[l].clone(),
            }
        })
        .collect();
    let batch = DpoBatch {
        items,
        beta: rng.gen_range(0.05..2.0),
    };
    (policy, reference, batch)
}

/// Largest relative error between the analytic DPO gradient and central
/// differences, over every parameter.
pub fn dpo_fd_max_rel_error(seed: u64) -> f64 {
    use proguide_core::objectives::{dpo_grad, dpo_loss};
    let (policy, reference, batch) = random_dpo_instance(seed);
    let grad = dpo_grad(&policy, &reference, &batch).unwrap();
    let mut worst: f64 = 0.0;
    for (x, row) in &policy.theta {
        for y in row.keys() {
            let base = policy.get(x, y).unwrap();
            let fd = central_diff(
                |v| {
                    let mut p = policy.clone();
                    p.set(x, y, v);
                    dpo_loss(&p, &reference, &batch).unwrap()
                },
                base,
                1e-5,
            );
            let g = grad[x][y];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
