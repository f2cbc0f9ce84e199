use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

/// Conventional spelling of the end-of-sequence token.
pub const EOS_TOKEN: &str = "</s>";
/// Left padding used in table contexts.
pub const BOS_TOKEN: &str = "<s>";

const BOS_ID: TokenId = TokenId::MAX;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid table: {0}")]
    Invalid(String),
}

fn format_err(line: usize, message: impl Into<String>) -> ScorerError {
    ScorerError::Format {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
}

impl Vocabulary {
    pub fn new<I, S>(tokens: I, eos: &str) -> Result<Self, ScorerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) || t == BOS_TOKEN {
                return Err(ScorerError::Invalid(format!("bad token `{t}`")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(ScorerError::Invalid(format!("duplicate token `{t}`")));
            }
        }
        let eos = *index
            .get(eos)
            .ok_or_else(|| ScorerError::Invalid(format!("eos token `{eos}` not in vocabulary")))?;
        Ok(Self { tokens, index, eos })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization; unknown words and the EOS spelling are dropped.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .filter_map(|w| self.id(w).or_else(|| self.id(&w.to_lowercase())))
            .filter(|&id| id != self.eos)
            .collect()
    }

    /// Joins token spellings with single spaces, skipping EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A deterministic next-token distribution.
///
/// `log_probs` returns one finite log-probability per vocabulary entry and the
/// probabilities sum to one.
pub trait TokenScorer: Send + Sync {
    fn vocab(&self) -> &Vocabulary;
    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64>;
}

impl<T: TokenScorer + ?Sized> TokenScorer for std::sync::Arc<T> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        (**self).log_probs(prefix)
    }
}

/// Same probability for every token.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    vocab: Vocabulary,
}

impl UniformScorer {
    pub fn new(vocab: Vocabulary) -> Self {
        Self { vocab }
    }
}

impl TokenScorer for UniformScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }
    fn log_probs(&self, _prefix: &[TokenId]) -> Vec<f64> {
        let n = self.vocab.len();
        vec![-(n as f64).ln(); n]
    }
}

/// Back-off n-gram table.
///
/// Only the tokens after the last EOS in the prefix form the generation
/// context, so a prompt can be followed by EOS and generation starts from a
/// fresh `<s> <s>` context. Contexts are looked up longest-first; the empty
/// context is the final fallback, then the uniform distribution.
///
/// Text format, tab separated:
///
/// ```text
/// # comment
/// vocab	A B </s>
/// eos	</s>
/// order	2
/// <s> <s>	A	0.5
/// *	A	0.3
/// ```
///
/// `order` is the context length (2 for a trigram table), the context column
/// lists up to `order` tokens with `<s>` as left padding, and `*` denotes the
/// empty context. Every listed context must give every vocabulary token a
/// positive probability, summing to one within 1e-6.
#[derive(Debug, Clone)]
pub struct TableScorer {
    vocab: Vocabulary,
    order: usize,
    table: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl TableScorer {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ScorerError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self, ScorerError> {
        let mut vocab_tokens: Option<(usize, Vec<String>)> = None;
        let mut eos = EOS_TOKEN.to_owned();
        let mut order = 2usize;
        let mut rows: Vec<(usize, Vec<String>, String, f64)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            match cols.as_slice() {
                ["vocab", toks] => {
                    vocab_tokens = Some((line, toks.split_whitespace().map(String::from).collect()))
                }
                ["eos", tok] => eos = tok.trim().to_owned(),
                ["order", o] => {
                    order = o
                        .trim()
                        .parse()
                        .map_err(|_| format_err(line, "order must be an integer"))?
                }
                [ctx, tok, p] => {
                    let p: f64 = p
                        .trim()
                        .parse()
                        .map_err(|_| format_err(line, "probability must be a number"))?;
                    let ctx = if ctx.trim() == "*" {
                        Vec::new()
                    } else {
                        ctx.split_whitespace().map(String::from).collect()
                    };
                    rows.push((line, ctx, tok.trim().to_owned(), p));
                }
                _ => return Err(format_err(line, "expected 2 or 3 tab-separated columns")),
            }
        }
        let (_, tokens) = vocab_tokens.ok_or_else(|| ScorerError::Invalid("missing vocab line".into()))?;
        let vocab = Vocabulary::new(tokens, &eos)?;
        if order == 0 {
            return Err(ScorerError::Invalid("order must be at least 1".into()));
        }

        let mut probs: BTreeMap<Vec<TokenId>, Vec<Option<f64>>> = BTreeMap::new();
        for (line, ctx, tok, p) in rows {
            if ctx.len() > order {
                return Err(format_err(line, format!("context longer than order {order}")));
            }
            let ctx_ids = ctx
                .iter()
                .map(|t| {
                    if t == BOS_TOKEN {
                        Ok(BOS_ID)
                    } else {
                        vocab
                            .id(t)
                            .ok_or_else(|| format_err(line, format!("unknown context token `{t}`")))
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let id = vocab
                .id(&tok)
                .ok_or_else(|| format_err(line, format!("unknown token `{tok}`")))?;
            if !(p > 0.0 && p <= 1.0) {
                return Err(format_err(line, "probability must lie in (0, 1]"));
            }
            let slot = &mut probs.entry(ctx_ids).or_insert_with(|| vec![None; vocab.len()])[id as usize];
            if slot.replace(p).is_some() {
                return Err(format_err(line, format!("duplicate entry for `{tok}`")));
            }
        }

        let mut table = HashMap::with_capacity(probs.len());
        for (ctx, ps) in probs {
            let ps: Vec<f64> = ps
                .into_iter()
                .enumerate()
                .map(|(i, p)| {
                    p.ok_or_else(|| {
                        ScorerError::Invalid(format!(
                            "context {:?} lacks token `{}`",
                            ctx,
                            vocab.token(i as TokenId).unwrap_or("?")
                        ))
                    })
                })
                .collect::<Result<_, _>>()?;
            let sum: f64 = ps.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(ScorerError::Invalid(format!(
                    "probabilities for context {ctx:?} sum to {sum}"
                )));
            }
            table.insert(ctx, ps.iter().map(|p| p.ln()).collect());
        }
        Ok(Self { vocab, order, table })
    }

    /// Builds an add-`alpha` smoothed table from whitespace-tokenized phrases.
    /// Every observed context (with its back-off suffixes) gets a row.
    pub fn from_corpus<S: AsRef<str>>(phrases: &[S], order: usize, alpha: f64) -> Result<Self, ScorerError> {
        if order == 0 || alpha <= 0.0 {
            return Err(ScorerError::Invalid("order >= 1 and alpha > 0 required".into()));
        }
        let words: BTreeSet<String> = phrases
            .iter()
            .flat_map(|p| p.as_ref().split_whitespace().map(str::to_lowercase))
            .collect();
        let mut tokens: Vec<String> = words.into_iter().filter(|w| w != EOS_TOKEN).collect();
        tokens.push(EOS_TOKEN.to_owned());
        let vocab = Vocabulary::new(tokens, EOS_TOKEN)?;
        let v = vocab.len();

        let mut counts: BTreeMap<Vec<TokenId>, Vec<f64>> = BTreeMap::new();
        for phrase in phrases {
            let mut seq: Vec<TokenId> = vec![BOS_ID; order];
            seq.extend(vocab.encode(&phrase.as_ref().to_lowercase()));
            seq.push(vocab.eos());
            for pos in order..seq.len() {
                for len in 0..=order {
                    let ctx = seq[pos - len..pos].to_vec();
                    counts.entry(ctx).or_insert_with(|| vec![0.0; v])[seq[pos] as usize] += 1.0;
                }
            }
        }
        let table = counts
            .into_iter()
            .map(|(ctx, c)| {
                let total: f64 = c.iter().sum::<f64>() + alpha * v as f64;
                let lp = c.iter().map(|x| ((x + alpha) / total).ln()).collect();
                (ctx, lp)
            })
            .collect();
        Ok(Self { vocab, order, table })
    }

    /// Serializes to the text format accepted by [`TableScorer::parse`].
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "vocab\t{}", self.vocab.tokens().join(" "));
        let _ = writeln!(out, "eos\t{}", self.vocab.token(self.vocab.eos()).unwrap_or(EOS_TOKEN));
        let _ = writeln!(out, "order\t{}", self.order);
        let mut contexts: Vec<&Vec<TokenId>> = self.table.keys().collect();
        contexts.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        for ctx in contexts {
            let name = if ctx.is_empty() {
                "*".to_owned()
            } else {
                ctx.iter()
                    .map(|&id| {
                        if id == BOS_ID {
                            BOS_TOKEN
                        } else {
                            self.vocab.token(id).unwrap_or("?")
                        }
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            for (i, lp) in self.table[ctx].iter().enumerate() {
                let _ = writeln!(out, "{name}\t{}\t{:e}", self.vocab.tokens()[i], lp.exp());
            }
        }
        out
    }

    fn context_of(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let start = prefix
            .iter()
            .rposition(|&t| t == self.vocab.eos())
            .map_or(0, |p| p + 1);
        let generated = &prefix[start..];
        let mut ctx = vec![BOS_ID; self.order.saturating_sub(generated.len())];
        ctx.extend_from_slice(&generated[generated.len().saturating_sub(self.order)..]);
        ctx
    }
}

impl TokenScorer for TableScorer {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let ctx = self.context_of(prefix);
        (0..=ctx.len())
            .find_map(|skip| self.table.get(&ctx[skip..]))
            .cloned()
            .unwrap_or_else(|| vec![-(self.vocab.len() as f64).ln(); self.vocab.len()])
    }
}

/// Shifts probability mass towards words that appear in the prompt.
///
/// The prompt is the part of the prefix up to and including its last EOS.
/// Each vocabulary token occurring there gets `bonus` added to its
/// log-probability, then the distribution is renormalized. EOS is never
/// boosted.
#[derive(Debug, Clone)]
pub struct PromptBiased<S> {
    pub inner: S,
    pub bonus: f64,
}

impl<S: TokenScorer> TokenScorer for PromptBiased<S> {
    fn vocab(&self) -> &Vocabulary {
        self.inner.vocab()
    }

    fn log_probs(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut lp = self.inner.log_probs(prefix);
        let eos = self.vocab().eos();
        let Some(cut) = prefix.iter().rposition(|&t| t == eos) else {
            return lp;
        };
        let mut boosted = vec![false; lp.len()];
        for &t in &prefix[..cut] {
            if t != eos {
                if let Some(b) = boosted.get_mut(t as usize) {
                    *b = true;
                }
            }
        }
        if !boosted.contains(&true) {
            return lp;
        }
        for (x, _) in lp.iter_mut().zip(&boosted).filter(|(_, &b)| b) {
            *x += self.bonus;
        }
        let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + lp.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        lp.iter_mut().for_each(|x| *x -= log_z);
        lp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TRIGRAM: &str = "\
# toy trigram table
vocab\tA B </s>
<s> <s>\tA\t0.6
<s> <s>\tB\t0.3
<s> <s>\t</s>\t0.1
<s> A\tA\t0.2
<s> A\tB\t0.5
<s> A\t</s>\t0.3
A B\tA\t0.1
A B\tB\t0.1
A B\t</s>\t0.8
*\tA\t0.4
*\tB\t0.4
*\t</s>\t0.2
";

    fn sum_exp(v: &[f64]) -> f64 {
        v.iter().map(|x| x.exp()).sum()
    }

    #[test]
    fn parse_and_backoff() {
        let s = TableScorer::parse(TRIGRAM).unwrap();
        let v = s.vocab();
        let (a, b) = (v.id("A").unwrap(), v.id("B").unwrap());
        assert!((s.log_probs(&[])[a as usize] - 0.6f64.ln()).abs() < 1e-12);
        assert!((s.log_probs(&[a, b])[v.eos() as usize] - 0.8f64.ln()).abs() < 1e-12);
        // (B, B) is not listed and neither is (B): falls back to the empty context.
        assert!((s.log_probs(&[b, b])[a as usize] - 0.4f64.ln()).abs() < 1e-12);
        // A prompt followed by EOS resets the context.
        assert_eq!(s.log_probs(&[b, b, v.eos()]), s.log_probs(&[]));
        for prefix in [&[][..], &[a], &[a, b], &[b, a, b, a]] {
            assert!((sum_exp(&s.log_probs(prefix)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn parse_rejects_bad_tables() {
        assert!(TableScorer::parse("vocab\tA </s>\n*\tA\t0.5\n").is_err());
        assert!(TableScorer::parse("vocab\tA </s>\n*\tA\t0.5\n*\t</s>\t0.4\n").is_err());
        assert!(TableScorer::parse("vocab\tA </s>\n*\tC\t1.0\n").is_err());
        assert!(TableScorer::parse("*\tA\t1.0\n").is_err());
        assert!(TableScorer::parse("vocab\tA </s>\n<s> <s> <s>\tA\t0.5\n").is_err());
    }

    #[test]
    fn table_round_trips_through_text() {
        let s = TableScorer::parse(TRIGRAM).unwrap();
        let again = TableScorer::parse(&s.to_table_string()).unwrap();
        for prefix in [&[][..], &[0], &[0, 1], &[1, 1]] {
            let (x, y) = (s.log_probs(prefix), again.log_probs(prefix));
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn corpus_table_is_normalized() {
        let s = TableScorer::from_corpus(&["how to buy stocks", "how to sell stocks"], 2, 0.1).unwrap();
        let v = s.vocab();
        let how = v.id("how").unwrap();
        let to = v.id("to").unwrap();
        let lp = s.log_probs(&[how, to]);
        assert!((sum_exp(&lp) - 1.0).abs() < 1e-9);
        assert!(lp[v.id("buy").unwrap() as usize] > lp[v.id("how").unwrap() as usize]);
        let reparsed = TableScorer::parse(&s.to_table_string()).unwrap();
        assert_eq!(reparsed.vocab(), s.vocab());
    }

    #[test]
    fn prompt_bias_renormalizes() {
        let s = TableScorer::parse(TRIGRAM).unwrap();
        let biased = PromptBiased { inner: s.clone(), bonus: 1.0 };
        let v = s.vocab();
        let prefix = [v.id("B").unwrap(), v.eos()];
        let lp = biased.log_probs(&prefix);
        assert!((sum_exp(&lp) - 1.0).abs() < 1e-9);
        assert!(lp[1] > s.log_probs(&prefix)[1]);
        assert_eq!(biased.log_probs(&[]), s.log_probs(&[]));
    }

    #[test]
    fn vocabulary_encode_decode() {
        let v = Vocabulary::new(["buy", "stocks", "</s>"], "</s>").unwrap();
        assert_eq!(v.encode("Buy cheap stocks </s>"), vec![0, 1]);
        assert_eq!(v.decode(&[0, 1, 2]), "buy stocks");
        assert!(Vocabulary::new(["a", "a", "</s>"], "</s>").is_err());
        assert!(Vocabulary::new(["a"], "</s>").is_err());
    }
}
