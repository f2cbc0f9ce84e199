use std::collections::HashSet;

use super::scorer::TokenId;

/// Distinct n-grams of orders `1..=n` in `seq`.
pub fn ngram_set(seq: &[TokenId], n: usize) -> HashSet<&[TokenId]> {
    let mut out = HashSet::new();
    for order in 1..=n.min(seq.len()) {
        out.extend(seq.windows(order));
    }
    out
}

/// Negative count of distinct n-grams (orders `1..=n`) occurring in both
/// sequences. Symmetric, and zero when nothing is shared.
pub fn ngram_penalty(a: &[TokenId], b: &[TokenId], n: usize) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let large = ngram_set(large, n);
    let shared = ngram_set(small, n).intersection(&large).count();
    -(shared as f64)
}

/// Sum of [`ngram_penalty`] of `candidate` against each member of `group`.
pub fn dissimilarity<S: AsRef<[TokenId]>>(candidate: &[TokenId], group: &[S], n: usize) -> f64 {
    group
        .iter()
        .map(|member| ngram_penalty(candidate, member.as_ref(), n))
        .sum()
}
