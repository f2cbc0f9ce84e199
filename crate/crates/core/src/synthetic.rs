//! Seeded synthetic data for exercising the click estimator and ranker.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::click::CeExample;

const CONSONANTS: &[char] = &['b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z'];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

/// `count` distinct pseudo-words of three consonant-vowel syllables.
pub fn pseudo_words(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w: String = (0..3)
            .flat_map(|_| {
                [
                    *CONSONANTS.choose(&mut rng).unwrap(),
                    *VOWELS.choose(&mut rng).unwrap(),
                ]
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Query/guidance pairs over a keyword vocabulary, labelled 1 exactly when the
/// guidance contains one of the query's keywords. Classes are balanced.
pub fn keyword_rule_dataset(vocab: &[String], n: usize, seed: u64) -> Vec<CeExample> {
    assert!(vocab.len() >= 6, "vocabulary needs at least 6 words");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let positive = i % 2 == 0;
        let picked: Vec<&String> = vocab.choose_multiple(&mut rng, 4).collect();
        let query = format!("{} {}", picked[0], picked[1]);
        let guidance = if positive {
            let shared = picked[rng.gen_range(0..2)];
            if rng.gen_bool(0.5) {
                format!("{shared} {}", picked[2])
            } else {
                format!("{} {shared}", picked[2])
            }
        } else {
            format!("{} {}", picked[2], picked[3])
        };
        out.push(CeExample::new(query, guidance, positive));
    }
    out
}
