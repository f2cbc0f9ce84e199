//! Diverse beam search over an abstract next-token scorer.

mod decode;
mod ngram;
mod scorer;

pub use decode::{dbs_decode, CandidateMatrix, DbsConfig, DbsError, ScoredCandidate};
pub use ngram::{dissimilarity, ngram_penalty, ngram_set};
pub use scorer::{
    PromptBiased, ScorerError, TableScorer, TokenId, TokenScorer, UniformScorer, Vocabulary,
    BOS_TOKEN, EOS_TOKEN,
};
