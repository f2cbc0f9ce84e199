//! Built-in follow-up phrases used to fit the default next-token table when
//! no scorer table is configured.

use proguide_core::dbs::{PromptBiased, ScorerError, TableScorer};

pub const DEFAULT_CORPUS: &[&str] = &[
    "how do index funds work",
    "what are the risks of index funds",
    "how much should i invest each month",
    "what is the difference between stocks and bonds",
    "how do i start investing with little money",
    "are bonds safer than stocks",
    "what fees do index funds charge",
    "how are dividends taxed",
    "what is a retirement account",
    "how do i diversify my portfolio",
    "what causes a peanut allergy",
    "how is a food allergy diagnosed",
    "what are the symptoms of a food allergy",
    "can children outgrow a peanut allergy",
    "how do i treat an allergic reaction",
    "which foods should i avoid with a peanut allergy",
    "what is an allergy test",
    "how do i plan a trip to japan",
    "what is the best time to visit japan",
    "how much does a trip to japan cost",
    "do i need a visa for japan",
    "what should i pack for a trip",
    "how do i find cheap flights",
    "which cities should i visit in japan",
    "how do i cook rice on the stove",
    "what is a quick healthy dinner",
    "how long should i cook chicken",
    "what can i cook with rice and eggs",
    "how do i meal prep for the week",
    "how do i start running",
    "how many days a week should i exercise",
    "what is a good beginner workout",
    "how do i build muscle at home",
    "what should i eat before a workout",
    "how do i stay motivated to exercise",
    "what is the best way to learn a language",
    "how long does it take to learn japanese",
    "which apps help with language learning",
    "how do i improve my sleep",
    "how many hours of sleep do i need",
];

/// Add-alpha smoothing used for the default table.
pub const DEFAULT_ALPHA: f64 = 0.01;

/// Trigram table over [`DEFAULT_CORPUS`], biased towards prompt words.
pub fn default_scorer(prompt_bonus: f64) -> Result<PromptBiased<TableScorer>, ScorerError> {
    Ok(PromptBiased {
        inner: TableScorer::from_corpus(DEFAULT_CORPUS, 2, DEFAULT_ALPHA)?,
        bonus: prompt_bonus,
    })
}
