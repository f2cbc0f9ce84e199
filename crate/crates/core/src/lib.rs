//! Proactive guidance for multi-turn conversational search.
//!
//! Per turn the engine tracks the user's goal, decodes diverse candidate
//! follow-up phrases, scores them with a click estimator and serves the top
//! `k`. Click logs are turned into preference pairs for alignment training.

pub mod backend;
pub mod click;
pub mod dbs;
pub mod goal;
pub mod metrics;
pub mod objectives;
pub mod prompt;
pub mod rank;
pub mod synthetic;
pub mod types;

pub use types::*;
