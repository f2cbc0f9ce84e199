//! HTTP service, command-line tools and per-turn orchestration built on
//! `proguide-core`.

pub mod api;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod engine;
pub mod events;
pub mod http;
pub mod replay;
