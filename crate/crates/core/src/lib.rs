//! Task-aware cultural data synthesis, per-culture adapter orchestration and
//! culture-routed inference.
//!
//! Every model and search dependency sits behind [`backend::ChatBackend`] and
//! [`backend::SearchBackend`], so the whole pipeline runs offline against the
//! scripted mocks in [`backend::mock`] or the simulators in [`backend::sim`].

pub mod backend;
pub mod dedup;
pub mod eval;
pub mod model;
pub mod prompts;
pub mod store;
pub mod config;
pub mod query;
pub mod search_agent;
pub mod synth;
pub mod gateway;
pub mod router;
pub mod training;
pub mod pipeline;
pub mod app;
