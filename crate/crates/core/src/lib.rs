//! Closed-loop visual reflection: a draft, reflect, verify-region, revise
//! engine over pluggable model backends, plus the pipeline that builds
//! reflective multi-turn training data.

pub mod backends;
pub mod config;
pub mod dataset;
pub mod export;
pub mod loop_engine;
pub mod prompts;
pub mod protocol;
pub mod render;
pub mod stats;
