//! Core library for two-round visual question answering episodes with
//! region marking: geometry, action parsing, the episode state machine,
//! rewards, model backends, data generation and evaluation.

pub mod config;
pub mod datagen;
pub mod episode;
pub mod eval;
pub mod geometry;
pub mod mark;
pub mod model;
pub mod prompts;
pub mod protocol;
pub mod question;
pub mod reward;
