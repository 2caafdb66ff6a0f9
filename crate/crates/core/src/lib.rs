pub mod dataset;
pub mod gateway;
pub mod knowledge;
pub mod metrics;
pub mod retrieval;
pub mod tokenize;
pub mod parallel;
pub mod synth;
pub mod templates;
pub mod workflow;
pub mod eval;
pub mod config;
pub mod service;
pub mod cli;
