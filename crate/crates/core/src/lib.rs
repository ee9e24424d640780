pub mod config;
pub mod dataset;
pub mod eval;
pub mod llm;
pub mod paths;
pub mod pipeline;
pub mod prompts;
pub mod rules;
pub mod samples;
pub mod seeding;
pub mod tkg;
