//! Few-shot product photo augmentation and evaluation for subject-driven
//! image generation: grow a handful of catalogue shots into a finetuning set,
//! filter and rank what the finetuned model produces, and collect human
//! verdicts on the survivors.
//!
//! Every model call goes through the traits in [`backend`]; the bundled mocks
//! make whole runs deterministic and fast enough for tests.

pub mod augmentation;
pub mod backend;
pub mod canonical;
pub mod config;
pub mod demo;
pub mod filtering;
pub mod finetune;
pub mod human_eval;
pub mod manifest;
pub mod model;
pub mod parallel;
pub mod pipeline;
pub mod prompt_bank;
pub mod ranking;
pub mod raster;
pub mod store;
