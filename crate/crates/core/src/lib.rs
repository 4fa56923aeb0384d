//! Evidence-to-generate prompting pipeline and benchmark scoring.

pub mod extraction;
pub mod grounding;
pub mod llm_backend;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod runstore;
pub mod task_model;
