//! Snapshot test failure triage: pixel scoring, dataset handling, model
//! prompting, response parsing, and evaluation metrics.

pub mod analysis;
pub mod backend;
pub mod dataset;
pub mod evaluation;
pub mod imaging;
pub mod prompting;
pub mod taxonomy;
