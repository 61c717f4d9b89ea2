//! Benchmark harness for license-plate recognition with vision-language
//! models: synthetic dataset generation, model backends, the multi-stage
//! detection pipeline, experiment runs, reports and label adjudication.

pub mod adjudicate;
pub mod backend;
pub mod forge;
pub mod harness;
pub mod manifest;
pub mod pipeline;
pub mod report;
