//! Allocation-only algorithms behind `plate-bench`.
//!
//! Everything here is pure: plate labels and the 36-symbol alphabet,
//! minimum-edit alignment and accuracy aggregation, the seeded synthetic
//! plate generator, detection-output parsing, reply token extraction, the
//! seeded error-injecting recognizer model and the 2-of-3 label vote with
//! its event-sourced task state. File formats, networking and the CLI live
//! in the `plate-bench` crate.

#![no_std]

extern crate alloc;

pub mod adjudicate;
pub mod detect;
pub mod extract;
pub mod font;
pub mod forge;
pub mod label;
pub mod metrics;
pub mod mock;
pub mod prompts;
pub mod vote;

pub use label::{normalize_label, LineLayout, PlateChar, PlateFormat, PlateLabel};
pub use metrics::{aggregate, align, eval_plate, AlignmentOp, EvalReport, OpKind, PlateEval};

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("label is empty after normalization")]
    EmptyLabel,
    #[error("plate format needs at least one letter and one digit (got {letters} letters, {digits} digits)")]
    InvalidFormat { letters: usize, digits: usize },
    #[error("cannot aggregate an empty evaluation set")]
    EmptyEvaluation,
    #[error("label {label:?} does not fit format of {letters} letters + {digits} digits")]
    FormatMismatch {
        label: String,
        letters: usize,
        digits: usize,
    },
    #[error("invalid generator setting: {0}")]
    InvalidSpec(String),
    #[error("invalid degradation parameter: {0}")]
    InvalidDegrade(String),
    #[error("invalid mock behavior: {0}")]
    InvalidMock(String),
    #[error("no plate-like token in reply")]
    NotFound,
    #[error("expected exactly 3 submissions, got {0}")]
    SubmissionCount(usize),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("annotator {annotator:?} already labeled task {task:?}")]
    DuplicateSubmission { task: String, annotator: String },
    #[error("task {task:?} is {status}, not accepting this action")]
    WrongStatus { task: String, status: &'static str },
    #[error("task {0:?} already exists")]
    DuplicateTask(String),
}
