//! Three-annotator majority vote.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::label::{PlateChar, PlateLabel};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteKind {
    Unanimous,
    Majority,
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub kind: VoteKind,
    pub label: Option<PlateLabel>,
    /// Unresolved positions; only filled when all submissions share a length.
    pub conflict_positions: Vec<usize>,
}

impl VoteOutcome {
    fn decided(kind: VoteKind, label: PlateLabel) -> Self {
        Self {
            kind,
            label: Some(label),
            conflict_positions: Vec::new(),
        }
    }
}

/// Whole-string 2-of-3 vote first; when all three differ but have the same
/// length, each position is voted separately.
pub fn vote(submissions: &[PlateLabel]) -> Result<VoteOutcome, Error> {
    let [a, b, c] = submissions else {
        return Err(Error::SubmissionCount(submissions.len()));
    };
    let (a_s, b_s, c_s) = (a.chars(), b.chars(), c.chars());
    if a_s == b_s && b_s == c_s {
        return Ok(VoteOutcome::decided(VoteKind::Unanimous, PlateLabel::from_chars(a_s.to_vec())));
    }
    if a_s == b_s || a_s == c_s {
        return Ok(VoteOutcome::decided(VoteKind::Majority, PlateLabel::from_chars(a_s.to_vec())));
    }
    if b_s == c_s {
        return Ok(VoteOutcome::decided(VoteKind::Majority, PlateLabel::from_chars(b_s.to_vec())));
    }
    if a_s.len() != b_s.len() || a_s.len() != c_s.len() {
        return Ok(VoteOutcome {
            kind: VoteKind::Conflict,
            label: None,
            conflict_positions: Vec::new(),
        });
    }
    let mut chars: Vec<PlateChar> = Vec::with_capacity(a_s.len());
    let mut conflicts = Vec::new();
    for i in 0..a_s.len() {
        let (x, y, z) = (a_s[i], b_s[i], c_s[i]);
        if x == y || x == z {
            chars.push(x);
        } else if y == z {
            chars.push(y);
        } else {
            conflicts.push(i);
        }
    }
    if conflicts.is_empty() {
        Ok(VoteOutcome::decided(VoteKind::Majority, PlateLabel::from_chars(chars)))
    } else {
        Ok(VoteOutcome {
            kind: VoteKind::Conflict,
            label: None,
            conflict_positions: conflicts,
        })
    }
}
