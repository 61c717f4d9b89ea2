//! Character- and plate-level accuracy.
//!
//! Character accuracy counts aligned matches over ground-truth characters:
//! a predicted character that has no counterpart in the truth (an insertion)
//! does not grow the denominator. Plate accuracy is exact string equality
//! after normalization.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::label::{PlateChar, PlateLabel, ALPHABET_LEN};
use crate::Error;

/// Shown next to every report so readers know how characters were counted.
pub const COUNTING_CONVENTION: &str =
    "char accuracy = aligned matches / ground-truth characters (insertions not counted in denominator)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Match,
    Substitute,
    Insert,
    Delete,
}

/// One step of an alignment between a truth label and a prediction.
///
/// `Insert` consumes only a predicted character; `Delete` only a truth character.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentOp {
    pub kind: OpKind,
    pub truth_char: Option<PlateChar>,
    pub pred_char: Option<PlateChar>,
}

impl AlignmentOp {
    pub fn cost(&self) -> usize {
        usize::from(self.kind != OpKind::Match)
    }
}

/// Reusable alignment workspace.
///
/// The score of a path is `cost * weight - matches`, with `weight` larger
/// than any possible match count, so minimizing it picks the minimum edit
/// cost first and the most matches among those.
#[derive(Debug, Default)]
pub struct Aligner {
    score: Vec<i64>,
}

impl Aligner {
    pub fn new() -> Self {
        Self::default()
    }

    /// Writes the alignment of `truth` against `pred` into `ops` (cleared first).
    pub fn align_into(
        &mut self,
        truth: &[PlateChar],
        pred: &[PlateChar],
        ops: &mut Vec<AlignmentOp>,
    ) {
        ops.clear();
        let (n, m) = (truth.len(), pred.len());
        let cols = m + 1;
        let weight = (n.min(m) + 1) as i64;
        self.score.resize((n + 1) * cols, 0);
        let s = &mut self.score[..(n + 1) * cols];

        for (j, cell) in s[..cols].iter_mut().enumerate() {
            *cell = j as i64 * weight;
        }
        for (i, &t) in truth.iter().enumerate() {
            let (done, rest) = s.split_at_mut((i + 1) * cols);
            let prev = &done[i * cols..];
            let row = &mut rest[..cols];
            row[0] = (i + 1) as i64 * weight;
            let mut left = row[0];
            for (j, &p) in pred.iter().enumerate() {
                let diag = prev[j] + if t == p { -1 } else { weight };
                let best = diag.min(prev[j + 1] + weight).min(left + weight);
                row[j + 1] = best;
                left = best;
            }
        }

        // Backtrack from the end; ties prefer Match > Substitute > Delete > Insert.
        let (mut i, mut j) = (n, m);
        while i > 0 || j > 0 {
            let here = s[i * cols + j];
            if i > 0 && j > 0 {
                let (t, p) = (truth[i - 1], pred[j - 1]);
                let diag = s[(i - 1) * cols + j - 1];
                if t == p && diag - 1 == here {
                    ops.push(AlignmentOp {
                        kind: OpKind::Match,
                        truth_char: Some(t),
                        pred_char: Some(p),
                    });
                    i -= 1;
                    j -= 1;
                    continue;
                }
                if t != p && diag + weight == here {
                    ops.push(AlignmentOp {
                        kind: OpKind::Substitute,
                        truth_char: Some(t),
                        pred_char: Some(p),
                    });
                    i -= 1;
                    j -= 1;
                    continue;
                }
            }
            if i > 0 && s[(i - 1) * cols + j] + weight == here {
                ops.push(AlignmentOp {
                    kind: OpKind::Delete,
                    truth_char: Some(truth[i - 1]),
                    pred_char: None,
                });
                i -= 1;
                continue;
            }
            ops.push(AlignmentOp {
                kind: OpKind::Insert,
                truth_char: None,
                pred_char: Some(pred[j - 1]),
            });
            j -= 1;
        }
        ops.reverse();
    }
}

/// Minimum-edit alignment with the largest match count among minimum-cost paths.
pub fn align(truth: &PlateLabel, pred: &PlateLabel) -> Vec<AlignmentOp> {
    let mut ops = Vec::with_capacity(truth.len().max(pred.len()));
    Aligner::new().align_into(truth.chars(), pred.chars(), &mut ops);
    ops
}

/// Edit cost and match count of an alignment.
pub fn summarize(ops: &[AlignmentOp]) -> (usize, usize) {
    ops.iter().fold((0, 0), |(cost, matched), op| {
        (cost + op.cost(), matched + usize::from(op.kind == OpKind::Match))
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlateEval {
    pub truth: PlateLabel,
    pub pred: PlateLabel,
    pub matched_chars: usize,
    pub truth_len: usize,
    pub exact: bool,
}

impl PlateEval {
    /// Scores a prediction; an empty prediction scores zero matches.
    pub fn new(truth: PlateLabel, pred: PlateLabel) -> Result<Self, Error> {
        if truth.is_empty() {
            return Err(Error::EmptyLabel);
        }
        let (_, matched_chars) = summarize(&align(&truth, &pred));
        Ok(Self {
            truth_len: truth.len(),
            exact: truth.chars() == pred.chars(),
            matched_chars,
            truth,
            pred,
        })
    }
}

pub fn eval_plate(truth: &PlateLabel, pred: &PlateLabel) -> Result<PlateEval, Error> {
    PlateEval::new(truth.clone(), pred.clone())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub correct: usize,
    pub total: usize,
}

impl ClassTally {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.correct as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_plate: Vec<PlateEval>,
    pub char_correct: usize,
    pub char_total: usize,
    pub char_accuracy: f64,
    pub plate_correct: usize,
    pub plate_total: usize,
    pub plate_accuracy: f64,
    pub per_class: BTreeMap<PlateChar, ClassTally>,
}

impl EvalReport {
    pub fn char_percent(&self, decimals: u32) -> String {
        percent_half_up(self.char_correct, self.char_total, decimals)
    }

    pub fn plate_percent(&self, decimals: u32) -> String {
        percent_half_up(self.plate_correct, self.plate_total, decimals)
    }
}

/// Sums per-plate results into accuracy totals and per-class tallies.
pub fn aggregate(per_plate: Vec<PlateEval>) -> Result<EvalReport, Error> {
    if per_plate.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut aligner = Aligner::new();
    let mut ops = Vec::new();
    let mut per_class: BTreeMap<PlateChar, ClassTally> = BTreeMap::new();
    let (mut char_correct, mut char_total, mut plate_correct) = (0, 0, 0);
    for eval in &per_plate {
        char_correct += eval.matched_chars;
        char_total += eval.truth_len;
        plate_correct += usize::from(eval.exact);
        aligner.align_into(eval.truth.chars(), eval.pred.chars(), &mut ops);
        for op in &ops {
            if let Some(t) = op.truth_char {
                let tally = per_class.entry(t).or_default();
                tally.total += 1;
                tally.correct += usize::from(op.kind == OpKind::Match);
            }
        }
    }
    let plate_total = per_plate.len();
    Ok(EvalReport {
        char_accuracy: ratio_percent(char_correct, char_total),
        plate_accuracy: ratio_percent(plate_correct, plate_total),
        per_plate,
        char_correct,
        char_total,
        plate_correct,
        plate_total,
        per_class,
    })
}

pub fn ratio_percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

/// `100 * correct / total` rounded half-up to `decimals` places, computed
/// in exact integer arithmetic.
pub fn percent_half_up(correct: usize, total: usize, decimals: u32) -> String {
    if total == 0 {
        return "n/a".to_string();
    }
    let scale = 10u128.pow(decimals);
    let num = 100 * correct as u128 * scale;
    let den = total as u128;
    let rounded = (2 * num + den) / (2 * den);
    let int = rounded / scale;
    if decimals == 0 {
        return int.to_string();
    }
    let frac = rounded % scale;
    let mut out = int.to_string();
    out.push('.');
    let digits = frac.to_string();
    for _ in digits.len()..decimals as usize {
        out.push('0');
    }
    out.push_str(&digits);
    out
}

/// Backend x class accuracy matrix; `None` marks a class absent from the truth set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTable {
    pub backends: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl HeatmapTable {
    pub fn cell(&self, backend: &str, class: PlateChar) -> Option<f64> {
        let row = self.backends.iter().position(|b| b == backend)?;
        self.rows[row][class.index()]
    }
}

pub fn heatmap_table(reports: &BTreeMap<String, EvalReport>) -> HeatmapTable {
    let mut backends = Vec::with_capacity(reports.len());
    let mut rows = Vec::with_capacity(reports.len());
    for (backend, report) in reports {
        let mut row = vec![None; ALPHABET_LEN];
        for (class, tally) in &report.per_class {
            row[class.index()] = tally.accuracy();
        }
        backends.push(backend.clone());
        rows.push(row);
    }
    HeatmapTable { backends, rows }
}
