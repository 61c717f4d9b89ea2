//! Reports over run files: a plain-text accuracy table, a per-class CSV
//! heatmap and a JSON summary. Output depends only on the records.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use plate_core::label::PlateChar;
use plate_core::metrics::{aggregate, percent_half_up, EvalReport, COUNTING_CONVENTION};
use serde::Serialize;

use crate::harness::{load_run_records, CellKey, RunRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub backend_id: String,
    pub prompt_id: String,
    pub report: EvalReport,
    pub errors: usize,
    pub error_kinds: BTreeMap<String, usize>,
}

impl ReportRow {
    pub fn name(&self) -> String {
        format!("{}/{}", self.backend_id, self.prompt_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub manifest: String,
    pub rows: Vec<ReportRow>,
}

/// Loads run files that must share one manifest, verifying every stored eval.
pub fn load_runs(paths: &[&Path]) -> Result<Vec<RunRecord>, String> {
    let mut all: Vec<RunRecord> = Vec::new();
    let mut seen: BTreeMap<CellKey, String> = BTreeMap::new();
    let mut truths: BTreeMap<String, String> = BTreeMap::new();
    let mut manifest: Option<String> = None;
    for path in paths {
        if !path.is_file() {
            return Err(format!("{}: no such run file", path.display()));
        }
        let records = load_run_records(path).map_err(|e| e.to_string())?;
        for r in records {
            r.verify().map_err(|e| format!("{}: {e}", path.display()))?;
            match &manifest {
                None => manifest = Some(r.manifest.clone()),
                Some(m) if *m != r.manifest => {
                    return Err(format!(
                        "{}: manifest {:?} differs from {:?} in earlier run files",
                        path.display(),
                        r.manifest,
                        m
                    ))
                }
                Some(_) => {}
            }
            let truth = r.truth.text();
            if let Some(prev) = truths.insert(r.image_id.clone(), truth.clone()) {
                if prev != truth {
                    return Err(format!(
                        "{}: image {:?} has truth {truth} but {prev} elsewhere",
                        path.display(),
                        r.image_id
                    ));
                }
            }
            if let Some(prev) = seen.insert(r.key(), path.display().to_string()) {
                return Err(format!(
                    "{}: record {:?}/{:?}/{:?} already appears in {prev}",
                    path.display(),
                    r.image_id,
                    r.backend_id,
                    r.prompt_id
                ));
            }
            all.push(r);
        }
    }
    if all.is_empty() {
        return Err("run files hold no records".into());
    }
    Ok(all)
}

fn plate_cmp(a: &EvalReport, b: &EvalReport) -> Ordering {
    // exact rational comparison of correct/total
    let x = a.plate_correct as u128 * b.plate_total as u128;
    let y = b.plate_correct as u128 * a.plate_total as u128;
    x.cmp(&y)
}

fn char_cmp(a: &EvalReport, b: &EvalReport) -> Ordering {
    let x = a.char_correct as u128 * b.char_total as u128;
    let y = b.char_correct as u128 * a.char_total as u128;
    x.cmp(&y)
}

/// One row per (backend, prompt), best plate accuracy first.
pub fn compare(records: Vec<RunRecord>) -> Result<Comparison, String> {
    let manifest = records.first().map(|r| r.manifest.clone()).unwrap_or_default();
    let mut groups: BTreeMap<(String, String), Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.backend_id.clone(), r.prompt_id.clone())).or_default().push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((backend_id, prompt_id), mut records) in groups {
        records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut error_kinds = BTreeMap::new();
        for r in &records {
            if let Some(e) = &r.error {
                *error_kinds.entry(e.kind.to_string()).or_insert(0) += 1;
            }
        }
        let errors = error_kinds.values().sum();
        let report = aggregate(records.into_iter().map(|r| r.eval).collect()).map_err(|e| e.to_string())?;
        rows.push(ReportRow {
            backend_id,
            prompt_id,
            report,
            errors,
            error_kinds,
        });
    }
    rows.sort_by(|a, b| {
        plate_cmp(&b.report, &a.report)
            .then_with(|| char_cmp(&b.report, &a.report))
            .then_with(|| a.backend_id.cmp(&b.backend_id))
            .then_with(|| a.prompt_id.cmp(&b.prompt_id))
    });
    Ok(Comparison { manifest, rows })
}

pub fn compare_backends(paths: &[&Path]) -> Result<Comparison, String> {
    compare(load_runs(paths)?)
}

fn pad_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                if i == 0 {
                    format!("{cell:<w$}", w = widths[i])
                } else {
                    format!("{cell:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Table with character- and plate-level counts and accuracies per row.
pub fn text_table(c: &Comparison) -> String {
    let mut rows = vec![vec![
        "backend".to_string(),
        "prompt".into(),
        "chars".into(),
        "char acc %".into(),
        "plates".into(),
        "plate acc %".into(),
        "errors".into(),
    ]];
    for r in &c.rows {
        let rep = &r.report;
        rows.push(vec![
            r.backend_id.clone(),
            r.prompt_id.clone(),
            format!("{}/{}", rep.char_correct, rep.char_total),
            rep.char_percent(2),
            format!("{}/{}", rep.plate_correct, rep.plate_total),
            rep.plate_percent(2),
            r.errors.to_string(),
        ]);
    }
    let mut out = format!("manifest: {}\n", c.manifest);
    out.push_str(&pad_table(&rows));
    let _ = writeln!(out, "\nnote: {COUNTING_CONVENTION}");
    if c.rows.iter().any(|r| r.errors > 0) {
        out.push_str("note: failed queries stay in the denominators with 0 matched characters.\n");
    }
    out
}

/// Prompt x correct plates x plate accuracy, one backend.
pub fn prompt_table(rows: &[(String, EvalReport)]) -> String {
    let mut table = vec![vec![
        "prompt".to_string(),
        "correct plates".into(),
        "plate acc %".into(),
        "char acc %".into(),
    ]];
    for (id, rep) in rows {
        table.push(vec![
            id.clone(),
            format!("{}/{}", rep.plate_correct, rep.plate_total),
            rep.plate_percent(2),
            rep.char_percent(2),
        ]);
    }
    pad_table(&table)
}

/// Rows are `backend/prompt`, columns the 36 classes; empty cells mark
/// classes absent from the truth set.
pub fn heatmap_csv(c: &Comparison) -> String {
    let mut out = String::from("backend");
    for class in PlateChar::all() {
        out.push(',');
        out.push(class.as_char());
    }
    out.push('\n');
    for row in &c.rows {
        out.push_str(&csv_field(&row.name()));
        for class in PlateChar::all() {
            out.push(',');
            if let Some(tally) = row.report.per_class.get(&class) {
                out.push_str(&percent_half_up(tally.correct, tally.total, 2));
            }
        }
        out.push('\n');
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    backend: &'a str,
    prompt: &'a str,
    char_correct: usize,
    char_total: usize,
    char_accuracy_pct: String,
    plate_correct: usize,
    plate_total: usize,
    plate_accuracy_pct: String,
    errors: usize,
    error_kinds: &'a BTreeMap<String, usize>,
    per_class: BTreeMap<String, [usize; 2]>,
}

#[derive(Serialize)]
struct Summary<'a> {
    manifest: &'a str,
    counting_convention: &'a str,
    rows: Vec<SummaryRow<'a>>,
}

/// Machine-readable summary; percentages as fixed 4-decimal strings.
pub fn summary_json(c: &Comparison) -> String {
    let rows = c
        .rows
        .iter()
        .map(|r| SummaryRow {
            backend: &r.backend_id,
            prompt: &r.prompt_id,
            char_correct: r.report.char_correct,
            char_total: r.report.char_total,
            char_accuracy_pct: r.report.char_percent(4),
            plate_correct: r.report.plate_correct,
            plate_total: r.report.plate_total,
            plate_accuracy_pct: r.report.plate_percent(4),
            errors: r.errors,
            error_kinds: &r.error_kinds,
            per_class: r
                .report
                .per_class
                .iter()
                .map(|(k, t)| (k.as_char().to_string(), [t.correct, t.total]))
                .collect(),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&Summary {
        manifest: &c.manifest,
        counting_convention: COUNTING_CONVENTION,
        rows,
    })
    .expect("summary serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use plate_core::{eval_plate, normalize_label};

    fn record(backend: &str, image: &str, truth: &str, pred: &str) -> RunRecord {
        let (t, p) = (normalize_label(truth), normalize_label(pred));
        RunRecord {
            manifest: "m".into(),
            image_id: image.into(),
            backend_id: backend.into(),
            prompt_id: "canonical".into(),
            image_width_px: 120,
            image_height_px: 50,
            reply: None,
            error: None,
            eval: eval_plate(&t, &p).unwrap(),
            prediction: p,
            truth: t,
            timestamp: "2026-01-01T00:00:00Z".into(),
        }
    }

    #[test]
    fn rows_sorted_by_plate_accuracy() {
        let records = vec![
            record("b", "1", "AAA1111", "AAA1112"),
            record("b", "2", "BBB2222", "BBB2222"),
            record("a", "1", "AAA1111", "AAA1111"),
            record("a", "2", "BBB2222", "BBB2222"),
        ];
        let c = compare(records).unwrap();
        assert_eq!(c.rows.iter().map(|r| r.backend_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let t = text_table(&c);
        assert!(t.contains(COUNTING_CONVENTION));
        assert!(t.contains("13/14"));
    }

    #[test]
    fn heatmap_marks_absent_classes_empty() {
        let c = compare(vec![record("a", "1", "AAA1111", "AAA1111")]).unwrap();
        let csv = heatmap_csv(&c);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0].split(',').count(), 37);
        let cells: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cells[0], "a/canonical");
        assert_eq!(cells[1], "100.00"); // A
        assert_eq!(cells[2], ""); // B absent
        assert_eq!(cells[1 + 27], "100.00"); // digit 1
    }

    #[test]
    fn outputs_are_deterministic() {
        let recs = || vec![record("a", "2", "BBB2222", "BBB2223"), record("a", "1", "AAA1111", "AAA1111")];
        let mut rev = recs();
        rev.reverse();
        let (x, y) = (compare(recs()).unwrap(), compare(rev).unwrap());
        assert_eq!(text_table(&x), text_table(&y));
        assert_eq!(heatmap_csv(&x), heatmap_csv(&y));
        assert_eq!(summary_json(&x), summary_json(&y));
    }
}
