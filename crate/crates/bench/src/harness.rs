//! Experiment runner over (image x backend x prompt) cells.
//!
//! Results go to an append-only JSONL run file, one [`RunRecord`] per
//! cell keyed by `(image_id, backend_id, prompt_id)`. Rerunning a plan
//! only executes the cells missing from the file.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::OpenOptions;
use std::io::{Seek, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use plate_core::extract::extract_plate_token;
use plate_core::metrics::{aggregate, eval_plate, EvalReport, PlateEval};
use plate_core::prompts::{builtin_prompts, PromptSpec};
use plate_core::{normalize_label, PlateLabel};
use serde::{Deserialize, Serialize};

use crate::backend::{mime_for_path, Backend, BackendError, CachePolicy, VisionQuery, VisionReply};
use crate::manifest::{load_manifest, manifest_dir, DatasetManifest, ImageRecord};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error("{path}: {message}")]
    RunFile { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HarnessError {
    fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
        move |source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub manifest: String,
    pub image_id: String,
    pub backend_id: String,
    pub prompt_id: String,
    pub image_width_px: u32,
    pub image_height_px: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<VisionReply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<BackendError>,
    pub prediction: PlateLabel,
    pub truth: PlateLabel,
    pub eval: PlateEval,
    pub timestamp: String,
}

pub type CellKey = (String, String, String);

impl RunRecord {
    pub fn key(&self) -> CellKey {
        (self.image_id.clone(), self.backend_id.clone(), self.prompt_id.clone())
    }

    /// Stored `eval` must equal a fresh evaluation of `(truth, prediction)`.
    pub fn verify(&self) -> Result<(), String> {
        let fresh = eval_plate(&self.truth, &self.prediction).map_err(|e| e.to_string())?;
        if fresh != self.eval {
            return Err(format!(
                "record {:?}/{:?}/{:?}: stored eval differs from recomputation",
                self.image_id, self.backend_id, self.prompt_id
            ));
        }
        Ok(())
    }
}

fn default_concurrency() -> usize {
    4
}

/// Plan file (TOML). Relative paths resolve against the plan's directory.
///
/// ```toml
/// manifest = "data/manifest.jsonl"
/// backends_file = "backends.toml"
/// backends = ["gpt-4o", "tesseract"]
/// prompts = ["canonical", "prompt3"]
/// run_file = "runs/main.jsonl"
/// cache_dir = "cache"
/// cache = "use"
/// concurrency = 4
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub manifest: PathBuf,
    #[serde(default)]
    pub backends_file: Option<PathBuf>,
    pub backends: Vec<String>,
    pub prompts: Vec<String>,
    pub run_file: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub cache: CachePolicy,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// Prompts beyond the built-ins.
    #[serde(default, rename = "prompt")]
    pub custom_prompts: Vec<PromptSpec>,
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let mut plan: ExperimentPlan =
            toml::from_str(&text).map_err(|e| HarnessError::Plan(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for p in [
            Some(&mut plan.manifest),
            plan.backends_file.as_mut(),
            Some(&mut plan.run_file),
            plan.cache_dir.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(plan)
    }

    /// Built-in prompts plus the plan's own, by id.
    pub fn prompt_catalog(&self) -> Result<BTreeMap<String, PromptSpec>, HarnessError> {
        let mut catalog: BTreeMap<String, PromptSpec> =
            builtin_prompts().into_iter().map(|p| (p.id.clone(), p)).collect();
        for p in &self.custom_prompts {
            if p.text.trim().is_empty() {
                return Err(HarnessError::Plan(format!("prompt {:?} has empty text", p.id)));
            }
            if catalog.insert(p.id.clone(), p.clone()).is_some() {
                return Err(HarnessError::Plan(format!("prompt id {:?} defined twice", p.id)));
            }
        }
        Ok(catalog)
    }
}

/// A plan whose every reference resolved.
pub struct PreparedRun {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    pub prompts: Vec<PromptSpec>,
    pub backends: Vec<Arc<dyn Backend>>,
    pub concurrency: usize,
}

impl PreparedRun {
    pub fn cell_count(&self) -> usize {
        self.manifest.records.len() * self.prompts.len() * self.backends.len()
    }
}

fn unique(ids: &[String], what: &str) -> Result<(), HarnessError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(HarnessError::Plan(format!("{what} {id:?} listed twice")));
        }
    }
    Ok(())
}

/// Checks every reference in the plan without issuing any query.
pub fn prepare(
    plan: &ExperimentPlan,
    available: &BTreeMap<String, Arc<dyn Backend>>,
) -> Result<PreparedRun, HarnessError> {
    if plan.concurrency == 0 {
        return Err(HarnessError::Plan("concurrency must be >= 1".into()));
    }
    if plan.backends.is_empty() || plan.prompts.is_empty() {
        return Err(HarnessError::Plan("plan needs at least one backend and one prompt".into()));
    }
    unique(&plan.backends, "backend")?;
    unique(&plan.prompts, "prompt")?;
    let catalog = plan.prompt_catalog()?;
    let prompts = plan
        .prompts
        .iter()
        .map(|id| {
            catalog
                .get(id)
                .cloned()
                .ok_or_else(|| HarnessError::Plan(format!("unknown prompt id {id:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let backends = plan
        .backends
        .iter()
        .map(|id| {
            available
                .get(id)
                .cloned()
                .ok_or_else(|| HarnessError::Plan(format!("unknown backend id {id:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = load_manifest(&plan.manifest).map_err(|e| HarnessError::Plan(e.to_string()))?;
    check_records(&manifest, &plan.manifest)?;
    Ok(PreparedRun {
        manifest,
        manifest_path: plan.manifest.clone(),
        prompts,
        backends,
        concurrency: plan.concurrency,
    })
}

fn check_records(manifest: &DatasetManifest, path: &Path) -> Result<(), HarnessError> {
    let dir = manifest_dir(path);
    for r in &manifest.records {
        match &r.label {
            Some(l) if !l.is_empty() => {}
            _ => return Err(HarnessError::Plan(format!("image {:?} has no label", r.id))),
        }
        if !dir.join(&r.path).is_file() {
            return Err(HarnessError::Plan(format!(
                "image {:?}: {} not found",
                r.id,
                dir.join(&r.path).display()
            )));
        }
    }
    Ok(())
}

/// Records of a run file. A final line cut short by an interrupted write
/// is dropped; any other unparseable line is an error.
pub struct RunFileState {
    pub records: Vec<RunRecord>,
    /// Byte length of the intact prefix.
    pub intact_len: u64,
    pub needs_newline: bool,
}

pub fn read_run_file(path: &Path) -> Result<RunFileState, HarnessError> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Ok(RunFileState {
                records: Vec::new(),
                intact_len: 0,
                needs_newline: false,
            })
        }
        Err(e) => return Err(HarnessError::io(path)(e)),
    };
    let mut records = Vec::new();
    let mut offset = 0usize;
    let mut lineno = 0usize;
    let mut needs_newline = false;
    while offset < bytes.len() {
        lineno += 1;
        let (line, next, complete) = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(n) => (&bytes[offset..offset + n], offset + n + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        if line.iter().all(u8::is_ascii_whitespace) {
            offset = next;
            continue;
        }
        match serde_json::from_slice::<RunRecord>(line) {
            Ok(r) => {
                records.push(r);
                needs_newline = !complete;
                offset = next;
            }
            Err(_) if !complete => {
                log::warn!(
                    "{}: dropping truncated final line {lineno} ({} bytes)",
                    path.display(),
                    line.len()
                );
                break;
            }
            Err(e) => {
                return Err(HarnessError::RunFile {
                    path: path.to_path_buf(),
                    message: format!("line {lineno}: {e}"),
                })
            }
        }
    }
    Ok(RunFileState {
        records,
        intact_len: offset as u64,
        needs_newline,
    })
}

pub fn load_run_records(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    Ok(read_run_file(path)?.records)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub planned: usize,
    pub resumed: usize,
    pub executed: usize,
    pub ok: usize,
    pub errors: usize,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Queries one cell and scores the reply. Backend failures become error
/// records with an empty prediction.
pub fn run_cell(
    manifest_name: &str,
    record: &ImageRecord,
    image: Arc<[u8]>,
    mime: &str,
    prompt: &PromptSpec,
    backend: &dyn Backend,
) -> RunRecord {
    let truth = record.label.clone().unwrap_or_else(|| normalize_label(""));
    let q = VisionQuery {
        image,
        mime: mime.to_string(),
        prompt: prompt.text.clone(),
        max_output_chars: 256,
        temperature: 0.0,
    };
    let (reply, error, prediction) = match backend.query(&q) {
        Ok(reply) => {
            let pred = extract_plate_token(&reply.text, prompt.expected_format.as_ref())
                .unwrap_or_else(|_| normalize_label(""));
            (Some(reply), None, pred)
        }
        Err(e) => (None, Some(e), normalize_label("")),
    };
    let eval = eval_plate(&truth, &prediction).unwrap_or_else(|_| PlateEval {
        truth: truth.clone(),
        pred: prediction.clone(),
        matched_chars: 0,
        truth_len: 0,
        exact: false,
    });
    RunRecord {
        manifest: manifest_name.to_string(),
        image_id: record.id.clone(),
        backend_id: backend.id().to_string(),
        prompt_id: prompt.id.clone(),
        image_width_px: record.width_px,
        image_height_px: record.height_px,
        reply,
        error,
        prediction,
        truth,
        eval,
        timestamp: now_rfc3339(),
    }
}

struct Cell<'a> {
    record: &'a ImageRecord,
    prompt: &'a PromptSpec,
    backend: &'a Arc<dyn Backend>,
}

/// Executes cells on `concurrency` workers, handing each finished record to
/// `sink` on the calling thread.
fn execute(
    run: &PreparedRun,
    cells: Vec<Cell<'_>>,
    mut sink: impl FnMut(RunRecord) -> std::io::Result<()>,
) -> std::io::Result<()> {
    let dir = manifest_dir(&run.manifest_path);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<RunRecord>();
    std::thread::scope(|s| {
        for _ in 0..run.concurrency.min(cells.len()).max(1) {
            let tx = tx.clone();
            let (cells, next, dir) = (&cells, &next, &dir);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let path = dir.join(&cell.record.path);
                let record = match std::fs::read(&path) {
                    Ok(bytes) => run_cell(
                        &run.manifest.name,
                        cell.record,
                        bytes.into(),
                        mime_for_path(&path),
                        cell.prompt,
                        cell.backend.as_ref(),
                    ),
                    Err(e) => {
                        let mut r = run_cell(
                            &run.manifest.name,
                            cell.record,
                            Arc::from(Vec::new()),
                            "image/png",
                            cell.prompt,
                            cell.backend.as_ref(),
                        );
                        r.error = Some(BackendError::new(
                            crate::backend::ErrorKind::InvalidQuery,
                            format!("reading {}: {e}", path.display()),
                        ));
                        r
                    }
                };
                if tx.send(record).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // single writer: records never interleave
        let mut result = Ok(());
        for record in rx {
            if result.is_ok() {
                result = sink(record);
            }
        }
        result
    })
}

fn planned_cells(run: &PreparedRun) -> Vec<Cell<'_>> {
    let mut cells = Vec::with_capacity(run.cell_count());
    for record in &run.manifest.records {
        for backend in &run.backends {
            for prompt in &run.prompts {
                cells.push(Cell {
                    record,
                    prompt,
                    backend,
                });
            }
        }
    }
    cells
}

/// Runs every cell missing from `run_file`, appending records as they finish.
pub fn run_experiment(run: &PreparedRun, run_file: &Path) -> Result<RunSummary, HarnessError> {
    let state = read_run_file(run_file)?;
    if let Some(other) = state.records.iter().find(|r| r.manifest != run.manifest.name) {
        return Err(HarnessError::RunFile {
            path: run_file.to_path_buf(),
            message: format!(
                "holds records for manifest {:?}, not {:?}",
                other.manifest, run.manifest.name
            ),
        });
    }
    let done: BTreeSet<CellKey> = state.records.iter().map(RunRecord::key).collect();
    let cells: Vec<Cell<'_>> = planned_cells(run)
        .into_iter()
        .filter(|c| {
            !done.contains(&(c.record.id.clone(), c.backend.id().to_string(), c.prompt.id.clone()))
        })
        .collect();
    let mut summary = RunSummary {
        planned: run.cell_count(),
        resumed: run.cell_count() - cells.len(),
        ..RunSummary::default()
    };
    if cells.is_empty() {
        return Ok(summary);
    }
    if let Some(parent) = run_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(run_file)
        .map_err(HarnessError::io(run_file))?;
    file.set_len(state.intact_len).map_err(HarnessError::io(run_file))?;
    file.seek(std::io::SeekFrom::End(0)).map_err(HarnessError::io(run_file))?;
    if state.needs_newline {
        file.write_all(b"\n").map_err(HarnessError::io(run_file))?;
    }
    execute(run, cells, |record| {
        summary.executed += 1;
        if record.error.is_some() {
            summary.errors += 1;
        } else {
            summary.ok += 1;
        }
        let mut line = serde_json::to_vec(&record).map_err(std::io::Error::other)?;
        line.push(b'\n');
        file.write_all(&line)?;
        file.flush()
    })
    .map_err(HarnessError::io(run_file))?;
    Ok(summary)
}

/// Runs one backend over the same images with each prompt and reports per prompt.
pub fn prompt_sensitivity(
    manifest_path: &Path,
    backend: Arc<dyn Backend>,
    prompts: &[PromptSpec],
    concurrency: usize,
) -> Result<Vec<(PromptSpec, EvalReport)>, HarnessError> {
    if prompts.len() < 2 {
        return Err(HarnessError::Plan("prompt sensitivity needs at least two prompts".into()));
    }
    let manifest = load_manifest(manifest_path).map_err(|e| HarnessError::Plan(e.to_string()))?;
    check_records(&manifest, manifest_path)?;
    let run = PreparedRun {
        manifest,
        manifest_path: manifest_path.to_path_buf(),
        prompts: prompts.to_vec(),
        backends: vec![backend],
        concurrency: concurrency.max(1),
    };
    let mut by_prompt: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
    execute(&run, planned_cells(&run), |r| {
        by_prompt.entry(r.prompt_id.clone()).or_default().push(r);
        Ok(())
    })
    .map_err(HarnessError::io(manifest_path))?;
    prompts
        .iter()
        .map(|p| {
            let mut records = by_prompt.remove(&p.id).unwrap_or_default();
            // fixed order so reports do not depend on scheduling
            records.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            let evals = records.into_iter().map(|r| r.eval).collect();
            let report = aggregate(evals).map_err(|e| HarnessError::Plan(e.to_string()))?;
            Ok((p.clone(), report))
        })
        .collect()
}
