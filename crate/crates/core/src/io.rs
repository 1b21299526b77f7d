//! On-disk formats: instance JSON, per-step trace CSV, run summaries and
//! sweep tables.
//!
//! All writers go through [`write_atomic`] (temp file in the target directory,
//! then rename), so readers never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generate::GeneratedInstance;
use crate::linalg::Matrix;
use crate::model::{ModelError, ProblemInstance, WMode};
use crate::optimizer::{RunResult, TraceRecord};
use crate::strategy::StrategyKind;

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: usize,
        message: String,
    },
    #[error("{path}: unsupported format_version `{version}` (expected `{FORMAT_VERSION}`)")]
    UnknownVersion { path: PathBuf, version: String },
    #[error("{path}: {message}")]
    Dimension { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: ModelError,
    },
    #[error("{path}: bad trace: {message}")]
    Trace { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a temp file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Where an instance came from, stored alongside it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InstanceMeta {
    pub seed: Option<u64>,
    pub family: Option<String>,
}

impl From<&GeneratedInstance> for InstanceMeta {
    fn from(g: &GeneratedInstance) -> Self {
        Self {
            seed: Some(g.spec.seed),
            family: Some(g.spec.family.name().to_string()),
        }
    }
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    format_version: String,
    V: usize,
    d: usize,
    T: usize,
    H: Vec<Vec<f64>>,
    W: Vec<Vec<f64>>,
    y: Vec<usize>,
    w_mode: WMode,
    v_star: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    family: Option<String>,
}

pub fn instance_to_json(instance: &ProblemInstance, meta: &InstanceMeta) -> String {
    let file = InstanceFile {
        format_version: FORMAT_VERSION.to_string(),
        V: instance.vocab(),
        d: instance.dim(),
        T: instance.positions(),
        H: instance.hidden().to_rows(),
        W: instance.embeddings().to_rows(),
        y: instance.targets().to_vec(),
        w_mode: instance.w_mode(),
        v_star: instance.v_star(),
        seed: meta.seed,
        family: meta.family.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("instance serializes");
    s.push('\n');
    s
}

pub fn save_instance(
    instance: &ProblemInstance,
    meta: &InstanceMeta,
    path: &Path,
) -> Result<(), IoError> {
    write_atomic(path, instance_to_json(instance, meta).as_bytes())
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let preceding: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (preceding + column.saturating_sub(1)).min(text.len())
}

/// Parses and validates an instance document. `path` only labels errors.
pub fn instance_from_json(
    text: &str,
    path: &Path,
) -> Result<(ProblemInstance, InstanceMeta), IoError> {
    let file: InstanceFile = serde_json::from_str(text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(IoError::UnknownVersion {
            path: path.to_path_buf(),
            version: file.format_version,
        });
    }
    let dim_err = |message: String| IoError::Dimension {
        path: path.to_path_buf(),
        message,
    };
    if file.W.len() != file.V {
        return Err(dim_err(format!(
            "V = {} but W has {} rows",
            file.V,
            file.W.len()
        )));
    }
    if file.H.len() != file.T {
        return Err(dim_err(format!(
            "T = {} but H has {} rows",
            file.T,
            file.H.len()
        )));
    }
    if file.y.len() != file.T {
        return Err(dim_err(format!(
            "T = {} but y has {} entries",
            file.T,
            file.y.len()
        )));
    }
    for (name, rows) in [("H", &file.H), ("W", &file.W)] {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != file.d) {
            return Err(dim_err(format!(
                "d = {} but {name} row {i} has {} entries",
                file.d,
                r.len()
            )));
        }
    }
    let hidden = Matrix::from_rows(&file.H).expect("checked row lengths");
    let emb = Matrix::from_rows(&file.W).expect("checked row lengths");
    let instance = ProblemInstance::new(hidden, emb, file.y, file.w_mode, Some(file.v_star))
        .map_err(|source| IoError::Model {
            path: path.to_path_buf(),
            source,
        })?;
    Ok((
        instance,
        InstanceMeta {
            seed: file.seed,
            family: file.family,
        },
    ))
}

pub fn load_instance(path: &Path) -> Result<(ProblemInstance, InstanceMeta), IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    instance_from_json(&text, path)
}

/// CSV header for a strategy's trace with `score_len` score columns.
pub fn trace_header(kind: StrategyKind, score_len: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["step", "ob1", "ob2", "entropy", "n11", "n12", "n21", "n22"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..score_len).map(|i| format!("s{i}")));
    if kind == StrategyKind::Soft {
        cols.extend((0..6).map(|i| format!("a{i}")));
    } else {
        cols.push("decision".into());
    }
    cols.push("dh_norm".into());
    cols.push("dw_norm".into());
    cols
}

/// Number of score columns each strategy records.
pub fn score_len(kind: StrategyKind) -> usize {
    if kind == StrategyKind::HardJPlus {
        15
    } else {
        6
    }
}

fn num(x: f64) -> String {
    // shortest repr that round-trips
    format!("{x:?}")
}

pub fn trace_to_csv(result: &RunResult) -> String {
    let kind = result.strategy;
    let mut out = trace_header(kind, score_len(kind)).join(",");
    out.push('\n');
    for r in &result.trace {
        let mut fields = vec![r.step.to_string(), num(r.ob1), num(r.ob2), num(r.entropy)];
        fields.extend(r.norms.iter().map(|&x| num(x)));
        fields.extend(r.scores.iter().map(|&x| num(x)));
        if kind == StrategyKind::Soft {
            let alpha = r.alpha.unwrap_or([f64::NAN; 6]);
            fields.extend(alpha.iter().map(|&x| num(x)));
        } else {
            fields.push(r.chosen_index.map(|i| i.to_string()).unwrap_or_default());
        }
        fields.push(num(r.dh_norm));
        fields.push(num(r.dw_norm));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn write_trace(result: &RunResult, path: &Path) -> Result<(), IoError> {
    write_atomic(path, trace_to_csv(result).as_bytes())
}

/// Reads a trace written by [`write_trace`] back into records.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_trace(&text, path)
}

pub fn parse_trace(text: &str, path: &Path) -> Result<Vec<TraceRecord>, IoError> {
    let bad = |message: String| IoError::Trace {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let score_cols = header
        .iter()
        .filter(|h| h.starts_with('s') && h[1..].parse::<usize>().is_ok())
        .count();
    let soft = header.iter().any(|h| h == "a0");
    let expected = trace_header(
        if soft {
            StrategyKind::Soft
        } else {
            StrategyKind::HardJ6
        },
        score_cols,
    );
    if header != expected {
        return Err(bad(format!("unexpected header {header:?}")));
    }

    let mut records = Vec::new();
    for (line, row) in reader.records().enumerate() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != header.len() {
            return Err(bad(format!(
                "row {line} has {} fields, expected {}",
                row.len(),
                header.len()
            )));
        }
        let f = |i: usize| -> Result<f64, IoError> {
            row[i]
                .parse::<f64>()
                .map_err(|e| bad(format!("row {line} column {}: {e}", header[i])))
        };
        let step = row[0]
            .parse::<usize>()
            .map_err(|e| bad(format!("row {line} step: {e}")))?;
        let mut col = 8;
        let scores = (col..col + score_cols)
            .map(f)
            .collect::<Result<Vec<_>, _>>()?;
        col += score_cols;
        let (chosen_index, alpha) = if soft {
            let mut a = [0.0; 6];
            for (k, slot) in a.iter_mut().enumerate() {
                *slot = f(col + k)?;
            }
            col += 6;
            (None, Some(a))
        } else {
            let cell = &row[col];
            col += 1;
            let idx = if cell.is_empty() {
                None
            } else {
                Some(
                    cell.parse::<usize>()
                        .map_err(|e| bad(format!("row {line} decision: {e}")))?,
                )
            };
            (idx, None)
        };
        records.push(TraceRecord {
            step,
            ob1: f(1)?,
            ob2: f(2)?,
            entropy: f(3)?,
            norms: [f(4)?, f(5)?, f(6)?, f(7)?],
            scores,
            chosen_index,
            alpha,
            dh_norm: f(col)?,
            dw_norm: f(col + 1)?,
        });
    }
    Ok(records)
}

/// One run's line in a summary document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub strategy: String,
    pub final_ob1: f64,
    pub final_ob2: f64,
    pub stop_reason: String,
    pub steps: usize,
    /// Per-slot selection histogram; absent for the baselines.
    pub selection_counts: Option<Vec<usize>>,
}

impl RunSummary {
    pub fn new(label: impl Into<String>, result: &RunResult) -> Self {
        Self {
            label: label.into(),
            strategy: result.strategy.name().to_string(),
            final_ob1: result.objectives.ob1,
            final_ob2: result.objectives.ob2,
            stop_reason: result.stop_reason.as_str().to_string(),
            steps: result.trace.len(),
            selection_counts: result.selection_counts(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub format_version: String,
    pub runs: Vec<RunSummary>,
}

pub fn summary_to_json(runs: Vec<RunSummary>) -> String {
    let file = SummaryFile {
        format_version: FORMAT_VERSION.to_string(),
        runs,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("summary serializes");
    s.push('\n');
    s
}

pub fn write_summary(runs: Vec<RunSummary>, path: &Path) -> Result<(), IoError> {
    write_atomic(path, summary_to_json(runs).as_bytes())
}

pub fn read_summary(path: &Path) -> Result<SummaryFile, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| IoError::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })
}

/// One row of a parameter sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub result: RunSummary,
    /// Largest soft weight at the first step (soft strategy only).
    pub alpha_max_first: Option<f64>,
    /// Mean over steps of the largest soft weight (soft strategy only).
    pub alpha_max_mean: Option<f64>,
}

impl SweepRow {
    pub fn new(value: f64, result: &RunResult) -> Self {
        let maxes: Vec<f64> = result
            .trace
            .iter()
            .filter_map(|r| r.alpha.map(|a| a.iter().copied().fold(f64::MIN, f64::max)))
            .collect();
        let mean = (!maxes.is_empty()).then(|| maxes.iter().sum::<f64>() / maxes.len() as f64);
        Self {
            value,
            result: RunSummary::new(format!("{value:?}"), result),
            alpha_max_first: maxes.first().copied(),
            alpha_max_mean: mean,
        }
    }
}

pub fn sweep_to_csv(param: &str, rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{param},strategy,final_ob1,final_ob2,stop_reason,steps,alpha_max_first,alpha_max_mean\n"
    );
    let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            num(r.value),
            r.result.strategy,
            num(r.result.final_ob1),
            num(r.result.final_ob2),
            r.result.stop_reason,
            r.result.steps,
            opt(r.alpha_max_first),
            opt(r.alpha_max_mean),
        ));
    }
    out
}

pub fn write_sweep(param: &str, rows: &[SweepRow], path: &Path) -> Result<(), IoError> {
    write_atomic(path, sweep_to_csv(param, rows).as_bytes())
}
