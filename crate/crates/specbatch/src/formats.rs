//! On-disk formats.
//!
//! CSV files may start with `# key=value` metadata lines; readers skip them
//! (and parse the keys they need). Floats are written in shortest round-trip
//! form so a file read back reproduces the exact values that were written.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use specbatch_core::cost_model::StepTimeSample;
use specbatch_core::policy::{ProfileMode, Provenance, SpeculationLut};
use specbatch_core::simulator::RequestRecord;
use specbatch_core::{AcceptanceTrace, Calibration, LinearStepModel, PowerLawFit, Request, SimulationReport};

use crate::error::{HarnessError, Result};

/// Provenance stamped into every output artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    fn comment_lines(&self) -> String {
        format!("# config_hash={}\n# seed={}\n", self.config_hash, self.seed)
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))
}

/// `# key=value` lines of a CSV file.
fn metadata(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.strip_prefix('#'))
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn meta_value<'a>(meta: &'a [(String, String)], key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn parse_rows<T: for<'de> Deserialize<'de>>(path: &Path, text: &str, required: &[&str]) -> Result<Vec<T>> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| HarnessError::format(path, e))?.clone();
    if let Some(missing) = required.iter().find(|c| !headers.iter().any(|h| h == **c)) {
        return Err(HarnessError::format(path, format!("missing column `{missing}`")));
    }
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| HarnessError::format(path, e))
}

fn to_csv<T: Serialize>(prefix: String, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<Vec<u8>> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(prefix.into_bytes());
    writer.write_record(header).map_err(|e| HarnessError::Config(e.to_string()))?;
    for row in rows {
        writer.serialize(row).map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    writer.into_inner().map_err(|e| HarnessError::Config(e.to_string()))
}

fn write_csv<T: Serialize>(path: &Path, prefix: String, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    write_atomic(path, &to_csv(prefix, rows, header)?)
}

// ---------------------------------------------------------------------------
// calibration

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AcceptanceJson {
    c: f64,
    gamma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CalibrationJson {
    alpha: Vec<(usize, f64)>,
    beta: f64,
    ssm_step: Vec<(usize, f64)>,
    acceptance: AcceptanceJson,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    seed: Option<u64>,
}

/// Calibration and its id (the file stem).
pub fn read_calibration(path: &Path) -> Result<(Calibration, String)> {
    let raw: CalibrationJson =
        serde_json::from_str(&read_text(path)?).map_err(|e| HarnessError::format(path, e))?;
    let steps = LinearStepModel::new(raw.alpha, raw.beta, raw.ssm_step).map_err(|e| HarnessError::format(path, e))?;
    let acceptance = PowerLawFit::new(raw.acceptance.c, raw.acceptance.gamma).map_err(|e| HarnessError::format(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok((Calibration { steps, acceptance }, id))
}

pub fn write_calibration(path: &Path, calibration: &Calibration, stamp: Option<&Stamp>) -> Result<()> {
    let raw = CalibrationJson {
        alpha: calibration.steps.alpha_points().to_vec(),
        beta: calibration.steps.beta(),
        ssm_step: calibration.steps.ssm_points().to_vec(),
        acceptance: AcceptanceJson { c: calibration.acceptance.c(), gamma: calibration.acceptance.gamma() },
        config_hash: stamp.map(|s| s.config_hash.clone()),
        seed: stamp.map(|s| s.seed),
    };
    let mut text = serde_json::to_string_pretty(&raw).map_err(|e| HarnessError::Config(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

// ---------------------------------------------------------------------------
// acceptance trace

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    prompt_id: u64,
    correct_tokens: u32,
}

pub fn read_trace(path: &Path) -> Result<AcceptanceTrace> {
    let text = read_text(path)?;
    let meta = metadata(&text);
    let horizon = meta_value(&meta, "horizon")
        .ok_or_else(|| HarnessError::format(path, "missing `# horizon=` line"))?
        .parse::<u32>()
        .map_err(|e| HarnessError::format(path, e))?;
    let rows: Vec<TraceRow> = parse_rows(path, &text, &["prompt_id", "correct_tokens"])?;
    AcceptanceTrace::new(rows.into_iter().map(|r| r.correct_tokens).collect(), horizon)
        .map_err(|e| HarnessError::format(path, e))
}

pub fn write_trace(path: &Path, trace: &AcceptanceTrace) -> Result<()> {
    let rows = trace
        .samples()
        .iter()
        .enumerate()
        .map(|(i, &l)| TraceRow { prompt_id: i as u64, correct_tokens: l });
    write_csv(path, format!("# horizon={}\n", trace.horizon()), &["prompt_id", "correct_tokens"], rows)
}

// ---------------------------------------------------------------------------
// step-time samples

#[derive(Debug, Serialize, Deserialize)]
struct StepRow {
    batch_size: usize,
    query_len: usize,
    time_ms: f64,
}

pub fn read_step_samples(path: &Path) -> Result<Vec<StepTimeSample>> {
    let rows: Vec<StepRow> = parse_rows(path, &read_text(path)?, &["batch_size", "query_len", "time_ms"])?;
    rows.into_iter()
        .map(|r| StepTimeSample::new(r.batch_size, r.query_len, r.time_ms).map_err(|e| HarnessError::format(path, e)))
        .collect()
}

// ---------------------------------------------------------------------------
// workload

#[derive(Debug, Serialize, Deserialize)]
struct WorkloadRow {
    request_id: u64,
    arrival_s: f64,
    gen_len: usize,
}

pub fn read_workload(path: &Path) -> Result<Vec<Request>> {
    let rows: Vec<WorkloadRow> = parse_rows(path, &read_text(path)?, &["request_id", "arrival_s", "gen_len"])?;
    Ok(rows
        .into_iter()
        .map(|r| Request { id: r.request_id, arrival: r.arrival_s, gen_len: r.gen_len })
        .collect())
}

pub fn write_workload(path: &Path, workload: &[Request], stamp: &Stamp) -> Result<()> {
    let rows = workload.iter().map(|r| WorkloadRow { request_id: r.id, arrival_s: r.arrival, gen_len: r.gen_len });
    write_csv(path, stamp.comment_lines(), &["request_id", "arrival_s", "gen_len"], rows)
}

// ---------------------------------------------------------------------------
// lookup table

#[derive(Debug, Serialize, Deserialize)]
struct LutRow {
    batch_size: usize,
    spec_len: usize,
}

pub fn read_lut(path: &Path) -> Result<SpeculationLut> {
    let text = read_text(path)?;
    let meta = metadata(&text);
    let parse_u64 = |key: &str| -> Result<u64> {
        meta_value(&meta, key)
            .map(|v| v.parse::<u64>().map_err(|e| HarnessError::format(path, e)))
            .unwrap_or(Ok(0))
    };
    let grid = match meta_value(&meta, "grid") {
        Some(g) => parse_list(g).map_err(|e| HarnessError::format(path, e))?,
        None => specbatch_core::policy::default_grid(),
    };
    let mode = meta_value(&meta, "mode")
        .unwrap_or("analytic")
        .parse::<ProfileMode>()
        .map_err(|e| HarnessError::format(path, e))?;
    let provenance = Provenance {
        seed: parse_u64("seed")?,
        mode,
        sample_size: parse_u64("sample_size")? as usize,
        calibration_id: meta_value(&meta, "calibration").unwrap_or_default().to_string(),
    };
    let rows: Vec<LutRow> = parse_rows(path, &text, &["batch_size", "spec_len"])?;
    SpeculationLut::new(rows.into_iter().map(|r| (r.batch_size, r.spec_len)).collect(), grid, provenance)
        .map_err(|e| HarnessError::format(path, e))
}

pub fn write_lut(path: &Path, lut: &SpeculationLut, stamp: &Stamp) -> Result<()> {
    let p = lut.provenance();
    let grid: Vec<String> = lut.s_grid().iter().map(|s| s.to_string()).collect();
    let prefix = format!(
        "# seed={}\n# mode={}\n# calibration={}\n# sample_size={}\n# grid={}\n# config_hash={}\n# config_seed={}\n",
        p.seed,
        p.mode,
        p.calibration_id,
        p.sample_size,
        grid.join(","),
        stamp.config_hash,
        stamp.seed,
    );
    let rows = lut.entries().iter().map(|&(batch_size, spec_len)| LutRow { batch_size, spec_len });
    write_csv(path, prefix, &["batch_size", "spec_len"], rows)
}

/// Parses `1,2,4` or an inclusive range `0..8`.
pub fn parse_list(text: &str) -> std::result::Result<Vec<usize>, String> {
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|e| format!("bad range end: {e}"))?;
        if lo > hi {
            return Err(format!("empty range {text}"));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad list item `{t}`: {e}")))
        .collect()
}

// ---------------------------------------------------------------------------
// simulation outputs

#[derive(Debug, Serialize, Deserialize)]
struct RecordRow<'a> {
    request_id: u64,
    t_a_s: f64,
    t_start_s: f64,
    t_b_s: f64,
    latency_s: f64,
    batch_size: usize,
    spec_len: usize,
    policy: &'a str,
}

pub const RECORD_COLUMNS: [&str; 8] =
    ["request_id", "t_a_s", "t_start_s", "t_b_s", "latency_s", "batch_size", "spec_len", "policy"];

pub fn write_records(path: &Path, report: &SimulationReport, stamp: &Stamp) -> Result<()> {
    let rows = report.records.iter().map(|r: &RequestRecord| RecordRow {
        request_id: r.request_id,
        t_a_s: r.t_a,
        t_start_s: r.t_start,
        t_b_s: r.t_b,
        latency_s: r.latency,
        batch_size: r.batch_size,
        spec_len: r.spec_len,
        policy: &report.policy,
    });
    write_csv(path, stamp.comment_lines(), &RECORD_COLUMNS, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub policy: String,
    pub seed: u64,
    pub avg_latency_s: f64,
    pub timeline: Vec<(f64, f64)>,
    pub config_hash: String,
}

pub fn write_report(path: &Path, report: &SimulationReport, stamp: &Stamp) -> Result<()> {
    let json = ReportJson {
        policy: report.policy.clone(),
        seed: report.seed,
        avg_latency_s: report.avg_latency,
        timeline: report.timeline.clone(),
        config_hash: stamp.config_hash.clone(),
    };
    let mut text = serde_json::to_string_pretty(&json).map_err(|e| HarnessError::Config(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_report(path: &Path) -> Result<ReportJson> {
    serde_json::from_str(&read_text(path)?).map_err(|e| HarnessError::format(path, e))
}

#[derive(Debug, Serialize)]
struct TimelineRow {
    group_start_s: f64,
    avg_latency_s: f64,
}

pub fn write_timeline(path: &Path, report: &SimulationReport, stamp: &Stamp) -> Result<()> {
    let prefix = format!("{}# policy={}\n", stamp.comment_lines(), report.policy);
    let rows = report.timeline.iter().map(|&(t, l)| TimelineRow { group_start_s: t, avg_latency_s: l });
    write_csv(path, prefix, &["group_start_s", "avg_latency_s"], rows)
}

/// Writes arbitrary rows with a stamp header.
pub fn write_table<T: Serialize>(path: &Path, stamp: &Stamp, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    write_csv(path, stamp.comment_lines(), header, rows)
}
