//! Experiment drivers behind the CLI subcommands.
//!
//! Seeds: the configured seed is split into three derived seeds for
//! profiling, workload generation and serving, so profiling never sees the
//! random draws used for evaluation. Runs inside one experiment are
//! independent and execute on the rayon pool; results are collected in a
//! fixed order so outputs do not depend on scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use specbatch_core::acceptance::DEFAULT_FIT_MAX_S;
use specbatch_core::cost_model::fit_linear_step_time;
use specbatch_core::policy::{build_lut, simulate_cell, CellStats, ProfileConfig};
use specbatch_core::rng;
use specbatch_core::simulator::{run_simulation, summarize};
use specbatch_core::traffic::{gen_arrivals, gen_phased, Phase};
use specbatch_core::{
    AcceptanceTrace, Calibration, LinearStepModel, PhaseSchedule, Policy, Request, ServerConfig, SimulationReport,
    SpeculationLut, TraceSampler, TrafficConfig,
};

use crate::config::{ExperimentConfig, PolicySpec};
use crate::error::{HarnessError, Result};
use crate::formats::{self, Stamp};

/// Prompts in a synthetic trace built from the calibration's curve.
const SYNTHETIC_TRACE_PROMPTS: u32 = 1000;
const SYNTHETIC_TRACE_HORIZON: u32 = 80;

const PROFILE_TAG: u64 = 0x5052_4f46;
const WORKLOAD_TAG: u64 = 0x574b_4c44;
const SERVING_TAG: u64 = 0x5345_5256;

/// A loaded, validated configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub calibration: Calibration,
    pub calibration_id: String,
    pub trace: Option<AcceptanceTrace>,
    pub stamp: Stamp,
}

impl Experiment {
    pub fn from_config(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (calibration, calibration_id) = formats::read_calibration(&config.resolve(&config.calibration))?;
        let trace = match &config.trace {
            Some(path) => Some(formats::read_trace(&config.resolve(path))?),
            None => None,
        };
        let stamp = Stamp { config_hash: config.hash(), seed: config.seed };
        Ok(Self { config, calibration, calibration_id, trace, stamp })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.config.out_dir()
    }

    pub fn profile_seed(&self) -> u64 {
        rng::stream_id(&[self.config.seed, PROFILE_TAG])
    }

    pub fn workload_seed(&self) -> u64 {
        rng::stream_id(&[self.config.seed, WORKLOAD_TAG])
    }

    pub fn serving_seed(&self) -> u64 {
        rng::stream_id(&[self.config.seed, SERVING_TAG])
    }

    /// Trace sampler for the configured trace, or for a synthetic trace that
    /// follows the calibration's acceptance curve when none is configured.
    pub fn oracle(&self) -> Result<TraceSampler> {
        if let Some(trace) = &self.trace {
            return Ok(TraceSampler::new(trace.clone()));
        }
        warn!("no acceptance trace configured; sampling from the calibration's acceptance curve");
        let horizon = self.config.profile.grid.iter().copied().max().unwrap_or(0).max(SYNTHETIC_TRACE_HORIZON as usize);
        let trace = AcceptanceTrace::from_power_law(self.calibration.acceptance, SYNTHETIC_TRACE_PROMPTS, horizon as u32)?;
        Ok(TraceSampler::new(trace))
    }

    pub fn profile_config(&self) -> ProfileConfig {
        let p = &self.config.profile;
        ProfileConfig {
            s_grid: p.grid.clone(),
            sizes: p.sizes.clone(),
            mode: p.mode,
            sample_size: p.samples,
            gen_len: self.config.workload.gen_len,
            seed: self.profile_seed(),
        }
    }

    /// The configured table, or a freshly profiled one.
    pub fn lut(&self) -> Result<SpeculationLut> {
        match &self.config.lut {
            Some(path) => formats::read_lut(&self.config.resolve(path)),
            None => {
                let oracle = self.oracle()?;
                Ok(build_lut(&self.calibration, Some(&oracle), &self.profile_config(), &self.calibration_id)?)
            }
        }
    }

    /// Policies in configured order. The lookup table is only built when an
    /// adaptive policy is requested, and is then written next to the outputs.
    pub fn policies(&self) -> Result<Vec<Policy>> {
        let specs = self.config.policy_specs()?;
        let lut = if specs.contains(&PolicySpec::Adaptive) {
            let lut = self.lut()?;
            formats::write_lut(&self.out_dir().join("lut.csv"), &lut, &self.stamp)?;
            Some(lut)
        } else {
            None
        };
        Ok(specs
            .into_iter()
            .map(|spec| match spec {
                PolicySpec::Fixed(s) => Policy::Fixed(s),
                PolicySpec::Adaptive => Policy::Adaptive(lut.clone().expect("built above")),
            })
            .collect())
    }

    fn serve(&self, workload: &[Request], policy: &Policy, oracle: &TraceSampler) -> Result<SimulationReport> {
        let server = ServerConfig::new(policy.clone(), self.serving_seed()).with_max_batch(self.config.workload.max_batch);
        let report = run_simulation(workload, &server, &self.calibration.steps, oracle)?;
        report.validate(workload).map_err(|e| HarnessError::Invariant(format!("{}: {e}", report.policy)))?;
        Ok(summarize(report.records, self.config.workload.group_size, report.policy, report.seed)?)
    }

    /// Writes `workload` and reads it back, so every policy consumes the file.
    fn persist_workload(&self, path: &Path, workload: &[Request]) -> Result<Vec<Request>> {
        formats::write_workload(path, workload, &self.stamp)?;
        let back = formats::read_workload(path)?;
        if back != workload {
            return Err(HarnessError::Invariant(format!("{} does not round-trip", path.display())));
        }
        Ok(back)
    }

    fn write_run(&self, dir: &Path, name: &str, report: &SimulationReport) -> Result<()> {
        formats::write_records(&dir.join(format!("{name}.records.csv")), report, &self.stamp)?;
        formats::write_report(&dir.join(format!("{name}.report.json")), report, &self.stamp)
    }
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub stats: CellStats,
    /// Lowest per-token latency of its batch size (ties to the smaller length).
    pub optimal: bool,
}

#[derive(Serialize)]
struct SweepRow {
    batch_size: usize,
    spec_len: usize,
    steps: usize,
    total_ms: f64,
    tokens: usize,
    per_token_ms: f64,
    optimal: bool,
}

/// Simulated per-token latency over the profiling grid.
pub fn cmd_sweep(exp: &Experiment) -> Result<Vec<SweepCell>> {
    let oracle = exp.oracle()?;
    let p = exp.profile_config();
    let mut grid = p.s_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let cells: Vec<(usize, usize)> = p.sizes.iter().flat_map(|&b| grid.iter().map(move |&s| (b, s))).collect();
    info!("sweep: {} cells, {} requests each", cells.len(), p.sample_size);
    let stats = cells
        .par_iter()
        .map(|&(b, s)| simulate_cell(&exp.calibration.steps, &oracle, b, s, p.sample_size, p.gen_len, p.seed))
        .collect::<specbatch_core::Result<Vec<_>>>()?;

    let mut best: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for c in &stats {
        let cost = c.per_token_ms();
        let entry = best.entry(c.batch_size).or_insert((c.spec_len, cost));
        if cost < entry.1 {
            *entry = (c.spec_len, cost);
        }
    }
    let out: Vec<SweepCell> = stats
        .into_iter()
        .map(|stats| SweepCell { stats, optimal: best[&stats.batch_size].0 == stats.spec_len })
        .collect();

    let rows = out.iter().map(|c| SweepRow {
        batch_size: c.stats.batch_size,
        spec_len: c.stats.spec_len,
        steps: c.stats.steps,
        total_ms: c.stats.total_ms,
        tokens: c.stats.tokens,
        per_token_ms: c.stats.per_token_ms(),
        optimal: c.optimal,
    });
    formats::write_table(
        &exp.out_dir().join("sweep.csv"),
        &exp.stamp,
        &["batch_size", "spec_len", "steps", "total_ms", "tokens", "per_token_ms", "optimal"],
        rows,
    )?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// profile

/// Builds the lookup table and writes it to `out` (default `<out_dir>/lut.csv`).
pub fn cmd_profile(exp: &Experiment, out: Option<&Path>) -> Result<SpeculationLut> {
    let oracle = exp.oracle()?;
    let lut = build_lut(&exp.calibration, Some(&oracle), &exp.profile_config(), &exp.calibration_id)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| exp.out_dir().join("lut.csv"));
    formats::write_lut(&path, &lut, &exp.stamp)?;
    info!("profile: {:?} -> {}", lut.entries(), path.display());
    Ok(lut)
}

// ---------------------------------------------------------------------------
// uniform

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniformRow {
    pub batch_size: usize,
    pub spec_len: usize,
    pub adaptive_ms: f64,
    pub baseline_ms: f64,
    pub normalized_latency: f64,
    pub speedup: f64,
}

/// End-to-end time of `count` requests in fixed batches, adaptive against
/// plain decoding.
pub fn cmd_uniform(exp: &Experiment) -> Result<Vec<UniformRow>> {
    let oracle = exp.oracle()?;
    let lut = exp.lut()?;
    formats::write_lut(&exp.out_dir().join("lut.csv"), &lut, &exp.stamp)?;
    let w = &exp.config.workload;
    let seed = exp.serving_seed();
    let rows = w
        .batch_sizes
        .par_iter()
        .map(|&b| -> Result<UniformRow> {
            let s = lut.lookup(b).chosen_s;
            let run = |s| simulate_cell(&exp.calibration.steps, &oracle, b, s, w.count, w.gen_len, seed);
            let adaptive_ms = run(s)?.total_ms;
            let baseline_ms = run(0)?.total_ms;
            Ok(UniformRow {
                batch_size: b,
                spec_len: s,
                adaptive_ms,
                baseline_ms,
                normalized_latency: adaptive_ms / baseline_ms,
                speedup: baseline_ms / adaptive_ms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    formats::write_table(
        &exp.out_dir().join("uniform.csv"),
        &exp.stamp,
        &["batch_size", "spec_len", "adaptive_ms", "baseline_ms", "normalized_latency", "speedup"],
        &rows,
    )?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// dynamic

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicRow {
    pub cv: f64,
    pub interval_s: f64,
    pub policy: String,
    pub avg_latency_s: f64,
}

/// Every policy on one Gamma workload per `(interval, cv)` cell.
pub fn cmd_dynamic(exp: &Experiment) -> Result<Vec<DynamicRow>> {
    let oracle = exp.oracle()?;
    let policies = exp.policies()?;
    let w = &exp.config.workload;
    let out = exp.out_dir();
    let cells: Vec<(usize, f64, usize, f64)> = w
        .cvs
        .iter()
        .enumerate()
        .flat_map(|(ci, &cv)| w.intervals.iter().enumerate().map(move |(ii, &iv)| (ci, cv, ii, iv)))
        .collect();
    info!("dynamic: {} cells x {} policies", cells.len(), policies.len());

    let workloads = cells
        .par_iter()
        .map(|&(ci, cv, ii, iv)| -> Result<Vec<Request>> {
            let traffic = TrafficConfig::new(iv, cv, w.count)?.with_gen_len(w.gen_len);
            let mut stream = rng::stream(exp.workload_seed(), rng::stream_id(&[ci as u64, ii as u64]));
            let workload = gen_arrivals(&traffic, &mut stream)?;
            exp.persist_workload(&out.join("workloads").join(format!("cv{cv}_iv{iv}.csv")), &workload)
        })
        .collect::<Result<Vec<_>>>()?;

    let runs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..policies.len()).map(move |p| (c, p))).collect();
    let rows = runs
        .par_iter()
        .map(|&(c, p)| -> Result<DynamicRow> {
            let (_, cv, _, iv) = cells[c];
            let report = exp.serve(&workloads[c], &policies[p], &oracle)?;
            exp.write_run(&out.join("runs"), &format!("cv{cv}_iv{iv}_{}", report.policy), &report)?;
            Ok(DynamicRow { cv, interval_s: iv, policy: report.policy, avg_latency_s: report.avg_latency })
        })
        .collect::<Result<Vec<_>>>()?;
    formats::write_table(&out.join("dynamic.csv"), &exp.stamp, &["cv", "interval_s", "policy", "avg_latency_s"], &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// timeline

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseRow {
    pub phase: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub interval_s: f64,
    pub policy: String,
    pub requests: usize,
    pub avg_latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TimelineSummaryRow<'a> {
    policy: &'a str,
    requests: usize,
    duration_s: f64,
    avg_latency_s: f64,
}

#[derive(Debug, Clone)]
pub struct TimelineOutcome {
    pub schedule: PhaseSchedule,
    pub workload: Vec<Request>,
    pub reports: Vec<SimulationReport>,
    /// Per policy and phase, in policy order; phases without requests are skipped.
    pub phases: Vec<PhaseRow>,
}

pub fn timeline_schedule(config: &ExperimentConfig) -> Result<PhaseSchedule> {
    let w = &config.workload;
    if w.phases.is_empty() || w.repeat == 0 {
        return Err(HarnessError::Config("timeline needs at least one phase and repeat >= 1".into()));
    }
    let pattern = w
        .phases
        .iter()
        .map(|p| -> Result<Phase> {
            Ok(Phase { duration: p.duration, traffic: TrafficConfig::new(p.interval, p.cv, usize::MAX)?.with_gen_len(w.gen_len) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseSchedule::alternating(&pattern, w.repeat, w.max_requests)?)
}

/// Every policy on one phase-switching workload.
pub fn cmd_timeline(exp: &Experiment) -> Result<TimelineOutcome> {
    let oracle = exp.oracle()?;
    let policies = exp.policies()?;
    let schedule = timeline_schedule(&exp.config)?;
    let out = exp.out_dir();
    let generated = gen_phased(&schedule, &mut rng::stream(exp.workload_seed(), rng::stream_id(&[WORKLOAD_TAG])))?;
    if generated.is_empty() {
        return Err(HarnessError::Config("phase schedule produced no requests".into()));
    }
    let workload = exp.persist_workload(&out.join("timeline_workload.csv"), &generated)?;
    info!("timeline: {} requests over {} s", workload.len(), schedule.total_duration());

    let reports = policies
        .par_iter()
        .map(|policy| -> Result<SimulationReport> {
            let report = exp.serve(&workload, policy, &oracle)?;
            exp.write_run(&out.join("runs"), &format!("timeline_{}", report.policy), &report)?;
            formats::write_timeline(&out.join(format!("timeline-{}.csv", report.policy)), &report, &exp.stamp)?;
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;

    let bounds = schedule.boundaries();
    let mut phases = Vec::new();
    for report in &reports {
        let mut acc = vec![(0.0, 0usize); bounds.len()];
        for r in &report.records {
            let i = schedule.phase_of(r.t_a);
            acc[i].0 += r.latency;
            acc[i].1 += 1;
        }
        for (i, &(sum, n)) in acc.iter().enumerate().filter(|(_, a)| a.1 > 0) {
            phases.push(PhaseRow {
                phase: i,
                start_s: bounds[i].0,
                end_s: bounds[i].1,
                interval_s: schedule.phases[i].traffic.mean_interval,
                policy: report.policy.clone(),
                requests: n,
                avg_latency_s: sum / n as f64,
            });
        }
    }
    formats::write_table(
        &out.join("timeline_phases.csv"),
        &exp.stamp,
        &["phase", "start_s", "end_s", "interval_s", "policy", "requests", "avg_latency_s"],
        &phases,
    )?;
    let summary = reports.iter().map(|r| TimelineSummaryRow {
        policy: &r.policy,
        requests: r.records.len(),
        duration_s: schedule.total_duration(),
        avg_latency_s: r.avg_latency,
    });
    formats::write_table(
        &out.join("timeline_summary.csv"),
        &exp.stamp,
        &["policy", "requests", "duration_s", "avg_latency_s"],
        summary,
    )?;
    Ok(TimelineOutcome { schedule, workload, reports, phases })
}

// ---------------------------------------------------------------------------
// fit

#[derive(Serialize)]
struct AcceptanceFitRow {
    spec_len: usize,
    expected_correct: f64,
    fitted: f64,
}

#[derive(Serialize)]
struct StepFitRow {
    batch_size: usize,
    slope: f64,
    intercept: f64,
    non_positive_slope: bool,
}

/// Refits the acceptance curve from the trace and, when step samples are
/// configured, the per-batch slopes and the shared intercept. Writes the
/// updated calibration to `<out_dir>/calibration.json`.
pub fn cmd_fit(exp: &Experiment) -> Result<Calibration> {
    let trace = exp
        .trace
        .as_ref()
        .ok_or_else(|| HarnessError::Config("fit needs an acceptance trace".into()))?;
    let out = exp.out_dir();
    let outcome = trace.fit()?;
    if outcome.clamped {
        warn!("acceptance exponent {} exceeds 1, clamped", outcome.raw_gamma);
    }
    let max_s = DEFAULT_FIT_MAX_S.min(trace.horizon() as usize);
    let rows = (1..=max_s)
        .map(|s| -> Result<AcceptanceFitRow> {
            Ok(AcceptanceFitRow { spec_len: s, expected_correct: trace.estimate_expected_correct(s)?, fitted: outcome.fit.eval(s as f64) })
        })
        .collect::<Result<Vec<_>>>()?;
    formats::write_table(&out.join("acceptance_fit.csv"), &exp.stamp, &["spec_len", "expected_correct", "fitted"], rows)?;

    let steps = match &exp.config.step_samples {
        None => exp.calibration.steps.clone(),
        Some(path) => {
            let samples = formats::read_step_samples(&exp.config.resolve(path))?;
            let mut by_batch: BTreeMap<usize, Vec<_>> = BTreeMap::new();
            for sample in samples {
                by_batch.entry(sample.batch_size).or_default().push(sample);
            }
            let mut fits = Vec::new();
            for (b, group) in &by_batch {
                let fit = fit_linear_step_time(group)?;
                if fit.non_positive_slope {
                    warn!("batch size {b}: fitted slope {} is not positive", fit.slope);
                }
                fits.push(StepFitRow { batch_size: *b, slope: fit.slope, intercept: fit.intercept, non_positive_slope: fit.non_positive_slope });
            }
            let beta = fits.iter().map(|f| f.intercept).sum::<f64>() / fits.len().max(1) as f64;
            let alpha = fits.iter().map(|f| (f.batch_size, f.slope)).collect();
            formats::write_table(
                &out.join("step_fit.csv"),
                &exp.stamp,
                &["batch_size", "slope", "intercept", "non_positive_slope"],
                &fits,
            )?;
            LinearStepModel::new(alpha, beta.max(0.0), exp.calibration.steps.ssm_points().to_vec())?
        }
    };
    let calibration = Calibration { steps, acceptance: outcome.fit };
    formats::write_calibration(&out.join("calibration.json"), &calibration, Some(&exp.stamp))?;
    Ok(calibration)
}
