//! Speculation-length policies.
//!
//! The adaptive policy profiles a handful of batch sizes (powers of two)
//! before serving, stores the latency-minimising speculation length for each
//! in a lookup table, and at serving time picks the entry for the formed
//! batch size. Unprofiled sizes take the smaller length of their two
//! profiled neighbours.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::cost_model::{optimal_speculation_discrete, Calibration, LinearStepModel};
use crate::engine::{run_batch, DraftOracle, SequenceState};
use crate::error::{Error, Result};
use crate::rng;

/// Default speculation grid `0..=8`; 0 is plain decoding.
pub fn default_grid() -> Vec<usize> {
    (0..=8).collect()
}

/// Default profiled batch sizes.
pub fn default_sizes() -> Vec<usize> {
    alloc::vec![1, 2, 4, 8, 16, 32]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileMode {
    /// Grid search over the closed-form prediction.
    Analytic,
    /// Grid search over simulated batches.
    Simulated,
}

impl fmt::Display for ProfileMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileMode::Analytic => "analytic",
            ProfileMode::Simulated => "simulated",
        })
    }
}

impl core::str::FromStr for ProfileMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(ProfileMode::Analytic),
            "simulated" => Ok(ProfileMode::Simulated),
            _ => Err(Error::InvalidParameter("profile mode must be analytic or simulated")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub mode: ProfileMode,
    pub sample_size: usize,
    pub calibration_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileConfig {
    pub s_grid: Vec<usize>,
    pub sizes: Vec<usize>,
    pub mode: ProfileMode,
    /// Profiling requests per `(b, s)` cell in simulated mode.
    pub sample_size: usize,
    /// Tokens generated per profiling request.
    pub gen_len: usize,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            s_grid: default_grid(),
            sizes: default_sizes(),
            mode: ProfileMode::Simulated,
            sample_size: 200,
            gen_len: 128,
            seed: 0,
        }
    }
}

/// Profiled mapping from batch size to speculation length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeculationLut {
    entries: Vec<(usize, usize)>,
    s_grid: Vec<usize>,
    provenance: Provenance,
}

impl SpeculationLut {
    pub fn new(mut entries: Vec<(usize, usize)>, mut s_grid: Vec<usize>, provenance: Provenance) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidParameter("lookup table has no entries"));
        }
        s_grid.sort_unstable();
        s_grid.dedup();
        entries.sort_unstable_by_key(|e| e.0);
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParameter("lookup table repeats a batch size"));
        }
        if entries.iter().any(|e| !e.0.is_power_of_two()) {
            return Err(Error::InvalidParameter("profiled batch sizes must be powers of two"));
        }
        if entries.iter().any(|e| s_grid.binary_search(&e.1).is_err()) {
            return Err(Error::InvalidParameter("lookup entry outside the speculation grid"));
        }
        Ok(Self { entries, s_grid, provenance })
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn s_grid(&self) -> &[usize] {
        &self.s_grid
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Entry for `b`, falling back to the smaller neighbour entry between
    /// profiled sizes and to the boundary entry outside them.
    pub fn lookup(&self, b: usize) -> PolicyDecision {
        let (chosen_s, source) = match self.entries.binary_search_by_key(&b, |e| e.0) {
            Ok(i) => (self.entries[i].1, DecisionSource::LutExact),
            Err(0) => (self.entries[0].1, DecisionSource::LutClamped),
            Err(i) if i == self.entries.len() => (self.entries[i - 1].1, DecisionSource::LutClamped),
            Err(i) => (
                self.entries[i - 1].1.min(self.entries[i].1),
                DecisionSource::LutInterpolated,
            ),
        };
        PolicyDecision { batch_size: b, chosen_s, source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecisionSource {
    LutExact,
    LutInterpolated,
    LutClamped,
    Fixed,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDecision {
    pub batch_size: usize,
    pub chosen_s: usize,
    pub source: DecisionSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Policy {
    Adaptive(SpeculationLut),
    Fixed(usize),
}

impl Policy {
    pub fn none() -> Self {
        Policy::Fixed(0)
    }

    pub fn decide(&self, b: usize) -> PolicyDecision {
        match self {
            Policy::Adaptive(lut) => lut.lookup(b),
            Policy::Fixed(0) => PolicyDecision { batch_size: b, chosen_s: 0, source: DecisionSource::None },
            &Policy::Fixed(s) => PolicyDecision { batch_size: b, chosen_s: s, source: DecisionSource::Fixed },
        }
    }

    /// `adaptive`, `none` or `fixed-<s>`.
    pub fn label(&self) -> String {
        match self {
            Policy::Adaptive(_) => "adaptive".to_string(),
            Policy::Fixed(0) => "none".to_string(),
            Policy::Fixed(s) => alloc::format!("fixed-{s}"),
        }
    }
}

/// Policy that always answers `s`; `fixed_policy(0)` is plain decoding.
pub fn fixed_policy(s: usize) -> Policy {
    Policy::Fixed(s)
}

/// Aggregate of the simulated batches of one `(b, s)` profiling cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub batch_size: usize,
    pub spec_len: usize,
    pub batches: usize,
    pub steps: usize,
    pub total_ms: f64,
    pub tokens: usize,
}

impl CellStats {
    /// Mean batch time per generated token of one sequence.
    pub fn per_token_ms(&self) -> f64 {
        self.total_ms * self.batch_size as f64 / self.tokens as f64
    }
}

/// Simulates `ceil(requests / b)` fresh batches of `b` sequences.
///
/// The random stream depends on `(seed, b)` only, so every speculation
/// length of a batch size replays the same sequence of trace draws.
pub fn simulate_cell<O: DraftOracle>(
    cost: &LinearStepModel,
    oracle: &O,
    b: usize,
    s: usize,
    requests: usize,
    gen_len: usize,
    seed: u64,
) -> Result<CellStats> {
    if b == 0 || requests == 0 {
        return Err(Error::InvalidParameter("profiling cell needs b >= 1 and requests >= 1"));
    }
    let batches = requests.div_ceil(b);
    let mut rng = rng::stream(seed, rng::stream_id(&[0x5052_4f46, b as u64]));
    let mut stats = CellStats { batch_size: b, spec_len: s, batches, steps: 0, total_ms: 0.0, tokens: 0 };
    for k in 0..batches {
        let mut states = (0..b)
            .map(|i| SequenceState::new((k * b + i) as u64, gen_len))
            .collect::<Result<Vec<_>>>()?;
        let res = run_batch(&mut states, s, cost, oracle, &mut rng)?;
        stats.steps += res.steps;
        stats.total_ms += res.total_time_ms;
        stats.tokens += res.tokens_generated;
    }
    Ok(stats)
}

/// Profiles every configured batch size and keeps the per-token-latency
/// argmin over the grid (ties toward the smaller length). Simulated mode
/// needs a draft oracle.
pub fn build_lut<O: DraftOracle>(
    calibration: &Calibration,
    oracle: Option<&O>,
    config: &ProfileConfig,
    calibration_id: &str,
) -> Result<SpeculationLut> {
    if config.s_grid.is_empty() {
        return Err(Error::InvalidParameter("empty speculation grid"));
    }
    if config.sizes.is_empty() || config.sizes.iter().any(|b| !b.is_power_of_two()) {
        return Err(Error::InvalidParameter("profiled batch sizes must be powers of two"));
    }
    let mut grid = config.s_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let mut entries = Vec::with_capacity(config.sizes.len());
    for &b in &config.sizes {
        let s = match config.mode {
            ProfileMode::Analytic => {
                optimal_speculation_discrete(&calibration.steps, &calibration.acceptance, config.gen_len, b, &grid)?
            }
            ProfileMode::Simulated => {
                let oracle = oracle.ok_or(Error::InvalidParameter("simulated profiling needs an acceptance trace"))?;
                let mut best: Option<(usize, f64)> = None;
                for &s in &grid {
                    let cost = simulate_cell(
                        &calibration.steps,
                        oracle,
                        b,
                        s,
                        config.sample_size,
                        config.gen_len,
                        config.seed,
                    )?
                    .per_token_ms();
                    if best.is_none_or(|(_, c)| cost < c) {
                        best = Some((s, cost));
                    }
                }
                best.map(|(s, _)| s).expect("grid is non-empty")
            }
        };
        entries.push((b, s));
    }
    SpeculationLut::new(
        entries,
        grid,
        Provenance {
            seed: config.seed,
            mode: config.mode,
            sample_size: config.sample_size,
            calibration_id: calibration_id.to_string(),
        },
    )
}
