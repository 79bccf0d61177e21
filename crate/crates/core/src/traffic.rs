//! Request arrival processes.
//!
//! Inter-arrival gaps are Gamma distributed with shape `1 / cv^2` and scale
//! `mean * cv^2`, which gives mean `mean` and coefficient of variation `cv`.
//! `cv = 1` is a Poisson process; larger values make traffic burstier.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{Error, Result};

/// Tokens generated per request unless configured otherwise.
pub const DEFAULT_GEN_LEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficConfig {
    /// Mean inter-arrival gap in seconds.
    pub mean_interval: f64,
    pub cv: f64,
    /// Number of requests (an upper bound inside a phase).
    pub count: usize,
    pub gen_len: usize,
}

impl TrafficConfig {
    pub fn new(mean_interval: f64, cv: f64, count: usize) -> Result<Self> {
        let cfg = Self { mean_interval, cv, count, gen_len: DEFAULT_GEN_LEN };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_gen_len(mut self, gen_len: usize) -> Self {
        self.gen_len = gen_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_interval > 0.0) || !self.mean_interval.is_finite() {
            return Err(Error::InvalidParameter("mean interval must be positive"));
        }
        if !(self.cv > 0.0) || !self.cv.is_finite() {
            return Err(Error::InvalidParameter("coefficient of variation must be positive"));
        }
        if self.gen_len == 0 {
            return Err(Error::InvalidParameter("generation length must be >= 1"));
        }
        Ok(())
    }

    pub fn gamma_shape(&self) -> f64 {
        1.0 / (self.cv * self.cv)
    }

    pub fn gamma_scale(&self) -> f64 {
        self.mean_interval * self.cv * self.cv
    }

    fn gap_distribution(&self) -> Result<Gamma<f64>> {
        self.validate()?;
        Gamma::new(self.gamma_shape(), self.gamma_scale())
            .map_err(|_| Error::InvalidParameter("gamma parameters out of range"))
    }
}

/// A generation job arriving at `arrival` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Request {
    pub id: u64,
    pub arrival: f64,
    pub gen_len: usize,
}

/// First gap is drawn from time zero, so the first request arrives after one
/// gap rather than at `t = 0`.
pub fn gen_arrivals<R: Rng + ?Sized>(config: &TrafficConfig, rng: &mut R) -> Result<Vec<Request>> {
    let gaps = config.gap_distribution()?;
    let mut t = 0.0;
    Ok((0..config.count)
        .map(|i| {
            t += gaps.sample(rng);
            Request { id: i as u64, arrival: t, gen_len: config.gen_len }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    /// Seconds.
    pub duration: f64,
    pub traffic: TrafficConfig,
}

/// Consecutive traffic phases, optionally capped at a total request count.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
    pub max_requests: Option<usize>,
}

impl PhaseSchedule {
    pub fn new(phases: Vec<Phase>, max_requests: Option<usize>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::InvalidParameter("schedule has no phases"));
        }
        for p in &phases {
            if !(p.duration > 0.0) || !p.duration.is_finite() {
                return Err(Error::InvalidParameter("phase durations must be positive"));
            }
            p.traffic.validate()?;
        }
        Ok(Self { phases, max_requests })
    }

    /// `pattern` repeated `times` times.
    pub fn alternating(pattern: &[Phase], times: usize, max_requests: Option<usize>) -> Result<Self> {
        let phases = (0..times).flat_map(|_| pattern.iter().copied()).collect();
        Self::new(phases, max_requests)
    }

    pub fn total_duration(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// `(start, end)` of every phase in seconds.
    pub fn boundaries(&self) -> Vec<(f64, f64)> {
        let mut t = 0.0;
        self.phases
            .iter()
            .map(|p| {
                let start = t;
                t += p.duration;
                (start, t)
            })
            .collect()
    }

    /// Index of the phase containing time `t` (the last phase past the end).
    pub fn phase_of(&self, t: f64) -> usize {
        self.boundaries()
            .iter()
            .position(|&(_, end)| t <= end)
            .unwrap_or(self.phases.len() - 1)
    }
}

/// Gamma arrivals phase by phase. Within a phase, generation stops at the
/// phase's own `count` or at the first arrival past the phase end; that
/// arrival is dropped and the next phase starts from its boundary.
pub fn gen_phased<R: Rng + ?Sized>(schedule: &PhaseSchedule, rng: &mut R) -> Result<Vec<Request>> {
    let budget = schedule.max_requests.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    let mut start = 0.0;
    'phases: for phase in &schedule.phases {
        let end = start + phase.duration;
        let gaps = phase.traffic.gap_distribution()?;
        let mut t = start;
        for _ in 0..phase.traffic.count {
            if out.len() >= budget {
                break 'phases;
            }
            t += gaps.sample(rng);
            if t > end {
                break;
            }
            out.push(Request { id: out.len() as u64, arrival: t, gen_len: phase.traffic.gen_len });
        }
        start = end;
    }
    Ok(out)
}
