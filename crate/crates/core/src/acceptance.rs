//! Expected number of correct speculated tokens.
//!
//! A trace records, for each measured prompt, how many leading draft tokens
//! the verifier accepted before the first mismatch (`l_i`, censored at the
//! measurement horizon). The expected accepted length for speculation
//! length `s` is the censored mean `(1/n) * sum(min(l_i, s))`, which is well
//! approximated by a sublinear power law `c * s^gamma`.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{exp, ln, powf, round};

/// Largest speculation length used when fitting a trace by default.
pub const DEFAULT_FIT_MAX_S: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcceptanceTrace {
    samples: Vec<u32>,
    horizon: u32,
}

impl AcceptanceTrace {
    pub fn new(samples: Vec<u32>, horizon: u32) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidParameter("trace horizon must be >= 1"));
        }
        if samples.is_empty() {
            return Err(Error::InvalidParameter("trace needs at least one sample"));
        }
        if samples.iter().any(|&l| l > horizon) {
            return Err(Error::InvalidParameter("trace sample exceeds the horizon"));
        }
        Ok(Self { samples, horizon })
    }

    /// Deterministic trace of `n` prompts whose censored mean tracks
    /// `c * s^gamma`: the number of prompts with `l_i >= k` is the rounded
    /// increment `n * (l(k) - l(k - 1))`, kept non-increasing in `k`.
    pub fn from_power_law(fit: PowerLawFit, n: u32, horizon: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("trace needs at least one sample"));
        }
        let mut at_least = Vec::with_capacity(horizon as usize);
        let mut prev_count = n;
        for k in 1..=horizon {
            let tail = (fit.eval(k as f64) - fit.eval((k - 1) as f64)).clamp(0.0, 1.0);
            let count = (round(tail * n as f64) as u32).min(prev_count);
            at_least.push(count);
            prev_count = count;
        }
        let samples = (0..n)
            .map(|i| at_least.iter().take_while(|&&count| count > i).count() as u32)
            .collect();
        Self::new(samples, horizon)
    }

    pub fn samples(&self) -> &[u32] {
        &self.samples
    }

    pub fn horizon(&self) -> u32 {
        self.horizon
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().map(|&l| l as f64).sum::<f64>() / self.count() as f64
    }

    /// Censored mean `(1/n) * sum(min(l_i, s))`.
    pub fn estimate_expected_correct(&self, s: usize) -> Result<f64> {
        if s > self.horizon as usize {
            return Err(Error::OutOfHorizon { s, horizon: self.horizon as usize });
        }
        let total: u64 = self.samples.iter().map(|&l| (l as usize).min(s) as u64).sum();
        Ok(total as f64 / self.count() as f64)
    }

    /// `(s, l(s))` for `s = 1..=min(horizon, max_s)`.
    pub fn fit_points(&self, max_s: usize) -> Vec<(f64, f64)> {
        (1..=max_s.min(self.horizon as usize))
            .map(|s| (s as f64, self.estimate_expected_correct(s).unwrap_or(0.0)))
            .collect()
    }

    /// Power-law fit over the default domain `s = 1..=8`.
    pub fn fit(&self) -> Result<FitOutcome> {
        fit_power_law(&self.fit_points(DEFAULT_FIT_MAX_S))
    }

    /// Bootstrap draw: a uniformly chosen `l_i`, censored at `s`. Its
    /// expectation is exactly [`estimate_expected_correct`](Self::estimate_expected_correct).
    pub fn sample_accepted_length<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.samples.len());
        (self.samples[i] as usize).min(s)
    }
}

/// `l(s) = c * s^gamma` with `c > 0` and `0 < gamma <= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    c: f64,
    gamma: f64,
}

impl PowerLawFit {
    pub fn new(c: f64, gamma: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter("power-law coefficient c must be positive"));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidParameter("power-law exponent must lie in (0, 1]"));
        }
        Ok(Self { c, gamma })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            0.0
        } else {
            self.c * powf(s, self.gamma)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOutcome {
    pub fit: PowerLawFit,
    /// Exponent of the unconstrained log-log regression.
    pub raw_gamma: f64,
    /// The raw exponent exceeded 1 and was clamped.
    pub clamped: bool,
}

/// Least squares of `ln l = ln c + gamma * ln s`. Points with `l <= 0` carry
/// no information in log space and are skipped.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<FitOutcome> {
    if points.iter().any(|&(s, _)| !(s >= 1.0)) {
        return Err(Error::InvalidParameter("power-law fit needs s >= 1"));
    }
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(_, l)| l > 0.0)
        .map(|&(s, l)| (ln(s), ln(l)))
        .collect();
    if logs.is_empty() {
        return Err(Error::DegenerateFit("every point has l <= 0"));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in &logs {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("need two distinct s with l > 0"));
    }
    let raw_gamma = sxy / sxx;
    let c = exp(my - raw_gamma * mx);
    let clamped = raw_gamma > 1.0;
    let gamma = raw_gamma.min(1.0);
    if !(gamma > 0.0) {
        return Err(Error::DegenerateFit("fitted exponent is not positive"));
    }
    Ok(FitOutcome { fit: PowerLawFit::new(c, gamma)?, raw_gamma, clamped })
}
