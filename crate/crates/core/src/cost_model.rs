//! Analytical runtime model of batched speculative decoding.
//!
//! One decoding step of the large model with batch size `b` and query length
//! `s` is modelled as `t_L(b, s) = alpha_b * s + beta`; the draft model costs
//! `t_S(b, 1)` per speculated token. With `l(s)` expected correct tokens per
//! step, generating `N` tokens takes `N / (l(s) + 1)` steps on average.

use alloc::vec::Vec;

use crate::acceptance::PowerLawFit;
use crate::error::{Error, Result};
use crate::math::powf;

/// One measured large-model step: batch size, query length and wall time (ms).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTimeSample {
    pub batch_size: usize,
    pub query_len: usize,
    pub measured_time: f64,
}

impl StepTimeSample {
    pub fn new(batch_size: usize, query_len: usize, measured_time: f64) -> Result<Self> {
        if batch_size == 0 || query_len == 0 {
            return Err(Error::InvalidParameter("batch size and query length must be >= 1"));
        }
        if !(measured_time > 0.0) {
            return Err(Error::InvalidParameter("measured step time must be positive"));
        }
        Ok(Self { batch_size, query_len, measured_time })
    }
}

/// Least-squares line through `(query_len, measured_time)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Set when the fitted slope is `<= 0`; the model is still returned.
    pub non_positive_slope: bool,
}

/// Fits `t = slope * s + intercept` to samples of a single batch size.
pub fn fit_linear_step_time(samples: &[StepTimeSample]) -> Result<LinearFit> {
    let Some(first) = samples.first() else {
        return Err(Error::DegenerateFit("no step-time samples"));
    };
    if samples.iter().any(|p| p.batch_size != first.batch_size) {
        return Err(Error::Contract("step-time samples mix batch sizes"));
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|p| p.query_len as f64).sum::<f64>() / n;
    let mean_y = samples.iter().map(|p| p.measured_time).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for p in samples {
        let dx = p.query_len as f64 - mean_x;
        sxx += dx * dx;
        sxy += dx * (p.measured_time - mean_y);
    }
    // Fewer than two distinct query lengths leaves the slope undetermined.
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("need at least two distinct query lengths"));
    }
    let slope = sxy / sxx;
    Ok(LinearFit {
        slope,
        intercept: mean_y - slope * mean_x,
        non_positive_slope: slope <= 0.0,
    })
}

/// Per-step costs of the large and draft models, keyed by batch size.
///
/// Batch sizes between calibrated points are linearly interpolated and
/// clamped outside the calibrated range unless interpolation is disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStepModel {
    alpha: Vec<(usize, f64)>,
    beta: f64,
    ssm_step: Vec<(usize, f64)>,
    interpolate: bool,
}

impl LinearStepModel {
    pub fn new(mut alpha: Vec<(usize, f64)>, beta: f64, mut ssm_step: Vec<(usize, f64)>) -> Result<Self> {
        validate_curve(&mut alpha, "alpha")?;
        validate_curve(&mut ssm_step, "ssm_step")?;
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParameter("beta must be a finite value >= 0"));
        }
        Ok(Self { alpha, beta, ssm_step, interpolate: true })
    }

    /// Restricts lookups to exactly calibrated batch sizes.
    pub fn with_interpolation(mut self, enabled: bool) -> Self {
        self.interpolate = enabled;
        self
    }

    pub fn alpha_points(&self) -> &[(usize, f64)] {
        &self.alpha
    }

    pub fn ssm_points(&self) -> &[(usize, f64)] {
        &self.ssm_step
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn interpolates(&self) -> bool {
        self.interpolate
    }

    /// Slope `alpha_b` (ms per query token).
    pub fn alpha(&self, b: usize) -> Result<f64> {
        lookup_curve(&self.alpha, b, self.interpolate)
    }

    /// Draft-model cost per speculated token, `t_S(b, 1)`.
    pub fn ssm_step_time(&self, b: usize) -> Result<f64> {
        lookup_curve(&self.ssm_step, b, self.interpolate)
    }

    /// `t_L(b, s) = alpha_b * s + beta`.
    pub fn llm_step_time(&self, b: usize, s: usize) -> Result<f64> {
        Ok(self.alpha(b)? * s as f64 + self.beta)
    }

    /// Wall time of one speculative step: verification with query length
    /// `max(s, 1)` plus `s` draft-model calls. `s = 0` is plain decoding.
    pub fn step_time(&self, b: usize, s: usize) -> Result<f64> {
        let ssm = if s == 0 { 0.0 } else { s as f64 * self.ssm_step_time(b)? };
        Ok(self.llm_step_time(b, s.max(1))? + ssm)
    }
}

fn validate_curve(points: &mut [(usize, f64)], name: &'static str) -> Result<()> {
    if points.is_empty() {
        return Err(Error::InvalidParameter("cost curve has no points"));
    }
    points.sort_by_key(|p| p.0);
    for w in points.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::InvalidParameter("cost curve repeats a batch size"));
        }
        if w[1].1 < w[0].1 {
            return Err(Error::InvalidParameter(match name {
                "alpha" => "alpha must be non-decreasing in batch size",
                _ => "ssm_step must be non-decreasing in batch size",
            }));
        }
    }
    if points.iter().any(|p| p.0 == 0 || !(p.1 > 0.0) || !p.1.is_finite()) {
        return Err(Error::InvalidParameter("cost curve needs b >= 1 and positive finite costs"));
    }
    Ok(())
}

fn lookup_curve(points: &[(usize, f64)], b: usize, interpolate: bool) -> Result<f64> {
    match points.binary_search_by_key(&b, |p| p.0) {
        Ok(i) => Ok(points[i].1),
        Err(_) if !interpolate => Err(Error::UncalibratedBatch(b)),
        Err(0) => Ok(points[0].1),
        Err(i) if i == points.len() => Ok(points[i - 1].1),
        Err(i) => {
            let (b0, v0) = points[i - 1];
            let (b1, v1) = points[i];
            let w = (b - b0) as f64 / (b1 - b0) as f64;
            Ok(v0 + w * (v1 - v0))
        }
    }
}

/// Step costs together with the fitted acceptance curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub steps: LinearStepModel,
    pub acceptance: PowerLawFit,
}

/// Expected totals for generating `tokens` tokens per sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RuntimePrediction {
    pub llm_ms: f64,
    pub ssm_ms: f64,
    pub total_ms: f64,
    pub expected_steps: f64,
    pub per_token_ms: f64,
    pub tokens: usize,
}

/// Closed-form expected runtime with fractional step count `N / (l(s) + 1)`.
pub fn predict_runtime(
    model: &LinearStepModel,
    fit: &PowerLawFit,
    tokens: usize,
    b: usize,
    s: usize,
) -> Result<RuntimePrediction> {
    let expected_correct = if s == 0 { 0.0 } else { fit.eval(s as f64) };
    predict_with_expected_correct(model, expected_correct, tokens, b, s)
}

/// Same as [`predict_runtime`] with an explicit `l(s)`, e.g. the censored
/// mean of a trace.
pub fn predict_with_expected_correct(
    model: &LinearStepModel,
    expected_correct: f64,
    tokens: usize,
    b: usize,
    s: usize,
) -> Result<RuntimePrediction> {
    if tokens == 0 {
        return Err(Error::InvalidParameter("token count must be >= 1"));
    }
    if b == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1"));
    }
    let n = tokens as f64;
    let (expected_steps, llm_ms, ssm_ms) = if s == 0 {
        (n, n * model.llm_step_time(b, 1)?, 0.0)
    } else {
        let steps = n / (expected_correct + 1.0);
        let llm = steps * model.llm_step_time(b, s)?;
        let ssm = steps * s as f64 * model.ssm_step_time(b)?;
        (steps, llm, ssm)
    };
    let total_ms = llm_ms + ssm_ms;
    Ok(RuntimePrediction {
        llm_ms,
        ssm_ms,
        total_ms,
        expected_steps,
        per_token_ms: total_ms / n,
        tokens,
    })
}

/// Parameters of the stationarity condition `delta(s) = 0`.
///
/// The draft cost is folded into the slope: `alpha_eff = alpha_b + t_S(b, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimalityParams {
    pub alpha_eff: f64,
    pub beta: f64,
    pub c: f64,
    pub gamma: f64,
    pub k: f64,
    pub l: f64,
}

impl OptimalityParams {
    pub fn new(alpha_eff: f64, beta: f64, fit: PowerLawFit) -> Result<Self> {
        if !(alpha_eff > 0.0) || !(beta >= 0.0) {
            return Err(Error::InvalidParameter("need alpha_eff > 0 and beta >= 0"));
        }
        let (c, gamma) = (fit.c(), fit.gamma());
        Ok(Self {
            alpha_eff,
            beta,
            c,
            gamma,
            k: (1.0 - gamma) * c,
            l: c * beta * gamma,
        })
    }

    pub fn from_model(model: &LinearStepModel, fit: PowerLawFit, b: usize) -> Result<Self> {
        Self::new(model.alpha(b)? + model.ssm_step_time(b)?, model.beta(), fit)
    }

    /// Numerator of `dt/ds`: `K * alpha * s^gamma - L * s^(gamma - 1) + alpha`.
    pub fn delta(&self, s: f64) -> f64 {
        debug_assert!(s > 0.0);
        self.k * self.alpha_eff * powf(s, self.gamma) - self.l * powf(s, self.gamma - 1.0) + self.alpha_eff
    }
}

/// Free-function form of [`OptimalityParams::delta`].
pub fn eval_delta(p: &OptimalityParams, s: f64) -> f64 {
    p.delta(s)
}

/// Root of `delta` in `[s_min, s_max]` by bisection, clamped to the ends when
/// `delta` does not change sign. `delta` is increasing so the root is unique.
pub fn optimal_speculation_continuous(p: &OptimalityParams, s_min: f64, s_max: f64, tol: f64) -> Result<f64> {
    if !(s_min > 0.0 && s_min < s_max) || !(tol > 0.0) {
        return Err(Error::InvalidParameter("need 0 < s_min < s_max and tol > 0"));
    }
    if p.delta(s_min) >= 0.0 {
        return Ok(s_min);
    }
    if p.delta(s_max) <= 0.0 {
        return Ok(s_max);
    }
    let (mut lo, mut hi) = (s_min, s_max);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if p.delta(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Grid point with the lowest predicted per-token latency; ties go to the
/// smaller speculation length.
pub fn optimal_speculation_discrete(
    model: &LinearStepModel,
    fit: &PowerLawFit,
    tokens: usize,
    b: usize,
    s_grid: &[usize],
) -> Result<usize> {
    let mut grid = s_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let mut best: Option<(usize, f64)> = None;
    for s in grid {
        let cost = predict_runtime(model, fit, tokens, b, s)?.per_token_ms;
        if best.is_none_or(|(_, c)| cost < c) {
            best = Some((s, cost));
        }
    }
    best.map(|(s, _)| s).ok_or(Error::InvalidParameter("empty speculation grid"))
}
