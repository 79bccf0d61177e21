//! The speculate/verify decoding loop.
//!
//! Each step the draft model proposes `s` tokens; the verifier keeps the
//! longest prefix that matches its own greedy choice and then appends one
//! token of its own (a correction, or a look-ahead when every draft token was
//! right). A step therefore always makes progress, and makes at most `s + 1`
//! tokens of it.
//!
//! Two oracles stand in for the model pair: [`TokenLevelOracle`] emits real
//! token ids from a deterministic target stream, [`TraceSampler`] only draws
//! accepted lengths from a measured trace.

use alloc::vec::Vec;

use rand::Rng;

use crate::acceptance::AcceptanceTrace;
use crate::cost_model::LinearStepModel;
use crate::error::{Error, Result};
use crate::rng::splitmix64;

pub type Token = u32;

/// Progress of one request inside a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    pub request_id: u64,
    target_len: usize,
    produced: usize,
    tokens: Vec<Token>,
}

impl SequenceState {
    pub fn new(request_id: u64, target_len: usize) -> Result<Self> {
        if target_len == 0 {
            return Err(Error::InvalidParameter("target length must be >= 1"));
        }
        Ok(Self { request_id, target_len, produced: 0, tokens: Vec::new() })
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn produced(&self) -> usize {
        self.produced
    }

    pub fn remaining(&self) -> usize {
        self.target_len - self.produced
    }

    pub fn is_done(&self) -> bool {
        self.produced == self.target_len
    }

    /// Tokens emitted so far; empty for oracles that do not produce tokens.
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }
}

/// What one speculative step yields for a sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Proposal {
    /// Leading draft tokens accepted by the verifier, in `[0, s]`.
    pub accepted: usize,
    /// Accepted draft tokens followed by the verifier's own token. Empty when
    /// the oracle only models lengths.
    pub tokens: Vec<Token>,
}

/// Stand-in for the draft/verifier model pair.
pub trait DraftOracle {
    fn propose<R: Rng + ?Sized>(&self, seq: &SequenceState, s: usize, rng: &mut R) -> Proposal;
}

/// Draws accepted lengths from a measured trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSampler {
    trace: AcceptanceTrace,
}

impl TraceSampler {
    pub fn new(trace: AcceptanceTrace) -> Self {
        Self { trace }
    }

    pub fn trace(&self) -> &AcceptanceTrace {
        &self.trace
    }
}

impl DraftOracle for TraceSampler {
    fn propose<R: Rng + ?Sized>(&self, _seq: &SequenceState, s: usize, rng: &mut R) -> Proposal {
        let accepted = if s == 0 { 0 } else { self.trace.sample_accepted_length(s, rng) };
        Proposal { accepted, tokens: Vec::new() }
    }
}

/// Token-level toy models.
///
/// The verifier's greedy output at each position is a pure function of
/// `(seed, request_id, position)`. The draft model copies it, except that
/// each drafted token is independently replaced by a wrong one with
/// probability `p_err`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenLevelOracle {
    p_err: f64,
    seed: u64,
    vocab: u32,
}

impl TokenLevelOracle {
    pub fn new(p_err: f64, seed: u64, vocab: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_err) {
            return Err(Error::InvalidParameter("p_err must lie in [0, 1]"));
        }
        if vocab < 2 {
            return Err(Error::InvalidParameter("vocabulary needs at least two tokens"));
        }
        Ok(Self { p_err, seed, vocab })
    }

    /// Greedy target token at `position` of `request_id`.
    pub fn target_token(&self, request_id: u64, position: usize) -> Token {
        let h = splitmix64(self.seed ^ splitmix64(request_id).wrapping_add(position as u64));
        (h % self.vocab as u64) as Token
    }

    /// Plain autoregressive output of the verifier.
    pub fn greedy(&self, request_id: u64, len: usize) -> Vec<Token> {
        (0..len).map(|p| self.target_token(request_id, p)).collect()
    }
}

impl DraftOracle for TokenLevelOracle {
    fn propose<R: Rng + ?Sized>(&self, seq: &SequenceState, s: usize, rng: &mut R) -> Proposal {
        let start = seq.produced();
        let target: Vec<Token> = (0..s).map(|j| self.target_token(seq.request_id, start + j)).collect();
        let draft: Vec<Token> = target
            .iter()
            .map(|&t| {
                if rng.random::<f64>() < self.p_err {
                    let shift = rng.random_range(1..self.vocab);
                    ((t as u64 + shift as u64) % self.vocab as u64) as Token
                } else {
                    t
                }
            })
            .collect();
        let accepted = verify(&draft, &target).expect("draft and target have equal length");
        let mut tokens = draft;
        tokens.truncate(accepted);
        tokens.push(self.target_token(seq.request_id, start + accepted));
        Proposal { accepted, tokens }
    }
}

/// Number of leading positions where `draft` agrees with `target`.
pub fn verify(draft: &[Token], target: &[Token]) -> Result<usize> {
    if draft.len() != target.len() {
        return Err(Error::Contract("draft and target lengths differ"));
    }
    Ok(draft.iter().zip(target).take_while(|(d, t)| d == t).count())
}

/// Per-sequence result of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub accepted: usize,
    /// Tokens added: `min(accepted + 1, remaining)`.
    pub advanced: usize,
}

/// Runs one speculative step for a single sequence. `s = 0` is plain decoding.
pub fn decode_step<O: DraftOracle, R: Rng + ?Sized>(
    state: &mut SequenceState,
    s: usize,
    oracle: &O,
    rng: &mut R,
) -> Result<StepOutcome> {
    if state.is_done() {
        return Err(Error::Contract("decode step on a finished sequence"));
    }
    let proposal = oracle.propose(state, s, rng);
    debug_assert!(proposal.accepted <= s);
    let advanced = (proposal.accepted + 1).min(state.remaining());
    if !proposal.tokens.is_empty() {
        state.tokens.extend_from_slice(&proposal.tokens[..advanced]);
    }
    state.produced += advanced;
    Ok(StepOutcome { accepted: proposal.accepted, advanced })
}

/// Timing and progress of one batch run to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub batch_size: usize,
    pub spec_len: usize,
    pub total_time_ms: f64,
    pub steps: usize,
    pub tokens_generated: usize,
    /// `(request_id, finish offset in ms from batch start)`, in input order.
    pub per_sequence_finish: Vec<(u64, f64)>,
}

impl BatchResult {
    /// Batch time per generated token of a single sequence.
    pub fn per_token_ms(&self) -> f64 {
        self.total_time_ms * self.batch_size as f64 / self.tokens_generated as f64
    }
}

/// Decodes every sequence of a freshly formed batch to completion.
///
/// All sequences share `s`, and every step is charged at the formed batch
/// size even after some sequences finish: finished rows are masked, not
/// removed.
pub fn run_batch<O: DraftOracle, R: Rng + ?Sized>(
    states: &mut [SequenceState],
    s: usize,
    cost: &LinearStepModel,
    oracle: &O,
    rng: &mut R,
) -> Result<BatchResult> {
    if states.is_empty() {
        return Err(Error::Contract("empty batch"));
    }
    if states.iter().any(|st| st.produced != 0) {
        return Err(Error::Contract("batch sequences must start fresh"));
    }
    let batch_size = states.len();
    let step_time = cost.step_time(batch_size, s)?;
    let mut finish: Vec<f64> = alloc::vec![0.0; batch_size];
    let mut unfinished = batch_size;
    let mut total = 0.0;
    let mut steps = 0;
    while unfinished > 0 {
        steps += 1;
        total += step_time;
        for (state, fin) in states.iter_mut().zip(finish.iter_mut()) {
            if state.is_done() {
                continue;
            }
            decode_step(state, s, oracle, rng)?;
            if state.is_done() {
                *fin = total;
                unfinished -= 1;
            }
        }
    }
    Ok(BatchResult {
        batch_size,
        spec_len: s,
        total_time_ms: total,
        steps,
        tokens_generated: states.iter().map(|st| st.target_len).sum(),
        per_sequence_finish: states.iter().map(|st| st.request_id).zip(finish).collect(),
    })
}
