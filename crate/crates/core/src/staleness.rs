//! Staleness degree, significance decay and the intermediate-weight
//! transform used by I-TiMePReSt.
//!
//! The significance of a weight version that missed `delta` updates decays
//! exponentially, `f(delta) = exp(-lambda * delta)`, and the backward pass
//! of I-TiMePReSt runs on the stale weights scaled by `2 - 1/f(delta)`.
//! The scale factor lies in `(-inf, 1]` and is deliberately not clamped.

use serde::{Deserialize, Serialize};

use crate::config::StageId;
use crate::error::{Error, Result};
use crate::schedule::{PassKind, ScheduleEvent};

/// Staleness of one backward resolution: how many updates were committed at
/// this stage after the version the mini-batch's forward used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessRecord {
    pub stage: StageId,
    pub mini_batch: usize,
    pub delta: u64,
}

/// Exponential decay constant, `lambda > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    pub lambda: f64,
}

impl DecayParams {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::NonPositiveLambda(lambda));
        }
        Ok(DecayParams { lambda })
    }
}

/// Significance of a weight version stale by `delta` updates:
/// `exp(-lambda * delta)`, strictly decreasing in `delta`, 1 at `delta = 0`.
pub fn significance(delta: u64, params: DecayParams) -> f64 {
    (-params.lambda * delta as f64).exp()
}

/// The I-TiMePReSt scale factor `2 - 1/f` for significance `f` in `(0, 1]`.
///
/// Equals 1 iff `f = 1`, crosses 0 at `f = 1/2`, and is negative below.
pub fn intermediate_factor(f: f64) -> Result<f64> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::SignificanceOutOfRange(f));
    }
    Ok(2.0 - 1.0 / f)
}

/// Element-wise intermediate weights: the stale vector scaled by
/// `intermediate_factor(significance(delta))`. Identity at `delta = 0`.
pub fn intermediate_weights(stale: &[f64], delta: u64, params: DecayParams) -> Result<Vec<f64>> {
    if delta == 0 {
        // Factor is exactly 1; keep the values bit-identical.
        return Ok(stale.to_vec());
    }
    let factor = intermediate_factor(significance(delta, params))?;
    Ok(stale.iter().map(|w| factor * w).collect())
}

/// Per-stage log of what the simulation resolved and committed, in tick
/// order. Commit ticks are the ticks at which a new version became live.
#[derive(Debug, Clone, Default)]
pub struct VersionHistory {
    /// commit ticks per stage, ascending.
    pub commits: Vec<Vec<u64>>,
    /// (stage, mini_batch) -> tick at which the forward-used version was
    /// resolved at that stage.
    pub forward_resolutions: std::collections::HashMap<(usize, usize), u64>,
}

impl VersionHistory {
    pub fn new(stages: usize) -> Self {
        VersionHistory {
            commits: vec![Vec::new(); stages],
            forward_resolutions: std::collections::HashMap::new(),
        }
    }

    pub fn record_commit(&mut self, stage: StageId, tick: u64) {
        self.commits[stage.0].push(tick);
    }

    pub fn record_forward(&mut self, stage: StageId, mini_batch: usize, tick: u64) {
        // First micro-batch wins: the forward-used version of a mini-batch
        // at a stage is the one its earliest micro-batch resolved.
        self.forward_resolutions
            .entry((stage.0, mini_batch))
            .or_insert(tick);
    }
}

/// Staleness of a backward event: the number of commits at its stage in the
/// half-open window (forward-resolution tick, backward start tick].
pub fn delta_of(event: &ScheduleEvent, history: &VersionHistory) -> Result<StalenessRecord> {
    debug_assert_eq!(event.pass, PassKind::Backward);
    let key = (event.stage.0, event.batch.mini_batch);
    let fwd_tick = *history
        .forward_resolutions
        .get(&key)
        .ok_or(Error::UnknownVersion {
            stage: event.stage.0,
            mini_batch: event.batch.mini_batch,
        })?;
    let delta = history.commits[event.stage.0]
        .iter()
        .filter(|&&t| t > fwd_tick && t <= event.start_tick)
        .count() as u64;
    Ok(StalenessRecord {
        stage: event.stage,
        mini_batch: event.batch.mini_batch,
        delta,
    })
}
