//! Shared domain types: stage/batch identifiers, policies and the simulation
//! config. A `SimConfig` is immutable once validated and safe to share
//! read-only across concurrent runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of a pipeline stage, contiguous in `[0, S)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StageId(pub usize);

impl std::fmt::Display for StageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Reference to a unit of work flowing through the pipeline.
///
/// `micro_batch` is present for forward events under nF1B scheduling and
/// absent for backward events, which cover all micro-batches of the
/// mini-batch collectively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BatchRef {
    /// 1-based mini-batch id within the epoch.
    pub mini_batch: usize,
    /// 0-based micro-batch index in `[0, m)`, forward-only.
    pub micro_batch: Option<usize>,
}

impl BatchRef {
    pub fn forward(mini_batch: usize, micro_batch: usize) -> Self {
        BatchRef {
            mini_batch,
            micro_batch: Some(micro_batch),
        }
    }

    pub fn backward(mini_batch: usize) -> Self {
        BatchRef {
            mini_batch,
            micro_batch: None,
        }
    }
}

/// The four weight-versioning policies under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    PipeDream,
    TiMePReSt,
    VTiMePReSt,
    ITiMePReSt,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::PipeDream,
        PolicyKind::TiMePReSt,
        PolicyKind::VTiMePReSt,
        PolicyKind::ITiMePReSt,
    ];

    /// The three TiMePReSt-family policies schedule with nF1B; PipeDream
    /// uses 1F1B.
    pub fn uses_nf1b(self) -> bool {
        !matches!(self, PolicyKind::PipeDream)
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::PipeDream => "pipedream",
            PolicyKind::TiMePReSt => "timeprest",
            PolicyKind::VTiMePReSt => "v-timeprest",
            PolicyKind::ITiMePReSt => "i-timeprest",
        }
    }

    pub fn parse(s: &str) -> Option<PolicyKind> {
        match s.to_ascii_lowercase().as_str() {
            "pipedream" => Some(PolicyKind::PipeDream),
            "timeprest" => Some(PolicyKind::TiMePReSt),
            "v-timeprest" | "vtimeprest" => Some(PolicyKind::VTiMePReSt),
            "i-timeprest" | "itimeprest" => Some(PolicyKind::ITiMePReSt),
            _ => None,
        }
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A policy choice plus its decay constant. `lambda` only affects
/// I-TiMePReSt's intermediate-weight transform but is carried for all
/// policies so experiment output always records it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub lambda: f64,
}

/// One live set of per-stage parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVersion {
    /// Strictly increasing per stage; `k` means "after the updates of
    /// mini-batches 1..=k at this stage" (0 = initial weights).
    pub version_id: u64,
    /// Mini-batch whose update produced this version; 0 for the initial one.
    pub produced_by: usize,
    /// Flat per-stage parameter vector, length fixed per stage.
    pub values: Vec<f64>,
}

/// Default cost model: the backward pass is modelled as twice the forward
/// cost; both are configurable.
pub const DEFAULT_FWD_COST: u64 = 1;
pub const DEFAULT_BWD_COST: u64 = 2;
/// Default decay constant used when a config omits `lambda`.
pub const DEFAULT_LAMBDA: f64 = 0.5;

fn default_fwd_cost() -> u64 {
    DEFAULT_FWD_COST
}
fn default_bwd_cost() -> u64 {
    DEFAULT_BWD_COST
}
fn default_lambda() -> Option<f64> {
    Some(DEFAULT_LAMBDA)
}
fn default_epochs() -> usize {
    1
}
fn default_seed() -> u64 {
    0
}

/// Complete simulation configuration. The serialized shape is a flat
/// key/value JSON object with exactly the keys named on the fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of pipeline stages S.
    pub stages: usize,
    /// Mini-batches per epoch M.
    pub mini_batches: usize,
    /// Micro-batches per mini-batch m.
    pub micro_batches: usize,
    /// Ticks per forward micro-batch.
    #[serde(default = "default_fwd_cost")]
    pub fwd_cost: u64,
    /// Ticks per collective backward pass at one stage.
    #[serde(default = "default_bwd_cost")]
    pub bwd_cost: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub policy: PolicyKind,
    #[serde(default = "default_lambda")]
    pub lambda: Option<f64>,
}

impl SimConfig {
    pub fn policy(&self) -> Policy {
        Policy {
            kind: self.policy,
            lambda: self.lambda.unwrap_or(DEFAULT_LAMBDA),
        }
    }

    pub fn with_policy(&self, kind: PolicyKind) -> SimConfig {
        SimConfig {
            policy: kind,
            ..self.clone()
        }
    }
}

/// Check every type invariant; returns the config unchanged if all hold.
pub fn validate_config(cfg: SimConfig) -> Result<SimConfig> {
    if cfg.stages < 2 {
        return Err(Error::StageCountTooSmall(cfg.stages));
    }
    if cfg.micro_batches < 1 {
        return Err(Error::MicroBatchCountTooSmall(cfg.micro_batches));
    }
    if cfg.mini_batches < 1 {
        return Err(Error::CountTooSmall {
            name: "mini_batches",
            value: cfg.mini_batches,
        });
    }
    if cfg.epochs < 1 {
        return Err(Error::CountTooSmall {
            name: "epochs",
            value: cfg.epochs,
        });
    }
    if cfg.fwd_cost < 1 {
        return Err(Error::CountTooSmall {
            name: "fwd_cost",
            value: cfg.fwd_cost as usize,
        });
    }
    if cfg.bwd_cost < 1 {
        return Err(Error::CountTooSmall {
            name: "bwd_cost",
            value: cfg.bwd_cost as usize,
        });
    }
    if let Some(lambda) = cfg.lambda {
        if !(lambda > 0.0) {
            return Err(Error::NonPositiveLambda(lambda));
        }
    } else if cfg.policy == PolicyKind::ITiMePReSt {
        return Err(Error::MissingLambda(cfg.policy));
    }
    Ok(cfg)
}
