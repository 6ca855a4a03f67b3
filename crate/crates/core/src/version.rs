//! Per-stage weight-version store implementing the four policies' retention
//! and eviction rules, with peak live-version accounting.
//!
//! Retention is consumer-reference-counted: a version stays live while some
//! mini-batch still needs it at that stage, and any non-latest version with
//! no consumers is evicted at the next commit. V-TiMePReSt registers no
//! consumers, so every commit immediately discards the previous version.
//! PipeDream pins the version current at pipeline entry for a mini-batch's
//! whole lifetime; TiMePReSt and I-TiMePReSt pin the version each stage's
//! forward used until that mini-batch's backward commits there, I-TiMePReSt
//! additionally scaling the stale values by the staleness significance.

use std::collections::{BTreeSet, HashMap};

use crate::config::{BatchRef, Policy, PolicyKind, StageId, WeightVersion};
use crate::error::{Error, Result};
use crate::staleness::{intermediate_weights, DecayParams};

/// Where a resolution's base values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    Latest,
    Stashed(u64),
    /// (stashed version_id, staleness degree); only under I-TiMePReSt.
    Intermediate(u64, u64),
}

/// The weights handed to a forward or backward computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedWeights {
    pub stage: StageId,
    pub values: Vec<f64>,
    pub source: WeightSource,
    /// version_id of the base version the values were taken from.
    pub version_id: u64,
}

#[derive(Debug, Clone, Default)]
struct StageSlot {
    /// Live versions ordered by version_id.
    live: Vec<WeightVersion>,
    /// version_id -> mini-batches that still need it at this stage.
    consumers: HashMap<u64, BTreeSet<usize>>,
    /// Max live count observed at event boundaries.
    peak_live: usize,
}

impl StageSlot {
    fn latest(&self) -> &WeightVersion {
        self.live.last().expect("stage always has a live version")
    }

    fn get(&self, version_id: u64) -> Option<&WeightVersion> {
        self.live.iter().find(|v| v.version_id == version_id)
    }

    fn add_consumer(&mut self, version_id: u64, mini_batch: usize) {
        self.consumers
            .entry(version_id)
            .or_default()
            .insert(mini_batch);
    }

    fn release_consumer(&mut self, mini_batch: usize) {
        self.consumers.retain(|_, minis| {
            minis.remove(&mini_batch);
            !minis.is_empty()
        });
    }

    fn evict_unreferenced(&mut self) {
        let latest_id = self.latest().version_id;
        let consumers = &self.consumers;
        self.live
            .retain(|v| v.version_id == latest_id || consumers.contains_key(&v.version_id));
    }
}

#[derive(Debug, Clone)]
pub struct VersionStore {
    slots: Vec<StageSlot>,
    /// PipeDream: mini-batch -> version index pinned at pipeline entry.
    entry_pins: HashMap<usize, u64>,
    /// TiMePReSt, I-TiMePReSt: (stage, mini-batch) -> version its first
    /// forward at the stage used.
    forward_used: HashMap<(usize, usize), u64>,
}

impl VersionStore {
    /// One initial version (id 0) per stage.
    pub fn new(initial: Vec<Vec<f64>>) -> Self {
        let slots = initial
            .into_iter()
            .map(|values| {
                let mut slot = StageSlot::default();
                slot.live.push(WeightVersion {
                    version_id: 0,
                    produced_by: 0,
                    values,
                });
                slot.peak_live = 1;
                slot
            })
            .collect();
        VersionStore {
            slots,
            entry_pins: HashMap::new(),
            forward_used: HashMap::new(),
        }
    }

    pub fn stages(&self) -> usize {
        self.slots.len()
    }

    pub fn latest_id(&self, stage: StageId) -> u64 {
        self.slots[stage.0].latest().version_id
    }

    pub fn latest_values(&self, stage: StageId) -> &[f64] {
        &self.slots[stage.0].latest().values
    }

    pub fn live_count(&self, stage: StageId) -> usize {
        self.slots[stage.0].live.len()
    }

    pub fn peak_live_counts(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.peak_live).collect()
    }

    /// Version the mini-batch's first forward used at this stage, if recorded.
    pub fn forward_used_id(&self, stage: StageId, mini_batch: usize) -> Option<u64> {
        self.forward_used.get(&(stage.0, mini_batch)).copied()
    }

    fn resolved(&self, stage: StageId, version_id: u64, source: WeightSource) -> Result<ResolvedWeights> {
        let v = self.slots[stage.0]
            .get(version_id)
            .ok_or(Error::MissingVersion {
                stage: stage.0,
                version_id,
            })?;
        Ok(ResolvedWeights {
            stage,
            values: v.values.clone(),
            source,
            version_id,
        })
    }

    /// Weights for a forward event.
    ///
    /// The three nF1B policies start forward work on the freshest version
    /// live at the stage; PipeDream uses the version pinned when the
    /// mini-batch entered the pipeline.
    pub fn resolve_forward(
        &mut self,
        policy: Policy,
        stage: StageId,
        batch: BatchRef,
    ) -> Result<ResolvedWeights> {
        let mini = batch.mini_batch;
        match policy.kind {
            PolicyKind::PipeDream => {
                let pin = if stage.0 == 0 {
                    *self.entry_pins.entry(mini).or_insert_with(|| {
                        self.slots[0].latest().version_id
                    })
                } else {
                    *self
                        .entry_pins
                        .get(&mini)
                        .ok_or(Error::UnknownVersion {
                            stage: stage.0,
                            mini_batch: mini,
                        })?
                };
                if stage.0 == 0 && !self.slots.iter().any(|s| s.consumers.get(&pin).map_or(false, |c| c.contains(&mini))) {
                    // Pin the version index at every stage for the whole
                    // forward+backward life of the mini-batch.
                    for slot in &mut self.slots {
                        slot.add_consumer(pin, mini);
                    }
                }
                self.resolved(stage, pin, WeightSource::Stashed(pin))
            }
            PolicyKind::TiMePReSt | PolicyKind::ITiMePReSt => {
                let latest = self.slots[stage.0].latest().version_id;
                let key = (stage.0, mini);
                let used = *self.forward_used.entry(key).or_insert(latest);
                if used == latest || self.slots[stage.0].consumers.contains_key(&used) {
                    self.slots[stage.0].add_consumer(used, mini);
                }
                self.resolved(stage, used, WeightSource::Latest)
            }
            PolicyKind::VTiMePReSt => {
                let latest = self.slots[stage.0].latest().version_id;
                self.resolved(stage, latest, WeightSource::Latest)
            }
        }
    }

    /// Weights for a backward event. `delta` is the staleness degree of the
    /// stale base under I-TiMePReSt (ignored otherwise).
    pub fn resolve_backward(
        &mut self,
        policy: Policy,
        stage: StageId,
        batch: BatchRef,
        delta: u64,
        params: DecayParams,
    ) -> Result<ResolvedWeights> {
        let mini = batch.mini_batch;
        match policy.kind {
            PolicyKind::VTiMePReSt => {
                let latest = self.slots[stage.0].latest().version_id;
                self.resolved(stage, latest, WeightSource::Latest)
            }
            PolicyKind::TiMePReSt => {
                let id = *self
                    .forward_used
                    .get(&(stage.0, mini))
                    .ok_or(Error::UnknownVersion {
                        stage: stage.0,
                        mini_batch: mini,
                    })?;
                self.resolved(stage, id, WeightSource::Stashed(id))
            }
            PolicyKind::PipeDream => {
                let pin = *self.entry_pins.get(&mini).ok_or(Error::UnknownVersion {
                    stage: stage.0,
                    mini_batch: mini,
                })?;
                self.resolved(stage, pin, WeightSource::Stashed(pin))
            }
            PolicyKind::ITiMePReSt => {
                let id = *self
                    .forward_used
                    .get(&(stage.0, mini))
                    .ok_or(Error::UnknownVersion {
                        stage: stage.0,
                        mini_batch: mini,
                    })?;
                let base = self.resolved(stage, id, WeightSource::Intermediate(id, delta))?;
                let values =
                    intermediate_weights(&base.values, delta, params)?;
                Ok(ResolvedWeights { values, ..base })
            }
        }
    }

    /// Commit the update a mini-batch's backward produced at a stage, then
    /// release that mini-batch's retention at this stage and evict every
    /// non-latest version nobody references any more.
    pub fn commit_update(
        &mut self,
        policy: Policy,
        stage: StageId,
        new: WeightVersion,
    ) -> Result<()> {
        // Under PipeDream a mini-batch entering the pipeline pins the
        // stage-0 latest index at every stage, so later stages may not
        // evict anything at or above that index even before the pin lands.
        let pin_floor = if policy.kind == PolicyKind::PipeDream {
            Some(self.slots[0].latest().version_id)
        } else {
            None
        };
        let slot = &mut self.slots[stage.0];
        let expected = slot.latest().version_id + 1;
        if new.version_id != expected {
            return Err(Error::NonMonotonicVersion {
                stage: stage.0,
                expected,
                got: new.version_id,
            });
        }
        let want = slot.latest().values.len();
        if new.values.len() != want {
            return Err(Error::DimensionMismatch {
                expected: want,
                got: new.values.len(),
            });
        }
        let mini = new.produced_by;
        slot.live.push(new);
        slot.release_consumer(mini);
        match pin_floor {
            Some(floor) => {
                let latest_id = slot.latest().version_id;
                let consumers = &slot.consumers;
                slot.live.retain(|v| {
                    v.version_id == latest_id
                        || v.version_id >= floor
                        || consumers.contains_key(&v.version_id)
                });
            }
            None => slot.evict_unreferenced(),
        }
        slot.peak_live = slot.peak_live.max(slot.live.len());
        self.forward_used.remove(&(stage.0, mini));
        Ok(())
    }

    /// Drop all cross-epoch bookkeeping. Valid only between epochs, when no
    /// mini-batch is in flight.
    pub fn reset_epoch_state(&mut self) {
        self.entry_pins.clear();
        self.forward_used.clear();
        for slot in &mut self.slots {
            slot.consumers.clear();
            slot.evict_unreferenced();
        }
    }
}

/// Per-stage peak memory, counted in live weight-version parameter bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReportRow {
    pub stage: usize,
    pub peak_live_versions: usize,
    pub peak_bytes: u64,
}

use serde::Serialize;

pub fn memory_report(store: &VersionStore, param_bytes_per_stage: u64) -> Vec<MemoryReportRow> {
    store
        .peak_live_counts()
        .iter()
        .enumerate()
        .map(|(stage, &peak)| MemoryReportRow {
            stage,
            peak_live_versions: peak,
            peak_bytes: peak as u64 * param_bytes_per_stage,
        })
        .collect()
}

/// Memory report CSV: policy, stage, peak_live_versions, peak_bytes.
pub fn memory_report_csv(rows: &[(PolicyKind, Vec<MemoryReportRow>)]) -> String {
    let mut out = String::from("policy,stage,peak_live_versions,peak_bytes\n");
    for (policy, report) in rows {
        for row in report {
            out.push_str(&format!(
                "{},{},{},{}\n",
                policy, row.stage, row.peak_live_versions, row.peak_bytes
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy(kind: PolicyKind) -> Policy {
        Policy { kind, lambda: 0.5 }
    }

    fn params() -> DecayParams {
        DecayParams::new(0.5).unwrap()
    }

    fn store2() -> VersionStore {
        VersionStore::new(vec![vec![1.0, 2.0], vec![3.0]])
    }

    fn version(id: u64, mini: usize, values: Vec<f64>) -> WeightVersion {
        WeightVersion {
            version_id: id,
            produced_by: mini,
            values,
        }
    }

    #[test]
    fn single_version_resolves_same_under_every_policy() {
        for kind in PolicyKind::ALL {
            let mut store = store2();
            let got = store
                .resolve_forward(policy(kind), StageId(0), BatchRef::forward(1, 0))
                .unwrap();
            assert_eq!(got.version_id, 0);
            assert_eq!(got.values, vec![1.0, 2.0]);
        }
    }

    #[test]
    fn v_timeprest_returns_latest_after_mid_pass_updates() {
        let mut store = store2();
        let p = policy(PolicyKind::VTiMePReSt);
        store
            .commit_update(p, StageId(0), version(1, 1, vec![9.0, 9.0]))
            .unwrap();
        store
            .commit_update(p, StageId(0), version(2, 2, vec![7.0, 7.0]))
            .unwrap();
        let got = store
            .resolve_forward(p, StageId(0), BatchRef::forward(3, 0))
            .unwrap();
        assert_eq!(got.version_id, 2);
        let got = store
            .resolve_backward(p, StageId(0), BatchRef::backward(3), 0, params())
            .unwrap();
        assert_eq!(got.source, WeightSource::Latest);
        assert_eq!(got.version_id, 2);
    }

    #[test]
    fn v_timeprest_commit_discards_immediately() {
        let mut store = store2();
        let p = policy(PolicyKind::VTiMePReSt);
        store
            .commit_update(p, StageId(0), version(1, 1, vec![9.0, 9.0]))
            .unwrap();
        store
            .commit_update(p, StageId(0), version(2, 2, vec![8.0, 8.0]))
            .unwrap();
        assert_eq!(store.live_count(StageId(0)), 1);
        assert_eq!(store.peak_live_counts()[0], 1);
    }

    #[test]
    fn pipedream_keeps_pinned_version_while_newer_exist() {
        let mut store = store2();
        let p = policy(PolicyKind::PipeDream);
        // Mini-batch 5 enters the pipeline at v0.
        store
            .resolve_forward(p, StageId(0), BatchRef::backward(5))
            .unwrap();
        store
            .commit_update(p, StageId(0), version(1, 1, vec![9.0, 9.0]))
            .unwrap();
        store
            .commit_update(p, StageId(0), version(2, 2, vec![8.0, 8.0]))
            .unwrap();
        let got = store
            .resolve_backward(p, StageId(0), BatchRef::backward(5), 0, params())
            .unwrap();
        assert_eq!(got.source, WeightSource::Stashed(0));
        assert_eq!(got.values, vec![1.0, 2.0]);
    }

    #[test]
    fn pipedream_three_in_flight_pins_stay_live() {
        let mut store = store2();
        let p = policy(PolicyKind::PipeDream);
        store
            .resolve_forward(p, StageId(0), BatchRef::backward(1))
            .unwrap(); // pins v0
        store
            .commit_update(p, StageId(0), version(1, 10, vec![0.0, 0.0]))
            .unwrap();
        store
            .resolve_forward(p, StageId(0), BatchRef::backward(2))
            .unwrap(); // pins v1
        store
            .commit_update(p, StageId(0), version(2, 11, vec![0.0, 0.0]))
            .unwrap();
        store
            .resolve_forward(p, StageId(0), BatchRef::backward(3))
            .unwrap(); // pins v2
        store
            .commit_update(p, StageId(0), version(3, 12, vec![0.0, 0.0]))
            .unwrap();
        assert_eq!(store.live_count(StageId(0)), 4); // v0..v2 pinned + v3
        assert_eq!(store.peak_live_counts()[0], 4);
    }

    #[test]
    fn itimeprest_evicts_when_last_consumer_commits() {
        // 2-stage, 3-mini-batch trace at stage 0: batches 1 and 2 forward on
        // v0; their backwards commit v1 and v2; v0 must survive until batch
        // 2's intermediate computation (its commit) and then disappear.
        let mut store = store2();
        let p = policy(PolicyKind::ITiMePReSt);
        store
            .resolve_forward(p, StageId(0), BatchRef::forward(1, 0))
            .unwrap();
        store
            .resolve_forward(p, StageId(0), BatchRef::forward(2, 0))
            .unwrap();
        store
            .commit_update(p, StageId(0), version(1, 1, vec![5.0, 5.0]))
            .unwrap();
        assert_eq!(store.live_count(StageId(0)), 2); // v0 still used by batch 2
        store
            .resolve_forward(p, StageId(0), BatchRef::forward(3, 0))
            .unwrap(); // uses v1
        let got = store
            .resolve_backward(p, StageId(0), BatchRef::backward(2), 1, params())
            .unwrap();
        assert_eq!(got.source, WeightSource::Intermediate(0, 1));
        store
            .commit_update(p, StageId(0), version(2, 2, vec![4.0, 4.0]))
            .unwrap();
        assert_eq!(store.live_count(StageId(0)), 2); // v1 (batch 3) + v2
        assert!(store
            .resolve_backward(p, StageId(0), BatchRef::backward(1), 0, params())
            .is_err()); // batch 1's record is gone after its commit...
    }

    #[test]
    fn itimeprest_delta_zero_returns_stale_values_exactly() {
        let mut store = store2();
        let p = policy(PolicyKind::ITiMePReSt);
        store
            .resolve_forward(p, StageId(0), BatchRef::forward(1, 0))
            .unwrap();
        let got = store
            .resolve_backward(p, StageId(0), BatchRef::backward(1), 0, params())
            .unwrap();
        assert_eq!(got.values, vec![1.0, 2.0]);
    }

    #[test]
    fn timeprest_backward_reuses_forward_version_unscaled() {
        let mut store = store2();
        let p = policy(PolicyKind::TiMePReSt);
        store
            .resolve_forward(p, StageId(0), BatchRef::forward(1, 0))
            .unwrap(); // forward on v0
        store
            .commit_update(p, StageId(0), version(1, 9, vec![6.0, 6.0]))
            .unwrap();
        let got = store
            .resolve_backward(p, StageId(0), BatchRef::backward(1), 0, params())
            .unwrap();
        assert_eq!(got.source, WeightSource::Stashed(0));
        assert_eq!(got.values, vec![1.0, 2.0]);
        assert_eq!(store.live_count(StageId(0)), 2);
    }

    #[test]
    fn non_monotonic_commit_is_rejected() {
        let mut store = store2();
        let p = policy(PolicyKind::VTiMePReSt);
        let err = store
            .commit_update(p, StageId(0), version(5, 1, vec![0.0, 0.0]))
            .unwrap_err();
        assert_eq!(
            err,
            Error::NonMonotonicVersion {
                stage: 0,
                expected: 1,
                got: 5
            }
        );
    }

    #[test]
    fn memory_report_scales_and_zeroes() {
        let store = store2();
        let report = memory_report(&store, 16);
        assert_eq!(report[0].peak_bytes, 16);
        let report = memory_report(&store, 0);
        assert!(report.iter().all(|r| r.peak_bytes == 0));
    }

    #[test]
    fn memory_csv_header() {
        let store = store2();
        let csv = memory_report_csv(&[(PolicyKind::VTiMePReSt, memory_report(&store, 8))]);
        assert!(csv.starts_with("policy,stage,peak_live_versions,peak_bytes\n"));
        assert!(csv.contains("v-timeprest,0,1,8\n"));
    }
}
