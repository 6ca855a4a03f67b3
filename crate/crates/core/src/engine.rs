//! Replays a timeline against a toy per-stage dense model: forward events
//! resolve weights and cache activations, backward events compute gradients
//! on the policy's backward weights and commit one SGD update per mini-batch
//! per stage through the version store.
//!
//! Resolutions happen at event start ticks and commits at event end ticks,
//! with same-tick commits applied before same-tick starts, so a version is
//! visible exactly from the tick it becomes available.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::config::{Policy, PolicyKind, SimConfig, StageId, WeightVersion};
use crate::dataset::{generate, Dataset, Generator};
use crate::error::Result;
use crate::model::{
    backward_stage, forward_stage, softmax_cross_entropy, stage_chain, top1_correct, StageModel,
};
use crate::schedule::{build_timeline, PassKind, ScheduleEvent, Timeline};
use crate::staleness::{delta_of, DecayParams, VersionHistory};
use crate::version::VersionStore;

/// Trainer knobs on top of the schedule-level `SimConfig`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub samples: usize,
    pub learning_rate: f64,
    pub generator: Generator,
    pub loss_threshold: f64,
    pub accuracy_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            input_dim: 8,
            hidden: 16,
            classes: 3,
            samples: 960,
            learning_rate: 0.05,
            generator: Generator::Blobs,
            loss_threshold: 0.35,
            accuracy_threshold: 0.9,
        }
    }
}

/// One recorded weight resolution and its staleness degree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaRecord {
    pub epoch: usize,
    pub stage: usize,
    pub mini_batch: usize,
    pub pass: PassKind,
    pub delta: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub top1_acc: f64,
    pub ticks_elapsed: u64,
    pub peak_versions: usize,
    pub mean_delta: f64,
    pub max_delta: u64,
}

/// Everything one (policy, seed) training run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub policy: PolicyKind,
    pub lambda: f64,
    pub seed: u64,
    pub epoch_span: u64,
    pub epochs: Vec<EpochStats>,
    pub deltas: Vec<DeltaRecord>,
    pub peak_live_versions: Vec<usize>,
    pub epochs_to_loss_threshold: Option<usize>,
    pub ticks_to_loss_threshold: Option<u64>,
    pub epochs_to_acc_threshold: Option<usize>,
}

impl TrainRun {
    /// Plot-ready CSV: epoch, loss, top1_acc, ticks_elapsed, peak_versions,
    /// mean_delta, max_delta.
    pub fn csv(&self) -> String {
        let mut out =
            String::from("epoch,loss,top1_acc,ticks_elapsed,peak_versions,mean_delta,max_delta\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                e.epoch, e.loss, e.top1_acc, e.ticks_elapsed, e.peak_versions, e.mean_delta, e.max_delta
            ));
        }
        out
    }
}

type CacheKey = (usize, usize, usize); // (mini, micro, stage)

struct Runner<'a> {
    cfg: SimConfig,
    train: TrainConfig,
    policy: Policy,
    params: DecayParams,
    models: Vec<StageModel>,
    store: VersionStore,
    dataset: &'a Dataset,
    timeline: Timeline,
    micros: usize,
    // per-epoch state
    inputs_cache: HashMap<CacheKey, Vec<Vec<f64>>>,
    outputs_cache: HashMap<CacheKey, Vec<Vec<f64>>>,
    // gradient w.r.t. the outputs of (mini, micro, stage)
    out_grads: HashMap<CacheKey, Vec<Vec<f64>>>,
    pending_commits: HashMap<usize, WeightVersion>, // stage -> next version
    history: VersionHistory,
}

impl<'a> Runner<'a> {
    fn new(cfg: &SimConfig, train: &TrainConfig, dataset: &'a Dataset, initial: Vec<Vec<f64>>) -> Self {
        let policy = cfg.policy();
        let micros = if policy.kind.uses_nf1b() {
            cfg.micro_batches
        } else {
            1
        };
        Runner {
            cfg: cfg.clone(),
            train: *train,
            policy,
            params: DecayParams { lambda: policy.lambda },
            models: stage_chain(cfg.stages, train.input_dim, train.hidden, train.classes),
            store: VersionStore::new(initial),
            dataset,
            timeline: build_timeline(cfg),
            micros,
            inputs_cache: HashMap::new(),
            outputs_cache: HashMap::new(),
            out_grads: HashMap::new(),
            pending_commits: HashMap::new(),
            history: VersionHistory::new(cfg.stages),
        }
    }

    fn record_delta(
        &self,
        deltas: &mut Vec<DeltaRecord>,
        epoch: usize,
        stage: StageId,
        mini: usize,
        pass: PassKind,
        used_version: u64,
    ) {
        let delta = self.store.latest_id(stage) - used_version;
        deltas.push(DeltaRecord {
            epoch,
            stage: stage.0,
            mini_batch: mini,
            pass,
            delta,
        });
    }

    fn forward_event(
        &mut self,
        e: &ScheduleEvent,
        micro_groups: &[Vec<Vec<usize>>],
        epoch: usize,
        deltas: &mut Vec<DeltaRecord>,
    ) -> Result<()> {
        let s = e.stage.0;
        let mini = e.batch.mini_batch;
        let micro = e.batch.micro_batch.unwrap_or(0);
        let resolved = self.store.resolve_forward(self.policy, e.stage, e.batch)?;
        self.history.record_forward(e.stage, mini, e.start_tick);
        self.record_delta(deltas, epoch, e.stage, mini, PassKind::Forward, resolved.version_id);

        let inputs: Vec<Vec<f64>> = if s == 0 {
            micro_groups[mini - 1][micro]
                .iter()
                .map(|&i| self.dataset.inputs[i].clone())
                .collect()
        } else {
            self.outputs_cache
                .get(&(mini, micro, s - 1))
                .expect("forward dependency satisfied by schedule")
                .clone()
        };
        let outputs = forward_stage(&self.models[s], &resolved.values, &inputs)?;
        self.inputs_cache.insert((mini, micro, s), inputs);
        self.outputs_cache.insert((mini, micro, s), outputs);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_event(
        &mut self,
        e: &ScheduleEvent,
        micro_groups: &[Vec<Vec<usize>>],
        epoch: usize,
        deltas: &mut Vec<DeltaRecord>,
        loss_sum: &mut f64,
        correct: &mut usize,
    ) -> Result<()> {
        let s = e.stage.0;
        let mini = e.batch.mini_batch;
        let last = self.cfg.stages - 1;
        let mini_size: usize = micro_groups[mini - 1].iter().map(|u| u.len()).sum();

        if s == last {
            // Loss gradient per micro-batch, scaled so the summed parameter
            // gradient is the mean over the whole mini-batch.
            let mut mini_loss = 0.0;
            for u in 0..self.micros {
                let logits = self.outputs_cache[&(mini, u, last)].clone();
                let labels: Vec<usize> = micro_groups[mini - 1][u]
                    .iter()
                    .map(|&i| self.dataset.labels[i])
                    .collect();
                let (loss, grads) = softmax_cross_entropy(&logits, &labels, mini_size)?;
                mini_loss += loss * logits.len() as f64;
                *correct += top1_correct(&logits, &labels);
                self.out_grads.insert((mini, u, last), grads);
            }
            *loss_sum += mini_loss / mini_size as f64;
        }

        let delta_in = if self.policy.kind == PolicyKind::ITiMePReSt {
            delta_of(e, &self.history)?.delta
        } else {
            0
        };
        let resolved = self
            .store
            .resolve_backward(self.policy, e.stage, e.batch, delta_in, self.params)?;
        self.record_delta(deltas, epoch, e.stage, mini, PassKind::Backward, resolved.version_id);

        let mut grad = vec![0.0; self.models[s].param_len()];
        for u in 0..self.micros {
            let upstream = self
                .out_grads
                .remove(&(mini, u, s))
                .expect("backward dependency satisfied by schedule");
            let inputs = self.inputs_cache.remove(&(mini, u, s)).unwrap();
            let outputs = self.outputs_cache.remove(&(mini, u, s)).unwrap();
            let (g, downstream) =
                backward_stage(&self.models[s], &resolved.values, &inputs, &outputs, &upstream)?;
            for (acc, gi) in grad.iter_mut().zip(&g) {
                *acc += gi;
            }
            if s > 0 {
                self.out_grads.insert((mini, u, s - 1), downstream);
            }
        }

        // The gradient is evaluated at the policy's backward weights, but the
        // update always applies to the freshest version at the stage, so stale
        // or rescaled bases never overwrite newer progress.
        let new_values: Vec<f64> = self
            .store
            .latest_values(e.stage)
            .iter()
            .zip(&grad)
            .map(|(w, g)| w - self.train.learning_rate * g)
            .collect();
        self.pending_commits.insert(
            s,
            WeightVersion {
                version_id: self.store.latest_id(e.stage) + 1,
                produced_by: mini,
                values: new_values,
            },
        );
        Ok(())
    }

    fn commit_event(&mut self, e: &ScheduleEvent) -> Result<()> {
        let version = self
            .pending_commits
            .remove(&e.stage.0)
            .expect("commit follows its backward compute");
        self.store.commit_update(self.policy, e.stage, version)?;
        self.history.record_commit(e.stage, e.end_tick);
        Ok(())
    }

    fn run_epoch(&mut self, epoch: usize, deltas: &mut Vec<DeltaRecord>) -> Result<(f64, f64)> {
        let micro_groups =
            self.dataset
                .micro_batches(self.cfg.mini_batches, self.micros, self.cfg.seed, epoch)?;
        self.history = VersionHistory::new(self.cfg.stages);

        // (tick, phase, stage, mini, micro, event index); commits (phase 0)
        // apply before same-tick starts (phase 1).
        let mut actions: Vec<(u64, u8, usize, usize, usize, usize)> = Vec::new();
        for (i, e) in self.timeline.events.iter().enumerate() {
            let micro = e.batch.micro_batch.unwrap_or(0);
            actions.push((e.start_tick, 1, e.stage.0, e.batch.mini_batch, micro, i));
            if e.pass == PassKind::Backward {
                actions.push((e.end_tick, 0, e.stage.0, e.batch.mini_batch, micro, i));
            }
        }
        actions.sort_unstable();

        let mut loss_sum = 0.0;
        let mut correct = 0;
        let events = self.timeline.events.clone();
        for (_, phase, _, _, _, i) in actions {
            let e = &events[i];
            match (phase, e.pass) {
                (1, PassKind::Forward) => self.forward_event(e, &micro_groups, epoch, deltas)?,
                (1, PassKind::Backward) => self.backward_event(
                    e,
                    &micro_groups,
                    epoch,
                    deltas,
                    &mut loss_sum,
                    &mut correct,
                )?,
                (0, PassKind::Backward) => self.commit_event(e)?,
                _ => unreachable!(),
            }
        }

        debug_assert!(self.inputs_cache.is_empty());
        debug_assert!(self.pending_commits.is_empty());
        self.store.reset_epoch_state();

        let loss = loss_sum / self.cfg.mini_batches as f64;
        let acc = correct as f64 / self.dataset.inputs.len() as f64;
        Ok((loss, acc))
    }
}

/// Initial per-stage parameter vectors, shared across policies for a seed.
pub fn initial_parameters(cfg: &SimConfig, train: &TrainConfig) -> Vec<Vec<f64>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    stage_chain(cfg.stages, train.input_dim, train.hidden, train.classes)
        .iter()
        .map(|m| m.init_params(&mut rng))
        .collect()
}

/// Train one policy for `cfg.epochs` epochs over a shared dataset.
pub fn run_policy(cfg: &SimConfig, train: &TrainConfig, dataset: &Dataset) -> Result<TrainRun> {
    let initial = initial_parameters(cfg, train);
    let mut runner = Runner::new(cfg, train, dataset, initial);
    let epoch_span = runner.timeline.epoch_span;
    let mut deltas = Vec::new();
    let mut epochs = Vec::new();
    let mut epochs_to_loss = None;
    let mut epochs_to_acc = None;

    for epoch in 1..=cfg.epochs {
        let before = deltas.len();
        let (loss, acc) = runner.run_epoch(epoch, &mut deltas)?;
        let epoch_deltas = &deltas[before..];
        let mean_delta = if epoch_deltas.is_empty() {
            0.0
        } else {
            epoch_deltas.iter().map(|d| d.delta as f64).sum::<f64>() / epoch_deltas.len() as f64
        };
        let max_delta = epoch_deltas.iter().map(|d| d.delta).max().unwrap_or(0);
        epochs.push(EpochStats {
            epoch,
            loss,
            top1_acc: acc,
            ticks_elapsed: epoch_span * epoch as u64,
            peak_versions: runner.store.peak_live_counts().into_iter().max().unwrap_or(1),
            mean_delta,
            max_delta,
        });
        if epochs_to_loss.is_none() && loss <= train.loss_threshold {
            epochs_to_loss = Some(epoch);
        }
        if epochs_to_acc.is_none() && acc >= train.accuracy_threshold {
            epochs_to_acc = Some(epoch);
        }
    }

    Ok(TrainRun {
        policy: cfg.policy,
        lambda: cfg.policy().lambda,
        seed: cfg.seed,
        epoch_span,
        epochs,
        deltas,
        peak_live_versions: runner.store.peak_live_counts(),
        epochs_to_loss_threshold: epochs_to_loss,
        ticks_to_loss_threshold: epochs_to_loss.map(|e| e as u64 * epoch_span),
        epochs_to_acc_threshold: epochs_to_acc,
    })
}

/// Run the same seed and dataset through a list of policies.
pub fn run_experiment(
    cfg: &SimConfig,
    train: &TrainConfig,
    policies: &[PolicyKind],
) -> Result<Vec<TrainRun>> {
    let dataset = generate(
        train.generator,
        train.samples,
        train.input_dim,
        train.classes,
        cfg.seed,
    );
    policies
        .iter()
        .map(|&kind| run_policy(&cfg.with_policy(kind), train, &dataset))
        .collect()
}
