//! Deterministic per-epoch event timelines for 1F1B (PipeDream) and nF1B
//! (TiMePReSt family) scheduling.
//!
//! Events are placed by earliest-start greedy scheduling over the dependency
//! DAG, with the tie-break: backward-ready events win over forward-ready at
//! the same tick, and among forwards lower (mini, micro) goes first. Micro-
//! batch forwards within a stage are serialized on consecutive ticks since a
//! stage is a single device.

use serde::{Deserialize, Serialize};

use crate::config::{BatchRef, SimConfig, StageId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PassKind {
    Forward,
    Backward,
}

impl PassKind {
    pub fn letter(self) -> char {
        match self {
            PassKind::Forward => 'F',
            PassKind::Backward => 'B',
        }
    }
}

/// One box of the pipeline diagram: a pass on one stage over a tick span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub stage: StageId,
    pub start_tick: u64,
    pub end_tick: u64,
    pub pass: PassKind,
    pub batch: BatchRef,
}

impl ScheduleEvent {
    fn id(&self) -> EventId {
        EventId {
            pass: self.pass,
            batch: self.batch,
            stage: self.stage,
        }
    }
}

/// Identity of an event independent of its placement in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId {
    pub pass: PassKind,
    pub batch: BatchRef,
    pub stage: StageId,
}

/// The full per-epoch plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    /// Sorted by (start_tick, stage).
    pub events: Vec<ScheduleEvent>,
    pub epoch_span: u64,
    pub idle_ticks_per_stage: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Overlap {
        stage: StageId,
        first: EventId,
        second: EventId,
    },
    Dependency {
        before: EventId,
        after: EventId,
    },
    BadDuration {
        event: EventId,
        expected: u64,
        got: u64,
    },
    Cycle,
}

/// Event templates plus dependency edges for one scheme, in a fixed order.
///
/// Shared by the generator and the verifier so both reason about the same
/// DAG. The in-flight bound is part of the scheme: at stage `s` (0-based),
/// forward admission of mini-batch `b` waits for the backward of mini-batch
/// `b - (S - s)` at the same stage, which yields the steady-state
/// one-forward/one-backward alternation without circular waiting.
fn scheme_graph(cfg: &SimConfig, nf1b: bool) -> (Vec<(EventId, u64)>, Vec<(usize, usize)>) {
    let s_count = cfg.stages;
    let m_count = cfg.mini_batches;
    let micros = if nf1b { cfg.micro_batches } else { 1 };
    // A 1F1B forward box carries the whole mini-batch, so it costs the same
    // total work as the m micro-batch boxes of nF1B.
    let fwd_duration = if nf1b {
        cfg.fwd_cost
    } else {
        cfg.fwd_cost * cfg.micro_batches as u64
    };

    let mut templates = Vec::new();
    let mut index = std::collections::HashMap::new();
    for b in 1..=m_count {
        for u in 0..micros {
            for s in 0..s_count {
                let batch = if nf1b {
                    BatchRef::forward(b, u)
                } else {
                    BatchRef {
                        mini_batch: b,
                        micro_batch: None,
                    }
                };
                let id = EventId {
                    pass: PassKind::Forward,
                    batch,
                    stage: StageId(s),
                };
                index.insert(id, templates.len());
                templates.push((id, fwd_duration));
            }
        }
        for s in 0..s_count {
            let id = EventId {
                pass: PassKind::Backward,
                batch: BatchRef::backward(b),
                stage: StageId(s),
            };
            index.insert(id, templates.len());
            templates.push((id, cfg.bwd_cost));
        }
    }

    let fwd_id = |b: usize, u: usize, s: usize| EventId {
        pass: PassKind::Forward,
        batch: if nf1b {
            BatchRef::forward(b, u)
        } else {
            BatchRef {
                mini_batch: b,
                micro_batch: None,
            }
        },
        stage: StageId(s),
    };
    let bwd_id = |b: usize, s: usize| EventId {
        pass: PassKind::Backward,
        batch: BatchRef::backward(b),
        stage: StageId(s),
    };

    let mut edges = Vec::new();
    let mut edge = |from: EventId, to: EventId| {
        edges.push((index[&from], index[&to]));
    };
    for b in 1..=m_count {
        for u in 0..micros {
            for s in 0..s_count {
                if s > 0 {
                    edge(fwd_id(b, u, s - 1), fwd_id(b, u, s));
                }
                let in_flight = s_count - s;
                if b > in_flight {
                    edge(bwd_id(b - in_flight, s), fwd_id(b, u, s));
                }
                // Backward at a stage needs that stage's forward work done.
                // Redundant for s < S-1 (implied transitively) but kept so
                // the verifier catches locally inverted timelines.
                edge(fwd_id(b, u, s), bwd_id(b, s));
            }
        }
        for s in 0..s_count - 1 {
            edge(bwd_id(b, s + 1), bwd_id(b, s));
        }
    }
    (templates, edges)
}

fn tie_break_key(id: &EventId) -> (u8, usize, usize, usize) {
    let pass_rank = match id.pass {
        PassKind::Backward => 0,
        PassKind::Forward => 1,
    };
    (
        pass_rank,
        id.batch.mini_batch,
        id.batch.micro_batch.unwrap_or(0),
        id.stage.0,
    )
}

fn schedule(cfg: &SimConfig, nf1b: bool) -> Timeline {
    let (templates, edges) = scheme_graph(cfg, nf1b);
    let n = templates.len();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(from, to) in &edges {
        preds[to].push(from);
    }

    let mut end_tick: Vec<Option<u64>> = vec![None; n];
    let mut start_tick: Vec<u64> = vec![0; n];
    let mut stage_free: Vec<u64> = vec![0; cfg.stages];
    let mut remaining: Vec<usize> = (0..n).collect();

    while !remaining.is_empty() {
        // Among ready events pick the one with the earliest feasible start,
        // breaking ties by (backward-first, mini, micro, stage).
        let mut best: Option<(u64, (u8, usize, usize, usize), usize)> = None;
        for (pos, &i) in remaining.iter().enumerate() {
            let mut est = stage_free[templates[i].0.stage.0];
            let mut ready = true;
            for &p in &preds[i] {
                match end_tick[p] {
                    Some(t) => est = est.max(t),
                    None => {
                        ready = false;
                        break;
                    }
                }
            }
            if !ready {
                continue;
            }
            let key = (est, tie_break_key(&templates[i].0), pos);
            if best.map_or(true, |(b_est, b_key, _)| (b_est, b_key) > (est, key.1)) {
                best = Some((est, key.1, pos));
            }
        }
        let (est, _, pos) = best.expect("dependency graph is acyclic");
        let i = remaining.swap_remove(pos);
        let (id, duration) = templates[i];
        start_tick[i] = est;
        end_tick[i] = Some(est + duration);
        stage_free[id.stage.0] = est + duration;
    }

    let mut events: Vec<ScheduleEvent> = (0..n)
        .map(|i| ScheduleEvent {
            stage: templates[i].0.stage,
            start_tick: start_tick[i],
            end_tick: end_tick[i].unwrap(),
            pass: templates[i].0.pass,
            batch: templates[i].0.batch,
        })
        .collect();
    events.sort_by_key(|e| (e.start_tick, e.stage.0, tie_break_key(&e.id())));

    let epoch_span = events.iter().map(|e| e.end_tick).max().unwrap_or(0);
    let mut busy = vec![0u64; cfg.stages];
    for e in &events {
        busy[e.stage.0] += e.end_tick - e.start_tick;
    }
    let idle_ticks_per_stage = busy.iter().map(|&b| epoch_span - b).collect();

    Timeline {
        events,
        epoch_span,
        idle_ticks_per_stage,
    }
}

/// 1F1B schedule for PipeDream: one forward box per mini-batch per stage,
/// with no micro-batch distinction.
pub fn build_1f1b(cfg: &SimConfig) -> Timeline {
    schedule(cfg, false)
}

/// nF1B schedule for the TiMePReSt family: m forward micro-batch boxes per
/// mini-batch per stage and a single collective backward per stage.
pub fn build_nf1b(cfg: &SimConfig) -> Timeline {
    schedule(cfg, true)
}

/// Build the timeline matching the config's policy.
pub fn build_timeline(cfg: &SimConfig) -> Timeline {
    if cfg.policy.uses_nf1b() {
        build_nf1b(cfg)
    } else {
        build_1f1b(cfg)
    }
}

/// Check a timeline against the scheme's invariants. Empty iff the timeline
/// has correct durations, no same-stage overlap, all dependencies respected
/// and an acyclic dependency graph.
pub fn verify_timeline(t: &Timeline, cfg: &SimConfig) -> Vec<Violation> {
    let nf1b = cfg.policy.uses_nf1b();
    let (templates, edges) = scheme_graph(cfg, nf1b);
    let mut violations = Vec::new();

    let mut by_id = std::collections::HashMap::new();
    for e in &t.events {
        by_id.insert(e.id(), *e);
    }

    for &(id, duration) in &templates {
        if let Some(e) = by_id.get(&id) {
            let got = e.end_tick.saturating_sub(e.start_tick);
            if got != duration {
                violations.push(Violation::BadDuration {
                    event: id,
                    expected: duration,
                    got,
                });
            }
        }
    }

    // Same-stage overlap.
    for s in 0..cfg.stages {
        let mut on_stage: Vec<&ScheduleEvent> = t
            .events
            .iter()
            .filter(|e| e.stage.0 == s)
            .collect();
        on_stage.sort_by_key(|e| (e.start_tick, e.end_tick));
        for pair in on_stage.windows(2) {
            if pair[1].start_tick < pair[0].end_tick {
                violations.push(Violation::Overlap {
                    stage: StageId(s),
                    first: pair[0].id(),
                    second: pair[1].id(),
                });
            }
        }
    }

    // Dependencies, over the edges whose endpoints are both present.
    for &(from, to) in &edges {
        let (from_id, _) = templates[from];
        let (to_id, _) = templates[to];
        if let (Some(a), Some(b)) = (by_id.get(&from_id), by_id.get(&to_id)) {
            if b.start_tick < a.end_tick {
                violations.push(Violation::Dependency {
                    before: from_id,
                    after: to_id,
                });
            }
        }
    }

    // Acyclicity of the dependency graph (Kahn).
    let n = templates.len();
    let mut indegree = vec![0usize; n];
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(from, to) in &edges {
        indegree[to] += 1;
        succs[from].push(to);
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop() {
        seen += 1;
        for &j in &succs[i] {
            indegree[j] -= 1;
            if indegree[j] == 0 {
                queue.push(j);
            }
        }
    }
    if seen != n {
        violations.push(Violation::Cycle);
    }

    violations
}

/// Timeline export: one row per event, sorted by (start_tick, stage); the
/// micro_batch column is empty for backward (and 1F1B forward) events.
pub fn timeline_csv(t: &Timeline) -> String {
    let mut out = String::from("stage,start_tick,end_tick,pass,mini_batch,micro_batch\n");
    let mut rows: Vec<&ScheduleEvent> = t.events.iter().collect();
    rows.sort_by_key(|e| (e.start_tick, e.stage.0));
    for e in rows {
        let micro = e
            .batch
            .micro_batch
            .map(|u| u.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.stage.0,
            e.start_tick,
            e.end_tick,
            e.pass.letter(),
            e.batch.mini_batch,
            micro
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PolicyKind;

    fn cfg(stages: usize, mini: usize, micro: usize, kind: PolicyKind) -> SimConfig {
        SimConfig {
            stages,
            mini_batches: mini,
            micro_batches: micro,
            fwd_cost: 1,
            bwd_cost: 2,
            epochs: 1,
            seed: 0,
            policy: kind,
            lambda: Some(0.5),
        }
    }

    #[test]
    fn single_batch_is_a_staircase() {
        // M=1: forward chain of S events, then backward chain of S events.
        let c = cfg(3, 1, 2, PolicyKind::PipeDream);
        let t = build_1f1b(&c);
        assert_eq!(t.events.len(), 6);
        // Forward box covers both micro-batches: 2 ticks.
        assert_eq!(t.epoch_span, 3 * 2 + 3 * 2);
        let c = cfg(3, 1, 1, PolicyKind::PipeDream);
        let t = build_1f1b(&c);
        assert_eq!(t.epoch_span, 3 * 1 + 3 * 2);
    }

    #[test]
    fn two_stage_two_batch_event_count() {
        let t = build_1f1b(&cfg(2, 2, 1, PolicyKind::PipeDream));
        assert_eq!(t.events.len(), 8);
    }

    #[test]
    fn nf1b_event_counts() {
        // S=4, M=2, m=2: per stage 4 forward + 2 backward events.
        let c = cfg(4, 2, 2, PolicyKind::TiMePReSt);
        let t = build_nf1b(&c);
        for s in 0..4 {
            let fwd = t
                .events
                .iter()
                .filter(|e| e.stage.0 == s && e.pass == PassKind::Forward)
                .count();
            let bwd = t
                .events
                .iter()
                .filter(|e| e.stage.0 == s && e.pass == PassKind::Backward)
                .count();
            assert_eq!(fwd, 4);
            assert_eq!(bwd, 2);
        }
        // Stage 0 starts with mini-batch 1 micro-batches a then b.
        let first_two: Vec<_> = t
            .events
            .iter()
            .filter(|e| e.stage.0 == 0)
            .take(2)
            .map(|e| e.batch)
            .collect();
        assert_eq!(first_two[0], BatchRef::forward(1, 0));
        assert_eq!(first_two[1], BatchRef::forward(1, 1));
    }

    #[test]
    fn generators_satisfy_own_checker() {
        for (s, m, micro) in [(2, 3, 2), (4, 4, 2), (2, 8, 1), (4, 8, 3)] {
            let c1 = cfg(s, m, micro, PolicyKind::PipeDream);
            assert!(verify_timeline(&build_1f1b(&c1), &c1).is_empty());
            let c2 = cfg(s, m, micro, PolicyKind::VTiMePReSt);
            assert!(verify_timeline(&build_nf1b(&c2), &c2).is_empty());
        }
    }

    #[test]
    fn overlap_is_reported() {
        let c = cfg(2, 2, 1, PolicyKind::PipeDream);
        let mut t = build_1f1b(&c);
        // Drag the second stage-0 event onto the first.
        let idx = t
            .events
            .iter()
            .position(|e| e.stage.0 == 0 && e.start_tick > 0)
            .unwrap();
        let d = t.events[idx].end_tick - t.events[idx].start_tick;
        t.events[idx].start_tick = 0;
        t.events[idx].end_tick = d;
        let violations = verify_timeline(&t, &c);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::Overlap { stage: StageId(0), .. })));
    }

    #[test]
    fn backward_before_forward_is_reported() {
        let c = cfg(2, 1, 1, PolicyKind::PipeDream);
        let mut t = build_1f1b(&c);
        for e in &mut t.events {
            let d = e.end_tick - e.start_tick;
            if e.pass == PassKind::Backward && e.stage.0 == 1 {
                e.start_tick = 0;
                e.end_tick = d;
            } else if e.pass == PassKind::Forward {
                e.start_tick += 10;
                e.end_tick = e.start_tick + d;
            }
        }
        let violations = verify_timeline(&t, &c);
        assert!(violations
            .iter()
            .any(|v| matches!(v, Violation::Dependency { .. })));
    }

    #[test]
    fn steady_state_alternates_without_overlap() {
        let c = cfg(4, 4, 1, PolicyKind::PipeDream);
        let t = build_1f1b(&c);
        assert!(verify_timeline(&t, &c).is_empty());
        // The last stage strictly alternates F and B.
        let last: Vec<PassKind> = t
            .events
            .iter()
            .filter(|e| e.stage.0 == 3)
            .map(|e| e.pass)
            .collect();
        for pair in last.windows(2) {
            assert_ne!(pair[0], pair[1]);
        }
    }

    #[test]
    fn csv_has_stable_header_and_rows() {
        let c = cfg(2, 1, 1, PolicyKind::PipeDream);
        let csv = timeline_csv(&build_1f1b(&c));
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "stage,start_tick,end_tick,pass,mini_batch,micro_batch"
        );
        assert_eq!(csv.lines().count(), 1 + 4);
        assert_eq!(lines.next().unwrap(), "0,0,1,F,1,");
    }
}
