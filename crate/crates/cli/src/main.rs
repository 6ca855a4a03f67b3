//! `pipesim`: schedule, run and verify pipeline-parallel training
//! simulations from the command line.
//!
//! Exit codes: 0 success, 1 failed invariant or runtime error, 2 usage or
//! config error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use pipesim_core::dataset::generate;
use pipesim_core::engine::EpochStats;
use pipesim_core::version::MemoryReportRow;
use pipesim_core::{
    build_timeline, memory_report_csv, run_policy, timeline_csv, validate_config,
    verify_timeline, PassKind, PolicyKind, SimConfig, Timeline, TrainConfig, TrainRun,
};

#[derive(Parser)]
#[command(name = "pipesim", version, about = "Logical-time pipeline-parallel training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a timeline, write timeline.csv and print the stage/tick grid.
    Schedule(ScheduleArgs),
    /// Train every requested (policy, seed) cell and write run artifacts.
    Run(RunArgs),
    /// Check the simulator's invariants and report pass/fail per family.
    Verify(VerifyArgs),
}

/// Flags mirroring the SimConfig keys; `--config` supplies a JSON file with
/// the same keys, and explicit flags override it field by field.
#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    mini_batches: Option<usize>,
    #[arg(long)]
    micro_batches: Option<usize>,
    #[arg(long)]
    fwd_cost: Option<u64>,
    #[arg(long)]
    bwd_cost: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// pipedream, timeprest, v-timeprest or i-timeprest.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config file {}", path.display()))?;
                serde_json::from_str::<SimConfig>(&text)
                    .with_context(|| format!("parsing config file {}", path.display()))?
            }
            None => SimConfig {
                stages: 4,
                mini_batches: 8,
                micro_batches: 2,
                fwd_cost: 1,
                bwd_cost: 2,
                epochs: 1,
                seed: 0,
                policy: PolicyKind::TiMePReSt,
                lambda: Some(0.5),
            },
        };
        if let Some(v) = self.stages {
            cfg.stages = v;
        }
        if let Some(v) = self.mini_batches {
            cfg.mini_batches = v;
        }
        if let Some(v) = self.micro_batches {
            cfg.micro_batches = v;
        }
        if let Some(v) = self.fwd_cost {
            cfg.fwd_cost = v;
        }
        if let Some(v) = self.bwd_cost {
            cfg.bwd_cost = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(name) = &self.policy {
            cfg.policy = parse_policy(name)?;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = Some(v);
        }
        Ok(validate_config(cfg)?)
    }
}

/// Marker for problems in the user's flags or config file (exit code 2).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_policy(name: &str) -> Result<PolicyKind> {
    PolicyKind::parse(name).ok_or_else(|| {
        let valid: Vec<&str> = PolicyKind::ALL.iter().map(|k| k.name()).collect();
        anyhow::Error::new(UsageError(format!(
            "unknown policy {name:?}; valid names: {}",
            valid.join(", ")
        )))
    })
}

#[derive(Args)]
struct ScheduleArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for timeline.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for trainrun CSVs, memory.csv and summary.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Comma-separated policies; defaults to all four.
    #[arg(long, value_delimiter = ',')]
    policies: Vec<String>,
    /// Comma-separated seeds; defaults to the single --seed value.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 0.35)]
    loss_threshold: f64,
    #[arg(long, default_value_t = 0.9)]
    acc_threshold: f64,
    /// Dataset size; must divide evenly into mini- and micro-batches.
    #[arg(long, default_value_t = 960)]
    samples: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Check the full config sweep instead of just the given config.
    #[arg(long)]
    sweep: bool,
    /// Test hook: corrupt the timeline before checking (negative control).
    #[arg(long, hide = true)]
    inject_corrupt: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Schedule(args) => cmd_schedule(args),
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
    };
    match code {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            // Config and usage problems exit 2; anything else is a runtime
            // failure.
            let usage = err.is::<UsageError>()
                || err.is::<pipesim_core::Error>()
                || err.chain().any(|c| c.to_string().contains("config file"));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn cmd_schedule(args: ScheduleArgs) -> Result<ExitCode> {
    let cfg = args.cfg.resolve()?;
    let timeline = build_timeline(&cfg);
    std::fs::create_dir_all(&args.out)?;
    let path = args.out.join("timeline.csv");
    std::fs::write(&path, timeline_csv(&timeline))?;
    print!("{}", render_gantt(&timeline, &cfg));
    println!("epoch_span: {} ticks", timeline.epoch_span);
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// Stage-by-tick character grid: forward boxes show the mini-batch id plus a
/// micro-batch letter ("1a"), backward boxes the id plus "B", idle ticks a
/// dot. Every tick of a box repeats its label, so covered cell count equals
/// the timeline's busy tick count.
fn render_gantt(t: &Timeline, cfg: &SimConfig) -> String {
    let span = t.epoch_span as usize;
    let mut cells: Vec<Vec<String>> = vec![vec![String::from("."); span]; cfg.stages];
    let mut width = 1;
    for e in &t.events {
        let label = match (e.pass, e.batch.micro_batch) {
            (PassKind::Forward, Some(u)) => {
                format!("{}{}", e.batch.mini_batch, (b'a' + u as u8) as char)
            }
            (PassKind::Forward, None) => format!("{}F", e.batch.mini_batch),
            (PassKind::Backward, _) => format!("{}B", e.batch.mini_batch),
        };
        width = width.max(label.len());
        for tick in e.start_tick..e.end_tick {
            cells[e.stage.0][tick as usize] = label.clone();
        }
    }
    let mut out = String::new();
    for (s, row) in cells.iter().enumerate() {
        out.push_str(&format!("stage {s} |"));
        for cell in row {
            out.push_str(&format!(" {cell:>width$}"));
        }
        out.push('\n');
    }
    out
}

/// Median over seeds; runs that never reached the threshold sort last and
/// an unreached median reports as None.
fn median_reached(values: &[Option<usize>]) -> Option<usize> {
    let mut sorted: Vec<Option<usize>> = values.to_vec();
    sorted.sort_by_key(|v| v.map_or((1, 0), |x| (0, x)));
    sorted[sorted.len() / 2]
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    epochs_to_loss_threshold: Option<usize>,
    ticks_to_loss_threshold: Option<u64>,
    epochs_to_acc_threshold: Option<usize>,
    final_loss: f64,
    final_top1_acc: f64,
}

#[derive(Serialize)]
struct PolicySummary {
    lambda: f64,
    epoch_span: u64,
    median_epochs_to_loss_threshold: Option<usize>,
    median_ticks_to_loss_threshold: Option<u64>,
    median_epochs_to_acc_threshold: Option<usize>,
    peak_live_versions: Vec<usize>,
    seeds: Vec<SeedSummary>,
}

#[derive(Serialize)]
struct Summary {
    config: SimConfig,
    seeds: Vec<u64>,
    loss_threshold: f64,
    acc_threshold: f64,
    policies: BTreeMap<String, PolicySummary>,
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let base = args.cfg.resolve()?;
    let policies: Vec<PolicyKind> = if args.policies.is_empty() {
        PolicyKind::ALL.to_vec()
    } else {
        args.policies
            .iter()
            .map(|name| parse_policy(name))
            .collect::<Result<_>>()?
    };
    let seeds = if args.seeds.is_empty() {
        vec![base.seed]
    } else {
        args.seeds.clone()
    };
    let train = TrainConfig {
        samples: args.samples,
        learning_rate: args.learning_rate,
        loss_threshold: args.loss_threshold,
        accuracy_threshold: args.acc_threshold,
        ..TrainConfig::default()
    };

    if let Ok(threads) = std::env::var("PIPESIM_THREADS") {
        let n: usize = threads.parse().map_err(|_| {
            anyhow::Error::new(UsageError(format!(
                "PIPESIM_THREADS must be a positive integer, got {threads:?}"
            )))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok(); // a pool may already exist in-process; the cap is best-effort
    }

    // Fan the (policy, seed) cells out to the pool; files are written by
    // this thread only, after all cells complete.
    use rayon::prelude::*;
    let cells: Vec<(PolicyKind, u64)> = policies
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let runs: Vec<TrainRun> = cells
        .par_iter()
        .map(|&(kind, seed)| {
            let cfg = SimConfig {
                seed,
                ..base.with_policy(kind)
            };
            let dataset = generate(train.generator, train.samples, train.input_dim, train.classes, seed);
            run_policy(&cfg, &train, &dataset)
        })
        .collect::<pipesim_core::Result<_>>()?;

    std::fs::create_dir_all(&args.out)?;
    for run in &runs {
        let name = format!("trainrun_{}_seed{}.csv", run.policy, run.seed);
        std::fs::write(args.out.join(name), run.csv())?;
    }
    write_memory_csv(&args.out, &policies, &runs)?;

    let mut summary = Summary {
        config: base.clone(),
        seeds: seeds.clone(),
        loss_threshold: args.loss_threshold,
        acc_threshold: args.acc_threshold,
        policies: BTreeMap::new(),
    };
    for &kind in &policies {
        let of_kind: Vec<&TrainRun> = runs.iter().filter(|r| r.policy == kind).collect();
        let stages = base.stages;
        let peak = (0..stages)
            .map(|s| of_kind.iter().map(|r| r.peak_live_versions[s]).max().unwrap_or(1))
            .collect();
        let epochs: Vec<Option<usize>> =
            of_kind.iter().map(|r| r.epochs_to_loss_threshold).collect();
        let median_epochs = median_reached(&epochs);
        let acc_epochs: Vec<Option<usize>> =
            of_kind.iter().map(|r| r.epochs_to_acc_threshold).collect();
        summary.policies.insert(
            kind.name().to_string(),
            PolicySummary {
                lambda: of_kind.first().map_or(0.0, |r| r.lambda),
                epoch_span: of_kind.first().map_or(0, |r| r.epoch_span),
                median_epochs_to_loss_threshold: median_epochs,
                median_ticks_to_loss_threshold: median_epochs
                    .map(|e| e as u64 * of_kind[0].epoch_span),
                median_epochs_to_acc_threshold: median_reached(&acc_epochs),
                peak_live_versions: peak,
                seeds: of_kind
                    .iter()
                    .map(|r| {
                        let last: &EpochStats = r.epochs.last().expect("at least one epoch");
                        SeedSummary {
                            seed: r.seed,
                            epochs_to_loss_threshold: r.epochs_to_loss_threshold,
                            ticks_to_loss_threshold: r.ticks_to_loss_threshold,
                            epochs_to_acc_threshold: r.epochs_to_acc_threshold,
                            final_loss: last.loss,
                            final_top1_acc: last.top1_acc,
                        }
                    })
                    .collect(),
            },
        );
    }
    let path = args.out.join("summary.json");
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    std::fs::write(&path, json)?;
    println!(
        "wrote {} trainrun files, memory.csv and summary.json to {}",
        runs.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_memory_csv(out: &Path, policies: &[PolicyKind], runs: &[TrainRun]) -> Result<()> {
    // Peak live versions per stage, maxed over seeds; bytes scale by the
    // per-stage parameter count of the default model (f64 weights).
    let rows: Vec<(PolicyKind, Vec<MemoryReportRow>)> = policies
        .iter()
        .map(|&kind| {
            let of_kind: Vec<&TrainRun> = runs.iter().filter(|r| r.policy == kind).collect();
            let stages = of_kind.first().map_or(0, |r| r.peak_live_versions.len());
            let report = (0..stages)
                .map(|s| {
                    let peak = of_kind
                        .iter()
                        .map(|r| r.peak_live_versions[s])
                        .max()
                        .unwrap_or(1);
                    MemoryReportRow {
                        stage: s,
                        peak_live_versions: peak,
                        peak_bytes: peak as u64 * 8,
                    }
                })
                .collect();
            (kind, report)
        })
        .collect();
    std::fs::write(out.join("memory.csv"), memory_report_csv(&rows))?;
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let cfg = args.cfg.resolve()?;
    let cells: Vec<SimConfig> = if args.sweep {
        let mut v = Vec::new();
        for s in [2usize, 4] {
            for m in [4usize, 8] {
                for micro in [1usize, 2] {
                    v.push(SimConfig {
                        stages: s,
                        mini_batches: m,
                        micro_batches: micro,
                        ..cfg.clone()
                    });
                }
            }
        }
        v
    } else {
        vec![cfg.clone()]
    };

    let mut all_ok = true;
    let mut family = |name: &str, ok: bool| {
        println!("{} {name}", if ok { "PASS" } else { "FAIL" });
        all_ok &= ok;
    };

    // Schedule validity over every policy on every cell.
    let mut schedule_ok = true;
    for c in &cells {
        for kind in PolicyKind::ALL {
            let c = c.with_policy(kind);
            let mut t = build_timeline(&c);
            if args.inject_corrupt {
                if let Some(e) = t.events.iter_mut().find(|e| e.start_tick > 0) {
                    let d = e.end_tick - e.start_tick;
                    e.start_tick = 0;
                    e.end_tick = d;
                }
            }
            schedule_ok &= verify_timeline(&t, &c).is_empty();
        }
    }
    family("schedule-validity", schedule_ok);

    // nF1B with one micro-batch per mini-batch collapses to the 1F1B span.
    let degeneracy_ok = cells.iter().all(|c| {
        let one = SimConfig {
            micro_batches: 1,
            ..c.clone()
        };
        pipesim_core::build_nf1b(&one).epoch_span == pipesim_core::build_1f1b(&one).epoch_span
    });
    family("m1-degeneracy", degeneracy_ok);

    // Throughput: the nF1B policies share one span, at most PipeDream's.
    let span_ok = cells.iter().all(|c| {
        pipesim_core::build_nf1b(c).epoch_span <= pipesim_core::build_1f1b(c).epoch_span
    });
    family("nf1b-span-bound", span_ok);

    // Staleness census and memory ordering need training replays.
    let train = TrainConfig {
        samples: 192,
        ..TrainConfig::default()
    };
    let mut census_ok = true;
    let mut memory_ok = true;
    for c in &cells {
        let mut peaks = Vec::new();
        for kind in [
            PolicyKind::VTiMePReSt,
            PolicyKind::TiMePReSt,
            PolicyKind::ITiMePReSt,
            PolicyKind::PipeDream,
        ] {
            let c = c.with_policy(kind);
            let dataset =
                generate(train.generator, train.samples, train.input_dim, train.classes, c.seed);
            let run = run_policy(&c, &train, &dataset)?;
            let any_stale = run.deltas.iter().any(|d| d.delta > 0);
            match kind {
                PolicyKind::VTiMePReSt => census_ok &= !any_stale,
                PolicyKind::PipeDream | PolicyKind::TiMePReSt if c.mini_batches >= 4 => {
                    census_ok &= any_stale
                }
                _ => {}
            }
            peaks.push(run.peak_live_versions);
        }
        memory_ok &= peaks[0].iter().all(|&p| p == 1);
        for s in 0..c.stages {
            memory_ok &=
                peaks[0][s] <= peaks[1][s] && peaks[1][s] <= peaks[2][s] && peaks[2][s] <= peaks[3][s];
        }
    }
    family("staleness-census", census_ok);
    family("memory-ordering", memory_ok);

    if all_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
