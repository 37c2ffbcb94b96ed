//! `int-forge`: trace generation, pipeline replay, sweeps and collector
//! benchmarks. Exits 1 on usage or I/O errors and 2 when an invariant check
//! fails.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use int_forge::bench::{
    capacity_csv, compare_algorithms, count_events, replay_through, run_capacity_bench, run_sweep,
    spearman, CapacitySpec, SweepAlgorithm, SweepMode, SweepSpec,
};
use int_forge::collector::{
    bench_parse, collect_with, udp_ingest, BackpressurePolicy, ChannelSource, CollectorOptions,
    CollectorStats, FileSink, FrameSource, MemorySink, StreamSink,
};
use int_forge::controlplane::{load_config, ConfigDocument, FlowConfig, FlowMatch, SwitchConfig, SwitchRole};
use int_forge::dataplane::Switch;
use int_forge::detection::{AlgorithmConfig, AlgorithmKind};
use int_forge::int_wire::MetadataKind;
use int_forge::traffic::{
    generate_trace, read_trace, replay, write_trace, PresetName, TraceRecord, WorkloadPreset, TRACE_MASK,
};

#[derive(Parser)]
#[command(name = "int-forge", version, about = "INT event pre-filtering pipeline and benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic microburst trace (JSON lines).
    Gen(GenArgs),
    /// Replay a trace through the switches of a config file.
    Run(RunArgs),
    /// Threshold sweep, CSV output.
    Sweep(SweepArgs),
    /// Collector parse capacity over an items x hops grid, CSV output.
    BenchCollector(BenchArgs),
    /// Per-flow against moving-average event counts on one trace.
    Compare(CompareArgs),
    /// Run a collector instance.
    Collect(CollectArgs),
    /// Summarise presets: occupancy ceiling, amplification, monotonicity.
    Calibrate(CalibrateArgs),
}

#[derive(Args)]
struct Common {
    /// Config document; its `workloads` section overrides preset parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "web")]
    preset: PresetName,
    #[arg(long, default_value_t = 200_000)]
    packets: usize,
    /// Hops per record; overrides the preset.
    #[arg(long)]
    hops: Option<u8>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TraceSource {
    /// Trace file; without it a preset trace is generated.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value = "web")]
    preset: PresetName,
    #[arg(long, default_value_t = 200_000)]
    packets: usize,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: TraceSource,
    /// Replay length in trace time, e.g. 10s; default one pass.
    #[arg(long, value_parser = humantime::parse_duration)]
    duration: Option<Duration>,
    /// Collected events, JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "web,cache,hadoop")]
    presets: Vec<PresetName>,
    #[arg(long, value_delimiter = ',', default_value = "noop,per_hop,per_flow")]
    algorithms: Vec<AlgorithmKind>,
    /// Moving-average weight over 256.
    #[arg(long, default_value_t = 256)]
    alpha: u16,
    #[arg(long, value_delimiter = ',', default_value = "0,25,50,75,100,125,150,175,200")]
    thresholds: Vec<u32>,
    #[arg(long, default_value = "queue_occupancy")]
    metadata: MetadataKind,
    #[arg(long, default_value_t = 200_000)]
    packets: usize,
    /// Replay length in trace time per cell; `0s` replays each trace once.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "10s")]
    duration: Duration,
    /// Reports/s of one unfiltered collector; measured locally when absent.
    #[arg(long)]
    base_capacity: Option<f64>,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Skip the switch chain and collector; counts only.
    #[arg(long)]
    detector_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    items: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    hops: Vec<usize>,
    /// Measuring time per cell.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "5s")]
    duration: Duration,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    /// Run the grid twice and report the rank correlation between runs.
    #[arg(long)]
    repeat: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "web")]
    preset: PresetName,
    #[arg(long, value_delimiter = ',', default_value = "0,25,50,75,100,125,150,175,200")]
    thresholds: Vec<u32>,
    #[arg(long, default_value_t = 32)]
    alpha: u16,
    #[arg(long, default_value_t = 200_000)]
    packets: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    common: Common,
    /// `channel` (reports from an in-process pipeline replay) or `udp:<port>`.
    #[arg(long = "in", default_value = "channel")]
    input: String,
    /// `mem` or `file:<path>`.
    #[arg(long, default_value = "mem")]
    sink: String,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "1s")]
    stats_interval: Duration,
    #[arg(long, default_value = "block")]
    backpressure: String,
    #[arg(long, default_value_t = 0)]
    collector_id: u32,
    /// UDP: stop after this many datagrams.
    #[arg(long)]
    max_frames: Option<u64>,
    /// UDP: stop after this long without a datagram.
    #[arg(long, value_parser = humantime::parse_duration)]
    idle_timeout: Option<Duration>,
    #[command(flatten)]
    source: TraceSource,
    /// Channel input: per-flow queue occupancy threshold of the sink.
    #[arg(long, default_value_t = 100)]
    threshold: u32,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_value = "web,cache,hadoop")]
    presets: Vec<PresetName>,
    #[arg(long, default_value_t = 200_000)]
    packets: usize,
    /// Seeds `seed..seed+seeds` are used for the occupancy ceiling.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

enum Failure {
    Usage(String),
    Invariant(Vec<String>),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Usage(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::BenchCollector(a) => cmd_bench(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Collect(a) => cmd_collect(a),
        Command::Calibrate(a) => cmd_calibrate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(v)) => {
            for m in &v {
                eprintln!("invariant violated: {m}");
            }
            ExitCode::from(2)
        }
    }
}

fn load_doc(common: &Common) -> Result<Option<ConfigDocument>, Failure> {
    common.config.as_ref().map(load_config).transpose().map_err(Failure::from)
}

fn preset(name: PresetName, doc: Option<&ConfigDocument>) -> WorkloadPreset {
    let mut p = WorkloadPreset::builtin(name);
    if let Some(params) = doc.and_then(|d| d.workload(name.as_str())) {
        p.params = params.clone();
    }
    p
}

fn emit(out: Option<&Path>, text: &str) -> io::Result<()> {
    match out {
        Some(p) => fs::write(p, text),
        None => io::stdout().write_all(text.as_bytes()),
    }
}

fn load_trace(src: &TraceSource, doc: Option<&ConfigDocument>, seed: u64) -> Result<Vec<TraceRecord>, Failure> {
    match &src.trace {
        Some(path) => Ok(read_trace(path)?),
        None => Ok(generate_trace(&preset(src.preset, doc), src.packets, seed)?),
    }
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let doc = load_doc(&a.common)?;
    let mut p = preset(a.preset, doc.as_ref());
    if let Some(h) = a.hops {
        p.params.hops = h;
    }
    let trace = generate_trace(&p, a.packets.max(1), a.common.seed)?;
    write_trace(&trace, &a.out)?;
    let max_q = trace.iter().filter_map(|r| r.queue_occupancy()).max().unwrap_or(0);
    eprintln!(
        "wrote {} records spanning {:.3} ms to {} (max queue occupancy {max_q} us)",
        trace.len(),
        trace.last().map_or(0, |r| r.ts_ns) as f64 / 1e6,
        a.out.display()
    );
    Ok(())
}

/// Switches of a config document, ordered by id, as a linear path.
fn chain_from(doc: &ConfigDocument) -> Result<Vec<Switch>, Failure> {
    let built = doc.build()?;
    if built.is_empty() {
        return Err(Failure::Usage("config declares no switches".into()));
    }
    Ok(built
        .into_iter()
        .map(|(id, cfg)| Switch::standalone(id, cfg))
        .collect())
}

fn cmd_run(a: RunArgs) -> CmdResult {
    let Some(doc) = load_doc(&a.common)? else {
        return Err(Failure::Usage("run needs --config".into()));
    };
    let mut chain = chain_from(&doc)?;
    let trace = load_trace(&a.source, Some(&doc), a.common.seed)?;
    let records: Box<dyn Iterator<Item = TraceRecord>> = match a.duration {
        Some(d) => Box::new(replay(&trace, d)),
        None => Box::new(trace.clone().into_iter()),
    };
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    let sink: Box<dyn StreamSink + Send> = match &a.out {
        Some(p) => Box::new(FileSink::append(p)?),
        None => Box::new(MemorySink::default()),
    };
    let opts = CollectorOptions {
        stats_interval: None,
        ..CollectorOptions::default()
    };
    let collector = thread::spawn(move || collect_with(&mut ChannelSource::new(rx), sink, opts, |_| {}).0);
    let mut encode_errors = 0u64;
    let outcome = replay_through(&mut chain, records, |r| match r.encode() {
        Ok(frame) => {
            let _ = tx.send(frame);
        }
        Err(_) => encode_errors += 1,
    });
    drop(tx);
    let stats = collector.join().map_err(|_| Failure::Usage("collector thread panicked".into()))?;
    let switches: Vec<_> = chain
        .iter()
        .map(|s| serde_json::json!({ "id": s.id(), "counters": s.counters() }))
        .collect();
    let summary = serde_json::json!({
        "packets": outcome.packets,
        "delivered": outcome.delivered,
        "dropped": outcome.dropped,
        "reports": outcome.reports,
        "collector": {
            "received": stats.received,
            "forwarded": stats.forwarded,
            "parse_errors": stats.parse_errors,
            "dropped": stats.dropped,
            "sink_failures": stats.sink_failures,
            "elapsed_s": stats.elapsed.as_secs_f64(),
        },
        "switches": switches,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    let mut v = Vec::new();
    if stats.forwarded != outcome.reports - encode_errors || encode_errors > 0 {
        v.push(format!(
            "collector forwarded {} of {} reports ({} unencodable)",
            stats.forwarded, outcome.reports, encode_errors
        ));
    }
    if outcome.carrier_mismatches > 0 {
        v.push(format!("{} delivered packets differ from their input", outcome.carrier_mismatches));
    }
    if !stats.conserved() {
        v.push("collector counters do not add up".into());
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(v))
    }
}

fn measured_base_capacity() -> f64 {
    let b = bench_parse(TRACE_MASK, 1, Duration::from_secs(2));
    eprintln!(
        "base capacity measured locally: {:.0} reports/s ({} items, 1 hop); pass --base-capacity for reproducible output",
        b.reports_per_s,
        TRACE_MASK.item_count()
    );
    b.reports_per_s
}

fn cmd_sweep(a: SweepArgs) -> CmdResult {
    let doc = load_doc(&a.common)?;
    let presets = a.presets.iter().map(|&n| preset(n, doc.as_ref())).collect();
    let base = match a.base_capacity {
        Some(b) => b,
        None => measured_base_capacity(),
    };
    let mut spec = SweepSpec::new(presets, base);
    spec.algorithms = a
        .algorithms
        .iter()
        .map(|&k| match k {
            AlgorithmKind::MovingAverage => SweepAlgorithm::moving_average(a.alpha),
            k => SweepAlgorithm::new(k),
        })
        .collect();
    spec.thresholds = a.thresholds;
    spec.metadata = a.metadata;
    spec.packets = a.packets;
    spec.seed = a.common.seed;
    spec.loop_for = (!a.duration.is_zero()).then_some(a.duration);
    spec.parallel = a.parallel;
    spec.mode = if a.detector_only {
        SweepMode::DetectorOnly
    } else {
        SweepMode::Pipeline
    };
    let res = run_sweep(&spec)?;
    emit(a.out.as_deref(), &res.to_csv())?;
    let v = res.violations();
    if v.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(v))
    }
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let spec = CapacitySpec {
        items: a.items,
        hops: a.hops,
        cell_duration: a.duration,
        trials: a.trials,
    };
    if spec.items.iter().any(|&i| !(1..=8).contains(&i)) {
        return Err(Failure::Usage("items must be within 1..=8".into()));
    }
    let rows = run_capacity_bench(&spec);
    emit(a.out.as_deref(), &capacity_csv(&rows))?;
    if a.repeat {
        let again = run_capacity_bench(&spec);
        let x: Vec<f64> = rows.iter().map(|r| r.reports_per_s).collect();
        let y: Vec<f64> = again.iter().map(|r| r.reports_per_s).collect();
        eprintln!("spearman rank correlation between runs: {:.3}", spearman(&x, &y));
    }
    let cell = |i: usize, h: usize| rows.iter().find(|r| r.items == i && r.hops == h);
    let lo = (rows.iter().map(|r| r.items).min(), rows.iter().map(|r| r.hops).min());
    let hi = (rows.iter().map(|r| r.items).max(), rows.iter().map(|r| r.hops).max());
    if let ((Some(li), Some(lh)), (Some(hi_i), Some(hi_h))) = (lo, hi) {
        if let (Some(small), Some(large)) = (cell(li, lh), cell(hi_i, hi_h)) {
            if small.reports_per_s < large.reports_per_s {
                return Err(Failure::Invariant(vec![format!(
                    "({li} items, {lh} hops) slower than ({hi_i} items, {hi_h} hops)"
                )]));
            }
        }
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> CmdResult {
    let doc = load_doc(&a.common)?;
    let mut th = a.thresholds.clone();
    th.sort_unstable();
    th.dedup();
    let report = compare_algorithms(&preset(a.preset, doc.as_ref()), &th, a.alpha, a.packets, a.common.seed)?;
    emit(a.out.as_deref(), &report.to_csv())?;
    eprintln!(
        "moving average (alpha {}/256) raised no more events than per-flow at {:.0}% of thresholds",
        a.alpha,
        report.fraction_ma_not_worse() * 100.0
    );
    Ok(())
}

fn cmd_collect(a: CollectArgs) -> CmdResult {
    let policy = match a.backpressure.as_str() {
        "block" => BackpressurePolicy::Block,
        "drop" => BackpressurePolicy::Drop,
        other => return Err(Failure::Usage(format!("unknown backpressure policy `{other}`"))),
    };
    let opts = CollectorOptions {
        collector_id: a.collector_id,
        policy,
        stats_interval: Some(a.stats_interval),
        ..CollectorOptions::default()
    };
    let sink: Box<dyn StreamSink> = match a.sink.as_str() {
        "mem" => Box::new(MemorySink::default()),
        s => match s.strip_prefix("file:") {
            Some(path) => Box::new(FileSink::append(path)?),
            None => return Err(Failure::Usage(format!("unknown sink `{s}` (mem or file:<path>)"))),
        },
    };
    let mut producer = None;
    let mut input: Box<dyn FrameSource> = if a.input == "channel" {
        let doc = load_doc(&a.common)?;
        let trace = load_trace(&a.source, doc.as_ref(), a.common.seed)?;
        let threshold = a.threshold;
        let (tx, rx) = mpsc::sync_channel::<Vec<u8>>(4096);
        producer = Some(thread::spawn(move || {
            let mut cfg = SwitchConfig::default();
            cfg.flows
                .insert(
                    FlowConfig::new(FlowMatch::any(), SwitchRole::Sink)
                        .with_mask(TRACE_MASK)
                        .with_algorithm(AlgorithmConfig::per_flow(MetadataKind::QueueOccupancy, threshold)),
                )
                .expect("single rule");
            cfg.forwarding.set_default(Some(1));
            let mut chain = vec![Switch::standalone(1, cfg)];
            replay_through(&mut chain, trace.into_iter(), |r| {
                let _ = tx.send(r.encode().expect("pipeline reports are in range"));
            })
        }));
        Box::new(ChannelSource::new(rx))
    } else if let Some(port) = a.input.strip_prefix("udp:") {
        let port: u16 = port.parse().map_err(|_| Failure::Usage(format!("bad port `{port}`")))?;
        Box::new(udp_ingest(port)?.max_frames(a.max_frames).idle_limit(a.idle_timeout))
    } else {
        return Err(Failure::Usage(format!("unknown input `{}` (channel or udp:<port>)", a.input)));
    };
    println!("ts, pps, errors, forwarded");
    let (stats, _sink): (CollectorStats, _) = collect_with(input.as_mut(), sink, opts, |s| {
        println!("{}", s.line());
    });
    eprintln!(
        "received {} forwarded {} parse_errors {} dropped {} in {:.3}s",
        stats.received,
        stats.forwarded,
        stats.parse_errors,
        stats.dropped,
        stats.elapsed.as_secs_f64()
    );
    let mut v = Vec::new();
    if let Some(p) = producer {
        let outcome = p.join().map_err(|_| Failure::Usage("producer panicked".into()))?;
        if policy == BackpressurePolicy::Block && outcome.reports != stats.forwarded {
            v.push(format!("forwarded {} of {} reports", stats.forwarded, outcome.reports));
        }
    }
    if !stats.conserved() {
        v.push("collector counters do not add up".into());
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(v))
    }
}

fn cmd_calibrate(a: CalibrateArgs) -> CmdResult {
    let doc = load_doc(&a.common)?;
    println!("preset,max_occupancy_us,mean_burst_us,amp_50,amp_100,amp_150,monotone");
    let mut web_cache = (None, None);
    for &name in &a.presets {
        let p = preset(name, doc.as_ref());
        let mut max_q = 0;
        for s in a.common.seed..a.common.seed + a.seeds.max(1) {
            let t = generate_trace(&p, a.packets, s)?;
            max_q = max_q.max(t.iter().filter_map(|r| r.queue_occupancy()).max().unwrap_or(0));
        }
        let trace = generate_trace(&p, a.packets, a.common.seed)?;
        let amp = |t: u32| {
            let (n, e) = count_events(
                trace.iter().cloned(),
                AlgorithmConfig::per_flow(MetadataKind::QueueOccupancy, t),
            );
            if e == 0 {
                f64::INFINITY
            } else {
                n as f64 / e as f64
            }
        };
        let mut monotone = true;
        for kind in [AlgorithmKind::PerHop, AlgorithmKind::PerFlow] {
            let mut prev = u64::MAX;
            for t in (0..=200).step_by(25) {
                let alg = match kind {
                    AlgorithmKind::PerHop => AlgorithmConfig::per_hop(MetadataKind::QueueOccupancy, t),
                    _ => AlgorithmConfig::per_flow(MetadataKind::QueueOccupancy, t),
                };
                let e = count_events(trace.iter().cloned(), alg).1;
                monotone &= e <= prev;
                prev = e;
            }
        }
        let a100 = amp(100);
        match name {
            PresetName::Web => web_cache.0 = Some(a100),
            PresetName::Cache => web_cache.1 = Some(a100),
            PresetName::Hadoop => {}
        }
        println!(
            "{name},{max_q},{:.1},{:.2},{a100:.2},{:.2},{monotone}",
            p.params.burst_duration.mean_us(),
            amp(50),
            amp(150)
        );
    }
    if let (Some(w), Some(c)) = web_cache {
        eprintln!("web/cache amplification at 100 us: {w:.2} / {c:.2}");
    }
    Ok(())
}
