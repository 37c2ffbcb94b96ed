//! Measurement harness: threshold sweeps over replayed traces, collector
//! capacity grids and algorithm comparisons. Output is CSV.
//!
//! A sweep cell replays one trace through a source (plus transits for
//! multi-hop traces) and a sink running the cell's detector. Every report is
//! encoded and fed to a collector instance, and every packet leaving the sink
//! is compared with the carrier that entered the source.

use std::fmt::Write as _;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::{bench_parse, Collector, CollectorOptions, NullSink};
use crate::controlplane::{ConfigCell, FlowConfig, FlowMatch, SwitchConfig, SwitchRole};
use crate::dataplane::{ForwardVerdict, LocalTelemetry, Packet, Switch};
use crate::detection::{AlgorithmConfig, AlgorithmKind, DetectorState, ExpressionRegisters};
use crate::int_wire::{
    InstructionBitmask, IntHeaderStack, MetadataKind, TelemetryReport, DEFAULT_MAX_HOPS,
};
use crate::traffic::{generate_trace, replay, TraceRecord, TrafficError, WorkloadPreset, TRACE_MASK};

/// Carrier payload bytes per replayed packet.
const PAYLOAD_LEN: u16 = 64;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid sweep spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Traffic(#[from] TrafficError),
}

/// One detector column of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SweepAlgorithm {
    pub kind: AlgorithmKind,
    #[serde(default = "full_alpha")]
    pub alpha_num: u16,
}

fn full_alpha() -> u16 {
    256
}

impl SweepAlgorithm {
    pub fn new(kind: AlgorithmKind) -> Self {
        Self { kind, alpha_num: 256 }
    }

    pub fn moving_average(alpha_num: u16) -> Self {
        Self {
            kind: AlgorithmKind::MovingAverage,
            alpha_num,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            AlgorithmKind::MovingAverage => format!("moving_average:{}", self.alpha_num),
            k => k.name(),
        }
    }

    fn config(&self, metadata: MetadataKind, threshold: u32) -> AlgorithmConfig {
        match self.kind {
            AlgorithmKind::Noop => AlgorithmConfig::noop(),
            AlgorithmKind::PerHop => AlgorithmConfig::per_hop(metadata, threshold),
            AlgorithmKind::MovingAverage => {
                AlgorithmConfig::moving_average(metadata, threshold, self.alpha_num)
            }
            _ => AlgorithmConfig::per_flow(metadata, threshold),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// Switch chain, report encoding and collector, with conservation checks.
    #[default]
    Pipeline,
    /// Detector over the trace hops only. Same event counts, much faster.
    DetectorOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub presets: Vec<WorkloadPreset>,
    pub algorithms: Vec<SweepAlgorithm>,
    /// Ascending, in units of `metadata`.
    pub thresholds: Vec<u32>,
    pub metadata: MetadataKind,
    pub packets: usize,
    pub seed: u64,
    /// Replay length in trace time; `None` replays the trace once.
    pub loop_for: Option<Duration>,
    /// Reports/s one collector core handles with no filtering.
    pub base_capacity: f64,
    pub mode: SweepMode,
    /// Worker threads for independent cells.
    pub parallel: usize,
}

impl SweepSpec {
    pub fn new(presets: Vec<WorkloadPreset>, base_capacity: f64) -> Self {
        Self {
            presets,
            algorithms: vec![
                SweepAlgorithm::new(AlgorithmKind::Noop),
                SweepAlgorithm::new(AlgorithmKind::PerHop),
                SweepAlgorithm::new(AlgorithmKind::PerFlow),
            ],
            thresholds: (0..=200).step_by(25).collect(),
            metadata: MetadataKind::QueueOccupancy,
            packets: 200_000,
            seed: 1,
            loop_for: None,
            base_capacity,
            mode: SweepMode::Pipeline,
            parallel: 1,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let err = |m: &str| Err(BenchError::Spec(m.to_string()));
        if !(self.base_capacity > 0.0 && self.base_capacity.is_finite()) {
            return err("base_capacity must be positive");
        }
        if self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return err("thresholds must be strictly ascending");
        }
        if self.thresholds.is_empty() {
            return err("threshold list is empty");
        }
        if self.presets.is_empty() || self.algorithms.is_empty() {
            return err("need at least one preset and one algorithm");
        }
        if self.packets == 0 {
            return err("packets must be >= 1");
        }
        if self.algorithms.iter().any(|a| {
            matches!(a.kind, AlgorithmKind::Complex | AlgorithmKind::Unknown(_)) || a.alpha_num > 256
        }) {
            return err("sweeps support noop, per_hop, per_flow and moving_average (alpha <= 256)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub preset: String,
    pub algorithm: String,
    pub threshold_us: u32,
    pub packets: u64,
    pub events: u64,
    pub pass_ratio: f64,
    /// `None` when no event was raised.
    pub potential_capacity: Option<f64>,
}

impl SweepRow {
    fn new(preset: String, algorithm: String, threshold_us: u32, packets: u64, events: u64, base: f64) -> Self {
        let pass_ratio = if packets == 0 { 0.0 } else { events as f64 / packets as f64 };
        Self {
            preset,
            algorithm,
            threshold_us,
            packets,
            events,
            pass_ratio,
            potential_capacity: (events > 0).then(|| base / pass_ratio),
        }
    }

    pub fn amplification(&self) -> Option<f64> {
        (self.events > 0).then(|| self.packets as f64 / self.events as f64)
    }
}

/// Conservation checks for one pipeline cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAudit {
    pub reports_emitted: u64,
    pub collector_received: u64,
    pub collector_forwarded: u64,
    pub collector_errors: u64,
    pub packets_delivered: u64,
    pub carrier_mismatches: u64,
}

impl CellAudit {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.collector_forwarded != self.reports_emitted {
            v.push(format!(
                "collector forwarded {} of {} emitted reports",
                self.collector_forwarded, self.reports_emitted
            ));
        }
        if self.collector_errors != 0 || self.collector_received != self.reports_emitted {
            v.push(format!("collector saw {} parse errors", self.collector_errors));
        }
        if self.carrier_mismatches != 0 {
            v.push(format!("{} sink packets differ from source input", self.carrier_mismatches));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub base_capacity: f64,
    pub rows: Vec<SweepRow>,
    /// Parallel to `rows`; `None` in detector-only mode.
    pub audits: Vec<Option<CellAudit>>,
}

pub const SWEEP_CSV_HEADER: &str =
    "preset,algorithm,threshold_us,packets,events,pass_ratio,potential_capacity_pps";

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let cap = match r.potential_capacity {
                Some(c) => format!("{c:.3}"),
                None => "no-events".to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.9},{}",
                r.preset, r.algorithm, r.threshold_us, r.packets, r.events, r.pass_ratio, cap
            );
        }
        out
    }

    /// Every invariant the sweep should satisfy, as readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (r, audit) in self.rows.iter().zip(&self.audits) {
            let at = format!("{}/{}/{}", r.preset, r.algorithm, r.threshold_us);
            if !(0.0..=1.0).contains(&r.pass_ratio) {
                v.push(format!("{at}: pass_ratio {} outside [0,1]", r.pass_ratio));
            }
            if let Some(c) = r.potential_capacity {
                if c < self.base_capacity {
                    v.push(format!("{at}: potential capacity below base"));
                }
                let back = c * r.pass_ratio;
                if (back - self.base_capacity).abs() > self.base_capacity * 1e-12 {
                    v.push(format!("{at}: capacity x pass_ratio = {back}, base {}", self.base_capacity));
                }
            }
            if r.algorithm == "noop" && (r.pass_ratio != 1.0 || r.potential_capacity != Some(self.base_capacity)) {
                v.push(format!("{at}: noop must pass everything"));
            }
            if let Some(a) = audit {
                v.extend(a.violations().into_iter().map(|m| format!("{at}: {m}")));
            }
        }
        for w in self.rows.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let threshold_law = a.algorithm == "per_hop" || a.algorithm == "per_flow";
            if threshold_law
                && a.preset == b.preset
                && a.algorithm == b.algorithm
                && a.threshold_us < b.threshold_us
                && b.events > a.events
            {
                v.push(format!(
                    "{}/{}: events rise from {} at {} to {} at {}",
                    a.preset, a.algorithm, a.events, a.threshold_us, b.events, b.threshold_us
                ));
            }
        }
        v
    }

    pub fn row(&self, preset: &str, algorithm: &str, threshold: u32) -> Option<&SweepRow> {
        self.rows
            .iter()
            .find(|r| r.preset == preset && r.algorithm == algorithm && r.threshold_us == threshold)
    }
}

struct Cell {
    preset: usize,
    algorithm: SweepAlgorithm,
    threshold: u32,
}

fn role_config(role: SwitchRole, algorithm: AlgorithmConfig, max_hops: u8) -> SwitchConfig {
    let mut cfg = SwitchConfig::default();
    cfg.flows
        .insert(
            FlowConfig::new(FlowMatch::any(), role)
                .with_mask(TRACE_MASK)
                .with_algorithm(algorithm)
                .with_max_hops(max_hops),
        )
        .expect("single rule");
    cfg.forwarding.set_default(Some(1));
    cfg
}

/// Replays `records` through source, transits and sink; the last record hop
/// (oldest) is observed at the source.
pub fn run_pipeline_cell(
    records: impl Iterator<Item = TraceRecord>,
    hop_count: usize,
    algorithm: AlgorithmConfig,
) -> (u64, CellAudit) {
    let max_hops = hop_count.max(1) as u8;
    let mut chain: Vec<Switch> = (0..hop_count.max(1))
        .map(|pos| {
            let role = if pos == 0 { SwitchRole::Source } else { SwitchRole::Transit };
            Switch::new(
                pos as u32 + 1,
                Arc::new(ConfigCell::new(role_config(role, AlgorithmConfig::noop(), max_hops))),
            )
        })
        .collect();
    let mut sink = Switch::standalone(1000, role_config(SwitchRole::Sink, algorithm, max_hops));
    let mut collector = Collector::new(
        NullSink::default(),
        CollectorOptions {
            stats_interval: None,
            ..CollectorOptions::default()
        },
    );
    let mut audit = CellAudit::default();
    let mut packets = 0u64;
    let mut frame = Vec::with_capacity(64);
    for (seq, rec) in records.enumerate() {
        packets += 1;
        let input = Packet::synthetic(rec.flow_key, PAYLOAD_LEN, seq as u64, rec.ts_ns);
        let expected = input.original_bytes.clone();
        let mut pkt = input;
        let mut delivered = true;
        let n = rec.hops.len();
        for (pos, sw) in chain.iter_mut().enumerate() {
            let local = rec
                .hops
                .get(n.wrapping_sub(1 + pos))
                .map(|h| LocalTelemetry::from_hop(h, pos as u32 + 1, rec.ts_ns));
            let out = sw.process(pkt, local.as_ref(), rec.ts_ns);
            pkt = out.packet;
            if out.egress == ForwardVerdict::Drop {
                delivered = false;
                break;
            }
        }
        if !delivered {
            continue;
        }
        let out = sink.process(pkt, None, rec.ts_ns);
        if let Some(report) = out.report {
            audit.reports_emitted += 1;
            frame.clear();
            report.encode_into(&mut frame).expect("pipeline reports are in range");
            collector.handle_frame(&frame);
        }
        if out.egress != ForwardVerdict::Drop {
            audit.packets_delivered += 1;
            if out.packet.int.is_some() || out.packet.wire_bytes() != expected {
                audit.carrier_mismatches += 1;
            }
        }
    }
    let (stats, _) = collector.finish();
    audit.collector_received = stats.received;
    audit.collector_forwarded = stats.forwarded;
    audit.collector_errors = stats.parse_errors;
    (packets, audit)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayOutcome {
    pub packets: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub reports: u64,
    /// Delivered packets still carrying INT or differing from the input carrier.
    pub carrier_mismatches: u64,
}

/// Replays `records` through an arbitrary switch chain.
///
/// If the first switch is an INT source for a record's flow, the packet enters
/// plain and the trace hops are handed to the chain as local telemetry, oldest
/// hop to the first switch. Otherwise the packet enters already carrying the
/// trace hops, like traffic from an INT-capable generator. A chain longer than
/// the trace gives its remaining switches no trace telemetry, so a sink past
/// the last traced hop appends nothing.
pub fn replay_through(
    chain: &mut [Switch],
    records: impl Iterator<Item = TraceRecord>,
    mut on_report: impl FnMut(TelemetryReport),
) -> ReplayOutcome {
    let mut out = ReplayOutcome::default();
    for (seq, rec) in records.enumerate() {
        out.packets += 1;
        let mut pkt = Packet::synthetic(rec.flow_key, PAYLOAD_LEN, seq as u64, rec.ts_ns);
        let expected = pkt.original_bytes.clone();
        let n = rec.hops.len();
        let stamps = chain.first().is_some_and(|sw| {
            sw.config()
                .snapshot()
                .resolve(&rec.flow_key)
                .is_some_and(|f| f.role == SwitchRole::Source)
        });
        if !stamps && n > 0 {
            let mask = rec.hops[0].present_mask();
            let mut stack = IntHeaderStack::new(mask, (n as u8).max(DEFAULT_MAX_HOPS));
            stack.hops = rec.hops.clone();
            pkt.int = Some(stack);
        }
        let mut delivered = true;
        for (pos, sw) in chain.iter_mut().enumerate() {
            let local = stamps
                .then(|| n.checked_sub(1 + pos).map(|i| &rec.hops[i]))
                .flatten()
                .map(|h| LocalTelemetry::from_hop(h, sw.id(), rec.ts_ns));
            let res = sw.process(pkt, local.as_ref(), rec.ts_ns);
            pkt = res.packet;
            if let Some(r) = res.report {
                out.reports += 1;
                on_report(r);
            }
            if res.egress == ForwardVerdict::Drop {
                delivered = false;
                break;
            }
        }
        if delivered {
            out.delivered += 1;
            if pkt.int.is_some() || pkt.wire_bytes() != expected {
                out.carrier_mismatches += 1;
            }
        } else {
            out.dropped += 1;
        }
    }
    out
}

/// Events the sink detector raises over `records`, without the switch chain.
pub fn count_events(records: impl Iterator<Item = TraceRecord>, algorithm: AlgorithmConfig) -> (u64, u64) {
    let mut state = DetectorState::default();
    let regs = ExpressionRegisters::default();
    let (mut packets, mut events) = (0u64, 0u64);
    for r in records {
        packets += 1;
        events += u64::from(state.evaluate(&r.flow_key, &r.hops, &algorithm, &regs).event);
    }
    (packets, events)
}

/// Event flags per record, in order.
pub fn event_sequence(records: &[TraceRecord], algorithm: AlgorithmConfig) -> Vec<bool> {
    let mut state = DetectorState::default();
    let regs = ExpressionRegisters::default();
    records
        .iter()
        .map(|r| state.evaluate(&r.flow_key, &r.hops, &algorithm, &regs).event)
        .collect()
}

fn run_cell(spec: &SweepSpec, trace: &[TraceRecord], hops: usize, cell: &Cell) -> (u64, u64, Option<CellAudit>) {
    let alg = cell.algorithm.config(spec.metadata, cell.threshold);
    let records: Box<dyn Iterator<Item = TraceRecord> + '_> = match spec.loop_for {
        Some(d) => Box::new(replay(trace, d)),
        None => Box::new(trace.iter().cloned()),
    };
    match spec.mode {
        SweepMode::DetectorOnly => {
            let (p, e) = count_events(records, alg);
            (p, e, None)
        }
        SweepMode::Pipeline => {
            let (p, audit) = run_pipeline_cell(records, hops, alg);
            (p, audit.reports_emitted, Some(audit))
        }
    }
}

pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult, BenchError> {
    spec.validate()?;
    let traces: Vec<Vec<TraceRecord>> = spec
        .presets
        .iter()
        .map(|p| generate_trace(p, spec.packets, spec.seed))
        .collect::<Result<_, _>>()?;
    let mut cells = Vec::new();
    for (pi, _) in spec.presets.iter().enumerate() {
        for alg in &spec.algorithms {
            if alg.kind == AlgorithmKind::Noop {
                cells.push(Cell {
                    preset: pi,
                    algorithm: *alg,
                    threshold: 0,
                });
                continue;
            }
            for &t in &spec.thresholds {
                cells.push(Cell {
                    preset: pi,
                    algorithm: *alg,
                    threshold: t,
                });
            }
        }
    }
    let workers = spec.parallel.clamp(1, cells.len().max(1));
    let mut results: Vec<Option<(u64, u64, Option<CellAudit>)>> = vec![None; cells.len()];
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let cells = &cells;
                let traces = &traces;
                s.spawn(move || {
                    cells
                        .iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, c)| {
                            let hops = usize::from(spec.presets[c.preset].params.hops);
                            (i, run_cell(spec, &traces[c.preset], hops, c))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("sweep worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let mut rows = Vec::with_capacity(cells.len());
    let mut audits = Vec::with_capacity(cells.len());
    for (c, r) in cells.iter().zip(results) {
        let (packets, events, audit) = r.expect("every cell ran");
        rows.push(SweepRow::new(
            spec.presets[c.preset].name.to_string(),
            c.algorithm.label(),
            c.threshold,
            packets,
            events,
            spec.base_capacity,
        ));
        audits.push(audit);
    }
    Ok(SweepResult {
        base_capacity: spec.base_capacity,
        rows,
        audits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySpec {
    pub items: Vec<usize>,
    pub hops: Vec<usize>,
    /// Total measuring time per cell, split across trials.
    pub cell_duration: Duration,
    /// Trials per cell, interleaved across cells to spread out machine noise.
    pub trials: usize,
}

impl Default for CapacitySpec {
    fn default() -> Self {
        Self {
            items: vec![1, 4, 8],
            hops: vec![1, 2, 4],
            cell_duration: Duration::from_secs(5),
            trials: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub items: usize,
    pub hops: usize,
    /// Median over trials.
    pub reports_per_s: f64,
    pub samples: Vec<f64>,
}

pub const CAPACITY_CSV_HEADER: &str = "items,hops,reports_per_s";

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Collector throughput for each (items, hops) shape.
pub fn run_capacity_bench(spec: &CapacitySpec) -> Vec<CapacityRow> {
    let shapes: Vec<(usize, usize)> = spec
        .items
        .iter()
        .flat_map(|&i| spec.hops.iter().map(move |&h| (i, h)))
        .collect();
    let trials = spec.trials.max(1);
    let per_trial = spec.cell_duration / trials as u32;
    let mut samples = vec![Vec::with_capacity(trials); shapes.len()];
    for _ in 0..trials {
        for (k, &(items, hops)) in shapes.iter().enumerate() {
            let b = bench_parse(InstructionBitmask::first_n(items), hops, per_trial);
            samples[k].push(b.reports_per_s);
        }
    }
    shapes
        .into_iter()
        .zip(samples)
        .map(|((items, hops), s)| {
            let mut sorted = s.clone();
            CapacityRow {
                items,
                hops,
                reports_per_s: median(&mut sorted),
                samples: s,
            }
        })
        .collect()
}

pub fn capacity_csv(rows: &[CapacityRow]) -> String {
    let mut out = String::from(CAPACITY_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{:.0}", r.items, r.hops, r.reports_per_s);
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return if va == vb { 1.0 } else { 0.0 };
    }
    cov / (va * vb).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub threshold_us: u32,
    pub per_flow_events: u64,
    pub moving_average_events: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub preset: String,
    pub alpha_num: u16,
    pub packets: u64,
    pub rows: Vec<CompareRow>,
}

impl CompareReport {
    /// Share of thresholds where the moving average raised no more events.
    pub fn fraction_ma_not_worse(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let n = self
            .rows
            .iter()
            .filter(|r| r.moving_average_events <= r.per_flow_events)
            .count();
        n as f64 / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("preset,alpha_num,threshold_us,packets,per_flow_events,moving_average_events\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.preset, self.alpha_num, r.threshold_us, self.packets, r.per_flow_events, r.moving_average_events
            );
        }
        out
    }
}

/// Per-flow against moving average on the same trace.
pub fn compare_algorithms(
    preset: &WorkloadPreset,
    thresholds: &[u32],
    alpha_num: u16,
    packets: usize,
    seed: u64,
) -> Result<CompareReport, BenchError> {
    let mut spec = SweepSpec::new(vec![preset.clone()], 1.0);
    spec.algorithms = vec![
        SweepAlgorithm::new(AlgorithmKind::PerFlow),
        SweepAlgorithm::moving_average(alpha_num),
    ];
    spec.thresholds = thresholds.to_vec();
    spec.packets = packets;
    spec.seed = seed;
    spec.mode = SweepMode::DetectorOnly;
    let res = run_sweep(&spec)?;
    let n = thresholds.len();
    let rows = thresholds
        .iter()
        .enumerate()
        .map(|(i, &t)| CompareRow {
            threshold_us: t,
            per_flow_events: res.rows[i].events,
            moving_average_events: res.rows[n + i].events,
        })
        .collect();
    Ok(CompareReport {
        preset: preset.name.to_string(),
        alpha_num,
        packets: packets as u64,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::PresetName;

    fn small_spec(mode: SweepMode) -> SweepSpec {
        let mut s = SweepSpec::new(vec![WorkloadPreset::builtin(PresetName::Web)], 1000.0);
        s.packets = 5_000;
        s.thresholds = vec![50, 100, 150];
        s.mode = mode;
        s
    }

    #[test]
    fn noop_row_is_baseline() {
        let res = run_sweep(&small_spec(SweepMode::Pipeline)).unwrap();
        let noop = res.row("web", "noop", 0).unwrap();
        assert_eq!(noop.pass_ratio, 1.0);
        assert_eq!(noop.potential_capacity, Some(1000.0));
        assert!(res.violations().is_empty(), "{:?}", res.violations());
    }

    #[test]
    fn modes_agree_on_counts() {
        let a = run_sweep(&small_spec(SweepMode::Pipeline)).unwrap();
        let b = run_sweep(&small_spec(SweepMode::DetectorOnly)).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn parallel_matches_sequential() {
        let a = run_sweep(&small_spec(SweepMode::Pipeline)).unwrap();
        let mut spec = small_spec(SweepMode::Pipeline);
        spec.parallel = 3;
        let b = run_sweep(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_events_flagged() {
        let mut spec = small_spec(SweepMode::DetectorOnly);
        spec.thresholds = vec![100_000];
        spec.algorithms = vec![SweepAlgorithm::new(AlgorithmKind::PerFlow)];
        let res = run_sweep(&spec).unwrap();
        assert_eq!(res.rows[0].events, 0);
        assert!(res.to_csv().lines().nth(1).unwrap().ends_with(",no-events"));
    }

    #[test]
    fn spec_validation() {
        let mut s = small_spec(SweepMode::DetectorOnly);
        s.thresholds = vec![100, 50];
        assert!(run_sweep(&s).is_err());
        let mut s = small_spec(SweepMode::DetectorOnly);
        s.base_capacity = 0.0;
        assert!(run_sweep(&s).is_err());
    }

    #[test]
    fn multi_hop_pipeline_conserves() {
        let mut p = WorkloadPreset::builtin(PresetName::Hadoop);
        p.params.hops = 3;
        let mut s = SweepSpec::new(vec![p], 1.0);
        s.packets = 2_000;
        s.thresholds = vec![25, 100];
        let res = run_sweep(&s).unwrap();
        assert!(res.violations().is_empty(), "{:?}", res.violations());
        let d = run_sweep(&SweepSpec {
            mode: SweepMode::DetectorOnly,
            ..s
        })
        .unwrap();
        assert_eq!(res.rows, d.rows);
    }

    #[test]
    fn looping_noop_is_linear() {
        let trace = generate_trace(&WorkloadPreset::builtin(PresetName::Cache), 1000, 4).unwrap();
        let one = count_events(trace.iter().cloned(), AlgorithmConfig::noop()).1;
        let three = count_events(crate::traffic::replay_cycles(&trace, 3), AlgorithmConfig::noop()).1;
        assert_eq!(three, 3 * one);
    }

    #[test]
    fn compare_full_alpha_degenerates() {
        let r = compare_algorithms(&WorkloadPreset::builtin(PresetName::Web), &[25, 50, 100], 256, 5000, 2).unwrap();
        for row in &r.rows {
            assert_eq!(row.per_flow_events, row.moving_average_events);
        }
        assert_eq!(r.fraction_ma_not_worse(), 1.0);
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert!((spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn capacity_grid_shape() {
        let rows = run_capacity_bench(&CapacitySpec {
            items: vec![1, 8],
            hops: vec![1, 2],
            cell_duration: Duration::from_millis(20),
            trials: 2,
        });
        assert_eq!(rows.len(), 4);
        assert_eq!(capacity_csv(&rows).lines().count(), 5);
        assert!(rows.iter().all(|r| r.reports_per_s > 0.0 && r.samples.len() == 2));
    }

    #[test]
    fn single_sink_receives_stamped_traffic() {
        let trace = generate_trace(&WorkloadPreset::builtin(PresetName::Web), 3000, 5).unwrap();
        let alg = AlgorithmConfig::per_flow(MetadataKind::QueueOccupancy, 100);
        let mut chain = vec![Switch::standalone(1, role_config(SwitchRole::Sink, alg, 8))];
        let mut reports = Vec::new();
        let out = replay_through(&mut chain, trace.iter().cloned(), |r| reports.push(r));
        assert_eq!(out.reports, count_events(trace.iter().cloned(), alg).1);
        assert_eq!(out.carrier_mismatches, 0);
        assert_eq!(out.delivered, 3000);
        assert!(reports.iter().all(|r| r.hops.len() == 1));
    }

    #[test]
    fn source_chain_matches_cell_runner() {
        let trace = generate_trace(&WorkloadPreset::builtin(PresetName::Web), 3000, 5).unwrap();
        let alg = AlgorithmConfig::per_hop(MetadataKind::QueueOccupancy, 50);
        let mut chain = vec![
            Switch::standalone(1, role_config(SwitchRole::Source, AlgorithmConfig::noop(), 1)),
            Switch::standalone(2, role_config(SwitchRole::Sink, alg, 1)),
        ];
        let out = replay_through(&mut chain, trace.iter().cloned(), |_| {});
        let (_, audit) = run_pipeline_cell(trace.iter().cloned(), 1, alg);
        assert_eq!(out.reports, audit.reports_emitted);
        assert_eq!(out.carrier_mismatches, 0);
    }
}
