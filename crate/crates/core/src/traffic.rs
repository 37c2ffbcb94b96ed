//! Synthetic microburst traffic.
//!
//! A two-state (burst / idle) Markov process drives one queue per hop. Dwell
//! times in each state are drawn from the configured distributions. Packets
//! arrive as a Poisson process whose rate depends on the state of the first
//! hop's process. Queue occupancy, expressed as drain time in microseconds,
//! follows a clamped fluid model:
//!
//! ```text
//! burst: q <- min(cap, q + build_rate * dt)
//! idle:  q <- max(0,   q - drain_rate * dt)
//! ```
//!
//! Every preset here is synthetic. The parameters were tuned with
//! `int-forge calibrate`; none of them are measured values.

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::int_wire::{FlowKey, HopMetadata, InstructionBitmask, MetadataKind};

#[derive(Debug, Error)]
pub enum TrafficError {
    #[error("invalid model parameters: {0}")]
    Params(String),
    #[error("unknown preset `{0}` (expected web, cache or hadoop)")]
    UnknownPreset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

/// Dwell time distribution, parameters in microseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DwellDistribution {
    Exponential { mean_us: f64 },
    LogNormal { median_us: f64, sigma: f64 },
    /// Uniform choice among the listed durations.
    Empirical { values_us: Vec<f64> },
}

impl DwellDistribution {
    pub fn mean_us(&self) -> f64 {
        match self {
            DwellDistribution::Exponential { mean_us } => *mean_us,
            DwellDistribution::LogNormal { median_us, sigma } => {
                median_us * (sigma * sigma / 2.0).exp()
            }
            DwellDistribution::Empirical { values_us } => {
                values_us.iter().sum::<f64>() / values_us.len().max(1) as f64
            }
        }
    }

    fn validate(&self, what: &str) -> Result<(), String> {
        let ok = match self {
            DwellDistribution::Exponential { mean_us } => *mean_us > 0.0 && mean_us.is_finite(),
            DwellDistribution::LogNormal { median_us, sigma } => {
                *median_us > 0.0 && median_us.is_finite() && *sigma >= 0.0 && sigma.is_finite()
            }
            DwellDistribution::Empirical { values_us } => {
                !values_us.is_empty() && values_us.iter().all(|v| *v > 0.0 && v.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{what}: dwell times must be positive and finite"))
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            DwellDistribution::Exponential { mean_us } => {
                let e: f64 = Exp1.sample(rng);
                e * mean_us
            }
            DwellDistribution::LogNormal { median_us, sigma } => LogNormal::new(median_us.ln(), *sigma)
                .expect("validated")
                .sample(rng),
            DwellDistribution::Empirical { values_us } => values_us[rng.gen_range(0..values_us.len())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurstModelParams {
    pub burst_duration: DwellDistribution,
    pub inter_burst: DwellDistribution,
    /// Packets per second while bursting.
    pub packet_rate_burst: f64,
    /// Packets per second while idle.
    pub packet_rate_idle: f64,
    /// Occupancy growth, µs per µs, while bursting.
    pub queue_build_rate: f64,
    /// Occupancy drain, µs per µs, while idle.
    pub queue_drain_rate: f64,
    pub queue_cap_us: f64,
    pub base_latency_ns: u32,
    #[serde(default = "one")]
    pub hops: u8,
    #[serde(default = "one_u32")]
    pub first_switch_id: u32,
}

fn one() -> u8 {
    1
}

fn one_u32() -> u32 {
    1
}

impl BurstModelParams {
    pub fn validate(&self) -> Result<(), TrafficError> {
        let err = |m: String| TrafficError::Params(m);
        self.burst_duration.validate("burst_duration").map_err(err)?;
        self.inter_burst.validate("inter_burst").map_err(err)?;
        let rates = [
            ("packet_rate_burst", self.packet_rate_burst),
            ("packet_rate_idle", self.packet_rate_idle),
            ("queue_build_rate", self.queue_build_rate),
            ("queue_drain_rate", self.queue_drain_rate),
            ("queue_cap_us", self.queue_cap_us),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(err(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.packet_rate_burst == 0.0 && self.packet_rate_idle == 0.0 {
            return Err(err("at least one packet rate must be positive".into()));
        }
        if self.hops == 0 {
            return Err(err("hops must be >= 1".into()));
        }
        Ok(())
    }

    /// Items every generated hop carries.
    pub fn mask(&self) -> InstructionBitmask {
        TRACE_MASK
    }
}

/// switch_id | hop_latency | queue_occupancy
pub const TRACE_MASK: InstructionBitmask = InstructionBitmask(0xB0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Web,
    Cache,
    Hadoop,
}

impl PresetName {
    pub const ALL: [PresetName; 3] = [PresetName::Web, PresetName::Cache, PresetName::Hadoop];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Web => "web",
            PresetName::Cache => "cache",
            PresetName::Hadoop => "hadoop",
        }
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PresetName {
    type Err = TrafficError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "web" => Ok(PresetName::Web),
            "cache" => Ok(PresetName::Cache),
            "hadoop" => Ok(PresetName::Hadoop),
            _ => Err(TrafficError::UnknownPreset(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadPreset {
    pub name: PresetName,
    pub params: BurstModelParams,
}

impl WorkloadPreset {
    /// Shipped synthetic defaults.
    pub fn builtin(name: PresetName) -> Self {
        let params = match name {
            // Short, infrequent bursts into a shallow buffer.
            PresetName::Web => BurstModelParams {
                burst_duration: DwellDistribution::LogNormal {
                    median_us: 30.0,
                    sigma: 0.5,
                },
                inter_burst: DwellDistribution::LogNormal {
                    median_us: 120.0,
                    sigma: 0.6,
                },
                packet_rate_burst: 250_000.0,
                packet_rate_idle: 20_000.0,
                queue_build_rate: 5.5,
                queue_drain_rate: 1.5,
                queue_cap_us: 170.0,
                base_latency_ns: 800,
                hops: 1,
                first_switch_id: 1,
            },
            // Longer bursts and a much deeper queue.
            PresetName::Cache => BurstModelParams {
                burst_duration: DwellDistribution::LogNormal {
                    median_us: 120.0,
                    sigma: 0.6,
                },
                inter_burst: DwellDistribution::LogNormal {
                    median_us: 200.0,
                    sigma: 0.7,
                },
                packet_rate_burst: 250_000.0,
                packet_rate_idle: 30_000.0,
                queue_build_rate: 8.0,
                queue_drain_rate: 3.0,
                queue_cap_us: 1000.0,
                base_latency_ns: 800,
                hops: 1,
                first_switch_id: 1,
            },
            PresetName::Hadoop => BurstModelParams {
                burst_duration: DwellDistribution::LogNormal {
                    median_us: 60.0,
                    sigma: 0.6,
                },
                inter_burst: DwellDistribution::LogNormal {
                    median_us: 180.0,
                    sigma: 0.7,
                },
                packet_rate_burst: 250_000.0,
                packet_rate_idle: 25_000.0,
                queue_build_rate: 5.0,
                queue_drain_rate: 2.0,
                queue_cap_us: 400.0,
                base_latency_ns: 800,
                hops: 1,
                first_switch_id: 1,
            },
        };
        Self { name, params }
    }
}

/// One synthetic INT packet as seen by the sink.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Offset from trace start.
    pub ts_ns: u64,
    pub flow_key: FlowKey,
    /// Newest hop first.
    pub hops: Vec<HopMetadata>,
}

impl TraceRecord {
    pub fn queue_occupancy(&self) -> Option<u32> {
        self.hops.first().and_then(|h| h.get(MetadataKind::QueueOccupancy))
    }
}

pub fn default_flow() -> FlowKey {
    FlowKey::new(
        Ipv4Addr::new(10, 0, 0, 1),
        Ipv4Addr::new(10, 0, 1, 1),
        33000,
        5001,
        17,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Idle,
    Burst,
}

/// One hop's burst/idle process and queue.
struct QueueProcess {
    phase: Phase,
    remaining_us: f64,
    occupancy_us: f64,
    rng: ChaCha8Rng,
}

impl QueueProcess {
    fn new(params: &BurstModelParams, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let remaining_us = params.inter_burst.sample(&mut rng);
        Self {
            phase: Phase::Idle,
            remaining_us,
            occupancy_us: 0.0,
            rng,
        }
    }

    fn evolve(&mut self, params: &BurstModelParams, dt: f64) {
        self.occupancy_us = match self.phase {
            Phase::Burst => (self.occupancy_us + params.queue_build_rate * dt).min(params.queue_cap_us),
            Phase::Idle => (self.occupancy_us - params.queue_drain_rate * dt).max(0.0),
        };
        self.remaining_us -= dt;
    }

    fn flip(&mut self, params: &BurstModelParams) {
        let (phase, dist) = match self.phase {
            Phase::Idle => (Phase::Burst, &params.burst_duration),
            Phase::Burst => (Phase::Idle, &params.inter_burst),
        };
        self.phase = phase;
        self.remaining_us = dist.sample(&mut self.rng);
    }

    /// Advance by `dt`, crossing as many phase boundaries as needed.
    fn advance(&mut self, params: &BurstModelParams, mut dt: f64) {
        while dt > self.remaining_us {
            let step = self.remaining_us;
            self.evolve(params, step);
            dt -= step;
            self.flip(params);
        }
        self.evolve(params, dt);
    }

    fn rate_per_us(&self, params: &BurstModelParams) -> f64 {
        match self.phase {
            Phase::Burst => params.packet_rate_burst / 1e6,
            Phase::Idle => params.packet_rate_idle / 1e6,
        }
    }
}

fn hop_values(params: &BurstModelParams, switch_id: u32, occupancy_us: f64) -> HopMetadata {
    let q = occupancy_us.floor() as u32;
    let latency = u64::from(params.base_latency_ns) + u64::from(q) * 1000;
    HopMetadata::default()
        .with(MetadataKind::SwitchId, switch_id)
        .with(MetadataKind::HopLatency, latency.min(u64::from(u32::MAX)) as u32)
        .with(MetadataKind::QueueOccupancy, q)
}

/// Generate `n_packets` records. Deterministic in (`params`, `seed`).
pub fn generate_trace_with(
    params: &BurstModelParams,
    flow_key: FlowKey,
    n_packets: usize,
    seed: u64,
) -> Result<Vec<TraceRecord>, TrafficError> {
    params.validate()?;
    let hop_count = usize::from(params.hops);
    let mut procs: Vec<QueueProcess> = (0..hop_count)
        .map(|h| QueueProcess::new(params, seed, 1 + h as u64))
        .collect();
    let mut arrivals = ChaCha8Rng::seed_from_u64(seed);
    let mut now_us = 0.0f64;
    let mut out = Vec::with_capacity(n_packets);
    for i in 0..n_packets {
        if i > 0 {
            // Poisson arrivals with a piecewise-constant rate: resample at
            // every phase boundary of the driving process.
            let mut elapsed = 0.0;
            loop {
                let rate = procs[0].rate_per_us(params);
                let gap = if rate > 0.0 {
                    let e: f64 = Exp1.sample(&mut arrivals);
                    e / rate
                } else {
                    f64::INFINITY
                };
                if gap <= procs[0].remaining_us {
                    procs[0].evolve(params, gap);
                    elapsed += gap;
                    break;
                }
                let step = procs[0].remaining_us;
                procs[0].evolve(params, step);
                elapsed += step;
                procs[0].flip(params);
            }
            for p in procs.iter_mut().skip(1) {
                p.advance(params, elapsed);
            }
            now_us += elapsed;
        }
        let hops = procs
            .iter()
            .enumerate()
            .map(|(h, p)| hop_values(params, params.first_switch_id + h as u32, p.occupancy_us))
            .collect();
        out.push(TraceRecord {
            ts_ns: (now_us * 1000.0).round() as u64,
            flow_key,
            hops,
        });
    }
    Ok(out)
}

pub fn generate_trace(
    preset: &WorkloadPreset,
    n_packets: usize,
    seed: u64,
) -> Result<Vec<TraceRecord>, TrafficError> {
    generate_trace_with(&preset.params, default_flow(), n_packets, seed)
}

/// JSON-lines row. Hops are maps from item name to value.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    ts_ns: u64,
    flow: FlowKey,
    hops: Vec<std::collections::BTreeMap<MetadataKind, u32>>,
}

impl From<&TraceRecord> for TraceLine {
    fn from(r: &TraceRecord) -> Self {
        TraceLine {
            ts_ns: r.ts_ns,
            flow: r.flow_key,
            hops: r
                .hops
                .iter()
                .map(|h| {
                    MetadataKind::ALL
                        .into_iter()
                        .filter_map(|k| h.get(k).map(|v| (k, v)))
                        .collect()
                })
                .collect(),
        }
    }
}

impl From<TraceLine> for TraceRecord {
    fn from(l: TraceLine) -> Self {
        TraceRecord {
            ts_ns: l.ts_ns,
            flow_key: l.flow,
            hops: l
                .hops
                .into_iter()
                .map(|m| {
                    m.into_iter()
                        .fold(HopMetadata::default(), |h, (k, v)| h.with(k, v))
                })
                .collect(),
        }
    }
}

pub fn write_trace_to<W: Write>(records: &[TraceRecord], out: W) -> Result<(), TrafficError> {
    let mut w = BufWriter::new(out);
    let mut last = 0;
    for (i, r) in records.iter().enumerate() {
        if r.ts_ns < last {
            return Err(TrafficError::Line {
                line: i + 1,
                message: "records are not sorted by timestamp".into(),
            });
        }
        last = r.ts_ns;
        serde_json::to_writer(&mut w, &TraceLine::from(r))
            .map_err(|e| TrafficError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_from<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, TrafficError> {
    let mut out: Vec<TraceRecord> = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| TrafficError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        if out.last().is_some_and(|prev| parsed.ts_ns < prev.ts_ns) {
            return Err(TrafficError::Line {
                line: i + 1,
                message: "timestamp decreases".into(),
            });
        }
        out.push(parsed.into());
    }
    Ok(out)
}

pub fn write_trace(records: &[TraceRecord], path: impl AsRef<Path>) -> Result<(), TrafficError> {
    write_trace_to(records, std::fs::File::create(path)?)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<TraceRecord>, TrafficError> {
    read_trace_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Time between the start of consecutive replay cycles: the trace span plus
/// one mean inter-arrival gap.
pub fn cycle_period_ns(records: &[TraceRecord]) -> u64 {
    match records {
        [] => 0,
        [_] => 1_000,
        [first, .., last] => {
            let span = last.ts_ns - first.ts_ns;
            span + (span / (records.len() as u64 - 1)).max(1)
        }
    }
}

/// Cyclic replay with timestamps rebased per cycle; stops at `loop_for`.
pub struct Replay<'a> {
    records: &'a [TraceRecord],
    period_ns: u64,
    limit_ns: u64,
    cycle: u64,
    idx: usize,
    emitted: u64,
}

impl Replay<'_> {
    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn cycles_started(&self) -> u64 {
        self.cycle + u64::from(self.idx > 0)
    }
}

impl Iterator for Replay<'_> {
    type Item = TraceRecord;

    fn next(&mut self) -> Option<TraceRecord> {
        let rec = self.records.get(self.idx)?;
        let base = self.records[0].ts_ns;
        let ts = self.cycle * self.period_ns + (rec.ts_ns - base);
        if ts >= self.limit_ns {
            return None;
        }
        self.idx += 1;
        if self.idx == self.records.len() {
            self.idx = 0;
            self.cycle += 1;
        }
        self.emitted += 1;
        Some(TraceRecord {
            ts_ns: ts,
            flow_key: rec.flow_key,
            hops: rec.hops.clone(),
        })
    }
}

pub fn replay(records: &[TraceRecord], loop_for: Duration) -> Replay<'_> {
    Replay {
        records,
        period_ns: cycle_period_ns(records),
        limit_ns: loop_for.as_nanos().min(u128::from(u64::MAX)) as u64,
        cycle: 0,
        idx: 0,
        emitted: 0,
    }
}

/// Replay exactly `loops` full cycles.
pub fn replay_cycles(records: &[TraceRecord], loops: u64) -> Replay<'_> {
    let period = cycle_period_ns(records);
    replay(records, Duration::from_nanos(period.saturating_mul(loops)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn web() -> WorkloadPreset {
        WorkloadPreset::builtin(PresetName::Web)
    }

    #[test]
    fn single_packet_trace() {
        let t = generate_trace(&web(), 1, 7).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].ts_ns, 0);
        assert_eq!(t[0].queue_occupancy(), Some(0));
        assert_eq!(t[0].hops[0].present_mask(), TRACE_MASK);
    }

    #[test]
    fn same_seed_same_trace() {
        let a = generate_trace(&web(), 5000, 42).unwrap();
        let b = generate_trace(&web(), 5000, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_trace(&web(), 5000, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn occupancy_stays_clamped_and_sorted() {
        for name in PresetName::ALL {
            let p = WorkloadPreset::builtin(name);
            let t = generate_trace(&p, 20_000, 3).unwrap();
            assert!(t.windows(2).all(|w| w[0].ts_ns <= w[1].ts_ns));
            for r in &t {
                let q = r.queue_occupancy().unwrap();
                assert!(f64::from(q) <= p.params.queue_cap_us);
                let lat = r.hops[0].get(MetadataKind::HopLatency).unwrap();
                assert_eq!(lat, p.params.base_latency_ns + q * 1000);
            }
        }
    }

    #[test]
    fn multi_hop_keeps_first_hop_stream() {
        let one = web();
        let mut three = web();
        three.params.hops = 3;
        let a = generate_trace(&one, 2000, 11).unwrap();
        let b = generate_trace(&three, 2000, 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.ts_ns, y.ts_ns);
            assert_eq!(x.hops[0], y.hops[0]);
            assert_eq!(y.hops.len(), 3);
            assert_eq!(y.hops[2].get(MetadataKind::SwitchId), Some(3));
        }
    }

    #[test]
    fn preset_burst_ordering() {
        let web = WorkloadPreset::builtin(PresetName::Web).params;
        let cache = WorkloadPreset::builtin(PresetName::Cache).params;
        assert!(web.burst_duration.mean_us() < cache.burst_duration.mean_us());
    }

    #[test]
    fn alternative_distributions() {
        let mut p = web().params;
        p.burst_duration = DwellDistribution::Exponential { mean_us: 30.0 };
        p.inter_burst = DwellDistribution::Empirical {
            values_us: vec![50.0, 100.0, 400.0],
        };
        let t = generate_trace_with(&p, default_flow(), 3000, 1).unwrap();
        assert!(t.iter().any(|r| r.queue_occupancy() > Some(0)));
        p.inter_burst = DwellDistribution::Empirical { values_us: vec![] };
        assert!(generate_trace_with(&p, default_flow(), 10, 1).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        let mut p = web().params;
        p.packet_rate_burst = 0.0;
        p.packet_rate_idle = 0.0;
        assert!(p.validate().is_err());
        let mut p = web().params;
        p.queue_drain_rate = -1.0;
        assert!(p.validate().is_err());
        let mut p = web().params;
        p.hops = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn empty_trace_round_trips() {
        let mut buf = Vec::new();
        write_trace_to(&[], &mut buf).unwrap();
        assert!(buf.is_empty());
        assert!(read_trace_from(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn decreasing_timestamps_rejected() {
        let t = generate_trace(&web(), 3, 1).unwrap();
        let mut buf = Vec::new();
        write_trace_to(&t, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let swapped = format!("{}\n{}\n", lines[2], lines[1]);
        match read_trace_from(swapped.as_bytes()) {
            Err(TrafficError::Line { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        let mut unsorted = t.clone();
        unsorted.swap(1, 2);
        assert!(write_trace_to(&unsorted, Vec::new()).is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"ts_ns\":0,\"flow\":{\"src_ip\":\"1.2.3.4\",\"dst_ip\":\"1.2.3.5\",\"src_port\":1,\"dst_port\":2,\"proto\":6},\"hops\":[{\"queue_occupancy\":3}]}\nnot json\n";
        match read_trace_from(text.as_bytes()) {
            Err(TrafficError::Line { line: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn replay_prefix_and_full_loops() {
        let t = generate_trace(&web(), 500, 9).unwrap();
        let period = cycle_period_ns(&t);
        let prefix: Vec<_> = replay(&t, Duration::from_nanos(t[100].ts_ns)).collect();
        assert_eq!(prefix.len(), t.iter().filter(|r| r.ts_ns < t[100].ts_ns).count());
        let mut two = replay_cycles(&t, 2);
        let all: Vec<_> = two.by_ref().collect();
        assert_eq!(all.len(), 1000);
        assert_eq!(two.emitted(), 1000);
        assert_eq!(all[500].ts_ns, period);
        assert!(all.windows(2).all(|w| w[0].ts_ns < w[1].ts_ns || w[0].ts_ns == w[1].ts_ns));
        assert_eq!(replay(&[], Duration::from_secs(1)).count(), 0);
    }
}
