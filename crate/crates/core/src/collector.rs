//! Telemetry report collector.
//!
//! A collector instance pulls frames from one [`FrameSource`], decodes each as
//! a [`TelemetryReport`], wraps it in a [`SinkMessage`] and hands it to a
//! [`StreamSink`]. Instances share nothing; run one per input to shard.
//!
//! Counters satisfy `received == forwarded + parse_errors + dropped`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, UdpSocket};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender, TrySendError};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::int_wire::{
    FlowKey, HopMetadata, InstructionBitmask, MdHeader, MetadataKind, TelemetryReport,
    WireError, FLOW_KEY_LEN, REPORT_FIXED_LEN,
};

pub const DEFAULT_TOPIC: &str = "int-events";

/// Largest frame a report can occupy: 255 stack words.
pub const MAX_FRAME_LEN: usize = REPORT_FIXED_LEN + 255 * 4;

/// A decoded report plus where and when it was received.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsedEvent {
    pub collector_id: u32,
    /// Nanoseconds since the collector started.
    pub receive_ts: u64,
    pub hw_id: u8,
    pub pad: u8,
    pub reserved: u8,
    pub seq_no: u32,
    pub sink_node_id: u32,
    pub report_ts: u32,
    pub flow: FlowKey,
    pub mask: u8,
    pub max_hops: u8,
    pub md_reserved: u8,
    /// Newest hop first.
    pub hops: Vec<BTreeMap<MetadataKind, u32>>,
}

impl ParsedEvent {
    pub fn from_report(report: &TelemetryReport, collector_id: u32, receive_ts: u64) -> Self {
        Self {
            collector_id,
            receive_ts,
            hw_id: report.hw_id,
            pad: report.pad,
            reserved: report.reserved,
            seq_no: report.seq_no,
            sink_node_id: report.sink_node_id,
            report_ts: report.report_ts,
            flow: report.flow_key,
            mask: report.md.mask.0,
            max_hops: report.md.max_hops,
            md_reserved: report.md.reserved,
            hops: report
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

    pub fn to_report(&self) -> TelemetryReport {
        TelemetryReport {
            hw_id: self.hw_id,
            pad: self.pad,
            reserved: self.reserved,
            seq_no: self.seq_no,
            sink_node_id: self.sink_node_id,
            report_ts: self.report_ts,
            flow_key: self.flow,
            md: MdHeader {
                mask: InstructionBitmask(self.mask),
                max_hops: self.max_hops,
                reserved: self.md_reserved,
            },
            hops: self
                .hops
                .iter()
                .map(|m| m.iter().fold(HopMetadata::default(), |h, (&k, &v)| h.with(k, v)))
                .collect(),
        }
    }
}

/// Broker-style message: the key is the encoded flow key, the value the
/// event as JSON.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SinkMessage {
    pub topic: String,
    pub key: [u8; FLOW_KEY_LEN],
    pub value: String,
}

impl SinkMessage {
    pub fn new(topic: &str, event: &ParsedEvent) -> Self {
        Self {
            topic: topic.to_string(),
            key: event.flow.to_bytes(),
            value: serde_json::to_string(event).expect("event serialises"),
        }
    }

    pub fn event(&self) -> Result<ParsedEvent, serde_json::Error> {
        serde_json::from_str(&self.value)
    }

    pub fn flow_key(&self) -> FlowKey {
        FlowKey::from_bytes(&self.key).expect("fixed length")
    }

    /// One JSON object per line: topic, hex key, event value.
    pub fn to_json_line(&self) -> String {
        let mut key = String::with_capacity(FLOW_KEY_LEN * 2);
        for b in self.key {
            let _ = write!(key, "{b:02x}");
        }
        format!(
            "{{\"topic\":{},\"key\":\"{key}\",\"value\":{}}}",
            serde_json::Value::String(self.topic.clone()),
            self.value
        )
    }
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("sink closed")]
    Closed,
    #[error("sink io: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug)]
pub enum TrySend {
    Sent,
    /// Buffer full; the message is handed back.
    Full(SinkMessage),
}

/// Destination for parsed events. Single producer per instance.
pub trait StreamSink {
    /// May block until there is room.
    fn send(&mut self, msg: SinkMessage) -> Result<(), SinkError>;

    fn try_send(&mut self, msg: SinkMessage) -> Result<TrySend, SinkError> {
        self.send(msg).map(|()| TrySend::Sent)
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        Ok(())
    }
}

impl<S: StreamSink + ?Sized> StreamSink for &mut S {
    fn send(&mut self, msg: SinkMessage) -> Result<(), SinkError> {
        (**self).send(msg)
    }

    fn try_send(&mut self, msg: SinkMessage) -> Result<TrySend, SinkError> {
        (**self).try_send(msg)
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        (**self).flush()
    }
}

impl<S: StreamSink + ?Sized> StreamSink for Box<S> {
    fn send(&mut self, msg: SinkMessage) -> Result<(), SinkError> {
        (**self).send(msg)
    }

    fn try_send(&mut self, msg: SinkMessage) -> Result<TrySend, SinkError> {
        (**self).try_send(msg)
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        (**self).flush()
    }
}

/// Keeps every message. Never full.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub messages: Vec<SinkMessage>,
}

impl StreamSink for MemorySink {
    fn send(&mut self, msg: SinkMessage) -> Result<(), SinkError> {
        self.messages.push(msg);
        Ok(())
    }
}

/// Counts and discards; the message is still fully built by the caller.
#[derive(Debug, Default)]
pub struct NullSink {
    pub count: u64,
}

impl StreamSink for NullSink {
    fn send(&mut self, _msg: SinkMessage) -> Result<(), SinkError> {
        self.count += 1;
        Ok(())
    }
}

/// Bounded queue to a consumer thread.
#[derive(Debug)]
pub struct ChannelSink {
    tx: SyncSender<SinkMessage>,
}

impl ChannelSink {
    pub fn bounded(capacity: usize) -> (Self, Receiver<SinkMessage>) {
        let (tx, rx) = mpsc::sync_channel(capacity);
        (Self { tx }, rx)
    }
}

impl StreamSink for ChannelSink {
    fn send(&mut self, msg: SinkMessage) -> Result<(), SinkError> {
        self.tx.send(msg).map_err(|_| SinkError::Closed)
    }

    fn try_send(&mut self, msg: SinkMessage) -> Result<TrySend, SinkError> {
        match self.tx.try_send(msg) {
            Ok(()) => Ok(TrySend::Sent),
            Err(TrySendError::Full(m)) => Ok(TrySend::Full(m)),
            Err(TrySendError::Disconnected(_)) => Err(SinkError::Closed),
        }
    }
}

/// Appends [`SinkMessage::to_json_line`] output to a file.
#[derive(Debug)]
pub struct FileSink {
    out: BufWriter<File>,
}

impl FileSink {
    pub fn append(path: impl AsRef<Path>) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }
}

impl StreamSink for FileSink {
    fn send(&mut self, msg: SinkMessage) -> Result<(), SinkError> {
        self.out.write_all(msg.to_json_line().as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<(), SinkError> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for FileSink {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Reads back a file written by [`FileSink`].
pub fn read_sink_file(path: impl AsRef<Path>) -> io::Result<Vec<ParsedEvent>> {
    #[derive(Deserialize)]
    struct Line {
        value: ParsedEvent,
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<Line>(l)
                .map(|x| x.value)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackpressurePolicy {
    #[default]
    Block,
    Drop,
}

#[derive(Debug, Clone)]
pub struct CollectorOptions {
    pub collector_id: u32,
    pub topic: String,
    pub policy: BackpressurePolicy,
    /// `None` disables interval stats.
    pub stats_interval: Option<Duration>,
}

impl Default for CollectorOptions {
    fn default() -> Self {
        Self {
            collector_id: 0,
            topic: DEFAULT_TOPIC.to_string(),
            policy: BackpressurePolicy::Block,
            stats_interval: Some(Duration::from_secs(1)),
        }
    }
}

/// Counters for one stats interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalStats {
    /// Seconds since the collector started, at interval end.
    pub ts: f64,
    /// Frames received per second over the interval.
    pub pps: f64,
    pub errors: u64,
    pub forwarded: u64,
}

impl IntervalStats {
    pub fn line(&self) -> String {
        format!("{:.3}, {:.0}, {}, {}", self.ts, self.pps, self.errors, self.forwarded)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectorStats {
    pub received: u64,
    pub parse_errors: u64,
    pub forwarded: u64,
    /// Backpressure drops and sink failures.
    pub dropped: u64,
    pub sink_failures: u64,
    pub elapsed: Duration,
    pub intervals: Vec<IntervalStats>,
}

impl CollectorStats {
    pub fn conserved(&self) -> bool {
        self.received == self.forwarded + self.parse_errors + self.dropped
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameOutcome {
    Forwarded,
    ParseError(WireError),
    Dropped,
}

/// What a frame source returned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Poll {
    Frame(Vec<u8>),
    /// Nothing arrived within the source's wait; lets the collector tick.
    Idle,
    End,
}

pub trait FrameSource {
    fn next_frame(&mut self) -> Poll;
}

/// Adapts any iterator of frames.
pub struct IterSource<I>(pub I);

impl<I: Iterator<Item = Vec<u8>>> FrameSource for IterSource<I> {
    fn next_frame(&mut self) -> Poll {
        self.0.next().map_or(Poll::End, Poll::Frame)
    }
}

/// In-process input: frames from an mpsc channel. Ends when all senders drop.
pub struct ChannelSource {
    rx: Receiver<Vec<u8>>,
    wait: Duration,
}

impl ChannelSource {
    pub fn new(rx: Receiver<Vec<u8>>) -> Self {
        Self {
            rx,
            wait: Duration::from_millis(100),
        }
    }
}

impl FrameSource for ChannelSource {
    fn next_frame(&mut self) -> Poll {
        match self.rx.recv_timeout(self.wait) {
            Ok(f) => Poll::Frame(f),
            Err(RecvTimeoutError::Timeout) => Poll::Idle,
            Err(RecvTimeoutError::Disconnected) => Poll::End,
        }
    }
}

/// One datagram is one frame.
pub struct UdpIngest {
    socket: UdpSocket,
    buf: Vec<u8>,
    idle_limit: Option<Duration>,
    max_frames: Option<u64>,
    received: u64,
    last_frame: Instant,
}

impl UdpIngest {
    pub fn bind(addr: impl Into<SocketAddr>) -> io::Result<Self> {
        let socket = UdpSocket::bind(addr.into())?;
        socket.set_read_timeout(Some(Duration::from_millis(100)))?;
        Ok(Self {
            socket,
            // one spare byte so an oversized datagram is visible as such
            buf: vec![0; MAX_FRAME_LEN + 1],
            idle_limit: None,
            max_frames: None,
            received: 0,
            last_frame: Instant::now(),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.socket.local_addr()
    }

    /// End the stream after this long without a datagram.
    pub fn idle_limit(mut self, limit: Option<Duration>) -> Self {
        self.idle_limit = limit;
        self
    }

    pub fn max_frames(mut self, n: Option<u64>) -> Self {
        self.max_frames = n;
        self
    }
}

pub fn udp_ingest(port: u16) -> io::Result<UdpIngest> {
    UdpIngest::bind(([127, 0, 0, 1], port))
}

impl FrameSource for UdpIngest {
    fn next_frame(&mut self) -> Poll {
        if self.max_frames.is_some_and(|m| self.received >= m) {
            return Poll::End;
        }
        match self.socket.recv(&mut self.buf) {
            Ok(n) => {
                self.received += 1;
                self.last_frame = Instant::now();
                Poll::Frame(self.buf[..n].to_vec())
            }
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                match self.idle_limit {
                    Some(l) if self.last_frame.elapsed() >= l => Poll::End,
                    _ => Poll::Idle,
                }
            }
            Err(_) => Poll::End,
        }
    }
}

/// One collector instance.
pub struct Collector<S> {
    opts: CollectorOptions,
    sink: S,
    stats: CollectorStats,
    started: Instant,
    tick_start: Instant,
    tick_received: u64,
    tick_errors: u64,
    tick_forwarded: u64,
}

impl<S: StreamSink> Collector<S> {
    pub fn new(sink: S, opts: CollectorOptions) -> Self {
        let now = Instant::now();
        Self {
            opts,
            sink,
            stats: CollectorStats::default(),
            started: now,
            tick_start: now,
            tick_received: 0,
            tick_errors: 0,
            tick_forwarded: 0,
        }
    }

    pub fn stats(&self) -> &CollectorStats {
        &self.stats
    }

    pub fn sink(&self) -> &S {
        &self.sink
    }

    pub fn handle_frame(&mut self, frame: &[u8]) -> FrameOutcome {
        self.stats.received += 1;
        self.tick_received += 1;
        let report = match TelemetryReport::decode(frame) {
            Ok(r) => r,
            Err(e) => {
                self.stats.parse_errors += 1;
                self.tick_errors += 1;
                return FrameOutcome::ParseError(e);
            }
        };
        let ts = self.started.elapsed().as_nanos() as u64;
        let event = ParsedEvent::from_report(&report, self.opts.collector_id, ts);
        let msg = SinkMessage::new(&self.opts.topic, &event);
        let sent = match self.opts.policy {
            BackpressurePolicy::Block => self.sink.send(msg).map(|()| true),
            BackpressurePolicy::Drop => self.sink.try_send(msg).map(|r| matches!(r, TrySend::Sent)),
        };
        match sent {
            Ok(true) => {
                self.stats.forwarded += 1;
                self.tick_forwarded += 1;
                FrameOutcome::Forwarded
            }
            Ok(false) => {
                self.stats.dropped += 1;
                FrameOutcome::Dropped
            }
            Err(_) => {
                self.stats.dropped += 1;
                self.stats.sink_failures += 1;
                FrameOutcome::Dropped
            }
        }
    }

    /// Closes the current interval if it is due.
    pub fn tick(&mut self) -> Option<IntervalStats> {
        let every = self.opts.stats_interval?;
        let span = self.tick_start.elapsed();
        if span < every {
            return None;
        }
        Some(self.close_interval(span))
    }

    fn close_interval(&mut self, span: Duration) -> IntervalStats {
        let s = IntervalStats {
            ts: self.started.elapsed().as_secs_f64(),
            pps: self.tick_received as f64 / span.as_secs_f64().max(1e-9),
            errors: self.tick_errors,
            forwarded: self.tick_forwarded,
        };
        self.stats.intervals.push(s);
        self.tick_start = Instant::now();
        self.tick_received = 0;
        self.tick_errors = 0;
        self.tick_forwarded = 0;
        s
    }

    pub fn finish(mut self) -> (CollectorStats, S) {
        if self.opts.stats_interval.is_some() && self.tick_received > 0 {
            let span = self.tick_start.elapsed();
            self.close_interval(span);
        }
        if self.sink.flush().is_err() {
            self.stats.sink_failures += 1;
        }
        self.stats.elapsed = self.started.elapsed();
        (self.stats, self.sink)
    }
}

/// Drains `input` into `sink`, calling `on_interval` as each stats interval
/// closes.
pub fn collect_with<S: StreamSink>(
    input: &mut dyn FrameSource,
    sink: S,
    opts: CollectorOptions,
    mut on_interval: impl FnMut(&IntervalStats),
) -> (CollectorStats, S) {
    let mut c = Collector::new(sink, opts);
    loop {
        match input.next_frame() {
            Poll::Frame(f) => {
                c.handle_frame(&f);
            }
            Poll::Idle => {}
            Poll::End => break,
        }
        if let Some(s) = c.tick() {
            on_interval(&s);
        }
    }
    c.finish()
}

pub fn collect<S: StreamSink>(
    input: &mut dyn FrameSource,
    sink: S,
    opts: CollectorOptions,
) -> (CollectorStats, S) {
    collect_with(input, sink, opts, |_| {})
}

/// Random reports of one shape, for parse benchmarks and tests.
pub fn synthetic_reports(mask: InstructionBitmask, hop_count: usize, n: usize, seed: u64) -> Vec<TelemetryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| TelemetryReport {
            hw_id: rng.gen_range(0..64),
            pad: 0,
            reserved: 0,
            seq_no: i as u32,
            sink_node_id: rng.gen(),
            report_ts: rng.gen(),
            flow_key: FlowKey::new(
                rng.gen::<u32>().into(),
                rng.gen::<u32>().into(),
                rng.gen(),
                rng.gen(),
                rng.gen(),
            ),
            md: MdHeader::new(mask, hop_count.max(1).min(255) as u8),
            hops: (0..hop_count)
                .map(|_| mask.kinds().fold(HopMetadata::default(), |h, k| h.with(k, rng.gen())))
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParseBench {
    pub items: usize,
    pub hops: usize,
    pub reports: u64,
    pub seconds: f64,
    pub reports_per_s: f64,
}

/// Throughput of one collector instance over pre-encoded reports of the given
/// shape: decode, event and message construction, null sink. The first tenth
/// of `duration` is warmup and not counted.
pub fn bench_parse(mask: InstructionBitmask, hop_count: usize, duration: Duration) -> ParseBench {
    let frames: Vec<Vec<u8>> = synthetic_reports(mask, hop_count, 1024, 0x5eed)
        .iter()
        .map(|r| r.encode().expect("synthetic reports are in range"))
        .collect();
    let opts = CollectorOptions {
        stats_interval: None,
        ..CollectorOptions::default()
    };
    let mut c = Collector::new(NullSink::default(), opts);
    let run = |c: &mut Collector<NullSink>, d: Duration| {
        let start = Instant::now();
        let mut n = 0u64;
        loop {
            for f in &frames {
                c.handle_frame(f);
            }
            n += frames.len() as u64;
            if start.elapsed() >= d {
                return (n, start.elapsed().as_secs_f64());
            }
        }
    };
    run(&mut c, duration / 10);
    let (reports, seconds) = run(&mut c, duration - duration / 10);
    ParseBench {
        items: mask.item_count(),
        hops: hop_count,
        reports,
        seconds,
        reports_per_s: reports as f64 / seconds,
    }
}
