//! Software switch: INT source, transit and sink roles plus IPv4 forwarding.

pub mod forwarding;

use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::controlplane::{ConfigCell, FlowConfig, SwitchConfig, SwitchId, SwitchRole};
use crate::detection::{DetectorState, Verdict};
use crate::int_wire::{
    pack_ports, FlowKey, HopMetadata, InstructionBitmask, IntHeaderStack, MetadataKind,
    TelemetryReport,
};

pub use forwarding::{forward_lookup, ForwardVerdict, ForwardingTable, Ipv4Prefix, PrefixError};

/// A data packet in flight. The INT stack travels next to the carrier bytes,
/// which are never modified.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub flow_key: FlowKey,
    pub payload_len: u32,
    pub arrival_ts: u64,
    pub int: Option<IntHeaderStack>,
    pub original_bytes: Vec<u8>,
}

impl Packet {
    pub fn new(flow_key: FlowKey, original_bytes: Vec<u8>, arrival_ts: u64) -> Self {
        Self {
            flow_key,
            payload_len: original_bytes.len() as u32,
            arrival_ts,
            int: None,
            original_bytes,
        }
    }

    /// IPv4 + L4 port header built from the flow key, followed by
    /// `payload_len` filler bytes derived from `seq`. Checksums are left zero.
    pub fn synthetic(flow_key: FlowKey, payload_len: u16, seq: u64, arrival_ts: u64) -> Self {
        let total = 28 + usize::from(payload_len);
        let mut b = Vec::with_capacity(total);
        b.push(0x45);
        b.push(0);
        b.extend_from_slice(&(total.min(usize::from(u16::MAX)) as u16).to_be_bytes());
        b.extend_from_slice(&(seq as u16).to_be_bytes());
        b.extend_from_slice(&[0x40, 0, 64, flow_key.proto, 0, 0]);
        b.extend_from_slice(&flow_key.src_ip.octets());
        b.extend_from_slice(&flow_key.dst_ip.octets());
        b.extend_from_slice(&flow_key.src_port.to_be_bytes());
        b.extend_from_slice(&flow_key.dst_port.to_be_bytes());
        b.extend_from_slice(&(8 + payload_len).to_be_bytes());
        b.extend_from_slice(&[0, 0]);
        let seed = seq.to_be_bytes();
        b.extend((0..usize::from(payload_len)).map(|i| seed[i % 8] ^ i as u8));
        let mut p = Self::new(flow_key, b, arrival_ts);
        p.payload_len = u32::from(payload_len);
        p
    }

    /// Bytes on the wire: encoded INT stack (if any) ahead of the carrier.
    pub fn wire_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        if let Some(stack) = &self.int {
            // push_hop keeps stacks encodable
            stack.encode_into(&mut out).expect("stack kept in range");
        }
        out.extend_from_slice(&self.original_bytes);
        out
    }
}

/// What this switch observed for one packet.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LocalTelemetry {
    pub switch_id: u32,
    pub ingress_port: u16,
    pub egress_port: u16,
    pub ingress_ts: u64,
    pub egress_ts: u64,
    /// Drain time of the queue at enqueue, µs.
    pub queue_occupancy: u32,
    pub queue_congestion: u32,
    /// Permille.
    pub tx_utilization: u32,
}

impl LocalTelemetry {
    /// Builds telemetry whose residence time equals `hop_latency_ns`.
    pub fn observed(switch_id: u32, ingress_ts: u64, hop_latency_ns: u32, queue_occupancy: u32) -> Self {
        Self {
            switch_id,
            ingress_ts,
            egress_ts: ingress_ts + u64::from(hop_latency_ns),
            queue_occupancy,
            ..Self::default()
        }
    }

    /// Inverse of `to_hop` for the items a trace carries.
    pub fn from_hop(hop: &HopMetadata, fallback_switch: u32, ingress_ts: u64) -> Self {
        Self::observed(
            hop.get(MetadataKind::SwitchId).unwrap_or(fallback_switch),
            ingress_ts,
            hop.get(MetadataKind::HopLatency).unwrap_or(0),
            hop.get(MetadataKind::QueueOccupancy).unwrap_or(0),
        )
    }

    /// Saturates at zero if the clock went backwards and at u32::MAX ns.
    pub fn hop_latency(&self) -> u32 {
        self.egress_ts
            .saturating_sub(self.ingress_ts)
            .min(u64::from(u32::MAX)) as u32
    }

    pub fn value(&self, kind: MetadataKind) -> u32 {
        match kind {
            MetadataKind::SwitchId => self.switch_id,
            MetadataKind::PortIds => pack_ports(self.ingress_port, self.egress_port),
            MetadataKind::HopLatency => self.hop_latency(),
            MetadataKind::QueueOccupancy => self.queue_occupancy,
            MetadataKind::IngressTimestamp => self.ingress_ts as u32,
            MetadataKind::EgressTimestamp => self.egress_ts as u32,
            MetadataKind::QueueCongestion => self.queue_congestion,
            MetadataKind::TxUtilization => self.tx_utilization,
        }
    }

    pub fn to_hop(&self, mask: InstructionBitmask) -> HopMetadata {
        mask.kinds()
            .fold(HopMetadata::default(), |h, k| h.with(k, self.value(k)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchCounters {
    pub packets: u64,
    pub forwarded: u64,
    pub dropped: u64,
    pub stamped: u64,
    pub appended: u64,
    pub stripped: u64,
    pub reports: u64,
    pub overflows: u64,
    /// INT already present at a source.
    pub int_anomalies: u64,
    /// Transit or sink packets that arrived without INT.
    pub missing_int: u64,
}

/// Result of running one packet through a switch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Processed {
    pub packet: Packet,
    pub egress: ForwardVerdict,
    pub report: Option<TelemetryReport>,
    /// Set when a sink ran detection.
    pub verdict: Option<Verdict>,
}

/// One switch pipeline. Owns its detector registers; reads its configuration
/// from a shared cell once per packet.
#[derive(Debug)]
pub struct Switch {
    id: SwitchId,
    hw_id: u8,
    config: Arc<ConfigCell>,
    detector: DetectorState,
    next_seq: u32,
    counters: SwitchCounters,
}

impl Switch {
    pub fn new(id: SwitchId, config: Arc<ConfigCell>) -> Self {
        let sizes = config.snapshot().registers;
        Self {
            id,
            hw_id: 0,
            detector: DetectorState::new(sizes).unwrap_or_default(),
            config,
            next_seq: 0,
            counters: SwitchCounters::default(),
        }
    }

    pub fn standalone(id: SwitchId, cfg: SwitchConfig) -> Self {
        Self::new(id, Arc::new(ConfigCell::new(cfg)))
    }

    pub fn with_hw_id(mut self, hw_id: u8) -> Self {
        self.hw_id = hw_id & 0x3F;
        self
    }

    pub fn id(&self) -> SwitchId {
        self.id
    }

    pub fn config(&self) -> &Arc<ConfigCell> {
        &self.config
    }

    pub fn counters(&self) -> SwitchCounters {
        self.counters
    }

    pub fn detector(&self) -> &DetectorState {
        &self.detector
    }

    pub fn source_process(&mut self, mut pkt: Packet, cfg: &FlowConfig, local: &LocalTelemetry) -> Packet {
        if pkt.int.is_some() {
            self.counters.int_anomalies += 1;
            return pkt;
        }
        let mut stack = IntHeaderStack::new(cfg.mask, cfg.max_hops);
        match stack.push_hop(local.to_hop(cfg.mask)) {
            Ok(()) => {
                pkt.int = Some(stack);
                self.counters.stamped += 1;
            }
            Err(_) => self.counters.overflows += 1,
        }
        pkt
    }

    pub fn transit_process(&mut self, mut pkt: Packet, local: &LocalTelemetry) -> Packet {
        let Some(stack) = pkt.int.as_mut() else {
            self.counters.missing_int += 1;
            return pkt;
        };
        match stack.push_hop(local.to_hop(stack.mask())) {
            Ok(()) => self.counters.appended += 1,
            Err(_) => self.counters.overflows += 1,
        }
        pkt
    }

    /// Appends this switch's hop when `local` is given, runs the configured
    /// detector over the stack, strips INT and reports on event.
    pub fn sink_process(
        &mut self,
        mut pkt: Packet,
        cfg: &FlowConfig,
        config: &SwitchConfig,
        local: Option<&LocalTelemetry>,
        now_ns: u64,
    ) -> (Packet, Option<TelemetryReport>, Option<Verdict>) {
        let Some(mut stack) = pkt.int.take() else {
            self.counters.missing_int += 1;
            return (pkt, None, None);
        };
        self.counters.stripped += 1;
        if let Some(local) = local {
            match stack.push_hop(local.to_hop(stack.mask())) {
                Ok(()) => self.counters.appended += 1,
                Err(_) => self.counters.overflows += 1,
            }
        }
        let verdict = self.detector.evaluate(
            &pkt.flow_key,
            &stack.hops,
            &cfg.algorithm,
            &config.expressions,
        );
        let report = verdict.event.then(|| {
            let seq_no = self.next_seq;
            self.next_seq = self.next_seq.wrapping_add(1);
            self.counters.reports += 1;
            TelemetryReport {
                hw_id: self.hw_id,
                pad: 0,
                reserved: 0,
                seq_no,
                sink_node_id: self.id,
                report_ts: (now_ns / 1000) as u32,
                flow_key: pkt.flow_key,
                md: stack.md,
                hops: stack.hops,
            }
        });
        (pkt, report, Some(verdict))
    }

    /// Full pipeline: resolve the flow rule, apply the role, forward.
    pub fn process(&mut self, pkt: Packet, local: Option<&LocalTelemetry>, now_ns: u64) -> Processed {
        self.counters.packets += 1;
        let config = self.config.snapshot();
        let fallback = LocalTelemetry {
            switch_id: self.id,
            ingress_ts: now_ns,
            egress_ts: now_ns,
            ..LocalTelemetry::default()
        };
        let rule = config.resolve(&pkt.flow_key).copied();
        let (packet, report, verdict) = match rule {
            Some(cfg) if cfg.role == SwitchRole::Source => {
                (self.source_process(pkt, &cfg, local.unwrap_or(&fallback)), None, None)
            }
            Some(cfg) if cfg.role == SwitchRole::Transit => {
                (self.transit_process(pkt, local.unwrap_or(&fallback)), None, None)
            }
            Some(cfg) if cfg.role == SwitchRole::Sink => {
                self.sink_process(pkt, &cfg, &config, local, now_ns)
            }
            _ => (pkt, None, None),
        };
        let egress = forward_lookup(&packet.flow_key, &config.forwarding);
        match egress {
            ForwardVerdict::Port(_) => self.counters.forwarded += 1,
            ForwardVerdict::Drop => self.counters.dropped += 1,
        }
        Processed {
            packet,
            egress,
            report,
            verdict,
        }
    }
}

/// A packet entering a chain, with what each switch on the path observes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainInput {
    pub packet: Packet,
    /// Indexed by switch position; `None` lets the switch use defaults.
    pub locals: Vec<Option<LocalTelemetry>>,
    pub now_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChainOutput {
    /// Packets leaving the last switch, in order.
    pub delivered: Vec<Packet>,
    /// Reports from all switches, ordered by switch then emission.
    pub reports: Vec<TelemetryReport>,
    pub dropped: u64,
}

fn step(sw: &mut Switch, pos: usize, item: ChainInput) -> (Option<ChainInput>, Option<TelemetryReport>) {
    let local = item.locals.get(pos).copied().flatten();
    let out = sw.process(item.packet, local.as_ref(), item.now_ns);
    let next = match out.egress {
        ForwardVerdict::Port(_) => Some(ChainInput {
            packet: out.packet,
            locals: item.locals,
            now_ns: item.now_ns,
        }),
        ForwardVerdict::Drop => None,
    };
    (next, out.report)
}

/// Runs every packet through `switches` in order on the calling thread.
pub fn run_chain(switches: &mut [Switch], inputs: impl IntoIterator<Item = ChainInput>) -> ChainOutput {
    let mut per_switch: Vec<Vec<TelemetryReport>> = vec![Vec::new(); switches.len()];
    let mut out = ChainOutput::default();
    'packets: for mut item in inputs {
        for (pos, sw) in switches.iter_mut().enumerate() {
            let (next, report) = step(sw, pos, item);
            per_switch[pos].extend(report);
            match next {
                Some(n) => item = n,
                None => {
                    out.dropped += 1;
                    continue 'packets;
                }
            }
        }
        out.delivered.push(item.packet);
    }
    out.reports = per_switch.into_iter().flatten().collect();
    out
}

/// Same as [`run_chain`] with one thread per switch, linked by FIFO channels.
/// Returns the switches so their counters can be inspected.
pub fn run_chain_threaded(
    switches: Vec<Switch>,
    inputs: Vec<ChainInput>,
) -> (ChainOutput, Vec<Switch>) {
    let n = switches.len();
    let (first_tx, mut rx) = mpsc::channel::<ChainInput>();
    let mut handles = Vec::with_capacity(n);
    let (drop_tx, drop_rx) = mpsc::channel::<()>();
    for (pos, mut sw) in switches.into_iter().enumerate() {
        let (tx, next_rx) = mpsc::channel::<ChainInput>();
        let input = std::mem::replace(&mut rx, next_rx);
        let drop_tx = drop_tx.clone();
        handles.push(thread::spawn(move || {
            let mut reports = Vec::new();
            for item in input {
                let (next, report) = step(&mut sw, pos, item);
                reports.extend(report);
                match next {
                    Some(n) => {
                        let _ = tx.send(n);
                    }
                    None => {
                        let _ = drop_tx.send(());
                    }
                }
            }
            (sw, reports)
        }));
    }
    drop(drop_tx);
    for item in inputs {
        let _ = first_tx.send(item);
    }
    drop(first_tx);
    let delivered: Vec<Packet> = rx.iter().map(|i| i.packet).collect();
    let mut out = ChainOutput {
        delivered,
        ..ChainOutput::default()
    };
    let mut switches = Vec::with_capacity(n);
    for h in handles {
        let (sw, reports) = h.join().expect("switch thread panicked");
        out.reports.extend(reports);
        switches.push(sw);
    }
    out.dropped = drop_rx.iter().count() as u64;
    (out, switches)
}
