use std::collections::BTreeMap;
use std::net::{Ipv4Addr, UdpSocket};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use int_forge::bench::replay_through;
use int_forge::collector::{
    collect, read_sink_file, synthetic_reports, ChannelSource, CollectorOptions, FileSink, MemorySink, UdpIngest,
};
use int_forge::controlplane::{FlowConfig, FlowMatch, SwitchConfig, SwitchRole};
use int_forge::dataplane::Switch;
use int_forge::detection::AlgorithmConfig;
use int_forge::int_wire::{FlowKey, InstructionBitmask, MetadataKind, TelemetryReport};
use int_forge::traffic::{generate_trace, PresetName, TraceRecord, WorkloadPreset, TRACE_MASK};

fn three_switch_chain() -> Vec<Switch> {
    [SwitchRole::Source, SwitchRole::Transit, SwitchRole::Sink]
        .into_iter()
        .enumerate()
        .map(|(i, role)| {
            let mut cfg = SwitchConfig::default();
            cfg.flows
                .insert(
                    FlowConfig::new(FlowMatch::any(), role)
                        .with_mask(TRACE_MASK)
                        .with_algorithm(AlgorithmConfig::per_flow(MetadataKind::QueueOccupancy, 60)),
                )
                .unwrap();
            cfg.forwarding.set_default(Some(1));
            Switch::standalone(i as u32 + 1, cfg)
        })
        .collect()
}

/// Three-hop cache trace with packets spread over three flows.
fn trace() -> Vec<TraceRecord> {
    let mut p = WorkloadPreset::builtin(PresetName::Cache);
    p.params.hops = 3;
    let mut t = generate_trace(&p, 30_000, 4).unwrap();
    for (i, r) in t.iter_mut().enumerate() {
        r.flow_key.src_port = 40_000 + (i % 3) as u16;
    }
    t
}

fn by_flow(reports: &[TelemetryReport]) -> BTreeMap<FlowKey, Vec<TelemetryReport>> {
    let mut m: BTreeMap<FlowKey, Vec<TelemetryReport>> = BTreeMap::new();
    for r in reports {
        m.entry(r.flow_key).or_default().push(r.clone());
    }
    m
}

#[test]
fn sink_holds_exactly_the_pipeline_reports() {
    let mut emitted = Vec::new();
    let (tx, rx) = mpsc::sync_channel::<Vec<u8>>(256);
    let collector = thread::spawn(move || {
        collect(&mut ChannelSource::new(rx), MemorySink::default(), CollectorOptions::default())
    });
    let outcome = replay_through(&mut three_switch_chain(), trace().into_iter(), |r| {
        tx.send(r.encode().unwrap()).unwrap();
        emitted.push(r);
    });
    drop(tx);
    let (stats, sink) = collector.join().unwrap();
    assert_eq!(outcome.carrier_mismatches, 0);
    assert_eq!(outcome.reports, emitted.len() as u64);
    assert!(emitted.len() > 100, "only {} reports", emitted.len());
    assert_eq!(stats.received, emitted.len() as u64);
    assert_eq!(stats.forwarded, emitted.len() as u64);
    assert!(stats.conserved());
    let got: Vec<TelemetryReport> = sink.messages.iter().map(|m| m.event().unwrap().to_report()).collect();
    assert_eq!(got, emitted);
    for m in &sink.messages {
        assert_eq!(m.flow_key(), m.event().unwrap().flow);
    }
    let flows = by_flow(&got);
    assert_eq!(flows.len(), 3);
    assert_eq!(flows, by_flow(&emitted));
    for reports in flows.values() {
        for r in reports {
            // newest first, exactly as the trace lists them
            let ids: Vec<_> = r.hops.iter().map(|h| h.get(MetadataKind::SwitchId)).collect();
            assert_eq!(ids, [Some(1), Some(2), Some(3)]);
        }
    }
}

#[test]
fn file_sink_round_trips_events() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.jsonl");
    let reports = synthetic_reports(InstructionBitmask(0xF3), 4, 500, 11);
    let frames = reports.iter().map(|r| r.encode().unwrap());
    let (stats, sink) = collect(
        &mut int_forge::collector::IterSource(frames),
        FileSink::append(&path).unwrap(),
        CollectorOptions::default(),
    );
    drop(sink);
    assert_eq!(stats.forwarded, 500);
    let back: Vec<TelemetryReport> = read_sink_file(&path).unwrap().iter().map(|e| e.to_report()).collect();
    assert_eq!(back, reports);
}

fn bind() -> UdpIngest {
    UdpIngest::bind((Ipv4Addr::LOCALHOST, 0)).unwrap()
}

/// Sends in small bursts so the loopback receive buffer never overflows on
/// a single core.
fn send_all(sock: &UdpSocket, to: std::net::SocketAddr, frames: &[Vec<u8>]) {
    for (i, f) in frames.iter().enumerate() {
        sock.send_to(f, to).unwrap();
        if i % 64 == 63 {
            thread::sleep(Duration::from_millis(1));
        }
    }
}

#[test]
fn udp_ten_thousand_datagrams() {
    let reports = synthetic_reports(TRACE_MASK, 2, 10_000, 5);
    let mut frames: Vec<Vec<u8>> = reports.iter().map(|r| r.encode().unwrap()).collect();
    // every 100th datagram is truncated
    for f in frames.iter_mut().step_by(100) {
        f.truncate(20);
    }
    let valid: Vec<TelemetryReport> = reports
        .iter()
        .enumerate()
        .filter(|(i, _)| i % 100 != 0)
        .map(|(_, r)| r.clone())
        .collect();
    let ingest = bind();
    let addr = ingest.local_addr().unwrap();
    let mut ingest = ingest.max_frames(Some(10_000)).idle_limit(Some(Duration::from_secs(5)));
    let collector = thread::spawn(move || collect(&mut ingest, MemorySink::default(), CollectorOptions::default()));
    let sock = UdpSocket::bind((Ipv4Addr::LOCALHOST, 0)).unwrap();
    send_all(&sock, addr, &frames);
    let (stats, sink) = collector.join().unwrap();
    assert_eq!(stats.received, 10_000);
    assert_eq!(stats.parse_errors, 100);
    assert_eq!(stats.forwarded, 9_900);
    assert!(stats.conserved());
    let got: Vec<TelemetryReport> = sink.messages.iter().map(|m| m.event().unwrap().to_report()).collect();
    assert_eq!(got, valid);
}

#[test]
fn two_collector_instances_share_a_stream() {
    let reports = synthetic_reports(InstructionBitmask(0xFF), 1, 4_000, 9);
    let frames: Vec<Vec<u8>> = reports.iter().map(|r| r.encode().unwrap()).collect();
    let mut handles = Vec::new();
    let mut addrs = Vec::new();
    for id in 0..2u32 {
        let ingest = bind();
        addrs.push(ingest.local_addr().unwrap());
        let mut ingest = ingest.max_frames(Some(2_000)).idle_limit(Some(Duration::from_secs(5)));
        let opts = CollectorOptions {
            collector_id: id,
            ..CollectorOptions::default()
        };
        handles.push(thread::spawn(move || collect(&mut ingest, MemorySink::default(), opts)));
    }
    let sock = UdpSocket::bind((Ipv4Addr::LOCALHOST, 0)).unwrap();
    let (even, odd): (Vec<_>, Vec<_>) = frames.iter().cloned().enumerate().partition(|(i, _)| i % 2 == 0);
    let split = [even, odd].map(|v| v.into_iter().map(|(_, f)| f).collect::<Vec<_>>());
    for (chunk_a, chunk_b) in split[0].chunks(64).zip(split[1].chunks(64)) {
        send_all(&sock, addrs[0], chunk_a);
        send_all(&sock, addrs[1], chunk_b);
    }
    let mut total = 0;
    for (id, h) in handles.into_iter().enumerate() {
        let (stats, sink) = h.join().unwrap();
        assert_eq!(stats.forwarded, 2_000);
        assert!(stats.conserved());
        total += stats.forwarded;
        for (k, m) in sink.messages.iter().enumerate() {
            let e = m.event().unwrap();
            assert_eq!(e.collector_id, id as u32);
            assert_eq!(e.to_report(), reports[2 * k + id]);
        }
    }
    assert_eq!(total, 4_000);
}
