//! Wire formats for the in-band INT header stack and the sink telemetry report.
//!
//! Every telemetry item occupies one big-endian 32-bit word. The port pair is
//! packed as ingress (high 16 bits) and egress (low 16 bits). Within a hop the
//! words follow instruction-bit order, most significant bit first. Hop stacks
//! are stored newest hop first.
//!
//! In-band header stack:
//! ```text
//!  0                   1                   2                   3
//!  0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
//! +---------------+---------------+-------------------------------+
//! |  type (0x01)  | length_words  |           reserved            |
//! +---------------+---------------+---------------+---------------+
//! |     mask      |   hop_count   |   max_hops    |   reserved    |
//! +---------------+---------------+---------------+---------------+
//! |        hop_count x popcount(mask) metadata words ...          |
//! ```
//! `length_words` counts the whole stack including the shim and md header.
//!
//! Telemetry report (33 fixed bytes, then the hop stack):
//! ```text
//! +-------+-----------+-----------+---------------+---------------+
//! |  ver  |   hw_id   |    pad    | length_words  |   reserved    |
//! +-------+-----------+-----------+---------------+---------------+
//! |                            seq_no                             |
//! |                         sink_node_id                          |
//! |                           report_ts                           |
//! |                            src_ip                             |
//! |                            dst_ip                             |
//! |           src_port            |           dst_port            |
//! +---------------+---------------+---------------+---------------+
//! |     proto     |     mask      |   hop_count   |   max_hops    |
//! +---------------+---------------+---------------+---------------+
//! |  md reserved  |  hop_count x popcount(mask) metadata words ...
//! ```
//! Here `length_words` counts only the metadata words of the hop stack.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REPORT_VERSION: u8 = 1;
pub const SHIM_TYPE: u8 = 0x01;
pub const FLOW_KEY_LEN: usize = 13;
/// Report header (16) + flow key (13) + md header (4).
pub const REPORT_FIXED_LEN: usize = 16 + FLOW_KEY_LEN + 4;
/// Shim (4) + md header (4).
pub const STACK_FIXED_LEN: usize = 8;
pub const DEFAULT_MAX_HOPS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("truncated buffer: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unsupported report version {0}")]
    BadVersion(u8),
    #[error("unexpected shim type {0:#04x}")]
    BadShimType(u8),
    #[error("length_words {declared} does not match {expected} implied by hop_count x popcount(mask)")]
    LengthWordsMismatch { declared: usize, expected: usize },
    #[error("buffer length {actual} does not match declared length {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("hop_count {hop_count} exceeds max_hops {max_hops}")]
    HopCountExceedsMax { hop_count: usize, max_hops: u8 },
    #[error("INT stack full at {max_hops} hops")]
    StackOverflow { max_hops: u8 },
    #[error("hop {index} disagrees with instruction mask {mask}")]
    MaskMismatch { index: usize, mask: InstructionBitmask },
    #[error("{field} value {value} does not fit its wire width")]
    FieldRange { field: &'static str, value: u64 },
}

/// One of the eight instruction slots, in bit order from MSB to LSB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataKind {
    SwitchId,
    PortIds,
    HopLatency,
    QueueOccupancy,
    IngressTimestamp,
    EgressTimestamp,
    QueueCongestion,
    TxUtilization,
}

impl MetadataKind {
    pub const ALL: [MetadataKind; 8] = [
        MetadataKind::SwitchId,
        MetadataKind::PortIds,
        MetadataKind::HopLatency,
        MetadataKind::QueueOccupancy,
        MetadataKind::IngressTimestamp,
        MetadataKind::EgressTimestamp,
        MetadataKind::QueueCongestion,
        MetadataKind::TxUtilization,
    ];

    /// Index into a hop's value array; 0 is the most significant mask bit.
    pub const fn slot(self) -> usize {
        self as usize
    }

    pub const fn bit(self) -> u8 {
        0x80 >> self.slot()
    }

    pub fn from_slot(slot: usize) -> Option<Self> {
        Self::ALL.get(slot).copied()
    }

    pub const fn name(self) -> &'static str {
        match self {
            MetadataKind::SwitchId => "switch_id",
            MetadataKind::PortIds => "port_ids",
            MetadataKind::HopLatency => "hop_latency",
            MetadataKind::QueueOccupancy => "queue_occupancy",
            MetadataKind::IngressTimestamp => "ingress_timestamp",
            MetadataKind::EgressTimestamp => "egress_timestamp",
            MetadataKind::QueueCongestion => "queue_congestion",
            MetadataKind::TxUtilization => "tx_utilization",
        }
    }
}

impl fmt::Display for MetadataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown metadata item `{0}`")]
pub struct UnknownMetadata(pub String);

impl FromStr for MetadataKind {
    type Err = UnknownMetadata;

    /// Accepts canonical names plus a few spellings operators tend to use
    /// (`hop-latency`, `queue_buildup`, ...). Matching ignores `-` vs `_`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        let kind = match norm.as_str() {
            "switch_id" | "switch" => MetadataKind::SwitchId,
            "port_ids" | "ports" => MetadataKind::PortIds,
            "hop_latency" | "latency" => MetadataKind::HopLatency,
            "queue_occupancy" | "queue_buildup" | "queue" => MetadataKind::QueueOccupancy,
            "ingress_timestamp" | "ingress_ts" => MetadataKind::IngressTimestamp,
            "egress_timestamp" | "egress_ts" => MetadataKind::EgressTimestamp,
            "queue_congestion" | "queue_congestion_status" => MetadataKind::QueueCongestion,
            "tx_utilization" | "egress_port_tx_utilization" => MetadataKind::TxUtilization,
            _ => return Err(UnknownMetadata(s.to_string())),
        };
        Ok(kind)
    }
}

/// Which telemetry items every hop appends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstructionBitmask(pub u8);

impl InstructionBitmask {
    pub const EMPTY: Self = Self(0);
    pub const ALL: Self = Self(0xFF);

    pub fn from_kinds(kinds: impl IntoIterator<Item = MetadataKind>) -> Self {
        Self(kinds.into_iter().fold(0, |acc, k| acc | k.bit()))
    }

    /// Mask holding the first `n` slots in bit order (`n` clamped to 8).
    pub fn first_n(n: usize) -> Self {
        Self::from_kinds(MetadataKind::ALL.into_iter().take(n))
    }

    pub const fn contains(self, kind: MetadataKind) -> bool {
        self.0 & kind.bit() != 0
    }

    pub const fn item_count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Set items, most significant bit first.
    pub fn kinds(self) -> impl Iterator<Item = MetadataKind> {
        MetadataKind::ALL.into_iter().filter(move |k| self.contains(*k))
    }
}

impl fmt::Display for InstructionBitmask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#04x}", self.0)
    }
}

/// Values one hop contributed; slot `i` corresponds to `MetadataKind::ALL[i]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HopMetadata {
    pub values: [Option<u32>; 8],
}

impl HopMetadata {
    pub fn get(&self, kind: MetadataKind) -> Option<u32> {
        self.values[kind.slot()]
    }

    pub fn set(&mut self, kind: MetadataKind, value: u32) {
        self.values[kind.slot()] = Some(value);
    }

    pub fn with(mut self, kind: MetadataKind, value: u32) -> Self {
        self.set(kind, value);
        self
    }

    /// The mask this hop's present values correspond to.
    pub fn present_mask(&self) -> InstructionBitmask {
        InstructionBitmask::from_kinds(
            MetadataKind::ALL
                .into_iter()
                .filter(|k| self.values[k.slot()].is_some()),
        )
    }

    /// Keep only the items selected by `mask`; `None` if a selected item is missing.
    pub fn project(&self, mask: InstructionBitmask) -> Option<HopMetadata> {
        let mut out = HopMetadata::default();
        for kind in mask.kinds() {
            out.set(kind, self.get(kind)?);
        }
        Some(out)
    }
}

pub fn pack_ports(ingress: u16, egress: u16) -> u32 {
    (u32::from(ingress) << 16) | u32::from(egress)
}

pub fn unpack_ports(word: u32) -> (u16, u16) {
    ((word >> 16) as u16, word as u16)
}

/// Instruction header shared by the in-band stack and the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MdHeader {
    pub mask: InstructionBitmask,
    pub max_hops: u8,
    pub reserved: u8,
}

impl MdHeader {
    pub fn new(mask: InstructionBitmask, max_hops: u8) -> Self {
        Self {
            mask,
            max_hops,
            reserved: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: u8,
}

impl FlowKey {
    pub fn new(src_ip: Ipv4Addr, dst_ip: Ipv4Addr, src_port: u16, dst_port: u16, proto: u8) -> Self {
        Self {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            proto,
        }
    }

    pub fn to_bytes(&self) -> [u8; FLOW_KEY_LEN] {
        let mut out = [0u8; FLOW_KEY_LEN];
        out[0..4].copy_from_slice(&self.src_ip.octets());
        out[4..8].copy_from_slice(&self.dst_ip.octets());
        out[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        out[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        out[12] = self.proto;
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, WireError> {
        check_len(buf, FLOW_KEY_LEN)?;
        Ok(Self {
            src_ip: Ipv4Addr::new(buf[0], buf[1], buf[2], buf[3]),
            dst_ip: Ipv4Addr::new(buf[4], buf[5], buf[6], buf[7]),
            src_port: u16::from_be_bytes([buf[8], buf[9]]),
            dst_port: u16::from_be_bytes([buf[10], buf[11]]),
            proto: buf[12],
        })
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.proto
        )
    }
}

fn check_len(buf: &[u8], needed: usize) -> Result<(), WireError> {
    if buf.len() < needed {
        Err(WireError::Truncated {
            needed,
            available: buf.len(),
        })
    } else {
        Ok(())
    }
}

#[inline]
fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

fn validate_hops(md: &MdHeader, hops: &[HopMetadata]) -> Result<(), WireError> {
    if hops.len() > usize::from(md.max_hops) {
        return Err(WireError::HopCountExceedsMax {
            hop_count: hops.len(),
            max_hops: md.max_hops,
        });
    }
    for (index, hop) in hops.iter().enumerate() {
        if hop.present_mask() != md.mask {
            return Err(WireError::MaskMismatch {
                index,
                mask: md.mask,
            });
        }
    }
    Ok(())
}

fn encode_hops(mask: InstructionBitmask, hops: &[HopMetadata], out: &mut Vec<u8>) {
    for hop in hops {
        for kind in mask.kinds() {
            // validated by caller
            let v = hop.values[kind.slot()].unwrap_or_default();
            out.extend_from_slice(&v.to_be_bytes());
        }
    }
}

/// Decode `hop_count` hops; walks all eight instruction slots for every hop.
fn decode_hops(mask: InstructionBitmask, hop_count: usize, buf: &[u8]) -> Vec<HopMetadata> {
    let mut hops = Vec::with_capacity(hop_count);
    let mut at = 0;
    for _ in 0..hop_count {
        let mut hop = HopMetadata::default();
        for slot in 0..8 {
            if mask.0 & (0x80 >> slot) != 0 {
                hop.values[slot] = Some(read_u32(buf, at));
                at += 4;
            }
        }
        hops.push(hop);
    }
    hops
}

/// The INT header stack carried in-band between source and sink.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntHeaderStack {
    pub shim_reserved: u16,
    pub md: MdHeader,
    /// Newest hop first.
    pub hops: Vec<HopMetadata>,
}

impl IntHeaderStack {
    pub fn new(mask: InstructionBitmask, max_hops: u8) -> Self {
        Self {
            shim_reserved: 0,
            md: MdHeader::new(mask, max_hops),
            hops: Vec::new(),
        }
    }

    pub fn mask(&self) -> InstructionBitmask {
        self.md.mask
    }

    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    pub fn is_full(&self) -> bool {
        self.hops.len() >= usize::from(self.md.max_hops)
    }

    /// Shim + md header + metadata words, in 4-byte words.
    pub fn length_words(&self) -> usize {
        2 + self.hops.len() * self.md.mask.item_count()
    }

    pub fn encoded_len(&self) -> usize {
        self.length_words() * 4
    }

    /// Prepend `hop`. On error the stack is left untouched.
    pub fn push_hop(&mut self, hop: HopMetadata) -> Result<(), WireError> {
        if self.is_full() {
            return Err(WireError::StackOverflow {
                max_hops: self.md.max_hops,
            });
        }
        if hop.present_mask() != self.md.mask {
            return Err(WireError::MaskMismatch {
                index: 0,
                mask: self.md.mask,
            });
        }
        if 2 + (self.hops.len() + 1) * self.md.mask.item_count() > usize::from(u8::MAX) {
            return Err(WireError::FieldRange {
                field: "length_words",
                value: (2 + (self.hops.len() + 1) * self.md.mask.item_count()) as u64,
            });
        }
        self.hops.insert(0, hop);
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), WireError> {
        validate_hops(&self.md, &self.hops)?;
        let words = self.length_words();
        let length_words = u8::try_from(words).map_err(|_| WireError::FieldRange {
            field: "length_words",
            value: words as u64,
        })?;
        out.push(SHIM_TYPE);
        out.push(length_words);
        out.extend_from_slice(&self.shim_reserved.to_be_bytes());
        out.extend_from_slice(&[
            self.md.mask.0,
            self.hops.len() as u8,
            self.md.max_hops,
            self.md.reserved,
        ]);
        encode_hops(self.md.mask, &self.hops, out);
        Ok(())
    }

    /// Parse a stack from the front of `buf`, returning it and the bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), WireError> {
        check_len(buf, STACK_FIXED_LEN)?;
        if buf[0] != SHIM_TYPE {
            return Err(WireError::BadShimType(buf[0]));
        }
        let declared = usize::from(buf[1]);
        let shim_reserved = u16::from_be_bytes([buf[2], buf[3]]);
        let md = MdHeader {
            mask: InstructionBitmask(buf[4]),
            max_hops: buf[6],
            reserved: buf[7],
        };
        let hop_count = usize::from(buf[5]);
        if hop_count > usize::from(md.max_hops) {
            return Err(WireError::HopCountExceedsMax {
                hop_count,
                max_hops: md.max_hops,
            });
        }
        let expected = 2 + hop_count * md.mask.item_count();
        if declared != expected {
            return Err(WireError::LengthWordsMismatch { declared, expected });
        }
        let total = expected * 4;
        check_len(buf, total)?;
        let hops = decode_hops(md.mask, hop_count, &buf[STACK_FIXED_LEN..total]);
        Ok((
            Self {
                shim_reserved,
                md,
                hops,
            },
            total,
        ))
    }
}

/// Report emitted by an INT sink when the detector marks an event.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TelemetryReport {
    /// 6 bits.
    pub hw_id: u8,
    /// 6 bits, carried as-is.
    pub pad: u8,
    pub reserved: u8,
    pub seq_no: u32,
    pub sink_node_id: u32,
    /// Sink ingress time, microseconds.
    pub report_ts: u32,
    pub flow_key: FlowKey,
    pub md: MdHeader,
    /// Newest hop first.
    pub hops: Vec<HopMetadata>,
}

impl TelemetryReport {
    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    pub fn stack_words(&self) -> usize {
        self.hops.len() * self.md.mask.item_count()
    }

    pub fn encoded_len(&self) -> usize {
        REPORT_FIXED_LEN + self.stack_words() * 4
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), WireError> {
        if self.hw_id > 0x3F {
            return Err(WireError::FieldRange {
                field: "hw_id",
                value: u64::from(self.hw_id),
            });
        }
        if self.pad > 0x3F {
            return Err(WireError::FieldRange {
                field: "pad",
                value: u64::from(self.pad),
            });
        }
        validate_hops(&self.md, &self.hops)?;
        let words = self.stack_words();
        let length_words = u8::try_from(words).map_err(|_| WireError::FieldRange {
            field: "length_words",
            value: words as u64,
        })?;
        let first = (u16::from(REPORT_VERSION) << 12)
            | (u16::from(self.hw_id) << 6)
            | u16::from(self.pad);
        out.extend_from_slice(&first.to_be_bytes());
        out.push(length_words);
        out.push(self.reserved);
        out.extend_from_slice(&self.seq_no.to_be_bytes());
        out.extend_from_slice(&self.sink_node_id.to_be_bytes());
        out.extend_from_slice(&self.report_ts.to_be_bytes());
        out.extend_from_slice(&self.flow_key.to_bytes());
        out.extend_from_slice(&[
            self.md.mask.0,
            self.hops.len() as u8,
            self.md.max_hops,
            self.md.reserved,
        ]);
        encode_hops(self.md.mask, &self.hops, out);
        Ok(())
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        check_len(buf, REPORT_FIXED_LEN)?;
        let first = u16::from_be_bytes([buf[0], buf[1]]);
        let version = (first >> 12) as u8;
        if version != REPORT_VERSION {
            return Err(WireError::BadVersion(version));
        }
        let hw_id = ((first >> 6) & 0x3F) as u8;
        let pad = (first & 0x3F) as u8;
        let declared = usize::from(buf[2]);
        let reserved = buf[3];
        let seq_no = read_u32(buf, 4);
        let sink_node_id = read_u32(buf, 8);
        let report_ts = read_u32(buf, 12);
        let flow_key = FlowKey::from_bytes(&buf[16..29])?;
        let md = MdHeader {
            mask: InstructionBitmask(buf[29]),
            max_hops: buf[31],
            reserved: buf[32],
        };
        let hop_count = usize::from(buf[30]);
        if hop_count > usize::from(md.max_hops) {
            return Err(WireError::HopCountExceedsMax {
                hop_count,
                max_hops: md.max_hops,
            });
        }
        let expected = hop_count * md.mask.item_count();
        if declared != expected {
            return Err(WireError::LengthWordsMismatch { declared, expected });
        }
        let total = REPORT_FIXED_LEN + expected * 4;
        if buf.len() != total {
            return Err(WireError::LengthMismatch {
                expected: total,
                actual: buf.len(),
            });
        }
        let hops = decode_hops(md.mask, hop_count, &buf[REPORT_FIXED_LEN..]);
        Ok(Self {
            hw_id,
            pad,
            reserved,
            seq_no,
            sink_node_id,
            report_ts,
            flow_key,
            md,
            hops,
        })
    }
}

pub fn encode_report(report: &TelemetryReport) -> Result<Vec<u8>, WireError> {
    report.encode()
}

pub fn decode_report(buf: &[u8]) -> Result<TelemetryReport, WireError> {
    TelemetryReport::decode(buf)
}

/// Hex dump, 16 bytes per line, as used by the golden vector files.
pub fn to_hex_lines(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 3);
    for chunk in bytes.chunks(16) {
        let line: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Inverse of [`to_hex_lines`]; ignores whitespace and `#` comments.
pub fn from_hex_lines(text: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            let b = u8::from_str_radix(tok, 16)
                .map_err(|e| format!("line {}: bad byte `{tok}`: {e}", lineno + 1))?;
            out.push(b);
        }
    }
    Ok(out)
}
