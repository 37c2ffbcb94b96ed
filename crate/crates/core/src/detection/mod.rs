//! Event pre-filtering run at the INT sink.
//!
//! Everything here follows data-plane rules: unsigned 32-bit integer
//! arithmetic, loops bounded by the hop stack, and fixed-size register
//! arrays indexed by switch id or flow hash. Collisions share a register.
//! A register is written only when its algorithm marks an event (the moving
//! average can opt out of that via [`AlgorithmConfig::always_update_average`]).

pub mod cnf;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::int_wire::{FlowKey, HopMetadata, MetadataKind};

pub use cnf::{
    eval_cnf, Aggregate, CnfError, CnfExpression, Comparator, ExpressionRegisters, Literal,
    MAX_CLAUSES, MAX_LITERALS,
};

pub const DEFAULT_SWITCH_REGS: usize = 256;
pub const DEFAULT_FLOW_REGS: usize = 65536;
/// Fixed-point denominator for the moving-average weight.
pub const ALPHA_DENOM: u32 = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DetectionError {
    #[error("alpha_num {0} exceeds {ALPHA_DENOM}")]
    AlphaRange(u16),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("register table size must be nonzero")]
    EmptyRegisters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AlgorithmKind {
    Noop,
    PerHop,
    PerFlow,
    MovingAverage,
    Complex,
    /// An algorithm-table entry carrying an action id this pipeline does not know.
    Unknown(u8),
}

impl AlgorithmKind {
    pub fn name(self) -> String {
        match self {
            AlgorithmKind::Noop => "noop".into(),
            AlgorithmKind::PerHop => "per_hop".into(),
            AlgorithmKind::PerFlow => "per_flow".into(),
            AlgorithmKind::MovingAverage => "moving_average".into(),
            AlgorithmKind::Complex => "complex".into(),
            AlgorithmKind::Unknown(id) => format!("unknown({id})"),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            AlgorithmKind::Noop => 0,
            AlgorithmKind::PerHop => 1,
            AlgorithmKind::PerFlow => 2,
            AlgorithmKind::MovingAverage => 3,
            AlgorithmKind::Complex => 4,
            AlgorithmKind::Unknown(id) => id,
        }
    }

    pub fn from_id(id: u8) -> Self {
        match id {
            0 => AlgorithmKind::Noop,
            1 => AlgorithmKind::PerHop,
            2 => AlgorithmKind::PerFlow,
            3 => AlgorithmKind::MovingAverage,
            4 => AlgorithmKind::Complex,
            other => AlgorithmKind::Unknown(other),
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = DetectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "noop" | "none" => Ok(AlgorithmKind::Noop),
            "per_hop" => Ok(AlgorithmKind::PerHop),
            "per_flow" => Ok(AlgorithmKind::PerFlow),
            "moving_average" | "ewma" => Ok(AlgorithmKind::MovingAverage),
            "complex" => Ok(AlgorithmKind::Complex),
            _ => Err(DetectionError::UnknownAlgorithm(s.to_string())),
        }
    }
}

impl TryFrom<String> for AlgorithmKind {
    type Error = DetectionError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AlgorithmKind> for String {
    fn from(k: AlgorithmKind) -> String {
        k.name()
    }
}

/// Parameters of the `fast_detection` / `complex_detection` action for one flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AlgorithmConfig {
    pub kind: AlgorithmKind,
    pub metadata: MetadataKind,
    /// Same unit as the observed item.
    pub threshold: u32,
    /// Weight of the new sample, over 256.
    pub alpha_num: u16,
    pub expr_index: u32,
    pub always_update_average: bool,
}

impl AlgorithmConfig {
    fn base(kind: AlgorithmKind, metadata: MetadataKind, threshold: u32) -> Self {
        Self {
            kind,
            metadata,
            threshold,
            alpha_num: ALPHA_DENOM as u16,
            expr_index: 0,
            always_update_average: false,
        }
    }

    pub fn noop() -> Self {
        Self::base(AlgorithmKind::Noop, MetadataKind::QueueOccupancy, 0)
    }

    pub fn per_hop(metadata: MetadataKind, threshold: u32) -> Self {
        Self::base(AlgorithmKind::PerHop, metadata, threshold)
    }

    pub fn per_flow(metadata: MetadataKind, threshold: u32) -> Self {
        Self::base(AlgorithmKind::PerFlow, metadata, threshold)
    }

    pub fn moving_average(metadata: MetadataKind, threshold: u32, alpha_num: u16) -> Self {
        Self {
            alpha_num,
            ..Self::base(AlgorithmKind::MovingAverage, metadata, threshold)
        }
    }

    pub fn complex(expr_index: u32) -> Self {
        Self {
            expr_index,
            ..Self::base(AlgorithmKind::Complex, MetadataKind::QueueOccupancy, 0)
        }
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        if u32::from(self.alpha_num) > ALPHA_DENOM {
            return Err(DetectionError::AlphaRange(self.alpha_num));
        }
        if let AlgorithmKind::Unknown(id) = self.kind {
            return Err(DetectionError::UnknownAlgorithm(format!("id {id}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Verdict {
    pub event: bool,
    /// The value the decision was based on.
    pub observed: u32,
}

impl Verdict {
    pub const fn event(observed: u32) -> Self {
        Self {
            event: true,
            observed,
        }
    }

    pub const fn quiet(observed: u32) -> Self {
        Self {
            event: false,
            observed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterSizes {
    pub switch_regs: usize,
    pub flow_regs: usize,
}

impl Default for RegisterSizes {
    fn default() -> Self {
        Self {
            switch_regs: DEFAULT_SWITCH_REGS,
            flow_regs: DEFAULT_FLOW_REGS,
        }
    }
}

#[inline]
fn abs_diff(a: u32, b: u32) -> u32 {
    if a >= b {
        a - b
    } else {
        b - a
    }
}

/// CRC-32 of the 13-byte flow key.
pub fn flow_hash(flow: &FlowKey) -> u32 {
    crc32fast::hash(&flow.to_bytes())
}

/// Register tables of one sink. Zero-initialised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorState {
    per_hop: Vec<u32>,
    per_flow: Vec<u32>,
    average: Vec<u32>,
    anomalies: u64,
}

impl Default for DetectorState {
    fn default() -> Self {
        Self::new(RegisterSizes::default()).expect("default sizes are nonzero")
    }
}

impl DetectorState {
    pub fn new(sizes: RegisterSizes) -> Result<Self, DetectionError> {
        if sizes.switch_regs == 0 || sizes.flow_regs == 0 {
            return Err(DetectionError::EmptyRegisters);
        }
        Ok(Self {
            per_hop: vec![0; sizes.switch_regs],
            per_flow: vec![0; sizes.flow_regs],
            average: vec![0; sizes.flow_regs],
            anomalies: 0,
        })
    }

    pub fn sizes(&self) -> RegisterSizes {
        RegisterSizes {
            switch_regs: self.per_hop.len(),
            flow_regs: self.per_flow.len(),
        }
    }

    pub fn per_hop_regs(&self) -> &[u32] {
        &self.per_hop
    }

    pub fn per_flow_regs(&self) -> &[u32] {
        &self.per_flow
    }

    pub fn average_regs(&self) -> &[u32] {
        &self.average
    }

    pub fn anomalies(&self) -> u64 {
        self.anomalies
    }

    pub fn flow_index(&self, flow: &FlowKey) -> usize {
        flow_hash(flow) as usize % self.per_flow.len()
    }

    /// Register index for the hop at `position` (0 = newest). Keyed by
    /// switch id when the mask carries it, else by distance from the source.
    fn hop_index(&self, hop: &HopMetadata, position: usize, hop_count: usize) -> usize {
        let key = hop
            .get(MetadataKind::SwitchId)
            .unwrap_or((hop_count - 1 - position) as u32);
        key as usize % self.per_hop.len()
    }

    pub fn detect_per_hop(&mut self, hops: &[HopMetadata], cfg: &AlgorithmConfig) -> Verdict {
        let mut verdict: Option<Verdict> = None;
        let mut newest = None;
        for (pos, hop) in hops.iter().enumerate() {
            let Some(value) = hop.get(cfg.metadata) else {
                continue;
            };
            newest.get_or_insert(value);
            let idx = self.hop_index(hop, pos, hops.len());
            if abs_diff(value, self.per_hop[idx]) > cfg.threshold {
                self.per_hop[idx] = value;
                verdict.get_or_insert(Verdict::event(value));
            }
        }
        verdict.unwrap_or(Verdict::quiet(newest.unwrap_or(0)))
    }

    pub fn detect_per_flow(
        &mut self,
        flow: &FlowKey,
        hops: &[HopMetadata],
        cfg: &AlgorithmConfig,
    ) -> Verdict {
        let Some(sum) = Aggregate::Sum.fold(cfg.metadata, hops) else {
            return Verdict::quiet(0);
        };
        let idx = self.flow_index(flow);
        if abs_diff(sum, self.per_flow[idx]) > cfg.threshold {
            self.per_flow[idx] = sum;
            Verdict::event(sum)
        } else {
            Verdict::quiet(sum)
        }
    }

    pub fn detect_moving_average(
        &mut self,
        flow: &FlowKey,
        hops: &[HopMetadata],
        cfg: &AlgorithmConfig,
    ) -> Verdict {
        let Some(sum) = Aggregate::Sum.fold(cfg.metadata, hops) else {
            return Verdict::quiet(0);
        };
        let idx = self.flow_index(flow);
        let avg = self.average[idx];
        let alpha = u64::from(cfg.alpha_num.min(ALPHA_DENOM as u16));
        let next = ((alpha * u64::from(sum) + (u64::from(ALPHA_DENOM) - alpha) * u64::from(avg))
            / u64::from(ALPHA_DENOM)) as u32;
        let event = abs_diff(next, avg) > cfg.threshold;
        if event || cfg.always_update_average {
            self.average[idx] = next;
        }
        Verdict { event, observed: next }
    }

    /// Dispatch to the configured algorithm. Unknown algorithms and unreadable
    /// expression registers never raise an event and bump the anomaly counter.
    pub fn evaluate(
        &mut self,
        flow: &FlowKey,
        hops: &[HopMetadata],
        cfg: &AlgorithmConfig,
        expressions: &ExpressionRegisters,
    ) -> Verdict {
        match cfg.kind {
            AlgorithmKind::Noop => detect_noop(),
            AlgorithmKind::PerHop => self.detect_per_hop(hops, cfg),
            AlgorithmKind::PerFlow => self.detect_per_flow(flow, hops, cfg),
            AlgorithmKind::MovingAverage => self.detect_moving_average(flow, hops, cfg),
            AlgorithmKind::Complex => match expressions.read(cfg.expr_index as usize) {
                Some(Ok(expr)) => eval_cnf(&expr, hops),
                _ => {
                    self.anomalies += 1;
                    Verdict::quiet(0)
                }
            },
            AlgorithmKind::Unknown(_) => {
                self.anomalies += 1;
                Verdict::quiet(0)
            }
        }
    }
}

pub fn detect_noop() -> Verdict {
    Verdict::event(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::Ipv4Addr;

    const Q: MetadataKind = MetadataKind::QueueOccupancy;

    fn flow(n: u8) -> FlowKey {
        FlowKey::new(Ipv4Addr::new(10, 0, 0, n), Ipv4Addr::new(10, 0, 1, 1), 1000, 80, 6)
    }

    fn hop(switch: u32, q: u32) -> HopMetadata {
        HopMetadata::default()
            .with(MetadataKind::SwitchId, switch)
            .with(Q, q)
    }

    fn qhops(values: &[u32]) -> Vec<HopMetadata> {
        values.iter().map(|&v| HopMetadata::default().with(Q, v)).collect()
    }

    #[test]
    fn per_hop_threshold_steps() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::per_hop(Q, 100);
        assert_eq!(st.detect_per_hop(&[hop(1, 150)], &cfg), Verdict::event(150));
        assert_eq!(st.per_hop_regs()[1], 150);
        assert_eq!(st.detect_per_hop(&[hop(1, 180)], &cfg), Verdict::quiet(180));
        assert_eq!(st.per_hop_regs()[1], 150);
    }

    #[test]
    fn per_hop_updates_every_triggered_register() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::per_hop(Q, 10);
        let v = st.detect_per_hop(&[hop(3, 5), hop(2, 50), hop(1, 60)], &cfg);
        assert_eq!(v, Verdict::event(50));
        assert_eq!(&st.per_hop_regs()[1..4], &[60, 50, 0]);
    }

    #[test]
    fn per_hop_without_switch_id_keys_by_position() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::per_hop(Q, 0);
        // newest first: oldest hop (position from source 0) holds 7
        st.detect_per_hop(&qhops(&[9, 7]), &cfg);
        assert_eq!(&st.per_hop_regs()[..2], &[7, 9]);
    }

    #[test]
    fn per_hop_skips_missing_values() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::per_hop(MetadataKind::HopLatency, 0);
        assert_eq!(st.detect_per_hop(&[hop(1, 500)], &cfg), Verdict::quiet(0));
        assert!(st.per_hop_regs().iter().all(|&r| r == 0));
    }

    #[test]
    fn per_flow_sums_hops() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::per_flow(Q, 100);
        let hops = qhops(&[40, 30, 50]);
        assert_eq!(st.detect_per_flow(&flow(1), &hops, &cfg), Verdict::event(120));
        assert_eq!(st.per_flow_regs()[st.flow_index(&flow(1))], 120);
        assert_eq!(st.detect_per_flow(&flow(1), &hops, &cfg), Verdict::quiet(120));
    }

    #[test]
    fn per_flow_threshold_zero_is_strict() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::per_flow(Q, 0);
        let seq = [0, 0, 5, 5, 6, 0];
        let events: Vec<bool> = seq
            .iter()
            .map(|&v| st.detect_per_flow(&flow(1), &qhops(&[v]), &cfg).event)
            .collect();
        assert_eq!(events, vec![false, false, true, false, true, true]);
    }

    #[test]
    fn per_flow_wraps_on_overflow() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::per_flow(Q, 0);
        let v = st.detect_per_flow(&flow(1), &qhops(&[u32::MAX, 2]), &cfg);
        assert_eq!(v, Verdict::event(1));
    }

    #[test]
    fn moving_average_arithmetic() {
        let mut st = DetectorState::default();
        let idx = st.flow_index(&flow(1));
        st.average[idx] = 100;
        let cfg = AlgorithmConfig::moving_average(Q, 40, 128);
        assert_eq!(
            st.detect_moving_average(&flow(1), &qhops(&[200]), &cfg),
            Verdict::event(150)
        );
        assert_eq!(st.average_regs()[idx], 150);
        // diff 25 <= 40: register untouched
        assert_eq!(
            st.detect_moving_average(&flow(1), &qhops(&[200]), &cfg),
            Verdict::quiet(175)
        );
        assert_eq!(st.average_regs()[idx], 150);
    }

    #[test]
    fn moving_average_truncates() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::moving_average(Q, 0, 1);
        // (1*255 + 255*0) / 256 = 0
        assert_eq!(
            st.detect_moving_average(&flow(1), &qhops(&[255]), &cfg),
            Verdict::quiet(0)
        );
        assert_eq!(
            st.detect_moving_average(&flow(1), &qhops(&[256]), &cfg),
            Verdict::event(1)
        );
    }

    #[test]
    fn moving_average_alpha_zero_never_fires() {
        let mut st = DetectorState::default();
        let cfg = AlgorithmConfig::moving_average(Q, 0, 0);
        for v in [0, 10, u32::MAX, 7] {
            assert!(!st.detect_moving_average(&flow(2), &qhops(&[v]), &cfg).event);
        }
    }

    #[test]
    fn moving_average_always_update_flag() {
        let mut st = DetectorState::default();
        let mut cfg = AlgorithmConfig::moving_average(Q, 1000, 128);
        cfg.always_update_average = true;
        let v = st.detect_moving_average(&flow(1), &qhops(&[200]), &cfg);
        assert!(!v.event);
        assert_eq!(st.average_regs()[st.flow_index(&flow(1))], 100);
    }

    #[test]
    fn colliding_flows_share_a_register() {
        let mut st = DetectorState::new(RegisterSizes {
            switch_regs: 4,
            flow_regs: 1,
        })
        .unwrap();
        let cfg = AlgorithmConfig::per_flow(Q, 10);
        assert!(st.detect_per_flow(&flow(1), &qhops(&[50]), &cfg).event);
        assert!(!st.detect_per_flow(&flow(2), &qhops(&[55]), &cfg).event);
    }

    #[test]
    fn evaluate_dispatch_and_anomalies() {
        let mut st = DetectorState::default();
        let mut regs = ExpressionRegisters::default();
        let hops = [hop(1, 150)];
        assert!(st
            .evaluate(&flow(1), &hops, &AlgorithmConfig::noop(), &regs)
            .event);
        let complex = AlgorithmConfig::complex(0);
        assert!(!st.evaluate(&flow(1), &hops, &complex, &regs).event);
        assert_eq!(st.anomalies(), 1);
        regs.write(
            0,
            &CnfExpression::new(vec![vec![Literal::new(Q, Comparator::Gt, 100)]]).unwrap(),
        );
        assert!(st.evaluate(&flow(1), &hops, &complex, &regs).event);
        let mut unknown = AlgorithmConfig::noop();
        unknown.kind = AlgorithmKind::Unknown(42);
        assert!(!st.evaluate(&flow(1), &hops, &unknown, &regs).event);
        assert_eq!(st.anomalies(), 2);
    }

    #[test]
    fn algorithm_names_round_trip() {
        for id in 0..5 {
            let k = AlgorithmKind::from_id(id);
            assert_eq!(k.name().parse::<AlgorithmKind>().unwrap(), k);
            assert_eq!(k.id(), id);
        }
        assert!("magic".parse::<AlgorithmKind>().is_err());
        assert!(AlgorithmConfig::moving_average(Q, 1, 257).validate().is_err());
    }

    #[test]
    fn zero_sized_registers_rejected() {
        assert_eq!(
            DetectorState::new(RegisterSizes {
                switch_regs: 0,
                flow_regs: 1
            }),
            Err(DetectionError::EmptyRegisters)
        );
    }

    /// Dead-band filters are not threshold-monotone on arbitrary input.
    #[test]
    fn threshold_monotonicity_counterexample() {
        let count = |t| {
            let mut st = DetectorState::default();
            let cfg = AlgorithmConfig::per_flow(Q, t);
            [3, 6, 10, 2, 6]
                .iter()
                .filter(|&&v| st.detect_per_flow(&flow(1), &qhops(&[v]), &cfg).event)
                .count()
        };
        assert_eq!((count(5), count(6)), (1, 2));
    }
}
