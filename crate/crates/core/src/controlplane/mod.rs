//! Controller stand-in: per-flow role, instruction mask and detection
//! algorithm, installed through a library API or a JSON config document.
//!
//! Each switch reads its configuration through a [`ConfigCell`]. Writers build
//! a complete new [`SwitchConfig`] and swap it in; a pipeline takes one
//! snapshot per packet, so a packet never sees a half-applied update.

pub mod config;
pub mod expr;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataplane::forwarding::ForwardingTable;
use crate::detection::{
    AlgorithmConfig, AlgorithmKind, CnfExpression, DetectionError, ExpressionRegisters,
    RegisterSizes,
};
use crate::int_wire::{FlowKey, InstructionBitmask, DEFAULT_MAX_HOPS};

pub use config::{load_config, ConfigDocument, ConfigError};
pub use expr::{compile_expression, parse_expression, Ast, ExprError};

pub type SwitchId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchRole {
    Source,
    Transit,
    Sink,
    #[default]
    Off,
}

/// Per-field exact-or-any match on the 5-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_ip: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_ip: Option<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub src_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dst_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proto: Option<u8>,
}

impl FlowMatch {
    pub fn any() -> Self {
        Self::default()
    }

    pub fn exact(key: &FlowKey) -> Self {
        Self {
            src_ip: Some(key.src_ip),
            dst_ip: Some(key.dst_ip),
            src_port: Some(key.src_port),
            dst_port: Some(key.dst_port),
            proto: Some(key.proto),
        }
    }

    pub fn matches(&self, key: &FlowKey) -> bool {
        fn ok<T: PartialEq>(want: &Option<T>, have: &T) -> bool {
            want.as_ref().map_or(true, |w| w == have)
        }
        ok(&self.src_ip, &key.src_ip)
            && ok(&self.dst_ip, &key.dst_ip)
            && ok(&self.src_port, &key.src_port)
            && ok(&self.dst_port, &key.dst_port)
            && ok(&self.proto, &key.proto)
    }
}

/// One match-action entry: what a switch does for packets of a flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FlowConfig {
    pub matcher: FlowMatch,
    pub role: SwitchRole,
    /// Stamped by sources. On sinks, a non-empty mask declares which items
    /// arriving packets carry.
    pub mask: InstructionBitmask,
    pub algorithm: AlgorithmConfig,
    /// Higher wins when several rules match.
    pub priority: i32,
    pub max_hops: u8,
}

impl FlowConfig {
    pub fn new(matcher: FlowMatch, role: SwitchRole) -> Self {
        Self {
            matcher,
            role,
            mask: InstructionBitmask::EMPTY,
            algorithm: AlgorithmConfig::noop(),
            priority: 0,
            max_hops: DEFAULT_MAX_HOPS,
        }
    }

    pub fn with_mask(mut self, mask: InstructionBitmask) -> Self {
        self.mask = mask;
        self
    }

    pub fn with_algorithm(mut self, algorithm: AlgorithmConfig) -> Self {
        self.algorithm = algorithm;
        self
    }

    pub fn with_priority(mut self, priority: i32) -> Self {
        self.priority = priority;
        self
    }

    pub fn with_max_hops(mut self, max_hops: u8) -> Self {
        self.max_hops = max_hops;
        self
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        self.algorithm.validate()?;
        if self.role == SwitchRole::Source && self.mask.is_empty() {
            return Err(ControlError::InvalidRule(
                "source rule needs a non-empty instruction mask".into(),
            ));
        }
        if self.role == SwitchRole::Source && self.max_hops == 0 {
            return Err(ControlError::InvalidRule("source rule needs max_hops >= 1".into()));
        }
        let fast = matches!(
            self.algorithm.kind,
            AlgorithmKind::PerHop | AlgorithmKind::PerFlow | AlgorithmKind::MovingAverage
        );
        if fast && !self.mask.is_empty() && !self.mask.contains(self.algorithm.metadata) {
            return Err(ControlError::InvalidRule(format!(
                "algorithm observes {} but mask {} does not carry it",
                self.algorithm.metadata, self.mask
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("unknown switch {0}")]
    UnknownSwitch(SwitchId),
    #[error("a rule with the same match and priority {0} already exists")]
    DuplicateRule(i32),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error(transparent)]
    Algorithm(#[from] DetectionError),
    #[error("expression register {0} is not populated")]
    MissingExpression(u32),
}

/// Rules kept in descending priority; equal priorities keep install order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FlowTable {
    rules: Vec<FlowConfig>,
}

impl FlowTable {
    pub fn insert(&mut self, cfg: FlowConfig) -> Result<(), ControlError> {
        cfg.validate()?;
        if self
            .rules
            .iter()
            .any(|r| r.matcher == cfg.matcher && r.priority == cfg.priority)
        {
            return Err(ControlError::DuplicateRule(cfg.priority));
        }
        let at = self
            .rules
            .iter()
            .position(|r| r.priority < cfg.priority)
            .unwrap_or(self.rules.len());
        self.rules.insert(at, cfg);
        Ok(())
    }

    pub fn remove(&mut self, matcher: &FlowMatch, priority: i32) -> Option<FlowConfig> {
        let at = self
            .rules
            .iter()
            .position(|r| &r.matcher == matcher && r.priority == priority)?;
        Some(self.rules.remove(at))
    }

    pub fn lookup(&self, key: &FlowKey) -> Option<&FlowConfig> {
        self.rules.iter().find(|r| r.matcher.matches(key))
    }

    pub fn rules(&self) -> &[FlowConfig] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// Everything the controller programs into one switch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SwitchConfig {
    pub flows: FlowTable,
    pub forwarding: ForwardingTable,
    pub expressions: ExpressionRegisters,
    pub registers: RegisterSizes,
}

impl SwitchConfig {
    pub fn resolve(&self, key: &FlowKey) -> Option<&FlowConfig> {
        self.flows.lookup(key)
    }
}

/// Shared, versioned handle to a switch's running configuration.
#[derive(Debug, Default)]
pub struct ConfigCell {
    current: RwLock<Arc<SwitchConfig>>,
    version: AtomicU64,
}

impl ConfigCell {
    pub fn new(cfg: SwitchConfig) -> Self {
        Self {
            current: RwLock::new(Arc::new(cfg)),
            version: AtomicU64::new(0),
        }
    }

    pub fn snapshot(&self) -> Arc<SwitchConfig> {
        Arc::clone(&self.current.read().expect("config lock poisoned"))
    }

    pub fn version(&self) -> u64 {
        self.version.load(Ordering::Acquire)
    }

    pub fn replace(&self, cfg: SwitchConfig) {
        let mut slot = self.current.write().expect("config lock poisoned");
        *slot = Arc::new(cfg);
        self.version.fetch_add(1, Ordering::AcqRel);
    }

    /// Copy-modify-swap. `f` failing leaves the running config untouched.
    pub fn update<T, E>(&self, f: impl FnOnce(&mut SwitchConfig) -> Result<T, E>) -> Result<T, E> {
        let mut slot = self.current.write().expect("config lock poisoned");
        let mut next = SwitchConfig::clone(&slot);
        let out = f(&mut next)?;
        *slot = Arc::new(next);
        self.version.fetch_add(1, Ordering::AcqRel);
        Ok(out)
    }
}

/// Single-writer registry of switch configurations.
#[derive(Debug, Default)]
pub struct ControlPlane {
    switches: Mutex<BTreeMap<SwitchId, Arc<ConfigCell>>>,
}

impl ControlPlane {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a switch (no-op if it exists) and return its config handle.
    pub fn add_switch(&self, id: SwitchId) -> Arc<ConfigCell> {
        let mut map = self.switches.lock().expect("control plane lock poisoned");
        Arc::clone(map.entry(id).or_default())
    }

    pub fn cell(&self, id: SwitchId) -> Option<Arc<ConfigCell>> {
        self.switches
            .lock()
            .expect("control plane lock poisoned")
            .get(&id)
            .cloned()
    }

    pub fn switch_ids(&self) -> Vec<SwitchId> {
        self.switches
            .lock()
            .expect("control plane lock poisoned")
            .keys()
            .copied()
            .collect()
    }

    pub fn install_flow(&self, switch: SwitchId, cfg: FlowConfig) -> Result<(), ControlError> {
        let cell = self.cell(switch).ok_or(ControlError::UnknownSwitch(switch))?;
        cell.update(|sc| {
            check_expression_ref(sc, &cfg)?;
            sc.flows.insert(cfg)
        })
    }

    pub fn remove_flow(
        &self,
        switch: SwitchId,
        matcher: &FlowMatch,
        priority: i32,
    ) -> Result<Option<FlowConfig>, ControlError> {
        let cell = self.cell(switch).ok_or(ControlError::UnknownSwitch(switch))?;
        cell.update(|sc| Ok(sc.flows.remove(matcher, priority)))
    }

    /// Write a compiled condition into an expression register.
    pub fn write_expression(
        &self,
        switch: SwitchId,
        index: usize,
        expr: &CnfExpression,
    ) -> Result<(), ControlError> {
        let cell = self.cell(switch).ok_or(ControlError::UnknownSwitch(switch))?;
        cell.update(|sc| {
            sc.expressions.write(index, expr);
            Ok(())
        })
    }

    pub fn set_forwarding(
        &self,
        switch: SwitchId,
        table: ForwardingTable,
    ) -> Result<(), ControlError> {
        let cell = self.cell(switch).ok_or(ControlError::UnknownSwitch(switch))?;
        cell.update(|sc| {
            sc.forwarding = table;
            Ok(())
        })
    }

    /// Swap in fully validated configurations for every named switch.
    pub(crate) fn apply(&self, configs: BTreeMap<SwitchId, SwitchConfig>) {
        let mut map = self.switches.lock().expect("control plane lock poisoned");
        for (id, cfg) in configs {
            map.entry(id).or_default().replace(cfg);
        }
    }

    pub fn load_config(&self, path: impl AsRef<std::path::Path>) -> Result<ConfigDocument, ConfigError> {
        let doc = load_config(path)?;
        self.apply(doc.build()?);
        Ok(doc)
    }
}

fn check_expression_ref(sc: &SwitchConfig, cfg: &FlowConfig) -> Result<(), ControlError> {
    if cfg.algorithm.kind == AlgorithmKind::Complex
        && sc.expressions.raw(cfg.algorithm.expr_index as usize).is_none()
    {
        return Err(ControlError::MissingExpression(cfg.algorithm.expr_index));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::int_wire::MetadataKind;

    fn key(n: u8) -> FlowKey {
        FlowKey::new(Ipv4Addr::new(10, 0, 0, n), Ipv4Addr::new(10, 0, 1, 1), 5000, 80, 6)
    }

    #[test]
    fn wildcard_rule_matches_all() {
        let cp = ControlPlane::new();
        let cell = cp.add_switch(1);
        cp.install_flow(1, FlowConfig::new(FlowMatch::any(), SwitchRole::Transit))
            .unwrap();
        let snap = cell.snapshot();
        for n in 0..10 {
            assert_eq!(snap.resolve(&key(n)).unwrap().role, SwitchRole::Transit);
        }
    }

    #[test]
    fn higher_priority_wins() {
        let mut t = FlowTable::default();
        t.insert(FlowConfig::new(FlowMatch::any(), SwitchRole::Transit).with_priority(10))
            .unwrap();
        t.insert(FlowConfig::new(FlowMatch::exact(&key(1)), SwitchRole::Sink).with_priority(20))
            .unwrap();
        assert_eq!(t.lookup(&key(1)).unwrap().role, SwitchRole::Sink);
        assert_eq!(t.lookup(&key(2)).unwrap().role, SwitchRole::Transit);
        assert_eq!(
            t.insert(FlowConfig::new(FlowMatch::any(), SwitchRole::Off).with_priority(10)),
            Err(ControlError::DuplicateRule(10))
        );
        assert!(t
            .insert(FlowConfig::new(FlowMatch::any(), SwitchRole::Off).with_priority(11))
            .is_ok());
        assert_eq!(t.lookup(&key(2)).unwrap().role, SwitchRole::Off);
    }

    #[test]
    fn invalid_rules_rejected() {
        let cp = ControlPlane::new();
        assert_eq!(
            cp.install_flow(7, FlowConfig::new(FlowMatch::any(), SwitchRole::Sink)),
            Err(ControlError::UnknownSwitch(7))
        );
        cp.add_switch(7);
        let r = FlowConfig::new(FlowMatch::any(), SwitchRole::Source);
        assert!(matches!(cp.install_flow(7, r), Err(ControlError::InvalidRule(_))));
        let r = FlowConfig::new(FlowMatch::any(), SwitchRole::Sink)
            .with_mask(InstructionBitmask(0x80))
            .with_algorithm(AlgorithmConfig::per_flow(MetadataKind::QueueOccupancy, 5));
        assert!(matches!(cp.install_flow(7, r), Err(ControlError::InvalidRule(_))));
        let r = FlowConfig::new(FlowMatch::any(), SwitchRole::Sink)
            .with_algorithm(AlgorithmConfig::moving_average(MetadataKind::QueueOccupancy, 5, 300));
        assert!(matches!(cp.install_flow(7, r), Err(ControlError::Algorithm(_))));
        let r = FlowConfig::new(FlowMatch::any(), SwitchRole::Sink)
            .with_algorithm(AlgorithmConfig::complex(3));
        assert_eq!(cp.install_flow(7, r), Err(ControlError::MissingExpression(3)));
        assert!(cp.cell(7).unwrap().snapshot().flows.is_empty());
    }

    #[test]
    fn updates_bump_version_and_leave_old_snapshots_alone() {
        let cp = ControlPlane::new();
        let cell = cp.add_switch(1);
        let before = cell.snapshot();
        let v0 = cell.version();
        cp.install_flow(1, FlowConfig::new(FlowMatch::any(), SwitchRole::Sink))
            .unwrap();
        assert!(before.flows.is_empty());
        assert_eq!(cell.snapshot().flows.len(), 1);
        assert_eq!(cell.version(), v0 + 1);
        let removed = cp.remove_flow(1, &FlowMatch::any(), 0).unwrap();
        assert!(removed.is_some());
        assert!(cell.snapshot().flows.is_empty());
    }

    #[test]
    fn exact_match_checks_every_field() {
        let m = FlowMatch::exact(&key(1));
        assert!(m.matches(&key(1)));
        let mut other = key(1);
        other.proto = 17;
        assert!(!m.matches(&other));
    }
}
