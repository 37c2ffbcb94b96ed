//! JSON configuration documents. See `docs/config.md` for the schema.
//!
//! A document is parsed and fully validated before anything is applied; any
//! diagnostic rejects the whole document.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{FlowConfig, FlowMatch, SwitchConfig, SwitchId, SwitchRole};
use crate::dataplane::forwarding::{ForwardingTable, Ipv4Prefix};
use crate::detection::{AlgorithmConfig, AlgorithmKind, RegisterSizes, ALPHA_DENOM};
use crate::int_wire::{InstructionBitmask, MetadataKind, DEFAULT_MAX_HOPS};
use crate::traffic::BurstModelParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed document: {0}")]
    Parse(String),
    #[error("{}", Diagnostics(.0))]
    Invalid(Vec<String>),
}

struct Diagnostics<'a>(&'a [String]);

impl fmt::Display for Diagnostics<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration error(s):", self.0.len())?;
        for d in self.0 {
            write!(f, "\n  {d}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    #[serde(default)]
    pub switches: Vec<SwitchSection>,
    /// Traffic-model overrides keyed by preset name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub workloads: BTreeMap<String, BurstModelParams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwitchSection {
    pub id: SwitchId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registers: Option<RegisterSizes>,
    #[serde(default)]
    pub flows: Vec<FlowRule>,
    /// Expression register presets: index -> condition text.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub expressions: BTreeMap<u32, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routes: Vec<Route>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_port: Option<u16>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowRule {
    #[serde(rename = "match", default)]
    pub matcher: FlowMatch,
    pub role: SwitchRole,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default)]
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub priority: i32,
    #[serde(default = "default_max_hops")]
    pub max_hops: u8,
}

fn default_max_hops() -> u8 {
    DEFAULT_MAX_HOPS
}

/// Either the raw mask byte or a list of item names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskSpec {
    Bits(u8),
    Items(Vec<String>),
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::Bits(0)
    }
}

impl MaskSpec {
    fn resolve(&self) -> Result<InstructionBitmask, String> {
        match self {
            MaskSpec::Bits(b) => Ok(InstructionBitmask(*b)),
            MaskSpec::Items(items) => items
                .iter()
                .map(|s| s.parse::<MetadataKind>().map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()
                .map(InstructionBitmask::from_kinds),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSpec {
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "default_metadata")]
    pub metadata: String,
    #[serde(default)]
    pub threshold: u32,
    #[serde(default = "default_alpha")]
    pub alpha: u16,
    /// Expression register index for `complex`.
    #[serde(default)]
    pub expression: u32,
    #[serde(default)]
    pub always_update_average: bool,
}

fn default_kind() -> String {
    "noop".into()
}

fn default_metadata() -> String {
    "queue_occupancy".into()
}

fn default_alpha() -> u16 {
    ALPHA_DENOM as u16
}

impl Default for AlgorithmSpec {
    fn default() -> Self {
        Self {
            kind: default_kind(),
            metadata: default_metadata(),
            threshold: 0,
            alpha: default_alpha(),
            expression: 0,
            always_update_average: false,
        }
    }
}

impl AlgorithmSpec {
    fn resolve(&self) -> Result<AlgorithmConfig, String> {
        let kind: AlgorithmKind = self.kind.parse().map_err(|e: crate::detection::DetectionError| e.to_string())?;
        let metadata: MetadataKind = self.metadata.parse().map_err(|e: crate::int_wire::UnknownMetadata| e.to_string())?;
        let cfg = AlgorithmConfig {
            kind,
            metadata,
            threshold: self.threshold,
            alpha_num: self.alpha,
            expr_index: self.expression,
            always_update_average: self.always_update_average,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub prefix: String,
    pub port: u16,
}

impl ConfigDocument {
    /// JSON with optional `//` and `/* */` comments.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let plain = json_comments::StripComments::new(text.as_bytes());
        serde_json::from_reader(plain).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Validate everything and build the per-switch configurations.
    pub fn build(&self) -> Result<BTreeMap<SwitchId, SwitchConfig>, ConfigError> {
        let mut diags = Vec::new();
        let mut out = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for (si, sw) in self.switches.iter().enumerate() {
            let at = format!("switches[{si}] (id {})", sw.id);
            if !seen.insert(sw.id) {
                diags.push(format!("{at}: duplicate switch id"));
                continue;
            }
            if let Some(cfg) = build_switch(sw, &at, &mut diags) {
                out.insert(sw.id, cfg);
            }
        }
        for (name, params) in &self.workloads {
            if let Err(e) = params.validate() {
                diags.push(format!("workloads.{name}: {e}"));
            }
        }
        if diags.is_empty() {
            Ok(out)
        } else {
            Err(ConfigError::Invalid(diags))
        }
    }

    pub fn workload(&self, name: &str) -> Option<&BurstModelParams> {
        self.workloads.get(name)
    }
}

fn build_switch(sw: &SwitchSection, at: &str, diags: &mut Vec<String>) -> Option<SwitchConfig> {
    let before = diags.len();
    let mut cfg = SwitchConfig {
        registers: sw.registers.unwrap_or_default(),
        ..SwitchConfig::default()
    };
    if cfg.registers.switch_regs == 0 || cfg.registers.flow_regs == 0 {
        diags.push(format!("{at}.registers: sizes must be nonzero"));
    }
    for (&idx, text) in &sw.expressions {
        match super::compile_expression(text) {
            Ok(expr) => cfg.expressions.write(idx as usize, &expr),
            Err(e) => diags.push(format!("{at}.expressions[{idx}]: {e}")),
        }
    }
    let mut table = ForwardingTable::new();
    for (ri, route) in sw.routes.iter().enumerate() {
        match route.prefix.parse::<Ipv4Prefix>() {
            Ok(p) => {
                if table.insert(p, route.port).is_some() {
                    diags.push(format!("{at}.routes[{ri}]: duplicate prefix {p}"));
                }
            }
            Err(e) => diags.push(format!("{at}.routes[{ri}]: {e}")),
        }
    }
    table.set_default(sw.default_port);
    cfg.forwarding = table;
    for (fi, rule) in sw.flows.iter().enumerate() {
        let here = format!("{at}.flows[{fi}]");
        let mask = rule.mask.resolve().map_err(|e| diags.push(format!("{here}.mask: {e}")));
        let algorithm = rule
            .algorithm
            .resolve()
            .map_err(|e| diags.push(format!("{here}.algorithm: {e}")));
        let (Ok(mask), Ok(algorithm)) = (mask, algorithm) else {
            continue;
        };
        let fc = FlowConfig {
            matcher: rule.matcher,
            role: rule.role,
            mask,
            algorithm,
            priority: rule.priority,
            max_hops: rule.max_hops,
        };
        if let Err(e) = super::check_expression_ref(&cfg, &fc).and_then(|_| cfg.flows.insert(fc)) {
            diags.push(format!("{here}: {e}"));
        }
    }
    (diags.len() == before).then_some(cfg)
}

/// Read and validate a document without applying it.
pub fn load_config(path: impl AsRef<Path>) -> Result<ConfigDocument, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc = ConfigDocument::from_json(&text)?;
    doc.build()?;
    Ok(doc)
}
