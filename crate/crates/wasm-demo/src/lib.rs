//! Browser bindings. Every export takes and returns JSON strings; failures come
//! back as `{"error": "..."}`.

use std::collections::BTreeMap;

use serde::Serialize;
use wasm_bindgen::prelude::*;

use int_forge::controlplane::compile_expression;
use int_forge::detection::{Aggregate, AlgorithmConfig};
use int_forge::bench::count_events;
use int_forge::int_wire::{HopMetadata, MetadataKind};
use int_forge::traffic::{
    default_flow, generate_trace_with, BurstModelParams, PresetName, TraceRecord, WorkloadPreset,
};

const MAX_POINTS: usize = 1500;

fn params_for(preset: &str, params_json: &str) -> Result<BurstModelParams, String> {
    if params_json.trim().is_empty() {
        let name: PresetName = preset.parse().map_err(|e| format!("{e}"))?;
        Ok(WorkloadPreset::builtin(name).params)
    } else {
        serde_json::from_str(params_json).map_err(|e| format!("params: {e}"))
    }
}

fn trace(preset: &str, params_json: &str, packets: usize, seed: u64) -> Result<Vec<TraceRecord>, String> {
    let params = params_for(preset, params_json)?;
    generate_trace_with(&params, default_flow(), packets, seed).map_err(|e| e.to_string())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| error_json(&e.to_string()))
}

fn error_json(msg: &str) -> String {
    serde_json::json!({ "error": msg }).to_string()
}

fn respond<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => to_json(&v),
        Err(e) => error_json(&e),
    }
}

#[derive(Serialize)]
pub struct Series {
    /// Bucket start, µs.
    pub ts_us: Vec<f64>,
    /// Bucket maximum of the first hop's queue occupancy.
    pub occupancy: Vec<u32>,
    pub max: u32,
    pub span_us: f64,
}

/// Queue occupancy of the first hop, max-pooled to at most 1500 points.
pub fn series(preset: &str, params_json: &str, packets: usize, seed: u64) -> Result<Series, String> {
    let recs = trace(preset, params_json, packets, seed)?;
    let bucket = recs.len().div_ceil(MAX_POINTS).max(1);
    let mut out = Series {
        ts_us: Vec::new(),
        occupancy: Vec::new(),
        max: 0,
        span_us: recs.last().map_or(0.0, |r| r.ts_ns as f64 / 1000.0),
    };
    for chunk in recs.chunks(bucket) {
        let m = chunk.iter().filter_map(|r| r.queue_occupancy()).max().unwrap_or(0);
        out.ts_us.push(chunk[0].ts_ns as f64 / 1000.0);
        out.occupancy.push(m);
        out.max = out.max.max(m);
    }
    Ok(out)
}

#[derive(Serialize)]
pub struct CurvePoint {
    pub threshold: u32,
    pub per_hop_events: u64,
    pub per_flow_events: u64,
    /// Reports per packet under per-flow detection.
    pub pass_ratio: f64,
    /// `None` when no packet was reported.
    pub amplification: Option<f64>,
}

/// Event counts for each threshold on one generated trace.
pub fn curve(
    preset: &str,
    params_json: &str,
    packets: usize,
    seed: u64,
    thresholds: &[u32],
) -> Result<Vec<CurvePoint>, String> {
    let recs = trace(preset, params_json, packets, seed)?;
    let kind = MetadataKind::QueueOccupancy;
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (n, hop) = count_events(recs.iter().cloned(), AlgorithmConfig::per_hop(kind, t));
            let (_, flow) = count_events(recs.iter().cloned(), AlgorithmConfig::per_flow(kind, t));
            let ratio = if n == 0 { 0.0 } else { flow as f64 / n as f64 };
            CurvePoint {
                threshold: t,
                per_hop_events: hop,
                per_flow_events: flow,
                pass_ratio: ratio,
                amplification: (flow > 0).then(|| 1.0 / ratio),
            }
        })
        .collect())
}

#[derive(Serialize)]
pub struct ExprResult {
    pub verdict: bool,
    /// Clauses as text, one string per disjunction.
    pub clauses: Vec<String>,
    pub literals: usize,
    /// Register image, hex.
    pub register: String,
}

/// Compiles `text` and evaluates it on `hops_json`, a list of objects keyed
/// by item name, e.g. `[{"switch_id": 12, "queue_occupancy": 150}]`.
pub fn evaluate(text: &str, hops_json: &str) -> Result<ExprResult, String> {
    let expr = compile_expression(text).map_err(|e| e.to_string())?;
    let raw: Vec<BTreeMap<String, u32>> =
        serde_json::from_str(hops_json).map_err(|e| format!("hops: {e}"))?;
    let mut hops = Vec::with_capacity(raw.len());
    for m in raw {
        let mut hop = HopMetadata::default();
        for (k, v) in m {
            let kind: MetadataKind = k.parse().map_err(|e| format!("{e}"))?;
            hop.set(kind, v);
        }
        hops.push(hop);
    }
    let clauses = expr
        .clauses()
        .iter()
        .map(|c| {
            c.iter()
                .map(|l| {
                    let agg = match l.aggregate {
                        Aggregate::Sum => "sum",
                        Aggregate::Max => "max",
                    };
                    format!("{agg}({}) {} {}", l.metadata.name(), l.cmp.symbol(), l.constant)
                })
                .collect::<Vec<_>>()
                .join(" or ")
        })
        .collect();
    Ok(ExprResult {
        verdict: expr.eval(&hops),
        clauses,
        literals: expr.literal_count(),
        register: expr.to_register().iter().map(|b| format!("{b:02x}")).collect(),
    })
}

#[wasm_bindgen]
pub fn preset_params(preset: &str) -> String {
    respond(params_for(preset, ""))
}

#[wasm_bindgen]
pub fn occupancy_series(preset: &str, params_json: &str, packets: u32, seed: u32) -> String {
    respond(series(preset, params_json, packets as usize, u64::from(seed)))
}

#[wasm_bindgen]
pub fn threshold_curve(preset: &str, params_json: &str, packets: u32, seed: u32, thresholds_json: &str) -> String {
    let thresholds: Result<Vec<u32>, String> =
        serde_json::from_str(thresholds_json).map_err(|e| format!("thresholds: {e}"));
    respond(thresholds.and_then(|t| curve(preset, params_json, packets as usize, u64::from(seed), &t)))
}

#[wasm_bindgen]
pub fn evaluate_expression(text: &str, hops_json: &str) -> String {
    respond(evaluate(text, hops_json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_is_pooled() {
        let s = series("web", "", 20_000, 1).unwrap();
        assert!(s.occupancy.len() <= MAX_POINTS);
        assert_eq!(s.ts_us.len(), s.occupancy.len());
        assert!(s.max > 0 && s.max <= 170);
    }

    #[test]
    fn params_override_preset() {
        let mut p = WorkloadPreset::builtin(PresetName::Web).params;
        p.queue_cap_us = 40.0;
        let s = series("ignored", &serde_json::to_string(&p).unwrap(), 20_000, 1).unwrap();
        assert!(s.max <= 40);
    }

    #[test]
    fn curve_counts_shrink() {
        let c = curve("cache", "", 20_000, 2, &[0, 50, 100]).unwrap();
        assert_eq!(c.len(), 3);
        for w in c.windows(2) {
            assert!(w[1].per_flow_events <= w[0].per_flow_events);
            assert!(w[1].per_hop_events <= w[0].per_hop_events);
        }
    }

    #[test]
    fn expression_example() {
        let text = "switch_id == 12 and queue_occupancy > 100";
        let hit = evaluate(text, r#"[{"switch_id":12,"queue_occupancy":150}]"#).unwrap();
        let miss = evaluate(text, r#"[{"switch_id":12,"queue_occupancy":50}]"#).unwrap();
        assert!(hit.verdict);
        assert!(!miss.verdict);
        assert_eq!(hit.literals, 2);
        assert_eq!(hit.clauses, vec!["sum(switch_id) == 12", "sum(queue_occupancy) > 100"]);
    }

    #[test]
    fn errors_are_json() {
        let out = evaluate_expression("switch_id ==", "[]");
        assert!(out.contains("\"error\""));
        assert!(threshold_curve("nope", "", 10, 1, "[1]").contains("\"error\""));
    }
}
