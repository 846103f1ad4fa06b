use serde::{Deserialize, Serialize};

use crate::arch::{HardwareConfig, Resource, Subsystem};
use crate::baseline::BaselineLatency;
use crate::timing::CostModel;
use crate::workload::{InferenceRequest, ModelConfig, OpClass, OperatorGraph, Phase};

use super::schedule::{TaskSet, Timeline};
use super::{ClassCycles, Machine, PhaseStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLatencies {
    pub prefill: f64,
    pub decode: f64,
    pub total: f64,
    pub per_token: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownRow {
    pub phase: Phase,
    pub op_class: OpClass,
    pub critical_cycles: u64,
    pub critical_us: f64,
    pub busy_sram_cycles: u64,
    pub busy_hbm_cycles: u64,
    pub busy_interconnect_cycles: u64,
}

/// Decode attention time hidden behind other work versus left on the
/// critical path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMasking {
    pub busy_max_core_cycles: u64,
    pub exposed_cycles: u64,
    pub masked_cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationRow {
    pub resource: String,
    pub subsystem: Subsystem,
    pub busy_cycles: u64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub phase: Phase,
    pub op_class: OpClass,
    pub us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineBlock {
    pub device: String,
    pub prefill_us: f64,
    pub decode_us: f64,
    pub total_us: f64,
    pub breakdown: Vec<BaselineRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub model: ModelConfig,
    pub hw: HardwareConfig,
    pub request: InferenceRequest,
    pub prefill_cycles: u64,
    pub decode_cycles: u64,
    pub total_cycles: u64,
    pub phase_latencies_us: PhaseLatencies,
    pub breakdown: Vec<BreakdownRow>,
    pub attention: AttentionMasking,
    pub utilization: Vec<UtilizationRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineBlock>,
    /// Baseline end-to-end latency over this machine's.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speedup: Option<f64>,
}

impl LatencyReport {
    pub(super) fn assemble(
        m: &ModelConfig,
        hw: &HardwareConfig,
        req: &InferenceRequest,
        machine: &Machine,
        prefill: &PhaseStats,
        decode: &[PhaseStats],
        baseline: Option<&BaselineLatency>,
    ) -> Self {
        let cm = &machine.cost;
        let prefill_cycles = prefill.end_cycle;
        let decode_cycles: u64 = decode.iter().map(|s| s.end_cycle).sum();
        let total_cycles = prefill_cycles + decode_cycles;

        let mut decode_table = [ClassCycles::default(); 6];
        let mut busy = prefill.resource_busy.clone();
        let mut attn_busy = 0;
        for s in decode {
            for (acc, row) in decode_table.iter_mut().zip(&s.breakdown) {
                acc.add(row);
            }
            for (b, x) in busy.iter_mut().zip(&s.resource_busy) {
                *b += x;
            }
            attn_busy += s.attention_busy_max_core;
        }

        let mut breakdown = Vec::with_capacity(12);
        for (phase, table) in [(Phase::Prefill, &prefill.breakdown), (Phase::Decode, &decode_table)] {
            for class in OpClass::ALL {
                let row = &table[class.index()];
                breakdown.push(BreakdownRow {
                    phase,
                    op_class: class,
                    critical_cycles: row.critical,
                    critical_us: cm.cycles_to_us(row.critical),
                    busy_sram_cycles: row.busy_sram,
                    busy_hbm_cycles: row.busy_hbm,
                    busy_interconnect_cycles: row.busy_interconnect,
                });
            }
        }
        let exposed = decode_table[OpClass::Attention.index()].critical;

        let utilization = machine
            .resources
            .iter()
            .zip(&busy)
            .map(|(r, &b)| UtilizationRow {
                resource: r.name.clone(),
                subsystem: r.kind.subsystem(),
                busy_cycles: b,
                utilization: if total_cycles == 0 { 0.0 } else { b as f64 / total_cycles as f64 },
            })
            .collect();

        let phase_latencies_us = PhaseLatencies {
            prefill: cm.cycles_to_us(prefill_cycles),
            decode: cm.cycles_to_us(decode_cycles),
            total: cm.cycles_to_us(total_cycles),
            per_token: decode.iter().map(|s| cm.cycles_to_us(s.end_cycle)).collect(),
        };
        let baseline_block = baseline.map(|b| BaselineBlock {
            device: b.device.clone(),
            prefill_us: b.prefill_s * 1e6,
            decode_us: b.decode_s * 1e6,
            total_us: b.total_s * 1e6,
            breakdown: b
                .breakdown
                .iter()
                .map(|r| BaselineRow {
                    phase: r.phase,
                    op_class: r.op_class,
                    us: r.seconds * 1e6,
                })
                .collect(),
        });
        let speedup = baseline_block
            .as_ref()
            .filter(|_| phase_latencies_us.total > 0.0)
            .map(|b| b.total_us / phase_latencies_us.total);

        Self {
            model: m.clone(),
            hw: hw.clone(),
            request: *req,
            prefill_cycles,
            decode_cycles,
            total_cycles,
            phase_latencies_us,
            breakdown,
            attention: AttentionMasking {
                busy_max_core_cycles: attn_busy,
                exposed_cycles: exposed,
                masked_cycles: attn_busy.saturating_sub(exposed),
            },
            utilization,
            baseline: baseline_block,
            speedup,
        }
    }

    pub fn row(&self, phase: Phase, class: OpClass) -> &BreakdownRow {
        self.breakdown
            .iter()
            .find(|r| r.phase == phase && r.op_class == class)
            .expect("breakdown has every phase/class pair")
    }

    pub fn to_json(&self) -> crate::error::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One scheduled phase placed on the trace's time axis.
pub struct TraceSegment<'a> {
    pub label: String,
    pub offset_cycles: u64,
    pub graph: &'a OperatorGraph,
    pub tasks: &'a TaskSet,
    pub timeline: &'a Timeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cat: Option<String>,
    pub ph: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dur: Option<f64>,
    pub pid: u32,
    pub tid: u32,
    #[serde(skip_serializing_if = "serde_json::Map::is_empty", default)]
    pub args: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    #[serde(rename = "traceEvents")]
    pub trace_events: Vec<TraceEvent>,
    #[serde(rename = "displayTimeUnit")]
    pub display_time_unit: String,
}

impl TraceDocument {
    pub fn to_json(&self) -> crate::error::Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn pid_of(s: Subsystem) -> u32 {
    match s {
        Subsystem::SramPim => 1,
        Subsystem::HbmPim => 2,
        Subsystem::Interconnect => 3,
    }
}

/// Chrome Trace Event document: one complete (`X`) event per task with a
/// resource, process per subsystem, thread per resource, times in
/// microseconds.
pub fn emit_trace(segments: &[TraceSegment<'_>], resources: &[Resource], cm: &CostModel) -> TraceDocument {
    use serde_json::{json, Map};
    let mut events = Vec::new();
    for s in [Subsystem::SramPim, Subsystem::HbmPim, Subsystem::Interconnect] {
        let mut args = Map::new();
        args.insert("name".into(), json!(format!("{s:?}")));
        events.push(TraceEvent {
            name: "process_name".into(),
            cat: None,
            ph: "M".into(),
            ts: None,
            dur: None,
            pid: pid_of(s),
            tid: 0,
            args,
        });
    }
    for r in resources {
        let mut args = Map::new();
        args.insert("name".into(), json!(r.name));
        events.push(TraceEvent {
            name: "thread_name".into(),
            cat: None,
            ph: "M".into(),
            ts: None,
            dur: None,
            pid: pid_of(r.kind.subsystem()),
            tid: r.id.0,
            args,
        });
    }
    for seg in segments {
        for (id, t) in seg.tasks.iter() {
            let Some(res) = t.resource else { continue };
            let node = seg.graph.node(crate::workload::NodeId(t.node));
            let (start, end) = seg.timeline.interval(id);
            let mut args = Map::new();
            args.insert("segment".into(), json!(seg.label));
            args.insert("layer".into(), json!(node.layer));
            if let Some(h) = node.head {
                args.insert("head".into(), json!(h));
            }
            args.insert("node".into(), json!(t.node));
            events.push(TraceEvent {
                name: format!("{:?}", node.role),
                cat: Some(t.op_class.name().into()),
                ph: "X".into(),
                ts: Some(cm.cycles_to_us(seg.offset_cycles + start)),
                dur: Some(cm.cycles_to_us(end - start)),
                pid: pid_of(resources[res.0 as usize].kind.subsystem()),
                tid: res.0,
                args,
            });
        }
    }
    TraceDocument {
        trace_events: events,
        display_time_unit: "ns".into(),
    }
}
