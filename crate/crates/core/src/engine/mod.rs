//! Lowering of operator graphs onto machine resources, list scheduling, and
//! aggregation of the resulting timelines into latency reports.

mod lower;
mod report;
mod schedule;

pub use lower::lower_to_tasks;
pub use report::{
    emit_trace, AttentionMasking, BaselineBlock, BaselineRow, BreakdownRow, LatencyReport,
    PhaseLatencies, TraceDocument, TraceEvent, TraceSegment, UtilizationRow,
};
pub use schedule::{
    critical_by_class, critical_path, reference_schedule, schedule, verify_timeline, Priority, Task, TaskId, TaskSet,
    Timeline,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{enumerate_resources, HardwareConfig, Resource, ResourceKind, Subsystem};
use crate::baseline::{baseline_inference_latency, BaselineDevice};
use crate::error::{Error, Result};
use crate::mapping::{build_mapping_plan, MappingPlan};
use crate::timing::{CostModel, CostModelParams};
use crate::workload::{
    build_decode_graph, build_prefill_graph, kv_cache_bytes, model_weight_bytes, InferenceRequest,
    KVCacheState, ModelConfig, OpClass, OperatorGraph, Phase,
};

/// Per op class: cycles on the critical path and busy cycles per subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCycles {
    pub critical: u64,
    pub busy_sram: u64,
    pub busy_hbm: u64,
    pub busy_interconnect: u64,
}

impl ClassCycles {
    fn add(&mut self, o: &ClassCycles) {
        self.critical += o.critical;
        self.busy_sram += o.busy_sram;
        self.busy_hbm += o.busy_hbm;
        self.busy_interconnect += o.busy_interconnect;
    }
}

/// Table indexed by [`OpClass::index`].
pub type Breakdown = [ClassCycles; 6];

fn subsystem_of(resources: &[Resource], task: &Task) -> Option<Subsystem> {
    task.resource.map(|r| resources[r.0 as usize].kind.subsystem())
}

pub fn aggregate_breakdown(tasks: &TaskSet, tl: &Timeline, resources: &[Resource]) -> Breakdown {
    let mut out = Breakdown::default();
    for t in tasks.tasks() {
        let row = &mut out[t.op_class.index()];
        match subsystem_of(resources, t) {
            Some(Subsystem::SramPim) => row.busy_sram += t.duration,
            Some(Subsystem::HbmPim) => row.busy_hbm += t.duration,
            Some(Subsystem::Interconnect) => row.busy_interconnect += t.duration,
            None => {}
        }
    }
    for (row, c) in out.iter_mut().zip(critical_by_class(tasks, tl)) {
        row.critical = c;
    }
    out
}

/// Summary of one scheduled phase (the prefill or one decode token).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub end_cycle: u64,
    pub breakdown: Breakdown,
    pub resource_busy: Vec<u64>,
    /// Largest per-core busy time of attention-class work.
    pub attention_busy_max_core: u64,
    pub n_tasks: usize,
}

pub fn phase_stats(tasks: &TaskSet, tl: &Timeline, resources: &[Resource]) -> PhaseStats {
    let mut per_core = std::collections::BTreeMap::<u32, u64>::new();
    for t in tasks.tasks() {
        if t.op_class != OpClass::Attention {
            continue;
        }
        if let Some(r) = t.resource {
            if let ResourceKind::Core { core, .. } = resources[r.0 as usize].kind {
                *per_core.entry(core).or_default() += t.duration;
            }
        }
    }
    PhaseStats {
        end_cycle: tl.end_cycle,
        breakdown: aggregate_breakdown(tasks, tl, resources),
        resource_busy: tl.busy(tasks),
        attention_busy_max_core: per_core.values().copied().max().unwrap_or(0),
        n_tasks: tasks.len(),
    }
}

/// Everything needed to lower and schedule graphs on one machine.
#[derive(Debug, Clone)]
pub struct Machine {
    pub cost: CostModel,
    pub resources: Vec<Resource>,
}

impl Machine {
    pub fn new(hw: &HardwareConfig, params: &CostModelParams) -> Result<Self> {
        let hw = crate::arch::validate_config(hw)?;
        params.validate()?;
        Ok(Self {
            resources: enumerate_resources(&hw)?,
            cost: CostModel::new(&hw, params),
        })
    }

    pub fn hw(&self) -> &HardwareConfig {
        &self.cost.hw
    }

    pub fn run(&self, graph: &OperatorGraph, model: &ModelConfig, plan: &MappingPlan) -> Result<(TaskSet, Timeline)> {
        let tasks = lower_to_tasks(graph, model, plan, &self.cost)?;
        let tl = schedule(&tasks, self.resources.len())?;
        Ok((tasks, tl))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimOptions {
    pub baseline: Option<BaselineDevice>,
    /// Decode tokens included in the trace after the prefill; `None` skips
    /// trace generation.
    pub trace_decode_tokens: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub report: LatencyReport,
    pub prefill: PhaseStats,
    pub decode: Vec<PhaseStats>,
    pub trace: Option<TraceDocument>,
}

/// Fails if decoder weights plus the final KV cache exceed DRAM.
pub fn check_capacity(m: &ModelConfig, hw: &HardwareConfig, req: &InferenceRequest) -> Result<()> {
    let weights = model_weight_bytes(m);
    let kv = kv_cache_bytes(m, req.len_in + req.len_out);
    let available = crate::arch::derive_metrics(hw).dram_capacity_bytes;
    if weights + kv > available {
        return Err(Error::Capacity {
            what: format!("{} weights + KV cache in HBM", m.name),
            required: weights + kv,
            available,
        });
    }
    Ok(())
}

pub fn simulate_inference(
    m: &ModelConfig,
    hw: &HardwareConfig,
    req: &InferenceRequest,
    params: &CostModelParams,
) -> Result<LatencyReport> {
    Ok(simulate(m, hw, req, params, &SimOptions::default())?.report)
}

pub fn simulate(
    m: &ModelConfig,
    hw: &HardwareConfig,
    req: &InferenceRequest,
    params: &CostModelParams,
    opts: &SimOptions,
) -> Result<Simulation> {
    m.validate()?;
    req.validate()?;
    let machine = Machine::new(hw, params)?;
    let hw = machine.hw().clone();
    check_capacity(m, &hw, req)?;

    let prefill_plan = build_mapping_plan(m, &hw, Phase::Prefill)?;
    let decode_plan = build_mapping_plan(m, &hw, Phase::Decode)?;

    let prefill_graph = build_prefill_graph(m, req.len_in);
    let (p_tasks, p_tl) = machine.run(&prefill_graph, m, &prefill_plan)?;
    let prefill = phase_stats(&p_tasks, &p_tl, &machine.resources);

    let trace_tokens = opts.trace_decode_tokens.unwrap_or(0).min(req.len_out);
    let token = |t: u64| -> Result<(PhaseStats, Option<(OperatorGraph, TaskSet, Timeline)>)> {
        let kv = KVCacheState::new(m, req.decode_seq_len(t));
        let g = build_decode_graph(m, &kv);
        let (tasks, tl) = machine.run(&g, m, &decode_plan)?;
        let stats = phase_stats(&tasks, &tl, &machine.resources);
        let keep = opts.trace_decode_tokens.is_some() && t <= trace_tokens;
        Ok((stats, keep.then_some((g, tasks, tl))))
    };
    let results: Vec<_> = (1..=req.len_out)
        .into_par_iter()
        .map(token)
        .collect::<Result<Vec<_>>>()?;
    let mut decode = Vec::with_capacity(results.len());
    let mut kept = Vec::new();
    for (s, k) in results {
        decode.push(s);
        if let Some(k) = k {
            kept.push(k);
        }
    }

    let trace = opts.trace_decode_tokens.map(|_| {
        let mut segments = vec![TraceSegment {
            label: "prefill".into(),
            offset_cycles: 0,
            graph: &prefill_graph,
            tasks: &p_tasks,
            timeline: &p_tl,
        }];
        let mut offset = p_tl.end_cycle;
        for (i, (g, tasks, tl)) in kept.iter().enumerate() {
            segments.push(TraceSegment {
                label: format!("decode token {}", i + 1),
                offset_cycles: offset,
                graph: g,
                tasks,
                timeline: tl,
            });
            offset += tl.end_cycle;
        }
        emit_trace(&segments, &machine.resources, &machine.cost)
    });

    let baseline = match &opts.baseline {
        Some(dev) => Some(baseline_inference_latency(m, req, dev)?),
        None => None,
    };
    let report = LatencyReport::assemble(m, &hw, req, &machine, &prefill, &decode, baseline.as_ref());
    Ok(Simulation {
        report,
        prefill,
        decode,
        trace,
    })
}
