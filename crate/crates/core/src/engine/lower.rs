use crate::arch::{CoreUnit, ResourceId, ResourceLayout};
use crate::error::{Error, Result};
use crate::mapping::{CoreAssignment, HeadAllocation, MappingPlan, WeightSlicePlan};
use crate::timing::CostModel;
use crate::workload::{
    Block, FcLayer, ModelConfig, OpKind, OpNode, OpRole, OperatorGraph, Phase,
};

use super::schedule::{Priority, Task, TaskId, TaskSet};

/// Tasks a graph node was lowered into.
#[derive(Debug, Clone, Default)]
struct Lowered {
    tasks: Vec<TaskId>,
    /// Task core `i`'s successors wait on, if the node is per-core.
    by_core: Vec<Option<TaskId>>,
    /// `(round, pch, task)` for HBM compute.
    by_pch: Vec<(u32, u32, TaskId)>,
    done: Option<TaskId>,
}

/// `total` split into `parts` near-equal contiguous shares.
fn share(total: u64, parts: u64, i: u64) -> u64 {
    total / parts + u64::from(i < total % parts)
}

struct Lowerer<'a> {
    cm: &'a CostModel,
    layout: ResourceLayout,
    n_cores: u64,
    pch_per_channel: u64,
    link_map: Vec<Vec<u64>>,
    channel_owner: Vec<u64>,
    out: TaskSet,
    lowered: Vec<Lowered>,
}

impl<'a> Lowerer<'a> {
    fn new(graph: &OperatorGraph, cm: &'a CostModel) -> Self {
        let hw = &cm.hw;
        Self {
            cm,
            layout: ResourceLayout::new(hw),
            n_cores: hw.n_cores,
            pch_per_channel: hw.stack.pch_per_channel,
            link_map: hw.link_map(),
            channel_owner: hw.channel_owner(),
            out: TaskSet::with_capacity(graph.nodes.len() * 4, graph.nodes.len() * 8),
            lowered: vec![Lowered::default(); graph.nodes.len()],
        }
    }

    fn prio(node: &OpNode, round: u32) -> Priority {
        Priority {
            layer: node.layer,
            round,
            head: node.head,
            node: node.id.0,
        }
    }

    fn push(&mut self, node: &OpNode, round: u32, resource: Option<ResourceId>, duration: u64, deps: &[TaskId]) -> TaskId {
        let id = self.out.push(
            Task {
                node: node.id.0,
                resource,
                duration,
                op_class: node.op_class,
                priority: Self::prio(node, round),
            },
            deps,
        );
        self.lowered[node.id.0 as usize].tasks.push(id);
        id
    }

    fn join(&mut self, node: &OpNode, round: u32, deps: &[TaskId]) -> TaskId {
        self.push(node, round, None, 0, deps)
    }

    /// Join over every task of `node`, created on first use.
    fn done(&mut self, node: &OpNode) -> TaskId {
        let i = node.id.0 as usize;
        if let Some(d) = self.lowered[i].done {
            return d;
        }
        let deps = self.lowered[i].tasks.clone();
        let d = if deps.len() == 1 {
            deps[0]
        } else {
            let prio = Self::prio(node, 0);
            let id = self.out.push(
                Task {
                    node: node.id.0,
                    resource: None,
                    duration: 0,
                    op_class: node.op_class,
                    priority: prio,
                },
                &deps,
            );
            self.lowered[i].tasks.push(id);
            id
        };
        self.lowered[i].done = Some(d);
        d
    }

    fn dep_done(&mut self, graph: &OperatorGraph, dep: crate::workload::NodeId) -> TaskId {
        let n = graph.node(dep).clone();
        self.done(&n)
    }

    fn core_dep(&mut self, graph: &OperatorGraph, dep: crate::workload::NodeId, core: u64) -> TaskId {
        match self.lowered[dep.0 as usize].by_core.get(core as usize).copied().flatten() {
            Some(t) => t,
            None => self.dep_done(graph, dep),
        }
    }

    fn set_by_core(&mut self, node: &OpNode, by_core: Vec<Option<TaskId>>) {
        self.lowered[node.id.0 as usize].by_core = by_core;
    }

    /// SRAM <-> HBM transfer for `core`. A core without its own channels
    /// borrows the link of the owner of channel `core mod n_channels` and
    /// crosses the NoC first.
    fn link_transfer(&mut self, node: &OpNode, round: u32, core: u64, bytes: u64, deps: &[TaskId]) -> TaskId {
        let dur = self.cm.link(bytes);
        if !self.link_map[core as usize].is_empty() {
            return self.push(node, round, Some(self.layout.link(core as u32)), dur, deps);
        }
        let owner = self.channel_owner[(core % self.channel_owner.len() as u64) as usize];
        let hop = self.cm.allgather(2, bytes);
        let noc = self.push(node, round, Some(self.layout.noc()), hop, deps);
        self.push(node, round, Some(self.layout.link(owner as u32)), dur, &[noc])
    }

    fn vcu(&self, core: u64) -> ResourceId {
        self.layout.core_unit(core as u32, CoreUnit::Vcu)
    }

    fn finish(self) -> TaskSet {
        self.out
    }
}

pub fn lower_to_tasks(
    graph: &OperatorGraph,
    model: &ModelConfig,
    plan: &MappingPlan,
    cm: &CostModel,
) -> Result<TaskSet> {
    for node in &graph.nodes {
        if plan.target(node.role).is_none() {
            return Err(Error::UnmappedNode(node.id.0));
        }
    }
    match graph.phase {
        Phase::Prefill => lower_prefill(graph, model, plan, cm),
        Phase::Decode => lower_decode(graph, model, plan, cm),
    }
}

fn fc_dims(node: &OpNode) -> (u64, u64, u64) {
    match node.dims {
        crate::workload::Dims::Matrix { m, k, n } => (m, k, n),
        d => (1, d.elements(), 1),
    }
}

fn lower_prefill(graph: &OperatorGraph, model: &ModelConfig, plan: &MappingPlan, cm: &CostModel) -> Result<TaskSet> {
    let mut lw = Lowerer::new(graph, cm);
    let c = lw.n_cores;
    let e = model.elem_bytes;
    let cores = plan
        .cores
        .clone()
        .ok_or_else(|| Error::InvalidPlan(vec!["plan has no core assignment".into()]))?;
    // Streamed GEMMs per core, for weight double-buffering.
    let mut streamed: Vec<Vec<TaskId>> = vec![Vec::new(); c as usize];

    for node in &graph.nodes {
        let id = node.id.0 as usize;
        match node.role {
            OpRole::LayerNorm(_) | OpRole::ResAdd(_) | OpRole::Gelu => {
                let total = node.dims.elements();
                let dur = cm.vcu(node.kind, total, c)?;
                let mut by_core = Vec::with_capacity(c as usize);
                for i in 0..c {
                    let deps: Vec<TaskId> = node.deps.iter().map(|&d| lw.core_dep(graph, d, i)).collect();
                    let r = lw.vcu(i);
                    by_core.push(Some(lw.push(node, 0, Some(r), dur, &deps)));
                }
                if node.kind == OpKind::LayerNorm && c > 1 {
                    // Row statistics (mean, variance) are combined across cores.
                    let rows = total / model.d_emb;
                    let deps: Vec<TaskId> = by_core.iter().flatten().copied().collect();
                    let noc = lw.layout.noc();
                    let g = lw.push(node, 0, Some(noc), cm.allgather(c, 2 * rows * e), &deps);
                    by_core = vec![Some(g); c as usize];
                }
                lw.set_by_core(node, by_core);
            }
            OpRole::WeightStream(_) => {
                // Issued with its GEMM below; the node only records the bytes.
            }
            OpRole::Fc(_) => {
                let (m, k, n) = fc_dims(node);
                let stream_node = node
                    .deps
                    .iter()
                    .map(|&d| graph.node(d))
                    .find(|d| matches!(d.role, OpRole::WeightStream(_)))
                    .cloned();
                let input_deps: Vec<_> = node
                    .deps
                    .iter()
                    .copied()
                    .filter(|&d| !matches!(graph.node(d).role, OpRole::WeightStream(_)))
                    .collect();
                let mut by_core = Vec::with_capacity(c as usize);
                for i in 0..c {
                    let cols = share(n, c, i);
                    let mut deps: Vec<TaskId> = input_deps.iter().map(|&d| lw.core_dep(graph, d, i)).collect();
                    if let Some(sn) = &stream_node {
                        let list = &streamed[i as usize];
                        let buf: Vec<TaskId> = list.len().checked_sub(2).map(|j| list[j]).into_iter().collect();
                        deps.push(lw.link_transfer(sn, 0, i, k * cols * e, &buf));
                    }
                    let tcu = lw.layout.core_unit(i as u32, CoreUnit::Tcu);
                    let t = lw.push(node, 0, Some(tcu), cm.tcu_gemm(m, k, cols.max(1)), &deps);
                    if stream_node.is_some() {
                        streamed[i as usize].push(t);
                    }
                    by_core.push(Some(t));
                }
                lw.set_by_core(node, by_core);
            }
            OpRole::FcGather(_) | OpRole::AttnGather => {
                let (m, n) = match node.dims {
                    crate::workload::Dims::Elements(x) => (1, x),
                    d => (1, d.elements()),
                };
                let per_core = (m * n).div_ceil(c) * e;
                let mut deps = Vec::new();
                for &d in &node.deps {
                    let l = &lw.lowered[d.0 as usize];
                    if l.by_core.is_empty() {
                        deps.push(lw.dep_done(graph, d));
                    } else {
                        deps.extend(l.by_core.iter().flatten().copied());
                    }
                }
                deps.sort_unstable();
                deps.dedup();
                let noc = lw.layout.noc();
                let g = lw.push(node, 0, Some(noc), cm.allgather(c, per_core), &deps);
                lw.lowered[id].done = Some(g);
            }
            OpRole::KvStore => {
                let total = node.dims.elements() * e;
                for i in 0..c {
                    let deps: Vec<TaskId> = node.deps.iter().map(|&d| lw.core_dep(graph, d, i)).collect();
                    lw.link_transfer(node, 0, i, share(total, c, i), &deps);
                }
            }
            OpRole::TransposeK | OpRole::ScoreQk | OpRole::Softmax | OpRole::ScoreSv => {
                let h = node.head.expect("attention node without head") as u64;
                let group = cores.cores_of(h);
                let tp = group.end - group.start;
                let seq = graph.seq_len;
                let dk = model.d_k;
                let mut by_core = vec![None; c as usize];
                for (j, core) in group.clone().enumerate() {
                    let rows = share(seq, tp, j as u64);
                    let deps: Vec<TaskId> = node.deps.iter().map(|&d| lw.core_dep(graph, d, core)).collect();
                    let (unit, dur) = match node.role {
                        OpRole::TransposeK => (CoreUnit::TransposeUnit, cm.transpose(seq, dk)),
                        OpRole::ScoreQk => (CoreUnit::Tcu, cm.tcu_gemm(rows.max(1), dk, seq)),
                        OpRole::Softmax => (CoreUnit::Vcu, cm.vcu(OpKind::Softmax, seq * seq, tp)?),
                        _ => (CoreUnit::Tcu, cm.tcu_gemm(rows.max(1), seq, dk)),
                    };
                    let r = lw.layout.core_unit(core as u32, unit);
                    by_core[core as usize] = Some(lw.push(node, 0, Some(r), dur, &deps));
                }
                lw.set_by_core(node, by_core);
            }
            other => {
                return Err(Error::UnsupportedOp(format!("{other:?} in prefill lowering")));
            }
        }
    }
    Ok(lw.finish())
}

/// Core holding the newest sequence position of a head split over `group`.
fn tail_core(group: &std::ops::Range<u64>, seq: u64) -> u64 {
    group.start + (group.end - group.start).min(seq.max(1)) - 1
}

/// Decode-time KV placement on the SRAM side.
struct KvPolicy {
    /// The whole cache fits in the PIM macros and is never re-streamed.
    resident: bool,
    /// Heads whose K/V can be buffered at once on each core.
    slots: Vec<usize>,
}

fn kv_policy(model: &ModelConfig, cores: &CoreAssignment, seq: u64, cm: &CostModel) -> KvPolicy {
    let c = cm.hw.n_cores as usize;
    let cap = cm.hw.core.pim_bytes();
    let e = model.elem_bytes;
    let mut per_core_total = vec![0u64; c];
    let mut per_core_head = vec![0u64; c];
    for h in 0..model.n_heads {
        let g = cores.cores_of(h);
        let tp = g.end - g.start;
        for (j, core) in g.enumerate() {
            let bytes = 2 * share(seq, tp, j as u64) * model.d_k * e;
            per_core_total[core as usize] += bytes * model.n_layers;
            per_core_head[core as usize] = per_core_head[core as usize].max(bytes);
        }
    }
    KvPolicy {
        resident: per_core_total.iter().all(|&b| b <= cap),
        slots: per_core_head
            .iter()
            .map(|&b| if b == 0 { 1 } else { ((cap / b) as usize).max(1) })
            .collect(),
    }
}

/// Output dimensions of head allocation round `round` held by pseudo-channel
/// `pch`; a channel's entries alternate between its pseudo-channels.
fn qkv_pch_dims(a: &HeadAllocation, round: usize, pch: u64, per_channel: u64) -> u64 {
    let ch = pch / per_channel;
    let sub = pch % per_channel;
    let held = a.slices[round][ch as usize].len() as u64;
    held / per_channel + u64::from(sub < held % per_channel)
}

fn lower_decode(graph: &OperatorGraph, model: &ModelConfig, plan: &MappingPlan, cm: &CostModel) -> Result<TaskSet> {
    let mut lw = Lowerer::new(graph, cm);
    let c = lw.n_cores;
    let e = model.elem_bytes;
    let d = model.d_emb;
    let dk = model.d_k;
    let seq = graph.seq_len;
    let ppc = lw.pch_per_channel;
    let n_pch = plan.n_channels * ppc;
    let missing = |what: &str| Error::InvalidPlan(vec![format!("plan has no {what}")]);
    let cores = plan.cores.clone().ok_or_else(|| missing("core assignment"))?;
    let proj = plan.fc(FcLayer::Proj).ok_or_else(|| missing("projection slices"))?.clone();
    let ffn1 = plan.fc(FcLayer::Ffn1).ok_or_else(|| missing("FFN1 slices"))?.clone();
    let ffn2 = plan.fc(FcLayer::Ffn2).ok_or_else(|| missing("FFN2 slices"))?.clone();
    let alloc_of = |fc: FcLayer| plan.qkv(fc).cloned().ok_or_else(|| missing("Q/K/V allocation"));
    let qkv_alloc = [alloc_of(FcLayer::Q)?, alloc_of(FcLayer::K)?, alloc_of(FcLayer::V)?];
    let kv = kv_policy(model, &cores, seq, cm);

    // Output rows each core exchanges with its own channels.
    let core_rows = |p: &WeightSlicePlan| -> Vec<u64> {
        lw.link_map
            .iter()
            .map(|chans| chans.iter().map(|&ch| p.channels[ch as usize].rows).sum())
            .collect()
    };
    let d_rows = core_rows(&proj);
    let ffn_rows = core_rows(&ffn1);
    let ffn2_rows = core_rows(&ffn2);

    // Per-core history of s x V tasks bounds how far KV streams run ahead.
    let mut sv_history: Vec<Vec<TaskId>> = vec![Vec::new(); c as usize];
    for node in &graph.nodes {
        let id = node.id.0 as usize;
        match node.role {
            OpRole::LayerNorm(_) | OpRole::ResAdd(_) | OpRole::Gelu => {
                let rows = match node.role {
                    OpRole::Gelu => &ffn_rows,
                    OpRole::ResAdd(Block::Ffn) => &ffn2_rows,
                    _ => &d_rows,
                };
                let mut by_core = Vec::with_capacity(c as usize);
                for i in 0..c {
                    let deps: Vec<TaskId> = node.deps.iter().map(|&dd| lw.core_dep(graph, dd, i)).collect();
                    let dur = cm.vcu(node.kind, rows[i as usize], 1)?;
                    let r = lw.vcu(i);
                    by_core.push(Some(lw.push(node, 0, Some(r), dur, &deps)));
                }
                if node.kind == OpKind::LayerNorm && c > 1 {
                    let deps: Vec<TaskId> = by_core.iter().flatten().copied().collect();
                    let noc = lw.layout.noc();
                    let g = lw.push(node, 0, Some(noc), cm.allgather(c, 2 * e), &deps);
                    by_core = vec![Some(g); c as usize];
                }
                lw.set_by_core(node, by_core);
            }
            OpRole::Upload(fc) => {
                let rows = if fc == FcLayer::Ffn2 { &ffn_rows } else { &d_rows };
                let mut ups = Vec::with_capacity(c as usize);
                for i in 0..c {
                    if rows[i as usize] == 0 {
                        continue;
                    }
                    let deps: Vec<TaskId> = node.deps.iter().map(|&dd| lw.core_dep(graph, dd, i)).collect();
                    ups.push(lw.link_transfer(node, 0, i, rows[i as usize] * e, &deps));
                }
                let j = lw.join(node, 0, &ups);
                lw.lowered[id].done = Some(j);
            }
            OpRole::Fc(fc) => {
                let input = lw.dep_done(graph, node.deps[0]);
                match fc {
                    FcLayer::Q | FcLayer::K | FcLayer::V => {
                        let a = &qkv_alloc[match fc {
                            FcLayer::Q => 0,
                            FcLayer::K => 1,
                            _ => 2,
                        }];
                        let mut first = vec![true; n_pch as usize];
                        for r in 0..a.rounds.len() {
                            for p in 0..n_pch {
                                let dims = qkv_pch_dims(a, r, p, ppc);
                                if dims == 0 {
                                    continue;
                                }
                                // The input vector is broadcast into the
                                // global buffer once per matrix.
                                let input_len = if first[p as usize] { d } else { 0 };
                                first[p as usize] = false;
                                let dur = cm.hbm_gemv(dims * d, input_len);
                                let res = lw.layout.pch(p as u32);
                                let t = lw.push(node, r as u32, Some(res), dur, &[input]);
                                lw.lowered[id].by_pch.push((r as u32, p as u32, t));
                            }
                        }
                    }
                    _ => {
                        let slices = match fc {
                            FcLayer::Proj => &proj,
                            FcLayer::Ffn1 => &ffn1,
                            _ => &ffn2,
                        };
                        let deps: Vec<TaskId> = node.deps.iter().map(|&dd| lw.dep_done(graph, dd)).collect();
                        for ch in 0..plan.n_channels {
                            let split = slices.pch_rows(ch, ppc);
                            for (sub, rows) in split.into_iter().enumerate() {
                                if rows == 0 {
                                    continue;
                                }
                                let p = ch * ppc + sub as u64;
                                let dur = cm.hbm_gemv(rows * slices.cols, slices.cols);
                                let res = lw.layout.pch(p as u32);
                                let t = lw.push(node, 0, Some(res), dur, &deps);
                                lw.lowered[id].by_pch.push((0, p as u32, t));
                            }
                        }
                    }
                }
            }
            OpRole::Download(fc) => {
                let rows = if fc == FcLayer::Ffn1 { &ffn_rows } else { &d_rows };
                let src = node.deps[0].0 as usize;
                let mut by_core = vec![None; c as usize];
                for i in 0..c {
                    if rows[i as usize] == 0 {
                        continue;
                    }
                    let chans = &lw.link_map[i as usize];
                    let deps: Vec<TaskId> = lw.lowered[src]
                        .by_pch
                        .iter()
                        .filter(|(_, p, _)| chans.contains(&(*p as u64 / ppc)))
                        .map(|&(_, _, t)| t)
                        .collect();
                    by_core[i as usize] = Some(lw.link_transfer(node, 0, i, rows[i as usize] * e, &deps));
                }
                lw.set_by_core(node, by_core);
            }
            OpRole::CacheStream(_) => {
                let h = node.head.unwrap() as u64;
                let round = qkv_alloc[1].round_of(h).unwrap_or(0) as u32;
                let group = cores.cores_of(h);
                let tp = group.end - group.start;
                let tail = tail_core(&group, seq);
                let mut by_core = vec![None; c as usize];
                for (j, core) in group.clone().enumerate() {
                    let t = if kv.resident {
                        lw.join(node, round, &[])
                    } else {
                        let cached = share(seq, tp, j as u64) - u64::from(core == tail);
                        let hist = &sv_history[core as usize];
                        let slots = kv.slots[core as usize];
                        let gate: Vec<TaskId> = hist.len().checked_sub(slots).map(|k| hist[k]).into_iter().collect();
                        lw.link_transfer(node, round, core, cached * dk * e, &gate)
                    };
                    by_core[core as usize] = Some(t);
                }
                lw.set_by_core(node, by_core);
            }
            OpRole::Deliver(fc) => {
                let h = node.head.unwrap() as u64;
                let a = &qkv_alloc[match fc {
                    FcLayer::Q => 0,
                    FcLayer::K => 1,
                    _ => 2,
                }];
                let r = a.round_of(h).unwrap();
                let chans = a.rounds[r].channels_of(h);
                let src = node.deps[0].0 as usize;
                let deps: Vec<TaskId> = lw.lowered[src]
                    .by_pch
                    .iter()
                    .filter(|(rr, p, _)| *rr as usize == r && chans.contains(&(*p as u64 / ppc)))
                    .map(|&(_, _, t)| t)
                    .collect();
                let group = cores.cores_of(h);
                let mut by_core = vec![None; c as usize];
                let targets: Vec<u64> = if fc == FcLayer::Q {
                    group.clone().collect()
                } else {
                    vec![tail_core(&group, seq)]
                };
                for core in targets {
                    by_core[core as usize] = Some(lw.link_transfer(node, r as u32, core, dk * e, &deps));
                }
                lw.set_by_core(node, by_core);
            }
            OpRole::TransposeK => {
                let h = node.head.unwrap() as u64;
                let round = qkv_alloc[1].round_of(h).unwrap_or(0) as u32;
                let tail = tail_core(&cores.cores_of(h), seq);
                let dep = lw.core_dep(graph, node.deps[0], tail);
                let r = lw.layout.core_unit(tail as u32, CoreUnit::TransposeUnit);
                let t = lw.push(node, round, Some(r), cm.transpose(dk, 1), &[dep]);
                let mut by_core = vec![None; c as usize];
                by_core[tail as usize] = Some(t);
                lw.set_by_core(node, by_core);
            }
            OpRole::ScoreQk | OpRole::Softmax | OpRole::ScoreSv => {
                let h = node.head.unwrap() as u64;
                let round = qkv_alloc[1].round_of(h).unwrap_or(0) as u32;
                let group = cores.cores_of(h);
                let tp = group.end - group.start;
                let tail = tail_core(&group, seq);
                let mut by_core = vec![None; c as usize];
                for (j, core) in group.clone().enumerate() {
                    let mut deps = Vec::with_capacity(node.deps.len());
                    for &dd in &node.deps {
                        if let Some(t) = lw.lowered[dd.0 as usize].by_core.get(core as usize).copied().flatten() {
                            deps.push(t);
                        }
                    }
                    let positions = share(seq, tp, j as u64);
                    let writes = if core == tail { dk * e } else { 0 };
                    let (unit, dur) = match node.role {
                        OpRole::ScoreQk => (CoreUnit::PimUnit, cm.pim_gemv_tiled(dk, positions, writes)?),
                        OpRole::Softmax => (CoreUnit::Vcu, cm.vcu(OpKind::Softmax, seq, tp)?),
                        _ => (CoreUnit::PimUnit, cm.pim_gemv_tiled(dk, positions, writes)?),
                    };
                    let r = lw.layout.core_unit(core as u32, unit);
                    let t = lw.push(node, round, Some(r), dur, &deps);
                    if node.role == OpRole::ScoreSv {
                        sv_history[core as usize].push(t);
                    }
                    by_core[core as usize] = Some(t);
                }
                lw.set_by_core(node, by_core);
            }
            OpRole::SoftmaxGather | OpRole::HeadReduce => {
                let h = node.head.unwrap() as u64;
                let round = qkv_alloc[1].round_of(h).unwrap_or(0) as u32;
                let group = cores.cores_of(h);
                let tp = group.end - group.start;
                let src = node.deps[0].0 as usize;
                if tp == 1 {
                    let by = lw.lowered[src].by_core.clone();
                    lw.set_by_core(node, by);
                    continue;
                }
                // Softmax exchanges local max and exponent sum; the head
                // reduction exchanges partial d_k-wide outputs.
                let bytes = if node.role == OpRole::SoftmaxGather { 2 * e } else { dk * e };
                let deps: Vec<TaskId> = lw.lowered[src].by_core.iter().flatten().copied().collect();
                let noc = lw.layout.noc();
                let g = lw.push(node, round, Some(noc), cm.allgather(tp, bytes), &deps);
                let mut by_core = vec![None; c as usize];
                for core in group {
                    by_core[core as usize] = Some(g);
                }
                lw.set_by_core(node, by_core);
            }
            OpRole::HeadUpload => {
                let h = node.head.unwrap() as u64;
                let round = qkv_alloc[1].round_of(h).unwrap_or(0) as u32;
                let lead = cores.cores_of(h).start;
                let dep = lw.core_dep(graph, node.deps[0], lead);
                lw.link_transfer(node, round, lead, dk * e, &[dep]);
            }
            other => {
                return Err(Error::UnsupportedOp(format!("{other:?} in decode lowering")));
            }
        }
    }
    Ok(lw.finish())
}
