use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{KVCacheState, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    Gemm,
    Gemv,
    Softmax,
    LayerNorm,
    Gelu,
    ResAdd,
    Transpose,
    AllGather,
    Transfer,
}

/// Latency breakdown categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpClass {
    #[serde(rename = "QKVGen")]
    QkvGen,
    Attention,
    Projection,
    #[serde(rename = "FFN")]
    Ffn,
    NonLinear,
    DataMove,
}

impl OpClass {
    pub const ALL: [OpClass; 6] = [
        OpClass::QkvGen,
        OpClass::Attention,
        OpClass::Projection,
        OpClass::Ffn,
        OpClass::NonLinear,
        OpClass::DataMove,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpClass::QkvGen => "QKVGen",
            OpClass::Attention => "Attention",
            OpClass::Projection => "Projection",
            OpClass::Ffn => "FFN",
            OpClass::NonLinear => "NonLinear",
            OpClass::DataMove => "DataMove",
        }
    }
}

/// Fully connected layers carrying static weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FcLayer {
    Q,
    K,
    V,
    Proj,
    Ffn1,
    Ffn2,
}

impl FcLayer {
    pub fn class(self) -> OpClass {
        match self {
            FcLayer::Q | FcLayer::K | FcLayer::V => OpClass::QkvGen,
            FcLayer::Proj => OpClass::Projection,
            FcLayer::Ffn1 | FcLayer::Ffn2 => OpClass::Ffn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Attn,
    Ffn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KvKind {
    K,
    V,
}

/// What a node does inside its layer; lowering dispatches on this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpRole {
    LayerNorm(Block),
    ResAdd(Block),
    Gelu,
    Fc(FcLayer),
    /// Prefill: weight tile streamed HBM -> SRAM ahead of its GEMM.
    WeightStream(FcLayer),
    /// Prefill: column slices of an FC output exchanged between cores.
    FcGather(FcLayer),
    /// Prefill: K/V written back to the HBM cache.
    KvStore,
    /// Prefill: head outputs exchanged before the projection.
    AttnGather,
    /// Decode: activation vector pushed SRAM -> HBM ahead of an FC group.
    Upload(FcLayer),
    /// Decode: FC output pulled HBM -> SRAM.
    Download(FcLayer),
    /// Decode: cached K or V columns streamed HBM -> SRAM.
    CacheStream(KvKind),
    /// Decode: freshly generated q/k/v head vector delivered to its core(s).
    Deliver(FcLayer),
    TransposeK,
    ScoreQk,
    Softmax,
    /// Decode: local max / exponent-sum exchange between cores of one head.
    SoftmaxGather,
    ScoreSv,
    /// Decode: partial head outputs combined across cores of one head.
    HeadReduce,
    /// Decode: head output pushed SRAM -> HBM for the projection.
    HeadUpload,
}

impl OpRole {
    pub fn class(self) -> OpClass {
        match self {
            OpRole::Fc(fc) => fc.class(),
            OpRole::LayerNorm(_) | OpRole::ResAdd(_) | OpRole::Gelu => OpClass::NonLinear,
            OpRole::TransposeK
            | OpRole::ScoreQk
            | OpRole::Softmax
            | OpRole::SoftmaxGather
            | OpRole::ScoreSv
            | OpRole::HeadReduce => OpClass::Attention,
            OpRole::WeightStream(_)
            | OpRole::FcGather(_)
            | OpRole::KvStore
            | OpRole::AttnGather
            | OpRole::Upload(_)
            | OpRole::Download(_)
            | OpRole::CacheStream(_)
            | OpRole::Deliver(_)
            | OpRole::HeadUpload => OpClass::DataMove,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dims {
    /// `(M x K) * (K x N)`.
    Matrix { m: u64, k: u64, n: u64 },
    /// Element-wise ops, transfers and gathers.
    Elements(u64),
    /// Layout change of a `rows x cols` tile.
    Tile { rows: u64, cols: u64 },
}

impl Dims {
    pub fn elements(&self) -> u64 {
        match *self {
            Dims::Matrix { m, n, .. } => m * n,
            Dims::Elements(e) => e,
            Dims::Tile { rows, cols } => rows * cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: NodeId,
    pub kind: OpKind,
    pub dims: Dims,
    pub layer: u32,
    pub head: Option<u32>,
    pub op_class: OpClass,
    pub role: OpRole,
    pub deps: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorGraph {
    pub phase: Phase,
    /// Prompt length for prefill, attended sequence length for decode.
    pub seq_len: u64,
    pub n_layers: u32,
    pub n_heads: u32,
    pub nodes: Vec<OpNode>,
}

impl OperatorGraph {
    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id.0 as usize]
    }

    /// Kahn's algorithm; errors if the dependencies contain a cycle.
    pub fn topological_order(&self) -> Result<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut succ: Vec<Vec<u32>> = vec![Vec::new(); n];
        for node in &self.nodes {
            for d in &node.deps {
                if d.0 as usize >= n {
                    return Err(Error::UnknownDependency {
                        task: node.id.0,
                        dep: d.0,
                    });
                }
                indegree[node.id.0 as usize] += 1;
                succ[d.0 as usize].push(node.id.0);
            }
        }
        let mut queue: VecDeque<u32> = (0..n as u32)
            .filter(|&i| indegree[i as usize] == 0)
            .collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = queue.pop_front() {
            order.push(NodeId(i));
            for &s in &succ[i as usize] {
                indegree[s as usize] -= 1;
                if indegree[s as usize] == 0 {
                    queue.push_back(s);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Cycle {
                unscheduled: n - order.len(),
            });
        }
        Ok(order)
    }

    /// Number of distinct `(layer, head)` pairs carrying attention nodes.
    pub fn head_subgraph_count(&self) -> usize {
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if let Some(h) = n.head {
                seen.insert((n.layer, h));
            }
        }
        seen.len()
    }

    pub fn total_flops(&self) -> u64 {
        self.nodes.iter().map(op_flops).sum()
    }
}

/// Per-element FLOP counts charged to element-wise kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopConstants {
    pub layer_norm: u64,
    pub softmax: u64,
    pub gelu: u64,
    pub res_add: u64,
}

impl Default for FlopConstants {
    fn default() -> Self {
        Self {
            layer_norm: 5,
            softmax: 5,
            gelu: 8,
            res_add: 1,
        }
    }
}

pub fn op_flops(node: &OpNode) -> u64 {
    op_flops_with(node, &FlopConstants::default())
}

pub fn op_flops_with(node: &OpNode, c: &FlopConstants) -> u64 {
    match (node.kind, node.dims) {
        (OpKind::Gemm | OpKind::Gemv, Dims::Matrix { m, k, n }) => 2 * m * k * n,
        (OpKind::LayerNorm, d) => c.layer_norm * d.elements(),
        (OpKind::Softmax, d) => c.softmax * d.elements(),
        (OpKind::Gelu, d) => c.gelu * d.elements(),
        (OpKind::ResAdd, d) => c.res_add * d.elements(),
        _ => 0,
    }
}

/// Static weight footprint of a node. `has_static_weight` is false for
/// nodes whose operands are all activations or cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeightBytes {
    pub bytes: u64,
    pub has_static_weight: bool,
}

pub fn op_weight_bytes(node: &OpNode, model: &ModelConfig) -> WeightBytes {
    match (node.role, node.dims) {
        (OpRole::Fc(_), Dims::Matrix { k, n, .. }) => WeightBytes {
            bytes: k * n * model.elem_bytes,
            has_static_weight: true,
        },
        _ => WeightBytes {
            bytes: 0,
            has_static_weight: false,
        },
    }
}

/// KV-cache operand bytes read by the attention score GEMMs/GEMVs.
pub fn op_kv_bytes(node: &OpNode, model: &ModelConfig) -> u64 {
    match (node.role, node.dims) {
        (OpRole::ScoreQk | OpRole::ScoreSv, Dims::Matrix { k, n, .. }) => k * n * model.elem_bytes,
        _ => 0,
    }
}

/// Bytes a conventional memory hierarchy moves for this node: every operand
/// and the output once.
pub fn op_moved_bytes(node: &OpNode, elem_bytes: u64) -> u64 {
    let e = elem_bytes;
    match (node.kind, node.dims) {
        (OpKind::Gemm | OpKind::Gemv, Dims::Matrix { m, k, n }) => (m * k + k * n + m * n) * e,
        (OpKind::ResAdd, d) => 3 * d.elements() * e,
        (OpKind::LayerNorm | OpKind::Softmax | OpKind::Gelu | OpKind::Transpose, d) => {
            2 * d.elements() * e
        }
        (OpKind::Transfer | OpKind::AllGather, d) => d.elements() * e,
        (_, d) => d.elements() * e,
    }
}

struct Builder {
    nodes: Vec<OpNode>,
}

impl Builder {
    fn add(
        &mut self,
        kind: OpKind,
        dims: Dims,
        layer: u32,
        head: Option<u32>,
        role: OpRole,
        deps: Vec<NodeId>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(OpNode {
            id,
            kind,
            dims,
            layer,
            head,
            op_class: role.class(),
            role,
            deps,
        });
        id
    }
}

fn opt_deps(prev: Option<NodeId>) -> Vec<NodeId> {
    prev.into_iter().collect()
}

/// Prefill graph: the whole prompt processed as GEMMs.
pub fn build_prefill_graph(model: &ModelConfig, len_in: u64) -> OperatorGraph {
    let m = len_in;
    let d = model.d_emb;
    let dk = model.d_k;
    let dff = model.d_ffn();
    let mut b = Builder {
        nodes: Vec::with_capacity(model.n_layers as usize * (30 + 4 * model.n_heads as usize)),
    };
    let mut prev_out: Option<NodeId> = None;

    for layer in 0..model.n_layers as u32 {
        let ln1 = b.add(
            OpKind::LayerNorm,
            Dims::Elements(m * d),
            layer,
            None,
            OpRole::LayerNorm(Block::Attn),
            opt_deps(prev_out),
        );
        // K first so its transpose overlaps Q generation.
        let fc_out = |b: &mut Builder, fc: FcLayer| {
            let w = b.add(
                OpKind::Transfer,
                Dims::Elements(d * d),
                layer,
                None,
                OpRole::WeightStream(fc),
                vec![],
            );
            let g = b.add(
                OpKind::Gemm,
                Dims::Matrix { m, k: d, n: d },
                layer,
                None,
                OpRole::Fc(fc),
                vec![ln1, w],
            );
            let gather = b.add(
                OpKind::AllGather,
                Dims::Elements(m * d),
                layer,
                None,
                OpRole::FcGather(fc),
                vec![g],
            );
            (g, gather)
        };
        let (k_gen, k_all) = fc_out(&mut b, FcLayer::K);
        let (q_gen, q_all) = fc_out(&mut b, FcLayer::Q);
        let (v_gen, v_all) = fc_out(&mut b, FcLayer::V);
        let _ = q_gen;
        b.add(
            OpKind::Transfer,
            Dims::Elements(2 * m * d),
            layer,
            None,
            OpRole::KvStore,
            vec![k_gen, v_gen],
        );

        let mut head_outs = Vec::with_capacity(model.n_heads as usize);
        for h in 0..model.n_heads as u32 {
            let hd = Some(h);
            let t = b.add(
                OpKind::Transpose,
                Dims::Tile { rows: m, cols: dk },
                layer,
                hd,
                OpRole::TransposeK,
                vec![k_all],
            );
            let qk = b.add(
                OpKind::Gemm,
                Dims::Matrix { m, k: dk, n: m },
                layer,
                hd,
                OpRole::ScoreQk,
                vec![q_all, t],
            );
            let sm = b.add(
                OpKind::Softmax,
                Dims::Elements(m * m),
                layer,
                hd,
                OpRole::Softmax,
                vec![qk],
            );
            let sv = b.add(
                OpKind::Gemm,
                Dims::Matrix { m, k: m, n: dk },
                layer,
                hd,
                OpRole::ScoreSv,
                vec![sm, v_all],
            );
            head_outs.push(sv);
        }
        let attn = b.add(
            OpKind::AllGather,
            Dims::Elements(m * d),
            layer,
            None,
            OpRole::AttnGather,
            head_outs,
        );

        let wp = b.add(
            OpKind::Transfer,
            Dims::Elements(d * d),
            layer,
            None,
            OpRole::WeightStream(FcLayer::Proj),
            vec![],
        );
        let proj = b.add(
            OpKind::Gemm,
            Dims::Matrix { m, k: d, n: d },
            layer,
            None,
            OpRole::Fc(FcLayer::Proj),
            vec![attn, wp],
        );
        let proj_all = b.add(
            OpKind::AllGather,
            Dims::Elements(m * d),
            layer,
            None,
            OpRole::FcGather(FcLayer::Proj),
            vec![proj],
        );
        let res1 = b.add(
            OpKind::ResAdd,
            Dims::Elements(m * d),
            layer,
            None,
            OpRole::ResAdd(Block::Attn),
            vec![proj_all],
        );
        let ln2 = b.add(
            OpKind::LayerNorm,
            Dims::Elements(m * d),
            layer,
            None,
            OpRole::LayerNorm(Block::Ffn),
            vec![res1],
        );
        let w1 = b.add(
            OpKind::Transfer,
            Dims::Elements(d * dff),
            layer,
            None,
            OpRole::WeightStream(FcLayer::Ffn1),
            vec![],
        );
        let ffn1 = b.add(
            OpKind::Gemm,
            Dims::Matrix { m, k: d, n: dff },
            layer,
            None,
            OpRole::Fc(FcLayer::Ffn1),
            vec![ln2, w1],
        );
        let gelu = b.add(
            OpKind::Gelu,
            Dims::Elements(m * dff),
            layer,
            None,
            OpRole::Gelu,
            vec![ffn1],
        );
        let ffn1_all = b.add(
            OpKind::AllGather,
            Dims::Elements(m * dff),
            layer,
            None,
            OpRole::FcGather(FcLayer::Ffn1),
            vec![gelu],
        );
        let w2 = b.add(
            OpKind::Transfer,
            Dims::Elements(dff * d),
            layer,
            None,
            OpRole::WeightStream(FcLayer::Ffn2),
            vec![],
        );
        let ffn2 = b.add(
            OpKind::Gemm,
            Dims::Matrix { m, k: dff, n: d },
            layer,
            None,
            OpRole::Fc(FcLayer::Ffn2),
            vec![ffn1_all, w2],
        );
        let ffn2_all = b.add(
            OpKind::AllGather,
            Dims::Elements(m * d),
            layer,
            None,
            OpRole::FcGather(FcLayer::Ffn2),
            vec![ffn2],
        );
        let res2 = b.add(
            OpKind::ResAdd,
            Dims::Elements(m * d),
            layer,
            None,
            OpRole::ResAdd(Block::Ffn),
            vec![ffn2_all],
        );
        prev_out = Some(res2);
    }

    OperatorGraph {
        phase: Phase::Prefill,
        seq_len: len_in,
        n_layers: model.n_layers as u32,
        n_heads: model.n_heads as u32,
        nodes: b.nodes,
    }
}

/// Decode graph for one generated token attending over `kv.seq_len`
/// positions. The `1/sqrt(d_k)` scaling is part of the Softmax node.
pub fn build_decode_graph(model: &ModelConfig, kv: &KVCacheState) -> OperatorGraph {
    let seq = kv.seq_len;
    let d = model.d_emb;
    let dk = model.d_k;
    let dff = model.d_ffn();
    let mut b = Builder {
        nodes: Vec::with_capacity(model.n_layers as usize * (20 + 12 * model.n_heads as usize)),
    };
    let mut prev_out: Option<NodeId> = None;
    let gemv = |k: u64, n: u64| Dims::Matrix { m: 1, k, n };

    for layer in 0..model.n_layers as u32 {
        let ln1 = b.add(
            OpKind::LayerNorm,
            Dims::Elements(d),
            layer,
            None,
            OpRole::LayerNorm(Block::Attn),
            opt_deps(prev_out),
        );
        let up = b.add(
            OpKind::Transfer,
            Dims::Elements(d),
            layer,
            None,
            OpRole::Upload(FcLayer::Q),
            vec![ln1],
        );
        let k_gen = b.add(
            OpKind::Gemv,
            gemv(d, d),
            layer,
            None,
            OpRole::Fc(FcLayer::K),
            vec![up],
        );
        let q_gen = b.add(
            OpKind::Gemv,
            gemv(d, d),
            layer,
            None,
            OpRole::Fc(FcLayer::Q),
            vec![up],
        );
        let v_gen = b.add(
            OpKind::Gemv,
            gemv(d, d),
            layer,
            None,
            OpRole::Fc(FcLayer::V),
            vec![up],
        );

        let mut head_ups = Vec::with_capacity(model.n_heads as usize);
        for h in 0..model.n_heads as u32 {
            let hd = Some(h);
            let cached = seq.saturating_sub(1) * dk;
            let k_stream = b.add(
                OpKind::Transfer,
                Dims::Elements(cached),
                layer,
                hd,
                OpRole::CacheStream(KvKind::K),
                vec![],
            );
            let v_stream = b.add(
                OpKind::Transfer,
                Dims::Elements(cached),
                layer,
                hd,
                OpRole::CacheStream(KvKind::V),
                vec![],
            );
            let k_del = b.add(
                OpKind::Transfer,
                Dims::Elements(dk),
                layer,
                hd,
                OpRole::Deliver(FcLayer::K),
                vec![k_gen],
            );
            let t = b.add(
                OpKind::Transpose,
                Dims::Tile { rows: dk, cols: 1 },
                layer,
                hd,
                OpRole::TransposeK,
                vec![k_del],
            );
            let q_del = b.add(
                OpKind::Transfer,
                Dims::Elements(dk),
                layer,
                hd,
                OpRole::Deliver(FcLayer::Q),
                vec![q_gen],
            );
            let qk = b.add(
                OpKind::Gemv,
                gemv(dk, seq),
                layer,
                hd,
                OpRole::ScoreQk,
                vec![q_del, t, k_stream],
            );
            let sm = b.add(
                OpKind::Softmax,
                Dims::Elements(seq),
                layer,
                hd,
                OpRole::Softmax,
                vec![qk],
            );
            let sm_gather = b.add(
                OpKind::AllGather,
                Dims::Elements(2),
                layer,
                hd,
                OpRole::SoftmaxGather,
                vec![sm],
            );
            let v_del = b.add(
                OpKind::Transfer,
                Dims::Elements(dk),
                layer,
                hd,
                OpRole::Deliver(FcLayer::V),
                vec![v_gen],
            );
            let sv = b.add(
                OpKind::Gemv,
                gemv(seq, dk),
                layer,
                hd,
                OpRole::ScoreSv,
                vec![sm_gather, v_del, v_stream],
            );
            let reduce = b.add(
                OpKind::AllGather,
                Dims::Elements(dk),
                layer,
                hd,
                OpRole::HeadReduce,
                vec![sv],
            );
            let head_up = b.add(
                OpKind::Transfer,
                Dims::Elements(dk),
                layer,
                hd,
                OpRole::HeadUpload,
                vec![reduce],
            );
            head_ups.push(head_up);
        }

        let proj = b.add(
            OpKind::Gemv,
            gemv(d, d),
            layer,
            None,
            OpRole::Fc(FcLayer::Proj),
            head_ups,
        );
        let proj_down = b.add(
            OpKind::Transfer,
            Dims::Elements(d),
            layer,
            None,
            OpRole::Download(FcLayer::Proj),
            vec![proj],
        );
        let res1 = b.add(
            OpKind::ResAdd,
            Dims::Elements(d),
            layer,
            None,
            OpRole::ResAdd(Block::Attn),
            vec![proj_down],
        );
        let ln2 = b.add(
            OpKind::LayerNorm,
            Dims::Elements(d),
            layer,
            None,
            OpRole::LayerNorm(Block::Ffn),
            vec![res1],
        );
        let up1 = b.add(
            OpKind::Transfer,
            Dims::Elements(d),
            layer,
            None,
            OpRole::Upload(FcLayer::Ffn1),
            vec![ln2],
        );
        let ffn1 = b.add(
            OpKind::Gemv,
            gemv(d, dff),
            layer,
            None,
            OpRole::Fc(FcLayer::Ffn1),
            vec![up1],
        );
        let down1 = b.add(
            OpKind::Transfer,
            Dims::Elements(dff),
            layer,
            None,
            OpRole::Download(FcLayer::Ffn1),
            vec![ffn1],
        );
        let gelu = b.add(
            OpKind::Gelu,
            Dims::Elements(dff),
            layer,
            None,
            OpRole::Gelu,
            vec![down1],
        );
        let up2 = b.add(
            OpKind::Transfer,
            Dims::Elements(dff),
            layer,
            None,
            OpRole::Upload(FcLayer::Ffn2),
            vec![gelu],
        );
        let ffn2 = b.add(
            OpKind::Gemv,
            gemv(dff, d),
            layer,
            None,
            OpRole::Fc(FcLayer::Ffn2),
            vec![up2],
        );
        let down2 = b.add(
            OpKind::Transfer,
            Dims::Elements(d),
            layer,
            None,
            OpRole::Download(FcLayer::Ffn2),
            vec![ffn2],
        );
        let res2 = b.add(
            OpKind::ResAdd,
            Dims::Elements(d),
            layer,
            None,
            OpRole::ResAdd(Block::Ffn),
            vec![down2],
        );
        prev_out = Some(res2);
    }

    OperatorGraph {
        phase: Phase::Decode,
        seq_len: seq,
        n_layers: model.n_layers as u32,
        n_heads: model.n_heads as u32,
        nodes: b.nodes,
    }
}
