//! Roofline model of a conventional GPU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::workload::{
    build_decode_graph, build_prefill_graph, op_flops, op_moved_bytes, InferenceRequest,
    KVCacheState, ModelConfig, OpClass, OpKind, OpNode, OperatorGraph, Phase,
};

fn default_efficiency() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineDevice {
    pub name: String,
    pub peak_flops: f64,
    pub mem_bw_bytes_per_s: f64,
    #[serde(default = "default_efficiency")]
    pub efficiency: f64,
}

impl BaselineDevice {
    pub fn a100() -> Self {
        Self {
            name: "a100".into(),
            peak_flops: 312e12,
            mem_bw_bytes_per_s: 2039e9,
            efficiency: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.peak_flops) || !positive(self.mem_bw_bytes_per_s) {
            return Err(Error::InvalidHardware(format!(
                "baseline `{}`: peak_flops and mem_bw must be positive",
                self.name
            )));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::InvalidHardware(format!(
                "baseline `{}`: efficiency {} outside (0, 1]",
                self.name, self.efficiency
            )));
        }
        Ok(())
    }

    /// FLOP/byte where compute and memory time are equal.
    pub fn ridge_point(&self) -> f64 {
        self.peak_flops / self.mem_bw_bytes_per_s
    }
}

pub fn arithmetic_intensity(node: &OpNode, elem_bytes: u64) -> Result<f64> {
    let bytes = op_moved_bytes(node, elem_bytes);
    if bytes == 0 {
        return Err(Error::UnsupportedOp(format!(
            "arithmetic intensity of {} with zero moved bytes",
            node.id
        )));
    }
    Ok(op_flops(node) as f64 / bytes as f64)
}

/// Seconds for one node on the device.
pub fn roofline_latency(node: &OpNode, dev: &BaselineDevice, elem_bytes: u64) -> f64 {
    let flops = op_flops(node) as f64;
    let bytes = op_moved_bytes(node, elem_bytes) as f64;
    let compute = flops / (dev.efficiency * dev.peak_flops);
    let memory = bytes / (dev.efficiency * dev.mem_bw_bytes_per_s);
    compute.max(memory)
}

/// Per-class seconds, indexed by [`OpClass::index`].
pub type ClassSeconds = [f64; 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineBreakdown {
    pub phase: Phase,
    pub op_class: OpClass,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineLatency {
    pub device: String,
    pub prefill_s: f64,
    pub decode_s: f64,
    pub total_s: f64,
    pub per_token_s: Vec<f64>,
    pub breakdown: Vec<BaselineBreakdown>,
}

impl BaselineLatency {
    pub fn class_seconds(&self, phase: Phase, class: OpClass) -> f64 {
        self.breakdown
            .iter()
            .filter(|b| b.phase == phase && b.op_class == class)
            .map(|b| b.seconds)
            .sum()
    }
}

/// Conventional devices keep activations on chip between kernels, so
/// explicit transfer and gather nodes are not charged.
fn charged(node: &OpNode) -> bool {
    !matches!(node.kind, OpKind::Transfer | OpKind::AllGather)
}

pub fn graph_class_seconds(graph: &OperatorGraph, dev: &BaselineDevice, elem_bytes: u64) -> ClassSeconds {
    let mut out = [0.0; 6];
    for node in graph.nodes.iter().filter(|n| charged(n)) {
        out[node.op_class.index()] += roofline_latency(node, dev, elem_bytes);
    }
    out
}

/// Sum of roofline latencies over the prefill graph and every decode graph.
pub fn baseline_inference_latency(
    m: &ModelConfig,
    req: &InferenceRequest,
    dev: &BaselineDevice,
) -> Result<BaselineLatency> {
    m.validate()?;
    req.validate()?;
    dev.validate()?;
    let e = m.elem_bytes;
    let prefill = graph_class_seconds(&build_prefill_graph(m, req.len_in), dev, e);

    // A single-layer graph scaled by the layer count gives the same sums
    // at a fraction of the cost.
    let one_layer = ModelConfig {
        n_layers: 1,
        ..m.clone()
    };
    let layers = m.n_layers as f64;
    let mut decode = [0.0; 6];
    let mut per_token_s = Vec::with_capacity(req.len_out as usize);
    for t in 1..=req.len_out {
        let kv = KVCacheState::new(&one_layer, req.decode_seq_len(t));
        let g = build_decode_graph(&one_layer, &kv);
        let cls = graph_class_seconds(&g, dev, e);
        let mut tok = 0.0;
        for (acc, v) in decode.iter_mut().zip(cls) {
            *acc += v * layers;
            tok += v * layers;
        }
        per_token_s.push(tok);
    }

    let mut breakdown = Vec::with_capacity(12);
    for (phase, table) in [(Phase::Prefill, &prefill), (Phase::Decode, &decode)] {
        for class in OpClass::ALL {
            breakdown.push(BaselineBreakdown {
                phase,
                op_class: class,
                seconds: table[class.index()],
            });
        }
    }
    let prefill_s: f64 = prefill.iter().sum();
    let decode_s: f64 = per_token_s.iter().sum();
    Ok(BaselineLatency {
        device: dev.name.clone(),
        prefill_s,
        decode_s,
        total_s: prefill_s + decode_s,
        per_token_s,
        breakdown,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::{Dims, FcLayer, NodeId, OpRole};

    fn node(kind: OpKind, dims: Dims, role: OpRole) -> OpNode {
        OpNode {
            id: NodeId(0),
            kind,
            dims,
            layer: 0,
            head: None,
            op_class: role.class(),
            role,
            deps: vec![],
        }
    }

    fn gemv(k: u64, n: u64) -> OpNode {
        node(OpKind::Gemv, Dims::Matrix { m: 1, k, n }, OpRole::Fc(FcLayer::Q))
    }

    #[test]
    fn intensity_examples() {
        let ai = arithmetic_intensity(&gemv(5120, 5120), 2).unwrap();
        assert!((ai - 1.0).abs() < 1e-3, "{ai}");
        let g = node(
            OpKind::Gemm,
            Dims::Matrix {
                m: 512,
                k: 5120,
                n: 5120,
            },
            OpRole::Fc(FcLayer::Q),
        );
        let ai = arithmetic_intensity(&g, 2).unwrap();
        let oracle = 2.0 * 512.0 * 5120.0 * 5120.0
            / (2.0 * (512.0 * 5120.0 + 5120.0 * 5120.0 + 512.0 * 5120.0));
        assert!((ai - oracle).abs() < 1e-9);
        // Counting the output as moved bytes; without it the ratio is ~465.
        assert!((ai - 426.67).abs() < 0.01, "{ai}");
        let t = node(OpKind::Transfer, Dims::Elements(64), OpRole::KvStore);
        assert_eq!(arithmetic_intensity(&t, 2).unwrap(), 0.0);
        let empty = node(OpKind::Transfer, Dims::Elements(0), OpRole::KvStore);
        assert!(arithmetic_intensity(&empty, 2).is_err());
    }

    #[test]
    fn qkv_layer_on_a100() {
        let dev = BaselineDevice::a100();
        let s: f64 = (0..3).map(|_| roofline_latency(&gemv(5120, 5120), &dev, 2)).sum();
        // 3 * (5120^2 + 2 * 5120) * 2 B / 2039 GB/s.
        assert!((s * 1e6 - 77.17).abs() < 0.1, "{}", s * 1e6);
        assert!(dev.ridge_point() > 152.0 && dev.ridge_point() < 154.0);
        assert!(arithmetic_intensity(&gemv(5120, 5120), 2).unwrap() < dev.ridge_point());
    }

    #[test]
    fn ridge_boundary() {
        let dev = BaselineDevice {
            name: "toy".into(),
            peak_flops: 2.0,
            mem_bw_bytes_per_s: 1.0,
            efficiency: 1.0,
        };
        // GEMM 1x1x1 at 1 B/elem: 2 FLOPs, 3 B -> pick bandwidth so AI = ridge.
        let n = gemv(1, 1);
        let ai = arithmetic_intensity(&n, 1).unwrap();
        let dev = BaselineDevice {
            peak_flops: ai * dev.mem_bw_bytes_per_s,
            ..dev
        };
        let compute = op_flops(&n) as f64 / dev.peak_flops;
        let memory = op_moved_bytes(&n, 1) as f64 / dev.mem_bw_bytes_per_s;
        assert!((compute - memory).abs() < 1e-12);
        assert!((roofline_latency(&n, &dev, 1) - compute).abs() < 1e-12);
    }

    #[test]
    fn prefill_only_when_no_output() {
        let m = ModelConfig::preset("opt-350m").unwrap();
        let r = baseline_inference_latency(&m, &InferenceRequest::new(16, 0).unwrap(), &BaselineDevice::a100())
            .unwrap();
        assert_eq!(r.decode_s, 0.0);
        assert!(r.prefill_s > 0.0);
        assert_eq!(r.total_s, r.prefill_s);
    }

    #[test]
    fn decode_share_opt13b() {
        let m = ModelConfig::preset("opt-13b").unwrap();
        let r = baseline_inference_latency(&m, &InferenceRequest::new(512, 32).unwrap(), &BaselineDevice::a100())
            .unwrap();
        assert!(r.decode_s / r.total_s >= 0.6, "{}", r.decode_s / r.total_s);
    }

    #[test]
    fn efficiency_validation() {
        let mut d = BaselineDevice::a100();
        d.efficiency = 0.0;
        assert!(d.validate().is_err());
        d.efficiency = 1.5;
        assert!(d.validate().is_err());
    }

    #[test]
    fn roofline_dominates_both_terms() {
        let dev = BaselineDevice::a100();
        for n in [gemv(4096, 4096), gemv(7, 3)] {
            let t = roofline_latency(&n, &dev, 2);
            assert!(t >= op_flops(&n) as f64 / dev.peak_flops);
            assert!(t >= op_moved_bytes(&n, 2) as f64 / dev.mem_bw_bytes_per_s);
        }
    }
}
