//! Workload partitioning: Q/K/V head allocation over HBM channels, FC weight
//! striping, bank layout, and head-to-core assignment on the SRAM side.

mod heads;

pub use heads::{
    allocate_qkv_heads, assign_heads_to_cores, pow2_floor, CoreAssignment, CorePhase,
    HeadAllocation, HeadRound, SliceEntry,
};

use serde::{Deserialize, Serialize};

use crate::arch::HardwareConfig;
use crate::error::{Error, Result};
use crate::workload::{Block, FcLayer, KvKind, ModelConfig, OpRole, Phase};

/// Rows of one weight matrix held by one channel. Global row `j` lives on
/// channel `j mod n_channels`; local row `l` goes to bank
/// `l mod banks_per_channel`, and bank `b` belongs to pseudo-channel
/// `b mod pch_per_channel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelSlice {
    pub channel: u64,
    pub rows: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightSlicePlan {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<FcLayer>,
    /// Output dimension; the striped axis.
    pub rows: u64,
    /// Input dimension; one row is `cols` contiguous elements.
    pub cols: u64,
    pub elem_bytes: u64,
    pub banks_per_channel: u64,
    pub page_bytes: u64,
    /// Pages one row occupies inside its bank.
    pub pages_per_row: u64,
    pub channels: Vec<ChannelSlice>,
}

pub fn slice_fc_weights(
    rows: u64,
    cols: u64,
    elem_bytes: u64,
    n_channels: u64,
    banks_per_channel: u64,
    page_bytes: u64,
) -> Result<WeightSlicePlan> {
    if rows == 0 || cols == 0 || elem_bytes == 0 || n_channels == 0 || banks_per_channel == 0 || page_bytes == 0 {
        return Err(Error::InvalidRequest("weight slicing needs positive dimensions".into()));
    }
    let row_bytes = cols * elem_bytes;
    let channels = (0..n_channels)
        .map(|c| {
            let r = rows / n_channels + u64::from(c < rows % n_channels);
            ChannelSlice {
                channel: c,
                rows: r,
                bytes: r * row_bytes,
            }
        })
        .collect();
    Ok(WeightSlicePlan {
        layer: None,
        rows,
        cols,
        elem_bytes,
        banks_per_channel,
        page_bytes,
        pages_per_row: row_bytes.div_ceil(page_bytes),
        channels,
    })
}

impl WeightSlicePlan {
    pub fn n_channels(&self) -> u64 {
        self.channels.len() as u64
    }

    /// Global rows stored on `channel`, in local order.
    pub fn rows_of(&self, channel: u64) -> impl Iterator<Item = u64> {
        let n = self.n_channels();
        (channel..self.rows).step_by(n as usize)
    }

    pub fn bank_of(&self, local_row: u64) -> u64 {
        local_row % self.banks_per_channel
    }

    /// Local rows held by each pseudo-channel of `channel`.
    pub fn pch_rows(&self, channel: u64, pch_per_channel: u64) -> Vec<u64> {
        let rows = self.channels[channel as usize].rows;
        let banks = self.banks_per_channel;
        (0..pch_per_channel)
            .map(|p| {
                // Banks with b mod pch == p; count local rows landing on them.
                let full = rows / banks;
                let rem = rows % banks;
                let banks_in_p = (banks - p).div_ceil(pch_per_channel);
                let rem_in_p = if rem > p { (rem - p).div_ceil(pch_per_channel) } else { 0 };
                full * banks_in_p + rem_in_p
            })
            .collect()
    }

    pub fn violations(&self) -> Vec<String> {
        let name = self.layer.map_or("fc".to_string(), |l| format!("{l:?}"));
        let mut v = Vec::new();
        let total: u64 = self.channels.iter().map(|c| c.rows).sum();
        if total != self.rows {
            v.push(format!("{name}: slices hold {total} rows of {}", self.rows));
        }
        for (i, c) in self.channels.iter().enumerate() {
            if c.channel != i as u64 {
                v.push(format!("{name}: slice {i} labelled channel {}", c.channel));
            }
            if c.bytes != c.rows * self.cols * self.elem_bytes {
                v.push(format!("{name}: channel {i} byte count inconsistent"));
            }
        }
        let max = self.channels.iter().map(|c| c.bytes).max().unwrap_or(0);
        let min = self.channels.iter().map(|c| c.bytes).min().unwrap_or(0);
        if max - min > self.cols * self.elem_bytes {
            v.push(format!("{name}: channel loads differ by more than one row"));
        }
        v
    }
}

/// Execution resource class an operator role is dispatched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    HbmPim,
    SramTcu,
    SramPim,
    Vcu,
    TransposeUnit,
    Link,
    Noc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTarget {
    pub role: OpRole,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QkvPlacement {
    pub layer: FcLayer,
    pub allocation: HeadAllocation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingPlan {
    pub model: String,
    pub phase: Phase,
    pub n_channels: u64,
    pub pch_per_channel: u64,
    pub qkv: Vec<QkvPlacement>,
    pub fc: Vec<WeightSlicePlan>,
    pub cores: Option<CoreAssignment>,
    /// Static weight bytes per channel summed over all layers.
    pub residency: Vec<u64>,
    pub channel_capacity: u64,
    pub targets: Vec<RoleTarget>,
}

impl MappingPlan {
    pub fn empty(phase: Phase) -> Self {
        Self {
            model: String::new(),
            phase,
            n_channels: 0,
            pch_per_channel: 0,
            qkv: Vec::new(),
            fc: Vec::new(),
            cores: None,
            residency: Vec::new(),
            channel_capacity: 0,
            targets: Vec::new(),
        }
    }

    pub fn target(&self, role: OpRole) -> Option<Target> {
        self.targets.iter().find(|t| t.role == role).map(|t| t.target)
    }

    pub fn qkv(&self, layer: FcLayer) -> Option<&HeadAllocation> {
        self.qkv.iter().find(|q| q.layer == layer).map(|q| &q.allocation)
    }

    pub fn fc(&self, layer: FcLayer) -> Option<&WeightSlicePlan> {
        self.fc.iter().find(|f| f.layer == Some(layer))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn phase_targets(phase: Phase) -> Vec<RoleTarget> {
    use OpRole::*;
    let fcs = [FcLayer::Q, FcLayer::K, FcLayer::V, FcLayer::Proj, FcLayer::Ffn1, FcLayer::Ffn2];
    let mut t = vec![
        (LayerNorm(Block::Attn), Target::Vcu),
        (LayerNorm(Block::Ffn), Target::Vcu),
        (ResAdd(Block::Attn), Target::Vcu),
        (ResAdd(Block::Ffn), Target::Vcu),
        (Gelu, Target::Vcu),
        (Softmax, Target::Vcu),
        (TransposeK, Target::TransposeUnit),
    ];
    match phase {
        Phase::Prefill => {
            for fc in fcs {
                t.push((Fc(fc), Target::SramTcu));
                t.push((WeightStream(fc), Target::Link));
                t.push((FcGather(fc), Target::Noc));
            }
            t.extend([
                (ScoreQk, Target::SramTcu),
                (ScoreSv, Target::SramTcu),
                (KvStore, Target::Link),
                (AttnGather, Target::Noc),
            ]);
        }
        Phase::Decode => {
            for fc in fcs {
                t.push((Fc(fc), Target::HbmPim));
            }
            for fc in [FcLayer::Q, FcLayer::Ffn1, FcLayer::Ffn2] {
                t.push((Upload(fc), Target::Link));
            }
            for fc in [FcLayer::Proj, FcLayer::Ffn1, FcLayer::Ffn2] {
                t.push((Download(fc), Target::Link));
            }
            for fc in [FcLayer::Q, FcLayer::K, FcLayer::V] {
                t.push((Deliver(fc), Target::Link));
            }
            t.extend([
                (CacheStream(KvKind::K), Target::Link),
                (CacheStream(KvKind::V), Target::Link),
                (ScoreQk, Target::SramPim),
                (ScoreSv, Target::SramPim),
                (SoftmaxGather, Target::Noc),
                (HeadReduce, Target::Noc),
                (HeadUpload, Target::Link),
            ]);
        }
    }
    t.into_iter()
        .map(|(role, target)| RoleTarget { role, target })
        .collect()
}

/// Stage-specific placement. Weights live in HBM with the same layout in
/// both phases; only the execution targets differ.
pub fn build_mapping_plan(m: &ModelConfig, hw: &HardwareConfig, phase: Phase) -> Result<MappingPlan> {
    m.validate()?;
    let hw = crate::arch::validate_config(hw)?;
    let n_channels = hw.n_channels();
    let banks = hw.stack.banks_per_channel();
    let page = hw.stack.page_bytes_per_pch;
    let e = m.elem_bytes;
    let d = m.d_emb;

    let mut qkv = Vec::with_capacity(3);
    for layer in [FcLayer::K, FcLayer::Q, FcLayer::V] {
        qkv.push(QkvPlacement {
            layer,
            allocation: allocate_qkv_heads(m.n_heads, n_channels, hw.n_cores, d)?,
        });
    }
    let mut fc = Vec::with_capacity(3);
    for (layer, rows, cols) in [
        (FcLayer::Proj, d, d),
        (FcLayer::Ffn1, m.d_ffn(), d),
        (FcLayer::Ffn2, d, m.d_ffn()),
    ] {
        let mut plan = slice_fc_weights(rows, cols, e, n_channels, banks, page)?;
        plan.layer = Some(layer);
        fc.push(plan);
    }

    let mut per_layer = vec![0u64; n_channels as usize];
    for q in &qkv {
        for (c, dims) in q.allocation.channel_dims().into_iter().enumerate() {
            per_layer[c] += dims * d * e;
        }
    }
    for f in &fc {
        for s in &f.channels {
            per_layer[s.channel as usize] += s.bytes;
        }
    }
    let residency: Vec<u64> = per_layer.iter().map(|b| b * m.n_layers).collect();
    let channel_capacity = hw.channel_capacity_bytes();
    if let Some((c, &max)) = residency.iter().enumerate().max_by_key(|(_, b)| **b) {
        if max > channel_capacity {
            return Err(Error::Capacity {
                what: format!("weights on HBM channel {c}"),
                required: max,
                available: channel_capacity,
            });
        }
    }

    Ok(MappingPlan {
        model: m.name.clone(),
        phase,
        n_channels,
        pch_per_channel: hw.stack.pch_per_channel,
        qkv,
        fc,
        cores: Some(assign_heads_to_cores(m.n_heads, hw.n_cores)?),
        residency,
        channel_capacity,
        targets: phase_targets(phase),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    /// Q/K/V output dimensions per channel, all three matrices.
    pub qkv_channel_load: Vec<u64>,
    /// max / mean of `qkv_channel_load`; 1.0 when perfectly balanced or empty.
    pub qkv_imbalance: f64,
    pub fc_imbalance: f64,
    pub total_residency: u64,
}

fn imbalance(load: &[u64]) -> f64 {
    let total: u64 = load.iter().sum();
    if total == 0 {
        return 1.0;
    }
    let mean = total as f64 / load.len() as f64;
    *load.iter().max().unwrap() as f64 / mean
}

pub fn validate_plan(plan: &MappingPlan) -> Result<PlanReport> {
    let mut v = Vec::new();
    let mut qkv_load = vec![0u64; plan.n_channels as usize];
    for q in &plan.qkv {
        v.extend(q.allocation.violations(&format!("{:?}", q.layer)));
        if q.allocation.n_channels != plan.n_channels {
            v.push(format!("{:?}: allocation spans {} channels", q.layer, q.allocation.n_channels));
            continue;
        }
        for (c, d) in q.allocation.channel_dims().into_iter().enumerate() {
            qkv_load[c] += d;
        }
    }
    let mut fc_load = vec![0u64; plan.n_channels as usize];
    for f in &plan.fc {
        v.extend(f.violations());
        for s in &f.channels {
            if let Some(slot) = fc_load.get_mut(s.channel as usize) {
                *slot += s.bytes;
            }
        }
    }
    if let Some(c) = &plan.cores {
        v.extend(c.violations());
    }
    for (c, &bytes) in plan.residency.iter().enumerate() {
        if bytes > plan.channel_capacity {
            v.push(format!(
                "channel {c}: {bytes} B resident exceeds capacity {} B",
                plan.channel_capacity
            ));
        }
    }
    if !v.is_empty() {
        return Err(Error::InvalidPlan(v));
    }
    Ok(PlanReport {
        qkv_imbalance: imbalance(&qkv_load),
        qkv_channel_load: qkv_load,
        fc_imbalance: imbalance(&fc_load),
        total_residency: plan.residency.iter().sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hw() -> HardwareConfig {
        HardwareConfig::preset("hpim-default").unwrap()
    }

    #[test]
    fn square_projection_striping() {
        let p = slice_fc_weights(5120, 5120, 2, 64, 32, 1024).unwrap();
        assert!(p.channels.iter().all(|c| c.rows == 80));
        assert_eq!(p.rows_of(3).take(3).collect::<Vec<_>>(), vec![3, 67, 131]);
        assert_eq!(p.pch_rows(0, 2), vec![40, 40]);
    }

    #[test]
    fn wide_ffn_row_layout() {
        let p = slice_fc_weights(5120, 20480, 2, 64, 32, 1024).unwrap();
        assert!(p.channels.iter().all(|c| c.rows == 80));
        assert_eq!(p.pages_per_row, 40);
        assert_eq!(p.channels[0].bytes, 80 * 40 * 1024);
        assert_eq!(p.bank_of(33), 1);
    }

    #[test]
    fn single_element_matrix() {
        let p = slice_fc_weights(1, 1, 2, 64, 32, 1024).unwrap();
        assert_eq!(p.channels[0].rows, 1);
        assert_eq!(p.channels.iter().filter(|c| c.rows == 0).count(), 63);
        assert!(p.violations().is_empty());
    }

    #[test]
    fn pch_rows_partition_channel() {
        for rows in [1u64, 7, 31, 32, 33, 80, 1000] {
            let p = slice_fc_weights(rows, 4, 2, 1, 32, 1024).unwrap();
            let split = p.pch_rows(0, 2);
            assert_eq!(split.iter().sum::<u64>(), rows);
            assert!(split[0] - split[1] <= 1, "{rows}: {split:?}");
            let by_bank = (0..rows).filter(|l| p.bank_of(*l) % 2 == 0).count() as u64;
            assert_eq!(split[0], by_bank);
        }
    }

    #[test]
    fn opt13b_decode_plan() {
        let m = ModelConfig::preset("opt-13b").unwrap();
        let plan = build_mapping_plan(&m, &hw(), Phase::Decode).unwrap();
        let expected = allocate_qkv_heads(40, 64, 32, 5120).unwrap();
        assert_eq!(plan.qkv(FcLayer::Q).unwrap(), &expected);
        assert_eq!(plan.target(OpRole::Fc(FcLayer::Q)), Some(Target::HbmPim));
        assert_eq!(plan.target(OpRole::ScoreQk), Some(Target::SramPim));
        assert_eq!(plan.target(OpRole::Softmax), Some(Target::Vcu));
        let report = validate_plan(&plan).unwrap();
        assert_eq!(report.qkv_imbalance, 1.0);
        assert_eq!(report.fc_imbalance, 1.0);
    }

    #[test]
    fn opt13b_prefill_avoids_hbm_compute() {
        let m = ModelConfig::preset("opt-13b").unwrap();
        let plan = build_mapping_plan(&m, &hw(), Phase::Prefill).unwrap();
        assert!(plan.targets.iter().all(|t| t.target != Target::HbmPim));
        assert_eq!(plan.target(OpRole::Fc(FcLayer::Ffn1)), Some(Target::SramTcu));
        assert_eq!(plan.target(OpRole::Upload(FcLayer::Q)), None);
    }

    #[test]
    fn opt30b_residency_fits() {
        let m = ModelConfig::preset("opt-30b").unwrap();
        let plan = build_mapping_plan(&m, &hw(), Phase::Decode).unwrap();
        let max = *plan.residency.iter().max().unwrap();
        let expected = 12 * 7168 * 7168 * 2 * 48 / 64;
        assert_eq!(max, expected);
        assert!((max as f64 / 1e9 - 0.925).abs() < 0.01);
        assert!(max < plan.channel_capacity);
    }

    #[test]
    fn residency_overflow_is_capacity_error() {
        let m = ModelConfig::preset("opt-30b").unwrap();
        let mut hw = hw();
        hw.n_stacks = 1;
        hw.link_map = None;
        assert!(matches!(
            build_mapping_plan(&m, &hw, Phase::Decode),
            Err(Error::Capacity { .. })
        ));
    }

    #[test]
    fn duplicated_head_invalidates_plan() {
        let m = ModelConfig::preset("opt-13b").unwrap();
        let mut plan = build_mapping_plan(&m, &hw(), Phase::Decode).unwrap();
        plan.qkv[0].allocation.rounds[1].first_head = 30;
        let err = validate_plan(&plan).unwrap_err();
        assert!(err.to_string().contains("head 30"), "{err}");
    }

    #[test]
    fn empty_plan_is_valid() {
        let r = validate_plan(&MappingPlan::empty(Phase::Decode)).unwrap();
        assert_eq!(r.total_residency, 0);
        assert!(r.qkv_channel_load.is_empty());
    }

    #[test]
    fn plan_json_round_trip() {
        let m = ModelConfig::preset("opt-350m").unwrap();
        let plan = build_mapping_plan(&m, &hw(), Phase::Decode).unwrap();
        let back: MappingPlan = serde_json::from_str(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
    }
}
