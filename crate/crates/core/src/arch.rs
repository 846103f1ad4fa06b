//! Machine description: SRAM-PIM cores, HBM-PIM stacks and the links
//! between them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineDevice;
use crate::error::{Error, Result};
use crate::presets;
use crate::timing::CostModelParams;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SramCoreConfig {
    pub tcu_rows: u64,
    pub tcu_cols: u64,
    pub vcu_lanes: u64,
    pub pim_mgs: u64,
    pub macros_per_mg: u64,
    pub macro_bytes: u64,
    pub mults_per_macro: u64,
    pub act_mem_bytes: u64,
    pub temp_mem_bytes: u64,
    pub freq_hz: u64,
}

impl SramCoreConfig {
    /// Bytes held by the PIM-unit macros of one core.
    pub fn pim_bytes(&self) -> u64 {
        self.pim_mgs * self.macros_per_mg * self.macro_bytes
    }

    /// Multiply-accumulates the PIM unit retires per cycle.
    pub fn pim_macs_per_cycle(&self) -> u64 {
        self.pim_mgs * self.macros_per_mg * self.mults_per_macro
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HbmStackConfig {
    pub dies_per_stack: u64,
    pub gbits_per_die: u64,
    pub channels_per_die: u64,
    pub pch_per_channel: u64,
    pub bg_per_channel: u64,
    pub banks_per_bg: u64,
    pub page_bytes_per_pch: u64,
    pub mults_per_pu: u64,
    pub global_buffer_bytes_per_pch: u64,
    pub freq_hz: u64,
    /// External bandwidth of one stack.
    pub ext_bw_bytes_per_s: u64,
    pub t_act_cycles: u64,
    /// Global-buffer fill rate when broadcasting the input vector.
    pub bcast_bytes_per_cycle: u64,
}

impl HbmStackConfig {
    pub fn banks_per_channel(&self) -> u64 {
        self.bg_per_channel * self.banks_per_bg
    }

    pub fn banks_per_pch(&self) -> u64 {
        self.banks_per_channel() / self.pch_per_channel
    }

    pub fn channels(&self) -> u64 {
        self.dies_per_stack * self.channels_per_die
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.dies_per_stack * self.gbits_per_die * (1u64 << 30) / 8
    }
}

fn default_elem_bytes() -> u64 {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardwareConfig {
    #[serde(default)]
    pub name: String,
    pub n_cores: u64,
    pub n_stacks: u64,
    pub core: SramCoreConfig,
    pub stack: HbmStackConfig,
    /// Datapath element width of the HBM processing units.
    #[serde(default = "default_elem_bytes")]
    pub elem_bytes: u64,
    pub noc_hop_cycles: u64,
    pub noc_bytes_per_cycle: u64,
    pub dispatch_overhead_cycles: u64,
    /// `link_map[core]` lists the HBM channels that core reaches directly.
    /// Defaults to contiguous blocks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_map: Option<Vec<Vec<u64>>>,
}

/// A hardware document: the machine plus optional cost-model overrides and
/// baseline devices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareDocument {
    #[serde(flatten)]
    pub hardware: HardwareConfig,
    #[serde(default)]
    pub cost_model: CostModelParams,
    #[serde(default)]
    pub baselines: Vec<BaselineDevice>,
}

impl HardwareDocument {
    pub fn parse(source: &str) -> Result<Self> {
        let mut doc: HardwareDocument = serde_json::from_str(source)?;
        doc.hardware = validate_config(&doc.hardware)?;
        doc.cost_model.validate()?;
        for b in &doc.baselines {
            b.validate()?;
        }
        Ok(doc)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = presets::hardware(name).ok_or_else(|| Error::UnknownPreset(name.to_string()))?;
        Self::parse(text)
    }
}

impl HardwareConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(HardwareDocument::preset(name)?.hardware)
    }

    pub fn n_channels(&self) -> u64 {
        self.n_stacks * self.stack.channels()
    }

    pub fn n_pch(&self) -> u64 {
        self.n_channels() * self.stack.pch_per_channel
    }

    pub fn n_banks(&self) -> u64 {
        self.n_channels() * self.stack.banks_per_channel()
    }

    pub fn channel_capacity_bytes(&self) -> u64 {
        self.stack.capacity_bytes() / self.stack.channels()
    }

    /// Bytes per core clock each core link moves: the aggregate external
    /// bandwidth shared evenly by the cores.
    pub fn link_bytes_per_cycle(&self) -> f64 {
        (self.n_stacks * self.stack.ext_bw_bytes_per_s) as f64
            / self.n_cores as f64
            / self.core.freq_hz as f64
    }

    /// Channels reachable from each core.
    pub fn link_map(&self) -> Vec<Vec<u64>> {
        match &self.link_map {
            Some(map) => map.clone(),
            None => default_link_map(self.n_cores, self.n_channels()),
        }
    }

    /// Owning core of every channel.
    pub fn channel_owner(&self) -> Vec<u64> {
        let mut owner = vec![0; self.n_channels() as usize];
        for (core, chans) in self.link_map().iter().enumerate() {
            for &c in chans {
                owner[c as usize] = core as u64;
            }
        }
        owner
    }
}

/// Contiguous channel blocks per core; when there are fewer channels than
/// cores, channels are spread so every `n_cores / n_channels`-th core owns one.
pub fn default_link_map(n_cores: u64, n_channels: u64) -> Vec<Vec<u64>> {
    let mut map = vec![Vec::new(); n_cores as usize];
    for c in 0..n_channels {
        let core = c * n_cores / n_channels;
        map[core as usize].push(c);
    }
    map
}

/// Check every structural invariant; returns the config with an explicit
/// link map.
pub fn validate_config(hw: &HardwareConfig) -> Result<HardwareConfig> {
    let bad = |msg: String| Err(Error::InvalidHardware(msg));
    let counts = [
        ("n_cores", hw.n_cores),
        ("n_stacks", hw.n_stacks),
        ("core.tcu_rows", hw.core.tcu_rows),
        ("core.tcu_cols", hw.core.tcu_cols),
        ("core.vcu_lanes", hw.core.vcu_lanes),
        ("core.pim_mgs", hw.core.pim_mgs),
        ("core.macros_per_mg", hw.core.macros_per_mg),
        ("core.macro_bytes", hw.core.macro_bytes),
        ("core.mults_per_macro", hw.core.mults_per_macro),
        ("core.freq_hz", hw.core.freq_hz),
        ("stack.dies_per_stack", hw.stack.dies_per_stack),
        ("stack.gbits_per_die", hw.stack.gbits_per_die),
        ("stack.channels_per_die", hw.stack.channels_per_die),
        ("stack.pch_per_channel", hw.stack.pch_per_channel),
        ("stack.bg_per_channel", hw.stack.bg_per_channel),
        ("stack.banks_per_bg", hw.stack.banks_per_bg),
        ("stack.page_bytes_per_pch", hw.stack.page_bytes_per_pch),
        ("stack.mults_per_pu", hw.stack.mults_per_pu),
        ("stack.freq_hz", hw.stack.freq_hz),
        ("stack.ext_bw_bytes_per_s", hw.stack.ext_bw_bytes_per_s),
        ("stack.bcast_bytes_per_cycle", hw.stack.bcast_bytes_per_cycle),
        ("elem_bytes", hw.elem_bytes),
        ("noc_bytes_per_cycle", hw.noc_bytes_per_cycle),
    ];
    for (name, v) in counts {
        if v == 0 {
            return bad(format!("{name} must be positive"));
        }
    }
    if hw.stack.banks_per_channel() % hw.stack.pch_per_channel != 0 {
        return bad(format!(
            "{} banks per channel cannot be split over {} pseudo-channels",
            hw.stack.banks_per_channel(),
            hw.stack.pch_per_channel
        ));
    }
    let n_channels = hw.n_channels();
    if !n_channels.is_power_of_two() {
        return bad(format!(
            "channel count {n_channels} must be a power of two for the head allocation"
        ));
    }
    let map = hw.link_map();
    if map.len() as u64 != hw.n_cores {
        return bad(format!(
            "link_map has {} entries for {} cores",
            map.len(),
            hw.n_cores
        ));
    }
    let mut seen = vec![None::<usize>; n_channels as usize];
    for (core, chans) in map.iter().enumerate() {
        for &c in chans {
            if c >= n_channels {
                return bad(format!("link_map: core {core} lists unknown channel {c}"));
            }
            if let Some(other) = seen[c as usize] {
                return bad(format!(
                    "link_map: channel {c} assigned to cores {other} and {core}"
                ));
            }
            seen[c as usize] = Some(core);
        }
    }
    if let Some(c) = seen.iter().position(Option::is_none) {
        return bad(format!("link_map: channel {c} is not reachable from any core"));
    }
    let mut out = hw.clone();
    out.link_map = Some(map);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub tcu_peak_flops: f64,
    pub pimunit_peak_flops_per_core: f64,
    pub pimunit_peak_flops_total: f64,
    pub hbm_pim_peak_flops: f64,
    pub sram_capacity_bytes: u64,
    pub dram_capacity_bytes: u64,
    pub dram_ext_bw: f64,
    pub dram_internal_bw: f64,
    pub n_channels: u64,
    pub n_pch: u64,
    pub n_banks: u64,
}

pub fn derive_metrics(hw: &HardwareConfig) -> DerivedMetrics {
    let c = &hw.core;
    let s = &hw.stack;
    let f_core = c.freq_hz as f64;
    let f_hbm = s.freq_hz as f64;
    let n_banks = hw.n_banks();
    let pim_per_core = (c.pim_macs_per_cycle() * 2) as f64 * f_core;
    DerivedMetrics {
        tcu_peak_flops: (hw.n_cores * c.tcu_rows * c.tcu_cols * 2) as f64 * f_core,
        pimunit_peak_flops_per_core: pim_per_core,
        pimunit_peak_flops_total: pim_per_core * hw.n_cores as f64,
        hbm_pim_peak_flops: (n_banks * s.mults_per_pu * 2) as f64 * f_hbm,
        sram_capacity_bytes: hw.n_cores * (c.pim_bytes() + c.act_mem_bytes + c.temp_mem_bytes),
        dram_capacity_bytes: hw.n_stacks * s.capacity_bytes(),
        dram_ext_bw: (hw.n_stacks * s.ext_bw_bytes_per_s) as f64,
        dram_internal_bw: (n_banks * s.mults_per_pu * hw.elem_bytes) as f64 * f_hbm,
        n_channels: hw.n_channels(),
        n_pch: hw.n_pch(),
        n_banks,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ResourceId(pub u32);

impl fmt::Display for ResourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CoreUnit {
    Tcu,
    Vcu,
    PimUnit,
    TransposeUnit,
    TransferUnit,
}

impl CoreUnit {
    pub const ALL: [CoreUnit; 5] = [
        CoreUnit::Tcu,
        CoreUnit::Vcu,
        CoreUnit::PimUnit,
        CoreUnit::TransposeUnit,
        CoreUnit::TransferUnit,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResourceKind {
    Core { core: u32, unit: CoreUnit },
    Pch { pch: u32, channel: u32, stack: u32 },
    Link { core: u32 },
    Noc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subsystem {
    SramPim,
    HbmPim,
    Interconnect,
}

impl ResourceKind {
    pub fn subsystem(&self) -> Subsystem {
        match self {
            ResourceKind::Core { .. } => Subsystem::SramPim,
            ResourceKind::Pch { .. } => Subsystem::HbmPim,
            ResourceKind::Link { .. } | ResourceKind::Noc => Subsystem::Interconnect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resource {
    pub id: ResourceId,
    pub kind: ResourceKind,
    pub name: String,
}

/// Index arithmetic over the enumerated resource list: core units first
/// (core-major), then pseudo-channels, then core links, then the NoC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResourceLayout {
    pub n_cores: u32,
    pub n_pch: u32,
}

impl ResourceLayout {
    pub fn new(hw: &HardwareConfig) -> Self {
        Self {
            n_cores: hw.n_cores as u32,
            n_pch: hw.n_pch() as u32,
        }
    }

    pub fn core_unit(&self, core: u32, unit: CoreUnit) -> ResourceId {
        ResourceId(core * CoreUnit::ALL.len() as u32 + unit as u32)
    }

    pub fn pch(&self, pch: u32) -> ResourceId {
        ResourceId(self.n_cores * CoreUnit::ALL.len() as u32 + pch)
    }

    pub fn link(&self, core: u32) -> ResourceId {
        ResourceId(self.n_cores * CoreUnit::ALL.len() as u32 + self.n_pch + core)
    }

    pub fn noc(&self) -> ResourceId {
        ResourceId(self.n_cores * (CoreUnit::ALL.len() as u32 + 1) + self.n_pch)
    }

    pub fn len(&self) -> usize {
        self.noc().0 as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn enumerate_resources(hw: &HardwareConfig) -> Result<Vec<Resource>> {
    let hw = validate_config(hw)?;
    let layout = ResourceLayout::new(&hw);
    let mut out = Vec::with_capacity(layout.len());
    for core in 0..layout.n_cores {
        for unit in CoreUnit::ALL {
            out.push(Resource {
                id: layout.core_unit(core, unit),
                kind: ResourceKind::Core { core, unit },
                name: format!("core{core}.{unit:?}"),
            });
        }
    }
    let pch_per_channel = hw.stack.pch_per_channel as u32;
    let channels_per_stack = hw.stack.channels() as u32;
    for pch in 0..layout.n_pch {
        let channel = pch / pch_per_channel;
        out.push(Resource {
            id: layout.pch(pch),
            kind: ResourceKind::Pch {
                pch,
                channel,
                stack: channel / channels_per_stack,
            },
            name: format!("pch{pch}"),
        });
    }
    for core in 0..layout.n_cores {
        out.push(Resource {
            id: layout.link(core),
            kind: ResourceKind::Link { core },
            name: format!("link{core}"),
        });
    }
    out.push(Resource {
        id: layout.noc(),
        kind: ResourceKind::Noc,
        name: "noc".into(),
    });
    debug_assert!(out.iter().enumerate().all(|(i, r)| r.id.0 as usize == i));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_hw() -> HardwareConfig {
        HardwareConfig::preset("hpim-default").unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        ((a - b) / b).abs() <= rel
    }

    #[test]
    fn default_metrics_reproduce_tables() {
        let m = derive_metrics(&default_hw());
        assert!(close(m.tcu_peak_flops, 262.144e12, 1e-12));
        assert!(close(m.pimunit_peak_flops_per_core, 4.096e12, 1e-12));
        assert!(close(m.pimunit_peak_flops_total, 131.072e12, 1e-12));
        assert!(close(m.hbm_pim_peak_flops, 65.536e12, 1e-12));
        assert_eq!(m.n_banks, 2048);
        assert_eq!(m.n_channels, 64);
        assert_eq!(m.n_pch, 128);
        assert_eq!(m.sram_capacity_bytes, 46_080 * 1024);
        assert_eq!(m.sram_capacity_bytes, 45 << 20);
        assert_eq!(m.dram_capacity_bytes, 96 << 30);
        assert_eq!(m.dram_ext_bw, 3276e9);
        assert!(close(m.dram_internal_bw, 65.536e12, 1e-12));
    }

    #[test]
    fn banks_per_pch_default() {
        assert_eq!(default_hw().stack.banks_per_pch(), 16);
        assert_eq!(default_hw().channel_capacity_bytes(), 3 << 29);
    }

    #[test]
    fn zero_stacks_rejected() {
        let mut hw = default_hw();
        hw.n_stacks = 0;
        assert!(matches!(validate_config(&hw), Err(Error::InvalidHardware(_))));
    }

    #[test]
    fn overlapping_link_map_rejected() {
        let mut hw = default_hw();
        let mut map = hw.link_map();
        map[1].push(0);
        hw.link_map = Some(map);
        let err = validate_config(&hw).unwrap_err();
        assert!(err.to_string().contains("channel 0"), "{err}");
    }

    #[test]
    fn link_map_gap_rejected() {
        let mut hw = default_hw();
        let mut map = hw.link_map();
        map[31].pop();
        hw.link_map = Some(map);
        assert!(validate_config(&hw).is_err());
    }

    #[test]
    fn non_power_of_two_channels_rejected() {
        let mut hw = default_hw();
        hw.n_stacks = 3;
        let err = validate_config(&hw).unwrap_err();
        assert!(err.to_string().contains("power of two"), "{err}");
    }

    #[test]
    fn default_link_map_is_two_channels_per_core() {
        let map = default_hw().link_map();
        assert_eq!(map.len(), 32);
        for (core, chans) in map.iter().enumerate() {
            assert_eq!(chans, &vec![2 * core as u64, 2 * core as u64 + 1]);
        }
    }

    #[test]
    fn resource_counts() {
        let r = enumerate_resources(&default_hw()).unwrap();
        assert_eq!(r.len(), 321);
        let mut hw = default_hw();
        hw.n_cores = 1;
        hw.n_stacks = 1;
        hw.link_map = None;
        let r = enumerate_resources(&hw).unwrap();
        assert_eq!(r.len(), 39);
        hw.n_cores = 0;
        assert!(enumerate_resources(&hw).is_err());
    }

    #[test]
    fn resource_order_is_stable() {
        let a = enumerate_resources(&default_hw()).unwrap();
        let b = enumerate_resources(&default_hw()).unwrap();
        assert_eq!(a, b);
        let layout = ResourceLayout::new(&default_hw());
        assert_eq!(layout.len(), 321);
        assert_eq!(a[layout.noc().0 as usize].kind, ResourceKind::Noc);
        assert_eq!(
            a[layout.link(3).0 as usize].kind,
            ResourceKind::Link { core: 3 }
        );
        assert_eq!(
            a[layout.core_unit(2, CoreUnit::PimUnit).0 as usize].kind,
            ResourceKind::Core {
                core: 2,
                unit: CoreUnit::PimUnit
            }
        );
    }

    #[test]
    fn fewer_channels_than_cores() {
        let map = default_link_map(32, 16);
        assert_eq!(map.iter().map(Vec::len).sum::<usize>(), 16);
        assert_eq!(map[0], vec![0]);
        assert!(map[1].is_empty());
        assert_eq!(map[2], vec![1]);
    }
}
