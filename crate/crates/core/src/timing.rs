//! Closed-form cycle costs for every execution unit. All results are in core
//! clock cycles.

use serde::{Deserialize, Serialize};

use crate::arch::{HardwareConfig, HbmStackConfig, SramCoreConfig};
use crate::error::{Error, Result};
use crate::workload::OpKind;

/// VCU passes over the data per element-wise kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VcuPasses {
    pub layer_norm: u64,
    pub softmax: u64,
    pub gelu: u64,
    pub res_add: u64,
}

impl Default for VcuPasses {
    fn default() -> Self {
        Self {
            layer_norm: 5,
            softmax: 5,
            gelu: 8,
            res_add: 1,
        }
    }
}

fn default_pim_write() -> u64 {
    64
}

fn default_transpose_words() -> u64 {
    64
}

/// Parameters the hardware description leaves open. Unset NoC terms fall
/// back to the hardware's hop latency and NoC width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Systolic pipeline fill + drain per output tile; `None` means
    /// `rows + cols - 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcu_fill_drain_cycles: Option<u64>,
    #[serde(default = "default_pim_write")]
    pub pim_write_bytes_per_cycle: u64,
    #[serde(default = "default_transpose_words")]
    pub transpose_words_per_cycle: u64,
    #[serde(default)]
    pub vcu_passes: VcuPasses,
    /// All-gather startup per recursive-doubling step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noc_alpha_cycles: Option<u64>,
    /// All-gather cycles per byte per step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noc_beta_cycles_per_byte: Option<f64>,
    /// Per-link bandwidth override in bytes per core cycle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link_bytes_per_cycle: Option<f64>,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            tcu_fill_drain_cycles: None,
            pim_write_bytes_per_cycle: default_pim_write(),
            transpose_words_per_cycle: default_transpose_words(),
            vcu_passes: VcuPasses::default(),
            noc_alpha_cycles: None,
            noc_beta_cycles_per_byte: None,
            link_bytes_per_cycle: None,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidHardware(format!("cost_model.{what} must be positive")));
        if self.pim_write_bytes_per_cycle == 0 {
            return bad("pim_write_bytes_per_cycle");
        }
        if self.transpose_words_per_cycle == 0 {
            return bad("transpose_words_per_cycle");
        }
        let p = &self.vcu_passes;
        if p.layer_norm == 0 || p.softmax == 0 || p.gelu == 0 || p.res_add == 0 {
            return bad("vcu_passes");
        }
        if self.tcu_fill_drain_cycles == Some(0) {
            return bad("tcu_fill_drain_cycles");
        }
        if self.noc_alpha_cycles == Some(0) {
            return bad("noc_alpha_cycles");
        }
        if let Some(b) = self.noc_beta_cycles_per_byte {
            if !(b > 0.0 && b.is_finite()) {
                return bad("noc_beta_cycles_per_byte");
            }
        }
        if let Some(b) = self.link_bytes_per_cycle {
            if !(b > 0.0 && b.is_finite()) {
                return bad("link_bytes_per_cycle");
            }
        }
        Ok(())
    }

    /// Merge a sparse JSON override document into these parameters.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        if let (Some(dst), Some(src)) = (base.as_object_mut(), overrides.as_object()) {
            for (k, v) in src {
                match (dst.get_mut(k), v) {
                    (Some(serde_json::Value::Object(d)), serde_json::Value::Object(s)) => {
                        for (kk, vv) in s {
                            d.insert(kk.clone(), vv.clone());
                        }
                    }
                    _ => {
                        dst.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        let out: Self = serde_json::from_value(base)?;
        out.validate()?;
        Ok(out)
    }
}

fn ceil_div(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

/// Output-stationary tiling over a `rows x cols` array.
pub fn tcu_gemm_cycles(m: u64, k: u64, n: u64, core: &SramCoreConfig, fill_drain: u64) -> u64 {
    ceil_div(m, core.tcu_rows) * ceil_div(n, core.tcu_cols) * (k + fill_drain)
}

/// In-SRAM GEMV compute plus macro writes, without dispatch overhead.
pub fn pimunit_gemv_cycles(
    rows: u64,
    cols: u64,
    writes_bytes: u64,
    core: &SramCoreConfig,
    elem_bytes: u64,
    write_bytes_per_cycle: u64,
) -> Result<u64> {
    let bytes = rows * cols * elem_bytes;
    if bytes > core.pim_bytes() {
        return Err(Error::PimCapacity {
            bytes,
            capacity: core.pim_bytes(),
        });
    }
    Ok(ceil_div(rows * cols, core.pim_macs_per_cycle()) + ceil_div(writes_bytes, write_bytes_per_cycle))
}

/// Bank-level GEMV on one pseudo-channel, in HBM clock cycles: broadcast of
/// the input into the global buffer, MACs in every bank, and serialized row
/// activations.
pub fn hbm_gemv_cycles(elements_on_pch: u64, input_len: u64, stack: &HbmStackConfig, elem_bytes: u64) -> u64 {
    let banks = stack.banks_per_pch();
    let broadcast = ceil_div(input_len * elem_bytes, stack.bcast_bytes_per_cycle);
    let compute = ceil_div(elements_on_pch, banks * stack.mults_per_pu);
    let activations =
        ceil_div(elements_on_pch * elem_bytes, banks * stack.page_bytes_per_pch) * stack.t_act_cycles;
    broadcast + compute + activations
}

pub fn link_transfer_cycles(bytes: u64, bytes_per_cycle: f64, overhead: u64) -> u64 {
    (bytes as f64 / bytes_per_cycle).ceil() as u64 + overhead
}

/// Recursive-doubling all-gather: `ceil(log2 group)` steps of
/// `alpha + beta * bytes`.
pub fn noc_allgather_cycles(group: u64, bytes: u64, alpha: u64, beta: f64) -> u64 {
    if group <= 1 {
        return 0;
    }
    let steps = 64 - (group - 1).leading_zeros() as u64;
    steps * (alpha + (beta * bytes as f64).ceil() as u64)
}

/// Cost functions bound to one machine.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub hw: HardwareConfig,
    pub params: CostModelParams,
    overhead: u64,
    fill_drain: u64,
    link_bw: f64,
    noc_alpha: u64,
    noc_beta: f64,
}

impl CostModel {
    pub fn new(hw: &HardwareConfig, params: &CostModelParams) -> Self {
        Self {
            hw: hw.clone(),
            params: params.clone(),
            overhead: hw.dispatch_overhead_cycles,
            fill_drain: params
                .tcu_fill_drain_cycles
                .unwrap_or(hw.core.tcu_rows + hw.core.tcu_cols - 1),
            link_bw: params
                .link_bytes_per_cycle
                .unwrap_or_else(|| hw.link_bytes_per_cycle()),
            noc_alpha: params.noc_alpha_cycles.unwrap_or(hw.noc_hop_cycles),
            noc_beta: params
                .noc_beta_cycles_per_byte
                .unwrap_or(1.0 / hw.noc_bytes_per_cycle as f64),
        }
    }

    pub fn overhead(&self) -> u64 {
        self.overhead
    }

    pub fn link_bytes_per_cycle(&self) -> f64 {
        self.link_bw
    }

    pub fn tcu_gemm(&self, m: u64, k: u64, n: u64) -> u64 {
        tcu_gemm_cycles(m, k, n, &self.hw.core, self.fill_drain) + self.overhead
    }

    pub fn pim_gemv(&self, rows: u64, cols: u64, writes_bytes: u64) -> Result<u64> {
        Ok(pimunit_gemv_cycles(
            rows,
            cols,
            writes_bytes,
            &self.hw.core,
            self.hw.elem_bytes,
            self.params.pim_write_bytes_per_cycle,
        )? + self.overhead)
    }

    /// GEMV larger than the macros: split along `cols` into passes that each
    /// fit, one dispatch per pass.
    pub fn pim_gemv_tiled(&self, rows: u64, cols: u64, writes_bytes: u64) -> Result<u64> {
        let cap_elems = self.hw.core.pim_bytes() / self.hw.elem_bytes;
        if rows * cols <= cap_elems {
            return self.pim_gemv(rows, cols, writes_bytes);
        }
        if rows > cap_elems {
            return Err(Error::PimCapacity {
                bytes: rows * self.hw.elem_bytes,
                capacity: self.hw.core.pim_bytes(),
            });
        }
        let per_pass = cap_elems / rows;
        let mut total = 0;
        let mut left = cols;
        let mut writes = writes_bytes;
        while left > 0 {
            let c = left.min(per_pass);
            total += self.pim_gemv(rows, c, writes)?;
            writes = 0;
            left -= c;
        }
        Ok(total)
    }

    pub fn vcu_passes(&self, kind: OpKind) -> Result<u64> {
        let p = &self.params.vcu_passes;
        match kind {
            OpKind::Softmax => Ok(p.softmax),
            OpKind::LayerNorm => Ok(p.layer_norm),
            OpKind::Gelu => Ok(p.gelu),
            OpKind::ResAdd => Ok(p.res_add),
            other => Err(Error::UnsupportedOp(format!("{other:?} on the VCU"))),
        }
    }

    pub fn vcu(&self, kind: OpKind, elements: u64, tp: u64) -> Result<u64> {
        let passes = self.vcu_passes(kind)?;
        let lanes = tp.max(1) * self.hw.core.vcu_lanes;
        Ok(passes * ceil_div(elements, lanes) + self.overhead)
    }

    pub fn transpose(&self, rows: u64, cols: u64) -> u64 {
        ceil_div(rows * cols, self.params.transpose_words_per_cycle) + self.overhead
    }

    pub fn allgather(&self, group: u64, bytes: u64) -> u64 {
        noc_allgather_cycles(group, bytes, self.noc_alpha, self.noc_beta)
    }

    /// HBM GEMV converted to core cycles.
    pub fn hbm_gemv(&self, elements_on_pch: u64, input_len: u64) -> u64 {
        let hbm = hbm_gemv_cycles(elements_on_pch, input_len, &self.hw.stack, self.hw.elem_bytes);
        self.hbm_to_core(hbm)
    }

    pub fn hbm_to_core(&self, hbm_cycles: u64) -> u64 {
        let (fc, fh) = (self.hw.core.freq_hz, self.hw.stack.freq_hz);
        if fc == fh {
            hbm_cycles
        } else {
            ((hbm_cycles as u128 * fc as u128).div_ceil(fh as u128)) as u64
        }
    }

    pub fn link(&self, bytes: u64) -> u64 {
        link_transfer_cycles(bytes, self.link_bw, self.overhead)
    }

    pub fn cycles_to_us(&self, cycles: u64) -> f64 {
        cycles as f64 * 1e6 / self.hw.core.freq_hz as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model() -> CostModel {
        CostModel::new(&HardwareConfig::preset("hpim-default").unwrap(), &CostModelParams::default())
    }

    #[test]
    fn tcu_examples() {
        let cm = model();
        assert_eq!(cm.tcu_gemm(64, 64, 64), 191 + 32);
        assert_eq!(cm.tcu_gemm(1, 1, 1), 128 + 32);
        assert_eq!(cm.tcu_gemm(512, 5120, 5120), 3_358_080 + 32);
    }

    #[test]
    fn pim_examples() {
        let cm = model();
        assert_eq!(cm.pim_gemv(128, 1024, 0).unwrap(), 64 + 32);
        assert_eq!(cm.pim_gemv(0, 0, 0).unwrap(), 32);
        assert_eq!(cm.pim_gemv(128, 1024, 256).unwrap(), 64 + 4 + 32);
        assert!(matches!(
            cm.pim_gemv(1024, 1024, 0),
            Err(Error::PimCapacity { .. })
        ));
    }

    #[test]
    fn pim_tiling_splits_passes() {
        let cm = model();
        // 128 x 8192 FP16 = 2 MiB -> two full passes.
        assert_eq!(cm.pim_gemv_tiled(128, 8192, 0).unwrap(), 2 * (256 + 32));
        assert_eq!(
            cm.pim_gemv_tiled(128, 1024, 0).unwrap(),
            cm.pim_gemv(128, 1024, 0).unwrap()
        );
    }

    #[test]
    fn vcu_examples() {
        let cm = model();
        assert_eq!(cm.vcu(OpKind::Softmax, 1024, 1).unwrap(), 80 + 32);
        assert_eq!(cm.vcu(OpKind::ResAdd, 0, 1).unwrap(), 32);
        assert_eq!(cm.vcu(OpKind::Gelu, 20480, 1).unwrap(), 2560 + 32);
        assert!(cm.vcu(OpKind::Gemm, 10, 1).is_err());
    }

    #[test]
    fn transpose_and_allgather_examples() {
        let cm = model();
        assert_eq!(cm.allgather(1, 4), 0);
        assert_eq!(noc_allgather_cycles(2, 4, 32, 1.0), 36);
        assert_eq!(noc_allgather_cycles(4, 4, 32, 1.0), 72);
        assert_eq!(noc_allgather_cycles(5, 4, 32, 1.0), 108);
        assert_eq!(cm.transpose(128, 1), 2 + 32);
        // Defaults: 32-cycle hop, 32 B/cycle.
        assert_eq!(cm.allgather(2, 4), 33);
    }

    #[test]
    fn hbm_examples() {
        let stack = HardwareConfig::preset("hpim-default").unwrap().stack;
        // 5120^2 projection over 128 pCH: 320 + 800 + 25 * 30.
        assert_eq!(hbm_gemv_cycles(204_800, 5120, &stack, 2), 1870);
        assert_eq!(hbm_gemv_cycles(0, 5120, &stack, 2), 320);
        assert_eq!(hbm_gemv_cycles(256, 16, &stack, 2), 32);
        assert_eq!(hbm_gemv_cycles(0, 0, &stack, 2), 0);
    }

    #[test]
    fn hbm_clock_conversion() {
        let mut hw = HardwareConfig::preset("hpim-default").unwrap();
        hw.stack.freq_hz = 500_000_000;
        let cm = CostModel::new(&hw, &CostModelParams::default());
        assert_eq!(cm.hbm_gemv(256, 16), 64);
    }

    #[test]
    fn link_examples() {
        let cm = model();
        assert!((cm.link_bytes_per_cycle() - 102.375).abs() < 1e-12);
        assert_eq!(link_transfer_cycles(256, 102.4, 32), 3 + 32);
        assert_eq!(cm.link(256), 3 + 32);
        assert_eq!(cm.link(0), 32);
        assert_eq!(link_transfer_cycles(327_680, 102.0, 0), 3213);
        assert_eq!(cm.link(327_680), 3201 + 32);
    }

    #[test]
    fn overrides_merge() {
        let p = CostModelParams::default()
            .with_overrides(&serde_json::json!({
                "noc_alpha_cycles": 32,
                "noc_beta_cycles_per_byte": 1.0,
                "vcu_passes": {"softmax": 6}
            }))
            .unwrap();
        assert_eq!(p.vcu_passes.softmax, 6);
        assert_eq!(p.vcu_passes.gelu, 8);
        let cm = CostModel::new(&HardwareConfig::preset("hpim-default").unwrap(), &p);
        assert_eq!(cm.allgather(2, 4), 36);
        assert!(CostModelParams::default()
            .with_overrides(&serde_json::json!({"pim_write_bytes_per_cycle": 0}))
            .is_err());
    }

    proptest! {
        #[test]
        fn costs_are_monotone(a in 0u64..5000, b in 0u64..5000, c in 1u64..300, extra in 0u64..500) {
            let cm = model();
            prop_assert!(cm.tcu_gemm(a + 1, c, b + 1) <= cm.tcu_gemm(a + 1 + extra, c, b + 1));
            prop_assert!(cm.tcu_gemm(a + 1, c, b + 1) <= cm.tcu_gemm(a + 1, c + extra, b + 1));
            prop_assert!(cm.tcu_gemm(a + 1, c, b + 1) <= cm.tcu_gemm(a + 1, c, b + 1 + extra));
            prop_assert!(cm.vcu(OpKind::Softmax, a, 1).unwrap() <= cm.vcu(OpKind::Softmax, a + extra, 1).unwrap());
            prop_assert!(cm.transpose(a, c) <= cm.transpose(a + extra, c));
            prop_assert!(cm.hbm_gemv(a * 40, b) <= cm.hbm_gemv(a * 40 + extra, b));
            prop_assert!(cm.hbm_gemv(a * 40, b) <= cm.hbm_gemv(a * 40, b + extra));
            prop_assert!(cm.link(a) <= cm.link(a + extra));
            prop_assert!(cm.allgather(c, a) <= cm.allgather(c + extra, a));
            prop_assert!(cm.allgather(c, a) <= cm.allgather(c, a + extra));
            let r = c.min(128);
            let cols = a.min(4096);
            prop_assert!(cm.pim_gemv(r, cols, b).unwrap() <= cm.pim_gemv(r, cols + extra.min(4096 - cols), b + extra).unwrap());
        }

        #[test]
        fn pim_throughput_never_exceeds_peak(r in 0u64..=128, c in 0u64..=4096) {
            let cm = model();
            let compute = cm.pim_gemv(r, c, 0).unwrap() - cm.overhead();
            prop_assert!(compute * 2048 >= r * c);
            if (r * c) % 2048 == 0 {
                prop_assert_eq!(compute * 2048, r * c);
            }
        }

        #[test]
        fn hbm_utilization_bounded(el in 1u64..2_000_000, input in 0u64..30_000) {
            let hw = HardwareConfig::preset("hpim-default").unwrap();
            let cm = CostModel::new(&hw, &CostModelParams::default());
            let peak = crate::arch::derive_metrics(&hw).hbm_pim_peak_flops;
            let cycles = cm.hbm_gemv(el, input);
            let flops = 2.0 * el as f64 * hw.n_pch() as f64;
            let util = flops / (cycles as f64 / hw.core.freq_hz as f64 * peak);
            prop_assert!(util > 0.0 && util <= 1.0 + 1e-12);
        }
    }
}
