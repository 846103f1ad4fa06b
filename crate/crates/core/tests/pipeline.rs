use hpim_core::engine::reference_schedule;
use hpim_core::mapping::{build_mapping_plan, validate_plan};
use hpim_core::presets;
use hpim_core::{
    derive_metrics, simulate, simulate_inference, CostModelParams, HardwareConfig, InferenceRequest, LatencyReport,
    ModelConfig, OpClass, Phase, SimOptions,
};

fn default_hw() -> HardwareConfig {
    HardwareConfig::preset("hpim-default").unwrap()
}

#[test]
fn every_preset_model_maps_cleanly() {
    let hw = default_hw();
    for name in presets::model_names() {
        let m = ModelConfig::preset(name).unwrap();
        for phase in [Phase::Prefill, Phase::Decode] {
            let plan = build_mapping_plan(&m, &hw, phase).unwrap();
            let r = validate_plan(&plan).unwrap();
            assert!(r.qkv_imbalance >= 1.0 && r.fc_imbalance >= 1.0, "{name} {phase:?}");
            serde_json::from_str::<serde_json::Value>(&plan.to_json().unwrap()).unwrap();
        }
    }
}

#[test]
fn report_round_trips_and_adds_up() {
    let m = ModelConfig::preset("opt-1.3b").unwrap();
    let req = InferenceRequest::new(32, 3).unwrap();
    let r = simulate_inference(&m, &default_hw(), &req, &CostModelParams::default()).unwrap();
    assert_eq!(r.total_cycles, r.prefill_cycles + r.decode_cycles);
    let lat = &r.phase_latencies_us;
    assert_eq!(lat.per_token.len(), 3);
    let sum: f64 = lat.per_token.iter().sum();
    assert!((sum - lat.decode).abs() < 1e-6 * lat.decode.max(1.0));
    assert!(lat.per_token.windows(2).all(|w| w[1] >= w[0]));
    for phase in [Phase::Prefill, Phase::Decode] {
        let critical: u64 = OpClass::ALL.iter().map(|&c| r.row(phase, c).critical_cycles).sum();
        let expected = if phase == Phase::Prefill { r.prefill_cycles } else { r.decode_cycles };
        assert_eq!(critical, expected, "{phase:?}");
    }
    assert!(r.utilization.iter().all(|u| (0.0..=1.0).contains(&u.utilization)));
    let back: LatencyReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
    assert_eq!(back.to_json().unwrap(), r.to_json().unwrap());
}

#[test]
fn trace_covers_requested_tokens() {
    let m = ModelConfig::preset("opt-350m").unwrap();
    let req = InferenceRequest::new(16, 4).unwrap();
    let opts = SimOptions {
        trace_decode_tokens: Some(1),
        ..SimOptions::default()
    };
    let sim = simulate(&m, &default_hw(), &req, &CostModelParams::default(), &opts).unwrap();
    let trace = sim.trace.unwrap();
    let v: serde_json::Value = serde_json::from_str(&trace.to_json().unwrap()).unwrap();
    let segments: std::collections::BTreeSet<String> = v["traceEvents"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["ph"] == "X")
        .map(|e| e["args"]["segment"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(segments.len(), 2, "{segments:?}");
}

#[test]
fn derived_metrics_scale_with_stacks() {
    let hw = default_hw();
    let mut half = hw.clone();
    half.n_stacks /= 2;
    half.link_map = None;
    let (a, b) = (derive_metrics(&hw), derive_metrics(&half));
    assert_eq!(a.dram_capacity_bytes, 2 * b.dram_capacity_bytes);
    assert!((a.hbm_pim_peak_flops - 2.0 * b.hbm_pim_peak_flops).abs() < 1.0);
    assert_eq!(a.tcu_peak_flops, b.tcu_peak_flops);
}

#[test]
fn reference_schedule_is_public() {
    let ts = hpim_core::engine::TaskSet::new();
    assert!(reference_schedule(&ts, 1).is_empty());
}
