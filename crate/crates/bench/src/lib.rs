//! Fixtures shared by the criterion benches.

use hpim_core::engine::{lower_to_tasks, Machine, TaskSet};
use hpim_core::mapping::build_mapping_plan;
use hpim_core::workload::{build_decode_graph, KVCacheState, ModelConfig, Phase};
use hpim_core::{CostModelParams, HardwareConfig};

/// One lowered decode step of a bundled model on the default machine.
pub struct DecodeFixture {
    pub model: ModelConfig,
    pub machine: Machine,
    pub tasks: TaskSet,
}

impl DecodeFixture {
    pub fn new(model: &str, seq_len: u64) -> Self {
        let model = ModelConfig::preset(model).unwrap();
        let hw = HardwareConfig::preset("hpim-default").unwrap();
        let machine = Machine::new(&hw, &CostModelParams::default()).unwrap();
        let plan = build_mapping_plan(&model, machine.hw(), Phase::Decode).unwrap();
        let g = build_decode_graph(&model, &KVCacheState::new(&model, seq_len));
        let tasks = lower_to_tasks(&g, &model, &plan, &machine.cost).unwrap();
        DecodeFixture { model, machine, tasks }
    }

    pub fn n_resources(&self) -> usize {
        self.machine.resources.len()
    }
}
