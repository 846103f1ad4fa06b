//! Performance model of LLM inference on a heterogeneous accelerator that
//! pairs SRAM processing-in-memory cores with HBM processing-in-memory
//! stacks.
//!
//! The pipeline is: [`workload`] builds operator graphs, [`mapping`] places
//! weights and heads, [`engine`] lowers the graph onto [`arch`] resources
//! with [`timing`] costs and list-schedules it, and [`baseline`] gives the
//! roofline GPU comparison.

pub mod arch;
pub mod baseline;
pub mod engine;
pub mod error;
pub mod mapping;
pub mod presets;
pub mod timing;
pub mod workload;

pub use arch::{derive_metrics, validate_config, DerivedMetrics, HardwareConfig, HardwareDocument};
pub use baseline::{baseline_inference_latency, roofline_latency, BaselineDevice};
pub use engine::{simulate, simulate_inference, LatencyReport, SimOptions, Simulation, TraceDocument};
pub use error::{Error, Result};
pub use timing::{CostModel, CostModelParams};
pub use workload::{InferenceRequest, KVCacheState, ModelConfig, OpClass, OperatorGraph, Phase};
