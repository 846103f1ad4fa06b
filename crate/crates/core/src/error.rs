use thiserror::Error;

/// Errors produced while loading configurations, planning, or simulating.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),

    #[error("invalid model config: {0}")]
    InvalidModel(String),

    #[error("invalid hardware config: {0}")]
    InvalidHardware(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("unknown preset `{0}`")]
    UnknownPreset(String),

    /// The head allocation divides the channel count by a power-of-two head
    /// count; that division must be exact.
    #[error(
        "head allocation requires the channel count to be divisible by the heads placed per \
         round: {channels} channels / {heads_per_round} heads is not integral"
    )]
    ChannelDivisibility { channels: u64, heads_per_round: u64 },

    #[error("capacity exceeded for {what}: need {required} B, have {available} B")]
    Capacity {
        what: String,
        required: u64,
        available: u64,
    },

    #[error("PIM unit invocation of {bytes} B exceeds macro capacity of {capacity} B")]
    PimCapacity { bytes: u64, capacity: u64 },

    #[error("operation {0} is not supported by this cost model")]
    UnsupportedOp(String),

    #[error("mapping plan violates {} invariant(s): {}", .0.len(), .0.join("; "))]
    InvalidPlan(Vec<String>),

    #[error("operator node {0} has no mapping target")]
    UnmappedNode(u32),

    #[error("dependency cycle detected; {unscheduled} tasks never became ready")]
    Cycle { unscheduled: usize },

    #[error("task {task} references unknown resource {resource}")]
    UnknownResource { task: u32, resource: u32 },

    #[error("unknown dependency {dep} in task {task}")]
    UnknownDependency { task: u32, dep: u32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
