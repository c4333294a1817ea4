use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed robot description: {0}")]
    Malformed(String),

    #[error("joint {joint}: {reason}")]
    InvalidJoint { joint: usize, reason: String },

    #[error("edge {edge} ({a}, {b}): {reason}")]
    InvalidEdge {
        edge: usize,
        a: usize,
        b: usize,
        reason: String,
    },

    #[error("disconnected kinematic graph: joint {joint} unreachable from joint 0")]
    Disconnected { joint: usize },

    #[error("descriptor count mismatch: {joints} joints but {descriptors} descriptors")]
    DescriptorCount { joints: usize, descriptors: usize },

    #[error("chunk count G={chunks} does not divide horizon H={horizon}")]
    ChunkMismatch { chunks: usize, horizon: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("attention row {row} has every key blocked")]
    BlockedRow { row: usize },

    #[error("distance {distance} exceeds bias table width {width}")]
    DistanceOutOfRange { distance: usize, width: usize },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("report schema mismatch: {first} vs {second}")]
    SchemaMismatch { first: u32, second: u32 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}
