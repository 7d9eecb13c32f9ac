use thiserror::Error;

/// Errors produced anywhere in the communication stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("rank {rank} is interior in colors {first} and {second}")]
    DisjointnessViolation {
        rank: usize,
        first: usize,
        second: usize,
    },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("deadlock: no runnable rank and no pending events ({unfinished} ranks unfinished)")]
    DeadlockDetected { unfinished: usize },

    #[error("peer {0} unreachable")]
    PeerUnreachable(String),

    #[error("endpoint closed")]
    Closed,

    #[error("rank {src} never exposed tag {tag:#x}")]
    NotExposed { src: usize, tag: u32 },

    #[error("message of {len} bytes exceeds the {max} byte segment limit")]
    MessageTooLarge { len: usize, max: usize },

    #[error("slice of {0} bytes does not fit a 32-bit signed count")]
    OffsetOverflow(u64),

    #[error("record of {0} bytes is too large")]
    RecordTooLarge(u64),

    #[error("shuffle slice of {0} bytes exceeds the 32-bit exchange bound")]
    SegmentOverflow(u64),

    #[error("malformed dataset file: {0}")]
    FormatError(String),

    #[error("group size {group_size} does not divide {n_ranks} ranks")]
    GroupMismatch { group_size: usize, n_ranks: usize },

    #[error("shard is empty")]
    EmptyShard,

    #[error("replica weights diverged at step {step}")]
    DivergenceDetected { step: u64 },

    #[error("collective produced a wrong result: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
