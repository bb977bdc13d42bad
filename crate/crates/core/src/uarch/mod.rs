//! Cycle-level in-order pipeline model and the retirement-timing attacker.
//!
//! The pipeline is a scoreboard over a linear stage array (fetch, decode,
//! execute, memory, writeback, with shallower or deeper variants). Each
//! instruction is scheduled in program order: it enters a stage once it has
//! finished the previous one, the older instruction has vacated the stage,
//! and, at its operand-read stage, its register operands are available
//! under the configured forwarding rules. The model keeps its own register
//! values, memory image and data cache, so its retired events are produced
//! independently of the architectural simulator.

mod config;
mod pipeline;

use thiserror::Error;

pub use config::{preset, CacheConfig, DivLatency, Forwarding, InstClass, UarchConfig, PRESET_NAMES};
pub use pipeline::{attacker_trace, simulate, AttackerTrace, TimedEvent, UarchTrace};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum UarchError {
    #[error("unknown preset {0:?} (known: ibex-like, cva6-like, no-leak)")]
    UnknownPreset(String),
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot parse pipeline configuration: {0}")]
    Parse(String),
}
