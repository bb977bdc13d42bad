//! Architectural RV32IM simulator.
//!
//! The simulator is a pure state machine: [`step`] maps an [`ArchState`] to
//! its successor together with a [`RetiredEvent`] describing the transition,
//! and [`run`] iterates it until the halt sentinel, a fault, or fuel
//! exhaustion. Every contract atom observes [`RetiredEvent`]s, never the raw
//! state.

mod exec;
mod inst;

use thiserror::Error;

pub use exec::{
    alu, branch_taken, load_extend, run, step, ArchState, ArchTrace, HaltReason, MemAccess, MemoryLayout,
    Program, Region, RetiredEvent, HALT_WORD,
};
pub use inst::{decode, encode, DecodedInst, Format, Mnemonic, NOP_WORD};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IsaError {
    #[error("illegal instruction {word:#010x}")]
    IllegalInstruction { word: u32 },
    #[error("{mnemonic}: field {field} {detail}")]
    FieldOutOfRange { mnemonic: Mnemonic, field: &'static str, detail: String },
    #[error("unknown mnemonic {0:?}")]
    UnknownMnemonic(String),
    #[error("memory fault: {kind} of {width} byte(s) at {addr:#010x}")]
    MemoryFault { addr: u32, width: u8, kind: AccessKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Fetch,
    Load,
    Store,
}

impl std::fmt::Display for AccessKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AccessKind::Fetch => "fetch",
            AccessKind::Load => "load",
            AccessKind::Store => "store",
        })
    }
}
