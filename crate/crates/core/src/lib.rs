//! Synthesis of hardware-software leakage contracts for RV32IM cores.
//!
//! The toolchain generates paired test programs ([`testgen`]), runs them on an
//! architectural simulator ([`isa`]) and a configurable in-order pipeline
//! ([`uarch`]), determines which test cases an attacker observing retirement
//! timing can distinguish and which contract atoms distinguish them
//! ([`eval`]), and finally selects the most precise set of atoms covering all
//! observed leaks ([`synth`]).

pub mod eval;
pub mod isa;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod template;
pub mod testgen;
pub mod trace_io;
pub mod uarch;
