//! Atom observations over retired-instruction sequences.

use std::collections::BTreeSet;
use std::fmt;

use super::{AtomIdx, Contract, ContractAtom, LeakageSource, Template, TemplateError};
use crate::isa::{Mnemonic, RetiredEvent};

/// One entry of an observation trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Obs {
    NotApplicable,
    Word(u32),
    Bool(bool),
    Op(Mnemonic),
}

impl fmt::Display for Obs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Obs::NotApplicable => f.write_str("-"),
            Obs::Word(w) => write!(f, "{w:#x}"),
            Obs::Bool(b) => write!(f, "{b}"),
            Obs::Op(m) => write!(f, "{m}"),
        }
    }
}

pub type ObservationTrace = Vec<Obs>;

/// Value of `source` on `event`, or `None` when the event does not carry it.
/// `history` holds the preceding events, oldest first.
fn source_value(source: LeakageSource, event: &RetiredEvent, history: &[RetiredEvent]) -> Option<Obs> {
    use LeakageSource as S;
    let inst = &event.inst;
    let mem_addr = || event.mem_read.or(event.mem_write).map(|a| a.addr);
    let word = |v: Option<u32>| v.map(Obs::Word);
    let previous = |n: u8| {
        let n = n as usize;
        (history.len() >= n).then(|| &history[history.len() - n])
    };
    let dependency = |reg: Option<u8>, n: u8, hit: &dyn Fn(&RetiredEvent, u8) -> bool| {
        let reg = reg?;
        Some(Obs::Bool(reg != 0 && previous(n).is_some_and(|p| hit(p, reg))))
    };
    let wrote = |p: &RetiredEvent, reg: u8| p.inst.written_reg() == Some(reg);
    let read = |p: &RetiredEvent, reg: u8| p.inst.rs1 == Some(reg) || p.inst.rs2 == Some(reg);
    match source {
        S::Op => Some(Obs::Op(inst.mnemonic)),
        S::Rd => word(inst.rd.map(u32::from)),
        S::Rs1 => word(inst.rs1.map(u32::from)),
        S::Rs2 => word(inst.rs2.map(u32::from)),
        S::Imm => word(inst.imm.map(|i| i as u32)),
        S::RegRs1 => word(event.rs1_value),
        S::RegRs2 => word(event.rs2_value),
        S::RegRd => word(event.rd_value),
        S::MemRAddr => word(event.mem_read.map(|a| a.addr)),
        S::MemWAddr => word(event.mem_write.map(|a| a.addr)),
        S::MemRData => word(event.mem_read.map(|a| a.data)),
        S::MemWData => word(event.mem_write.map(|a| a.data)),
        S::IsWordAligned => mem_addr().map(|a| Obs::Bool(a & 3 == 0)),
        S::IsHalfAligned => mem_addr().map(|a| Obs::Bool(a & 3 != 3)),
        S::BranchTaken => event.branch_taken.map(Obs::Bool),
        S::NewPc => inst.mnemonic.is_control().then_some(Obs::Word(event.pc_after)),
        S::RawRs1(n) => dependency(inst.rs1, n, &wrote),
        S::RawRs2(n) => dependency(inst.rs2, n, &wrote),
        S::RawRd(n) => dependency(inst.rd, n, &read),
        S::Waw(n) => dependency(inst.rd, n, &wrote),
    }
}

/// Observation at one position, `NotApplicable` when the atom does not apply.
fn observation(atom: ContractAtom, event: &RetiredEvent, history: &[RetiredEvent]) -> Obs {
    if event.inst.mnemonic != atom.inst_type {
        return Obs::NotApplicable;
    }
    source_value(atom.source, event, history).unwrap_or(Obs::NotApplicable)
}

pub fn applicable(atom: ContractAtom, event: &RetiredEvent) -> bool {
    event.inst.mnemonic == atom.inst_type && source_value(atom.source, event, &[]).is_some()
}

/// The atom's observation on `event`. `history` holds the preceding events,
/// oldest first; only the last `n` matter for a distance-`n` atom.
pub fn observe(
    atom: ContractAtom,
    event: &RetiredEvent,
    history: &[RetiredEvent],
) -> Result<Obs, TemplateError> {
    match observation(atom, event, history) {
        Obs::NotApplicable => {
            Err(TemplateError::NotApplicable { atom: atom.id(), event: event.inst.to_string() })
        }
        obs => Ok(obs),
    }
}

pub fn atom_trace(atom: ContractAtom, events: &[RetiredEvent]) -> ObservationTrace {
    (0..events.len()).map(|i| observation(atom, &events[i], &events[..i])).collect()
}

/// Atoms of `template` whose observation traces differ between the two
/// event sequences, in index order. Sequences of different lengths are
/// distinguished by every atom.
pub fn distinguishing_atoms(
    first: &[RetiredEvent],
    second: &[RetiredEvent],
    template: &Template,
) -> Vec<AtomIdx> {
    if first.len() != second.len() {
        return template.indices().collect();
    }
    let mut hit = vec![false; template.len()];
    for i in 0..first.len() {
        let (a, b) = (&first[i], &second[i]);
        let (ma, mb) = (a.inst.mnemonic, b.inst.mnemonic);
        let mnemonics = if ma == mb { vec![ma] } else { vec![ma, mb] };
        for m in mnemonics {
            for &idx in template.atoms_for(m) {
                if hit[idx.0 as usize] {
                    continue;
                }
                let atom = template.atom(idx);
                if observation(atom, a, &first[..i]) != observation(atom, b, &second[..i]) {
                    hit[idx.0 as usize] = true;
                }
            }
        }
    }
    template.indices().filter(|i| hit[i.0 as usize]).collect()
}

/// Per event, the set of (source, value) pairs exposed by the applicable
/// selected atoms.
pub fn contract_observations(
    contract: &Contract,
    template: &Template,
    events: &[RetiredEvent],
) -> Vec<BTreeSet<(LeakageSource, Obs)>> {
    (0..events.len())
        .map(|i| {
            template
                .atoms_for(events[i].inst.mnemonic)
                .iter()
                .filter(|idx| contract.contains(**idx))
                .filter_map(|&idx| {
                    let atom = template.atom(idx);
                    match observation(atom, &events[i], &events[..i]) {
                        Obs::NotApplicable => None,
                        obs => Some((atom.source, obs)),
                    }
                })
                .collect()
        })
        .collect()
}
