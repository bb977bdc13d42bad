use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::inst::{decode, DecodedInst, Mnemonic};
use super::{AccessKind, IsaError};

/// `JAL x0, 0`: a jump to itself. Reaching it ends a run; it never retires.
pub const HALT_WORD: u32 = 0x0000_006f;

/// A contiguous address range `[base, base + size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub base: u32,
    pub size: u32,
}

impl Region {
    pub fn new(base: u32, size: u32) -> Self {
        Region { base, size }
    }

    pub fn contains(&self, addr: u32, width: u32) -> bool {
        let end = self.base as u64 + self.size as u64;
        addr >= self.base && addr as u64 + width as u64 <= end
    }

    pub fn end(&self) -> u64 {
        self.base as u64 + self.size as u64
    }
}

/// The two configured memory regions. Instructions are fetched from `code`;
/// loads and stores must fall entirely inside `data`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub code: Region,
    pub data: Region,
}

impl Default for MemoryLayout {
    fn default() -> Self {
        MemoryLayout {
            code: Region::new(0x8000_0000, 0x0001_0000),
            data: Region::new(0x0000_0000, 0x0000_1000),
        }
    }
}

/// A program image: consecutive instruction words starting at `base`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Program {
    pub base: u32,
    pub words: Vec<u32>,
}

impl Program {
    pub fn new(base: u32, words: Vec<u32>) -> Self {
        Program { base, words }
    }

    /// `(address, word)` pairs of the image.
    pub fn image(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.words.iter().enumerate().map(move |(i, &w)| (self.base.wrapping_add(4 * i as u32), w))
    }
}

/// Architectural machine state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchState {
    pub pc: u32,
    pub regs: [u32; 32],
    pub mem: BTreeMap<u32, u8>,
    pub retired_count: u64,
    pub layout: MemoryLayout,
}

/// A memory access performed by one instruction. `data` holds the accessed
/// bytes, little-endian and zero-extended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemAccess {
    pub addr: u32,
    pub width: u8,
    pub data: u32,
}

/// Architectural effects of one retired instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RetiredEvent {
    pub order: u64,
    pub inst: DecodedInst,
    pub pc_before: u32,
    pub pc_after: u32,
    pub rs1_value: Option<u32>,
    pub rs2_value: Option<u32>,
    /// Architectural value of `rd` after the instruction; always 0 for x0.
    pub rd_value: Option<u32>,
    pub mem_read: Option<MemAccess>,
    pub mem_write: Option<MemAccess>,
    pub branch_taken: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HaltReason {
    FuelExhausted,
    Halt,
    Fault(IsaError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchTrace {
    pub events: Vec<RetiredEvent>,
    pub halted: HaltReason,
}

impl ArchState {
    /// Boots `program` with the given register file. Data memory starts zeroed.
    pub fn boot(program: &Program, init_regs: [u32; 32], layout: MemoryLayout) -> Result<Self, IsaError> {
        let mut mem = BTreeMap::new();
        for (addr, word) in program.image() {
            if !layout.code.contains(addr, 4) {
                return Err(IsaError::MemoryFault { addr, width: 4, kind: AccessKind::Fetch });
            }
            for (i, b) in word.to_le_bytes().into_iter().enumerate() {
                mem.insert(addr + i as u32, b);
            }
        }
        let mut regs = init_regs;
        regs[0] = 0;
        Ok(ArchState { pc: program.base, regs, mem, retired_count: 0, layout })
    }

    fn read_bytes(&self, addr: u32, width: u8) -> u32 {
        (0..width as u32).fold(0, |acc, i| {
            let b = self.mem.get(&addr.wrapping_add(i)).copied().unwrap_or(0);
            acc | (b as u32) << (8 * i)
        })
    }

    fn write_bytes(&mut self, addr: u32, width: u8, data: u32) {
        for i in 0..width as u32 {
            self.mem.insert(addr.wrapping_add(i), (data >> (8 * i)) as u8);
        }
    }

    /// Fetches the instruction word at `pc`.
    pub fn fetch(&self) -> Result<u32, IsaError> {
        self.fetch_at(self.pc)
    }

    pub fn fetch_at(&self, pc: u32) -> Result<u32, IsaError> {
        if !pc.is_multiple_of(4) || !self.layout.code.contains(pc, 4) {
            return Err(IsaError::MemoryFault { addr: pc, width: 4, kind: AccessKind::Fetch });
        }
        Ok(self.read_bytes(pc, 4))
    }

    pub fn at_halt(&self) -> bool {
        matches!(self.fetch(), Ok(HALT_WORD))
    }

    /// Reads `width` bytes of data memory.
    pub fn load(&self, addr: u32, width: u8) -> Result<u32, IsaError> {
        if !self.layout.data.contains(addr, width as u32) {
            return Err(IsaError::MemoryFault { addr, width, kind: AccessKind::Load });
        }
        Ok(self.read_bytes(addr, width))
    }

    /// Writes the low `width` bytes of `value` to data memory and returns
    /// the stored (masked) data.
    pub fn store(&mut self, addr: u32, width: u8, value: u32) -> Result<u32, IsaError> {
        if !self.layout.data.contains(addr, width as u32) {
            return Err(IsaError::MemoryFault { addr, width, kind: AccessKind::Store });
        }
        let data = if width == 4 { value } else { value & ((1u32 << (8 * width)) - 1) };
        self.write_bytes(addr, width, data);
        Ok(data)
    }

    /// Executes one instruction in place.
    pub fn step_in_place(&mut self) -> Result<RetiredEvent, IsaError> {
        let inst = decode(self.fetch()?)?;
        let pc = self.pc;
        let rs1_value = inst.rs1.map(|r| self.regs[r as usize]);
        let rs2_value = inst.rs2.map(|r| self.regs[r as usize]);
        let a = rs1_value.unwrap_or(0);
        let b = rs2_value.unwrap_or(0);
        let imm = inst.imm.unwrap_or(0) as u32;

        let mut next_pc = pc.wrapping_add(4);
        let mut result = None;
        let mut mem_read = None;
        let mut mem_write = None;
        let mut taken = None;

        use Mnemonic::*;
        let m = inst.mnemonic;
        match m {
            Lui => result = Some(imm),
            Auipc => result = Some(pc.wrapping_add(imm)),
            Jal => {
                result = Some(pc.wrapping_add(4));
                next_pc = pc.wrapping_add(imm);
            }
            Jalr => {
                result = Some(pc.wrapping_add(4));
                next_pc = a.wrapping_add(imm) & !1;
            }
            _ if m.is_branch() => {
                let t = branch_taken(m, a, b);
                taken = Some(t);
                if t {
                    next_pc = pc.wrapping_add(imm);
                }
            }
            _ if m.is_load() => {
                let width = m.mem_width().expect("load width");
                let addr = a.wrapping_add(imm);
                let data = self.load(addr, width)?;
                mem_read = Some(MemAccess { addr, width, data });
                result = Some(load_extend(m, data));
            }
            _ if m.is_store() => {
                let width = m.mem_width().expect("store width");
                let addr = a.wrapping_add(imm);
                let data = self.store(addr, width, b)?;
                mem_write = Some(MemAccess { addr, width, data });
            }
            _ => {
                let rhs = if m.has_rs2() { b } else { imm };
                result = Some(alu(m, a, rhs));
            }
        }

        let mut rd_value = None;
        if let Some(rd) = inst.rd {
            let value = if rd == 0 { 0 } else { result.unwrap_or(0) };
            if rd != 0 {
                self.regs[rd as usize] = value;
            }
            rd_value = Some(value);
        }

        let event = RetiredEvent {
            order: self.retired_count,
            inst,
            pc_before: pc,
            pc_after: next_pc,
            rs1_value,
            rs2_value,
            rd_value,
            mem_read,
            mem_write,
            branch_taken: taken,
        };
        self.pc = next_pc;
        self.retired_count += 1;
        Ok(event)
    }
}

/// Executes the instruction at `state.pc`, returning the successor state and
/// the retirement record.
pub fn step(state: &ArchState) -> Result<(ArchState, RetiredEvent), IsaError> {
    let mut next = state.clone();
    let event = next.step_in_place()?;
    Ok((next, event))
}

/// Runs from `init` until the halt sentinel, a fault, or `fuel` retirements.
pub fn run(init: &ArchState, fuel: u64) -> ArchTrace {
    let mut state = init.clone();
    let mut events = Vec::new();
    let halted = loop {
        if state.at_halt() {
            break HaltReason::Halt;
        }
        if events.len() as u64 >= fuel {
            break HaltReason::FuelExhausted;
        }
        match state.step_in_place() {
            Ok(event) => events.push(event),
            Err(e) => break HaltReason::Fault(e),
        }
    };
    ArchTrace { events, halted }
}

/// Register-register and register-immediate arithmetic. For immediate forms
/// `b` is the sign-extended immediate (or the shift amount).
pub fn alu(m: Mnemonic, a: u32, b: u32) -> u32 {
    use Mnemonic::*;
    let sa = a as i32;
    let sb = b as i32;
    match m {
        Add | Addi => a.wrapping_add(b),
        Sub => a.wrapping_sub(b),
        Sll | Slli => a << (b & 31),
        Slt | Slti => (sa < sb) as u32,
        Sltu | Sltiu => (a < b) as u32,
        Xor | Xori => a ^ b,
        Srl | Srli => a >> (b & 31),
        Sra | Srai => (sa >> (b & 31)) as u32,
        Or | Ori => a | b,
        And | Andi => a & b,
        Mul => a.wrapping_mul(b),
        Mulh => ((sa as i64 * sb as i64) >> 32) as u32,
        Mulhsu => ((sa as i64 * b as i64) >> 32) as u32,
        Mulhu => ((a as u64 * b as u64) >> 32) as u32,
        Div => {
            if b == 0 {
                u32::MAX
            } else {
                sa.wrapping_div(sb) as u32
            }
        }
        Divu => a.checked_div(b).unwrap_or(u32::MAX),
        Rem => {
            if b == 0 {
                a
            } else {
                sa.wrapping_rem(sb) as u32
            }
        }
        Remu => a.checked_rem(b).unwrap_or(a),
        _ => panic!("{m} is not an arithmetic instruction"),
    }
}

pub fn branch_taken(m: Mnemonic, a: u32, b: u32) -> bool {
    use Mnemonic::*;
    match m {
        Beq => a == b,
        Bne => a != b,
        Blt => (a as i32) < (b as i32),
        Bge => (a as i32) >= (b as i32),
        Bltu => a < b,
        Bgeu => a >= b,
        _ => panic!("{m} is not a branch"),
    }
}

/// Sign- or zero-extends loaded bytes to the architectural register value.
pub fn load_extend(m: Mnemonic, raw: u32) -> u32 {
    use Mnemonic::*;
    match m {
        Lb => raw as u8 as i8 as i32 as u32,
        Lh => raw as u16 as i16 as i32 as u32,
        Lbu => raw & 0xff,
        Lhu => raw & 0xffff,
        Lw => raw,
        _ => panic!("{m} is not a load"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::inst::NOP_WORD;
    use Mnemonic::*;

    fn boot(words: Vec<u32>, regs: [u32; 32]) -> ArchState {
        let layout = MemoryLayout::default();
        ArchState::boot(&Program::new(layout.code.base, words), regs, layout).unwrap()
    }

    fn word(inst: Result<DecodedInst, IsaError>) -> u32 {
        inst.unwrap().raw
    }

    #[test]
    fn div_by_zero_yields_all_ones() {
        let mut regs = [0; 32];
        regs[1] = 7;
        let s = boot(vec![word(DecodedInst::r(Div, 3, 1, 2))], regs);
        let (next, ev) = step(&s).unwrap();
        assert_eq!(ev.rd_value, Some(0xFFFF_FFFF));
        assert_eq!(next.regs[3], 0xFFFF_FFFF);
    }

    #[test]
    fn division_corner_cases() {
        assert_eq!(alu(Rem, 7, 0), 7);
        assert_eq!(alu(Divu, 7, 0), u32::MAX);
        assert_eq!(alu(Remu, 7, 0), 7);
        assert_eq!(alu(Div, 0x8000_0000, u32::MAX), 0x8000_0000);
        assert_eq!(alu(Rem, 0x8000_0000, u32::MAX), 0);
        assert_eq!(alu(Div, (-7i32) as u32, 2), (-3i32) as u32);
        assert_eq!(alu(Rem, (-7i32) as u32, 2), (-1i32) as u32);
    }

    #[test]
    fn nop_only_advances_pc() {
        let s = boot(vec![NOP_WORD], [0; 32]);
        let (next, ev) = step(&s).unwrap();
        assert_eq!(next.pc, s.pc + 4);
        assert_eq!(next.regs, s.regs);
        assert_eq!(next.mem, s.mem);
        assert_eq!(ev.pc_after, ev.pc_before + 4);
    }

    #[test]
    fn branch_to_fall_through_is_taken() {
        let mut regs = [0; 32];
        regs[1] = 5;
        regs[2] = 5;
        let s = boot(vec![word(DecodedInst::b(Beq, 1, 2, 4))], regs);
        let (_, ev) = step(&s).unwrap();
        assert_eq!(ev.pc_after, ev.pc_before + 4);
        assert_eq!(ev.branch_taken, Some(true));
    }

    #[test]
    fn x0_writes_discarded() {
        let s = boot(vec![word(DecodedInst::i(Addi, 0, 0, 5))], [0; 32]);
        let (next, ev) = step(&s).unwrap();
        assert_eq!(next.regs[0], 0);
        assert_eq!(ev.rd_value, Some(0));
    }

    #[test]
    fn misaligned_accesses_are_bytewise() {
        let mut regs = [0; 32];
        regs[1] = 0x102;
        regs[2] = 0xA1B2_C3D4;
        let s = boot(
            vec![
                word(DecodedInst::s(Sw, 1, 2, 1)),
                word(DecodedInst::i(Lw, 3, 1, 1)),
                word(DecodedInst::i(Lh, 4, 1, 4)),
                word(DecodedInst::i(Lbu, 5, 1, 4)),
            ],
            regs,
        );
        let trace = run(&s, 10);
        let ev = &trace.events;
        assert_eq!(ev[0].mem_write.unwrap().addr, 0x103);
        assert_eq!(ev[1].rd_value, Some(0xA1B2_C3D4));
        // bytes at 0x106, 0x107 are 0xA1 and 0x00
        assert_eq!(ev[2].mem_read.unwrap().data, 0x00A1);
        assert_eq!(ev[2].rd_value, Some(0xA1));
        assert_eq!(ev[3].rd_value, Some(0xA1));
    }

    #[test]
    fn sign_extending_loads() {
        let mut regs = [0; 32];
        regs[2] = 0x0000_80F0;
        let s = boot(
            vec![
                word(DecodedInst::s(Sw, 0, 2, 0x10)),
                word(DecodedInst::i(Lb, 3, 0, 0x10)),
                word(DecodedInst::i(Lh, 4, 0, 0x10)),
                word(DecodedInst::i(Lhu, 5, 0, 0x10)),
            ],
            regs,
        );
        let t = run(&s, 10);
        assert_eq!(t.events[1].rd_value, Some(0xFFFF_FFF0));
        assert_eq!(t.events[2].rd_value, Some(0xFFFF_80F0));
        assert_eq!(t.events[3].rd_value, Some(0x80F0));
    }

    #[test]
    fn out_of_region_access_faults() {
        let mut regs = [0; 32];
        regs[1] = 0x0FFE;
        let s = boot(vec![word(DecodedInst::i(Lw, 2, 1, 0))], regs);
        let t = run(&s, 10);
        assert!(t.events.is_empty());
        assert!(matches!(t.halted, HaltReason::Fault(IsaError::MemoryFault { kind: AccessKind::Load, .. })));
    }

    #[test]
    fn run_stops_at_halt_or_fuel() {
        let mut words = vec![NOP_WORD; 5];
        words.push(HALT_WORD);
        let s = boot(words, [0; 32]);
        let t = run(&s, 10);
        assert_eq!(t.events.len(), 5);
        assert_eq!(t.halted, HaltReason::Halt);
        let t = run(&s, 3);
        assert_eq!(t.events.len(), 3);
        assert_eq!(t.halted, HaltReason::FuelExhausted);
        assert_eq!(run(&s, 10), run(&s, 10));
        for (i, e) in run(&s, 10).events.iter().enumerate() {
            assert_eq!(e.order, i as u64);
        }
    }

    #[test]
    fn jumps_link_and_redirect() {
        let s = boot(
            vec![
                word(DecodedInst::j(1, 8)),
                NOP_WORD,
                word(DecodedInst::i(Jalr, 2, 1, 8)),
                NOP_WORD,
                NOP_WORD,
                HALT_WORD,
            ],
            [0; 32],
        );
        let t = run(&s, 10);
        let base = s.pc;
        assert_eq!(t.halted, HaltReason::Halt);
        assert_eq!(t.events.len(), 4);
        assert_eq!(t.events[0].rd_value, Some(base + 4));
        assert_eq!(t.events[0].pc_after, base + 8);
        assert_eq!(t.events[1].rd_value, Some(base + 12));
        assert_eq!(t.events[1].pc_after, base + 12);
    }
}
