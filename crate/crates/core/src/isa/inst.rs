//! RV32IM instruction formats, decoding and encoding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::IsaError;

/// Encoding format of an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    R,
    I,
    S,
    B,
    U,
    J,
}

macro_rules! mnemonics {
    ($($variant:ident => $name:literal),* $(,)?) => {
        /// One RV32IM instruction type.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(into = "String", try_from = "String")]
        pub enum Mnemonic {
            $($variant),*
        }

        impl Mnemonic {
            /// Every supported mnemonic, in canonical (encoding table) order.
            pub const ALL: &'static [Mnemonic] = &[$(Mnemonic::$variant),*];

            pub fn name(self) -> &'static str {
                match self {
                    $(Mnemonic::$variant => $name),*
                }
            }
        }

        impl FromStr for Mnemonic {
            type Err = IsaError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($name => Ok(Mnemonic::$variant),)*
                    _ => Err(IsaError::UnknownMnemonic(s.to_string())),
                }
            }
        }
    };
}

mnemonics! {
    Lui => "LUI", Auipc => "AUIPC", Jal => "JAL", Jalr => "JALR",
    Beq => "BEQ", Bne => "BNE", Blt => "BLT", Bge => "BGE", Bltu => "BLTU", Bgeu => "BGEU",
    Lb => "LB", Lh => "LH", Lw => "LW", Lbu => "LBU", Lhu => "LHU",
    Sb => "SB", Sh => "SH", Sw => "SW",
    Addi => "ADDI", Slti => "SLTI", Sltiu => "SLTIU", Xori => "XORI", Ori => "ORI", Andi => "ANDI",
    Slli => "SLLI", Srli => "SRLI", Srai => "SRAI",
    Add => "ADD", Sub => "SUB", Sll => "SLL", Slt => "SLT", Sltu => "SLTU",
    Xor => "XOR", Srl => "SRL", Sra => "SRA", Or => "OR", And => "AND",
    Mul => "MUL", Mulh => "MULH", Mulhsu => "MULHSU", Mulhu => "MULHU",
    Div => "DIV", Divu => "DIVU", Rem => "REM", Remu => "REMU",
}

impl From<Mnemonic> for String {
    fn from(m: Mnemonic) -> String {
        m.name().to_string()
    }
}

impl TryFrom<String> for Mnemonic {
    type Error = IsaError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl fmt::Display for Mnemonic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

use Mnemonic::*;

impl Mnemonic {
    pub fn format(self) -> Format {
        match self {
            Lui | Auipc => Format::U,
            Jal => Format::J,
            Beq | Bne | Blt | Bge | Bltu | Bgeu => Format::B,
            Sb | Sh | Sw => Format::S,
            Jalr | Lb | Lh | Lw | Lbu | Lhu | Addi | Slti | Sltiu | Xori | Ori | Andi | Slli | Srli
            | Srai => Format::I,
            _ => Format::R,
        }
    }

    pub fn has_rd(self) -> bool {
        !matches!(self.format(), Format::S | Format::B)
    }

    pub fn has_rs1(self) -> bool {
        !matches!(self.format(), Format::U | Format::J)
    }

    pub fn has_rs2(self) -> bool {
        matches!(self.format(), Format::R | Format::S | Format::B)
    }

    pub fn has_imm(self) -> bool {
        self.format() != Format::R
    }

    pub fn is_load(self) -> bool {
        matches!(self, Lb | Lh | Lw | Lbu | Lhu)
    }

    pub fn is_store(self) -> bool {
        matches!(self, Sb | Sh | Sw)
    }

    pub fn is_mem(self) -> bool {
        self.is_load() || self.is_store()
    }

    pub fn is_branch(self) -> bool {
        self.format() == Format::B
    }

    pub fn is_jump(self) -> bool {
        matches!(self, Jal | Jalr)
    }

    pub fn is_control(self) -> bool {
        self.is_branch() || self.is_jump()
    }

    pub fn is_shift_imm(self) -> bool {
        matches!(self, Slli | Srli | Srai)
    }

    pub fn is_mul(self) -> bool {
        matches!(self, Mul | Mulh | Mulhsu | Mulhu)
    }

    pub fn is_div(self) -> bool {
        matches!(self, Div | Divu | Rem | Remu)
    }

    /// Access width in bytes for loads and stores.
    pub fn mem_width(self) -> Option<u8> {
        match self {
            Lb | Lbu | Sb => Some(1),
            Lh | Lhu | Sh => Some(2),
            Lw | Sw => Some(4),
            _ => None,
        }
    }

    fn opcode(self) -> u32 {
        match self {
            Lui => 0x37,
            Auipc => 0x17,
            Jal => 0x6f,
            Jalr => 0x67,
            Beq | Bne | Blt | Bge | Bltu | Bgeu => 0x63,
            Lb | Lh | Lw | Lbu | Lhu => 0x03,
            Sb | Sh | Sw => 0x23,
            Addi | Slti | Sltiu | Xori | Ori | Andi | Slli | Srli | Srai => 0x13,
            _ => 0x33,
        }
    }

    fn funct3(self) -> u32 {
        match self {
            Lui | Auipc | Jal => 0,
            Jalr | Beq | Lb | Sb | Addi | Add | Sub | Mul => 0,
            Bne | Lh | Sh | Slli | Sll | Mulh => 1,
            Lw | Sw | Slti | Slt | Mulhsu => 2,
            Sltiu | Sltu | Mulhu => 3,
            Blt | Lbu | Xori | Xor | Div => 4,
            Bge | Lhu | Srli | Srai | Srl | Sra | Divu => 5,
            Bltu | Ori | Or | Rem => 6,
            Bgeu | Andi | And | Remu => 7,
        }
    }

    fn funct7(self) -> u32 {
        match self {
            Sub | Sra | Srai => 0x20,
            Mul | Mulh | Mulhsu | Mulhu | Div | Divu | Rem | Remu => 0x01,
            _ => 0,
        }
    }
}

/// A decoded instruction. Fields absent from the instruction's format are
/// `None`; `raw` is always the exact 32-bit encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DecodedInst {
    pub mnemonic: Mnemonic,
    pub rd: Option<u8>,
    pub rs1: Option<u8>,
    pub rs2: Option<u8>,
    pub imm: Option<i32>,
    pub raw: u32,
}

/// The canonical NOP, `ADDI x0, x0, 0`.
pub const NOP_WORD: u32 = 0x0000_0013;

fn sign_extend(value: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((value << shift) as i32) >> shift
}

/// Decodes one 32-bit word into an RV32IM instruction.
pub fn decode(word: u32) -> Result<DecodedInst, IsaError> {
    let illegal = || IsaError::IllegalInstruction { word };
    let opcode = word & 0x7f;
    let rd = ((word >> 7) & 0x1f) as u8;
    let funct3 = (word >> 12) & 0x7;
    let rs1 = ((word >> 15) & 0x1f) as u8;
    let rs2 = ((word >> 20) & 0x1f) as u8;
    let funct7 = word >> 25;

    let mnemonic = match opcode {
        0x37 => Lui,
        0x17 => Auipc,
        0x6f => Jal,
        0x67 if funct3 == 0 => Jalr,
        0x63 => match funct3 {
            0 => Beq,
            1 => Bne,
            4 => Blt,
            5 => Bge,
            6 => Bltu,
            7 => Bgeu,
            _ => return Err(illegal()),
        },
        0x03 => match funct3 {
            0 => Lb,
            1 => Lh,
            2 => Lw,
            4 => Lbu,
            5 => Lhu,
            _ => return Err(illegal()),
        },
        0x23 => match funct3 {
            0 => Sb,
            1 => Sh,
            2 => Sw,
            _ => return Err(illegal()),
        },
        0x13 => match (funct3, funct7) {
            (0, _) => Addi,
            (2, _) => Slti,
            (3, _) => Sltiu,
            (4, _) => Xori,
            (6, _) => Ori,
            (7, _) => Andi,
            (1, 0x00) => Slli,
            (5, 0x00) => Srli,
            (5, 0x20) => Srai,
            _ => return Err(illegal()),
        },
        0x33 => match (funct7, funct3) {
            (0x00, 0) => Add,
            (0x20, 0) => Sub,
            (0x00, 1) => Sll,
            (0x00, 2) => Slt,
            (0x00, 3) => Sltu,
            (0x00, 4) => Xor,
            (0x00, 5) => Srl,
            (0x20, 5) => Sra,
            (0x00, 6) => Or,
            (0x00, 7) => And,
            (0x01, 0) => Mul,
            (0x01, 1) => Mulh,
            (0x01, 2) => Mulhsu,
            (0x01, 3) => Mulhu,
            (0x01, 4) => Div,
            (0x01, 5) => Divu,
            (0x01, 6) => Rem,
            (0x01, 7) => Remu,
            _ => return Err(illegal()),
        },
        _ => return Err(illegal()),
    };

    let imm = match mnemonic.format() {
        Format::R => None,
        Format::I if mnemonic.is_shift_imm() => Some(rs2 as i32),
        Format::I => Some(sign_extend(word >> 20, 12)),
        Format::S => Some(sign_extend(((word >> 25) << 5) | ((word >> 7) & 0x1f), 12)),
        Format::B => {
            let imm = ((word >> 31) & 1) << 12
                | ((word >> 7) & 1) << 11
                | ((word >> 25) & 0x3f) << 5
                | ((word >> 8) & 0xf) << 1;
            Some(sign_extend(imm, 13))
        }
        Format::U => Some((word & 0xffff_f000) as i32),
        Format::J => {
            let imm = ((word >> 31) & 1) << 20
                | ((word >> 12) & 0xff) << 12
                | ((word >> 20) & 1) << 11
                | ((word >> 21) & 0x3ff) << 1;
            Some(sign_extend(imm, 21))
        }
    };

    Ok(DecodedInst {
        mnemonic,
        rd: mnemonic.has_rd().then_some(rd),
        rs1: mnemonic.has_rs1().then_some(rs1),
        rs2: mnemonic.has_rs2().then_some(rs2),
        imm,
        raw: word,
    })
}

fn field_err(mnemonic: Mnemonic, field: &'static str, detail: String) -> IsaError {
    IsaError::FieldOutOfRange { mnemonic, field, detail }
}

fn reg_field(
    mnemonic: Mnemonic,
    field: &'static str,
    value: Option<u8>,
    present: bool,
) -> Result<u32, IsaError> {
    match (value, present) {
        (Some(r), true) if r < 32 => Ok(r as u32),
        (Some(r), true) => Err(field_err(mnemonic, field, format!("register x{r} out of range"))),
        (None, false) => Ok(0),
        (None, true) => Err(field_err(mnemonic, field, "missing".into())),
        (Some(_), false) => Err(field_err(mnemonic, field, "not part of this format".into())),
    }
}

fn check_imm(mnemonic: Mnemonic, imm: i32, lo: i32, hi: i32, align: i32) -> Result<u32, IsaError> {
    if imm < lo || imm > hi {
        return Err(field_err(mnemonic, "imm", format!("{imm} outside [{lo}, {hi}]")));
    }
    if imm % align != 0 {
        return Err(field_err(mnemonic, "imm", format!("{imm} is not a multiple of {align}")));
    }
    Ok(imm as u32)
}

/// Encodes the fields of `inst` (its `raw` member is ignored).
pub fn encode(inst: &DecodedInst) -> Result<u32, IsaError> {
    let m = inst.mnemonic;
    let rd = reg_field(m, "rd", inst.rd, m.has_rd())?;
    let rs1 = reg_field(m, "rs1", inst.rs1, m.has_rs1())?;
    let rs2 = reg_field(m, "rs2", inst.rs2, m.has_rs2())?;
    let imm = match (inst.imm, m.has_imm()) {
        (Some(v), true) => v,
        (None, false) => 0,
        (None, true) => return Err(field_err(m, "imm", "missing".into())),
        (Some(_), false) => return Err(field_err(m, "imm", "not part of this format".into())),
    };
    let op = m.opcode();
    let f3 = m.funct3() << 12;

    let word = match m.format() {
        Format::R => (m.funct7() << 25) | (rs2 << 20) | (rs1 << 15) | f3 | (rd << 7) | op,
        Format::I if m.is_shift_imm() => {
            let shamt = check_imm(m, imm, 0, 31, 1)?;
            (m.funct7() << 25) | (shamt << 20) | (rs1 << 15) | f3 | (rd << 7) | op
        }
        Format::I => {
            let v = check_imm(m, imm, -2048, 2047, 1)?;
            ((v & 0xfff) << 20) | (rs1 << 15) | f3 | (rd << 7) | op
        }
        Format::S => {
            let v = check_imm(m, imm, -2048, 2047, 1)?;
            (((v >> 5) & 0x7f) << 25) | (rs2 << 20) | (rs1 << 15) | f3 | ((v & 0x1f) << 7) | op
        }
        Format::B => {
            let v = check_imm(m, imm, -4096, 4094, 2)?;
            (((v >> 12) & 1) << 31)
                | (((v >> 5) & 0x3f) << 25)
                | (rs2 << 20)
                | (rs1 << 15)
                | f3
                | (((v >> 1) & 0xf) << 8)
                | (((v >> 11) & 1) << 7)
                | op
        }
        Format::U => {
            if imm & 0xfff != 0 {
                return Err(field_err(m, "imm", format!("{imm:#x} has nonzero low 12 bits")));
            }
            (imm as u32) | (rd << 7) | op
        }
        Format::J => {
            let v = check_imm(m, imm, -(1 << 20), (1 << 20) - 2, 2)?;
            (((v >> 20) & 1) << 31)
                | (((v >> 1) & 0x3ff) << 21)
                | (((v >> 11) & 1) << 20)
                | (((v >> 12) & 0xff) << 12)
                | (rd << 7)
                | op
        }
    };
    Ok(word)
}

impl DecodedInst {
    /// Builds an instruction from its fields, validating them against the
    /// format and filling in `raw`.
    pub fn new(
        mnemonic: Mnemonic,
        rd: Option<u8>,
        rs1: Option<u8>,
        rs2: Option<u8>,
        imm: Option<i32>,
    ) -> Result<Self, IsaError> {
        let mut inst = DecodedInst { mnemonic, rd, rs1, rs2, imm, raw: 0 };
        inst.raw = encode(&inst)?;
        Ok(inst)
    }

    pub fn r(m: Mnemonic, rd: u8, rs1: u8, rs2: u8) -> Result<Self, IsaError> {
        Self::new(m, Some(rd), Some(rs1), Some(rs2), None)
    }

    pub fn i(m: Mnemonic, rd: u8, rs1: u8, imm: i32) -> Result<Self, IsaError> {
        Self::new(m, Some(rd), Some(rs1), None, Some(imm))
    }

    pub fn s(m: Mnemonic, rs1: u8, rs2: u8, imm: i32) -> Result<Self, IsaError> {
        Self::new(m, None, Some(rs1), Some(rs2), Some(imm))
    }

    pub fn b(m: Mnemonic, rs1: u8, rs2: u8, imm: i32) -> Result<Self, IsaError> {
        Self::new(m, None, Some(rs1), Some(rs2), Some(imm))
    }

    pub fn u(m: Mnemonic, rd: u8, imm: i32) -> Result<Self, IsaError> {
        Self::new(m, Some(rd), None, None, Some(imm))
    }

    pub fn j(rd: u8, imm: i32) -> Result<Self, IsaError> {
        Self::new(Jal, Some(rd), None, None, Some(imm))
    }

    pub fn nop() -> Self {
        decode(NOP_WORD).expect("NOP decodes")
    }

    /// Register written by this instruction, ignoring writes to x0.
    pub fn written_reg(&self) -> Option<u8> {
        self.rd.filter(|&r| r != 0)
    }
}

impl fmt::Display for DecodedInst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.mnemonic.name().to_ascii_lowercase())?;
        let mut sep = " ";
        for (reg, _) in [(self.rd, "rd"), (self.rs1, "rs1"), (self.rs2, "rs2")] {
            if let Some(r) = reg {
                write!(f, "{sep}x{r}")?;
                sep = ", ";
            }
        }
        if let Some(imm) = self.imm {
            write!(f, "{sep}{imm}")?;
        }
        Ok(())
    }
}
