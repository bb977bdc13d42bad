//! Line-based retirement records modeled on the RISC-V Formal Interface.
//!
//! One record per line as whitespace-separated `name=value` fields, values
//! in hexadecimal with a `0x` prefix (decimal is accepted on input). Blank
//! lines and lines starting with `#` are ignored, as are unknown fields such
//! as `trap` or `halt`. An optional final `summary` line carries
//! `total_cycles`, `truncated` and `fault`.
//!
//! Memory accesses that fit in one aligned word use the word address in
//! `mem_addr` and byte-lane masks, with data shifted onto its lanes. Accesses
//! crossing a word boundary use the unaligned address and a mask starting at
//! bit 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::isa::{branch_taken, decode, AccessKind, IsaError, MemAccess, RetiredEvent};
use crate::uarch::{TimedEvent, UarchTrace};

use super::TraceIoError;

/// One retirement record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RvfiRecord {
    pub order: u64,
    pub insn: u32,
    pub pc_rdata: u32,
    pub pc_wdata: u32,
    pub rs1_addr: u8,
    pub rs1_rdata: u32,
    pub rs2_addr: u8,
    pub rs2_rdata: u32,
    pub rd_addr: u8,
    pub rd_wdata: u32,
    pub mem_addr: u32,
    pub mem_rmask: u8,
    pub mem_rdata: u32,
    pub mem_wmask: u8,
    pub mem_wdata: u32,
    pub retire_cycle: u64,
}

const FIELDS: [&str; 16] = [
    "order",
    "insn",
    "pc_rdata",
    "pc_wdata",
    "rs1_addr",
    "rs1_rdata",
    "rs2_addr",
    "rs2_rdata",
    "rd_addr",
    "rd_wdata",
    "mem_addr",
    "mem_rmask",
    "mem_rdata",
    "mem_wmask",
    "mem_wdata",
    "retire_cycle",
];

/// `(mem_addr, mask, lane data)` for one access.
fn encode_access(access: &MemAccess) -> (u32, u8, u32) {
    let low_mask = ((1u32 << access.width) - 1) as u8;
    let offset = access.addr & 3;
    if offset + access.width as u32 <= 4 {
        (access.addr & !3, low_mask << offset, access.data << (8 * offset))
    } else {
        (access.addr, low_mask, access.data)
    }
}

fn decode_access(mem_addr: u32, mask: u8, data: u32) -> Result<MemAccess, &'static str> {
    if mask > 0xf {
        return Err("is not a 4-bit byte mask");
    }
    let offset = if mem_addr & 3 == 0 { mask.trailing_zeros() } else { 0 };
    let width = mask.count_ones();
    if mask >> offset != ((1u32 << width) - 1) as u8 || ![1, 2, 4].contains(&width) {
        return Err("is not a contiguous 1, 2 or 4 byte mask");
    }
    let data =
        if width == 4 { data >> (8 * offset) } else { (data >> (8 * offset)) & ((1 << (8 * width)) - 1) };
    Ok(MemAccess { addr: mem_addr + offset, width: width as u8, data })
}

impl RvfiRecord {
    pub fn from_event(timed: &TimedEvent) -> Self {
        let e = &timed.event;
        let mut rec = RvfiRecord {
            order: e.order,
            insn: e.inst.raw,
            pc_rdata: e.pc_before,
            pc_wdata: e.pc_after,
            rs1_addr: e.inst.rs1.unwrap_or(0),
            rs1_rdata: e.rs1_value.unwrap_or(0),
            rs2_addr: e.inst.rs2.unwrap_or(0),
            rs2_rdata: e.rs2_value.unwrap_or(0),
            rd_addr: e.inst.rd.unwrap_or(0),
            rd_wdata: e.rd_value.unwrap_or(0),
            retire_cycle: timed.retire_cycle,
            ..RvfiRecord::default()
        };
        if let Some(read) = &e.mem_read {
            (rec.mem_addr, rec.mem_rmask, rec.mem_rdata) = encode_access(read);
        }
        if let Some(write) = &e.mem_write {
            (rec.mem_addr, rec.mem_wmask, rec.mem_wdata) = encode_access(write);
        }
        rec
    }

    /// Rebuilds the architectural event, cross-checking register fields
    /// against the decoded instruction.
    pub fn to_event(&self, line: usize) -> Result<TimedEvent, TraceIoError> {
        let parse_err =
            |field: &str, message: String| TraceIoError::Parse { line, field: field.to_string(), message };
        let inst = decode(self.insn).map_err(|e| match e {
            IsaError::IllegalInstruction { word } => TraceIoError::IllegalInstruction { line, word },
            other => parse_err("insn", other.to_string()),
        })?;
        let m = inst.mnemonic;
        let check = |field: &str, actual: u8, expected: Option<u8>| {
            if actual == expected.unwrap_or(0) {
                Ok(())
            } else {
                Err(parse_err(field, format!("is x{actual} but {m} uses x{}", expected.unwrap_or(0))))
            }
        };
        check("rs1_addr", self.rs1_addr, inst.rs1)?;
        check("rs2_addr", self.rs2_addr, inst.rs2)?;
        check("rd_addr", self.rd_addr, inst.rd)?;
        if inst.rd == Some(0) && self.rd_wdata != 0 {
            return Err(parse_err("rd_wdata", "must be zero for x0".into()));
        }
        let access =
            |field: &str, mask: u8, data: u32, expected: bool| -> Result<Option<MemAccess>, TraceIoError> {
                match (mask, expected) {
                    (0, false) => Ok(None),
                    (0, true) => Err(parse_err(field, format!("is empty but {m} accesses memory"))),
                    (_, false) => {
                        Err(parse_err(field, format!("is set but {m} does not access memory that way")))
                    }
                    (_, true) => decode_access(self.mem_addr, mask, data)
                        .map(Some)
                        .map_err(|msg| parse_err(field, msg.into())),
                }
            };
        let mem_read = access("mem_rmask", self.mem_rmask, self.mem_rdata, m.is_load())?;
        let mem_write = access("mem_wmask", self.mem_wmask, self.mem_wdata, m.is_store())?;
        let rs1_value = inst.rs1.map(|_| self.rs1_rdata);
        let rs2_value = inst.rs2.map(|_| self.rs2_rdata);
        let event = RetiredEvent {
            order: self.order,
            inst,
            pc_before: self.pc_rdata,
            pc_after: self.pc_wdata,
            rs1_value,
            rs2_value,
            rd_value: inst.rd.map(|_| self.rd_wdata),
            mem_read,
            mem_write,
            branch_taken: m.is_branch().then(|| branch_taken(m, self.rs1_rdata, self.rs2_rdata)),
        };
        Ok(TimedEvent { event, retire_cycle: self.retire_cycle })
    }

    fn values(&self) -> [u64; 16] {
        [
            self.order,
            self.insn as u64,
            self.pc_rdata as u64,
            self.pc_wdata as u64,
            self.rs1_addr as u64,
            self.rs1_rdata as u64,
            self.rs2_addr as u64,
            self.rs2_rdata as u64,
            self.rd_addr as u64,
            self.rd_wdata as u64,
            self.mem_addr as u64,
            self.mem_rmask as u64,
            self.mem_rdata as u64,
            self.mem_wmask as u64,
            self.mem_wdata as u64,
            self.retire_cycle,
        ]
    }

    pub fn to_line(&self) -> String {
        let mut line = String::new();
        for (name, value) in FIELDS.iter().zip(self.values()) {
            if !line.is_empty() {
                line.push(' ');
            }
            write!(line, "{name}={value:#x}").expect("write to string");
        }
        line
    }

    pub fn parse_line(text: &str, line: usize) -> Result<Self, TraceIoError> {
        let fields = parse_fields(text, line)?;
        let get = |name: &str, max: u64| -> Result<u64, TraceIoError> {
            let value = *fields.get(name).ok_or_else(|| TraceIoError::Parse {
                line,
                field: name.to_string(),
                message: "missing".into(),
            })?;
            if value > max {
                return Err(TraceIoError::Parse {
                    line,
                    field: name.to_string(),
                    message: format!("{value:#x} exceeds {max:#x}"),
                });
            }
            Ok(value)
        };
        let word = |name| get(name, u32::MAX as u64).map(|v| v as u32);
        let reg = |name| get(name, 31).map(|v| v as u8);
        let mask = |name| get(name, 0xf).map(|v| v as u8);
        Ok(RvfiRecord {
            order: get("order", u64::MAX)?,
            insn: word("insn")?,
            pc_rdata: word("pc_rdata")?,
            pc_wdata: word("pc_wdata")?,
            rs1_addr: reg("rs1_addr")?,
            rs1_rdata: word("rs1_rdata")?,
            rs2_addr: reg("rs2_addr")?,
            rs2_rdata: word("rs2_rdata")?,
            rd_addr: reg("rd_addr")?,
            rd_wdata: word("rd_wdata")?,
            mem_addr: word("mem_addr")?,
            mem_rmask: mask("mem_rmask")?,
            mem_rdata: word("mem_rdata")?,
            mem_wmask: mask("mem_wmask")?,
            mem_wdata: word("mem_wdata")?,
            retire_cycle: get("retire_cycle", u64::MAX)?,
        })
    }
}

fn parse_number(text: &str) -> Option<u64> {
    match text.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => text.parse().ok(),
    }
}

/// Numeric fields of one line; non-numeric values of unknown fields are kept
/// out of the map.
fn parse_fields(text: &str, line: usize) -> Result<BTreeMap<&str, u64>, TraceIoError> {
    let mut out = BTreeMap::new();
    for token in text.split_whitespace() {
        let (name, value) = token.split_once('=').ok_or_else(|| TraceIoError::Parse {
            line,
            field: token.to_string(),
            message: "expected name=value".into(),
        })?;
        let known = FIELDS.contains(&name) || matches!(name, "total_cycles" | "truncated");
        match parse_number(value) {
            Some(v) => {
                if out.insert(name, v).is_some() && known {
                    return Err(TraceIoError::Parse {
                        line,
                        field: name.to_string(),
                        message: "repeated".into(),
                    });
                }
            }
            None if known => {
                return Err(TraceIoError::Parse {
                    line,
                    field: name.to_string(),
                    message: format!("{value:?} is not a number"),
                })
            }
            None => {}
        }
    }
    Ok(out)
}

fn encode_fault(fault: &Option<IsaError>) -> String {
    match fault {
        None => "none".into(),
        Some(IsaError::IllegalInstruction { word }) => format!("illegal-instruction:{word:#x}"),
        Some(IsaError::MemoryFault { addr, width, kind }) => format!("{kind}:{addr:#x}:{width:#x}"),
        Some(other) => format!("other:{}", other.to_string().replace(' ', "_")),
    }
}

fn decode_fault(text: &str, line: usize) -> Result<Option<IsaError>, TraceIoError> {
    let err = || TraceIoError::Parse {
        line,
        field: "fault".into(),
        message: format!("unrecognized fault {text:?}"),
    };
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| parse_number(s).ok_or_else(err);
    let fault = match parts.as_slice() {
        ["none"] => return Ok(None),
        ["illegal-instruction", word] => {
            IsaError::IllegalInstruction { word: u32::try_from(num(word)?).map_err(|_| err())? }
        }
        [kind, addr, width] => IsaError::MemoryFault {
            addr: u32::try_from(num(addr)?).map_err(|_| err())?,
            width: u8::try_from(num(width)?).map_err(|_| err())?,
            kind: match *kind {
                "fetch" => AccessKind::Fetch,
                "load" => AccessKind::Load,
                "store" => AccessKind::Store,
                _ => return Err(err()),
            },
        },
        _ => return Err(err()),
    };
    Ok(Some(fault))
}

pub fn format_rvfi(trace: &UarchTrace) -> String {
    let mut out = String::from("# ctrsynth rvfi v1\n");
    for timed in &trace.events {
        out.push_str(&RvfiRecord::from_event(timed).to_line());
        out.push('\n');
    }
    writeln!(
        out,
        "summary total_cycles={:#x} truncated={:#x} fault={}",
        trace.total_cycles,
        trace.truncated as u8,
        encode_fault(&trace.fault)
    )
    .expect("write to string");
    out
}

pub fn parse_rvfi(text: &str) -> Result<UarchTrace, TraceIoError> {
    let mut events: Vec<TimedEvent> = Vec::new();
    let mut summary = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        if summary.is_some() {
            return Err(TraceIoError::Parse {
                line,
                field: "summary".into(),
                message: "records after the summary line".into(),
            });
        }
        if let Some(rest) = body.strip_prefix("summary") {
            let fields = parse_fields(rest, line)?;
            let field = |name: &str| {
                fields.get(name).copied().ok_or_else(|| TraceIoError::Parse {
                    line,
                    field: name.to_string(),
                    message: "missing".into(),
                })
            };
            let fault = rest
                .split_whitespace()
                .find_map(|t| t.strip_prefix("fault="))
                .map_or(Ok(None), |f| decode_fault(f, line))?;
            summary = Some((field("total_cycles")?, field("truncated")? != 0, fault));
            continue;
        }
        let record = RvfiRecord::parse_line(body, line)?;
        if let Some(prev) = events.last() {
            if record.order <= prev.event.order {
                return Err(TraceIoError::Parse {
                    line,
                    field: "order".into(),
                    message: format!("{:#x} does not increase past {:#x}", record.order, prev.event.order),
                });
            }
        }
        events.push(record.to_event(line)?);
    }
    let (total_cycles, truncated, fault) =
        summary.unwrap_or_else(|| (events.last().map_or(0, |t| t.retire_cycle), false, None));
    Ok(UarchTrace { events, total_cycles, truncated, fault })
}

pub fn write_rvfi(trace: &UarchTrace, path: &Path) -> Result<(), TraceIoError> {
    let mut file = std::fs::File::create(path).map_err(|e| TraceIoError::io(path, e))?;
    file.write_all(format_rvfi(trace).as_bytes()).map_err(|e| TraceIoError::io(path, e))
}

pub fn read_rvfi(path: &Path) -> Result<UarchTrace, TraceIoError> {
    let text = std::fs::read_to_string(path).map_err(|e| TraceIoError::io(path, e))?;
    parse_rvfi(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{ArchState, DecodedInst, MemoryLayout, Mnemonic, Program, HALT_WORD};
    use crate::testgen::load_immediate;
    use crate::uarch::{preset, simulate, UarchConfig};
    use Mnemonic::*;

    fn run(insts: &[DecodedInst], cfg: &UarchConfig, max_cycles: u64) -> UarchTrace {
        let mut words: Vec<u32> = insts.iter().map(|i| i.raw).collect();
        words.push(HALT_WORD);
        let layout = MemoryLayout::default();
        let state = ArchState::boot(&Program::new(layout.code.base, words), [0; 32], layout).unwrap();
        simulate(&state, cfg, max_cycles)
    }

    fn record(insts: &[DecodedInst]) -> RvfiRecord {
        let trace = run(insts, &UarchConfig::default(), 1000);
        RvfiRecord::from_event(trace.events.last().unwrap())
    }

    #[test]
    fn empty_input_is_an_empty_trace() {
        let t = parse_rvfi("").unwrap();
        assert!(t.events.is_empty());
        assert_eq!(t.total_cycles, 0);
        assert!(!t.truncated && t.fault.is_none());
    }

    #[test]
    fn masks_follow_access_width_and_lane() {
        let mut prog = load_immediate(1, 0x100).to_vec();
        prog.extend(load_immediate(2, 0xa1b2_c3d4));
        prog.push(DecodedInst::s(Sw, 1, 2, 0).unwrap());
        let lw = record(&[prog.clone(), vec![DecodedInst::i(Lw, 3, 1, 0).unwrap()]].concat());
        assert_eq!((lw.mem_addr, lw.mem_rmask, lw.mem_rdata), (0x100, 0b1111, 0xa1b2_c3d4));
        assert_eq!(lw.mem_wmask, 0);

        let sb = record(&[prog.clone(), vec![DecodedInst::s(Sb, 1, 2, 2).unwrap()]].concat());
        assert_eq!((sb.mem_addr, sb.mem_wmask, sb.mem_wdata), (0x100, 0b0100, 0x00d4_0000));

        let lh = record(&[prog.clone(), vec![DecodedInst::i(Lhu, 3, 1, 2).unwrap()]].concat());
        assert_eq!((lh.mem_addr, lh.mem_rmask, lh.mem_rdata), (0x100, 0b1100, 0xa1b2_0000));

        // Crossing a word boundary keeps the unaligned address.
        let cross = record(&[prog, vec![DecodedInst::i(Lw, 3, 1, 2).unwrap()]].concat());
        assert_eq!((cross.mem_addr, cross.mem_rmask, cross.mem_rdata), (0x102, 0b1111, 0x0000_a1b2));

        let nop = record(&[DecodedInst::nop()]);
        assert_eq!(
            (nop.mem_addr, nop.mem_rmask, nop.mem_rdata, nop.mem_wmask, nop.mem_wdata),
            (0, 0, 0, 0, 0)
        );
    }

    #[test]
    fn round_trip_with_memory_branches_and_truncation() {
        let mut prog = load_immediate(1, 0x203).to_vec();
        prog.extend(load_immediate(2, 0x8765_4321));
        prog.extend([
            DecodedInst::s(Sw, 1, 2, 1).unwrap(),
            DecodedInst::i(Lh, 3, 1, 1).unwrap(),
            DecodedInst::i(Lb, 4, 1, 3).unwrap(),
            DecodedInst::s(Sh, 1, 2, 3).unwrap(),
            DecodedInst::b(Beq, 0, 0, 4).unwrap(),
            DecodedInst::b(Bne, 3, 4, 8).unwrap(),
            DecodedInst::r(Div, 5, 2, 1).unwrap(),
            DecodedInst::j(6, 4).unwrap(),
        ]);
        for cfg in [preset("ibex-like").unwrap(), preset("cva6-like").unwrap()] {
            let trace = run(&prog, &cfg, 1000);
            assert_eq!(parse_rvfi(&format_rvfi(&trace)).unwrap(), trace);
            let cut = run(&prog, &cfg, 9);
            assert!(cut.truncated);
            assert_eq!(parse_rvfi(&format_rvfi(&cut)).unwrap(), cut);
        }
    }

    #[test]
    fn faults_round_trip() {
        let load = run(&[DecodedInst::i(Lw, 1, 0, -4).unwrap()], &UarchConfig::default(), 100);
        assert!(load.fault.is_some());
        assert_eq!(parse_rvfi(&format_rvfi(&load)).unwrap(), load);
        let layout = MemoryLayout::default();
        let state =
            ArchState::boot(&Program::new(layout.code.base, vec![0xffff_ffff]), [0; 32], layout).unwrap();
        let illegal = simulate(&state, &UarchConfig::default(), 100);
        assert_eq!(illegal.fault, Some(IsaError::IllegalInstruction { word: 0xffff_ffff }));
        assert_eq!(parse_rvfi(&format_rvfi(&illegal)).unwrap(), illegal);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.rvfi");
        let trace = run(&[DecodedInst::nop(), DecodedInst::nop()], &UarchConfig::default(), 100);
        write_rvfi(&trace, &path).unwrap();
        assert_eq!(read_rvfi(&path).unwrap(), trace);
        assert!(matches!(read_rvfi(&dir.path().join("missing")), Err(TraceIoError::Io { .. })));
    }

    fn nop_line(order: u64, cycle: u64) -> String {
        format!(
            "order={order:#x} insn=0x13 pc_rdata=0x80000000 pc_wdata=0x80000004 rs1_addr=0x0 rs1_rdata=0x0 \
             rs2_addr=0x0 rs2_rdata=0x0 rd_addr=0x0 rd_wdata=0x0 mem_addr=0x0 mem_rmask=0x0 mem_rdata=0x0 \
             mem_wmask=0x0 mem_wdata=0x0 retire_cycle={cycle:#x}"
        )
    }

    fn parse_error_field(text: &str) -> (usize, String) {
        match parse_rvfi(text) {
            Err(TraceIoError::Parse { line, field, .. }) => (line, field),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_records() {
        let two = format!("{}\n{}\n", nop_line(1, 5), nop_line(1, 6));
        assert_eq!(parse_error_field(&two), (2, "order".into()));
        let missing = nop_line(0, 5).replace(" retire_cycle=0x5", "");
        assert_eq!(parse_error_field(&missing), (1, "retire_cycle".into()));
        let bad_mask = nop_line(0, 5).replace("mem_rmask=0x0", "mem_rmask=0x1f");
        assert_eq!(parse_error_field(&bad_mask), (1, "mem_rmask".into()));
        let wrong_rd = nop_line(0, 5).replace("rd_addr=0x0", "rd_addr=0x3");
        assert_eq!(parse_error_field(&wrong_rd), (1, "rd_addr".into()));
        let stray_read = nop_line(0, 5).replace("mem_rmask=0x0", "mem_rmask=0x1");
        assert_eq!(parse_error_field(&stray_read), (1, "mem_rmask".into()));
        let junk = format!("# header\n\n{}\nnonsense\n", nop_line(0, 5));
        assert_eq!(parse_error_field(&junk), (4, "nonsense".into()));
        let illegal = nop_line(0, 5).replace("insn=0x13", "insn=0xffffffff");
        assert!(matches!(
            parse_rvfi(&illegal),
            Err(TraceIoError::IllegalInstruction { line: 1, word: 0xffff_ffff })
        ));
    }

    #[test]
    fn accepts_extra_signals_and_decimal() {
        let line = format!("{} trap=0 halt=1 intr=0x0 mode=machine", nop_line(0, 5))
            .replace("retire_cycle=0x5", "retire_cycle=5");
        let t = parse_rvfi(&line).unwrap();
        assert_eq!(t.events.len(), 1);
        assert_eq!(t.events[0].retire_cycle, 5);
        assert_eq!(t.total_cycles, 5);
        assert_eq!(t.events[0].event.inst.mnemonic, Addi);
    }
}
