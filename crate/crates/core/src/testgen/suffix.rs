//! Shared random suffix drawn from a terminating, sandboxed palette.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::isa::{DecodedInst, Format, Mnemonic, Region};

struct Picker<'a> {
    focus: &'a [u8],
    bias: u32,
}

impl Picker<'_> {
    fn source(&self, rng: &mut ChaCha8Rng) -> u8 {
        if !self.focus.is_empty() && rng.gen_range(0..100) < self.bias {
            *self.focus.choose(rng).expect("nonempty")
        } else {
            rng.gen_range(0..32)
        }
    }

    fn dest(&self, rng: &mut ChaCha8Rng) -> u8 {
        rng.gen_range(1..32)
    }
}

fn of_format(f: Format, pred: impl Fn(Mnemonic) -> bool) -> Vec<Mnemonic> {
    Mnemonic::ALL.iter().copied().filter(|m| m.format() == f && pred(*m)).collect()
}

/// `len` instructions ending just before the halt sentinel. Control flow only
/// moves forward and never past the sentinel; memory accesses mask their
/// base into the lower half of the data region (which must start at 0).
pub(super) fn build(
    rng: &mut ChaCha8Rng,
    len: usize,
    focus: &[u8],
    region: Region,
    data_only: bool,
    bias: u32,
) -> Vec<DecodedInst> {
    use Mnemonic::*;
    let pick = Picker { focus, bias };
    let register_ops = of_format(Format::R, |_| true);
    let immediate_ops = of_format(Format::I, |m| !m.is_load() && m != Jalr);
    let loads = of_format(Format::I, |m| m.is_load());
    let stores = of_format(Format::S, |_| true);
    let branches = of_format(Format::B, |_| true);
    let mask = (region.size / 2 - 1) as i32;
    let max_offset = (region.size / 2 - 4) as i32;

    let mut out = Vec::with_capacity(len);
    // Indices of accesses whose masking ANDI precedes them; never jump there.
    let mut guarded = Vec::new();
    while out.len() < len {
        let remaining = len - out.len();
        let max_skip = if data_only { 1 } else { remaining.min(3) };
        let roll = rng.gen_range(0..100);
        let inst = match roll {
            0..=34 => {
                let m = *register_ops.choose(rng).expect("ops");
                DecodedInst::r(m, pick.dest(rng), pick.source(rng), pick.source(rng))
            }
            35..=59 => {
                let m = *immediate_ops.choose(rng).expect("ops");
                let imm = if m.is_shift_imm() { rng.gen_range(0..32) } else { rng.gen_range(-2048..2048) };
                DecodedInst::i(m, pick.dest(rng), pick.source(rng), imm)
            }
            60..=79 if remaining >= 2 => {
                let base = pick.dest(rng);
                out.push(DecodedInst::i(Andi, base, pick.source(rng), mask).expect("andi"));
                guarded.push(out.len());
                let offset = rng.gen_range(0..=max_offset);
                if roll < 70 {
                    let m = *loads.choose(rng).expect("loads");
                    DecodedInst::i(m, pick.dest(rng), base, offset)
                } else {
                    let m = *stores.choose(rng).expect("stores");
                    DecodedInst::s(m, base, pick.source(rng), offset)
                }
            }
            80..=89 => {
                let m = *branches.choose(rng).expect("branches");
                let skip = rng.gen_range(1..=max_skip) as i32;
                DecodedInst::b(m, pick.source(rng), pick.source(rng), 4 * skip)
            }
            90..=92 => {
                let skip = rng.gen_range(1..=max_skip) as i32;
                DecodedInst::j(pick.dest(rng), 4 * skip)
            }
            _ => {
                let m = if rng.gen() { Lui } else { Auipc };
                DecodedInst::u(m, pick.dest(rng), (rng.gen::<u32>() & !0xfff) as i32)
            }
        };
        out.push(inst.expect("suffix fields in range"));
    }
    for (i, slot) in out.iter_mut().enumerate() {
        let inst = *slot;
        if !inst.mnemonic.is_control() {
            continue;
        }
        let mut skip = (inst.imm.expect("offset") / 4) as usize;
        while guarded.contains(&(i + skip)) {
            skip += 1;
        }
        *slot = DecodedInst::new(inst.mnemonic, inst.rd, inst.rs1, inst.rs2, Some(4 * skip as i32))
            .expect("forward offset");
    }
    out
}
