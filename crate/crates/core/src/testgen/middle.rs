//! Divergent middle sections, one strategy per leakage source.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{load_immediate, random_value, sandbox_address, ProloguePolicy, TestgenError};
use crate::isa::{alu, branch_taken, DecodedInst, Format, Mnemonic, Region};
use crate::template::{ContractAtom, LeakageSource as S};

pub(super) struct Context {
    pub regs: [u32; 32],
    pub region: Region,
    /// Address of the first middle instruction.
    pub base: u32,
    pub policy: ProloguePolicy,
}

pub(super) struct Built {
    pub a: Vec<DecodedInst>,
    pub b: Vec<DecodedInst>,
    /// Registers touched by the target instruction.
    pub focus: Vec<u8>,
}

/// A register initialization inside the middle section.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Value {
    Const(u32),
    /// `pc(target) + offset - imm + low_bit`: a JALR base that lands
    /// `offset` bytes past the target.
    JumpTo {
        offset: u32,
        imm: i32,
        low_bit: u32,
    },
}

/// One side of a pair: `setup ++ extra ++ lead ++ [target] ++ post`.
#[derive(Debug, Clone)]
struct Plan {
    setup: Vec<(u8, Value)>,
    extra: Vec<DecodedInst>,
    lead: Vec<DecodedInst>,
    target: DecodedInst,
    post: Vec<DecodedInst>,
}

impl Plan {
    fn new(target: DecodedInst) -> Self {
        Plan { setup: Vec::new(), extra: Vec::new(), lead: Vec::new(), target, post: Vec::new() }
    }

    fn set(&mut self, reg: u8, value: Value) {
        match self.setup.iter_mut().find(|(r, _)| *r == reg) {
            Some(slot) => slot.1 = value,
            None => self.setup.push((reg, value)),
        }
    }

    fn set_const(&mut self, reg: u8, value: u32) {
        self.set(reg, Value::Const(value));
    }

    fn value_of(&self, ctx: &Context, reg: u8) -> Value {
        self.setup.iter().find(|(r, _)| *r == reg).map_or(Value::Const(ctx.regs[reg as usize]), |(_, v)| *v)
    }

    fn retarget(&mut self, f: impl FnOnce(&mut DecodedInst)) {
        let mut inst = self.target;
        f(&mut inst);
        self.target = DecodedInst::new(inst.mnemonic, inst.rd, inst.rs1, inst.rs2, inst.imm)
            .expect("strategy keeps fields in range");
    }

    fn assemble(&self, base: u32) -> Vec<DecodedInst> {
        let before = 2 * self.setup.len() + self.extra.len() + self.lead.len();
        let target_pc = base.wrapping_add(4 * before as u32);
        let mut out = Vec::with_capacity(before + 1 + self.post.len());
        for &(reg, value) in &self.setup {
            let v = match value {
                Value::Const(c) => c,
                Value::JumpTo { offset, imm, low_bit } => {
                    target_pc.wrapping_add(offset).wrapping_sub(imm as u32).wrapping_add(low_bit)
                }
            };
            out.extend(load_immediate(reg, v));
        }
        out.extend(&self.extra);
        out.extend(&self.lead);
        out.push(self.target);
        out.extend(&self.post);
        out
    }
}

fn reg(rng: &mut ChaCha8Rng) -> u8 {
    rng.gen_range(1..32)
}

fn other_reg(rng: &mut ChaCha8Rng, exclude: &[Option<u8>]) -> u8 {
    loop {
        let r = reg(rng);
        if !exclude.contains(&Some(r)) {
            return r;
        }
    }
}

fn distinct_value(rng: &mut ChaCha8Rng, ctx: &Context, old: u32, mask: u32) -> u32 {
    loop {
        let v = random_value(rng, ctx.policy);
        if (v ^ old) & mask != 0 {
            return v;
        }
    }
}

fn width_mask(width: u8) -> u32 {
    if width >= 4 {
        u32::MAX
    } else {
        (1 << (8 * width)) - 1
    }
}

/// A data address whose word and the following one lie inside the region.
fn mem_addr(rng: &mut ChaCha8Rng, region: Region, low: Option<u32>) -> u32 {
    let mut a = sandbox_address(rng.gen(), region);
    if let Some(low) = low {
        a = (a & !3) | low;
    }
    while (a & !3) as u64 + 8 > region.end() {
        a -= 4;
    }
    a
}

fn other_addr(rng: &mut ChaCha8Rng, region: Region, addr: u32) -> u32 {
    loop {
        let a = mem_addr(rng, region, Some(addr & 3));
        if a != addr {
            return a;
        }
    }
}

fn store_for_width(width: u8) -> Mnemonic {
    match width {
        1 => Mnemonic::Sb,
        2 => Mnemonic::Sh,
        _ => Mnemonic::Sw,
    }
}

fn upper(rng: &mut ChaCha8Rng) -> i32 {
    (rng.gen::<u32>() & !0xfff) as i32
}

/// Mnemonics that can replace `m` without changing operand shape.
fn op_swaps(m: Mnemonic) -> Vec<Mnemonic> {
    let class = |x: Mnemonic| (x.format(), x.is_load(), x.is_shift_imm(), x == Mnemonic::Jalr);
    Mnemonic::ALL.iter().copied().filter(|&x| x != m && class(x) == class(m)).collect()
}

/// The two-hop landing pad after a control transfer: jumping 4 bytes past
/// the target lands on a jump over one slot, 8 bytes lands on a jump to the
/// same place. Both paths retire the same number of instructions.
fn landing_pad() -> Vec<DecodedInst> {
    vec![DecodedInst::j(0, 8).expect("jal"), DecodedInst::j(0, 4).expect("jal")]
}

struct MemSite {
    addr: u32,
}

fn base_plan(rng: &mut ChaCha8Rng, m: Mnemonic, ctx: &Context) -> (Plan, Option<MemSite>) {
    use Mnemonic::*;
    let (rd, rs1) = (reg(rng), reg(rng));
    if m.is_mem() {
        let addr = mem_addr(rng, ctx.region, None);
        let imm = rng.gen_range(-2048..2048);
        let target = if m.is_load() {
            DecodedInst::i(m, rd, rs1, imm)
        } else {
            DecodedInst::s(m, rs1, other_reg(rng, &[Some(rs1)]), imm)
        }
        .expect("memory target");
        let mut plan = Plan::new(target);
        plan.set_const(rs1, addr.wrapping_sub(imm as u32));
        return (plan, Some(MemSite { addr }));
    }
    let target = match m.format() {
        Format::R => DecodedInst::r(m, rd, rs1, reg(rng)),
        Format::I if m.is_shift_imm() => DecodedInst::i(m, rd, rs1, rng.gen_range(0..32)),
        Format::I if m == Jalr => DecodedInst::i(m, rd, rs1, rng.gen_range(-1024..1024)),
        Format::I => DecodedInst::i(m, rd, rs1, rng.gen_range(-2048..2048)),
        Format::B => DecodedInst::b(m, rs1, reg(rng), 4),
        Format::U => DecodedInst::u(m, rd, upper(rng)),
        Format::J => DecodedInst::j(rd, 4),
        Format::S => unreachable!("stores handled above"),
    }
    .expect("target");
    let mut plan = Plan::new(target);
    if m == Jalr {
        plan.set(rs1, Value::JumpTo { offset: 4, imm: target.imm.expect("imm"), low_bit: 0 });
    }
    (plan, None)
}

/// Rebases a memory target onto `addr` by changing its base register value.
fn move_address(plan: &mut Plan, addr: u32) {
    let t = plan.target;
    plan.set_const(t.rs1.expect("base"), addr.wrapping_sub(t.imm.expect("offset") as u32));
}

/// Register value pairs that make `m` produce different results.
fn result_divergence(
    rng: &mut ChaCha8Rng,
    ctx: &Context,
    a: &mut Plan,
    b: &mut Plan,
) -> Result<(), TestgenError> {
    let t = a.target;
    let m = t.mnemonic;
    for _ in 0..256 {
        let (x1, x2) = (random_value(rng, ctx.policy), random_value(rng, ctx.policy));
        let y = random_value(rng, ctx.policy);
        let same_reg = t.rs1 == t.rs2;
        let rhs = |x: u32| match (t.rs2, same_reg) {
            (Some(_), true) => x,
            (Some(_), false) => y,
            (None, _) => t.imm.expect("imm") as u32,
        };
        if alu(m, x1, rhs(x1)) != alu(m, x2, rhs(x2)) {
            let rs1 = t.rs1.expect("rs1");
            a.set_const(rs1, x1);
            b.set_const(rs1, x2);
            if let (Some(rs2), false) = (t.rs2, same_reg) {
                a.set_const(rs2, y);
                b.set_const(rs2, y);
            }
            return Ok(());
        }
    }
    Err(TestgenError::UngeneratableAtom(format!("{m}:REG_RD")))
}

/// An earlier store of differing data to the target load's address.
fn differing_store(rng: &mut ChaCha8Rng, ctx: &Context, a: &mut Plan, b: &mut Plan) {
    let t = a.target;
    let width = t.mnemonic.mem_width().expect("load width");
    let data_reg = other_reg(rng, &[t.rs1]);
    let store =
        DecodedInst::s(store_for_width(width), t.rs1.expect("base"), data_reg, t.imm.expect("offset"))
            .expect("store");
    let v1 = random_value(rng, ctx.policy);
    let v2 = distinct_value(rng, ctx, v1, width_mask(width));
    a.set_const(data_reg, v1);
    b.set_const(data_reg, v2);
    a.extra.push(store);
    b.extra.push(store);
}

fn taken_operands(rng: &mut ChaCha8Rng, ctx: &Context, want: Option<bool>, m: Mnemonic) -> (u32, u32) {
    loop {
        let x = random_value(rng, ctx.policy);
        let y = match rng.gen_range(0..4) {
            0 => x,
            1 => x.wrapping_add(1),
            2 => x.wrapping_sub(1),
            _ => random_value(rng, ctx.policy),
        };
        if want.is_none_or(|w| branch_taken(m, x, y) == w) {
            return (x, y);
        }
    }
}

pub(super) fn build(rng: &mut ChaCha8Rng, atom: &ContractAtom, ctx: &Context) -> Result<Built, TestgenError> {
    use Mnemonic::*;
    let m = atom.inst_type;
    let ungeneratable = || TestgenError::UngeneratableAtom(atom.id());
    let (mut a, site) = base_plan(rng, m, ctx);
    if matches!(atom.source, S::BranchTaken | S::NewPc) && m.is_branch() && a.target.rs1 == a.target.rs2 {
        let rs1 = a.target.rs1;
        let fresh = other_reg(rng, &[rs1]);
        a.retarget(|t| t.rs2 = Some(fresh));
    }
    let mut b = a.clone();
    let t = a.target;

    match atom.source {
        S::Op => match m {
            Jal | Jalr => {
                let link = reg(rng);
                let imm = rng.gen_range(-1024..1024);
                let jal = DecodedInst::j(t.rd.expect("rd"), 4).expect("jal");
                let jalr = DecodedInst::i(Jalr, t.rd.expect("rd"), link, imm).expect("jalr");
                let (first, second) = if m == Jal { (jal, jalr) } else { (jalr, jal) };
                a = Plan::new(first);
                a.set(link, Value::JumpTo { offset: 4, imm, low_bit: 0 });
                b = a.clone();
                b.target = second;
            }
            _ => {
                let swaps = op_swaps(m);
                let other = *swaps.choose(rng).ok_or_else(ungeneratable)?;
                b.retarget(|i| i.mnemonic = other);
            }
        },
        S::Rd => {
            let rd = other_reg(rng, &[t.rd]);
            b.retarget(|i| i.rd = Some(rd));
        }
        S::Rs1 | S::Rs2 => {
            let old = if atom.source == S::Rs1 { t.rs1 } else { t.rs2 };
            let fresh = other_reg(rng, &[t.rs1, t.rs2]);
            let value = a.value_of(ctx, old.expect("source register"));
            a.set(fresh, value);
            b.set(fresh, value);
            b.retarget(|i| if atom.source == S::Rs1 { i.rs1 = Some(fresh) } else { i.rs2 = Some(fresh) });
        }
        S::Imm => match m {
            _ if m.is_mem() => {
                let addr = site.as_ref().expect("memory site").addr;
                let imm = t.imm.expect("imm");
                let delta = loop {
                    let k = rng.gen_range(-64..=64i32) * 4;
                    let moved = addr.wrapping_add(k as u32);
                    if k != 0 && (-2048..2048).contains(&(imm + k)) && ctx.region.contains(moved & !3, 8) {
                        break k;
                    }
                };
                b.retarget(|i| i.imm = Some(imm + delta));
            }
            _ if m.is_branch() || m == Jal => {
                a.post = landing_pad();
                b.post = landing_pad();
                b.retarget(|i| i.imm = Some(8));
            }
            Jalr => {
                a.post = landing_pad();
                b.post = landing_pad();
                b.retarget(|i| i.imm = Some(i.imm.expect("imm") + 4));
            }
            Lui | Auipc => {
                let old = t.imm.expect("imm");
                let new = loop {
                    let u = upper(rng);
                    if u != old {
                        break u;
                    }
                };
                b.retarget(|i| i.imm = Some(new));
            }
            _ if m.is_shift_imm() => {
                let old = t.imm.expect("imm");
                b.retarget(|i| i.imm = Some((old + rng.gen_range(1..32)) % 32));
            }
            _ => {
                let old = t.imm.expect("imm");
                b.retarget(|i| i.imm = Some((old + 2048 + rng.gen_range(1..4096)) % 4096 - 2048));
            }
        },
        S::RegRs1 | S::MemRAddr | S::MemWAddr if m.is_mem() => {
            let addr = site.as_ref().expect("memory site").addr;
            move_address(&mut b, other_addr(rng, ctx.region, addr));
        }
        S::RegRs1 if m == Jalr => {
            let rs1 = t.rs1.expect("rs1");
            b.set(rs1, Value::JumpTo { offset: 4, imm: t.imm.expect("imm"), low_bit: 1 });
        }
        S::RegRs1 | S::RegRs2 | S::MemWData => {
            let r = if atom.source == S::RegRs1 { t.rs1 } else { t.rs2 };
            let r = r.expect("source register");
            let mask = m.mem_width().map_or(u32::MAX, width_mask);
            let v1 = random_value(rng, ctx.policy);
            a.set_const(r, v1);
            b.set_const(r, distinct_value(rng, ctx, v1, mask));
        }
        S::RegRd => match m {
            _ if m.is_load() => differing_store(rng, ctx, &mut a, &mut b),
            Lui | Auipc => {
                let old = t.imm.expect("imm");
                let new = loop {
                    let u = upper(rng);
                    if u != old {
                        break u;
                    }
                };
                b.retarget(|i| i.imm = Some(new));
            }
            Jal | Jalr => {
                a.lead.push(DecodedInst::nop());
                b.post.insert(0, DecodedInst::nop());
            }
            _ => result_divergence(rng, ctx, &mut a, &mut b)?,
        },
        S::MemRData => differing_store(rng, ctx, &mut a, &mut b),
        S::IsWordAligned | S::IsHalfAligned => {
            let (fixed, others) =
                if atom.source == S::IsWordAligned { (0, [1, 2, 3]) } else { (3, [0, 1, 2]) };
            let mut lows = [fixed, *others.choose(rng).expect("nonempty")];
            if rng.gen() {
                lows.swap(0, 1);
            }
            let word = mem_addr(rng, ctx.region, Some(0));
            move_address(&mut a, word | lows[0]);
            move_address(&mut b, word | lows[1]);
        }
        S::BranchTaken => {
            let (rs1, rs2) = (t.rs1.expect("rs1"), t.rs2.expect("rs2"));
            let first: bool = rng.gen();
            let (x1, y1) = taken_operands(rng, ctx, Some(first), m);
            let (x2, y2) = taken_operands(rng, ctx, Some(!first), m);
            a.set_const(rs1, x1);
            a.set_const(rs2, y1);
            b.set_const(rs1, x2);
            b.set_const(rs2, y2);
        }
        S::NewPc => {
            a.post = landing_pad();
            b.post = landing_pad();
            match m {
                Jalr => {
                    let imm = t.imm.expect("imm");
                    b.set(t.rs1.expect("rs1"), Value::JumpTo { offset: 8, imm, low_bit: 0 });
                }
                _ => {
                    if m.is_branch() {
                        let (rs1, rs2) = (t.rs1.expect("rs1"), t.rs2.expect("rs2"));
                        let (x, y) = taken_operands(rng, ctx, Some(true), m);
                        for plan in [&mut a, &mut b] {
                            plan.set_const(rs1, x);
                            plan.set_const(rs2, y);
                        }
                    }
                    b.retarget(|i| i.imm = Some(8));
                }
            }
        }
        S::RawRs1(n) | S::RawRs2(n) | S::RawRd(n) | S::Waw(n) => {
            let nop = DecodedInst::nop();
            let addi = |rd: u8, rs1: u8| DecodedInst::i(Addi, rd, rs1, 0).expect("addi");
            let (with, without) = match atom.source {
                S::RawRs1(_) => {
                    let r = t.rs1.expect("rs1");
                    (addi(r, r), addi(0, r))
                }
                S::RawRs2(_) => {
                    let r = t.rs2.expect("rs2");
                    (addi(r, r), addi(0, r))
                }
                S::RawRd(_) => (addi(0, t.rd.expect("rd")), nop),
                _ => {
                    let r = t.rd.expect("rd");
                    (addi(r, r), addi(0, r))
                }
            };
            let fillers = vec![nop; n as usize - 1];
            let (first, second) = if rng.gen() { (with, without) } else { (without, with) };
            a.lead = std::iter::once(first).chain(fillers.iter().copied()).collect();
            b.lead = std::iter::once(second).chain(fillers).collect();
        }
        S::MemRAddr | S::MemWAddr => return Err(ungeneratable()),
    }

    let focus = [a.target.rd, a.target.rs1, a.target.rs2].into_iter().flatten().filter(|&r| r != 0).collect();
    Ok(Built { a: a.assemble(ctx.base), b: b.assemble(ctx.base), focus })
}
