//! Seeded generation of paired test programs.
//!
//! Every test case targets one contract atom. Both programs share a prologue
//! that initializes x1..x31 and a random suffix; only the middle section,
//! built around one instance of the target's instruction type, differs.

mod middle;
mod suffix;

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{DecodedInst, MemoryLayout, Mnemonic, Program, Region, HALT_WORD};
use crate::template::{ContractAtom, Family, Template};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TestgenError {
    #[error("no divergence strategy for atom {0}")]
    UngeneratableAtom(String),
    #[error("invalid generator configuration: {0}")]
    InvalidConfig(String),
}

/// How prologue register values are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProloguePolicy {
    /// Uniformly random bit length, then random bits below the top bit, with
    /// occasional corner values (0, 1, -1, extremes).
    RandomBitLength,
    /// Uniform 32-bit values.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub prologue: ProloguePolicy,
    /// Families whose divergence strategies are enabled.
    pub families: BTreeSet<Family>,
    pub suffix_length: u32,
    /// Retirement bound for both programs.
    pub fuel: u64,
    pub data_region: Region,
    /// Restrict to divergences that only change data values, never the
    /// instruction structure, and keep suffix control flow data-independent.
    pub data_only: bool,
    /// Pad the shorter middle section with NOPs.
    pub pad_equal_length: bool,
    /// Percent chance that a suffix operand reuses a register touched by the
    /// target instruction.
    pub surfacing_bias: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            prologue: ProloguePolicy::RandomBitLength,
            families: Family::ALL.into_iter().collect(),
            suffix_length: 12,
            fuel: 10_000,
            data_region: MemoryLayout::default().data,
            data_only: false,
            pad_equal_length: true,
            surfacing_bias: 50,
        }
    }
}

impl GenConfig {
    pub fn layout(&self) -> MemoryLayout {
        MemoryLayout { data: self.data_region, ..MemoryLayout::default() }
    }

    pub fn validate(&self) -> Result<(), TestgenError> {
        let r = self.data_region;
        if r.base != 0 || !r.size.is_power_of_two() || !(16..=4096).contains(&r.size) {
            return Err(TestgenError::InvalidConfig(format!(
                "data region must start at 0 with a power-of-two size in 16..=4096, got base {:#x} size {:#x}",
                r.base, r.size
            )));
        }
        if self.fuel == 0 {
            return Err(TestgenError::InvalidConfig("fuel must be positive".into()));
        }
        if self.surfacing_bias > 100 {
            return Err(TestgenError::InvalidConfig("surfacing_bias is a percentage".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: u64,
    pub target_atom: String,
    pub program_a: Program,
    pub program_b: Program,
    pub init_regs: [u32; 32],
    pub seed: u64,
}

/// Maps `raw` into `region`, keeping its low two bits. The region size must
/// be a power of two.
pub fn sandbox_address(raw: u32, region: Region) -> u32 {
    debug_assert!(region.size.is_power_of_two());
    region.base.wrapping_add(raw & (region.size - 1))
}

/// Mixes a suite seed with a case index (SplitMix64 finalizer).
pub fn case_seed(seed: u64, index: u64) -> u64 {
    let mix = |mut z: u64| {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    mix(seed.wrapping_add(mix(index.wrapping_add(0x9e37_79b9_7f4a_7c15))))
}

pub(crate) fn random_value(rng: &mut ChaCha8Rng, policy: ProloguePolicy) -> u32 {
    if policy == ProloguePolicy::Uniform {
        return rng.gen();
    }
    if rng.gen_ratio(1, 8) {
        const CORNERS: [u32; 6] = [0, 1, u32::MAX, 0x8000_0000, 0x7fff_ffff, 2];
        return CORNERS[rng.gen_range(0..CORNERS.len())];
    }
    let bits = rng.gen_range(0..=32u32);
    match bits {
        0 => 0,
        32 => rng.gen::<u32>() | 0x8000_0000,
        n => (rng.gen::<u32>() & ((1 << (n - 1)) - 1)) | (1 << (n - 1)),
    }
}

/// Materializes a 32-bit constant: `LUI reg, hi` then `ADDI reg, reg, lo`.
pub fn load_immediate(reg: u8, value: u32) -> [DecodedInst; 2] {
    let lo = ((value << 20) as i32) >> 20;
    let hi = value.wrapping_sub(lo as u32);
    [
        DecodedInst::u(Mnemonic::Lui, reg, hi as i32).expect("upper immediate"),
        DecodedInst::i(Mnemonic::Addi, reg, reg, lo).expect("low immediate"),
    ]
}

/// Whether the divergence strategy for `atom` keeps instruction structure
/// identical and only changes data.
pub fn data_only_strategy(atom: &ContractAtom) -> bool {
    use crate::template::LeakageSource as S;
    let m = atom.inst_type;
    match atom.source {
        S::RegRs1 | S::RegRs2 => true,
        S::RegRd => !(m.is_jump() || m == Mnemonic::Lui || m == Mnemonic::Auipc),
        S::MemRAddr | S::MemWAddr | S::MemRData | S::MemWData => true,
        S::IsWordAligned | S::IsHalfAligned | S::BranchTaken => true,
        _ => false,
    }
}

pub const PROLOGUE_LEN: usize = 62;

/// Generates one test case targeting `target`.
pub fn gen_testcase(seed: u64, target: &ContractAtom, cfg: &GenConfig) -> Result<TestCase, TestgenError> {
    cfg.validate()?;
    if !cfg.families.contains(&target.family()) || (cfg.data_only && !data_only_strategy(target)) {
        return Err(TestgenError::UngeneratableAtom(target.id()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = cfg.layout();

    let mut regs = [0u32; 32];
    for r in regs.iter_mut().skip(1) {
        *r = random_value(&mut rng, cfg.prologue);
    }
    let mut prologue = Vec::with_capacity(PROLOGUE_LEN);
    for (r, &v) in regs.iter().enumerate().skip(1) {
        prologue.extend(load_immediate(r as u8, v));
    }

    let middle_base = layout.code.base + 4 * PROLOGUE_LEN as u32;
    let ctx = middle::Context { regs, region: cfg.data_region, base: middle_base, policy: cfg.prologue };
    let built = middle::build(&mut rng, target, &ctx)?;
    let (mut a, mut b) = (built.a, built.b);
    if cfg.pad_equal_length {
        let len = a.len().max(b.len());
        a.resize(len, DecodedInst::nop());
        b.resize(len, DecodedInst::nop());
    }

    let suffix = suffix::build(
        &mut rng,
        cfg.suffix_length as usize,
        &built.focus,
        cfg.data_region,
        cfg.data_only,
        cfg.surfacing_bias,
    );
    let assemble = |middle: &[DecodedInst]| {
        let mut words: Vec<u32> = prologue.iter().map(|i| i.raw).collect();
        words.extend(middle.iter().map(|i| i.raw));
        words.extend(suffix.iter().map(|i| i.raw));
        words.push(HALT_WORD);
        Program::new(layout.code.base, words)
    };
    Ok(TestCase {
        id: 0,
        target_atom: target.id(),
        program_a: assemble(&a),
        program_b: assemble(&b),
        init_regs: [0; 32],
        seed,
    })
}

/// A generated suite with the atoms for which generation was impossible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedSuite {
    pub cases: Vec<TestCase>,
    pub ungeneratable: BTreeSet<String>,
}

/// Generates `count` test cases, cycling through the template's atoms.
/// Atoms without a strategy are skipped and reported.
pub fn gen_suite(
    seed: u64,
    template: &Template,
    count: usize,
    cfg: &GenConfig,
) -> Result<GeneratedSuite, TestgenError> {
    cfg.validate()?;
    let mut ungeneratable = BTreeSet::new();
    let targets: Vec<ContractAtom> = template
        .atoms()
        .iter()
        .filter(|a| {
            let ok = cfg.families.contains(&a.family()) && (!cfg.data_only || data_only_strategy(a));
            if !ok {
                ungeneratable.insert(a.id());
            }
            ok
        })
        .copied()
        .collect();
    if targets.is_empty() {
        return Err(TestgenError::InvalidConfig("no generatable atoms".into()));
    }
    let mut cases = Vec::with_capacity(count);
    let mut attempt = 0u64;
    while cases.len() < count {
        let target = &targets[attempt as usize % targets.len()];
        let sub_seed = case_seed(seed, attempt);
        attempt += 1;
        match gen_testcase(sub_seed, target, cfg) {
            Ok(mut case) => {
                case.id = cases.len() as u64;
                cases.push(case);
            }
            Err(TestgenError::UngeneratableAtom(id)) => {
                ungeneratable.insert(id);
                if ungeneratable.len() >= template.len() {
                    return Err(TestgenError::InvalidConfig("no generatable atoms".into()));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(GeneratedSuite { cases, ungeneratable })
}
