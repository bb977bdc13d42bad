//! Contract atoms and the RV32IM contract template.
//!
//! An atom pairs one instruction type (a mnemonic) with one leakage source.
//! It applies to a retired instruction of that type and observes the
//! source's value. A template is the universe of candidate atoms; a contract
//! is any subset of it.
//!
//! Atoms are grouped into six families:
//!
//! | family | sources |
//! |--------|---------|
//! | IL | `OP`, `RD`, `RS1`, `RS2`, `IMM` (instruction encoding fields) |
//! | RL | `REG_RS1`, `REG_RS2` (operand values), `REG_RD` (result value) |
//! | ML | `MEM_R_ADDR`, `MEM_W_ADDR`, `MEM_R_DATA`, `MEM_W_DATA` |
//! | AL | `IS_WORD_ALIGNED`, `IS_HALF_ALIGNED` |
//! | BL | `BRANCH_TAKEN` (conditional branches), `NEW_PC` (branches and jumps) |
//! | DL | `RAW_RS1_n`, `RAW_RS2_n`, `RAW_RD_n`, `WAW_n` for `1 <= n <= n_max` |
//!
//! With one instruction type per mnemonic (45 types) and `n_max = 4` the
//! full template holds 892 atoms.

mod observe;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::Mnemonic;

pub use observe::{
    applicable, atom_trace, contract_observations, distinguishing_atoms, observe, Obs, ObservationTrace,
};

/// Largest supported dependency distance.
pub const MAX_DISTANCE: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("dependency distance bound {0} outside 1..={MAX_DISTANCE}")]
    BadDistance(u8),
    #[error("unknown leakage source {0:?}")]
    UnknownSource(String),
    #[error("unknown leakage family {0:?}")]
    UnknownFamily(String),
    #[error("malformed atom id {0:?}")]
    MalformedId(String),
    #[error("atom {0} is not part of the template")]
    UnknownAtom(String),
    #[error("atom {atom} is not applicable to {event}")]
    NotApplicable { atom: String, event: String },
}

/// Leakage families, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    IL,
    RL,
    ML,
    AL,
    BL,
    DL,
}

impl Family {
    pub const ALL: [Family; 6] = [Family::IL, Family::RL, Family::ML, Family::AL, Family::BL, Family::DL];

    pub fn name(self) -> &'static str {
        match self {
            Family::IL => "IL",
            Family::RL => "RL",
            Family::ML => "ML",
            Family::AL => "AL",
            Family::BL => "BL",
            Family::DL => "DL",
        }
    }
}

impl FromStr for Family {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TemplateError::UnknownFamily(s.to_string()))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a comma-separated family list such as `IL,RL,ML`.
pub fn parse_families(list: &str) -> Result<BTreeSet<Family>, TemplateError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LeakageSource {
    Op,
    Rd,
    Rs1,
    Rs2,
    Imm,
    RegRs1,
    RegRs2,
    RegRd,
    MemRAddr,
    MemWAddr,
    MemRData,
    MemWData,
    IsWordAligned,
    IsHalfAligned,
    BranchTaken,
    NewPc,
    /// The n-th previous retired instruction wrote this instruction's `rs1`.
    RawRs1(u8),
    /// The n-th previous retired instruction wrote this instruction's `rs2`.
    RawRs2(u8),
    /// The n-th previous retired instruction read (through `rs1` or `rs2`)
    /// the register this instruction writes.
    RawRd(u8),
    /// The n-th previous retired instruction wrote this instruction's `rd`.
    Waw(u8),
}

use LeakageSource as S;

const FIXED_SOURCES: [(LeakageSource, &str); 16] = [
    (S::Op, "OP"),
    (S::Rd, "RD"),
    (S::Rs1, "RS1"),
    (S::Rs2, "RS2"),
    (S::Imm, "IMM"),
    (S::RegRs1, "REG_RS1"),
    (S::RegRs2, "REG_RS2"),
    (S::RegRd, "REG_RD"),
    (S::MemRAddr, "MEM_R_ADDR"),
    (S::MemWAddr, "MEM_W_ADDR"),
    (S::MemRData, "MEM_R_DATA"),
    (S::MemWData, "MEM_W_DATA"),
    (S::IsWordAligned, "IS_WORD_ALIGNED"),
    (S::IsHalfAligned, "IS_HALF_ALIGNED"),
    (S::BranchTaken, "BRANCH_TAKEN"),
    (S::NewPc, "NEW_PC"),
];

impl LeakageSource {
    pub fn family(self) -> Family {
        match self {
            S::Op | S::Rd | S::Rs1 | S::Rs2 | S::Imm => Family::IL,
            S::RegRs1 | S::RegRs2 | S::RegRd => Family::RL,
            S::MemRAddr | S::MemWAddr | S::MemRData | S::MemWData => Family::ML,
            S::IsWordAligned | S::IsHalfAligned => Family::AL,
            S::BranchTaken | S::NewPc => Family::BL,
            S::RawRs1(_) | S::RawRs2(_) | S::RawRd(_) | S::Waw(_) => Family::DL,
        }
    }

    /// Dependency distance of DL sources.
    pub fn distance(self) -> Option<u8> {
        match self {
            S::RawRs1(n) | S::RawRs2(n) | S::RawRd(n) | S::Waw(n) => Some(n),
            _ => None,
        }
    }

    /// Tag without the distance suffix, e.g. `RAW_RS1` for `RAW_RS1_3`.
    pub fn kind_name(self) -> &'static str {
        match self {
            S::RawRs1(_) => "RAW_RS1",
            S::RawRs2(_) => "RAW_RS2",
            S::RawRd(_) => "RAW_RD",
            S::Waw(_) => "WAW",
            fixed => FIXED_SOURCES.iter().find(|(s, _)| *s == fixed).expect("fixed source listed").1,
        }
    }

    /// Whether this source is defined for instructions of type `m`.
    pub fn applies_to(self, m: Mnemonic) -> bool {
        match self {
            S::Op => true,
            S::Rd | S::RegRd | S::RawRd(_) | S::Waw(_) => m.has_rd(),
            S::Rs1 | S::RegRs1 | S::RawRs1(_) => m.has_rs1(),
            S::Rs2 | S::RegRs2 | S::RawRs2(_) => m.has_rs2(),
            S::Imm => m.has_imm(),
            S::MemRAddr | S::MemRData => m.is_load(),
            S::MemWAddr | S::MemWData => m.is_store(),
            S::IsWordAligned | S::IsHalfAligned => m.is_mem(),
            S::BranchTaken => m.is_branch(),
            S::NewPc => m.is_control(),
        }
    }

    /// Every source of the catalog for distances `1..=n_max`, in catalog order.
    pub fn all(n_max: u8) -> Vec<LeakageSource> {
        let mut v: Vec<_> = FIXED_SOURCES.iter().map(|(s, _)| *s).collect();
        for n in 1..=n_max {
            v.extend([S::RawRs1(n), S::RawRs2(n), S::RawRd(n), S::Waw(n)]);
        }
        v
    }
}

impl fmt::Display for LeakageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.distance() {
            Some(n) => write!(f, "{}_{n}", self.kind_name()),
            None => f.write_str(self.kind_name()),
        }
    }
}

impl FromStr for LeakageSource {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((src, _)) = FIXED_SOURCES.iter().find(|(_, name)| *name == s) {
            return Ok(*src);
        }
        let unknown = || TemplateError::UnknownSource(s.to_string());
        let (kind, n) = s.rsplit_once('_').ok_or_else(unknown)?;
        let n: u8 = n.parse().map_err(|_| unknown())?;
        if n == 0 || n > MAX_DISTANCE {
            return Err(unknown());
        }
        match kind {
            "RAW_RS1" => Ok(S::RawRs1(n)),
            "RAW_RS2" => Ok(S::RawRs2(n)),
            "RAW_RD" => Ok(S::RawRd(n)),
            "WAW" => Ok(S::Waw(n)),
            _ => Err(unknown()),
        }
    }
}

/// One (instruction type, leakage source) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContractAtom {
    pub inst_type: Mnemonic,
    pub source: LeakageSource,
}

impl ContractAtom {
    pub fn new(inst_type: Mnemonic, source: LeakageSource) -> Self {
        ContractAtom { inst_type, source }
    }

    /// Stable identifier `<MNEMONIC>:<SOURCE>`.
    pub fn id(&self) -> String {
        format!("{}:{}", self.inst_type, self.source)
    }

    pub fn family(&self) -> Family {
        self.source.family()
    }
}

impl fmt::Display for ContractAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.inst_type, self.source)
    }
}

impl FromStr for ContractAtom {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (m, src) = s.split_once(':').ok_or_else(|| TemplateError::MalformedId(s.to_string()))?;
        let inst_type = m.parse().map_err(|_| TemplateError::MalformedId(s.to_string()))?;
        let atom = ContractAtom::new(inst_type, src.parse()?);
        if !atom.source.applies_to(inst_type) {
            return Err(TemplateError::MalformedId(s.to_string()));
        }
        Ok(atom)
    }
}

/// Position of an atom inside its [`Template`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AtomIdx(pub u16);

/// Which families and which distance bound a template covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub max_distance: u8,
    pub families: BTreeSet<Family>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig { max_distance: 4, families: Family::ALL.into_iter().collect() }
    }
}

impl TemplateConfig {
    pub fn family_list(&self) -> String {
        self.families.iter().map(|f| f.name()).collect::<Vec<_>>().join(",")
    }
}

/// A set of atoms, ordered by id so that index order is identifier order.
#[derive(Debug, Clone)]
pub struct Template {
    atoms: Vec<ContractAtom>,
    config: TemplateConfig,
    by_id: BTreeMap<String, AtomIdx>,
    by_mnemonic: BTreeMap<Mnemonic, Vec<AtomIdx>>,
}

impl PartialEq for Template {
    fn eq(&self, other: &Self) -> bool {
        self.atoms == other.atoms && self.config == other.config
    }
}

impl Eq for Template {}

/// Builds the full template with dependency distances up to `n_max`.
pub fn build_template(n_max: u8) -> Result<Template, TemplateError> {
    Template::build(&TemplateConfig { max_distance: n_max, ..TemplateConfig::default() })
}

impl Template {
    pub fn build(config: &TemplateConfig) -> Result<Template, TemplateError> {
        if config.max_distance == 0 || config.max_distance > MAX_DISTANCE {
            return Err(TemplateError::BadDistance(config.max_distance));
        }
        let mut atoms = Vec::new();
        for &m in Mnemonic::ALL {
            for source in LeakageSource::all(config.max_distance) {
                if source.applies_to(m) && config.families.contains(&source.family()) {
                    atoms.push(ContractAtom::new(m, source));
                }
            }
        }
        Ok(Template::from_atoms(atoms, config.clone()))
    }

    fn from_atoms(atoms: Vec<ContractAtom>, config: TemplateConfig) -> Template {
        let mut keyed: Vec<(String, ContractAtom)> = atoms.into_iter().map(|a| (a.id(), a)).collect();
        keyed.sort();
        keyed.dedup_by(|a, b| a.0 == b.0);
        let mut by_id = BTreeMap::new();
        let mut by_mnemonic: BTreeMap<Mnemonic, Vec<AtomIdx>> = BTreeMap::new();
        let mut atoms = Vec::with_capacity(keyed.len());
        for (i, (id, atom)) in keyed.into_iter().enumerate() {
            let idx = AtomIdx(i as u16);
            by_id.insert(id, idx);
            by_mnemonic.entry(atom.inst_type).or_default().push(idx);
            atoms.push(atom);
        }
        Template { atoms, config, by_id, by_mnemonic }
    }

    pub fn config(&self) -> &TemplateConfig {
        &self.config
    }

    pub fn max_distance(&self) -> u8 {
        self.config.max_distance
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[ContractAtom] {
        &self.atoms
    }

    pub fn atom(&self, idx: AtomIdx) -> ContractAtom {
        self.atoms[idx.0 as usize]
    }

    pub fn indices(&self) -> impl Iterator<Item = AtomIdx> {
        (0..self.atoms.len() as u16).map(AtomIdx)
    }

    pub fn lookup(&self, id: &str) -> Option<AtomIdx> {
        self.by_id.get(id).copied()
    }

    pub fn id(&self, idx: AtomIdx) -> String {
        self.atom(idx).id()
    }

    /// Atoms whose instruction type is `m`.
    pub fn atoms_for(&self, m: Mnemonic) -> &[AtomIdx] {
        self.by_mnemonic.get(&m).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Text catalog, one tab-separated line per atom: id, instruction type,
    /// source and distance (`-` for non-DL atoms).
    pub fn catalog(&self) -> String {
        let mut out = String::from("# id\tinst_type\tsource\tdistance\n");
        for atom in &self.atoms {
            let distance = atom.source.distance().map_or_else(|| "-".to_string(), |n| n.to_string());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                atom.id(),
                atom.inst_type,
                atom.source.kind_name(),
                distance
            ));
        }
        out
    }

    /// Applicability matrix: one row per mnemonic, one column per source
    /// kind, `x` where the source applies. The last column counts atoms.
    pub fn applicability_matrix(&self) -> String {
        let kinds: Vec<&'static str> = {
            let mut seen = Vec::new();
            for s in LeakageSource::all(1) {
                if self.config.families.contains(&s.family()) && !seen.contains(&s.kind_name()) {
                    seen.push(s.kind_name());
                }
            }
            seen
        };
        let mut out = format!("{:<8}", "type");
        for k in &kinds {
            out.push_str(&format!(" {k}"));
        }
        out.push_str(" atoms\n");
        for &m in Mnemonic::ALL {
            let present = self.atoms_for(m);
            out.push_str(&format!("{:<8}", m.name()));
            for k in &kinds {
                let hit = present.iter().any(|&i| self.atom(i).source.kind_name() == *k);
                let mark = if hit { "x" } else { "." };
                out.push_str(&format!(" {mark:^width$}", width = k.len()));
            }
            out.push_str(&format!(" {}\n", present.len()));
        }
        out.push_str(&format!("total atoms: {}\n", self.len()));
        out
    }
}

/// A candidate contract: a subset of a template's atoms.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Contract {
    pub selected: BTreeSet<AtomIdx>,
}

impl Contract {
    pub fn empty() -> Self {
        Contract::default()
    }

    pub fn full(template: &Template) -> Self {
        Contract { selected: template.indices().collect() }
    }

    /// Builds a contract from atom ids, checking each against `template`.
    pub fn from_ids<'a, I>(template: &Template, ids: I) -> Result<Self, TemplateError>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let selected = ids
            .into_iter()
            .map(|id| template.lookup(id).ok_or_else(|| TemplateError::UnknownAtom(id.to_string())))
            .collect::<Result<_, _>>()?;
        Ok(Contract { selected })
    }

    pub fn contains(&self, idx: AtomIdx) -> bool {
        self.selected.contains(&idx)
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn ids(&self, template: &Template) -> Vec<String> {
        self.selected.iter().map(|&i| template.id(i)).collect()
    }

    /// Operational distinguishability: some selected atom distinguishes.
    pub fn distinguishes(&self, distinguishing: &[AtomIdx]) -> bool {
        distinguishing.iter().any(|a| self.selected.contains(a))
    }
}
