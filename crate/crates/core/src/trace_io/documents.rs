//! Suite, results and contract documents.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::eval::EvalResult;
use crate::isa::{Program, Region};
use crate::synth::{RankedAtom, SolverKind, SynthesisResult};
use crate::template::{AtomIdx, Family, Template, TemplateConfig};
use crate::testgen::{GenConfig, ProloguePolicy, TestCase};
use crate::uarch::{CacheConfig, DivLatency, Forwarding, InstClass, UarchConfig};

use super::{Document, Hex, TraceIoError};

/// A generated test suite with everything needed to regenerate it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteFile {
    pub seed: u64,
    pub template: TemplateConfig,
    pub gen_config: GenConfig,
    pub cases: Vec<TestCase>,
    /// Template atoms no case could target.
    pub ungeneratable: BTreeSet<String>,
}

/// Evaluation verdicts for a suite on one microarchitecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultsFile {
    pub suite_digest: String,
    pub uarch: UarchConfig,
    pub template: TemplateConfig,
    pub max_cycles: u64,
    pub results: Vec<EvalResult>,
}

/// A synthesized contract with its provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractFile {
    pub results_digest: String,
    pub template: TemplateConfig,
    pub synthesis: SynthesisResult,
    pub dist_count: u64,
    pub indist_count: u64,
    pub infeasible: Vec<u64>,
    pub truncated: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateWire {
    families: Vec<Family>,
    max_distance: Hex,
}

impl TemplateWire {
    fn new(config: &TemplateConfig) -> Self {
        TemplateWire {
            families: config.families.iter().copied().collect(),
            max_distance: config.max_distance.into(),
        }
    }

    fn config(self) -> Result<TemplateConfig, TraceIoError> {
        Ok(TemplateConfig {
            max_distance: self.max_distance.narrow("max_distance")?,
            families: self.families.into_iter().collect(),
        })
    }
}

fn build_template(config: &TemplateConfig) -> Result<Template, TraceIoError> {
    Template::build(config).map_err(TraceIoError::schema)
}

fn atom_ids(template: &Template, atoms: impl IntoIterator<Item = AtomIdx>) -> Vec<String> {
    atoms.into_iter().map(|a| template.id(a)).collect()
}

fn atom_indices(template: &Template, ids: &[String]) -> Result<Vec<AtomIdx>, TraceIoError> {
    ids.iter()
        .map(|id| {
            template
                .lookup(id)
                .ok_or_else(|| TraceIoError::schema(format!("atom {id} is not in the template")))
        })
        .collect()
}

fn hexes(values: &[u64]) -> Vec<Hex> {
    values.iter().map(|&v| Hex(v)).collect()
}

fn unhex(values: Vec<Hex>) -> Vec<u64> {
    values.into_iter().map(|h| h.0).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionWire {
    base: Hex,
    size: Hex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfigWire {
    data_only: bool,
    data_region: RegionWire,
    families: Vec<Family>,
    fuel: Hex,
    pad_equal_length: bool,
    prologue: ProloguePolicy,
    suffix_length: Hex,
    surfacing_bias: Hex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramWire {
    base: Hex,
    words: Vec<Hex>,
}

impl ProgramWire {
    fn new(p: &Program) -> Self {
        ProgramWire { base: p.base.into(), words: p.words.iter().map(|&w| w.into()).collect() }
    }

    fn program(self) -> Result<Program, TraceIoError> {
        Ok(Program {
            base: self.base.narrow("program base")?,
            words: self.words.into_iter().map(|w| w.narrow("instruction word")).collect::<Result<_, _>>()?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseWire {
    id: Hex,
    init_regs: Vec<Hex>,
    program_a: ProgramWire,
    program_b: ProgramWire,
    seed: Hex,
    target_atom: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteWire {
    cases: Vec<CaseWire>,
    gen_config: GenConfigWire,
    seed: Hex,
    template: TemplateWire,
    ungeneratable: Vec<String>,
}

impl Document for SuiteFile {
    const FORMAT: &'static str = "ctrsynth-suite";
    type Wire = SuiteWire;

    fn to_wire(&self) -> Result<SuiteWire, TraceIoError> {
        let g = &self.gen_config;
        Ok(SuiteWire {
            cases: self
                .cases
                .iter()
                .map(|tc| CaseWire {
                    id: tc.id.into(),
                    init_regs: tc.init_regs.iter().map(|&r| r.into()).collect(),
                    program_a: ProgramWire::new(&tc.program_a),
                    program_b: ProgramWire::new(&tc.program_b),
                    seed: tc.seed.into(),
                    target_atom: tc.target_atom.clone(),
                })
                .collect(),
            gen_config: GenConfigWire {
                data_only: g.data_only,
                data_region: RegionWire { base: g.data_region.base.into(), size: g.data_region.size.into() },
                families: g.families.iter().copied().collect(),
                fuel: g.fuel.into(),
                pad_equal_length: g.pad_equal_length,
                prologue: g.prologue,
                suffix_length: g.suffix_length.into(),
                surfacing_bias: g.surfacing_bias.into(),
            },
            seed: self.seed.into(),
            template: TemplateWire::new(&self.template),
            ungeneratable: self.ungeneratable.iter().cloned().collect(),
        })
    }

    fn from_wire(w: SuiteWire) -> Result<Self, TraceIoError> {
        let g = w.gen_config;
        let gen_config = GenConfig {
            prologue: g.prologue,
            families: g.families.into_iter().collect(),
            suffix_length: g.suffix_length.narrow("suffix_length")?,
            fuel: g.fuel.0,
            data_region: Region::new(
                g.data_region.base.narrow("data base")?,
                g.data_region.size.narrow("data size")?,
            ),
            data_only: g.data_only,
            pad_equal_length: g.pad_equal_length,
            surfacing_bias: g.surfacing_bias.narrow("surfacing_bias")?,
        };
        let cases = w
            .cases
            .into_iter()
            .map(|c| {
                let regs: Vec<u32> =
                    c.init_regs.into_iter().map(|r| r.narrow("register value")).collect::<Result<_, _>>()?;
                Ok(TestCase {
                    id: c.id.0,
                    target_atom: c.target_atom,
                    program_a: c.program_a.program()?,
                    program_b: c.program_b.program()?,
                    init_regs: regs
                        .try_into()
                        .map_err(|_| TraceIoError::schema("init_regs must hold 32 values"))?,
                    seed: c.seed.0,
                })
            })
            .collect::<Result<_, TraceIoError>>()?;
        Ok(SuiteFile {
            seed: w.seed.0,
            template: w.template.config()?,
            gen_config,
            cases,
            ungeneratable: w.ungeneratable.into_iter().collect(),
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheWire {
    hit_cycles: Hex,
    line_size: Hex,
    lines: Hex,
    miss_cycles: Hex,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivLatencyWire {
    cycles: Option<Hex>,
    kind: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UarchWire {
    alignment_splitting: bool,
    branch_taken_penalty: Hex,
    data_cache: Option<CacheWire>,
    div_latency: DivLatencyWire,
    forwarding: Forwarding,
    mem_latency: Hex,
    mul_latency: Hex,
    pipeline_depth: Hex,
    preset_name: String,
    unforwarded: Vec<InstClass>,
}

impl UarchWire {
    fn new(c: &UarchConfig) -> Self {
        UarchWire {
            alignment_splitting: c.alignment_splitting,
            branch_taken_penalty: c.branch_taken_penalty.into(),
            data_cache: c.data_cache.map(|d| CacheWire {
                hit_cycles: d.hit_cycles.into(),
                line_size: d.line_size.into(),
                lines: d.lines.into(),
                miss_cycles: d.miss_cycles.into(),
            }),
            div_latency: match c.div_latency {
                DivLatency::Fixed { cycles } => {
                    DivLatencyWire { cycles: Some(cycles.into()), kind: "fixed".into() }
                }
                DivLatency::DataDependent => DivLatencyWire { cycles: None, kind: "data-dependent".into() },
            },
            forwarding: c.forwarding,
            mem_latency: c.mem_latency.into(),
            mul_latency: c.mul_latency.into(),
            pipeline_depth: c.pipeline_depth.into(),
            preset_name: c.preset_name.clone(),
            unforwarded: c.unforwarded.clone(),
        }
    }

    fn config(self) -> Result<UarchConfig, TraceIoError> {
        let div_latency = match (self.div_latency.kind.as_str(), self.div_latency.cycles) {
            ("fixed", Some(c)) => DivLatency::Fixed { cycles: c.narrow("div cycles")? },
            ("data-dependent", None) => DivLatency::DataDependent,
            (kind, _) => return Err(TraceIoError::schema(format!("bad div_latency {kind:?}"))),
        };
        let data_cache = match self.data_cache {
            None => None,
            Some(d) => Some(CacheConfig {
                lines: d.lines.narrow("cache lines")?,
                line_size: d.line_size.narrow("cache line_size")?,
                hit_cycles: d.hit_cycles.narrow("cache hit_cycles")?,
                miss_cycles: d.miss_cycles.narrow("cache miss_cycles")?,
            }),
        };
        let config = UarchConfig {
            preset_name: self.preset_name,
            pipeline_depth: self.pipeline_depth.narrow("pipeline_depth")?,
            div_latency,
            mul_latency: self.mul_latency.narrow("mul_latency")?,
            mem_latency: self.mem_latency.narrow("mem_latency")?,
            alignment_splitting: self.alignment_splitting,
            data_cache,
            branch_taken_penalty: self.branch_taken_penalty.narrow("branch_taken_penalty")?,
            forwarding: self.forwarding,
            unforwarded: self.unforwarded,
        };
        config.validate().map_err(TraceIoError::schema)?;
        Ok(config)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultWire {
    attacker_distinguishable: bool,
    distinguishing_atoms: Vec<String>,
    testcase_id: Hex,
    truncated: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultsWire {
    max_cycles: Hex,
    results: Vec<ResultWire>,
    suite_digest: String,
    template: TemplateWire,
    uarch: UarchWire,
}

impl Document for ResultsFile {
    const FORMAT: &'static str = "ctrsynth-results";
    type Wire = ResultsWire;

    fn to_wire(&self) -> Result<ResultsWire, TraceIoError> {
        let template = build_template(&self.template)?;
        Ok(ResultsWire {
            max_cycles: self.max_cycles.into(),
            results: self
                .results
                .iter()
                .map(|r| ResultWire {
                    attacker_distinguishable: r.attacker_distinguishable,
                    distinguishing_atoms: atom_ids(&template, r.distinguishing_atoms.iter().copied()),
                    testcase_id: r.testcase_id.into(),
                    truncated: r.truncated,
                })
                .collect(),
            suite_digest: self.suite_digest.clone(),
            template: TemplateWire::new(&self.template),
            uarch: UarchWire::new(&self.uarch),
        })
    }

    fn from_wire(w: ResultsWire) -> Result<Self, TraceIoError> {
        let config = w.template.config()?;
        let template = build_template(&config)?;
        let results = w
            .results
            .into_iter()
            .map(|r| {
                let mut atoms = atom_indices(&template, &r.distinguishing_atoms)?;
                atoms.sort();
                Ok(EvalResult {
                    testcase_id: r.testcase_id.0,
                    attacker_distinguishable: r.attacker_distinguishable,
                    distinguishing_atoms: atoms,
                    truncated: r.truncated,
                })
            })
            .collect::<Result<_, TraceIoError>>()?;
        Ok(ResultsFile {
            suite_digest: w.suite_digest,
            uarch: w.uarch.config()?,
            template: config,
            max_cycles: w.max_cycles.0,
            results,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverWire {
    kind: String,
    node_budget: Option<Hex>,
    nodes: Hex,
    optimal: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankedAtomWire {
    atom: String,
    fp_count: Hex,
    fp_tests: Vec<Hex>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractWire {
    atom_ranking: Vec<RankedAtomWire>,
    catalog: Vec<String>,
    dist_count: Hex,
    false_positive_tests: Vec<Hex>,
    fp_count: Hex,
    indist_count: Hex,
    infeasible: Vec<Hex>,
    results_digest: String,
    selected: Vec<String>,
    solver: SolverWire,
    template: TemplateWire,
    truncated: Vec<Hex>,
}

impl Document for ContractFile {
    const FORMAT: &'static str = "ctrsynth-contract";
    type Wire = ContractWire;

    fn to_wire(&self) -> Result<ContractWire, TraceIoError> {
        let template = build_template(&self.template)?;
        let s = &self.synthesis;
        Ok(ContractWire {
            atom_ranking: s
                .atom_ranking
                .iter()
                .map(|r| RankedAtomWire {
                    atom: template.id(r.atom),
                    fp_count: Hex(r.fp_tests.len() as u64),
                    fp_tests: hexes(&r.fp_tests),
                })
                .collect(),
            catalog: atom_ids(&template, template.indices()),
            dist_count: self.dist_count.into(),
            false_positive_tests: hexes(&s.false_positive_tests),
            fp_count: s.fp_count.into(),
            indist_count: self.indist_count.into(),
            infeasible: hexes(&self.infeasible),
            results_digest: self.results_digest.clone(),
            selected: atom_ids(&template, s.selected.iter().copied()),
            solver: SolverWire {
                kind: s.solver.name().into(),
                node_budget: s.node_budget.map(Hex),
                nodes: s.nodes.into(),
                optimal: s.optimal,
            },
            template: TemplateWire::new(&self.template),
            truncated: hexes(&self.truncated),
        })
    }

    fn from_wire(w: ContractWire) -> Result<Self, TraceIoError> {
        let config = w.template.config()?;
        let template = build_template(&config)?;
        if w.catalog != atom_ids(&template, template.indices()) {
            return Err(TraceIoError::schema("catalog does not match the template configuration"));
        }
        let solver = match w.solver.kind.as_str() {
            "exact" => SolverKind::Exact,
            "greedy" => SolverKind::Greedy,
            "brute-force" => SolverKind::BruteForce,
            other => return Err(TraceIoError::schema(format!("unknown solver {other:?}"))),
        };
        let atom_ranking = w
            .atom_ranking
            .into_iter()
            .map(|r| {
                let atom = atom_indices(&template, std::slice::from_ref(&r.atom))?[0];
                if r.fp_count.0 != r.fp_tests.len() as u64 {
                    return Err(TraceIoError::schema(format!(
                        "fp_count of {} disagrees with fp_tests",
                        r.atom
                    )));
                }
                Ok(RankedAtom { atom, fp_tests: unhex(r.fp_tests) })
            })
            .collect::<Result<_, TraceIoError>>()?;
        let false_positive_tests = unhex(w.false_positive_tests);
        if w.fp_count.0 != false_positive_tests.len() as u64 {
            return Err(TraceIoError::schema("fp_count disagrees with false_positive_tests"));
        }
        Ok(ContractFile {
            results_digest: w.results_digest,
            template: config,
            synthesis: SynthesisResult {
                selected: atom_indices(&template, &w.selected)?.into_iter().collect(),
                false_positive_tests,
                fp_count: w.fp_count.0,
                optimal: w.solver.optimal,
                atom_ranking,
                solver,
                node_budget: w.solver.node_budget.map(|h| h.0),
                nodes: w.solver.nodes.0,
            },
            dist_count: w.dist_count.0,
            indist_count: w.indist_count.0,
            infeasible: unhex(w.infeasible),
            truncated: unhex(w.truncated),
        })
    }
}
