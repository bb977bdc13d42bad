//! Contract tables, precision/sensitivity curves and plain-text reports.

use std::fmt;

use thiserror::Error;

use crate::eval::{project, score, EvalResult, Metrics};
use crate::isa::Mnemonic;
use crate::synth::{build_problem, Solver, SynthError};
use crate::template::{Contract, Family, Template, TemplateConfig, TemplateError};
use crate::trace_io::{digest, ContractFile, ResultsFile, TraceIoError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{what} digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { what: &'static str, expected: String, found: String },
    #[error("inconsistent inputs: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Io(#[from] TraceIoError),
}

/// Instruction rows of the contract table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum InstCategory {
    Arithmetic,
    DivRem,
    Mul,
    Loads,
    Stores,
    Branches,
    Jumps,
}

impl InstCategory {
    pub const ALL: [InstCategory; 7] = [
        InstCategory::Arithmetic,
        InstCategory::DivRem,
        InstCategory::Mul,
        InstCategory::Loads,
        InstCategory::Stores,
        InstCategory::Branches,
        InstCategory::Jumps,
    ];

    pub fn of(m: Mnemonic) -> Self {
        if m.is_div() {
            InstCategory::DivRem
        } else if m.is_mul() {
            InstCategory::Mul
        } else if m.is_load() {
            InstCategory::Loads
        } else if m.is_store() {
            InstCategory::Stores
        } else if m.is_branch() {
            InstCategory::Branches
        } else if m.is_jump() {
            InstCategory::Jumps
        } else {
            InstCategory::Arithmetic
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InstCategory::Arithmetic => "arithmetic",
            InstCategory::DivRem => "div-rem",
            InstCategory::Mul => "mul",
            InstCategory::Loads => "loads",
            InstCategory::Stores => "stores",
            InstCategory::Branches => "branches",
            InstCategory::Jumps => "jumps",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    /// Every instruction of the category has a selected atom.
    All,
    Some,
    None,
    NotApplicable,
}

impl Glyph {
    pub fn symbol(self) -> char {
        match self {
            Glyph::All => '●',
            Glyph::Some => '◐',
            Glyph::None => '○',
            Glyph::NotApplicable => '−',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractTable {
    pub rows: Vec<(InstCategory, [Glyph; 6])>,
}

impl ContractTable {
    pub fn glyph(&self, category: InstCategory, family: Family) -> Glyph {
        let column = Family::ALL.iter().position(|&f| f == family).expect("known family");
        self.rows.iter().find(|(c, _)| *c == category).map_or(Glyph::NotApplicable, |(_, g)| g[column])
    }
}

impl fmt::Display for ContractTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<12}", "")?;
        for family in Family::ALL {
            write!(f, " {:>2}", family.name())?;
        }
        writeln!(f)?;
        for (category, glyphs) in &self.rows {
            write!(f, "{:<12}", category.name())?;
            for g in glyphs {
                write!(f, "  {}", g.symbol())?;
            }
            writeln!(f)?;
        }
        write!(f, "● all instructions leak  ◐ some  ○ none  − not applicable")
    }
}

/// Summarizes `contract` per instruction category and leakage family.
pub fn contract_table(template: &Template, contract: &Contract) -> ContractTable {
    let rows = InstCategory::ALL
        .iter()
        .map(|&category| {
            let members: Vec<Mnemonic> =
                Mnemonic::ALL.iter().copied().filter(|&m| InstCategory::of(m) == category).collect();
            let glyphs = Family::ALL.map(|family| {
                let mut applicable = 0;
                let mut leaking = 0;
                for &m in &members {
                    let atoms: Vec<_> = template
                        .atoms_for(m)
                        .iter()
                        .filter(|&&a| template.atom(a).family() == family)
                        .collect();
                    if !atoms.is_empty() {
                        applicable += 1;
                        leaking += atoms.iter().any(|a| contract.selected.contains(a)) as usize;
                    }
                }
                match (applicable, leaking) {
                    (0, _) => Glyph::NotApplicable,
                    (_, 0) => Glyph::None,
                    (a, l) if a == l => Glyph::All,
                    _ => Glyph::Some,
                }
            });
            (category, glyphs)
        })
        .collect();
    ContractTable { rows }
}

/// Up to `points` logarithmically spaced prefix sizes ending at `total`.
pub fn prefix_sizes(total: usize, points: usize) -> Vec<usize> {
    if total == 0 || points == 0 {
        return Vec::new();
    }
    let low = total.min(10) as f64;
    let high = total as f64;
    let mut sizes: Vec<usize> = (0..points)
        .map(|i| {
            if points == 1 {
                return total;
            }
            let t = i as f64 / (points - 1) as f64;
            (low.ln() + t * (high.ln() - low.ln())).exp().round() as usize
        })
        .collect();
    sizes.push(total);
    sizes.sort();
    sizes.dedup();
    sizes
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub train_size: usize,
    pub precision: Option<f64>,
    pub sensitivity: Option<f64>,
}

/// Synthesizes on training prefixes and scores each contract on `held_out`.
pub fn precision_curve(
    template: &Template,
    train: &[EvalResult],
    held_out: &[EvalResult],
    sizes: &[usize],
    solver: Solver,
) -> Result<Vec<CurvePoint>, ReportError> {
    sizes
        .iter()
        .map(|&n| {
            let problem = build_problem(&train[..n.min(train.len())], template.len());
            let metrics = score(&solver.solve(&problem)?.contract(), held_out);
            Ok(CurvePoint {
                train_size: n,
                precision: metrics.precision(),
                sensitivity: metrics.sensitivity(),
            })
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    let mut out = String::from("train_size,precision,sensitivity\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.train_size, cell(p.precision), cell(p.sensitivity)));
    }
    out
}

/// Held-out precision of a contract synthesized over a reduced template.
pub struct TemplateComparison {
    pub families: Vec<Family>,
    pub contract_atoms: usize,
    pub infeasible: usize,
    pub held_out: Metrics,
}

/// Re-synthesizes on `train` restricted to `families` and scores on
/// `held_out`.
pub fn compare_template(
    template: &Template,
    families: &[Family],
    train: &[EvalResult],
    held_out: &[EvalResult],
    solver: Solver,
) -> Result<TemplateComparison, ReportError> {
    let reduced = Template::build(&TemplateConfig {
        max_distance: template.max_distance(),
        families: families.iter().copied().collect(),
    })?;
    let problem = build_problem(&project(train, template, &reduced), reduced.len());
    let result = solver.solve(&problem)?;
    Ok(TemplateComparison {
        families: families.to_vec(),
        contract_atoms: result.selected.len(),
        infeasible: problem.infeasible.len(),
        held_out: score(&result.contract(), &project(held_out, template, &reduced)),
    })
}

pub struct ReportOptions {
    pub solver: Solver,
    pub curve_points: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { solver: Solver::default(), curve_points: 10 }
    }
}

pub struct Report {
    pub table: ContractTable,
    pub text: String,
    /// Absent without held-out results.
    pub curve: Option<Vec<CurvePoint>>,
}

fn percent(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{:.2}%", 100.0 * x))
}

fn metrics_line(label: &str, m: &Metrics) -> String {
    format!(
        "{label:<28} tp {:>6}  fp {:>6}  fn {:>6}  tn {:>6}  precision {:>8}  sensitivity {:>8}\n",
        m.true_pos,
        m.false_pos,
        m.false_neg,
        m.true_neg,
        percent(m.precision()),
        percent(m.sensitivity())
    )
}

/// Builds the full report. `train` must be the results the contract was
/// synthesized from; `held_out`, if given, must come from the same
/// microarchitecture and template.
pub fn build_report(
    contract: &ContractFile,
    train: &ResultsFile,
    held_out: Option<&ResultsFile>,
    options: &ReportOptions,
) -> Result<Report, ReportError> {
    let train_digest = digest(train)?;
    if contract.results_digest != train_digest {
        return Err(ReportError::DigestMismatch {
            what: "training results",
            expected: contract.results_digest.clone(),
            found: train_digest,
        });
    }
    if contract.template != train.template {
        return Err(ReportError::Inconsistent("contract and results use different templates".into()));
    }
    if let Some(h) = held_out {
        if h.template != train.template || h.uarch != train.uarch {
            return Err(ReportError::Inconsistent(
                "held-out results use a different template or microarchitecture".into(),
            ));
        }
    }
    let template = Template::build(&train.template)?;
    let selected = contract.synthesis.contract();
    let table = contract_table(&template, &selected);
    let s = &contract.synthesis;

    let mut text = String::new();
    text.push_str(&format!(
        "Contract for {}: {} of {} atoms ({} solver, {})\n\n",
        train.uarch.preset_name,
        s.selected.len(),
        template.len(),
        s.solver.name(),
        if s.optimal { "optimal" } else { "node budget exhausted, best found" }
    ));
    text.push_str(&format!("{table}\n\n"));
    text.push_str(&format!(
        "Training: {} distinguishable, {} indistinguishable, {} unexplained, {} truncated\n",
        contract.dist_count,
        contract.indist_count,
        contract.infeasible.len(),
        contract.truncated.len()
    ));
    text.push_str(&metrics_line("  synthesized contract", &score(&selected, &train.results)));
    text.push_str(&metrics_line("  full template", &score(&Contract::full(&template), &train.results)));

    let curve = match held_out {
        None => {
            text.push_str("\nHeld-out: no held-out suite; held-out metrics and the curve are omitted.\n");
            None
        }
        Some(h) => {
            text.push_str(&format!("\nHeld-out: {} cases\n", h.results.len()));
            text.push_str(&metrics_line("  synthesized contract", &score(&selected, &h.results)));
            text.push_str(&metrics_line("  full template", &score(&Contract::full(&template), &h.results)));
            if template.config().families.contains(&Family::DL) {
                let families: Vec<Family> =
                    template.config().families.iter().copied().filter(|&f| f != Family::DL).collect();
                let cmp = compare_template(&template, &families, &train.results, &h.results, options.solver)?;
                text.push_str(&metrics_line("  contract without DL atoms", &cmp.held_out));
            }
            let sizes = prefix_sizes(train.results.len(), options.curve_points);
            Some(precision_curve(&template, &train.results, &h.results, &sizes, options.solver)?)
        }
    };

    text.push_str("\nAtom ranking (false positives caused on training data):\n");
    for r in &s.atom_ranking {
        text.push_str(&format!("  {:<24} {}\n", template.id(r.atom), r.fp_tests.len()));
    }
    if !contract.infeasible.is_empty() {
        text.push_str(&format!(
            "\nTemplate gap: {} distinguishable cases have no distinguishing atom: {:?}\n",
            contract.infeasible.len(),
            contract.infeasible
        ));
    }
    Ok(Report { table, text, curve })
}
