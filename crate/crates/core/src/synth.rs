//! Contract synthesis: choose atoms covering every attacker-distinguishable
//! case while covering as few indistinguishable cases as possible.
//!
//! Three solvers share one internal instance form: an exact branch-and-bound,
//! a ratio greedy baseline and an exhaustive oracle for small instances.

use std::collections::{BTreeMap, BTreeSet};

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalResult;
use crate::template::{AtomIdx, Contract};

pub const DEFAULT_NODE_BUDGET: u64 = 10_000_000;

/// Largest candidate universe `brute_force` accepts.
pub const BRUTE_FORCE_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SynthError {
    #[error("distinguishable cases without any distinguishing atom: {0:?}")]
    Infeasible(Vec<u64>),
    #[error("{0} candidate atoms exceed the brute-force limit")]
    TooLarge(usize),
    #[error("invalid synthesis problem: {0}")]
    InvalidProblem(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProblemCase {
    pub id: u64,
    /// Distinguishing atoms, ascending.
    pub atoms: Vec<AtomIdx>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SynthesisProblem {
    /// Atoms are `AtomIdx(0)..AtomIdx(universe)`.
    pub universe: usize,
    pub dist: Vec<ProblemCase>,
    pub indist: Vec<ProblemCase>,
    /// Distinguishable cases no atom explains; excluded from `dist`.
    pub infeasible: Vec<u64>,
    /// Cases whose simulation was truncated; excluded entirely.
    pub truncated: Vec<u64>,
}

impl SynthesisProblem {
    pub fn new(
        universe: usize,
        dist: Vec<ProblemCase>,
        indist: Vec<ProblemCase>,
    ) -> Result<Self, SynthError> {
        let mut ids = BTreeSet::new();
        for case in dist.iter().chain(&indist) {
            if !ids.insert(case.id) {
                return Err(SynthError::InvalidProblem(format!("duplicate case id {}", case.id)));
            }
            if let Some(a) = case.atoms.iter().find(|a| a.0 as usize >= universe) {
                return Err(SynthError::InvalidProblem(format!(
                    "case {} references atom {} outside a universe of {universe}",
                    case.id, a.0
                )));
            }
        }
        let normalize = |mut c: ProblemCase| {
            c.atoms.sort();
            c.atoms.dedup();
            c
        };
        Ok(SynthesisProblem {
            universe,
            dist: dist.into_iter().map(normalize).collect(),
            indist: indist.into_iter().map(normalize).collect(),
            infeasible: Vec::new(),
            truncated: Vec::new(),
        })
    }

    /// Atoms occurring in some distinguishable case, ascending.
    pub fn candidates(&self) -> Vec<AtomIdx> {
        let set: BTreeSet<AtomIdx> = self.dist.iter().flat_map(|c| c.atoms.iter().copied()).collect();
        set.into_iter().collect()
    }

    fn check_feasible(&self) -> Result<(), SynthError> {
        let empty: Vec<u64> = self.dist.iter().filter(|c| c.atoms.is_empty()).map(|c| c.id).collect();
        if empty.is_empty() {
            Ok(())
        } else {
            Err(SynthError::Infeasible(empty))
        }
    }

    /// Indistinguishable cases covered by `selected`.
    pub fn false_positive_tests(&self, selected: &BTreeSet<AtomIdx>) -> Vec<u64> {
        self.indist.iter().filter(|c| c.atoms.iter().any(|a| selected.contains(a))).map(|c| c.id).collect()
    }

    pub fn covers_dist(&self, selected: &BTreeSet<AtomIdx>) -> bool {
        self.dist.iter().all(|c| c.atoms.iter().any(|a| selected.contains(a)))
    }
}

/// Partitions evaluation results into a synthesis problem.
pub fn build_problem(results: &[EvalResult], universe: usize) -> SynthesisProblem {
    let mut problem = SynthesisProblem { universe, ..SynthesisProblem::default() };
    for r in results {
        let case = ProblemCase { id: r.testcase_id, atoms: r.distinguishing_atoms.clone() };
        if r.truncated {
            problem.truncated.push(r.testcase_id);
        } else if !r.attacker_distinguishable {
            problem.indist.push(case);
        } else if case.atoms.is_empty() {
            problem.infeasible.push(r.testcase_id);
        } else {
            problem.dist.push(case);
        }
    }
    problem
}

/// Solver selection as configured by users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Solver {
    Exact {
        #[serde(default = "default_node_budget")]
        node_budget: u64,
    },
    Greedy,
}

fn default_node_budget() -> u64 {
    DEFAULT_NODE_BUDGET
}

impl Default for Solver {
    fn default() -> Self {
        Solver::Exact { node_budget: DEFAULT_NODE_BUDGET }
    }
}

impl Solver {
    pub fn solve(&self, problem: &SynthesisProblem) -> Result<SynthesisResult, SynthError> {
        match *self {
            Solver::Exact { node_budget } => solve_exact(problem, node_budget),
            Solver::Greedy => solve_greedy(problem),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Exact,
    Greedy,
    BruteForce,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Exact => "exact",
            SolverKind::Greedy => "greedy",
            SolverKind::BruteForce => "brute-force",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedAtom {
    pub atom: AtomIdx,
    /// Indistinguishable cases this atom distinguishes.
    pub fp_tests: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisResult {
    pub selected: BTreeSet<AtomIdx>,
    pub false_positive_tests: Vec<u64>,
    pub fp_count: u64,
    pub optimal: bool,
    pub atom_ranking: Vec<RankedAtom>,
    pub solver: SolverKind,
    pub node_budget: Option<u64>,
    pub nodes: u64,
}

impl SynthesisResult {
    pub fn contract(&self) -> Contract {
        Contract { selected: self.selected.clone() }
    }
}

/// Selected atoms ordered by descending false-positive contribution, then id.
pub fn rank_atoms(problem: &SynthesisProblem, selected: &BTreeSet<AtomIdx>) -> Vec<RankedAtom> {
    let mut hits: BTreeMap<AtomIdx, Vec<u64>> = selected.iter().map(|&a| (a, Vec::new())).collect();
    for case in &problem.indist {
        for a in &case.atoms {
            if let Some(tests) = hits.get_mut(a) {
                tests.push(case.id);
            }
        }
    }
    let mut ranking: Vec<RankedAtom> =
        hits.into_iter().map(|(atom, fp_tests)| RankedAtom { atom, fp_tests }).collect();
    ranking.sort_by(|x, y| y.fp_tests.len().cmp(&x.fp_tests.len()).then(x.atom.cmp(&y.atom)));
    ranking
}

fn finish(
    problem: &SynthesisProblem,
    selected: BTreeSet<AtomIdx>,
    optimal: bool,
    solver: SolverKind,
    node_budget: Option<u64>,
    nodes: u64,
) -> SynthesisResult {
    debug_assert!(problem.covers_dist(&selected));
    let false_positive_tests = problem.false_positive_tests(&selected);
    SynthesisResult {
        fp_count: false_positive_tests.len() as u64,
        false_positive_tests,
        optimal,
        atom_ranking: rank_atoms(problem, &selected),
        selected,
        solver,
        node_budget,
        nodes,
    }
}

/// Covering instance over local column and row indices. Columns are kept in
/// ascending atom order; indistinguishable cases with identical column sets
/// are merged into weighted groups.
#[derive(Debug, Clone)]
struct Instance {
    atoms: Vec<AtomIdx>,
    rows: Vec<Vec<u32>>,
    groups: Vec<(Vec<u32>, u64)>,
    col_rows: Vec<Vec<u32>>,
    col_groups: Vec<Vec<u32>>,
}

impl Instance {
    fn new(atoms: Vec<AtomIdx>, rows: Vec<Vec<u32>>, groups: Vec<(Vec<u32>, u64)>) -> Self {
        let mut col_rows = vec![Vec::new(); atoms.len()];
        let mut col_groups = vec![Vec::new(); atoms.len()];
        for (r, cols) in rows.iter().enumerate() {
            for &c in cols {
                col_rows[c as usize].push(r as u32);
            }
        }
        for (g, (cols, _)) in groups.iter().enumerate() {
            for &c in cols {
                col_groups[c as usize].push(g as u32);
            }
        }
        Instance { atoms, rows, groups, col_rows, col_groups }
    }

    fn from_problem(problem: &SynthesisProblem) -> Self {
        let atoms = problem.candidates();
        let local: BTreeMap<AtomIdx, u32> = atoms.iter().enumerate().map(|(i, &a)| (a, i as u32)).collect();
        let restrict = |case: &ProblemCase| -> Vec<u32> {
            case.atoms.iter().filter_map(|a| local.get(a).copied()).collect()
        };
        let rows = problem.dist.iter().map(restrict).collect();
        let mut grouped: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
        for case in &problem.indist {
            let cols = restrict(case);
            if !cols.is_empty() {
                *grouped.entry(cols).or_default() += 1;
            }
        }
        Instance::new(atoms, rows, grouped.into_iter().collect())
    }

    fn cols(&self) -> usize {
        self.atoms.len()
    }

    /// Rebuilds the instance over the columns marked in `keep`.
    fn restrict_cols(&self, keep: &[bool]) -> Instance {
        let mut map = vec![None; self.cols()];
        let mut atoms = Vec::new();
        for (c, &k) in keep.iter().enumerate() {
            if k {
                map[c] = Some(atoms.len() as u32);
                atoms.push(self.atoms[c]);
            }
        }
        let remap = |cols: &[u32]| -> Vec<u32> { cols.iter().filter_map(|&c| map[c as usize]).collect() };
        let rows = self.rows.iter().map(|r| remap(r)).collect();
        let mut grouped: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
        for (cols, w) in &self.groups {
            let cols = remap(cols);
            if !cols.is_empty() {
                *grouped.entry(cols).or_default() += w;
            }
        }
        Instance::new(atoms, rows, grouped.into_iter().collect())
    }

    /// Keeps one copy of each minimal row; covering it covers its supersets.
    fn drop_dominated_rows(&mut self) {
        let unique: BTreeSet<Vec<u32>> = self.rows.iter().cloned().collect();
        let mut by_len: Vec<Vec<u32>> = unique.into_iter().collect();
        by_len.sort_by_key(|r| r.len());
        let mut kept: Vec<(Vec<u32>, FixedBitSet)> = Vec::new();
        for row in by_len {
            let mut bits = FixedBitSet::with_capacity(self.cols());
            row.iter().for_each(|&c| bits.insert(c as usize));
            if !kept.iter().any(|(_, k)| k.is_subset(&bits)) {
                kept.push((row, bits));
            }
        }
        let rows = kept.into_iter().map(|(r, _)| r).collect();
        *self = Instance::new(self.atoms.clone(), rows, std::mem::take(&mut self.groups));
    }

    /// Removes columns covering no row, duplicate columns (keeping the lowest
    /// atom) and columns dominated by one covering a superset of rows with a
    /// subset of groups. Optimal cost and cardinality are preserved.
    fn drop_dominated_cols(&mut self) {
        let n = self.cols();
        let bits = |lists: &Vec<Vec<u32>>, len: usize| -> Vec<FixedBitSet> {
            lists
                .iter()
                .map(|l| {
                    let mut b = FixedBitSet::with_capacity(len);
                    l.iter().for_each(|&x| b.insert(x as usize));
                    b
                })
                .collect()
        };
        let rows = bits(&self.col_rows, self.rows.len());
        let groups = bits(&self.col_groups, self.groups.len());
        let mut keep = vec![true; n];
        for a in 0..n {
            if self.col_rows[a].is_empty() {
                keep[a] = false;
                continue;
            }
            for b in 0..n {
                if a == b || !keep[b] || self.col_rows[b].is_empty() {
                    continue;
                }
                let dominated = rows[a].is_subset(&rows[b]) && groups[b].is_subset(&groups[a]);
                let duplicate = dominated && rows[a] == rows[b] && groups[a] == groups[b];
                if dominated && (!duplicate || b < a) {
                    keep[a] = false;
                    break;
                }
            }
        }
        if keep.iter().any(|k| !k) {
            *self = self.restrict_cols(&keep);
        }
    }

    /// Splits into independent sub-instances linked by shared rows or groups.
    fn components(&self) -> Vec<Instance> {
        let n = self.cols();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let lists = self.rows.iter().chain(self.groups.iter().map(|(c, _)| c));
        for cols in lists {
            for w in cols.windows(2) {
                let (a, b) = (find(&mut parent, w[0] as usize), find(&mut parent, w[1] as usize));
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut roots: BTreeMap<usize, Vec<bool>> = BTreeMap::new();
        for c in 0..n {
            let r = find(&mut parent, c);
            roots.entry(r).or_insert_with(|| vec![false; n])[c] = true;
        }
        roots
            .into_values()
            .map(|keep| {
                let mut sub = self.restrict_cols(&keep);
                sub.rows.retain(|r| !r.is_empty());
                Instance::new(sub.atoms, sub.rows, sub.groups)
            })
            .collect()
    }
}

/// Incremental selection state shared by the solvers. `new_fp[c]` is the
/// weight of the groups column `c` would newly cover.
struct Cover<'a> {
    inst: &'a Instance,
    row_hits: Vec<u32>,
    group_hits: Vec<u32>,
    new_fp: Vec<u64>,
    uncovered: usize,
    fp: u64,
    selected: Vec<u32>,
}

impl<'a> Cover<'a> {
    fn new(inst: &'a Instance) -> Self {
        let new_fp =
            inst.col_groups.iter().map(|gs| gs.iter().map(|&g| inst.groups[g as usize].1).sum()).collect();
        Cover {
            inst,
            row_hits: vec![0; inst.rows.len()],
            group_hits: vec![0; inst.groups.len()],
            new_fp,
            uncovered: inst.rows.len(),
            fp: 0,
            selected: Vec::new(),
        }
    }

    fn select(&mut self, c: u32) {
        for &r in &self.inst.col_rows[c as usize] {
            if self.row_hits[r as usize] == 0 {
                self.uncovered -= 1;
            }
            self.row_hits[r as usize] += 1;
        }
        for &g in &self.inst.col_groups[c as usize] {
            if self.group_hits[g as usize] == 0 {
                let (cols, w) = &self.inst.groups[g as usize];
                self.fp += w;
                cols.iter().for_each(|&o| self.new_fp[o as usize] -= w);
            }
            self.group_hits[g as usize] += 1;
        }
        self.selected.push(c);
    }

    fn unselect(&mut self) {
        let c = self.selected.pop().expect("selection nonempty");
        for &r in &self.inst.col_rows[c as usize] {
            self.row_hits[r as usize] -= 1;
            if self.row_hits[r as usize] == 0 {
                self.uncovered += 1;
            }
        }
        for &g in &self.inst.col_groups[c as usize] {
            self.group_hits[g as usize] -= 1;
            if self.group_hits[g as usize] == 0 {
                let (cols, w) = &self.inst.groups[g as usize];
                self.fp -= w;
                cols.iter().for_each(|&o| self.new_fp[o as usize] += w);
            }
        }
    }

    fn new_rows(&self, c: u32) -> u64 {
        self.inst.col_rows[c as usize].iter().filter(|&&r| self.row_hits[r as usize] == 0).count() as u64
    }

    fn new_fp(&self, c: u32) -> u64 {
        self.new_fp[c as usize]
    }

    fn atoms(&self) -> BTreeSet<AtomIdx> {
        self.selected.iter().map(|&c| self.inst.atoms[c as usize]).collect()
    }
}

fn greedy_cover(inst: &Instance) -> Cover<'_> {
    let mut cover = Cover::new(inst);
    while cover.uncovered > 0 {
        let mut best: Option<(u32, u64, u64)> = None;
        for c in 0..inst.cols() as u32 {
            let gain = cover.new_rows(c);
            if gain == 0 {
                continue;
            }
            let cost = cover.new_fp(c);
            // gain / (1 + cost), compared exactly; earlier columns win ties.
            let better = best.is_none_or(|(_, bg, bc)| gain * (1 + bc) > bg * (1 + cost));
            if better {
                best = Some((c, gain, cost));
            }
        }
        let (c, _, _) = best.expect("every uncovered row has a column");
        cover.select(c);
    }
    cover
}

pub fn solve_greedy(problem: &SynthesisProblem) -> Result<SynthesisResult, SynthError> {
    problem.check_feasible()?;
    let inst = Instance::from_problem(problem);
    let selected = greedy_cover(&inst).atoms();
    Ok(finish(problem, selected, false, SolverKind::Greedy, None, 0))
}

/// (false positives, cardinality) of a complete or partial selection.
type Cost = (u64, usize);

struct BranchAndBound<'a> {
    cover: Cover<'a>,
    excluded: Vec<bool>,
    best_cost: Cost,
    best: Vec<u32>,
    nodes: u64,
    node_budget: u64,
    aborted: bool,
    open_rows: Vec<(usize, usize)>,
    column_budget: Vec<f64>,
    useful: Vec<bool>,
}

impl BranchAndBound<'_> {
    /// Dual-feasible bound of the LP relaxation. The weight of every
    /// uncovered group is split among its useful columns, giving each column
    /// a budget; rows then take prices greedily, each limited by the
    /// remaining budget of its columns. The price total bounds the cost of
    /// covering the `open` rows. A second pass moves group weight onto the
    /// columns the first pass exhausted.
    fn dual_bound(&mut self, open: &mut [(usize, usize)]) -> u64 {
        let inst = self.cover.inst;
        let useful = &mut self.useful;
        useful.iter_mut().for_each(|u| *u = false);
        for &(_, r) in open.iter() {
            for &c in &inst.rows[r] {
                useful[c as usize] |= !self.excluded[c as usize];
            }
        }
        open.sort_unstable();
        let mut tight = vec![true; inst.cols()];
        let mut best = 0.0f64;
        for _ in 0..2 {
            let budget = &mut self.column_budget;
            budget.iter_mut().for_each(|b| *b = 0.0);
            for (g, (cols, w)) in inst.groups.iter().enumerate() {
                if self.cover.group_hits[g] > 0 {
                    continue;
                }
                let useful_cols = || cols.iter().filter(|&&c| useful[c as usize]);
                let favored = useful_cols().filter(|&&c| tight[c as usize]).count();
                let share_with = |c: u32| favored == 0 || tight[c as usize];
                let n = if favored > 0 { favored } else { useful_cols().count() };
                if n > 0 {
                    let share = *w as f64 / n as f64;
                    useful_cols().filter(|&&c| share_with(c)).for_each(|&c| budget[c as usize] += share);
                }
            }
            let mut total = 0.0;
            for &(_, r) in open.iter() {
                let available = inst.rows[r].iter().filter(|&&c| !self.excluded[c as usize]);
                let price = available.clone().map(|&c| budget[c as usize]).fold(f64::INFINITY, f64::min);
                if price > 0.0 {
                    total += price;
                    available.for_each(|&c| budget[c as usize] -= price);
                }
            }
            best = best.max(total);
            for (t, b) in tight.iter_mut().zip(budget.iter()) {
                *t = *b < 1e-9;
            }
        }
        (best - 1e-6).ceil().max(0.0) as u64
    }

    fn search(&mut self) {
        if self.nodes >= self.node_budget {
            self.aborted = true;
            return;
        }
        self.nodes += 1;
        let inst = self.cover.inst;
        let (fp, card) = (self.cover.fp, self.cover.selected.len());
        if self.cover.uncovered == 0 {
            if (fp, card) < self.best_cost {
                self.best_cost = (fp, card);
                self.best = self.cover.selected.clone();
            }
            return;
        }
        // Each uncovered row needs one more column, so the cheapest
        // available column of every row bounds the remaining cost.
        let mut bound = 0;
        let mut branch_row: Option<(usize, usize)> = None;
        let mut open = std::mem::take(&mut self.open_rows);
        open.clear();
        for (r, cols) in inst.rows.iter().enumerate() {
            if self.cover.row_hits[r] > 0 {
                continue;
            }
            let mut available = 0;
            let mut cheapest = u64::MAX;
            for &c in cols {
                if !self.excluded[c as usize] {
                    available += 1;
                    cheapest = cheapest.min(self.cover.new_fp(c));
                }
            }
            if available == 0 {
                return;
            }
            bound = bound.max(cheapest);
            open.push((available, r));
            if branch_row.is_none_or(|(n, _)| available < n) {
                branch_row = Some((available, r));
            }
        }
        let best_cost = self.best_cost;
        let pruned = |bound: u64| (fp + bound, card + 1) >= best_cost;
        let cut = pruned(bound) || (open.len() > 1 && pruned(self.dual_bound(&mut open)));
        self.open_rows = open;
        if cut {
            return;
        }
        let (_, row) = branch_row.expect("an uncovered row exists");
        let mut options: Vec<(u64, u32)> = inst.rows[row]
            .iter()
            .filter(|&&c| !self.excluded[c as usize])
            .map(|&c| (self.cover.new_fp(c), c))
            .collect();
        options.sort();
        let mut tried = 0;
        for &(_, c) in &options {
            self.cover.select(c);
            self.search();
            self.cover.unselect();
            self.excluded[c as usize] = true;
            tried += 1;
            if self.aborted {
                break;
            }
        }
        for &(_, c) in &options[..tried] {
            self.excluded[c as usize] = false;
        }
    }
}

pub fn solve_exact(problem: &SynthesisProblem, node_budget: u64) -> Result<SynthesisResult, SynthError> {
    problem.check_feasible()?;
    let mut inst = Instance::from_problem(problem);
    inst.drop_dominated_rows();
    inst.drop_dominated_cols();
    inst.drop_dominated_rows();

    let mut selected = BTreeSet::new();
    let mut optimal = true;
    let mut nodes = 0;
    for comp in inst.components() {
        let incumbent = greedy_cover(&comp);
        let mut bb = BranchAndBound {
            best_cost: (incumbent.fp, incumbent.selected.len()),
            best: incumbent.selected.clone(),
            cover: Cover::new(&comp),
            excluded: vec![false; comp.cols()],
            nodes: 0,
            node_budget: node_budget.saturating_sub(nodes),
            aborted: false,
            open_rows: Vec::new(),
            column_budget: vec![0.0; comp.cols()],
            useful: vec![false; comp.cols()],
        };
        bb.search();
        nodes += bb.nodes;
        optimal &= !bb.aborted;
        selected.extend(bb.best.iter().map(|&c| comp.atoms[c as usize]));
    }
    Ok(finish(problem, selected, optimal, SolverKind::Exact, Some(node_budget), nodes))
}

/// Exhaustive search over subsets of the candidate atoms. Among optimal
/// selections the smallest wins, then the lexicographically least.
pub fn brute_force(problem: &SynthesisProblem) -> Result<SynthesisResult, SynthError> {
    problem.check_feasible()?;
    let inst = Instance::from_problem(problem);
    if inst.cols() > BRUTE_FORCE_LIMIT {
        return Err(SynthError::TooLarge(inst.cols()));
    }
    // Include-first enumeration in column order visits equal-size subsets in
    // lexicographic order, so only strict improvements replace the best.
    fn visit(cover: &mut Cover, col: u32, best: &mut (Cost, Vec<u32>), nodes: &mut u64) {
        *nodes += 1;
        if col as usize == cover.inst.cols() {
            let cost = (cover.fp, cover.selected.len());
            if cover.uncovered == 0 && cost < best.0 {
                *best = (cost, cover.selected.clone());
            }
            return;
        }
        cover.select(col);
        visit(cover, col + 1, best, nodes);
        cover.unselect();
        visit(cover, col + 1, best, nodes);
    }
    let mut cover = Cover::new(&inst);
    let mut best = ((u64::MAX, usize::MAX), Vec::new());
    let mut nodes = 0;
    visit(&mut cover, 0, &mut best, &mut nodes);
    let selected = best.1.iter().map(|&c| inst.atoms[c as usize]).collect();
    Ok(finish(problem, selected, true, SolverKind::BruteForce, None, nodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: AtomIdx = AtomIdx(0);
    const B: AtomIdx = AtomIdx(1);

    fn case(id: u64, atoms: &[AtomIdx]) -> ProblemCase {
        ProblemCase { id, atoms: atoms.to_vec() }
    }

    fn set(atoms: &[AtomIdx]) -> BTreeSet<AtomIdx> {
        atoms.iter().copied().collect()
    }

    fn all_solvers(p: &SynthesisProblem) -> [SynthesisResult; 3] {
        [solve_exact(p, DEFAULT_NODE_BUDGET).unwrap(), solve_greedy(p).unwrap(), brute_force(p).unwrap()]
    }

    #[test]
    fn build_problem_partitions_results() {
        let r = |id, dist, atoms: &[u16], truncated| EvalResult {
            testcase_id: id,
            attacker_distinguishable: dist,
            distinguishing_atoms: atoms.iter().map(|&a| AtomIdx(a)).collect(),
            truncated,
        };
        let p = build_problem(&[r(0, false, &[1], false), r(1, false, &[], false)], 4);
        assert!(p.dist.is_empty());
        assert_eq!(p.indist.len(), 2);
        let p = build_problem(&[r(0, true, &[0], false), r(1, true, &[], false), r(2, true, &[2], true)], 4);
        assert_eq!(p.dist, [case(0, &[A])]);
        assert_eq!(p.infeasible, [1]);
        assert_eq!(p.truncated, [2]);
    }

    #[test]
    fn problem_validation() {
        assert!(SynthesisProblem::new(1, vec![case(0, &[B])], vec![]).is_err());
        assert!(SynthesisProblem::new(2, vec![case(0, &[B])], vec![case(0, &[A])]).is_err());
        let p = SynthesisProblem::new(2, vec![case(0, &[B, A, B])], vec![]).unwrap();
        assert_eq!(p.dist[0].atoms, [A, B]);
    }

    #[test]
    fn prefers_atom_without_false_positives() {
        let p = SynthesisProblem::new(2, vec![case(1, &[A, B])], vec![case(2, &[A]), case(3, &[A])]).unwrap();
        for r in all_solvers(&p) {
            assert_eq!(r.selected, set(&[B]), "{:?}", r.solver);
            assert_eq!(r.fp_count, 0);
        }
    }

    #[test]
    fn forced_false_positive() {
        let p = SynthesisProblem::new(1, vec![case(1, &[A])], vec![case(2, &[A])]).unwrap();
        for r in all_solvers(&p) {
            assert_eq!(r.selected, set(&[A]));
            assert_eq!(r.fp_count, 1);
            assert_eq!(r.false_positive_tests, [2]);
        }
    }

    #[test]
    fn empty_problems() {
        let p = SynthesisProblem::new(5, vec![], vec![case(0, &[A])]).unwrap();
        for r in all_solvers(&p) {
            assert!(r.selected.is_empty());
            assert_eq!(r.fp_count, 0);
        }
        let r = solve_exact(&SynthesisProblem::default(), 10).unwrap();
        assert!(r.optimal && r.selected.is_empty());
    }

    #[test]
    fn all_atoms_hit_all_indist() {
        let atoms: Vec<AtomIdx> = (0..4).map(AtomIdx).collect();
        let dist = (0..4).map(|i| case(i, &atoms[i as usize..=i as usize])).collect();
        let indist = (10..15).map(|i| case(i, &atoms)).collect();
        let p = SynthesisProblem::new(4, dist, indist).unwrap();
        for r in all_solvers(&p) {
            assert_eq!(r.fp_count, 5);
        }
    }

    #[test]
    fn infeasible_and_oversized_problems() {
        let p = SynthesisProblem::new(1, vec![case(7, &[])], vec![]).unwrap();
        assert_eq!(solve_exact(&p, 10).unwrap_err(), SynthError::Infeasible(vec![7]));
        assert_eq!(solve_greedy(&p).unwrap_err(), SynthError::Infeasible(vec![7]));
        assert_eq!(brute_force(&p).unwrap_err(), SynthError::Infeasible(vec![7]));
        let dist = (0..21).map(|i| case(i, &[AtomIdx(i as u16)])).collect();
        let p = SynthesisProblem::new(21, dist, vec![]).unwrap();
        assert_eq!(brute_force(&p).unwrap_err(), SynthError::TooLarge(21));
        assert_eq!(solve_exact(&p, 1000).unwrap().selected.len(), 21);
    }

    #[test]
    fn greedy_can_be_suboptimal() {
        // C covers six rows for one FP (ratio 3); A and B cover four rows each
        // and share a different FP (ratio 2). Greedy takes C first.
        let (a, b, c) = (AtomIdx(0), AtomIdx(1), AtomIdx(2));
        let mut dist: Vec<ProblemCase> = (0..3).map(|i| case(i, &[a, c])).collect();
        dist.extend((3..6).map(|i| case(i, &[b, c])));
        dist.extend([case(6, &[a]), case(7, &[b])]);
        let p = SynthesisProblem::new(3, dist, vec![case(8, &[a, b]), case(9, &[c])]).unwrap();
        let [exact, greedy, brute] = all_solvers(&p);
        assert_eq!(exact.selected, set(&[a, b]));
        assert_eq!(exact.fp_count, 1);
        assert_eq!(brute.selected, exact.selected);
        assert_eq!(greedy.selected, set(&[a, b, c]));
        assert_eq!(greedy.fp_count, 2);
    }

    #[test]
    fn ties_prefer_small_then_lexicographic() {
        let (a, b, c) = (AtomIdx(0), AtomIdx(1), AtomIdx(2));
        // {C} alone and {A, B} both cost nothing; {C} is smaller.
        let p = SynthesisProblem::new(3, vec![case(0, &[a, c]), case(1, &[b, c])], vec![]).unwrap();
        assert_eq!(brute_force(&p).unwrap().selected, set(&[c]));
        assert_eq!(solve_exact(&p, 100).unwrap().selected, set(&[c]));
        // Any single atom covers both; the lowest id wins.
        let p = SynthesisProblem::new(3, vec![case(0, &[a, b, c]), case(1, &[a, b, c])], vec![]).unwrap();
        assert_eq!(brute_force(&p).unwrap().selected, set(&[a]));
        assert_eq!(solve_exact(&p, 100).unwrap().selected, set(&[a]));
    }

    #[test]
    fn node_budget_exhaustion_keeps_a_feasible_answer() {
        let p = random_problem(3, 14, 40, 40);
        let r = solve_exact(&p, 1).unwrap();
        assert!(!r.optimal);
        assert!(p.covers_dist(&r.selected));
        assert_eq!(r.node_budget, Some(1));
    }

    #[test]
    fn solver_choice_parses_and_dispatches() {
        let exact: Solver = toml::from_str("kind = \"exact\"\nnode_budget = 5").unwrap();
        assert_eq!(exact, Solver::Exact { node_budget: 5 });
        let default: Solver = toml::from_str("kind = \"exact\"").unwrap();
        assert_eq!(default, Solver::default());
        assert_eq!(toml::from_str::<Solver>("kind = \"greedy\"").unwrap(), Solver::Greedy);
        assert!(toml::from_str::<Solver>("kind = \"ilp\"").is_err());
        let p = SynthesisProblem::new(1, vec![case(1, &[A])], vec![]).unwrap();
        assert_eq!(Solver::Greedy.solve(&p).unwrap().solver, SolverKind::Greedy);
        assert_eq!(exact.solve(&p).unwrap().node_budget, Some(5));
    }

    #[test]
    fn ranking_by_false_positive_contribution() {
        let (a, b, c) = (AtomIdx(0), AtomIdx(1), AtomIdx(2));
        let p = SynthesisProblem::new(
            3,
            vec![case(0, &[a]), case(1, &[b]), case(2, &[c])],
            vec![case(10, &[a, b]), case(11, &[b]), case(12, &[a]), case(13, &[b])],
        )
        .unwrap();
        let r = solve_exact(&p, 100).unwrap();
        let ranking: Vec<(AtomIdx, Vec<u64>)> =
            r.atom_ranking.iter().map(|x| (x.atom, x.fp_tests.clone())).collect();
        assert_eq!(ranking, [(b, vec![10, 11, 13]), (a, vec![10, 12]), (c, vec![])]);
        assert_eq!(r.fp_count, 4);
        let tied = rank_atoms(&p, &set(&[c, a]));
        assert_eq!(tied[0].atom, a);
        assert_eq!(rank_atoms(&p, &set(&[c, b]))[1].atom, c);
    }

    /// Random instance over `universe` atoms with sparse membership.
    fn random_problem(seed: u64, universe: u16, dist: u64, indist: u64) -> SynthesisProblem {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |min: usize| -> Vec<AtomIdx> {
            let mut v: Vec<AtomIdx> = (0..universe).filter(|_| rng.gen_ratio(1, 5)).map(AtomIdx).collect();
            while v.len() < min {
                v.push(AtomIdx(rng.gen_range(0..universe)));
            }
            v
        };
        let d = (0..dist).map(|id| ProblemCase { id, atoms: draw(1) }).collect();
        let i = (dist..dist + indist).map(|id| ProblemCase { id, atoms: draw(0) }).collect();
        SynthesisProblem::new(universe as usize, d, i).unwrap()
    }

    proptest! {
        #[test]
        fn exact_matches_oracle(seed in any::<u64>(), universe in 1u16..=12, dist in 0u64..25, indist in 0u64..40) {
            let p = random_problem(seed, universe, dist, indist);
            let exact = solve_exact(&p, DEFAULT_NODE_BUDGET).unwrap();
            let brute = brute_force(&p).unwrap();
            let greedy = solve_greedy(&p).unwrap();
            prop_assert!(exact.optimal);
            prop_assert!(p.covers_dist(&exact.selected));
            prop_assert!(p.covers_dist(&greedy.selected));
            prop_assert_eq!(exact.fp_count, brute.fp_count);
            prop_assert_eq!(exact.selected.len(), brute.selected.len());
            prop_assert!(greedy.fp_count >= exact.fp_count);
            prop_assert_eq!(exact.false_positive_tests.clone(), p.false_positive_tests(&exact.selected));
            prop_assert_eq!(solve_greedy(&p).unwrap(), greedy);
        }

        #[test]
        fn false_positives_are_monotone(seed in any::<u64>(), extra in prop::collection::btree_set(0u16..10, 0..5)) {
            let p = random_problem(seed, 10, 10, 30);
            let r = solve_exact(&p, DEFAULT_NODE_BUDGET).unwrap();
            let mut larger = r.selected.clone();
            larger.extend(extra.into_iter().map(AtomIdx));
            prop_assert!(p.false_positive_tests(&larger).len() as u64 >= r.fp_count);
            let full: BTreeSet<AtomIdx> = (0..10).map(AtomIdx).collect();
            prop_assert!(p.false_positive_tests(&full).len() as u64 >= r.fp_count);
        }
    }
}
