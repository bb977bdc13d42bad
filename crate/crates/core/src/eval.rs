//! Test-case evaluation, contract scoring and satisfaction checks.

use rayon::prelude::*;
use thiserror::Error;

use crate::isa::{ArchState, IsaError, MemoryLayout, Program, RetiredEvent};
use crate::template::{distinguishing_atoms, AtomIdx, Contract, Template};
use crate::testgen::TestCase;
use crate::uarch::{attacker_trace, simulate, AttackerTrace, UarchConfig, UarchTrace};

/// Cycle bound for one simulation unless configured otherwise.
pub const DEFAULT_MAX_CYCLES: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("test case {id}: {source}")]
    Boot { id: u64, source: IsaError },
    #[error("cannot build thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EvalResult {
    pub testcase_id: u64,
    pub attacker_distinguishable: bool,
    /// Distinguishing atoms, ascending.
    pub distinguishing_atoms: Vec<AtomIdx>,
    /// A simulation hit its cycle bound; the case is excluded from tallies.
    pub truncated: bool,
}

impl EvalResult {
    /// Whether `contract` distinguishes this case.
    pub fn contract_distinguishable(&self, contract: &Contract) -> bool {
        contract.distinguishes(&self.distinguishing_atoms)
    }
}

pub fn attacker_distinguishable(first: &AttackerTrace, second: &AttackerTrace) -> bool {
    first != second
}

/// Verdicts for one pair of pipeline traces.
pub fn evaluate_traces(
    testcase_id: u64,
    first: &UarchTrace,
    second: &UarchTrace,
    template: &Template,
) -> EvalResult {
    let events = |t: &UarchTrace| -> Vec<RetiredEvent> { t.retired().cloned().collect() };
    EvalResult {
        testcase_id,
        attacker_distinguishable: attacker_distinguishable(&attacker_trace(first), &attacker_trace(second)),
        distinguishing_atoms: distinguishing_atoms(&events(first), &events(second), template),
        truncated: first.truncated || second.truncated,
    }
}

pub fn run_program(
    program: &Program,
    init_regs: [u32; 32],
    layout: MemoryLayout,
    config: &UarchConfig,
    max_cycles: u64,
) -> Result<UarchTrace, IsaError> {
    let state = ArchState::boot(program, init_regs, layout)?;
    Ok(simulate(&state, config, max_cycles))
}

pub fn evaluate(
    tc: &TestCase,
    config: &UarchConfig,
    template: &Template,
    layout: MemoryLayout,
    max_cycles: u64,
) -> Result<EvalResult, EvalError> {
    let sim = |p: &Program| {
        run_program(p, tc.init_regs, layout, config, max_cycles)
            .map_err(|source| EvalError::Boot { id: tc.id, source })
    };
    Ok(evaluate_traces(tc.id, &sim(&tc.program_a)?, &sim(&tc.program_b)?, template))
}

/// Evaluates every case on `parallelism` worker threads, preserving order.
pub fn evaluate_suite(
    cases: &[TestCase],
    config: &UarchConfig,
    template: &Template,
    layout: MemoryLayout,
    max_cycles: u64,
    parallelism: usize,
) -> Result<Vec<EvalResult>, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| EvalError::ThreadPool(e.to_string()))?;
    pool.install(|| cases.par_iter().map(|tc| evaluate(tc, config, template, layout, max_cycles)).collect())
}

/// Re-expresses results over `target`, dropping atoms it lacks.
pub fn project(results: &[EvalResult], source: &Template, target: &Template) -> Vec<EvalResult> {
    let map: Vec<Option<AtomIdx>> = source.atoms().iter().map(|a| target.lookup(&a.id())).collect();
    results
        .iter()
        .map(|r| {
            let mut atoms: Vec<AtomIdx> =
                r.distinguishing_atoms.iter().filter_map(|i| map[i.0 as usize]).collect();
            atoms.sort();
            EvalResult { distinguishing_atoms: atoms, ..r.clone() }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Metrics {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
    /// Cases excluded because a simulation was truncated.
    pub truncated: u64,
}

impl Metrics {
    pub fn from_counts(true_pos: u64, false_pos: u64, false_neg: u64, true_neg: u64) -> Self {
        Metrics { true_pos, false_pos, false_neg, true_neg, truncated: 0 }
    }

    /// TP / (TP + FP); `None` when no case is contract-distinguishable.
    pub fn precision(&self) -> Option<f64> {
        let denom = self.true_pos + self.false_pos;
        (denom > 0).then(|| self.true_pos as f64 / denom as f64)
    }

    /// TP / (TP + FN); `None` when no case is attacker-distinguishable.
    pub fn sensitivity(&self) -> Option<f64> {
        let denom = self.true_pos + self.false_neg;
        (denom > 0).then(|| self.true_pos as f64 / denom as f64)
    }

    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg + self.truncated
    }
}

pub fn score(contract: &Contract, results: &[EvalResult]) -> Metrics {
    let mut m = Metrics::default();
    for r in results {
        if r.truncated {
            m.truncated += 1;
            continue;
        }
        match (r.attacker_distinguishable, r.contract_distinguishable(contract)) {
            (true, true) => m.true_pos += 1,
            (false, true) => m.false_pos += 1,
            (true, false) => m.false_neg += 1,
            (false, false) => m.true_neg += 1,
        }
    }
    m
}

/// Attacker-distinguishable cases the contract fails to distinguish.
pub fn check_satisfaction(contract: &Contract, results: &[EvalResult]) -> Vec<u64> {
    results
        .iter()
        .filter(|r| !r.truncated && r.attacker_distinguishable && !r.contract_distinguishable(contract))
        .map(|r| r.testcase_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{DecodedInst, Mnemonic, HALT_WORD};
    use crate::template::build_template;
    use crate::testgen::{gen_suite, load_immediate, GenConfig};
    use crate::uarch::preset;
    use proptest::prelude::*;
    use Mnemonic::*;

    fn program(insts: &[DecodedInst]) -> Program {
        let mut words: Vec<u32> = insts.iter().map(|i| i.raw).collect();
        words.push(HALT_WORD);
        Program::new(MemoryLayout::default().code.base, words)
    }

    fn case(a: &[DecodedInst], b: &[DecodedInst]) -> TestCase {
        TestCase {
            id: 4,
            target_atom: String::new(),
            program_a: program(a),
            program_b: program(b),
            init_regs: [0; 32],
            seed: 0,
        }
    }

    fn result(id: u64, dist: bool, atoms: &[u16]) -> EvalResult {
        EvalResult {
            testcase_id: id,
            attacker_distinguishable: dist,
            distinguishing_atoms: atoms.iter().map(|&a| AtomIdx(a)).collect(),
            truncated: false,
        }
    }

    #[test]
    fn attacker_examples() {
        let t = |v: &[u64]| AttackerTrace(v.to_vec());
        assert!(!attacker_distinguishable(&t(&[5, 6, 9]), &t(&[5, 6, 9])));
        assert!(attacker_distinguishable(&t(&[5, 6, 9]), &t(&[5, 6, 10])));
        assert!(attacker_distinguishable(&t(&[5, 6]), &t(&[5, 6, 9])));
    }

    #[test]
    fn evaluation_examples() {
        let t = build_template(4).unwrap();
        let layout = MemoryLayout::default();
        let div = DecodedInst::r(Div, 3, 1, 2).unwrap();
        let prog = |divisor| {
            let mut p = load_immediate(1, 1000).to_vec();
            p.extend(load_immediate(2, divisor));
            p.push(div);
            p
        };
        let ibex = preset("ibex-like").unwrap();
        let same = evaluate(&case(&prog(3), &prog(3)), &ibex, &t, layout, 1000).unwrap();
        assert!(!same.attacker_distinguishable);
        assert!(same.distinguishing_atoms.is_empty());
        assert_eq!(same.testcase_id, 4);

        // bitlen(1000) = 10; divisors 3 and 300 give latencies 10 and 3.
        let r = evaluate(&case(&prog(3), &prog(300)), &ibex, &t, layout, 1000).unwrap();
        assert!(r.attacker_distinguishable);
        assert!(r.distinguishing_atoms.contains(&t.lookup("DIV:REG_RS2").unwrap()));

        // A dead register write.
        let dead = |v| load_immediate(9, v).to_vec();
        let r = evaluate(&case(&dead(1), &dead(2)), &UarchConfig::default(), &t, layout, 1000).unwrap();
        assert!(!r.attacker_distinguishable);
        assert!(r.distinguishing_atoms.contains(&t.lookup("ADDI:REG_RD").unwrap()));
        assert!(r.distinguishing_atoms.contains(&t.lookup("ADDI:IMM").unwrap()));
    }

    #[test]
    fn truncation_is_flagged_and_excluded() {
        let t = build_template(1).unwrap();
        let long: Vec<_> = (0..50).map(|_| DecodedInst::nop()).collect();
        let r =
            evaluate(&case(&long, &long), &UarchConfig::default(), &t, MemoryLayout::default(), 20).unwrap();
        assert!(r.truncated);
        let m = score(&Contract::full(&t), std::slice::from_ref(&r));
        assert_eq!(m.truncated, 1);
        assert_eq!(m.total(), 1);
        assert!(check_satisfaction(&Contract::empty(), &[r]).is_empty());
    }

    #[test]
    fn suite_evaluation_is_order_preserving_and_parallelism_independent() {
        let t = build_template(2).unwrap();
        let cfg = GenConfig::default();
        let suite = gen_suite(1, &t, 60, &cfg).unwrap().cases;
        let ibex = preset("ibex-like").unwrap();
        let one = evaluate_suite(&suite, &ibex, &t, cfg.layout(), DEFAULT_MAX_CYCLES, 1).unwrap();
        let eight = evaluate_suite(&suite, &ibex, &t, cfg.layout(), DEFAULT_MAX_CYCLES, 8).unwrap();
        assert_eq!(one, eight);
        assert!(one.iter().enumerate().all(|(i, r)| r.testcase_id == i as u64));
        assert!(evaluate_suite(&[], &ibex, &t, cfg.layout(), 10, 2).unwrap().is_empty());
    }

    #[test]
    fn data_only_suite_on_leak_free_pipeline_is_indistinguishable() {
        let t = build_template(4).unwrap();
        let cfg = GenConfig { data_only: true, ..GenConfig::default() };
        let suite = gen_suite(2, &t, 300, &cfg).unwrap().cases;
        let results =
            evaluate_suite(&suite, &UarchConfig::default(), &t, cfg.layout(), DEFAULT_MAX_CYCLES, 4).unwrap();
        assert!(results.iter().all(|r| !r.attacker_distinguishable && !r.truncated));
    }

    #[test]
    fn metric_formulas() {
        let m = Metrics::from_counts(3, 1, 0, 0);
        assert_eq!(m.precision(), Some(0.75));
        let m = Metrics::from_counts(3, 1, 1, 5);
        assert_eq!(m.sensitivity(), Some(0.75));
        assert_eq!(m.total(), 10);
        let none = Metrics::default();
        assert_eq!(none.precision(), None);
        assert_eq!(none.sensitivity(), None);
    }

    #[test]
    fn score_and_satisfaction_examples() {
        let t = build_template(1).unwrap();
        let results = vec![
            result(0, true, &[1, 2]),
            result(1, true, &[2]),
            result(2, false, &[1]),
            result(3, false, &[]),
            result(4, true, &[3]),
        ];
        let full = score(&Contract::full(&t), &results);
        assert_eq!(full, Metrics::from_counts(3, 1, 0, 1));
        let empty = score(&Contract::empty(), &results);
        assert_eq!(empty, Metrics::from_counts(0, 0, 3, 2));
        assert_eq!(check_satisfaction(&Contract::empty(), &results), [0, 1, 4]);
        let c = Contract { selected: [AtomIdx(2)].into() };
        assert_eq!(score(&c, &results), Metrics::from_counts(2, 0, 1, 2));
        assert_eq!(check_satisfaction(&c, &results), [4]);
        assert!(check_satisfaction(&Contract::full(&t), &results).is_empty());
    }

    #[test]
    fn projection_drops_missing_atoms() {
        let full = build_template(2).unwrap();
        let small = build_template(1).unwrap();
        let keep = full.lookup("ADD:RAW_RS1_1").unwrap();
        let drop = full.lookup("ADD:RAW_RS1_2").unwrap();
        let projected = project(
            &[EvalResult {
                testcase_id: 0,
                attacker_distinguishable: true,
                distinguishing_atoms: vec![keep, drop],
                truncated: false,
            }],
            &full,
            &small,
        );
        assert_eq!(projected[0].distinguishing_atoms, [small.lookup("ADD:RAW_RS1_1").unwrap()]);
    }

    fn results_strategy() -> impl Strategy<Value = Vec<EvalResult>> {
        prop::collection::vec((any::<bool>(), prop::collection::btree_set(0u16..12, 0..5)), 0..30).prop_map(
            |v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (d, atoms))| EvalResult {
                        testcase_id: i as u64,
                        attacker_distinguishable: d,
                        distinguishing_atoms: atoms.into_iter().map(AtomIdx).collect(),
                        truncated: false,
                    })
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn score_is_monotone(results in results_strategy(), small in prop::collection::btree_set(0u16..12, 0..6), extra in prop::collection::btree_set(0u16..12, 0..6)) {
            let smaller = Contract { selected: small.iter().map(|&a| AtomIdx(a)).collect() };
            let larger = Contract { selected: small.union(&extra).map(|&a| AtomIdx(a)).collect() };
            let (s, l) = (score(&smaller, &results), score(&larger, &results));
            prop_assert!(l.true_pos >= s.true_pos);
            prop_assert!(l.false_pos >= s.false_pos);
            prop_assert_eq!(s.total(), results.len() as u64);
            prop_assert_eq!(check_satisfaction(&smaller, &results).is_empty(), s.false_neg == 0);
        }
    }
}
