//! `ctrsynth`: generate test suites, evaluate them on a pipeline model,
//! synthesize leakage contracts and report on them.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ctrsynth::eval::{EvalError, DEFAULT_MAX_CYCLES};
use ctrsynth::pipeline::{
    evaluate_suite_file, generate_suite, run_pipeline, synthesize, write_atomic, PipelineError, RunManifest,
    StageStatus,
};
use ctrsynth::report::{build_report, curve_csv, ReportError, ReportOptions};
use ctrsynth::synth::{Solver, SynthError, DEFAULT_NODE_BUDGET};
use ctrsynth::template::{parse_families, Template, TemplateConfig};
use ctrsynth::testgen::{GenConfig, ProloguePolicy};
use ctrsynth::trace_io::{ingest_pair, read_document, ContractFile, ResultsFile, SuiteFile, TraceIoError};
use ctrsynth::uarch::UarchConfig;

#[derive(Parser)]
#[command(name = "ctrsynth", version, about = "Leakage contract synthesis for RV32IM cores")]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "CTRSYNTH_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a test suite.
    Gen(GenArgs),
    /// Evaluate a suite on a microarchitecture.
    Eval(EvalArgs),
    /// Synthesize a contract from evaluation results.
    Synth(SynthArgs),
    /// Write the contract table, metrics and precision curve.
    Report(ReportArgs),
    /// Run every stage from a manifest.
    Pipeline(PipelineArgs),
    /// Evaluate a pair of recorded retirement traces.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct TemplateArgs {
    /// Largest dependency distance of DL atoms.
    #[arg(long, default_value_t = 4)]
    max_distance: u8,
    /// Comma-separated leakage families, e.g. IL,RL,DL.
    #[arg(long, default_value = "IL,RL,ML,AL,BL,DL")]
    families: String,
}

impl TemplateArgs {
    fn config(&self) -> anyhow::Result<TemplateConfig> {
        let config =
            TemplateConfig { max_distance: self.max_distance, families: parse_families(&self.families)? };
        Template::build(&config)?;
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Prologue {
    RandomBitLength,
    Uniform,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    count: usize,
    #[command(flatten)]
    template: TemplateArgs,
    /// Only vary data values, never instruction structure.
    #[arg(long)]
    data_only: bool,
    #[arg(long, value_enum, default_value = "random-bit-length")]
    prologue: Prologue,
    /// Output file [default: <out-dir>/suite.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    suite: PathBuf,
    /// Preset name (ibex-like, cva6-like, no-leak) or configuration file.
    #[arg(long)]
    uarch: String,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_CYCLES)]
    max_cycles: u64,
    /// Output file [default: <out-dir>/results.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverName {
    Exact,
    Greedy,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, value_enum, default_value = "exact")]
    solver: SolverName,
    /// Branch-and-bound node budget of the exact solver.
    #[arg(long, default_value_t = DEFAULT_NODE_BUDGET)]
    node_budget: u64,
}

impl SolverArgs {
    fn solver(&self) -> Solver {
        match self.solver {
            SolverName::Exact => Solver::Exact { node_budget: self.node_budget },
            SolverName::Greedy => Solver::Greedy,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    results: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output file [default: <out-dir>/contract.json].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    contract: PathBuf,
    /// The training results the contract was synthesized from.
    #[arg(long)]
    results: PathBuf,
    /// Held-out results for generalization metrics and the curve.
    #[arg(long)]
    held_out: Option<PathBuf>,
    /// Solver for curve and ablation re-synthesis.
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long, default_value_t = 10)]
    curve_points: usize,
    /// Output directory [default: <out-dir>].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    manifest: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    trace_a: PathBuf,
    trace_b: PathBuf,
    #[command(flatten)]
    template: TemplateArgs,
    /// Test case id recorded in the verdict.
    #[arg(long, default_value_t = 0)]
    id: u64,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const ANALYSIS: u8 = 1;
const INPUT: u8 = 2;

fn input(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: INPUT, error: error.into() }
}

fn analysis(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: ANALYSIS, error: error.into() }
}

fn synth_code(e: &SynthError) -> u8 {
    match e {
        SynthError::InvalidProblem(_) => INPUT,
        SynthError::Infeasible(_) | SynthError::TooLarge(_) => ANALYSIS,
    }
}

fn classify(e: PipelineError) -> Failure {
    let code = match &e {
        PipelineError::Synth(s) | PipelineError::Report(ReportError::Synth(s)) => synth_code(s),
        PipelineError::Eval(EvalError::ThreadPool(_)) => ANALYSIS,
        _ => INPUT,
    };
    Failure { code, error: e.into() }
}

fn classify_report(e: ReportError) -> Failure {
    match e {
        ReportError::Synth(s) => Failure { code: synth_code(&s), error: s.into() },
        other => input(other),
    }
}

fn read<D: ctrsynth::trace_io::Document>(path: &Path) -> Result<(D, String), Failure> {
    read_document(path).map_err(|e: TraceIoError| input(anyhow!(e)))
}

fn write<D: ctrsynth::trace_io::Document>(doc: &D, path: &Path) -> Result<String, Failure> {
    let (text, digest) = ctrsynth::trace_io::to_json(doc).map_err(analysis)?;
    write_atomic(path, text.as_bytes()).map_err(input)?;
    Ok(digest)
}

fn gen(args: &GenArgs, out_dir: &Path) -> Result<(), Failure> {
    let template = args.template.config().map_err(input)?;
    let gen_config = GenConfig {
        data_only: args.data_only,
        prologue: match args.prologue {
            Prologue::RandomBitLength => ProloguePolicy::RandomBitLength,
            Prologue::Uniform => ProloguePolicy::Uniform,
        },
        ..GenConfig::default()
    };
    let suite = generate_suite(args.seed, &template, &gen_config, args.count).map_err(classify)?;
    let out = args.out.clone().unwrap_or_else(|| out_dir.join("suite.json"));
    let digest = write(&suite, &out)?;
    if !suite.ungeneratable.is_empty() {
        eprintln!(
            "{} template atoms have no generation strategy under this configuration",
            suite.ungeneratable.len()
        );
    }
    println!("{} cases -> {} ({digest})", suite.cases.len(), out.display());
    Ok(())
}

fn eval(args: &EvalArgs, out_dir: &Path) -> Result<(), Failure> {
    let uarch = UarchConfig::resolve(&args.uarch).map_err(input)?;
    let (suite, suite_digest) = read::<SuiteFile>(&args.suite)?;
    let results = evaluate_suite_file(&suite, &suite_digest, &uarch, args.max_cycles, args.parallelism)
        .map_err(classify)?;
    let out = args.out.clone().unwrap_or_else(|| out_dir.join("results.json"));
    let digest = write(&results, &out)?;
    let dist = results.results.iter().filter(|r| r.attacker_distinguishable && !r.truncated).count();
    let truncated = results.results.iter().filter(|r| r.truncated).count();
    println!(
        "{} cases: {dist} distinguishable, {truncated} truncated -> {} ({digest})",
        results.results.len(),
        out.display()
    );
    Ok(())
}

fn synth(args: &SynthArgs, out_dir: &Path) -> Result<(), Failure> {
    let (results, results_digest) = read::<ResultsFile>(&args.results)?;
    let contract = synthesize(&results, &results_digest, args.solver.solver()).map_err(classify)?;
    let out = args.out.clone().unwrap_or_else(|| out_dir.join("contract.json"));
    let digest = write(&contract, &out)?;
    let template = Template::build(&contract.template).map_err(input)?;
    let s = &contract.synthesis;
    println!(
        "{} atoms, {} false positives ({}) -> {} ({digest})",
        s.selected.len(),
        s.fp_count,
        if s.optimal { "optimal" } else { "best found within node budget" },
        out.display()
    );
    println!("Atom ranking (false positives caused on training data):");
    for r in &s.atom_ranking {
        println!("  {:<24} {}", template.id(r.atom), r.fp_tests.len());
    }
    if !contract.infeasible.is_empty() {
        return Err(analysis(anyhow!(
            "{} distinguishable cases have no distinguishing atom in the template: {:?}",
            contract.infeasible.len(),
            contract.infeasible
        )));
    }
    Ok(())
}

fn report(args: &ReportArgs, out_dir: &Path) -> Result<(), Failure> {
    let (contract, _) = read::<ContractFile>(&args.contract)?;
    let (train, _) = read::<ResultsFile>(&args.results)?;
    let held_out = match &args.held_out {
        Some(p) => Some(read::<ResultsFile>(p)?.0),
        None => None,
    };
    let options = ReportOptions { solver: args.solver.solver(), curve_points: args.curve_points };
    let report = build_report(&contract, &train, held_out.as_ref(), &options).map_err(classify_report)?;
    let dir = args.out.clone().unwrap_or_else(|| out_dir.to_path_buf());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display())).map_err(input)?;
    write_atomic(&dir.join("report.txt"), report.text.as_bytes()).map_err(input)?;
    if let Some(points) = &report.curve {
        write_atomic(&dir.join("curve.csv"), curve_csv(points).as_bytes()).map_err(input)?;
    }
    print!("{}", report.text);
    Ok(())
}

fn pipeline(args: &PipelineArgs) -> Result<(), Failure> {
    let manifest = RunManifest::load(&args.manifest).map_err(classify)?;
    let outcome = run_pipeline(&manifest).map_err(classify)?;
    for s in &outcome.stages {
        let status = match s.status {
            StageStatus::Computed => "computed",
            StageStatus::Reused => "reused",
        };
        println!("{:<20} {status:<8} {}", s.file, s.digest);
    }
    print!("\n{}", outcome.report);
    if !outcome.contract.infeasible.is_empty() {
        return Err(analysis(anyhow!(
            "{} distinguishable cases have no distinguishing atom in the template",
            outcome.contract.infeasible.len()
        )));
    }
    Ok(())
}

fn ingest(args: &IngestArgs) -> Result<(), Failure> {
    let template = Template::build(&args.template.config().map_err(input)?).map_err(input)?;
    let r = ingest_pair(args.id, &args.trace_a, &args.trace_b, &template).map_err(input)?;
    println!("testcase_id {:#x}", r.testcase_id);
    println!("attacker_distinguishable {}", r.attacker_distinguishable);
    println!("truncated {}", r.truncated);
    let atoms: Vec<String> = r.distinguishing_atoms.iter().map(|&a| template.id(a)).collect();
    println!("distinguishing_atoms {}", atoms.join(" "));
    if r.attacker_distinguishable && atoms.is_empty() && !r.truncated {
        eprintln!("attacker distinguishable without a distinguishing atom: the template misses this leak");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(a) => gen(a, &cli.out_dir),
        Command::Eval(a) => eval(a, &cli.out_dir),
        Command::Synth(a) => synth(a, &cli.out_dir),
        Command::Report(a) => report(a, &cli.out_dir),
        Command::Pipeline(a) => pipeline(a),
        Command::Ingest(a) => ingest(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
