//! End-to-end runs: generate, evaluate, synthesize and report.
//!
//! Every stage writes a document into the output directory. A rerun reuses a
//! stage file when it verifies and was produced from the same inputs, so an
//! interrupted run resumes where it stopped and a completed run reproduces
//! identical bytes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::{evaluate_suite, EvalError, DEFAULT_MAX_CYCLES};
use crate::report::{build_report, curve_csv, ReportError, ReportOptions};
use crate::synth::{build_problem, Solver, SolverKind, SynthError};
use crate::template::{Template, TemplateConfig, TemplateError};
use crate::testgen::{case_seed, gen_suite, GenConfig, TestgenError};
use crate::trace_io::{read_document, ContractFile, Document, ResultsFile, SuiteFile, TraceIoError};
use crate::uarch::{UarchConfig, UarchError};

pub const SUITE_TRAIN: &str = "suite_train.json";
pub const SUITE_HELD_OUT: &str = "suite_heldout.json";
pub const RESULTS_TRAIN: &str = "results_train.json";
pub const RESULTS_HELD_OUT: &str = "results_heldout.json";
pub const CONTRACT: &str = "contract.json";
pub const REPORT: &str = "report.txt";
pub const CURVE: &str = "curve.csv";
pub const DIGESTS: &str = "digests.txt";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Document(#[from] TraceIoError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Testgen(#[from] TestgenError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Uarch(#[from] UarchError),
    #[error("microarchitecture digest mismatch: manifest pins {expected}, configuration hashes to {found}")]
    UarchDigest { expected: String, found: String },
}

fn default_train_size() -> usize {
    10_000
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_parallelism() -> usize {
    1
}

fn default_max_cycles() -> u64 {
    DEFAULT_MAX_CYCLES
}

fn default_curve_points() -> usize {
    10
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    /// Zero disables held-out metrics and the curve.
    #[serde(default)]
    pub held_out_size: usize,
    /// Preset name or path to a pipeline configuration file.
    pub uarch: String,
    /// Optional pin on the resolved configuration, see [`uarch_digest`].
    #[serde(default)]
    pub uarch_digest: Option<String>,
    /// Relative paths are taken from the manifest's directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_max_cycles")]
    pub max_cycles: u64,
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
    #[serde(default)]
    pub template: TemplateConfig,
    #[serde(default)]
    pub generation: GenConfig,
    #[serde(default)]
    pub solver: Solver,
}

impl RunManifest {
    /// A manifest with defaults for everything but the seed and core.
    pub fn new(seed: u64, uarch: &str) -> Self {
        RunManifest {
            seed,
            train_size: default_train_size(),
            held_out_size: 0,
            uarch: uarch.to_string(),
            uarch_digest: None,
            out_dir: default_out_dir(),
            parallelism: default_parallelism(),
            max_cycles: default_max_cycles(),
            curve_points: default_curve_points(),
            template: TemplateConfig::default(),
            generation: GenConfig::default(),
            solver: Solver::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Loads a manifest and anchors its output directory and any relative
    /// configuration path at the manifest's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let fail = |message: String| PipelineError::Manifest { path: path.to_path_buf(), message };
        let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
        let mut manifest = Self::from_toml(&text).map_err(fail)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if manifest.out_dir.is_relative() {
            manifest.out_dir = base.join(&manifest.out_dir);
        }
        let local = base.join(&manifest.uarch);
        if crate::uarch::preset(&manifest.uarch).is_err() && local.is_file() {
            manifest.uarch = local.to_string_lossy().into_owned();
        }
        Ok(manifest)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Resolves the core and checks the pinned digest, if any.
    pub fn resolve_uarch(&self) -> Result<UarchConfig, PipelineError> {
        let config = UarchConfig::resolve(&self.uarch)?;
        let found = uarch_digest(&config);
        match &self.uarch_digest {
            Some(expected) if *expected != found => {
                Err(PipelineError::UarchDigest { expected: expected.clone(), found })
            }
            _ => Ok(config),
        }
    }

    pub fn held_out_seed(&self) -> u64 {
        held_out_seed(self.seed)
    }
}

/// Digest of a microarchitecture configuration's canonical TOML form.
pub fn uarch_digest(config: &UarchConfig) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(config.to_toml().as_bytes())))
}

/// Seed of the held-out suite; disjoint from every training case seed.
pub fn held_out_seed(seed: u64) -> u64 {
    case_seed(seed, u64::MAX)
}

pub fn generate_suite(
    seed: u64,
    template: &TemplateConfig,
    gen_config: &GenConfig,
    count: usize,
) -> Result<SuiteFile, PipelineError> {
    let built = Template::build(template)?;
    let suite = gen_suite(seed, &built, count, gen_config)?;
    Ok(SuiteFile {
        seed,
        template: template.clone(),
        gen_config: gen_config.clone(),
        cases: suite.cases,
        ungeneratable: suite.ungeneratable,
    })
}

pub fn evaluate_suite_file(
    suite: &SuiteFile,
    suite_digest: &str,
    uarch: &UarchConfig,
    max_cycles: u64,
    parallelism: usize,
) -> Result<ResultsFile, PipelineError> {
    let template = Template::build(&suite.template)?;
    let results =
        evaluate_suite(&suite.cases, uarch, &template, suite.gen_config.layout(), max_cycles, parallelism)?;
    Ok(ResultsFile {
        suite_digest: suite_digest.to_string(),
        uarch: uarch.clone(),
        template: suite.template.clone(),
        max_cycles,
        results,
    })
}

/// Synthesizes a contract from evaluation results. Distinguishable cases
/// without any distinguishing atom are recorded as infeasible and excluded.
pub fn synthesize(
    results: &ResultsFile,
    results_digest: &str,
    solver: Solver,
) -> Result<ContractFile, PipelineError> {
    let template = Template::build(&results.template)?;
    let problem = build_problem(&results.results, template.len());
    let synthesis = solver.solve(&problem)?;
    Ok(ContractFile {
        results_digest: results_digest.to_string(),
        template: results.template.clone(),
        synthesis,
        dist_count: problem.dist.len() as u64,
        indist_count: problem.indist.len() as u64,
        infeasible: problem.infeasible,
        truncated: problem.truncated,
    })
}

/// Whether a stage was computed or taken from an existing file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Computed,
    Reused,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageRecord {
    pub file: &'static str,
    pub digest: String,
    pub status: StageStatus,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub out_dir: PathBuf,
    pub stages: Vec<StageRecord>,
    pub contract: ContractFile,
    pub report: String,
}

impl PipelineOutcome {
    pub fn digest_of(&self, file: &str) -> Option<&str> {
        self.stages.iter().find(|s| s.file == file).map(|s| s.digest.as_str())
    }
}

/// Writes through a temporary file so an interrupted write never leaves a
/// partial stage file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let io = |e| PipelineError::Io { path: path.to_path_buf(), source: e };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

fn write_stage<D: Document>(doc: &D, path: &Path) -> Result<String, PipelineError> {
    let (text, digest) = crate::trace_io::to_json(doc)?;
    write_atomic(path, text.as_bytes())?;
    Ok(digest)
}

/// Reuses `file` if it verifies and `fits`, otherwise computes and writes it.
fn stage<D: Document>(
    stages: &mut Vec<StageRecord>,
    dir: &Path,
    file: &'static str,
    fits: impl Fn(&D) -> bool,
    compute: impl FnOnce() -> Result<D, PipelineError>,
) -> Result<(D, String), PipelineError> {
    let path = dir.join(file);
    if let Ok((doc, digest)) = read_document::<D>(&path) {
        if fits(&doc) {
            stages.push(StageRecord { file, digest: digest.clone(), status: StageStatus::Reused });
            return Ok((doc, digest));
        }
    }
    let doc = compute()?;
    let digest = write_stage(&doc, &path)?;
    stages.push(StageRecord { file, digest: digest.clone(), status: StageStatus::Computed });
    Ok((doc, digest))
}

fn solver_matches(solver: Solver, contract: &ContractFile) -> bool {
    let s = &contract.synthesis;
    match solver {
        Solver::Exact { node_budget } => s.solver == SolverKind::Exact && s.node_budget == Some(node_budget),
        Solver::Greedy => s.solver == SolverKind::Greedy,
    }
}

fn suite_stage(
    stages: &mut Vec<StageRecord>,
    manifest: &RunManifest,
    file: &'static str,
    seed: u64,
    count: usize,
) -> Result<(SuiteFile, String), PipelineError> {
    stage(
        stages,
        &manifest.out_dir,
        file,
        |s: &SuiteFile| {
            s.seed == seed
                && s.template == manifest.template
                && s.gen_config == manifest.generation
                && s.cases.len() == count
        },
        || generate_suite(seed, &manifest.template, &manifest.generation, count),
    )
}

fn results_stage(
    stages: &mut Vec<StageRecord>,
    manifest: &RunManifest,
    file: &'static str,
    uarch: &UarchConfig,
    suite: &(SuiteFile, String),
) -> Result<(ResultsFile, String), PipelineError> {
    stage(
        stages,
        &manifest.out_dir,
        file,
        |r: &ResultsFile| {
            r.suite_digest == suite.1
                && r.uarch == *uarch
                && r.template == suite.0.template
                && r.max_cycles == manifest.max_cycles
        },
        || evaluate_suite_file(&suite.0, &suite.1, uarch, manifest.max_cycles, manifest.parallelism),
    )
}

/// Runs every stage of `manifest`, reusing verified stage files.
pub fn run_pipeline(manifest: &RunManifest) -> Result<PipelineOutcome, PipelineError> {
    let uarch = manifest.resolve_uarch()?;
    let dir = &manifest.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io { path: dir.clone(), source: e })?;
    let mut stages = Vec::new();

    let train_suite = suite_stage(&mut stages, manifest, SUITE_TRAIN, manifest.seed, manifest.train_size)?;
    let train = results_stage(&mut stages, manifest, RESULTS_TRAIN, &uarch, &train_suite)?;
    let held_out = if manifest.held_out_size > 0 {
        let suite = suite_stage(
            &mut stages,
            manifest,
            SUITE_HELD_OUT,
            manifest.held_out_seed(),
            manifest.held_out_size,
        )?;
        Some(results_stage(&mut stages, manifest, RESULTS_HELD_OUT, &uarch, &suite)?.0)
    } else {
        None
    };
    let (contract, _) = stage(
        &mut stages,
        dir,
        CONTRACT,
        |c: &ContractFile| c.results_digest == train.1 && solver_matches(manifest.solver, c),
        || synthesize(&train.0, &train.1, manifest.solver),
    )?;

    let options = ReportOptions { solver: manifest.solver, curve_points: manifest.curve_points };
    let report = build_report(&contract, &train.0, held_out.as_ref(), &options)?;
    write_atomic(&dir.join(REPORT), report.text.as_bytes())?;
    let curve_path = dir.join(CURVE);
    match &report.curve {
        Some(points) => write_atomic(&curve_path, curve_csv(points).as_bytes())?,
        None if curve_path.exists() => std::fs::remove_file(&curve_path)
            .map_err(|e| PipelineError::Io { path: curve_path.clone(), source: e })?,
        None => {}
    }
    let mut listing = format!("uarch {}\n", uarch_digest(&uarch));
    for s in &stages {
        listing.push_str(&format!("{} {}\n", s.file, s.digest));
    }
    write_atomic(&dir.join(DIGESTS), listing.as_bytes())?;

    Ok(PipelineOutcome { out_dir: dir.clone(), stages, contract, report: report.text })
}
