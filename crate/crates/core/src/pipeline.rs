//! Batch pipeline: generate -> measure -> solve -> baseline -> evaluate ->
//! report, driven by one TOML run configuration.
//!
//! Every stage output lives in a content-addressed store under the artifact
//! root, keyed by a hash of the stage name, its parameters, the hashes of its
//! input files and the tool version. A stage whose key is present and whose
//! files still hash to the recorded values is skipped. The files of a run are
//! then copied into `runs/<config hash>/` next to a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baseline::{best_fa_fpc, BaselineError, BaselineSweep, FaFpcConfig};
use crate::evaluate::{
    evaluate_snapshot, gain_by_interferer_count, gain_table, gain_table_csv, groups_csv, EvaluateError, EvaluationReport,
    PowerControlSolution, DEFAULT_DOMINANCE_THRESHOLD,
};
use crate::measurements::{build_statistics, MeasurementError, MeasurementStatistics, DEFAULT_BIN_WIDTH_DB};
use crate::netmodel::{generate_snapshot, NetModelError, NetworkConfig, NetworkSnapshot};
use crate::optcore::{Constants, OptError, OptSettings, ProblemInstance};
use crate::solver_ce::{fit_gaussians, solve_ce, CeConfig};
use crate::solver_sl::{convergence_diagnostics, solve, SolverConfig, SolverError, Verdict};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const ARTIFACT_ROOT_ENV: &str = "LEAP_ARTIFACT_ROOT";
pub const DEFAULT_ARTIFACT_ROOT: &str = "artifacts";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("invalid run configuration: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("stage {stage} failed: {source}")]
    Stage { stage: Stage, source: Box<PipelineError> },
    #[error("artifact {0} is missing or corrupt")]
    Artifact(String),
    #[error(transparent)]
    NetModel(#[from] NetModelError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Sl,
    Ce,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sl => "sl",
            Algorithm::Ce => "ce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementSection {
    pub bin_width_db: f64,
}

impl Default for MeasurementSection {
    fn default() -> Self {
        Self { bin_width_db: DEFAULT_BIN_WIDTH_DB }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub zeta: f64,
    /// Defaults to the global seed.
    pub seed: Option<u64>,
    pub step_scale: f64,
    pub diagnostics_every: usize,
    pub mc_samples_diag: usize,
    pub polish: bool,
    pub polish_mc_samples: usize,
    pub ce: CeConfig,
}

impl Default for SolverSection {
    fn default() -> Self {
        let sl = SolverConfig::default();
        Self {
            algorithm: Algorithm::Sl,
            iterations: sl.iterations,
            zeta: sl.zeta,
            seed: None,
            step_scale: sl.step_scale,
            diagnostics_every: sl.diagnostics_every,
            mc_samples_diag: sl.mc_samples_diag,
            polish: sl.polish,
            polish_mc_samples: sl.polish_mc_samples,
            ce: CeConfig::default(),
        }
    }
}

impl SolverSection {
    pub fn sl_config(&self, global_seed: u64) -> SolverConfig {
        SolverConfig {
            iterations: self.iterations,
            zeta: self.zeta,
            seed: self.seed.unwrap_or(global_seed),
            step_scale: self.step_scale,
            diagnostics_every: self.diagnostics_every,
            mc_samples_diag: self.mc_samples_diag,
            polish: self.polish,
            polish_mc_samples: self.polish_mc_samples,
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub dominance_threshold: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { dominance_threshold: DEFAULT_DOMINANCE_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub bin_width_db: Vec<f64>,
    pub iot_cap_db: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed; the network and solver seeds default to it.
    pub seed: u64,
    pub network: NetworkConfig,
    pub measurements: MeasurementSection,
    pub optimization: OptSettings,
    pub solver: SolverSection,
    pub baseline: BaselineSweep,
    pub evaluation: EvaluationSection,
    pub sweep: SweepGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        let network = NetworkConfig::default();
        Self {
            seed: network.seed,
            network,
            measurements: MeasurementSection::default(),
            optimization: OptSettings::default(),
            solver: SolverSection::default(),
            baseline: BaselineSweep::default(),
            evaluation: EvaluationSection::default(),
            sweep: SweepGrid::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document. Unknown keys are rejected with
    /// their location.
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        let table: toml::Table = toml::from_str(text)?;
        let network_seed = table.get("network").and_then(|n| n.get("seed")).is_some();
        if !network_seed {
            cfg.network.seed = cfg.seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("run configuration serialises")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.network.validate()?;
        if !(self.measurements.bin_width_db > 0.0) {
            return Err(PipelineError::Config(format!("measurements.bin_width_db must be positive, got {}", self.measurements.bin_width_db)));
        }
        self.constants()?;
        self.solver.sl_config(self.seed).validate()?;
        for c in self.baseline.configs() {
            c.validate()?;
        }
        if self.baseline.i_nominal_db.is_empty() {
            return Err(PipelineError::Baseline(BaselineError::EmptySweep));
        }
        if !(0.0..=1.0).contains(&self.evaluation.dominance_threshold) {
            return Err(PipelineError::Config("evaluation.dominance_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn constants(&self) -> Result<Constants, PipelineError> {
        Ok(Constants::from_settings(&self.optimization, self.measurements.bin_width_db)?)
    }

    /// SHA-256 of the canonical serialisation of the resolved configuration.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("run configuration serialises").as_bytes())
    }
}

/// Artifact root from [`ARTIFACT_ROOT_ENV`], falling back to `./artifacts`.
pub fn artifact_root() -> PathBuf {
    std::env::var_os(ARTIFACT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ARTIFACT_ROOT))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

// ---------------------------------------------------------------------------
// Stage store

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Measure,
    Solve,
    Baseline,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Generate, Stage::Measure, Stage::Solve, Stage::Baseline, Stage::Evaluate, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Measure => "measure",
            Stage::Solve => "solve",
            Stage::Baseline => "baseline",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StageRecord {
    stage: Stage,
    key: String,
    files: Vec<FileRecord>,
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e.error })?;
    Ok(())
}

struct Store {
    root: PathBuf,
}

impl Store {
    fn dir(&self, stage: Stage, key: &str) -> PathBuf {
        self.root.join("store").join(format!("{}-{}", stage.name(), &key[..16]))
    }

    /// Files of a completed stage whose contents still match their record.
    fn lookup(&self, stage: Stage, key: &str) -> Option<(PathBuf, Vec<FileRecord>)> {
        let dir = self.dir(stage, key);
        let rec: StageRecord = serde_json::from_slice(&fs::read(dir.join("stage.json")).ok()?).ok()?;
        if rec.key != key {
            return None;
        }
        for f in &rec.files {
            if sha256_hex(&fs::read(dir.join(&f.name)).ok()?) != f.sha256 {
                return None;
            }
        }
        Some((dir, rec.files))
    }

    /// Publishes `outputs` under the stage key. Concurrent writers of the
    /// same key produce identical bytes, so losing the rename race is fine.
    fn publish(&self, stage: Stage, key: &str, outputs: Vec<(String, Vec<u8>)>) -> Result<(PathBuf, Vec<FileRecord>), PipelineError> {
        let dest = self.dir(stage, key);
        let parent = dest.parent().expect("store dir has a parent").to_path_buf();
        fs::create_dir_all(&parent).map_err(io_err(&parent))?;
        let tmp = tempfile::Builder::new().prefix(".partial-").tempdir_in(&parent).map_err(io_err(&parent))?;
        let mut files = Vec::new();
        for (name, bytes) in &outputs {
            let p = tmp.path().join(name);
            fs::write(&p, bytes).map_err(io_err(&p))?;
            files.push(FileRecord { name: name.clone(), sha256: sha256_hex(bytes) });
        }
        let rec = StageRecord { stage, key: key.to_string(), files: files.clone() };
        let p = tmp.path().join("stage.json");
        fs::write(&p, serde_json::to_vec_pretty(&rec)?).map_err(io_err(&p))?;
        if dest.exists() {
            fs::remove_dir_all(&dest).map_err(io_err(&dest))?;
        }
        let tmp_path = tmp.keep();
        if let Err(e) = fs::rename(&tmp_path, &dest) {
            let _ = fs::remove_dir_all(&tmp_path);
            if self.lookup(stage, key).is_none() {
                return Err(PipelineError::Io { path: dest, source: e });
            }
        }
        Ok((dest, files))
    }
}

/// A completed stage: where its files are and what they hash to.
#[derive(Debug, Clone)]
struct StageOutput {
    dir: PathBuf,
    files: Vec<FileRecord>,
}

impl StageOutput {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn hash(&self, name: &str) -> Result<&str, PipelineError> {
        self.files.iter().find(|f| f.name == name).map(|f| f.sha256.as_str()).ok_or_else(|| PipelineError::Artifact(name.into()))
    }

    fn read(&self, name: &str) -> Result<String, PipelineError> {
        let p = self.path(name);
        fs::read_to_string(&p).map_err(io_err(&p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub seconds: f64,
    pub cache_hit: bool,
}

struct Runner<'a> {
    store: Store,
    config: &'a RunConfig,
    timings: BTreeMap<Stage, StageTiming>,
    keys: BTreeMap<Stage, String>,
}

impl Runner<'_> {
    fn stage<F>(&mut self, stage: Stage, params: serde_json::Value, inputs: &[(&str, &str)], compute: F) -> Result<StageOutput, PipelineError>
    where
        F: FnOnce() -> Result<Vec<(String, Vec<u8>)>, PipelineError>,
    {
        let start = Instant::now();
        let key_doc = serde_json::json!({ "stage": stage, "version": TOOL_VERSION, "params": params, "inputs": inputs });
        let key = sha256_hex(key_doc.to_string().as_bytes());
        self.keys.insert(stage, key.clone());
        let (dir, files, cache_hit) = match self.store.lookup(stage, &key) {
            Some((dir, files)) => (dir, files, true),
            None => {
                log::info!("stage {stage}: computing");
                let outputs = compute().map_err(|e| PipelineError::Stage { stage, source: Box::new(e) })?;
                let (dir, files) = self.store.publish(stage, &key, outputs)?;
                (dir, files, false)
            }
        };
        if cache_hit {
            log::info!("stage {stage}: cache hit");
        }
        self.timings.insert(stage, StageTiming { seconds: start.elapsed().as_secs_f64(), cache_hit });
        Ok(StageOutput { dir, files })
    }
}

fn json_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("parameters serialise")
}

// ---------------------------------------------------------------------------
// Run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub objective: Option<f64>,
    pub baseline: FaFpcConfig,
    /// `(I_nominal dB, median rate)` of every baseline candidate.
    pub baseline_candidates: Vec<(f64, f64)>,
    pub median_rate: f64,
    pub baseline_median_rate: f64,
    /// `(percentile, gain)` against the best baseline.
    pub gains: Vec<(f64, f64)>,
    pub convergence: Option<Verdict>,
    pub flagged_baseline_cells: usize,
    pub degenerate_fits: Option<usize>,
}

impl RunSummary {
    pub fn gain(&self, q: f64) -> Option<f64> {
        self.gains.iter().find(|(p, _)| *p == q).map(|&(_, g)| g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed { stage: Option<Stage>, error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    /// Hashes of the files the run was started from.
    pub inputs: BTreeMap<String, String>,
    pub stage_keys: BTreeMap<Stage, String>,
    /// Files of the run directory, by name.
    pub artifacts: Vec<FileRecord>,
    #[serde(flatten)]
    pub status: RunStatus,
    /// Wall-clock time and cache outcome per stage.
    pub timings: BTreeMap<Stage, StageTiming>,
}

impl RunManifest {
    /// The manifest with the timings cleared, for comparing runs.
    pub fn without_timings(&self) -> Self {
        Self { timings: BTreeMap::new(), ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub summary: Option<RunSummary>,
}

/// Runs every stage up to and including `until` and collects the artifacts
/// in `<root>/runs/<config hash>/`. On failure the manifest names the stage
/// and the partial artifacts stay in place.
pub fn run_pipeline(config: &RunConfig, inputs: BTreeMap<String, String>, root: &Path, until: Stage) -> Result<RunOutcome, PipelineError> {
    config.validate()?;
    let config_hash = config.hash();
    let run_dir = root.join("runs").join(&config_hash[..16]);
    let mut runner = Runner { store: Store { root: root.to_path_buf() }, config, timings: BTreeMap::new(), keys: BTreeMap::new() };
    let mut artifacts: Vec<(String, PathBuf)> = Vec::new();
    let result = run_stages(&mut runner, until, &mut artifacts);

    fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;
    let mut records = Vec::new();
    for (name, src) in &artifacts {
        let bytes = fs::read(src).map_err(io_err(src))?;
        write_atomic(&run_dir.join(name), &bytes)?;
        records.push(FileRecord { name: name.clone(), sha256: sha256_hex(&bytes) });
    }
    write_atomic(&run_dir.join("config.toml"), config.to_toml_string().as_bytes())?;
    let status = match &result {
        Ok(_) => RunStatus::Complete,
        Err(PipelineError::Stage { stage, source }) => RunStatus::Failed { stage: Some(*stage), error: source.to_string() },
        Err(e) => RunStatus::Failed { stage: None, error: e.to_string() },
    };
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config_hash,
        inputs,
        stage_keys: runner.keys.clone(),
        artifacts: records,
        status,
        timings: runner.timings.clone(),
    };
    write_atomic(&run_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    let summary = result?;
    Ok(RunOutcome { run_dir, manifest, summary })
}

fn run_stages(r: &mut Runner<'_>, until: Stage, artifacts: &mut Vec<(String, PathBuf)>) -> Result<Option<RunSummary>, PipelineError> {
    let cfg = r.config;
    let keep = |out: &StageOutput, artifacts: &mut Vec<(String, PathBuf)>| {
        for f in &out.files {
            artifacts.push((f.name.clone(), out.path(&f.name)));
        }
    };

    let gen = r.stage(Stage::Generate, json_value(&cfg.network), &[], || {
        Ok(vec![("snapshot.json".into(), generate_snapshot(&cfg.network)?.to_json()?.into_bytes())])
    })?;
    keep(&gen, artifacts);
    if until == Stage::Generate {
        return Ok(None);
    }
    let snap_hash = gen.hash("snapshot.json")?.to_string();
    let load_snapshot = || -> Result<NetworkSnapshot, PipelineError> { Ok(NetworkSnapshot::from_json(&gen.read("snapshot.json")?)?) };

    let meas = r.stage(Stage::Measure, json_value(&cfg.measurements), &[("snapshot.json", &snap_hash)], || {
        let stats = build_statistics(&load_snapshot()?, cfg.measurements.bin_width_db)?;
        Ok(vec![("statistics.json".into(), stats.to_json()?.into_bytes())])
    })?;
    keep(&meas, artifacts);
    if until == Stage::Measure {
        return Ok(None);
    }
    let stats_hash = meas.hash("statistics.json")?.to_string();
    let load_stats = || -> Result<MeasurementStatistics, PipelineError> { Ok(MeasurementStatistics::from_json(&meas.read("statistics.json")?)?) };
    let constants = cfg.constants()?;

    let alg = cfg.solver.algorithm;
    let solution_name = format!("solution_{}.json", alg.name());
    let solver_params = serde_json::json!({
        "optimization": cfg.optimization,
        "bin_width_db": cfg.measurements.bin_width_db,
        "algorithm": alg,
        "sl": if alg == Algorithm::Sl { json_value(&cfg.solver.sl_config(cfg.seed)) } else { serde_json::Value::Null },
        "ce": if alg == Algorithm::Ce { json_value(&cfg.solver.ce) } else { serde_json::Value::Null },
    });
    let solved = r.stage(Stage::Solve, solver_params, &[("statistics.json", &stats_hash)], || {
        let stats = load_stats()?;
        let inst = ProblemInstance::from_statistics(&stats, constants)?;
        let mut out = Vec::new();
        match alg {
            Algorithm::Sl => {
                let res = solve(&inst, &cfg.solver.sl_config(cfg.seed))?;
                let verdict = convergence_diagnostics(&res.trace);
                if !verdict.converged {
                    log::warn!("IoTC-SL convergence diagnostics failed: {}", verdict.reasons.join("; "));
                }
                out.push((solution_name.clone(), res.solution.to_json()?.into_bytes()));
                out.push(("trace_sl.csv".into(), res.trace.to_csv().into_bytes()));
                out.push(("convergence_sl.json".into(), serde_json::to_vec_pretty(&verdict)?));
            }
            Algorithm::Ce => {
                let fit = fit_gaussians(&stats);
                let res = solve_ce(&inst, &fit, &cfg.solver.ce)?;
                out.push((solution_name.clone(), res.solution.to_json()?.into_bytes()));
                out.push(("fit.json".into(), fit.to_json()?.into_bytes()));
                out.push(("trace_ce.csv".into(), res.trace.to_csv().into_bytes()));
            }
        }
        Ok(out)
    })?;
    keep(&solved, artifacts);
    if until == Stage::Solve {
        return Ok(None);
    }

    let base_params = serde_json::json!({ "optimization": cfg.optimization, "bin_width_db": cfg.measurements.bin_width_db, "sweep": cfg.baseline });
    let base = r.stage(Stage::Baseline, base_params, &[("snapshot.json", &snap_hash), ("statistics.json", &stats_hash)], || {
        let (snap, stats) = (load_snapshot()?, load_stats()?);
        let best = best_fa_fpc(&stats, &cfg.baseline, &constants, |s| evaluate_snapshot(s, &snap))?;
        let mut csv = String::from("i_nominal_db_above_n0,median_rate,selected\n");
        for &(db, m) in &best.candidates {
            csv.push_str(&format!("{db},{m:.9},{}\n", db == best.config.i_nominal_db_above_n0));
        }
        Ok(vec![
            ("solution_fa_fpc.json".into(), best.solution.to_json()?.into_bytes()),
            ("baseline_candidates.csv".into(), csv.into_bytes()),
            ("baseline_selection.json".into(), serde_json::to_vec_pretty(&best.config)?),
        ])
    })?;
    keep(&base, artifacts);
    if until == Stage::Baseline {
        return Ok(None);
    }

    let leap_hash = solved.hash(&solution_name)?.to_string();
    let base_hash = base.hash("solution_fa_fpc.json")?.to_string();
    let eval = r.stage(
        Stage::Evaluate,
        serde_json::Value::Null,
        &[("snapshot.json", &snap_hash), ("solution", &leap_hash), ("solution_fa_fpc.json", &base_hash)],
        || {
            let snap = load_snapshot()?;
            let mut out = Vec::new();
            for (tag, sol) in [(alg.name(), solved.read(&solution_name)?), ("fa_fpc", base.read("solution_fa_fpc.json")?)] {
                let report = evaluate_snapshot(&PowerControlSolution::from_json(&sol)?, &snap)?;
                out.push((format!("report_{tag}_ues.csv"), report.ues_csv().into_bytes()));
                out.push((format!("report_{tag}_percentiles.csv"), report.percentiles_csv().into_bytes()));
                out.push((format!("report_{tag}.json"), serde_json::to_vec(&report)?));
            }
            Ok(out)
        },
    )?;
    keep(&eval, artifacts);
    if until == Stage::Evaluate {
        return Ok(None);
    }

    let leap_report = format!("report_{}.json", alg.name());
    let inputs = [
        ("statistics.json", stats_hash.clone()),
        ("report", eval.hash(&leap_report)?.to_string()),
        ("report_fa_fpc.json", eval.hash("report_fa_fpc.json")?.to_string()),
        ("solution", leap_hash.clone()),
        ("baseline_selection.json", base.hash("baseline_selection.json")?.to_string()),
    ];
    let input_refs: Vec<(&str, &str)> = inputs.iter().map(|(a, b)| (*a, b.as_str())).collect();
    let report = r.stage(Stage::Report, json_value(&cfg.evaluation), &input_refs, || {
        let a: EvaluationReport = serde_json::from_str(&eval.read(&leap_report)?)?;
        let b: EvaluationReport = serde_json::from_str(&eval.read("report_fa_fpc.json")?)?;
        let stats = load_stats()?;
        let gains = gain_table(&a, &b);
        let groups = gain_by_interferer_count(&a, &b, &stats, cfg.evaluation.dominance_threshold)?;
        let leap = PowerControlSolution::from_json(&solved.read(&solution_name)?)?;
        let fa = PowerControlSolution::from_json(&base.read("solution_fa_fpc.json")?)?;
        let convergence = match alg {
            Algorithm::Sl => Some(serde_json::from_str(&solved.read("convergence_sl.json")?)?),
            Algorithm::Ce => None,
        };
        let degenerate_fits = match alg {
            Algorithm::Sl => None,
            Algorithm::Ce => Some(fit_gaussians(&stats).degenerate_count()),
        };
        let candidates = base.read("baseline_candidates.csv")?;
        let summary = RunSummary {
            algorithm: alg,
            objective: leap.objective,
            baseline: serde_json::from_str(&base.read("baseline_selection.json")?)?,
            baseline_candidates: candidates
                .lines()
                .skip(1)
                .filter_map(|l| {
                    let mut it = l.split(',');
                    Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
                })
                .collect(),
            median_rate: a.median(),
            baseline_median_rate: b.median(),
            gains: gains.clone(),
            convergence,
            flagged_baseline_cells: fa.cells.iter().filter(|c| c.flagged).count(),
            degenerate_fits,
        };
        Ok(vec![
            ("gains.csv".into(), gain_table_csv(&gains).into_bytes()),
            ("groups.csv".into(), groups_csv(&groups).into_bytes()),
            (format!("cdf_{}.csv", alg.name()), a.cdf_csv().into_bytes()),
            ("cdf_fa_fpc.csv".into(), b.cdf_csv().into_bytes()),
            ("summary.json".into(), serde_json::to_vec_pretty(&summary)?),
        ])
    })?;
    keep(&report, artifacts);
    Ok(Some(serde_json::from_str(&report.read("summary.json")?)?))
}

// ---------------------------------------------------------------------------
// Sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub bin_width_db: f64,
    pub iot_cap_db: f64,
    pub median_rate: f64,
    pub baseline_median_rate: f64,
    pub median_gain: f64,
    pub p20_gain: f64,
    pub run: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub dir: PathBuf,
    pub rows: Vec<SweepRow>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("bin_width_db,iot_cap_db,median_rate,baseline_median_rate,median_gain,p20_gain,run\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.9},{:.9},{:.9},{:.9},{}\n",
            r.bin_width_db, r.iot_cap_db, r.median_rate, r.baseline_median_rate, r.median_gain, r.p20_gain, r.run
        ));
    }
    s
}

/// Runs the Cartesian product of `grid` (an empty axis keeps the configured
/// value) on the shared snapshot, up to `jobs` grid points at a time.
pub fn sweep(config: &RunConfig, grid: &SweepGrid, root: &Path, jobs: usize) -> Result<SweepOutcome, PipelineError> {
    if grid.bin_width_db.is_empty() && grid.iot_cap_db.is_empty() {
        return Err(PipelineError::Config("sweep grid is empty: give bin widths and/or IoT caps".into()));
    }
    let bins = if grid.bin_width_db.is_empty() { vec![config.measurements.bin_width_db] } else { grid.bin_width_db.clone() };
    let caps = if grid.iot_cap_db.is_empty() { vec![config.optimization.iot_cap_db] } else { grid.iot_cap_db.clone() };
    let mut points = Vec::new();
    for &b in &bins {
        for &c in &caps {
            let mut p = config.clone();
            p.measurements.bin_width_db = b;
            p.optimization.iot_cap_db = c;
            p.sweep = SweepGrid::default();
            p.validate()?;
            points.push(p);
        }
    }
    // The snapshot is shared; build it once before fanning out.
    run_pipeline(&points[0], BTreeMap::new(), root, Stage::Generate)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Config(format!("cannot start {jobs} jobs: {e}")))?;
    let outcomes: Vec<Result<RunOutcome, PipelineError>> =
        pool.install(|| points.par_iter().map(|p| run_pipeline(p, BTreeMap::new(), root, Stage::Report)).collect());
    let mut rows = Vec::new();
    for (p, o) in points.iter().zip(outcomes) {
        let o = o?;
        let s = o.summary.ok_or_else(|| PipelineError::Artifact("summary.json".into()))?;
        rows.push(SweepRow {
            bin_width_db: p.measurements.bin_width_db,
            iot_cap_db: p.optimization.iot_cap_db,
            median_rate: s.median_rate,
            baseline_median_rate: s.baseline_median_rate,
            median_gain: s.gain(50.0).unwrap_or(f64::NAN),
            p20_gain: s.gain(20.0).unwrap_or(f64::NAN),
            run: o.run_dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        });
    }
    let grid_hash = sha256_hex(serde_json::to_string(&(config, &bins, &caps))?.as_bytes());
    let dir = root.join("sweeps").join(&grid_hash[..16]);
    write_atomic(&dir.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    Ok(SweepOutcome { dir, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.network = NetworkConfig { area_km2: 0.5, macro_count: 4, pico_count: 1, density_per_km2: 200.0, seed: 5, ..Default::default() };
        c.seed = 5;
        c.solver.iterations = 300;
        c.solver.diagnostics_every = 100;
        c.solver.mc_samples_diag = 100;
        c.solver.polish_mc_samples = 500;
        c
    }

    #[test]
    fn shipped_config_is_the_default() {
        let cfg = RunConfig::from_toml_str(include_str!("../../../configs/default.toml")).unwrap();
        assert_eq!(RunConfig { sweep: SweepGrid::default(), ..cfg.clone() }, RunConfig::default());
        assert_eq!(cfg.sweep.bin_width_db.len(), 6);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::from_toml_str("seed = 1\n[measurements]\nbin_sise_db = 2.0\n").unwrap_err().to_string();
        assert!(err.contains("bin_sise_db") && err.contains("line 3"), "{err}");
        assert!(RunConfig::from_toml_str("[solver]\nalgorithm = \"magic\"\n").is_err());
        assert!(RunConfig::from_toml_str("[measurements]\nbin_width_db = -1.0\n").is_err());
    }

    #[test]
    fn seeds_default_to_the_global_seed() {
        let c = RunConfig::from_toml_str("seed = 42\n").unwrap();
        assert_eq!(c.network.seed, 42);
        assert_eq!(c.solver.sl_config(c.seed).seed, 42);
        let c = RunConfig::from_toml_str("seed = 42\n[network]\nseed = 3\n[solver]\nseed = 4\n").unwrap();
        assert_eq!((c.network.seed, c.solver.sl_config(c.seed).seed), (3, 4));
        let round = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn rerun_hits_the_cache_and_deleted_artifacts_come_back_identical() {
        let root = tempfile::tempdir().unwrap();
        let cfg = small();
        let first = run_pipeline(&cfg, BTreeMap::new(), root.path(), Stage::Report).unwrap();
        assert_eq!(first.manifest.status, RunStatus::Complete);
        assert!(first.manifest.timings.values().all(|t| !t.cache_hit));
        for f in ["snapshot.json", "statistics.json", "solution_sl.json", "solution_fa_fpc.json", "report_sl_ues.csv", "report_fa_fpc_ues.csv", "gains.csv", "groups.csv"] {
            assert!(first.run_dir.join(f).exists(), "{f}");
        }
        let second = run_pipeline(&cfg, BTreeMap::new(), root.path(), Stage::Report).unwrap();
        assert!(second.manifest.timings.values().all(|t| t.cache_hit));
        assert_eq!(second.manifest.without_timings(), first.manifest.without_timings());

        let stats_dir = root.path().join("store").join(format!("measure-{}", &first.manifest.stage_keys[&Stage::Measure][..16]));
        fs::remove_file(stats_dir.join("statistics.json")).unwrap();
        let third = run_pipeline(&cfg, BTreeMap::new(), root.path(), Stage::Report).unwrap();
        assert!(!third.manifest.timings[&Stage::Measure].cache_hit);
        assert!(third.manifest.timings[&Stage::Solve].cache_hit);
        assert_eq!(third.manifest.without_timings(), first.manifest.without_timings());
    }

    #[test]
    fn failing_stage_is_recorded() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.network.density_per_km2 = 0.0;
        let err = run_pipeline(&cfg, BTreeMap::new(), root.path(), Stage::Report).unwrap_err();
        assert!(matches!(err, PipelineError::Stage { stage: Stage::Measure, .. }), "{err}");
        let dir = root.path().join("runs").join(&cfg.hash()[..16]);
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        assert!(matches!(m.status, RunStatus::Failed { stage: Some(Stage::Measure), .. }));
        assert!(dir.join("snapshot.json").exists());
    }

    #[test]
    fn sweep_rows_and_empty_grid() {
        let root = tempfile::tempdir().unwrap();
        let cfg = small();
        assert!(matches!(sweep(&cfg, &SweepGrid::default(), root.path(), 1), Err(PipelineError::Config(_))));
        let grid = SweepGrid { bin_width_db: vec![1.0, 2.0], iot_cap_db: vec![] };
        let out = sweep(&cfg, &grid, root.path(), 2).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.rows.iter().map(|r| r.bin_width_db).collect::<Vec<_>>(), vec![1.0, 2.0]);
        let csv = fs::read_to_string(out.dir.join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn ce_runs_end_to_end() {
        let root = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.solver.algorithm = Algorithm::Ce;
        let out = run_pipeline(&cfg, BTreeMap::new(), root.path(), Stage::Report).unwrap();
        assert!(out.run_dir.join("fit.json").exists() && out.run_dir.join("solution_ce.json").exists());
        assert!(out.summary.unwrap().degenerate_fits.is_some());
    }
}
