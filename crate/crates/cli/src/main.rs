//! `leap`: generate networks, build measurement statistics, solve for FPC
//! parameters, run the FA-FPC baseline and score everything.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use leap_core::baseline::{best_fa_fpc, BaselineSweep};
use leap_core::evaluate::{
    evaluate_snapshot, gain_by_interferer_count, gain_table, gain_table_csv, groups_csv, EvaluationReport, PowerControlSolution,
    DEFAULT_DOMINANCE_THRESHOLD,
};
use leap_core::measurements::{build_statistics, MeasurementStatistics};
use leap_core::netmodel::{generate_snapshot, NetworkConfig, NetworkSnapshot};
use leap_core::optcore::{Constants, OptSettings, ProblemInstance};
use leap_core::pipeline::{artifact_root, run_pipeline, sha256_hex, sweep, write_atomic, RunConfig, Stage, SweepGrid};
use leap_core::solver_ce::{fit_gaussians, solve_ce, CeConfig};
use leap_core::solver_sl::{convergence_diagnostics, solve, SolverConfig};

#[derive(Parser)]
#[command(name = "leap", version, about = "Measurement-driven uplink fractional power control")]
struct Cli {
    /// Artifact root for `run` and `sweep` (default: $LEAP_ARTIFACT_ROOT or ./artifacts).
    #[arg(long, global = true)]
    artifact_root: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a network snapshot.
    Generate(GenerateArgs),
    /// Build measurement statistics from a snapshot.
    Measure(MeasureArgs),
    /// Solve for per-cell (P0, alpha, I*) from statistics.
    Solve(SolveArgs),
    /// Best FA-FPC baseline over a nominal-interference sweep.
    Baseline(BaselineArgs),
    /// Score a solution on a snapshot.
    Evaluate(EvaluateArgs),
    /// Gains of one report over another, grouped tables and CDF data.
    Report(ReportArgs),
    /// Run the pipeline over a grid of bin widths and IoT caps.
    Sweep(SweepArgs),
    /// Run the whole pipeline from a configuration file.
    Run(RunArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    area_km2: Option<f64>,
    #[arg(long)]
    macros: Option<usize>,
    #[arg(long)]
    picos: Option<usize>,
    /// Active UEs per km².
    #[arg(long)]
    density: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long, default_value = "snapshot.json")]
    out: PathBuf,
}

#[derive(Args)]
struct MeasureArgs {
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    bin_width_db: f64,
    #[arg(short, long, default_value = "statistics.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ConstantsArgs {
    #[arg(long)]
    n0_dbm_per_rb: Option<f64>,
    #[arg(long)]
    p_max_w_per_rb: Option<f64>,
    /// IoT cap in dB above the noise floor.
    #[arg(long)]
    iot_cap_db: Option<f64>,
    /// Decoding threshold in dB.
    #[arg(long)]
    gamma_min_db: Option<f64>,
}

impl ConstantsArgs {
    fn constants(&self, bin_width_db: f64) -> Result<Constants> {
        let d = OptSettings::default();
        let s = OptSettings {
            n0_dbm_per_rb: self.n0_dbm_per_rb.unwrap_or(d.n0_dbm_per_rb),
            p_max_w_per_rb: self.p_max_w_per_rb.unwrap_or(d.p_max_w_per_rb),
            iot_cap_db: self.iot_cap_db.unwrap_or(d.iot_cap_db),
            gamma_min_db: self.gamma_min_db.unwrap_or(d.gamma_min_db),
        };
        Ok(Constants::from_settings(&s, bin_width_db)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Sl,
    Ce,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    statistics: PathBuf,
    #[arg(long, value_enum, default_value = "sl")]
    algorithm: AlgorithmArg,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    zeta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    constants: ConstantsArgs,
    #[arg(short, long, default_value = "solution.json")]
    out: PathBuf,
    /// Solver trace (CSV).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Gaussian fit export, CE only.
    #[arg(long)]
    fit: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    statistics: PathBuf,
    /// Snapshot used to pick the best sweep point by median rate.
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    /// Nominal interference levels in dB above N0.
    #[arg(long, value_delimiter = ',', default_value = "5,10,15")]
    i_nominal_db: Vec<f64>,
    #[command(flatten)]
    constants: ConstantsArgs,
    #[arg(short, long, default_value = "solution_fa_fpc.json")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    solution: PathBuf,
    #[arg(long)]
    snapshot: PathBuf,
    /// Directory for `report_<provenance>_{ues,percentiles}.csv` and `.json`.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON written by `evaluate`.
    #[arg(long)]
    report: PathBuf,
    /// Reference report JSON (usually the baseline).
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    statistics: PathBuf,
    #[arg(long, default_value_t = DEFAULT_DOMINANCE_THRESHOLD)]
    dominance_threshold: f64,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Histogram bin widths in dB; defaults to the config's sweep section.
    #[arg(long, value_delimiter = ',')]
    bins: Vec<f64>,
    /// IoT caps in dB; defaults to the config's sweep section.
    #[arg(long, value_delimiter = ',')]
    caps: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Last stage to run.
    #[arg(long, default_value = "report", value_parser = parse_stage)]
    until: Stage,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    Stage::parse(s).ok_or_else(|| format!("unknown stage `{s}` (expected one of generate, measure, solve, baseline, evaluate, report)"))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn load_snapshot(path: &Path) -> Result<NetworkSnapshot> {
    NetworkSnapshot::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_statistics(path: &Path) -> Result<MeasurementStatistics> {
    MeasurementStatistics::from_json(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn load_report(path: &Path) -> Result<EvaluationReport> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let d = NetworkConfig::default();
    let cfg = NetworkConfig {
        area_km2: a.area_km2.unwrap_or(d.area_km2),
        macro_count: a.macros.unwrap_or(d.macro_count),
        pico_count: a.picos.unwrap_or(d.pico_count),
        density_per_km2: a.density.unwrap_or(d.density_per_km2),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let snap = generate_snapshot(&cfg)?;
    println!("{} cells, {} UEs, {} coverage holes", snap.cells.len(), snap.ues.len(), snap.coverage_holes);
    write(&a.out, &snap.to_json()?)
}

fn measure(a: MeasureArgs) -> Result<()> {
    let stats = build_statistics(&load_snapshot(&a.snapshot)?, a.bin_width_db)?;
    let edges: usize = stats.graph.edges.values().map(|s| s.len()).sum();
    println!("{} active cells, {} interferer edges, {} empty cells", stats.serving.len(), edges, stats.empty_cells.len());
    write(&a.out, &stats.to_json()?)
}

fn solve_cmd(a: SolveArgs) -> Result<()> {
    let stats = load_statistics(&a.statistics)?;
    let constants = a.constants.constants(stats.bin_width_db)?;
    let inst = ProblemInstance::from_statistics(&stats, constants)?;
    match a.algorithm {
        AlgorithmArg::Sl => {
            let d = SolverConfig::default();
            let cfg = SolverConfig {
                iterations: a.iterations.unwrap_or(d.iterations),
                zeta: a.zeta.unwrap_or(d.zeta),
                seed: a.seed.unwrap_or(d.seed),
                ..d
            };
            let out = solve(&inst, &cfg)?;
            let verdict = convergence_diagnostics(&out.trace);
            println!("objective {:.6}, converged: {}", out.solution.objective.unwrap_or(f64::NAN), verdict.converged);
            for r in &verdict.reasons {
                println!("  {r}");
            }
            if let Some(p) = &a.trace {
                write(p, &out.trace.to_csv())?;
            }
            write(&a.out, &out.solution.to_json()?)
        }
        AlgorithmArg::Ce => {
            if a.iterations.is_some() || a.zeta.is_some() || a.seed.is_some() {
                bail!("--iterations, --zeta and --seed apply to the stochastic solver only");
            }
            let fit = fit_gaussians(&stats);
            let out = solve_ce(&inst, &fit, &CeConfig::default())?;
            println!(
                "objective {:.6}, KKT residual {:.2e}, {} degenerate fits",
                out.solution.objective.unwrap_or(f64::NAN),
                out.kkt_residual,
                fit.degenerate_count()
            );
            if let Some(p) = &a.fit {
                write(p, &fit.to_json()?)?;
            }
            if let Some(p) = &a.trace {
                write(p, &out.trace.to_csv())?;
            }
            write(&a.out, &out.solution.to_json()?)
        }
    }
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let stats = load_statistics(&a.statistics)?;
    let snap = load_snapshot(&a.snapshot)?;
    let constants = a.constants.constants(stats.bin_width_db)?;
    let sweep = BaselineSweep { alpha: a.alpha, i_nominal_db: a.i_nominal_db };
    let best = best_fa_fpc(&stats, &sweep, &constants, |s| evaluate_snapshot(s, &snap))?;
    for (db, m) in &best.candidates {
        println!("I_nominal {db:>5} dB: median rate {m:.4} b/s/Hz");
    }
    let flagged = best.solution.cells.iter().filter(|c| c.flagged).count();
    println!("selected {} dB ({flagged} cells capped)", best.config.i_nominal_db_above_n0);
    write(&a.out, &best.solution.to_json()?)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let sol = PowerControlSolution::from_json(&read(&a.solution)?)?;
    let report = evaluate_snapshot(&sol, &load_snapshot(&a.snapshot)?)?;
    let tag = serde_json::to_value(report.provenance)?.as_str().unwrap_or("solution").to_string();
    for (q, v) in &report.percentiles {
        println!("p{q:<3} {v:.4} b/s/Hz");
    }
    write(&a.out_dir.join(format!("report_{tag}_ues.csv")), &report.ues_csv())?;
    write(&a.out_dir.join(format!("report_{tag}_percentiles.csv")), &report.percentiles_csv())?;
    write(&a.out_dir.join(format!("report_{tag}.json")), &serde_json::to_string(&report)?)
}

fn report(a: ReportArgs) -> Result<()> {
    let (r, reference) = (load_report(&a.report)?, load_report(&a.reference)?);
    let stats = load_statistics(&a.statistics)?;
    let gains = gain_table(&r, &reference);
    for (q, g) in &gains {
        println!("p{q:<3} gain {g:.3}x");
    }
    let groups = gain_by_interferer_count(&r, &reference, &stats, a.dominance_threshold)?;
    write(&a.out_dir.join("gains.csv"), &gain_table_csv(&gains))?;
    write(&a.out_dir.join("groups.csv"), &groups_csv(&groups))?;
    for rep in [&r, &reference] {
        let tag = serde_json::to_value(rep.provenance)?.as_str().unwrap_or("solution").to_string();
        write(&a.out_dir.join(format!("cdf_{tag}.csv")), &rep.cdf_csv())?;
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs, root: &Path) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let grid = SweepGrid {
        bin_width_db: if a.bins.is_empty() { cfg.sweep.bin_width_db.clone() } else { a.bins },
        iot_cap_db: if a.caps.is_empty() { cfg.sweep.iot_cap_db.clone() } else { a.caps },
    };
    let out = sweep(&cfg, &grid, root, a.jobs)?;
    print!("{}", leap_core::pipeline::sweep_csv(&out.rows));
    println!("table: {}", out.dir.join("sweep.csv").display());
    Ok(())
}

fn run_cmd(a: RunArgs, root: &Path) -> Result<()> {
    let text = read(&a.config)?;
    let cfg = RunConfig::from_toml_str(&text).with_context(|| format!("in {}", a.config.display()))?;
    let inputs = BTreeMap::from([(a.config.display().to_string(), sha256_hex(text.as_bytes()))]);
    let out = run_pipeline(&cfg, inputs, root, a.until)?;
    for (stage, t) in &out.manifest.timings {
        println!("{stage:<9} {:>8.2}s{}", t.seconds, if t.cache_hit { "  (cached)" } else { "" });
    }
    if let Some(s) = &out.summary {
        println!(
            "median rate {:.4} vs baseline {:.4} (I_nominal {} dB): gain {:.3}x",
            s.median_rate,
            s.baseline_median_rate,
            s.baseline.i_nominal_db_above_n0,
            s.gain(50.0).unwrap_or(f64::NAN)
        );
    }
    println!("artifacts: {}", out.run_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let root = cli.artifact_root.unwrap_or_else(artifact_root);
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Measure(a) => measure(a),
        Command::Solve(a) => solve_cmd(a),
        Command::Baseline(a) => baseline(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
        Command::Sweep(a) => sweep_cmd(a, &root),
        Command::Run(a) => run_cmd(a, &root),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
