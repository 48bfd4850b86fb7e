//! Python bindings: snapshots, statistics, both solvers, the FA-FPC
//! baseline, evaluation and the batch pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use leap_core::baseline::{best_fa_fpc as core_best_fa_fpc, fa_fpc_solution, BaselineSweep, FaFpcConfig};
use leap_core::evaluate::{self as ev, CellParameters, EvaluationReport, PowerControlSolution};
use leap_core::measurements::{build_statistics as core_build_statistics, MeasurementStatistics};
use leap_core::netmodel::{generate_snapshot as core_generate_snapshot, CellId, NetworkConfig, NetworkSnapshot};
use leap_core::optcore::{self, Constants, OptSettings, ProblemInstance};
use leap_core::pipeline::{self, RunConfig, Stage};
use leap_core::solver_ce::{self, CeConfig, EdgeFit};
use leap_core::solver_sl::{self, SolverConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Synthetic network snapshot: cells, UEs and their audible path losses.
#[pyclass(module = "leap", frozen)]
struct Snapshot {
    inner: NetworkSnapshot,
}

#[pymethods]
impl Snapshot {
    #[getter]
    fn num_cells(&self) -> usize {
        self.inner.cells.len()
    }

    #[getter]
    fn num_ues(&self) -> usize {
        self.inner.ues.len()
    }

    #[getter]
    fn coverage_holes(&self) -> usize {
        self.inner.coverage_holes
    }

    /// Serving-loss (dB) of every UE, in UE order.
    fn serving_losses_db(&self) -> Vec<f64> {
        self.inner.ues.iter().map(|u| u.serving_loss().db()).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: NetworkSnapshot::from_json(text).map_err(value_err)? })
    }

    fn content_hash(&self) -> PyResult<String> {
        self.inner.content_hash().map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("Snapshot(cells={}, ues={})", self.inner.cells.len(), self.inner.ues.len())
    }
}

#[pyfunction]
#[pyo3(signature = (area_km2=9.0, macros=115, picos=10, density=450.0, seed=7))]
fn generate_snapshot(area_km2: f64, macros: usize, picos: usize, density: f64, seed: u64) -> PyResult<Snapshot> {
    let cfg = NetworkConfig { area_km2, macro_count: macros, pico_count: picos, density_per_km2: density, seed, ..Default::default() };
    Ok(Snapshot { inner: core_generate_snapshot(&cfg).map_err(value_err)? })
}

/// Histograms, interferer graph, occupancies and loads.
#[pyclass(module = "leap", frozen)]
struct Statistics {
    inner: MeasurementStatistics,
}

#[pymethods]
impl Statistics {
    #[getter]
    fn bin_width_db(&self) -> f64 {
        self.inner.bin_width_db
    }

    #[getter]
    fn num_cells(&self) -> usize {
        self.inner.serving.len()
    }

    /// `(interferer, interfered, occupancy)` for every edge of the graph.
    fn edges(&self) -> Vec<(u32, u32, f64)> {
        self.inner.graph.occupancy.iter().map(|(&(e, c), &a)| (e.0, c.0, a)).collect()
    }

    /// `(midpoint dB, probability)` of a cell's serving-loss histogram.
    fn serving_histogram(&self, cell: u32) -> PyResult<Vec<(f64, f64)>> {
        let h = self.inner.serving.get(&CellId(cell)).ok_or_else(|| PyKeyError::new_err(format!("no histogram for cell {cell}")))?;
        Ok(h.bins.iter().map(|b| (b.midpoint_db, b.probability)).collect())
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: MeasurementStatistics::from_json(text).map_err(value_err)? })
    }
}

#[pyfunction]
#[pyo3(signature = (snapshot, bin_width_db=1.0))]
fn build_statistics(snapshot: &Snapshot, bin_width_db: f64) -> PyResult<Statistics> {
    Ok(Statistics { inner: core_build_statistics(&snapshot.inner, bin_width_db).map_err(value_err)? })
}

fn constants(stats: &MeasurementStatistics, iot_cap_db: f64, p_max_w_per_rb: f64, gamma_min_db: f64) -> PyResult<Constants> {
    let s = OptSettings { iot_cap_db, p_max_w_per_rb, gamma_min_db, ..OptSettings::default() };
    Constants::from_settings(&s, stats.bin_width_db).map_err(value_err)
}

/// Per-cell `(P0, alpha, I*)` with provenance and objective.
#[pyclass(module = "leap", frozen)]
struct Solution {
    inner: PowerControlSolution,
}

#[pymethods]
impl Solution {
    #[getter]
    fn provenance(&self) -> PyResult<String> {
        Ok(serde_json::to_value(self.inner.provenance).map_err(value_err)?.as_str().unwrap_or_default().to_string())
    }

    #[getter]
    fn objective(&self) -> Option<f64> {
        self.inner.objective
    }

    /// `(cell, p0_w_per_rb, alpha, i_star_w, flagged)` per cell.
    fn cells(&self) -> Vec<(u32, f64, f64, f64, bool)> {
        self.inner.cells.iter().map(|c: &CellParameters| (c.cell.0, c.p0_w_per_rb, c.alpha, c.i_star_w, c.flagged)).collect()
    }

    /// SINR target (linear) of a UE of `cell` with linear path loss `loss`.
    fn sinr_target(&self, cell: u32, loss: f64) -> PyResult<f64> {
        self.inner.sinr_target(CellId(cell), loss).map_err(value_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(value_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: PowerControlSolution::from_json(text).map_err(value_err)? })
    }
}

#[pyfunction]
#[pyo3(signature = (statistics, iterations=50_000, zeta=1.0, seed=1, iot_cap_db=20.0, p_max_w_per_rb=0.1, gamma_min_db=-10.0))]
#[allow(clippy::too_many_arguments)]
fn solve_sl(
    py: Python<'_>,
    statistics: &Statistics,
    iterations: usize,
    zeta: f64,
    seed: u64,
    iot_cap_db: f64,
    p_max_w_per_rb: f64,
    gamma_min_db: f64,
) -> PyResult<Solution> {
    let k = constants(&statistics.inner, iot_cap_db, p_max_w_per_rb, gamma_min_db)?;
    let inst = ProblemInstance::from_statistics(&statistics.inner, k).map_err(value_err)?;
    let cfg = SolverConfig { iterations, zeta, seed, ..SolverConfig::default() };
    let out = py.detach(|| solver_sl::solve(&inst, &cfg)).map_err(runtime_err)?;
    Ok(Solution { inner: out.solution })
}

#[pyfunction]
#[pyo3(signature = (statistics, iot_cap_db=20.0, p_max_w_per_rb=0.1, gamma_min_db=-10.0))]
fn solve_ce(py: Python<'_>, statistics: &Statistics, iot_cap_db: f64, p_max_w_per_rb: f64, gamma_min_db: f64) -> PyResult<Solution> {
    let k = constants(&statistics.inner, iot_cap_db, p_max_w_per_rb, gamma_min_db)?;
    let inst = ProblemInstance::from_statistics(&statistics.inner, k).map_err(value_err)?;
    let fit = solver_ce::fit_gaussians(&statistics.inner);
    let out = py.detach(|| solver_ce::solve_ce(&inst, &fit, &CeConfig::default())).map_err(runtime_err)?;
    Ok(Solution { inner: out.solution })
}

#[pyfunction]
#[pyo3(signature = (statistics, alpha=0.8, i_nominal_db=10.0, p_max_w_per_rb=0.1, gamma_min_db=-10.0))]
fn fa_fpc(statistics: &Statistics, alpha: f64, i_nominal_db: f64, p_max_w_per_rb: f64, gamma_min_db: f64) -> PyResult<Solution> {
    let k = constants(&statistics.inner, OptSettings::default().iot_cap_db, p_max_w_per_rb, gamma_min_db)?;
    let cfg = FaFpcConfig { alpha, i_nominal_db_above_n0: i_nominal_db };
    Ok(Solution { inner: fa_fpc_solution(&statistics.inner, &cfg, &k).map_err(value_err)? })
}

/// Best FA-FPC by median rate on `snapshot`; returns the solution and the
/// selected nominal interference (dB above N0).
#[pyfunction]
#[pyo3(signature = (statistics, snapshot, alpha=0.8, i_nominal_db=vec![5.0, 10.0, 15.0]))]
fn best_fa_fpc(statistics: &Statistics, snapshot: &Snapshot, alpha: f64, i_nominal_db: Vec<f64>) -> PyResult<(Solution, f64)> {
    let k = constants(&statistics.inner, OptSettings::default().iot_cap_db, OptSettings::default().p_max_w_per_rb, OptSettings::default().gamma_min_db)?;
    let sweep = BaselineSweep { alpha, i_nominal_db };
    let best = core_best_fa_fpc(&statistics.inner, &sweep, &k, |s| ev::evaluate_snapshot(s, &snapshot.inner)).map_err(value_err)?;
    Ok((Solution { inner: best.solution }, best.config.i_nominal_db_above_n0))
}

/// Per-UE SINR targets and rates with percentile summaries.
#[pyclass(module = "leap", frozen)]
struct Report {
    inner: EvaluationReport,
}

#[pymethods]
impl Report {
    /// `{percentile: rate}` in bits/s/Hz.
    fn percentiles(&self) -> BTreeMap<String, f64> {
        self.inner.percentiles.iter().map(|(q, v)| (format!("{q}"), *v)).collect()
    }

    fn percentile(&self, q: f64) -> PyResult<f64> {
        self.inner.percentile(q).ok_or_else(|| PyKeyError::new_err(format!("percentile {q} is not reported")))
    }

    #[getter]
    fn median(&self) -> f64 {
        self.inner.median()
    }

    fn rates(&self) -> Vec<f64> {
        self.inner.ues.iter().map(|u| u.rate).collect()
    }

    fn ues_csv(&self) -> String {
        self.inner.ues_csv()
    }
}

#[pyfunction]
fn evaluate(solution: &Solution, snapshot: &Snapshot) -> PyResult<Report> {
    Ok(Report { inner: ev::evaluate_snapshot(&solution.inner, &snapshot.inner).map_err(value_err)? })
}

/// `(percentile, gain)` of `report` over `reference`.
#[pyfunction]
fn gain_table(report: &Report, reference: &Report) -> Vec<(f64, f64)> {
    ev::gain_table(&report.inner, &reference.inner)
}

#[pyfunction]
fn data_rate(sinr: f64) -> f64 {
    ev::data_rate(sinr)
}

/// `V(gamma) = ln ln(1 + e^gamma)`.
#[pyfunction]
fn utility(gamma: f64) -> f64 {
    optcore::utility(gamma)
}

/// Expected interference contribution under a bivariate log-normal fit.
#[pyfunction]
fn g_hat(pi: f64, alpha: f64, mean: [f64; 2], cov: [[f64; 2]; 2]) -> f64 {
    solver_ce::g_hat(pi, alpha, &EdgeFit { mean, cov, degenerate: false })
}

/// Runs the pipeline from a TOML file and returns the run summary (or
/// `None` when stopped early) and the run directory.
#[pyfunction]
#[pyo3(signature = (config_path, artifact_root=None, until="report"))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    artifact_root: Option<PathBuf>,
    until: &str,
) -> PyResult<(Option<Bound<'py, PyAny>>, String)> {
    let stage = Stage::parse(until).ok_or_else(|| value_err(format!("unknown stage {until}")))?;
    let cfg = RunConfig::load(&config_path).map_err(value_err)?;
    let root = artifact_root.unwrap_or_else(pipeline::artifact_root);
    let out = py.detach(|| pipeline::run_pipeline(&cfg, BTreeMap::new(), &root, stage)).map_err(runtime_err)?;
    let summary = match &out.summary {
        Some(s) => Some(json_to_py(py, &serde_json::to_string(s).map_err(value_err)?)?),
        None => None,
    };
    Ok((summary, out.run_dir.display().to_string()))
}

#[pymodule]
fn leap(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Snapshot>()?;
    m.add_class::<Statistics>()?;
    m.add_class::<Solution>()?;
    m.add_class::<Report>()?;
    m.add_function(wrap_pyfunction!(generate_snapshot, m)?)?;
    m.add_function(wrap_pyfunction!(build_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(solve_sl, m)?)?;
    m.add_function(wrap_pyfunction!(solve_ce, m)?)?;
    m.add_function(wrap_pyfunction!(fa_fpc, m)?)?;
    m.add_function(wrap_pyfunction!(best_fa_fpc, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gain_table, m)?)?;
    m.add_function(wrap_pyfunction!(data_rate, m)?)?;
    m.add_function(wrap_pyfunction!(utility, m)?)?;
    m.add_function(wrap_pyfunction!(g_hat, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
