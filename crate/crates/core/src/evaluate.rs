//! Scoring of power-control solutions on a UE snapshot: SINR targets, data
//! rates, percentile tables, gains against a reference and gains grouped by
//! the number of dominant interferers a cell suffers.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurements::MeasurementStatistics;
use crate::netmodel::{CellId, NetworkSnapshot};

pub const PERCENTILES: [f64; 7] = [5.0, 10.0, 20.0, 50.0, 80.0, 90.0, 95.0];
pub const DEFAULT_DOMINANCE_THRESHOLD: f64 = 0.05;
pub const SOLUTION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("solution has no parameters for {0}")]
    MissingCell(CellId),
    #[error("path loss must be at least 1 (linear), got {0}")]
    InvalidLoss(f64),
    #[error("reports cover different UEs")]
    MismatchedReports,
    #[error("report has no UEs")]
    EmptyReport,
    #[error("solution schema version {found} is not supported (expected {SOLUTION_SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Sl,
    Ce,
    FaFpc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellParameters {
    pub cell: CellId,
    pub p0_w_per_rb: f64,
    pub alpha: f64,
    pub i_star_w: f64,
    /// Set when the parameters could not meet their design goal (baseline
    /// cells whose worst bin is power-capped).
    #[serde(default)]
    pub flagged: bool,
}

/// Per-cell FPC parameters and interference targets pushed to the cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerControlSolution {
    pub provenance: Provenance,
    pub p_max_w: f64,
    pub objective: Option<f64>,
    /// Sorted by cell id.
    pub cells: Vec<CellParameters>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolutionDoc {
    schema_version: u32,
    #[serde(flatten)]
    solution: PowerControlSolution,
}

impl PowerControlSolution {
    pub fn new(provenance: Provenance, p_max_w: f64, objective: Option<f64>, mut cells: Vec<CellParameters>) -> Self {
        cells.sort_by_key(|c| c.cell);
        Self { provenance, p_max_w, objective, cells }
    }

    pub fn get(&self, cell: CellId) -> Option<&CellParameters> {
        self.cells.binary_search_by_key(&cell, |c| c.cell).ok().map(|i| &self.cells[i])
    }

    /// SINR target of a UE of `cell` with linear serving loss `loss`.
    pub fn sinr_target(&self, cell: CellId, loss: f64) -> Result<f64, EvaluateError> {
        let p = self.get(cell).ok_or(EvaluateError::MissingCell(cell))?;
        sinr_target(p, self.p_max_w, loss)
    }

    pub fn to_json(&self) -> Result<String, EvaluateError> {
        Ok(serde_json::to_string_pretty(&SolutionDoc { schema_version: SOLUTION_SCHEMA_VERSION, solution: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self, EvaluateError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("schema_version").and_then(|s| s.as_u64()).unwrap_or(0) as u32;
        if found != SOLUTION_SCHEMA_VERSION {
            return Err(EvaluateError::SchemaVersion { found });
        }
        let mut s = serde_json::from_value::<SolutionDoc>(v)?.solution;
        s.cells.sort_by_key(|c| c.cell);
        Ok(s)
    }
}

/// `min(P_max / l, P0 l^-(1-alpha)) / I*`, both branches in the log domain.
pub fn sinr_target(p: &CellParameters, p_max_w: f64, loss: f64) -> Result<f64, EvaluateError> {
    if !(loss >= 1.0) {
        return Err(EvaluateError::InvalidLoss(loss));
    }
    let ll = loss.ln();
    let cap = p_max_w.ln() - ll;
    let fpc = p.p0_w_per_rb.ln() - (1.0 - p.alpha) * ll;
    Ok((cap.min(fpc) - p.i_star_w.ln()).exp())
}

/// Shannon rate in bits/s/Hz.
pub fn data_rate(sinr: f64) -> f64 {
    sinr.ln_1p() / std::f64::consts::LN_2
}

/// Type-7 percentile (linear interpolation between order statistics) of
/// sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q / 100.0;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeResult {
    pub ue: u32,
    pub cell: CellId,
    pub sinr_target: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub provenance: Provenance,
    /// Sorted by UE id.
    pub ues: Vec<UeResult>,
    /// `(percentile, rate)` for every entry of [`PERCENTILES`].
    pub percentiles: Vec<(f64, f64)>,
    pub cell_medians: BTreeMap<CellId, f64>,
}

impl EvaluationReport {
    pub fn percentile(&self, q: f64) -> Option<f64> {
        self.percentiles.iter().find(|(p, _)| *p == q).map(|&(_, v)| v)
    }

    pub fn median(&self) -> f64 {
        self.percentile(50.0).expect("median is always reported")
    }

    pub fn sorted_rates(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.ues.iter().map(|u| u.rate).collect();
        r.sort_by(f64::total_cmp);
        r
    }

    pub fn ues_csv(&self) -> String {
        let mut s = String::from("ue,cell,sinr_target,rate_bps_hz\n");
        for u in &self.ues {
            let _ = writeln!(s, "{},{},{:e},{:.9}", u.ue, u.cell.0, u.sinr_target, u.rate);
        }
        s
    }

    pub fn percentiles_csv(&self) -> String {
        let mut s = String::from("percentile,rate_bps_hz\n");
        for (p, v) in &self.percentiles {
            let _ = writeln!(s, "{p},{v:.9}");
        }
        s
    }

    /// Empirical CDF of the rates as `(x, y)` columns.
    pub fn cdf_csv(&self) -> String {
        let r = self.sorted_rates();
        let n = r.len() as f64;
        let mut s = String::from("rate_bps_hz,cdf\n");
        for (i, v) in r.iter().enumerate() {
            let _ = writeln!(s, "{v:.9},{:.9}", (i + 1) as f64 / n);
        }
        s
    }
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    percentile(&v, 50.0)
}

/// Per-UE targets and rates of `solution` on `snapshot`.
pub fn evaluate_snapshot(solution: &PowerControlSolution, snapshot: &NetworkSnapshot) -> Result<EvaluationReport, EvaluateError> {
    let mut ues = Vec::with_capacity(snapshot.ues.len());
    for ue in &snapshot.ues {
        let p = solution.get(ue.serving_cell).ok_or(EvaluateError::MissingCell(ue.serving_cell))?;
        let sinr = sinr_target(p, solution.p_max_w, ue.serving_loss().linear())?;
        ues.push(UeResult { ue: ue.id, cell: ue.serving_cell, sinr_target: sinr, rate: data_rate(sinr) });
    }
    if ues.is_empty() {
        return Err(EvaluateError::EmptyReport);
    }
    ues.sort_by_key(|u| u.ue);
    let mut rates: Vec<f64> = ues.iter().map(|u| u.rate).collect();
    rates.sort_by(f64::total_cmp);
    let percentiles = PERCENTILES.iter().map(|&q| (q, percentile(&rates, q))).collect();
    let mut by_cell: BTreeMap<CellId, Vec<f64>> = BTreeMap::new();
    for u in &ues {
        by_cell.entry(u.cell).or_default().push(u.rate);
    }
    let cell_medians = by_cell.into_iter().map(|(c, v)| (c, median_of(v))).collect();
    Ok(EvaluationReport { provenance: solution.provenance, ues, percentiles, cell_medians })
}

/// Ratio of `report` to `reference` at every reported percentile.
pub fn gain_table(report: &EvaluationReport, reference: &EvaluationReport) -> Vec<(f64, f64)> {
    report
        .percentiles
        .iter()
        .zip(&reference.percentiles)
        .map(|(&(q, a), &(_, b))| (q, a / b))
        .collect()
}

pub fn gain_table_csv(gains: &[(f64, f64)]) -> String {
    let mut s = String::from("percentile,gain\n");
    for (q, g) in gains {
        let _ = writeln!(s, "{q},{g:.9}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfererGroup {
    pub dominant_interferers: usize,
    pub cells: usize,
    pub median_gain: f64,
    /// Sample standard deviation of the per-cell gains; 0 for one cell.
    pub std_dev: f64,
}

/// Groups cells by how many dominant interferers they suffer
/// (`|{e in J_c : a_{e->c} >= threshold}|`) and reports, per group, the
/// median and spread of the per-cell median-rate gains.
pub fn gain_by_interferer_count(
    report: &EvaluationReport,
    reference: &EvaluationReport,
    stats: &MeasurementStatistics,
    dominance_threshold: f64,
) -> Result<Vec<InterfererGroup>, EvaluateError> {
    if report.ues.len() != reference.ues.len() || report.ues.iter().zip(&reference.ues).any(|(a, b)| a.ue != b.ue) {
        return Err(EvaluateError::MismatchedReports);
    }
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&c, &m) in &report.cell_medians {
        let Some(&r) = reference.cell_medians.get(&c) else { continue };
        let count = stats.graph.interferers(c).filter(|&e| stats.graph.occupancy(e, c) >= dominance_threshold).count();
        groups.entry(count).or_default().push(m / r);
    }
    Ok(groups
        .into_iter()
        .map(|(k, gains)| {
            let n = gains.len();
            let mean = gains.iter().sum::<f64>() / n as f64;
            let std_dev = if n > 1 { (gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
            InterfererGroup { dominant_interferers: k, cells: n, median_gain: median_of(gains), std_dev }
        })
        .collect())
}

pub fn groups_csv(groups: &[InterfererGroup]) -> String {
    let mut s = String::from("dominant_interferers,cells,median_gain,std_dev\n");
    for g in groups {
        let _ = writeln!(s, "{},{},{:.9},{:.9}", g.dominant_interferers, g.cells, g.median_gain, g.std_dev);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Cell, CellKind, NetworkConfig, PathLoss, Position, UeSample};

    fn params(p0: f64, alpha: f64, i: f64) -> CellParameters {
        CellParameters { cell: CellId(0), p0_w_per_rb: p0, alpha, i_star_w: i, flagged: false }
    }

    #[test]
    fn sinr_target_examples() {
        let t = sinr_target(&params(1e-3, 0.5, 1e-12), 0.1, 1e10).unwrap();
        assert!((t - 10.0).abs() < 1e-9, "{t}");
        let t = sinr_target(&params(1e-3, 0.3, 1e-12), 0.1, 1.0).unwrap();
        assert!((t - 1e-3 / 1e-12).abs() < 1e-3);
        let a = sinr_target(&params(1e-9, 0.7, 1e-13), 0.1, 1e11).unwrap();
        let b = sinr_target(&params(1e-9, 0.7, 2e-13), 0.1, 1e11).unwrap();
        assert!((a / b - 2.0).abs() < 1e-12);
        let n0 = 2.29e-15;
        let x = sinr_target(&params(1e-12, 1.0, n0), 0.1, 1e5).unwrap();
        let y = sinr_target(&params(1e-12, 1.0, n0), 0.1, 1e9).unwrap();
        assert!((x - 1e-12 / n0).abs() < 1e-9 && (x - y).abs() < 1e-9);
        assert!(sinr_target(&params(1e-3, 0.5, 1e-12), 0.1, 1e300).unwrap() < 1e-100);
        assert!(matches!(sinr_target(&params(1.0, 1.0, 1.0), 0.1, 0.5), Err(EvaluateError::InvalidLoss(_))));
    }

    #[test]
    fn transmit_psd_never_exceeds_cap() {
        for &l in &[1.0, 1e3, 1e8, 1e12, 1e15] {
            let p = params(1e-4, 0.4, 1e-13);
            let t = sinr_target(&p, 0.1, l).unwrap();
            assert!(t * p.i_star_w * l <= 0.1 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn data_rate_examples() {
        assert!((data_rate(10.0) - 11f64.log2()).abs() < 1e-12);
        assert!((data_rate(10.0) - 3.4594).abs() < 1e-4);
        assert_eq!(data_rate(0.0), 0.0);
        assert!((data_rate(1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn percentiles_on_five_points() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert!((percentile(&v, 20.0) - 1.8).abs() < 1e-12);
        assert!((percentile(&v, 95.0) - 4.8).abs() < 1e-12);
        assert!((percentile(&v, 5.0) - 1.2).abs() < 1e-12);
    }

    fn snapshot(losses_db: &[f64]) -> NetworkSnapshot {
        NetworkSnapshot {
            cells: vec![Cell { id: CellId(0), kind: CellKind::Macro, position: Position::new(0.0, 0.0), tx_power_w: 40.0 }],
            ues: losses_db
                .iter()
                .enumerate()
                .map(|(i, &db)| UeSample {
                    id: i as u32,
                    position: Position::new(0.0, 0.0),
                    serving_cell: CellId(0),
                    losses: [(CellId(0), PathLoss::from_db(db))].into_iter().collect(),
                })
                .collect(),
            config_echo: NetworkConfig::default(),
            coverage_holes: 0,
        }
    }

    fn solution(i: f64) -> PowerControlSolution {
        PowerControlSolution::new(Provenance::Sl, 0.1, None, vec![params(1e-9, 0.8, i)])
    }

    #[test]
    fn single_ue_report() {
        let r = evaluate_snapshot(&solution(1e-14), &snapshot(&[110.0])).unwrap();
        let rate = r.ues[0].rate;
        assert!(r.percentiles.iter().all(|&(_, v)| v == rate));
    }

    #[test]
    fn doubling_interference_lowers_rates() {
        let snap = snapshot(&[100.0, 110.0, 120.0, 130.0]);
        let a = evaluate_snapshot(&solution(1e-14), &snap).unwrap();
        let b = evaluate_snapshot(&solution(2e-14), &snap).unwrap();
        for (x, y) in a.ues.iter().zip(&b.ues) {
            assert!(y.rate <= x.rate);
        }
        assert!(a.percentiles.windows(2).all(|w| w[0].1 <= w[1].1));
        assert_eq!(a.ues_csv(), evaluate_snapshot(&solution(1e-14), &snap).unwrap().ues_csv());
    }

    #[test]
    fn missing_cell_is_named() {
        let mut snap = snapshot(&[100.0]);
        snap.ues[0].serving_cell = CellId(9);
        snap.ues[0].losses = [(CellId(9), PathLoss::from_db(100.0))].into_iter().collect();
        let err = evaluate_snapshot(&solution(1e-14), &snap).unwrap_err();
        assert_eq!(err.to_string(), "solution has no parameters for cell-9");
    }

    #[test]
    fn solution_round_trips_through_json() {
        let s = PowerControlSolution::new(Provenance::FaFpc, 0.1, Some(1.5), vec![params(1e-9, 0.8, 1e-14)]);
        let text = s.to_json().unwrap();
        assert!(text.contains("\"fa_fpc\""));
        assert_eq!(PowerControlSolution::from_json(&text).unwrap(), s);
    }

    #[test]
    fn grouping_by_dominant_interferers() {
        // Cell 1 hears 1 of cell 0's ten UEs and all of cell 2's ten UEs.
        let cells = (0..3).map(|i| Cell { id: CellId(i), kind: CellKind::Macro, position: Position::new(i as f64 * 500.0, 0.0), tx_power_w: 40.0 }).collect();
        let mut ues = Vec::new();
        for id in 0..25u32 {
            let serving = match id { 0..=9 => 0, 10..=19 => 2, _ => 1 };
            let mut losses: BTreeMap<CellId, PathLoss> = [(CellId(serving), PathLoss::from_db(100.0 + id as f64))].into_iter().collect();
            if id == 0 || serving == 2 {
                losses.insert(CellId(1), PathLoss::from_db(140.0));
            }
            ues.push(UeSample { id, position: Position::new(0.0, 0.0), serving_cell: CellId(serving), losses });
        }
        let snap = NetworkSnapshot { cells, ues, config_echo: NetworkConfig::default(), coverage_holes: 0 };
        let stats = crate::measurements::build_statistics(&snap, 1.0).unwrap();
        let sol = |i1: f64| {
            let cells = (0..3).map(|c| CellParameters { cell: CellId(c), ..params(1e-9, 0.8, if c == 1 { i1 } else { 1e-14 }) }).collect();
            PowerControlSolution::new(Provenance::Sl, 0.1, None, cells)
        };
        let reference = evaluate_snapshot(&sol(1e-14), &snap).unwrap();
        let better = evaluate_snapshot(&sol(1e-16), &snap).unwrap();

        let groups = gain_by_interferer_count(&better, &reference, &stats, DEFAULT_DOMINANCE_THRESHOLD).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!((groups[0].dominant_interferers, groups[0].cells), (0, 2));
        assert!((groups[0].median_gain - 1.0).abs() < 1e-12 && groups[0].std_dev == 0.0);
        assert_eq!((groups[1].dominant_interferers, groups[1].cells), (2, 1));
        assert!(groups[1].median_gain > 1.0);

        let strict = gain_by_interferer_count(&better, &reference, &stats, 1.0).unwrap();
        assert_eq!(strict.iter().map(|g| g.dominant_interferers).collect::<Vec<_>>(), vec![0, 1]);

        let other = evaluate_snapshot(&solution(1e-14), &snapshot(&[100.0])).unwrap();
        assert!(matches!(gain_by_interferer_count(&other, &reference, &stats, 0.05), Err(EvaluateError::MismatchedReports)));
        assert!(groups_csv(&groups).starts_with("dominant_interferers,cells,median_gain,std_dev\n0,2,"));
    }
}
