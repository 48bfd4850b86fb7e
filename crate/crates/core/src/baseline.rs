//! FA-FPC comparison scheme: one fixed alpha for every cell, with P0 chosen
//! so the worst serving-loss bin of each cell clears the decoding threshold
//! under a nominal interference level.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{CellParameters, EvaluateError, EvaluationReport, PowerControlSolution, Provenance};
use crate::measurements::MeasurementStatistics;
use crate::optcore::Constants;
use crate::units::{db_to_linear, db_to_nat};

pub const DEFAULT_ALPHA: f64 = 0.8;
pub const DEFAULT_I_NOMINAL_SWEEP_DB: [f64; 3] = [5.0, 10.0, 15.0];

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("nominal interference must be finite, got {0} dB")]
    InvalidNominal(f64),
    #[error("statistics contain no cell with a serving histogram")]
    EmptyStatistics,
    #[error("baseline sweep is empty")]
    EmptySweep,
    #[error(transparent)]
    Evaluate(#[from] EvaluateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaFpcConfig {
    pub alpha: f64,
    /// Nominal interference, in dB above the noise floor.
    pub i_nominal_db_above_n0: f64,
}

impl Default for FaFpcConfig {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, i_nominal_db_above_n0: 10.0 }
    }
}

impl FaFpcConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(BaselineError::InvalidAlpha(self.alpha));
        }
        if !self.i_nominal_db_above_n0.is_finite() {
            return Err(BaselineError::InvalidNominal(self.i_nominal_db_above_n0));
        }
        Ok(())
    }

    pub fn i_nominal_w(&self, constants: &Constants) -> f64 {
        constants.n0_w * db_to_linear(self.i_nominal_db_above_n0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSweep {
    pub alpha: f64,
    pub i_nominal_db: Vec<f64>,
}

impl Default for BaselineSweep {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, i_nominal_db: DEFAULT_I_NOMINAL_SWEEP_DB.to_vec() }
    }
}

impl BaselineSweep {
    pub fn configs(&self) -> Vec<FaFpcConfig> {
        self.i_nominal_db.iter().map(|&db| FaFpcConfig { alpha: self.alpha, i_nominal_db_above_n0: db }).collect()
    }
}

/// `P0_c = SINR_min * I_nominal * l_worst^(1-alpha)`, clamped so that
/// `P0 l^alpha <= P_max` on every bin of the cell. Clamped cells are flagged.
pub fn fa_fpc_solution(
    stats: &MeasurementStatistics,
    config: &FaFpcConfig,
    constants: &Constants,
) -> Result<PowerControlSolution, BaselineError> {
    config.validate()?;
    let i_nominal = config.i_nominal_w(constants);
    let ln_pmax = constants.p_max_w.ln();
    let mut cells = Vec::new();
    for (&id, hist) in &stats.serving {
        let Some(worst_db) = hist.max_midpoint_db() else { continue };
        let lambda = db_to_nat(worst_db);
        let pi = constants.gamma_min + i_nominal.ln() + (1.0 - config.alpha) * lambda;
        let cap = ln_pmax - config.alpha * lambda;
        let flagged = pi > cap;
        if flagged {
            log::debug!("FA-FPC: {id} needs {:.2} dB above the power cap on its worst bin", (pi - cap) / db_to_nat(1.0));
        }
        cells.push(CellParameters { cell: id, p0_w_per_rb: pi.min(cap).exp(), alpha: config.alpha, i_star_w: i_nominal, flagged });
    }
    if cells.is_empty() {
        return Err(BaselineError::EmptyStatistics);
    }
    Ok(PowerControlSolution::new(Provenance::FaFpc, constants.p_max_w, None, cells))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestFaFpc {
    pub config: FaFpcConfig,
    pub solution: PowerControlSolution,
    pub report: EvaluationReport,
    /// `(I_nominal dB, median rate)` of every candidate, in sweep order.
    pub candidates: Vec<(f64, f64)>,
}

/// Evaluates every sweep point and keeps the one with the highest median
/// rate; ties go to the lower nominal interference.
pub fn best_fa_fpc<F>(
    stats: &MeasurementStatistics,
    sweep: &BaselineSweep,
    constants: &Constants,
    mut evaluate_fn: F,
) -> Result<BestFaFpc, BaselineError>
where
    F: FnMut(&PowerControlSolution) -> Result<EvaluationReport, EvaluateError>,
{
    let mut best: Option<BestFaFpc> = None;
    let mut candidates = Vec::new();
    for config in sweep.configs() {
        let solution = fa_fpc_solution(stats, &config, constants)?;
        let report = evaluate_fn(&solution)?;
        let median = report.median();
        candidates.push((config.i_nominal_db_above_n0, median));
        let better = match &best {
            None => true,
            Some(b) => {
                let m = b.report.median();
                median > m || (median == m && config.i_nominal_db_above_n0 < b.config.i_nominal_db_above_n0)
            }
        };
        if better {
            best = Some(BestFaFpc { config, solution, report, candidates: Vec::new() });
        }
    }
    let mut best = best.ok_or(BaselineError::EmptySweep)?;
    best.candidates = candidates;
    Ok(best)
}
