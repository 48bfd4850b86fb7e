//! Certainty-equivalent heuristic (IoTC-CE): fit a bivariate Gaussian to the
//! log losses of every edge, replace the expected log-interference by the
//! log of the expected interference under that fit, and solve the resulting
//! deterministic convex program.
//!
//! With the interference targets and SINR variables eliminated (both are tight
//! at the optimum) the program lives in `(pi, alpha)` only. It is solved by
//! the method of multipliers: each outer step maximises the augmented
//! Lagrangian over the box with a projected Newton method, then updates the
//! multipliers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evaluate::Provenance;
use crate::measurements::MeasurementStatistics;
use crate::netmodel::CellId;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::optcore::{
    constraints_and_gradient, objective, utility, utility_derivative, utility_second_derivative, Block2Form, DualState, PrimalState,
    ProblemInstance,
};
use crate::solver_sl::{decode_solution, SolverError};
use crate::evaluate::PowerControlSolution;

pub const COVARIANCE_EPSILON: f64 = 1e-6;

/// Gaussian fit of one edge's `(ln L_e, ln L_{e->c})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeFit {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    /// Single-bin histogram: covariance is the regulariser alone.
    pub degenerate: bool,
}

impl EdgeFit {
    /// Weighted moments of `(x1, x2, p)` points, diagonal regularised by
    /// [`COVARIANCE_EPSILON`].
    pub fn from_points(points: impl IntoIterator<Item = (f64, f64, f64)> + Clone) -> Self {
        let total: f64 = points.clone().into_iter().map(|(_, _, p)| p).sum();
        let (mut m1, mut m2, mut n) = (0.0, 0.0, 0);
        for (x1, x2, p) in points.clone() {
            m1 += p * x1;
            m2 += p * x2;
            n += 1;
        }
        m1 /= total;
        m2 /= total;
        let (mut c11, mut c12, mut c22) = (0.0, 0.0, 0.0);
        for (x1, x2, p) in points {
            let (d1, d2) = (x1 - m1, x2 - m2);
            c11 += p * d1 * d1;
            c12 += p * d1 * d2;
            c22 += p * d2 * d2;
        }
        c11 /= total;
        c12 /= total;
        c22 /= total;
        Self {
            mean: [m1, m2],
            cov: [[c11 + COVARIANCE_EPSILON, c12], [c12, c22 + COVARIANCE_EPSILON]],
            degenerate: n <= 1,
        }
    }

    /// `beta' C beta` with `beta = (alpha, -1)`.
    fn quad(&self, alpha: f64) -> f64 {
        self.cov[0][0] * alpha * alpha - 2.0 * self.cov[0][1] * alpha + self.cov[1][1]
    }

    /// Log of the expected interference contribution and its alpha derivative.
    pub fn log_g_hat(&self, pi: f64, alpha: f64) -> (f64, f64) {
        let v = pi + alpha * self.mean[0] - self.mean[1] + 0.5 * self.quad(alpha);
        (v, self.mean[0] + self.cov[0][0] * alpha - self.cov[0][1])
    }
}

impl EdgeFit {
    /// One draw of `(ln L_e, ln L_{e->c})` from the fitted normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let (u, v): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let l11 = self.cov[0][0].sqrt();
        let l21 = self.cov[0][1] / l11;
        let l22 = (self.cov[1][1] - l21 * l21).max(0.0).sqrt();
        (self.mean[0] + l11 * u, self.mean[1] + l21 * u + l22 * v)
    }
}

/// `exp(pi + beta' m + beta' C beta / 2)` with `beta = (alpha, -1)`.
pub fn g_hat(pi: f64, alpha: f64, fit: &EdgeFit) -> f64 {
    fit.log_g_hat(pi, alpha).0.exp()
}

/// Per-edge Gaussian fits keyed by `(interferer, interfered)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianFit {
    pub edges: BTreeMap<(CellId, CellId), EdgeFit>,
}

#[derive(Serialize, Deserialize)]
struct FitDoc {
    schema_version: u32,
    edges: Vec<FitEdgeDoc>,
}

#[derive(Serialize, Deserialize)]
struct FitEdgeDoc {
    interferer: CellId,
    interfered: CellId,
    #[serde(flatten)]
    fit: EdgeFit,
}

impl GaussianFit {
    pub fn degenerate_count(&self) -> usize {
        self.edges.values().filter(|f| f.degenerate).count()
    }

    pub fn to_json(&self) -> Result<String, serde_json::Error> {
        let doc = FitDoc {
            schema_version: 1,
            edges: self.edges.iter().map(|(&(e, c), &fit)| FitEdgeDoc { interferer: e, interfered: c, fit }).collect(),
        };
        serde_json::to_string_pretty(&doc)
    }

    /// Fits aligned with the instance's edge order.
    fn aligned(&self, inst: &ProblemInstance) -> Result<Vec<EdgeFit>, SolverError> {
        inst.edges()
            .iter()
            .map(|e| {
                let key = (inst.cells()[e.source].id, inst.cells()[e.target].id);
                self.edges.get(&key).copied().ok_or_else(|| {
                    SolverError::InvalidConfig(format!("no Gaussian fit for edge {} -> {}", key.0, key.1))
                })
            })
            .collect()
    }
}

/// Fits every joint histogram of the statistics.
pub fn fit_gaussians(stats: &MeasurementStatistics) -> GaussianFit {
    let edges = stats
        .joint
        .iter()
        .map(|(&key, h)| {
            let pts: Vec<(f64, f64, f64)> = h
                .bins
                .iter()
                .map(|b| {
                    let (x1, x2) = b.midpoints_nat();
                    (x1, x2, b.probability)
                })
                .collect();
            let fit = EdgeFit::from_points(pts);
            if fit.degenerate {
                log::debug!("edge {} -> {} has a single joint bin; fit is degenerate", key.0, key.1);
            }
            (key, fit)
        })
        .collect();
    GaussianFit { edges }
}

/// Fits the joint bins stored in an instance.
pub fn fit_instance(inst: &ProblemInstance) -> GaussianFit {
    let edges = inst
        .edges()
        .iter()
        .map(|e| {
            let key = (inst.cells()[e.source].id, inst.cells()[e.target].id);
            (key, EdgeFit::from_points(e.bins.iter().map(|b| (b.xi1, b.xi2, b.prob)).collect::<Vec<_>>()))
        })
        .collect();
    GaussianFit { edges }
}

/// Block2 under the certainty-equivalent closed form:
/// `ln(sum_e a_e g_hat_e + N0) - theta`.
#[derive(Debug, Clone)]
pub struct CeForm {
    fits: Vec<EdgeFit>,
    ln_occupancy: Vec<f64>,
}

impl CeForm {
    pub fn new(inst: &ProblemInstance, fit: &GaussianFit) -> Result<Self, SolverError> {
        Ok(Self { fits: fit.aligned(inst)?, ln_occupancy: inst.edges().iter().map(|e| e.occupancy.ln()).collect() })
    }

    /// `ln(sum_e a_e g_hat_e + N0)` at cell `c`.
    pub fn log_interference(&self, inst: &ProblemInstance, z: &PrimalState, c: usize) -> f64 {
        let mut total = inst.constants.n0_w;
        for k in inst.incoming(c) {
            let s = inst.edges()[k].source;
            if let Some((v, _)) = self.term(inst, k, z.pi[s], z.alpha[s]) {
                total += v.exp();
            }
        }
        total.ln()
    }
}

impl Block2Form for CeForm {
    fn term(&self, _inst: &ProblemInstance, k: usize, pi: f64, alpha: f64) -> Option<(f64, f64)> {
        let la = self.ln_occupancy[k];
        la.is_finite().then(|| {
            let (v, d) = self.fits[k].log_g_hat(pi, alpha);
            (la + v, d)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeConfig {
    pub kkt_tolerance: f64,
    /// Budget of inner projected-gradient iterations over the whole solve.
    pub max_iterations: usize,
    pub initial_penalty: f64,
    pub max_penalty: f64,
}

impl Default for CeConfig {
    fn default() -> Self {
        Self { kkt_tolerance: 1e-6, max_iterations: 200_000, initial_penalty: 10.0, max_penalty: 1e8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeStep {
    pub outer: usize,
    pub inner_iterations: usize,
    pub objective: f64,
    pub max_violation: f64,
    pub kkt_residual: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CeTrace {
    pub steps: Vec<CeStep>,
}

impl CeTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("outer,inner_iterations,objective,max_violation,kkt_residual,penalty\n");
        for c in &self.steps {
            s.push_str(&format!(
                "{},{},{:.12e},{:.6e},{:.6e},{:.6e}\n",
                c.outer, c.inner_iterations, c.objective, c.max_violation, c.kkt_residual, c.penalty
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    pub solution: PowerControlSolution,
    pub trace: CeTrace,
    pub primal: PrimalState,
    pub dual: DualState,
    pub kkt_residual: f64,
}

/// KKT residual of `(z, mu)`: the largest of projected-gradient
/// stationarity, primal infeasibility and complementarity.
pub fn kkt_residual<F: Block2Form>(inst: &ProblemInstance, z: &PrimalState, mu: &DualState, form: &F) -> f64 {
    let (h, g) = constraints_and_gradient(inst, z, mu, form);
    let mut step = z.clone();
    step.axpy(1.0, &g);
    step.project(inst);
    let stat = step.iter().zip(z.iter()).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let feas = h.max_positive();
    let comp = mu.iter().zip(h.iter()).fold(0.0_f64, |m, (&u, &v)| m.max(u.min(-v).abs()));
    stat.max(feas).max(comp)
}

/// Multipliers of the constraints the reduced program keeps: the noise cap
/// on the interference of each cell, the gamma floor of each bin and the
/// power cap of each cell's deepest bin.
#[derive(Debug, Clone)]
struct Multipliers {
    cap: Vec<f64>,
    floor: Vec<f64>,
    power: Vec<f64>,
}

/// The CE program with theta and gamma eliminated: at any optimum block1
/// and block2 are tight, so both are functions of `x = [pi..., alpha...]`.
struct Reduced<'a> {
    inst: &'a ProblemInstance,
    form: &'a CeForm,
    lambda_max: Vec<f64>,
    deepest: Vec<usize>,
}

/// Interference terms at one point.
struct Terms {
    dterm: Vec<f64>,
    weight: Vec<f64>,
    lse: Vec<f64>,
}

struct Evaluation {
    value: f64,
    grad: Vec<f64>,
    hess: Option<DMatrix<f64>>,
    /// Largest constraint violation.
    violation: f64,
}

impl<'a> Reduced<'a> {
    fn new(inst: &'a ProblemInstance, form: &'a CeForm) -> Self {
        let deepest = inst
            .cells()
            .iter()
            .enumerate()
            .map(|(c, cell)| inst.gamma_range(c).zip(&cell.bins).max_by(|a, b| a.1.lambda.total_cmp(&b.1.lambda)).map_or(0, |(k, _)| k))
            .collect();
        Self { inst, form, lambda_max: inst.cells().iter().map(|c| c.lambda_max()).collect(), deepest }
    }

    fn n(&self) -> usize {
        self.inst.num_cells()
    }

    fn lower(&self, i: usize) -> f64 {
        if i < self.n() { self.inst.bounds.pi_min } else { 0.0 }
    }

    fn upper(&self, i: usize) -> f64 {
        if i < self.n() { self.inst.bounds.pi_max } else { 1.0 }
    }

    fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower(i), self.upper(i));
        }
    }

    fn projected_gradient_norm(&self, x: &[f64], g: &[f64]) -> f64 {
        x.iter().zip(g).enumerate().fold(0.0_f64, |m, (i, (&v, &d))| m.max(((v + d).clamp(self.lower(i), self.upper(i)) - v).abs()))
    }

    fn start(&self) -> Vec<f64> {
        let z = PrimalState::initial(self.inst);
        z.pi.iter().chain(&z.alpha).copied().collect()
    }

    fn terms(&self, x: &[f64]) -> Terms {
        let inst = self.inst;
        let n = self.n();
        let m = inst.edges().len();
        let (mut term, mut dterm) = (vec![f64::NEG_INFINITY; m], vec![0.0; m]);
        for (k, e) in inst.edges().iter().enumerate() {
            if let Some((t, d)) = self.form.term(inst, k, x[e.source], x[n + e.source]) {
                term[k] = t;
                dterm[k] = d;
            }
        }
        let ln_n0 = inst.ln_n0();
        let mut lse = vec![0.0; n];
        let mut weight = vec![0.0; m];
        for (c, l) in lse.iter_mut().enumerate() {
            let r = inst.incoming(c);
            let top = term[r.clone()].iter().copied().fold(ln_n0, f64::max);
            let s: f64 = (ln_n0 - top).exp() + term[r.clone()].iter().map(|t| (t - top).exp()).sum::<f64>();
            *l = top + s.ln();
            for k in r {
                weight[k] = (term[k] - *l).exp();
            }
        }
        Terms { dterm, weight, lse }
    }

    /// Full-program primal at `x`.
    fn expand(&self, x: &[f64], t: &Terms) -> PrimalState {
        let inst = self.inst;
        let n = self.n();
        let mut z = PrimalState::zeros(inst);
        z.pi.copy_from_slice(&x[..n]);
        z.alpha.copy_from_slice(&x[n..]);
        z.theta.copy_from_slice(&t.lse);
        for (c, cell) in inst.cells().iter().enumerate() {
            for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
                z.gamma[k] = z.pi[c] - (1.0 - z.alpha[c]) * bin.lambda - z.theta[c];
            }
        }
        z
    }

    /// Augmented Lagrangian (maximised), its gradient and optionally its
    /// Hessian.
    fn evaluate(&self, x: &[f64], mult: &Multipliers, r: f64, hessian: bool) -> Evaluation {
        let inst = self.inst;
        let n = self.n();
        let b = inst.bounds;
        let t = self.terms(x);
        let z = self.expand(x, &t);
        let mut grad = vec![0.0; 2 * n];
        let mut hess = hessian.then(|| DMatrix::<f64>::zeros(2 * n, 2 * n));
        let (mut value, mut penalty, mut violation) = (0.0, 0.0, 0.0_f64);
        let mut shift = |m: f64, gap: f64| {
            violation = violation.max(gap);
            let s = m + r * gap;
            let st = s.max(0.0);
            penalty += st * st - m * m;
            (st, s > 0.0)
        };
        for (c, cell) in inst.cells().iter().enumerate() {
            let (mut s1, mut s1l) = (0.0, 0.0);
            let mut quad = [[0.0; 3]; 3];
            for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
                let g = z.gamma[k];
                let w = cell.load * bin.prob;
                value += w * utility(g);
                let (kt, active) = shift(mult.floor[k], inst.gamma_floor()[k] - g);
                let m = w * utility_derivative(g) + kt;
                s1 += m;
                s1l += m * bin.lambda;
                if hessian {
                    let curv = w * utility_second_derivative(g) - if active { r } else { 0.0 };
                    let v = [1.0, bin.lambda, -1.0];
                    for i in 0..3 {
                        for j in 0..3 {
                            quad[i][j] += curv * v[i] * v[j];
                        }
                    }
                }
            }
            let (nt, cap_active) = shift(mult.cap[c], t.lse[c] - b.theta_max);
            let (pt, power_active) = shift(mult.power[c], z.pi[c] + z.alpha[c] * self.lambda_max[c] - inst.ln_p_max());
            let mu2 = s1 + nt;
            grad[c] += s1 - pt;
            grad[n + c] += s1l - pt * self.lambda_max[c];
            let incoming = inst.incoming(c);
            for k in incoming.clone() {
                let s = inst.edges()[k].source;
                grad[s] -= mu2 * t.weight[k];
                grad[n + s] -= mu2 * t.weight[k] * t.dterm[k];
            }
            let Some(h) = hess.as_mut() else { continue };
            // Hessian of the interference is block-diagonal per source minus
            // the outer product of its gradient; the latter joins the 3x3 form.
            quad[2][2] += mu2 - if cap_active { r } else { 0.0 };
            let mut support: Vec<(usize, [f64; 3])> = vec![(c, [1.0, 0.0, 0.0]), (n + c, [0.0, 1.0, 0.0])];
            for k in incoming.clone() {
                let s = inst.edges()[k].source;
                if t.weight[k] > 0.0 {
                    support.push((s, [0.0, 0.0, t.weight[k]]));
                    support.push((n + s, [0.0, 0.0, t.weight[k] * t.dterm[k]]));
                }
            }
            for &(i, bi) in &support {
                let qi: [f64; 3] = std::array::from_fn(|a| (0..3).map(|j| quad[a][j] * bi[j]).sum());
                for &(j, bj) in &support {
                    h[(i, j)] += qi[0] * bj[0] + qi[1] * bj[1] + qi[2] * bj[2];
                }
            }
            for k in incoming {
                let s = inst.edges()[k].source;
                let (w, d) = (t.weight[k], t.dterm[k]);
                let c11 = self.form.fits[k].cov[0][0];
                h[(s, s)] -= mu2 * w;
                h[(s, n + s)] -= mu2 * w * d;
                h[(n + s, s)] -= mu2 * w * d;
                h[(n + s, n + s)] -= mu2 * w * (d * d + c11);
            }
            if power_active {
                let l = self.lambda_max[c];
                h[(c, c)] -= r;
                h[(c, n + c)] -= r * l;
                h[(n + c, c)] -= r * l;
                h[(n + c, n + c)] -= r * l * l;
            }
        }
        Evaluation { value: value - penalty / (2.0 * r), grad, hess, violation }
    }

    /// Multipliers after the first-order update at `x`.
    fn update(&self, x: &[f64], mult: &Multipliers, r: f64) -> Multipliers {
        let inst = self.inst;
        let n = self.n();
        let t = self.terms(x);
        let z = self.expand(x, &t);
        let up = |m: f64, gap: f64| (m + r * gap).max(0.0);
        Multipliers {
            cap: (0..n).map(|c| up(mult.cap[c], t.lse[c] - inst.bounds.theta_max)).collect(),
            floor: (0..inst.num_gamma()).map(|k| up(mult.floor[k], inst.gamma_floor()[k] - z.gamma[k])).collect(),
            power: (0..n).map(|c| up(mult.power[c], z.pi[c] + z.alpha[c] * self.lambda_max[c] - inst.ln_p_max())).collect(),
        }
    }

    /// Full-program primal and multipliers at `x`.
    fn certificate(&self, x: &[f64], mult: &Multipliers) -> (PrimalState, DualState) {
        let inst = self.inst;
        let t = self.terms(x);
        let mut z = self.expand(x, &t);
        let mut dual = DualState::zeros(inst);
        for (c, cell) in inst.cells().iter().enumerate() {
            let mut s1 = 0.0;
            for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
                let m = cell.load * bin.prob * utility_derivative(z.gamma[k]) + mult.floor[k];
                dual.block1[k] = m;
                s1 += m;
            }
            dual.block2[c] = s1 + mult.cap[c];
            dual.block3[self.deepest[c]] = mult.power[c];
        }
        z.project(inst);
        (z, dual)
    }
}

const ARMIJO: f64 = 1e-4;
const ROUNDING: f64 = 1e-11;

/// Projected Newton ascent on the box with an epsilon-active set; the
/// free block is solved by Cholesky with a growing diagonal shift when the
/// reduced Hessian is not safely negative definite. Returns iterations used.
fn newton(red: &Reduced, x: &mut Vec<f64>, mult: &Multipliers, r: f64, tol: f64, budget: usize) -> usize {
    let dim = x.len();
    let mut it = 0;
    let mut ev = red.evaluate(x, mult, r, true);
    while it < budget {
        let pg = red.projected_gradient_norm(x, &ev.grad);
        if pg <= tol {
            break;
        }
        it += 1;
        let eps = pg.min(1e-3);
        let g = &ev.grad;
        let free: Vec<usize> = (0..dim)
            .filter(|&i| !((x[i] - red.lower(i) <= eps && g[i] < 0.0) || (red.upper(i) - x[i] <= eps && g[i] > 0.0)))
            .collect();
        let h = ev.hess.as_ref().expect("hessian requested");
        let mut a = DMatrix::<f64>::from_fn(free.len(), free.len(), |i, j| -h[(free[i], free[j])]);
        let rhs = DVector::<f64>::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        let scale = (0..free.len()).fold(1e-12_f64, |m, i| m.max(a[(i, i)].abs()));
        let mut shift = 0.0;
        let df = loop {
            if let Some(ch) = a.clone().cholesky() {
                break ch.solve(&rhs);
            }
            let next = if shift == 0.0 { 1e-10 * scale } else { shift * 10.0 };
            for i in 0..free.len() {
                a[(i, i)] += next - shift;
            }
            shift = next;
        };
        let mut d = g.clone();
        for (i, &fi) in free.iter().enumerate() {
            d[fi] = df[i];
        }
        let mut step = 1.0;
        let next = loop {
            let mut cand: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + step * b).collect();
            red.project(&mut cand);
            let gain: f64 = cand.iter().zip(x.iter()).zip(g).map(|((a, b), gi)| gi * (a - b)).sum();
            let trial = red.evaluate(&cand, mult, r, false);
            if trial.value >= ev.value + ARMIJO * gain || step < 1e-14 {
                break cand;
            }
            // Below the rounding noise of the objective, fall back to the
            // projected gradient as the merit.
            if gain.abs() <= ROUNDING * (1.0 + ev.value.abs()) && red.projected_gradient_norm(&cand, &trial.grad) < pg {
                break cand;
            }
            step *= 0.5;
        };
        *x = next;
        ev = red.evaluate(x, mult, r, true);
    }
    it
}

/// Solves the certainty-equivalent program.
///
/// Works on `(pi, alpha)` with theta and gamma eliminated at their tight
/// values; the noise cap, the gamma floors and the power cap are handled by
/// the method of multipliers with projected Newton inner solves.
/// Convergence is certified by the KKT residual of the full program.
pub fn solve_ce(inst: &ProblemInstance, fit: &GaussianFit, config: &CeConfig) -> Result<CeOutput, SolverError> {
    if !(config.kkt_tolerance > 0.0 && config.initial_penalty > 0.0 && config.max_penalty >= config.initial_penalty) {
        return Err(SolverError::InvalidConfig("CE tolerances and penalties must be positive".into()));
    }
    let form = CeForm::new(inst, fit)?;
    let red = Reduced::new(inst, &form);
    let mut x = red.start();
    let mut mult = Multipliers { cap: vec![0.0; inst.num_cells()], floor: vec![0.0; inst.num_gamma()], power: vec![0.0; inst.num_cells()] };
    let mut r = config.initial_penalty;
    let mut trace = CeTrace::default();
    let mut used = 0;
    let mut inner_tol = 1e-2;
    let mut last_violation = f64::INFINITY;
    for outer in 1.. {
        let n = newton(&red, &mut x, &mult, r, inner_tol, config.max_iterations - used);
        used += n;
        let violation = red.evaluate(&x, &mult, r, false).violation.max(0.0);
        mult = red.update(&x, &mult, r);
        let (z, mu) = red.certificate(&x, &mult);
        let residual = kkt_residual(inst, &z, &mu, &form);
        trace.steps.push(CeStep { outer, inner_iterations: n, objective: objective(inst, &z), max_violation: violation, kkt_residual: residual, penalty: r });
        log::debug!("ce outer {outer}: inner {n}, violation {violation:.3e}, kkt {residual:.3e}, penalty {r:.1e}");
        if residual < config.kkt_tolerance {
            let solution = decode_solution(&z, inst, Provenance::Ce);
            return Ok(CeOutput { solution, trace, primal: z, dual: mu, kkt_residual: residual });
        }
        let stalled = outer > 200;
        if used >= config.max_iterations || stalled {
            return Err(SolverError::NotConverged { iterations: used, residual });
        }
        if violation > 0.25 * last_violation && r < config.max_penalty {
            r = (r * 10.0).min(config.max_penalty);
        }
        last_violation = violation;
        inner_tol = (inner_tol * 0.1).max(1e-2 * config.kkt_tolerance);
    }
    unreachable!("the outer loop only exits by returning")
}
