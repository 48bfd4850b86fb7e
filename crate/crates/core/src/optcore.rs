//! The IoT-control program in the log domain: variables, bounds, utility,
//! the constraint map `h`, the Lagrangian and its gradient, and two oracles
//! for the expected log-interference (exact enumeration and Monte Carlo).
//!
//! Cells are indexed densely in ascending id order. Only cells with at least
//! one UE take part; edges are grouped by interfered cell so that every
//! per-cell reduction runs in a fixed order.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurements::MeasurementStatistics;
use crate::netmodel::CellId;
use crate::rng;
use crate::units::{db_to_linear, db_to_nat, dbm_to_watts, default_noise_dbm_per_rb};

pub const DEFAULT_ENUMERATION_CAP: f64 = 1e7;
const PAR_MIN_LEN: usize = 2048;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("enumeration needs {outcomes:.3e} outcomes for {cell}, above the cap of {cap:.0e}")]
    EnumerationInfeasible { cell: CellId, outcomes: f64, cap: f64 },
    #[error("invalid constants: {0}")]
    InvalidConstants(String),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
}

/// User-facing optimisation constants, in engineering units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptSettings {
    pub n0_dbm_per_rb: f64,
    pub p_max_w_per_rb: f64,
    pub iot_cap_db: f64,
    pub gamma_min_db: f64,
}

impl Default for OptSettings {
    fn default() -> Self {
        Self { n0_dbm_per_rb: default_noise_dbm_per_rb(), p_max_w_per_rb: 0.1, iot_cap_db: 20.0, gamma_min_db: -10.0 }
    }
}

/// Physical constants of the program: powers in W/RB, `gamma_min` in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub p_max_w: f64,
    pub n0_w: f64,
    pub i_max_w: f64,
    pub gamma_min: f64,
}

impl Constants {
    /// The interference cap sits `iot_cap_db - 2 * bin_width_db` above the
    /// noise floor, leaving a cushion for binning error.
    pub fn from_settings(settings: &OptSettings, bin_width_db: f64) -> Result<Self, OptError> {
        let c = Self {
            p_max_w: settings.p_max_w_per_rb,
            n0_w: dbm_to_watts(settings.n0_dbm_per_rb),
            i_max_w: dbm_to_watts(settings.n0_dbm_per_rb) * db_to_linear(settings.iot_cap_db - 2.0 * bin_width_db),
            gamma_min: db_to_nat(settings.gamma_min_db),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), OptError> {
        if !(self.p_max_w > 0.0 && self.n0_w > 0.0) {
            return Err(OptError::InvalidConstants("P_max and N0 must be positive".into()));
        }
        if !(self.i_max_w >= self.n0_w) {
            return Err(OptError::InvalidConstants(format!(
                "I_max ({:.3e} W) is below N0 ({:.3e} W); raise the IoT cap or shrink the bins",
                self.i_max_w, self.n0_w
            )));
        }
        if !self.gamma_min.is_finite() || self.gamma_min + self.n0_w.ln() > self.p_max_w.ln() {
            return Err(OptError::InvalidConstants("gamma_min leaves no room below P_max".into()));
        }
        Ok(())
    }
}

/// Box bounds of the primal variables, all in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub pi_min: f64,
    pub pi_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
}

impl Bounds {
    pub fn from_constants(c: &Constants) -> Self {
        let ln_n0 = c.n0_w.ln();
        let ln_pmax = c.p_max_w.ln();
        Self {
            pi_min: c.gamma_min + ln_n0,
            pi_max: ln_pmax,
            gamma_min: c.gamma_min,
            gamma_max: ln_pmax - ln_n0,
            theta_min: ln_n0,
            theta_max: c.i_max_w.ln(),
        }
    }
}

/// One serving-loss bin of a cell: log loss and probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServingBin {
    pub lambda: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellProblem {
    pub id: CellId,
    pub load: f64,
    pub bins: Vec<ServingBin>,
}

impl CellProblem {
    pub fn lambda_max(&self) -> f64 {
        self.bins.iter().map(|b| b.lambda).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One joint bin of an edge: log serving loss of the interferer's UE, log
/// cross loss to the interfered cell, probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointBin {
    pub xi1: f64,
    pub xi2: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeProblem {
    pub source: usize,
    pub target: usize,
    pub occupancy: f64,
    pub bins: Vec<JointBin>,
    cdf: Vec<f64>,
}

impl EdgeProblem {
    pub fn new(source: usize, target: usize, occupancy: f64, bins: Vec<JointBin>) -> Self {
        let mut acc = 0.0;
        let cdf = bins
            .iter()
            .map(|b| {
                acc += b.prob;
                acc
            })
            .collect();
        Self { source, target, occupancy, bins, cdf }
    }

    /// Draws a joint bin by inverse CDF from a uniform in [0, 1).
    pub fn sample_bin(&self, u: f64) -> &JointBin {
        let total = *self.cdf.last().expect("edge has bins");
        let i = self.cdf.partition_point(|&c| c <= u * total);
        &self.bins[i.min(self.bins.len() - 1)]
    }
}

/// The program's data: cells, edges, constants and bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    cells: Vec<CellProblem>,
    edges: Vec<EdgeProblem>,
    edges_by_target: Vec<Range<usize>>,
    edges_by_source: Vec<Vec<usize>>,
    gamma_offsets: Vec<usize>,
    gamma_floor: Vec<f64>,
    pub constants: Constants,
    pub bounds: Bounds,
}

impl ProblemInstance {
    /// Builds an instance from explicit cells and edges (indices into `cells`).
    pub fn new(cells: Vec<CellProblem>, mut edges: Vec<EdgeProblem>, constants: Constants) -> Result<Self, OptError> {
        constants.validate()?;
        for (i, c) in cells.iter().enumerate() {
            if c.bins.is_empty() {
                return Err(OptError::InvalidInstance(format!("{} has no serving bins", c.id)));
            }
            if !(c.load >= 0.0) {
                return Err(OptError::InvalidInstance(format!("{} has negative load", c.id)));
            }
            if cells[..i].iter().any(|o| o.id == c.id) {
                return Err(OptError::InvalidInstance(format!("duplicate {}", c.id)));
            }
        }
        for e in &edges {
            if e.source >= cells.len() || e.target >= cells.len() || e.source == e.target {
                return Err(OptError::InvalidInstance(format!("edge {} -> {} is out of range", e.source, e.target)));
            }
            if e.bins.is_empty() || !(0.0..=1.0).contains(&e.occupancy) {
                return Err(OptError::InvalidInstance(format!("edge {} -> {} is malformed", e.source, e.target)));
            }
        }
        edges.sort_by_key(|e| (e.target, e.source));
        if edges.windows(2).any(|w| (w[0].target, w[0].source) == (w[1].target, w[1].source)) {
            return Err(OptError::InvalidInstance("duplicate edge".into()));
        }
        let mut edges_by_target = Vec::with_capacity(cells.len());
        let mut start = 0;
        for c in 0..cells.len() {
            let end = start + edges[start..].iter().take_while(|e| e.target == c).count();
            edges_by_target.push(start..end);
            start = end;
        }
        let mut edges_by_source = vec![Vec::new(); cells.len()];
        for (k, e) in edges.iter().enumerate() {
            edges_by_source[e.source].push(k);
        }
        let bounds = Bounds::from_constants(&constants);
        let mut gamma_offsets = Vec::with_capacity(cells.len() + 1);
        let mut gamma_floor = Vec::new();
        gamma_offsets.push(0);
        for c in &cells {
            for b in &c.bins {
                // Deep bins that cannot reach gamma_min even at full power
                // against the interference cap get a reachable floor instead.
                let reachable = bounds.pi_max - b.lambda - bounds.theta_max;
                gamma_floor.push(bounds.gamma_min.min(reachable));
            }
            gamma_offsets.push(gamma_floor.len());
        }
        Ok(Self { cells, edges, edges_by_target, edges_by_source, gamma_offsets, gamma_floor, constants, bounds })
    }

    /// Builds the program from measurement statistics. Cells without UEs
    /// carry no objective terms and are left out.
    pub fn from_statistics(stats: &MeasurementStatistics, constants: Constants) -> Result<Self, OptError> {
        let mut index = BTreeMap::new();
        let mut cells = Vec::new();
        for (&id, hist) in &stats.serving {
            index.insert(id, cells.len());
            cells.push(CellProblem {
                id,
                load: stats.load.get(&id).copied().unwrap_or(0.0),
                bins: hist.bins.iter().map(|b| ServingBin { lambda: b.midpoint_nat(), prob: b.probability }).collect(),
            });
        }
        let mut edges = Vec::new();
        for (&(e, c), hist) in &stats.joint {
            let (Some(&s), Some(&t)) = (index.get(&e), index.get(&c)) else { continue };
            let bins = hist
                .bins
                .iter()
                .map(|b| {
                    let (xi1, xi2) = b.midpoints_nat();
                    JointBin { xi1, xi2, prob: b.probability }
                })
                .collect();
            edges.push(EdgeProblem::new(s, t, stats.graph.occupancy(e, c), bins));
        }
        Self::new(cells, edges, constants)
    }

    pub fn cells(&self) -> &[CellProblem] {
        &self.cells
    }

    pub fn edges(&self) -> &[EdgeProblem] {
        &self.edges
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn num_gamma(&self) -> usize {
        self.gamma_floor.len()
    }

    pub fn cell_index(&self, id: CellId) -> Option<usize> {
        self.cells.iter().position(|c| c.id == id)
    }

    /// Indices of the edges interfering at cell `c`.
    pub fn incoming(&self, c: usize) -> Range<usize> {
        self.edges_by_target[c].clone()
    }

    /// Indices of the edges whose interferer is cell `c`.
    pub fn outgoing(&self, c: usize) -> &[usize] {
        &self.edges_by_source[c]
    }

    /// Flat index range of cell `c`'s gamma (and block1/block3) entries.
    pub fn gamma_range(&self, c: usize) -> Range<usize> {
        self.gamma_offsets[c]..self.gamma_offsets[c + 1]
    }

    /// Per-bin lower bound of gamma.
    pub fn gamma_floor(&self) -> &[f64] {
        &self.gamma_floor
    }

    pub fn ln_n0(&self) -> f64 {
        self.constants.n0_w.ln()
    }

    pub fn ln_p_max(&self) -> f64 {
        self.constants.p_max_w.ln()
    }

    /// Number of outcomes the exact oracle would enumerate at cell `c`.
    pub fn enumeration_size(&self, c: usize) -> f64 {
        self.incoming(c).map(|k| (self.edges[k].bins.len() + 1) as f64).product()
    }
}

/// Primal variables, cell-indexed vectors plus a flat gamma grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalState {
    pub pi: Vec<f64>,
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub gamma: Vec<f64>,
}

impl PrimalState {
    pub fn zeros(inst: &ProblemInstance) -> Self {
        let n = inst.num_cells();
        Self { pi: vec![0.0; n], alpha: vec![0.0; n], theta: vec![0.0; n], gamma: vec![0.0; inst.num_gamma()] }
    }

    /// Mid-box start: pi and theta at the middle of their ranges, alpha 0.8,
    /// gamma making block1 tight (clamped into its box).
    pub fn initial(inst: &ProblemInstance) -> Self {
        let b = &inst.bounds;
        let n = inst.num_cells();
        let mut z = Self {
            pi: vec![0.5 * (b.pi_min + b.pi_max); n],
            alpha: vec![0.8; n],
            theta: vec![b.theta_min + 0.5 * (b.theta_max - b.theta_min); n],
            gamma: vec![0.0; inst.num_gamma()],
        };
        z.tighten_gamma(inst);
        z
    }

    /// Sets every gamma to the largest value block1 allows, within its box.
    pub fn tighten_gamma(&mut self, inst: &ProblemInstance) {
        let b = inst.bounds;
        for (c, cell) in inst.cells().iter().enumerate() {
            for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
                let tight = self.pi[c] - (1.0 - self.alpha[c]) * bin.lambda - self.theta[c];
                self.gamma[k] = tight.clamp(inst.gamma_floor[k], b.gamma_max);
            }
        }
    }

    pub fn project(&mut self, inst: &ProblemInstance) {
        let b = inst.bounds;
        for v in &mut self.pi {
            *v = v.clamp(b.pi_min, b.pi_max);
        }
        for v in &mut self.alpha {
            *v = v.clamp(0.0, 1.0);
        }
        for v in &mut self.theta {
            *v = v.clamp(b.theta_min, b.theta_max);
        }
        for (v, &lo) in self.gamma.iter_mut().zip(&inst.gamma_floor) {
            *v = v.clamp(lo, b.gamma_max);
        }
    }

    pub fn within_bounds(&self, inst: &ProblemInstance) -> bool {
        let b = inst.bounds;
        self.pi.iter().all(|&v| (b.pi_min..=b.pi_max).contains(&v))
            && self.alpha.iter().all(|&v| (0.0..=1.0).contains(&v))
            && self.theta.iter().all(|&v| (b.theta_min..=b.theta_max).contains(&v))
            && self.gamma.iter().zip(&inst.gamma_floor).all(|(&v, &lo)| v >= lo && v <= b.gamma_max)
    }

    pub fn len(&self) -> usize {
        3 * self.pi.len() + self.gamma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        [&self.pi[..], &self.alpha, &self.theta, &self.gamma].concat()
    }

    pub fn from_flat(inst: &ProblemInstance, flat: &[f64]) -> Self {
        let n = inst.num_cells();
        assert_eq!(flat.len(), 3 * n + inst.num_gamma(), "flat primal has the wrong length");
        Self {
            pi: flat[..n].to_vec(),
            alpha: flat[n..2 * n].to_vec(),
            theta: flat[2 * n..3 * n].to_vec(),
            gamma: flat[3 * n..].to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.pi.iter().chain(&self.alpha).chain(&self.theta).chain(&self.gamma)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.pi.iter_mut().chain(self.alpha.iter_mut()).chain(self.theta.iter_mut()).chain(self.gamma.iter_mut())
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += scale * b;
        }
    }

    /// Names a flat coordinate for error messages.
    pub fn coordinate_name(inst: &ProblemInstance, k: usize) -> String {
        let n = inst.num_cells();
        match k {
            k if k < n => format!("pi[{}]", inst.cells[k].id),
            k if k < 2 * n => format!("alpha[{}]", inst.cells[k - n].id),
            k if k < 3 * n => format!("theta[{}]", inst.cells[k - 2 * n].id),
            k => {
                let g = k - 3 * n;
                let c = inst.gamma_offsets.partition_point(|&o| o <= g) - 1;
                format!("gamma[{}, bin {}]", inst.cells[c].id, g - inst.gamma_offsets[c])
            }
        }
    }
}

/// Values of the three constraint blocks; the same shape holds multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    pub block1: Vec<f64>,
    pub block2: Vec<f64>,
    pub block3: Vec<f64>,
}

pub type ConstraintValues = BlockVector;
pub type DualState = BlockVector;

impl BlockVector {
    pub fn zeros(inst: &ProblemInstance) -> Self {
        Self { block1: vec![0.0; inst.num_gamma()], block2: vec![0.0; inst.num_cells()], block3: vec![0.0; inst.num_gamma()] }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.block1.iter().chain(&self.block2).chain(&self.block3)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.block1.iter_mut().chain(self.block2.iter_mut()).chain(self.block3.iter_mut())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Largest positive entry, 0 when all entries are non-positive.
    pub fn max_positive(&self) -> f64 {
        self.iter().fold(0.0, |m, &v| m.max(v))
    }
}

/// One realisation of the interference randomness: per edge, whether the
/// interferer is present and the log losses `(xi1, xi2)` drawn for it.
#[derive(Debug, Clone, PartialEq)]
pub struct InterferenceDraw {
    pub present: Vec<bool>,
    pub xi: Vec<(f64, f64)>,
}

impl InterferenceDraw {
    /// Draw with every edge present at its first joint bin.
    pub fn first_bins(inst: &ProblemInstance) -> Self {
        Self { present: vec![true; inst.edges.len()], xi: inst.edges.iter().map(|e| (e.bins[0].xi1, e.bins[0].xi2)).collect() }
    }

    /// Samples the draw for the edges into cell `c`.
    pub fn sample_cell<R: Rng>(&mut self, inst: &ProblemInstance, c: usize, rng: &mut R) {
        for k in inst.incoming(c) {
            let edge = &inst.edges[k];
            self.present[k] = rng.random::<f64>() < edge.occupancy;
            if self.present[k] {
                let bin = edge.sample_bin(rng.random());
                self.xi[k] = (bin.xi1, bin.xi2);
            }
        }
    }
}

/// How block2 turns an edge into a log-scale interference term.
pub trait Block2Form: Sync {
    /// Log of edge `k`'s contribution at the source's `(pi, alpha)` and the
    /// derivative of that log in alpha; `None` when the edge is silent.
    fn term(&self, inst: &ProblemInstance, k: usize, pi: f64, alpha: f64) -> Option<(f64, f64)>;
}

/// Block2 under a sampled draw.
#[derive(Debug, Clone, Copy)]
pub struct SampledForm<'a>(pub &'a InterferenceDraw);

impl Block2Form for SampledForm<'_> {
    fn term(&self, _inst: &ProblemInstance, k: usize, pi: f64, alpha: f64) -> Option<(f64, f64)> {
        let draw = self.0;
        draw.present[k].then(|| {
            let (xi1, xi2) = draw.xi[k];
            (pi + alpha * xi1 - xi2, xi1)
        })
    }
}

// ---------------------------------------------------------------------------
// Utility

/// `V(gamma) = ln ln(1 + e^gamma)`, stable over the whole real line.
pub fn utility(gamma: f64) -> f64 {
    if gamma > 30.0 {
        // ln(1 + e^g) = g + ln1p(e^-g)
        gamma.ln() + (-gamma).exp().ln_1p() / gamma
    } else if gamma < -30.0 {
        // ln(1 + x) = x (1 - x/2 + x^2/3 ...), x = e^g
        let x = gamma.exp();
        gamma + (-x / 2.0 + x * x / 3.0).ln_1p()
    } else {
        softplus(gamma).ln()
    }
}

/// `V'(gamma) = sigmoid(gamma) / ln(1 + e^gamma)`.
pub fn utility_derivative(gamma: f64) -> f64 {
    if gamma > 30.0 {
        1.0 / (gamma + (-gamma).exp().ln_1p())
    } else if gamma < -30.0 {
        let x = gamma.exp();
        1.0 - x / 2.0
    } else {
        sigmoid(gamma) / softplus(gamma)
    }
}

/// `V''(gamma)`, written so neither tail cancels.
pub fn utility_second_derivative(gamma: f64) -> f64 {
    let l = softplus(gamma);
    if gamma > 0.0 {
        let e = (-gamma).exp();
        (e * l - 1.0) / ((1.0 + e) * (1.0 + e) * l * l)
    } else {
        let x = gamma.exp();
        // ln(1 + x) - x
        let lx = if x < 1e-3 { x * x * (-0.5 + x * (1.0 / 3.0 + x * (-0.25 + x * (0.2 - x / 6.0)))) } else { x.ln_1p() - x };
        x * lx / ((1.0 + x) * (1.0 + x) * l * l)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sum_c rho_c sum_b p_c(b) V(gamma_c(b))`.
pub fn objective(inst: &ProblemInstance, z: &PrimalState) -> f64 {
    let mut total = 0.0;
    for (c, cell) in inst.cells.iter().enumerate() {
        let mut s = 0.0;
        for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
            s += bin.prob * utility(z.gamma[k]);
        }
        total += cell.load * s;
    }
    total
}

// ---------------------------------------------------------------------------
// Constraints, Lagrangian, gradient

fn log_sum_exp_with(base: f64, terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = terms.clone().fold(base, f64::max);
    let s: f64 = (base - m).exp() + terms.map(|t| (t - m).exp()).sum::<f64>();
    m + s.ln()
}

/// Per-edge alpha derivatives and, per interfered cell, the log of total interference
/// plus noise and the softmax weight of every incoming term.
struct Block2Eval {
    dterm: Vec<f64>,
    lse: Vec<f64>,
    weight: Vec<f64>,
}

fn eval_block2<F: Block2Form>(inst: &ProblemInstance, z: &PrimalState, form: &F) -> Block2Eval {
    let (term, dterm): (Vec<f64>, Vec<f64>) = inst
        .edges
        .par_iter()
        .with_min_len(PAR_MIN_LEN)
        .enumerate()
        .map(|(k, e)| form.term(inst, k, z.pi[e.source], z.alpha[e.source]).unwrap_or((f64::NEG_INFINITY, 0.0)))
        .unzip();
    let ln_n0 = inst.ln_n0();
    let mut weight = vec![0.0; term.len()];
    let lse = (0..inst.num_cells())
        .map(|c| {
            let r = inst.incoming(c);
            let m = term[r.clone()].iter().fold(ln_n0, |a, &t| a.max(t));
            let mut total = (ln_n0 - m).exp();
            for k in r.clone() {
                // exp(-inf) is 0, so silent edges get zero weight.
                weight[k] = (term[k] - m).exp();
                total += weight[k];
            }
            for w in &mut weight[r] {
                *w /= total;
            }
            m + total.ln()
        })
        .collect();
    Block2Eval { dterm, lse, weight }
}

/// The constraint map `h`; feasibility means every entry is at most zero.
pub fn constraint_h<F: Block2Form>(inst: &ProblemInstance, z: &PrimalState, form: &F) -> ConstraintValues {
    let b2 = eval_block2(inst, z, form);
    constraint_h_with(inst, z, &b2)
}

fn constraint_h_with(inst: &ProblemInstance, z: &PrimalState, b2: &Block2Eval) -> ConstraintValues {
    let mut h = BlockVector::zeros(inst);
    let ln_pmax = inst.ln_p_max();
    for (c, cell) in inst.cells.iter().enumerate() {
        for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
            h.block1[k] = z.gamma[k] - z.pi[c] + (1.0 - z.alpha[c]) * bin.lambda + z.theta[c];
            h.block3[k] = z.pi[c] + z.alpha[c] * bin.lambda - ln_pmax;
        }
        h.block2[c] = b2.lse[c] - z.theta[c];
    }
    h
}

/// `L = objective - dual . h`.
pub fn lagrangian<F: Block2Form>(inst: &ProblemInstance, z: &PrimalState, dual: &DualState, form: &F) -> f64 {
    objective(inst, z) - dual.dot(&constraint_h(inst, z, form))
}

/// Gradient of the Lagrangian in the primal variables.
pub fn lagrangian_gradient<F: Block2Form>(inst: &ProblemInstance, z: &PrimalState, dual: &DualState, form: &F) -> PrimalState {
    constraints_and_gradient(inst, z, dual, form).1
}

/// `h` and the Lagrangian gradient from one pass over the edges.
pub fn constraints_and_gradient<F: Block2Form>(
    inst: &ProblemInstance,
    z: &PrimalState,
    dual: &DualState,
    form: &F,
) -> (ConstraintValues, PrimalState) {
    let b2 = eval_block2(inst, z, form);
    let h = constraint_h_with(inst, z, &b2);
    let mut g = PrimalState::zeros(inst);
    for (c, cell) in inst.cells.iter().enumerate() {
        let (mut s1, mut s1l, mut s3, mut s3l) = (0.0, 0.0, 0.0, 0.0);
        for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
            let (m1, m3) = (dual.block1[k], dual.block3[k]);
            g.gamma[k] = cell.load * bin.prob * utility_derivative(z.gamma[k]) - m1;
            s1 += m1;
            s1l += m1 * bin.lambda;
            s3 += m3;
            s3l += m3 * bin.lambda;
        }
        g.theta[c] = dual.block2[c] - s1;
        g.pi[c] = s1 - s3;
        g.alpha[c] = s1l - s3l;
    }
    // Each interfered cell pulls on its interferers through softmax weights.
    for (k, e) in inst.edges.iter().enumerate() {
        let m2 = dual.block2[e.target];
        let w = b2.weight[k];
        if m2 == 0.0 || w == 0.0 {
            continue;
        }
        g.pi[e.source] -= m2 * w;
        g.alpha[e.source] -= m2 * w * b2.dterm[k];
    }
    (h, g)
}

/// Softmax weight of each edge in its target's block2 (zero when silent).
pub fn block2_weights<F: Block2Form>(inst: &ProblemInstance, z: &PrimalState, form: &F) -> Vec<f64> {
    eval_block2(inst, z, form).weight
}

// ---------------------------------------------------------------------------
// Expected log-interference oracles

/// Exact `E[ln(sum chi e^(pi + alpha xi1 - xi2) + N0)]` at cell `c` by
/// enumerating every joint outcome of the incoming edges.
pub fn expected_log_interference_exact(inst: &ProblemInstance, z: &PrimalState, c: usize) -> Result<f64, OptError> {
    expected_log_interference_exact_capped(inst, z, c, DEFAULT_ENUMERATION_CAP)
}

pub fn expected_log_interference_exact_capped(inst: &ProblemInstance, z: &PrimalState, c: usize, cap: f64) -> Result<f64, OptError> {
    let outcomes = inst.enumeration_size(c);
    if outcomes > cap {
        return Err(OptError::EnumerationInfeasible { cell: inst.cells[c].id, outcomes, cap });
    }
    // Per edge: (probability, linear contribution) of every outcome.
    let options: Vec<Vec<(f64, f64)>> = inst
        .incoming(c)
        .map(|k| {
            let e = &inst.edges[k];
            let (pi, alpha) = (z.pi[e.source], z.alpha[e.source]);
            let mut v = vec![(1.0 - e.occupancy, 0.0)];
            v.extend(e.bins.iter().map(|b| (e.occupancy * b.prob, (pi + alpha * b.xi1 - b.xi2).exp())));
            v
        })
        .collect();
    // Accumulated relative to the noise floor so the sum keeps its precision
    // when interference is far below N0.
    fn walk(options: &[Vec<(f64, f64)>], prob: f64, sum: f64, n0: f64) -> f64 {
        match options.split_first() {
            None => prob * (sum / n0).ln_1p(),
            Some((first, rest)) => first
                .iter()
                .filter(|(p, _)| *p > 0.0)
                .map(|&(p, x)| walk(rest, prob * p, sum + x, n0))
                .sum(),
        }
    }
    let n0 = inst.constants.n0_w;
    Ok(n0.ln() + walk(&options, 1.0, 0.0, n0))
}

/// Monte Carlo estimate of the same expectation with its standard error.
pub fn expected_log_interference_mc(inst: &ProblemInstance, z: &PrimalState, c: usize, samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = rng::stream2(seed, "mc-interference", inst.cells[c].id.0 as u64, 0);
    let n0 = inst.constants.n0_w;
    let edges: Vec<(&EdgeProblem, f64, f64)> = inst
        .incoming(c)
        .map(|k| {
            let e = &inst.edges[k];
            (e, z.pi[e.source], z.alpha[e.source])
        })
        .collect();
    let (mut mean, mut m2) = (0.0, 0.0);
    for n in 1..=samples.max(1) {
        let mut sum = 0.0;
        for &(e, pi, alpha) in &edges {
            if rng.random::<f64>() < e.occupancy {
                let b = e.sample_bin(rng.random());
                sum += (pi + alpha * b.xi1 - b.xi2).exp();
            }
        }
        let x = (sum / n0).ln_1p();
        let d = x - mean;
        mean += d / n as f64;
        m2 += d * (x - mean);
    }
    let n = samples.max(1) as f64;
    let se = if n > 1.0 { (m2 / (n - 1.0)).max(0.0).sqrt() / n.sqrt() } else { 0.0 };
    (n0.ln() + mean, se)
}

/// Exact expectation where enumerable, Monte Carlo otherwise.
/// Returns `(estimate, standard_error, exact)`.
pub fn expected_log_interference(inst: &ProblemInstance, z: &PrimalState, c: usize, mc_samples: usize, seed: u64) -> (f64, f64, bool) {
    match expected_log_interference_exact(inst, z, c) {
        Ok(v) => (v, 0.0, true),
        Err(_) => {
            let (m, se) = expected_log_interference_mc(inst, z, c, mc_samples, seed);
            (m, se, false)
        }
    }
}

// ---------------------------------------------------------------------------
// Feasibility

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFeasibility {
    pub cell: CellId,
    /// Largest block1 entry of the cell.
    pub block1_max: f64,
    /// Expected block2 value and the standard error of its estimate.
    pub block2: f64,
    pub block2_se: f64,
    pub block2_exact: bool,
    pub block3_max: f64,
}

impl CellFeasibility {
    pub fn is_feasible(&self, tol: f64) -> bool {
        self.block1_max <= tol && self.block3_max <= tol && self.block2 <= 3.0 * self.block2_se + tol
    }

    /// Violation of block2 beyond its statistical margin.
    pub fn block2_excess(&self) -> f64 {
        (self.block2 - 3.0 * self.block2_se).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub cells: Vec<CellFeasibility>,
    pub tolerance: f64,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.cells.iter().all(|c| c.is_feasible(self.tolerance))
    }

    /// Largest positive entry over all blocks (block2 without its margin).
    pub fn max_violation(&self) -> f64 {
        self.cells.iter().fold(0.0, |m, c| m.max(c.block1_max).max(c.block2).max(c.block3_max))
    }

    /// Standard error attached to the largest block2 value.
    pub fn max_block2_se(&self) -> f64 {
        self.cells.iter().fold(0.0, |m, c| m.max(c.block2_se))
    }
}

pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;

/// Expected-constraint check: block1 and block3 deterministically, block2 by
/// the exact oracle when enumerable, otherwise Monte Carlo.
pub fn feasibility_check(inst: &ProblemInstance, z: &PrimalState, mc_samples: usize, seed: u64) -> FeasibilityReport {
    feasibility_check_with(inst, z, |c| expected_log_interference(inst, z, c, mc_samples, seed))
}

/// Same as [`feasibility_check`] with a caller-supplied block2 expectation
/// returning `(estimate, standard_error, exact)` per cell.
pub fn feasibility_check_with<E>(inst: &ProblemInstance, z: &PrimalState, expectation: E) -> FeasibilityReport
where
    E: Fn(usize) -> (f64, f64, bool) + Sync,
{
    let ln_pmax = inst.ln_p_max();
    let cells = (0..inst.num_cells())
        .into_par_iter()
        .map(|c| {
            let cell = &inst.cells[c];
            let mut b1 = f64::NEG_INFINITY;
            let mut b3 = f64::NEG_INFINITY;
            for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
                b1 = b1.max(z.gamma[k] - z.pi[c] + (1.0 - z.alpha[c]) * bin.lambda + z.theta[c]);
                b3 = b3.max(z.pi[c] + z.alpha[c] * bin.lambda - ln_pmax);
            }
            let (e, se, exact) = expectation(c);
            CellFeasibility { cell: cell.id, block1_max: b1, block2: e - z.theta[c], block2_se: se, block2_exact: exact, block3_max: b3 }
        })
        .collect();
    FeasibilityReport { cells, tolerance: FEASIBILITY_TOLERANCE }
}

/// Per-cell aggregate violation `max_b h1+ + h2+ + max_b h3+`, where
/// `expectation` gives the expected log-interference of each cell.
pub fn cell_violations<E>(inst: &ProblemInstance, z: &PrimalState, expectation: E) -> Vec<f64>
where
    E: Fn(usize) -> f64 + Sync,
{
    feasibility_check_with(inst, z, |c| (expectation(c), 0.0, true))
        .cells
        .iter()
        .map(|c| c.block1_max.max(0.0) + c.block2.max(0.0) + c.block3_max.max(0.0))
        .collect()
}

/// Feasibility restoration for an in-box primal: lower each pi until the
/// power cap holds for the cell's deepest bin, set theta to the expected
/// log-interference at the new powers (clamped), then raise or lower every
/// gamma to the tight value of block1 (clamped). Feasible points stay
/// feasible and no cell's aggregate violation grows.
pub fn restore_feasibility<E>(inst: &ProblemInstance, z: &PrimalState, expectation: E) -> PrimalState
where
    E: Fn(&PrimalState, usize) -> f64 + Sync,
{
    let b = inst.bounds;
    let ln_pmax = inst.ln_p_max();
    let mut out = z.clone();
    for (c, cell) in inst.cells.iter().enumerate() {
        let cap = ln_pmax - out.alpha[c] * cell.lambda_max();
        out.pi[c] = out.pi[c].min(cap).max(b.pi_min);
    }
    let theta: Vec<f64> = (0..inst.num_cells())
        .into_par_iter()
        .map(|c| expectation(&out, c).clamp(b.theta_min, b.theta_max))
        .collect();
    out.theta = theta;
    out.tighten_gamma(inst);
    out
}

// ---------------------------------------------------------------------------
// Inequalities used by the convergence argument

/// Both sides of `ln^2(sum_{i=0..k} e^{a_i}) <= ln^2(k+1) + (1 + 2 ln(k+1)) sum a_i^2`
/// where `a` holds `a_1..a_k` and `a_0 = 1` is implied.
pub fn ln2_sum_bound(a: &[f64]) -> (f64, f64) {
    let k1 = (a.len() + 1) as f64;
    let lse = log_sum_exp_with(1.0, a.iter().copied());
    let sq: f64 = 1.0 + a.iter().map(|x| x * x).sum::<f64>();
    (lse * lse, k1.ln().powi(2) + (1.0 + 2.0 * k1.ln()) * sq)
}

/// Both sides of `ln^2(x1 + x2) <= ln^2(e + x1 + x2) + ln^2(x2)`.
pub fn ln2_pair_bound(x1: f64, x2: f64) -> (f64, f64) {
    let s = x1 + x2;
    (s.ln().powi(2), (std::f64::consts::E + s).ln().powi(2) + x2.ln().powi(2))
}

// ---------------------------------------------------------------------------
// Synthetic instances for tests and benchmarks

pub mod synthetic {
    use super::*;
    use rand::seq::SliceRandom;

    #[derive(Debug, Clone)]
    pub struct InstanceSpec {
        pub cells: usize,
        pub max_serving_bins: usize,
        pub max_interferers: usize,
        pub max_joint_bins: usize,
        /// Fixed occupancy for every edge; random in (0, 1] when `None`.
        pub occupancy: Option<f64>,
        pub point_mass: bool,
    }

    impl Default for InstanceSpec {
        fn default() -> Self {
            Self { cells: 3, max_serving_bins: 4, max_interferers: 2, max_joint_bins: 3, occupancy: None, point_mass: false }
        }
    }

    fn probs<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }

    /// Random instance with losses in a realistic macro-cell range.
    pub fn random_instance<R: Rng>(rng: &mut R, spec: &InstanceSpec, constants: Constants) -> ProblemInstance {
        let nb = |rng: &mut R, max: usize| if spec.point_mass { 1 } else { rng.random_range(1..=max.max(1)) };
        let cells: Vec<CellProblem> = (0..spec.cells)
            .map(|i| {
                let n = nb(rng, spec.max_serving_bins);
                let mut lambdas: Vec<f64> = (0..n).map(|_| db_to_nat(rng.random_range(95.0..125.0))).collect();
                lambdas.sort_by(f64::total_cmp);
                let p = probs(rng, n);
                CellProblem {
                    id: CellId(i as u32),
                    load: rng.random_range(1.0..20.0_f64).round(),
                    bins: lambdas.into_iter().zip(p).map(|(lambda, prob)| ServingBin { lambda, prob }).collect(),
                }
            })
            .collect();
        let mut edges = Vec::new();
        for t in 0..spec.cells {
            let mut sources: Vec<usize> = (0..spec.cells).filter(|&s| s != t).collect();
            sources.shuffle(rng);
            let k = rng.random_range(0..=spec.max_interferers.min(sources.len()));
            for &s in &sources[..k] {
                let n = nb(rng, spec.max_joint_bins);
                let p = probs(rng, n);
                let bins = p
                    .into_iter()
                    .map(|prob| {
                        let own = rng.random_range(95.0..125.0);
                        let cross = own + rng.random_range(3.0..25.0);
                        JointBin { xi1: db_to_nat(own), xi2: db_to_nat(cross), prob }
                    })
                    .collect();
                let a = spec.occupancy.unwrap_or_else(|| rng.random_range(0.05..1.0));
                edges.push(EdgeProblem::new(s, t, a, bins));
            }
        }
        ProblemInstance::new(cells, edges, constants).expect("synthetic instance is valid")
    }

    /// Uniform random point inside the box.
    pub fn random_primal<R: Rng>(rng: &mut R, inst: &ProblemInstance) -> PrimalState {
        let b = inst.bounds;
        let n = inst.num_cells();
        PrimalState {
            pi: (0..n).map(|_| rng.random_range(b.pi_min..b.pi_max)).collect(),
            alpha: (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
            theta: (0..n).map(|_| rng.random_range(b.theta_min..b.theta_max)).collect(),
            gamma: inst.gamma_floor().iter().map(|&lo| rng.random_range(lo..b.gamma_max)).collect(),
        }
    }

    pub fn random_dual<R: Rng>(rng: &mut R, inst: &ProblemInstance) -> DualState {
        let mut d = DualState::zeros(inst);
        for v in d.iter_mut() {
            *v = rng.random_range(0.0..2.0);
        }
        d
    }

    pub fn random_draw<R: Rng>(rng: &mut R, inst: &ProblemInstance) -> InterferenceDraw {
        let mut d = InterferenceDraw::first_bins(inst);
        for c in 0..inst.num_cells() {
            d.sample_cell(inst, c, rng);
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::synthetic::*;
    use super::*;
    use proptest::prelude::*;

    const N0: f64 = 2.29e-15;

    fn constants() -> Constants {
        Constants { p_max_w: 0.1, n0_w: N0, i_max_w: N0 * db_to_linear(18.0), gamma_min: db_to_nat(-10.0) }
    }

    fn two_cell(a: f64) -> ProblemInstance {
        let cells = vec![
            CellProblem { id: CellId(0), load: 1.0, bins: vec![ServingBin { lambda: 1e8f64.ln(), prob: 1.0 }] },
            CellProblem { id: CellId(1), load: 1.0, bins: vec![ServingBin { lambda: 1e9f64.ln(), prob: 1.0 }] },
        ];
        let edges = vec![EdgeProblem::new(0, 1, a, vec![JointBin { xi1: 1e8f64.ln(), xi2: 1e10f64.ln(), prob: 1.0 }])];
        ProblemInstance::new(cells, edges, constants()).unwrap()
    }

    #[test]
    fn utility_examples() {
        assert!((utility(0.0) - (-0.366_512_920_581_664_3)).abs() < 1e-12);
        assert!(utility((std::f64::consts::E - 1.0).ln()).abs() < 1e-15);
        assert!((utility_derivative(0.0) - 0.5 / 2f64.ln()).abs() < 1e-12);
        let h = 1e-6;
        let fd = (utility(h) - utility(-h)) / (2.0 * h);
        assert!((utility_derivative(0.0) - fd).abs() < 1e-8);
    }

    #[test]
    fn utility_branches_are_continuous() {
        for &g in &[-30.0, 30.0] {
            let (lo, hi) = (g - 1e-9, g + 1e-9);
            assert!((utility(lo) - utility(hi)).abs() < 1e-8, "V jumps at {g}");
            assert!((utility_derivative(lo) - utility_derivative(hi)).abs() < 1e-8, "V' jumps at {g}");
        }
        assert!(utility(-800.0).is_finite());
        assert!((utility(-800.0) - (-800.0)).abs() < 1e-12);
        assert!((utility(1e6) - 1e6f64.ln()).abs() < 1e-12);
        assert!((utility_derivative(-800.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn objective_examples() {
        let cells = vec![CellProblem { id: CellId(0), load: 2.0, bins: vec![ServingBin { lambda: 20.0, prob: 1.0 }] }];
        let inst = ProblemInstance::new(cells, vec![], constants()).unwrap();
        let mut z = PrimalState::zeros(&inst);
        z.gamma[0] = 0.0;
        assert!((objective(&inst, &z) - 2.0 * utility(0.0)).abs() < 1e-15);
        let empty = ProblemInstance::new(vec![], vec![], constants()).unwrap();
        assert_eq!(objective(&empty, &PrimalState::zeros(&empty)), 0.0);
    }

    #[test]
    fn objective_matches_independent_sum() {
        let mut rng = rng::stream(3, "test", 0);
        let inst = random_instance(&mut rng, &InstanceSpec { cells: 3, ..Default::default() }, constants());
        let z = random_primal(&mut rng, &inst);
        let mut expect = 0.0;
        let mut k = 0;
        for cell in inst.cells() {
            for bin in &cell.bins {
                let g: f64 = z.gamma[k];
                expect += cell.load * bin.prob * (1.0 + g.exp()).ln().ln();
                k += 1;
            }
        }
        assert!((objective(&inst, &z) - expect).abs() < 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn bounds_follow_constants() {
        let c = constants();
        let b = Bounds::from_constants(&c);
        assert_eq!(b.pi_max, 0.1f64.ln());
        assert!((b.pi_min - (c.gamma_min + N0.ln())).abs() < 1e-15);
        assert!((b.gamma_max - (0.1f64.ln() - N0.ln())).abs() < 1e-12);
        assert_eq!(b.theta_min, N0.ln());
        let s = Constants::from_settings(&OptSettings::default(), 1.0).unwrap();
        assert!((crate::units::linear_to_db(s.i_max_w / s.n0_w) - 18.0).abs() < 1e-9);
    }

    #[test]
    fn block2_noise_floor_identity() {
        let inst = two_cell(1.0);
        let mut z = PrimalState::initial(&inst);
        z.theta[1] = inst.ln_n0();
        let draw = InterferenceDraw { present: vec![false], xi: vec![(0.0, 0.0)] };
        let h = constraint_h(&inst, &z, &SampledForm(&draw));
        assert_eq!(h.block2[1], 0.0);
    }

    #[test]
    fn block2_hand_example() {
        let inst = two_cell(1.0);
        let mut z = PrimalState::initial(&inst);
        z.pi[0] = 1e-3f64.ln();
        z.alpha[0] = 1.0;
        z.theta[1] = -20.0;
        let draw = InterferenceDraw::first_bins(&inst);
        let h = constraint_h(&inst, &z, &SampledForm(&draw));
        let expect = (1.0e-5 + N0).ln();
        assert!((expect - (-11.5129)).abs() < 1e-4);
        assert!((h.block2[1] - (expect + 20.0)).abs() < 1e-12);
        let w = block2_weights(&inst, &z, &SampledForm(&draw));
        assert!((w[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn block1_tight_is_zero() {
        let mut rng = rng::stream(4, "test", 0);
        let inst = random_instance(&mut rng, &InstanceSpec::default(), constants());
        let mut z = random_primal(&mut rng, &inst);
        for (c, cell) in inst.cells().iter().enumerate() {
            for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
                z.gamma[k] = z.pi[c] - (1.0 - z.alpha[c]) * bin.lambda - z.theta[c];
            }
        }
        let h = constraint_h(&inst, &z, &SampledForm(&random_draw(&mut rng, &inst)));
        assert!(h.block1.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_dual_gradient_is_objective_gradient() {
        let mut rng = rng::stream(5, "test", 0);
        let inst = random_instance(&mut rng, &InstanceSpec::default(), constants());
        let z = random_primal(&mut rng, &inst);
        let draw = random_draw(&mut rng, &inst);
        let g = lagrangian_gradient(&inst, &z, &DualState::zeros(&inst), &SampledForm(&draw));
        assert!(g.pi.iter().chain(&g.alpha).chain(&g.theta).all(|&v| v == 0.0));
        for (c, cell) in inst.cells().iter().enumerate() {
            for (k, bin) in inst.gamma_range(c).zip(&cell.bins) {
                assert_eq!(g.gamma[k], cell.load * bin.prob * utility_derivative(z.gamma[k]));
            }
        }
    }

    pub(crate) fn fd_gradient_error<F: Block2Form>(inst: &ProblemInstance, z: &PrimalState, dual: &DualState, form: &F) -> f64 {
        let g = lagrangian_gradient(inst, z, dual, form).to_flat();
        let x = z.to_flat();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let lp = lagrangian(inst, &PrimalState::from_flat(inst, &xp), dual, form);
            let lm = lagrangian(inst, &PrimalState::from_flat(inst, &xm), dual, form);
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1.0));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rng::stream(6, "test", 0);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, &InstanceSpec { cells: 4, ..Default::default() }, constants());
            let z = random_primal(&mut rng, &inst);
            let dual = random_dual(&mut rng, &inst);
            let draw = random_draw(&mut rng, &inst);
            let err = fd_gradient_error(&inst, &z, &dual, &SampledForm(&draw));
            assert!(err < 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn exact_expectation_examples() {
        let cells = vec![CellProblem { id: CellId(0), load: 1.0, bins: vec![ServingBin { lambda: 20.0, prob: 1.0 }] }];
        let lonely = ProblemInstance::new(cells, vec![], constants()).unwrap();
        let z = PrimalState::initial(&lonely);
        assert_eq!(expected_log_interference_exact(&lonely, &z, 0).unwrap(), N0.ln());
        assert_eq!(expected_log_interference_mc(&lonely, &z, 0, 100, 1), (N0.ln(), 0.0));

        let inst = two_cell(0.5);
        let mut z = PrimalState::initial(&inst);
        z.pi[0] = 1e-3f64.ln();
        z.alpha[0] = 1.0;
        let e = expected_log_interference_exact(&inst, &z, 1).unwrap();
        assert!((e - (0.5 * (1.0e-5 + N0).ln() + 0.5 * N0.ln())).abs() < 1e-12);
        assert!((e - (-22.6116)).abs() < 1e-3, "{e}");

        let certain = two_cell(1.0);
        let (m, se) = expected_log_interference_mc(&certain, &z, 1, 1000, 3);
        assert_eq!(se, 0.0);
        assert!((m - expected_log_interference_exact(&certain, &z, 1).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let inst = two_cell(0.5);
        let z = PrimalState::initial(&inst);
        assert!(matches!(
            expected_log_interference_exact_capped(&inst, &z, 1, 1.0),
            Err(OptError::EnumerationInfeasible { .. })
        ));
    }

    #[test]
    fn exact_and_mc_agree() {
        let mut rng = rng::stream(7, "test", 0);
        let spec = InstanceSpec { cells: 3, max_interferers: 2, max_joint_bins: 2, ..Default::default() };
        let inst = random_instance(&mut rng, &spec, constants());
        let z = random_primal(&mut rng, &inst);
        for c in 0..inst.num_cells() {
            let exact = expected_log_interference_exact(&inst, &z, c).unwrap();
            let (m, se) = expected_log_interference_mc(&inst, &z, c, 200_000, 11);
            assert!((exact - m).abs() <= 3.0 * se + 1e-12, "cell {c}: {exact} vs {m} ± {se}");
        }
    }

    #[test]
    fn feasibility_reports_constructed_violation() {
        let inst = two_cell(1.0);
        let b = inst.bounds;
        let mut z = PrimalState::initial(&inst);
        z.pi = vec![b.pi_min; 2];
        z.theta = vec![b.theta_max; 2];
        z.gamma = vec![b.gamma_max; 2];
        let r = feasibility_check(&inst, &z, 100, 1);
        assert!(!r.feasible());
        assert!(r.cells.iter().all(|c| c.block1_max > 0.0));
    }

    #[test]
    fn restoration_makes_point_mass_instances_feasible() {
        let mut rng = rng::stream(8, "test", 0);
        let spec = InstanceSpec { cells: 4, point_mass: true, occupancy: Some(1.0), ..Default::default() };
        for _ in 0..20 {
            let inst = random_instance(&mut rng, &spec, constants());
            let z = random_primal(&mut rng, &inst);
            let exact = |z: &PrimalState, c: usize| expected_log_interference_exact(&inst, z, c).unwrap();
            let before = cell_violations(&inst, &z, |c| exact(&z, c));
            let r = restore_feasibility(&inst, &z, exact);
            let after = cell_violations(&inst, &r, |c| exact(&r, c));
            assert!(r.within_bounds(&inst));
            for (a, b) in after.iter().zip(&before) {
                assert!(*a <= *b + 1e-12, "{a} > {b}");
            }
        }
    }

    #[test]
    fn alpha_projection_clamps_to_one() {
        let inst = two_cell(1.0);
        let mut z = PrimalState::initial(&inst);
        z.alpha[0] = 1.2;
        z.alpha[1] = -0.3;
        z.project(&inst);
        assert_eq!(z.alpha, vec![1.0, 0.0]);
    }

    #[test]
    fn coordinate_names() {
        let inst = two_cell(1.0);
        assert_eq!(PrimalState::coordinate_name(&inst, 0), "pi[cell-0]");
        assert_eq!(PrimalState::coordinate_name(&inst, 3), "alpha[cell-1]");
        assert_eq!(PrimalState::coordinate_name(&inst, 7), "gamma[cell-1, bin 0]");
    }

    proptest! {
        #[test]
        fn lemma_ln2_sum(a in prop::collection::vec(1e-6f64..20.0, 1..12)) {
            let (l, r) = ln2_sum_bound(&a);
            prop_assert!(l <= r + 1e-12);
        }

        #[test]
        fn lemma_ln2_pair(x1 in 1e-9f64..1e6, x2 in 1e-9f64..1e6) {
            let (l, r) = ln2_pair_bound(x1, x2);
            prop_assert!(l <= r + 1e-12);
        }

        #[test]
        fn objective_concave_in_gamma(g1 in -40.0f64..40.0, g2 in -40.0f64..40.0) {
            let mid = utility(0.5 * (g1 + g2));
            prop_assert!(mid >= 0.5 * (utility(g1) + utility(g2)) - 1e-12);
        }

        #[test]
        fn projection_lands_in_box(seed in 0u64..1000, scale in 1.0f64..100.0) {
            let mut rng = rng::stream(seed, "test", 1);
            let inst = random_instance(&mut rng, &InstanceSpec::default(), constants());
            let mut z = PrimalState::zeros(&inst);
            for v in z.iter_mut() {
                *v = rng.random_range(-scale..scale) * 10.0;
            }
            z.project(&inst);
            prop_assert!(z.within_bounds(&inst));
        }
    }
}
