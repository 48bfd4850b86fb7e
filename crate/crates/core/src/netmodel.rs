//! Synthetic heterogeneous networks: macro/pico topologies, UE drops,
//! log-distance propagation with correlated log-normal shadowing, and
//! RSRP-based association.
//!
//! Path losses are quantised to 0.01 dB when a snapshot is generated, which
//! is also the resolution of the snapshot file, so a snapshot read back from
//! disk is bit-identical to the one that was written.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng;
use crate::units::{db_to_linear, linear_to_db, watts_to_dbm};

pub const SNAPSHOT_SCHEMA_VERSION: u32 = 1;
pub const MACRO_TX_POWER_W: f64 = 40.0;
pub const PICO_TX_POWER_W: f64 = 4.0;
pub const MIN_MACRO_ISD_M: f64 = 100.0;
pub const MIN_PICO_MACRO_DISTANCE_M: f64 = 50.0;
/// Macro sites are displaced uniformly within this fraction of the grid ISD.
const MACRO_JITTER_FRACTION: f64 = 0.1;
const PICO_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum NetModelError {
    #[error("cannot place {requested} macros in {area_km2} km2 with at least {MIN_MACRO_ISD_M} m inter-site distance")]
    MacroPlacement { requested: usize, area_km2: f64 },
    #[error("could not place pico {index} at least {MIN_PICO_MACRO_DISTANCE_M} m away from every macro")]
    PicoPlacement { index: usize },
    #[error("invalid network parameter: {0}")]
    InvalidParameter(String),
    #[error("snapshot schema version {found} is not supported (expected {SNAPSHOT_SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("snapshot is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cell-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Macro,
    Pico,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: CellId,
    pub kind: CellKind,
    pub position: Position,
    pub tx_power_w: f64,
}

impl Cell {
    pub fn tx_power_dbm(&self) -> f64 {
        watts_to_dbm(self.tx_power_w)
    }
}

/// A path loss quantised to 0.01 dB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PathLoss {
    centi_db: i64,
}

impl PathLoss {
    /// Rounds to the nearest 0.01 dB; losses below 0 dB are clamped so the
    /// linear ratio is always at least 1.
    pub fn from_db(db: f64) -> Self {
        let centi_db = (db.max(0.0) * 100.0).round() as i64;
        Self { centi_db }
    }

    pub fn from_linear(linear: f64) -> Self {
        Self::from_db(linear_to_db(linear.max(1.0)))
    }

    pub fn centi_db(&self) -> i64 {
        self.centi_db
    }

    pub fn db(&self) -> f64 {
        self.centi_db as f64 / 100.0
    }

    pub fn linear(&self) -> f64 {
        db_to_linear(self.db())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UeSample {
    pub id: u32,
    pub position: Position,
    pub serving_cell: CellId,
    /// Losses to every audible cell, keyed by cell id.
    pub losses: BTreeMap<CellId, PathLoss>,
}

impl UeSample {
    pub fn serving_loss(&self) -> PathLoss {
        self.losses[&self.serving_cell]
    }
}

/// Log-distance propagation with correlated log-normal shadowing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropagationModel {
    pub reference_loss_db: f64,
    pub reference_distance_m: f64,
    pub macro_exponent: f64,
    pub pico_exponent: f64,
    pub shadowing_sigma_db: f64,
    /// Correlation between the shadowing of any two links of the same UE.
    pub shadowing_correlation: f64,
}

impl Default for PropagationModel {
    fn default() -> Self {
        Self {
            reference_loss_db: 34.0,
            reference_distance_m: 1.0,
            macro_exponent: 3.7,
            pico_exponent: 3.0,
            shadowing_sigma_db: 8.0,
            shadowing_correlation: 0.5,
        }
    }
}

impl PropagationModel {
    pub fn exponent(&self, kind: CellKind) -> f64 {
        match kind {
            CellKind::Macro => self.macro_exponent,
            CellKind::Pico => self.pico_exponent,
        }
    }

    /// Path loss in dB before quantisation.
    pub fn path_loss_db(&self, tx: &Cell, rx: &Position, shadowing_db: f64) -> f64 {
        let d = tx.position.distance(rx).max(1.0).max(self.reference_distance_m);
        let db = self.reference_loss_db
            + 10.0 * self.exponent(tx.kind) * (d / self.reference_distance_m).log10()
            + shadowing_db;
        db.max(0.0)
    }

    /// Linear path loss (>= 1).
    pub fn path_loss(&self, tx: &Cell, rx: &Position, shadowing_db: f64) -> f64 {
        db_to_linear(self.path_loss_db(tx, rx, shadowing_db))
    }

    /// Shadowing draws (dB) for `links` links of one UE: a shared component
    /// plus independent per-link components, mixed to the configured
    /// correlation.
    pub fn shadowing_draws(&self, seed: u64, ue_id: u32, links: usize) -> Vec<f64> {
        let mut rng = rng::stream(seed, "shadowing", ue_id as u64);
        let rho = self.shadowing_correlation.clamp(0.0, 1.0);
        let (shared_w, own_w) = (rho.sqrt(), (1.0 - rho).sqrt());
        let common: f64 = StandardNormal.sample(&mut rng);
        (0..links)
            .map(|_| {
                let own: f64 = StandardNormal.sample(&mut rng);
                self.shadowing_sigma_db * (shared_w * common + own_w * own)
            })
            .collect()
    }
}

/// Generation parameters, echoed into every snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub area_km2: f64,
    pub macro_count: usize,
    pub pico_count: usize,
    pub density_per_km2: f64,
    pub hotspot_factor: f64,
    pub hotspot_radius_m: f64,
    pub rsrp_threshold_dbm: f64,
    pub seed: u64,
    pub propagation: PropagationModel,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            area_km2: 9.0,
            macro_count: 115,
            pico_count: 10,
            density_per_km2: 450.0,
            hotspot_factor: 2.0,
            hotspot_radius_m: 100.0,
            rsrp_threshold_dbm: -140.0,
            seed: 7,
            propagation: PropagationModel::default(),
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetModelError> {
        let bad = |m: &str| Err(NetModelError::InvalidParameter(m.to_string()));
        if !(self.area_km2 > 0.0) {
            return bad("area_km2 must be positive");
        }
        if !(self.density_per_km2 >= 0.0) {
            return bad("density_per_km2 must be non-negative");
        }
        if !(self.hotspot_factor >= 1.0) {
            return bad("hotspot_factor must be at least 1");
        }
        if !(self.hotspot_radius_m >= 0.0) {
            return bad("hotspot_radius_m must be non-negative");
        }
        let rho = self.propagation.shadowing_correlation;
        if !(0.0..=1.0).contains(&rho) {
            return bad("shadowing_correlation must lie in [0, 1]");
        }
        if !(self.propagation.shadowing_sigma_db >= 0.0) {
            return bad("shadowing_sigma_db must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSnapshot {
    pub cells: Vec<Cell>,
    pub ues: Vec<UeSample>,
    pub config_echo: NetworkConfig,
    /// UEs discarded because no cell was audible.
    pub coverage_holes: usize,
}

fn square_side_m(area_km2: f64) -> f64 {
    area_km2.sqrt() * 1000.0
}

fn hex_lattice(side: f64, isd: f64) -> Vec<Position> {
    let row_step = isd * 3f64.sqrt() / 2.0;
    let mut points = Vec::new();
    let mut j = 0usize;
    loop {
        let y = (j as f64 + 0.5) * row_step;
        if y >= side {
            break;
        }
        let shift = if j % 2 == 1 { 0.5 } else { 0.0 };
        let mut i = 0usize;
        loop {
            let x = (i as f64 + 0.25 + shift) * isd;
            if x >= side {
                break;
            }
            points.push(Position::new(x, y));
            i += 1;
        }
        j += 1;
    }
    points
}

/// Macros on a jittered hexagonal grid covering a square of `area_km2`, then
/// picos placed uniformly at least 50 m from every macro. Macro ids come
/// first, picos follow.
pub fn generate_topology(
    area_km2: f64,
    macro_count: usize,
    pico_count: usize,
    seed: u64,
) -> Result<Vec<Cell>, NetModelError> {
    if !(area_km2 > 0.0) {
        return Err(NetModelError::InvalidParameter("area_km2 must be positive".into()));
    }
    let side = square_side_m(area_km2);
    let mut rng = rng::stream(seed, "topology", 0);
    let mut cells = Vec::with_capacity(macro_count + pico_count);

    if macro_count > 0 {
        let area_m2 = side * side;
        let mut isd = (2.0 * area_m2 / (3f64.sqrt() * macro_count as f64)).sqrt() * 1.05;
        let mut lattice = hex_lattice(side, isd);
        while lattice.len() < macro_count {
            isd *= 0.98;
            if isd < MIN_MACRO_ISD_M {
                return Err(NetModelError::MacroPlacement { requested: macro_count, area_km2 });
            }
            lattice = hex_lattice(side, isd);
        }
        // Drop surplus lattice points uniformly at random.
        while lattice.len() > macro_count {
            let k = rng.random_range(0..lattice.len());
            lattice.remove(k);
        }
        for p in lattice {
            let r = isd * MACRO_JITTER_FRACTION * rng.random::<f64>().sqrt();
            let phi = 2.0 * PI * rng.random::<f64>();
            let x = (p.x + r * phi.cos()).clamp(0.0, side);
            let y = (p.y + r * phi.sin()).clamp(0.0, side);
            cells.push(Cell {
                id: CellId(cells.len() as u32),
                kind: CellKind::Macro,
                position: Position::new(x, y),
                tx_power_w: MACRO_TX_POWER_W,
            });
        }
    }

    for index in 0..pico_count {
        let mut placed = None;
        for _ in 0..PICO_PLACEMENT_ATTEMPTS {
            let p = Position::new(rng.random::<f64>() * side, rng.random::<f64>() * side);
            let clear = cells
                .iter()
                .filter(|c| c.kind == CellKind::Macro)
                .all(|c| c.position.distance(&p) >= MIN_PICO_MACRO_DISTANCE_M);
            if clear {
                placed = Some(p);
                break;
            }
        }
        let position = placed.ok_or(NetModelError::PicoPlacement { index })?;
        cells.push(Cell {
            id: CellId(cells.len() as u32),
            kind: CellKind::Pico,
            position,
            tx_power_w: PICO_TX_POWER_W,
        });
    }
    Ok(cells)
}

fn poisson_count(rng: &mut rng::StreamRng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive Poisson mean");
    let n: f64 = dist.sample(rng);
    n as usize
}

/// UE positions: uniform at `density_per_km2` over the square, plus extra UEs
/// inside a `hotspot_radius_m` disc around each pico so the density there is
/// `hotspot_factor` times the base density.
pub fn drop_ues(
    cells: &[Cell],
    area_km2: f64,
    density_per_km2: f64,
    hotspot_factor: f64,
    hotspot_radius_m: f64,
    seed: u64,
) -> Vec<Position> {
    let side = square_side_m(area_km2);
    let mut rng = rng::stream(seed, "ue-drop", 0);
    let base = poisson_count(&mut rng, density_per_km2 * area_km2);
    let mut positions: Vec<Position> = (0..base)
        .map(|_| Position::new(rng.random::<f64>() * side, rng.random::<f64>() * side))
        .collect();

    let disc_km2 = PI * hotspot_radius_m * hotspot_radius_m / 1e6;
    let extra_mean = density_per_km2 * (hotspot_factor - 1.0).max(0.0) * disc_km2;
    for pico in cells.iter().filter(|c| c.kind == CellKind::Pico) {
        let n = poisson_count(&mut rng, extra_mean);
        let mut placed = 0;
        while placed < n {
            let r = hotspot_radius_m * rng.random::<f64>().sqrt();
            let phi = 2.0 * PI * rng.random::<f64>();
            let p = Position::new(pico.position.x + r * phi.cos(), pico.position.y + r * phi.sin());
            // Hotspot discs clipped at the border keep their density.
            if (0.0..side).contains(&p.x) && (0.0..side).contains(&p.y) {
                positions.push(p);
            }
            placed += 1;
        }
    }
    positions
}

/// RSRP-based association. Returns the serving cell (strongest RSRP, ties to
/// the lowest id) and the losses to every cell whose RSRP clears
/// `threshold_dbm`, or `None` for a coverage hole.
pub fn associate<F>(cells: &[Cell], threshold_dbm: f64, mut loss_fn: F) -> Option<(CellId, BTreeMap<CellId, PathLoss>)>
where
    F: FnMut(&Cell) -> PathLoss,
{
    let mut ordered: Vec<&Cell> = cells.iter().collect();
    ordered.sort_by_key(|c| c.id);
    let mut losses = BTreeMap::new();
    let mut best: Option<(CellId, f64)> = None;
    for cell in ordered {
        let loss = loss_fn(cell);
        let rsrp = cell.tx_power_dbm() - loss.db();
        if rsrp < threshold_dbm {
            continue;
        }
        losses.insert(cell.id, loss);
        if best.is_none_or(|(_, b)| rsrp > b) {
            best = Some((cell.id, rsrp));
        }
    }
    best.map(|(id, _)| (id, losses))
}

/// Full snapshot generation: topology, drop, shadowing, association.
pub fn generate_snapshot(config: &NetworkConfig) -> Result<NetworkSnapshot, NetModelError> {
    config.validate()?;
    let cells = generate_topology(config.area_km2, config.macro_count, config.pico_count, config.seed)?;
    let positions = drop_ues(
        &cells,
        config.area_km2,
        config.density_per_km2,
        config.hotspot_factor,
        config.hotspot_radius_m,
        config.seed,
    );
    let model = &config.propagation;
    let associated: Vec<Option<UeSample>> = positions
        .par_iter()
        .enumerate()
        .map(|(k, pos)| {
            let id = k as u32;
            let shadows = model.shadowing_draws(config.seed, id, cells.len());
            let result = associate(&cells, config.rsrp_threshold_dbm, |cell| {
                PathLoss::from_db(model.path_loss_db(cell, pos, shadows[cell.id.0 as usize]))
            });
            result.map(|(serving_cell, losses)| UeSample { id, position: *pos, serving_cell, losses })
        })
        .collect();
    let coverage_holes = associated.iter().filter(|u| u.is_none()).count();
    Ok(NetworkSnapshot {
        cells,
        ues: associated.into_iter().flatten().collect(),
        config_echo: config.clone(),
        coverage_holes,
    })
}

// ---------------------------------------------------------------------------
// Serialization

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotDoc {
    schema_version: u32,
    config: NetworkConfig,
    coverage_holes: usize,
    cells: Vec<Cell>,
    ues: Vec<UeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UeDoc {
    id: u32,
    position: Position,
    serving_cell: CellId,
    /// (cell id, loss in dB at 0.01 dB resolution)
    losses_db: Vec<(CellId, f64)>,
}

impl NetworkSnapshot {
    pub fn cell(&self, id: CellId) -> Option<&Cell> {
        self.cells.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> Result<String, NetModelError> {
        let doc = SnapshotDoc {
            schema_version: SNAPSHOT_SCHEMA_VERSION,
            config: self.config_echo.clone(),
            coverage_holes: self.coverage_holes,
            cells: self.cells.clone(),
            ues: self
                .ues
                .iter()
                .map(|u| UeDoc {
                    id: u.id,
                    position: u.position,
                    serving_cell: u.serving_cell,
                    losses_db: u.losses.iter().map(|(c, l)| (*c, l.db())).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, NetModelError> {
        let doc: SnapshotDoc = serde_json::from_str(text)?;
        if doc.schema_version != SNAPSHOT_SCHEMA_VERSION {
            return Err(NetModelError::SchemaVersion { found: doc.schema_version });
        }
        let ues = doc
            .ues
            .into_iter()
            .map(|u| {
                let losses: BTreeMap<CellId, PathLoss> =
                    u.losses_db.into_iter().map(|(c, db)| (c, PathLoss::from_db(db))).collect();
                if !losses.contains_key(&u.serving_cell) {
                    return Err(NetModelError::Inconsistent(format!(
                        "UE {} has no loss entry for its serving {}",
                        u.id, u.serving_cell
                    )));
                }
                Ok(UeSample { id: u.id, position: u.position, serving_cell: u.serving_cell, losses })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { cells: doc.cells, ues, config_echo: doc.config, coverage_holes: doc.coverage_holes })
    }

    /// SHA-256 of the canonical JSON document.
    pub fn content_hash(&self) -> Result<String, NetModelError> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn macro_at(id: u32, x: f64, y: f64) -> Cell {
        Cell { id: CellId(id), kind: CellKind::Macro, position: Position::new(x, y), tx_power_w: MACRO_TX_POWER_W }
    }

    fn pico_at(id: u32, x: f64, y: f64) -> Cell {
        Cell { id: CellId(id), kind: CellKind::Pico, position: Position::new(x, y), tx_power_w: PICO_TX_POWER_W }
    }

    #[test]
    fn default_topology_has_125_cells() {
        let cells = generate_topology(9.0, 115, 10, 7).unwrap();
        assert_eq!(cells.len(), 125);
        assert_eq!(cells.iter().filter(|c| c.kind == CellKind::Pico).count(), 10);
        for (k, c) in cells.iter().enumerate() {
            assert_eq!(c.id, CellId(k as u32));
        }
        for p in cells.iter().filter(|c| c.kind == CellKind::Pico) {
            for m in cells.iter().filter(|c| c.kind == CellKind::Macro) {
                assert!(p.position.distance(&m.position) >= MIN_PICO_MACRO_DISTANCE_M);
            }
        }
    }

    #[test]
    fn empty_topology() {
        assert!(generate_topology(1.0, 0, 0, 3).unwrap().is_empty());
    }

    #[test]
    fn topology_is_deterministic() {
        assert_eq!(generate_topology(9.0, 115, 10, 7).unwrap(), generate_topology(9.0, 115, 10, 7).unwrap());
        assert_ne!(generate_topology(9.0, 115, 10, 7).unwrap(), generate_topology(9.0, 115, 10, 8).unwrap());
    }

    #[test]
    fn overcrowded_area_is_a_placement_error() {
        let err = generate_topology(0.01, 50, 0, 1).unwrap_err();
        assert!(matches!(err, NetModelError::MacroPlacement { .. }));
    }

    #[test]
    fn path_loss_anchors() {
        let model = PropagationModel::default();
        let m = macro_at(0, 0.0, 0.0);
        let at_1m = model.path_loss(&m, &Position::new(1.0, 0.0), 0.0);
        assert!((at_1m - 10f64.powf(3.4)).abs() < 1e-9 * at_1m);
        // clamped below 1 m
        assert_eq!(model.path_loss(&m, &Position::new(0.2, 0.0), 0.0), at_1m);
        let db = model.path_loss_db(&m, &Position::new(100.0, 0.0), 0.0);
        assert!((db - 108.0).abs() < 1e-12);
        let p = pico_at(1, 0.0, 0.0);
        assert!((model.path_loss_db(&p, &Position::new(100.0, 0.0), 0.0) - 94.0).abs() < 1e-12);
        assert!(model.path_loss(&m, &Position::new(1.0, 0.0), -80.0) >= 1.0);
    }

    #[test]
    fn shadowing_is_reproducible() {
        let model = PropagationModel::default();
        assert_eq!(model.shadowing_draws(3, 17, 5), model.shadowing_draws(3, 17, 5));
        assert_ne!(model.shadowing_draws(3, 17, 5), model.shadowing_draws(3, 18, 5));
    }

    #[test]
    fn shadowing_marginals_and_correlation() {
        let model = PropagationModel::default();
        let n = 100_000;
        let (mut s1, mut s2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ue in 0..n {
            let d = model.shadowing_draws(11, ue, 2);
            s1 += d[0];
            s2 += d[1];
            s11 += d[0] * d[0];
            s22 += d[1] * d[1];
            s12 += d[0] * d[1];
        }
        let nf = n as f64;
        let (m1, m2) = (s1 / nf, s2 / nf);
        let v1 = s11 / nf - m1 * m1;
        let v2 = s22 / nf - m2 * m2;
        let corr = (s12 / nf - m1 * m2) / (v1 * v2).sqrt();
        assert!((v1.sqrt() / 8.0 - 1.0).abs() < 0.02, "sd {}", v1.sqrt());
        assert!((v2.sqrt() / 8.0 - 1.0).abs() < 0.02, "sd {}", v2.sqrt());
        assert!((corr - 0.5).abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn association_prefers_rsrp_not_loss() {
        let cells = vec![macro_at(0, 0.0, 0.0), pico_at(1, 10.0, 0.0)];
        let (serving, losses) = associate(&cells, -140.0, |c| match c.kind {
            CellKind::Macro => PathLoss::from_db(90.0),
            CellKind::Pico => PathLoss::from_db(85.0),
        })
        .unwrap();
        assert_eq!(serving, CellId(0));
        assert_eq!(losses.len(), 2);
        let rsrp_macro = cells[0].tx_power_dbm() - 90.0;
        let rsrp_pico = cells[1].tx_power_dbm() - 85.0;
        assert!((rsrp_macro - (-43.98)).abs() < 0.01);
        assert!((rsrp_pico - (-48.98)).abs() < 0.01);
    }

    #[test]
    fn association_single_and_ties() {
        let cells = vec![macro_at(0, 0.0, 0.0)];
        assert_eq!(associate(&cells, -140.0, |_| PathLoss::from_db(120.0)).unwrap().0, CellId(0));
        let cells = vec![macro_at(3, 0.0, 0.0), macro_at(1, 5.0, 0.0)];
        assert_eq!(associate(&cells, -140.0, |_| PathLoss::from_db(120.0)).unwrap().0, CellId(1));
    }

    #[test]
    fn association_drops_inaudible_cells_and_holes() {
        let cells = vec![macro_at(0, 0.0, 0.0), macro_at(1, 5.0, 0.0)];
        let (_, losses) = associate(&cells, -140.0, |c| {
            PathLoss::from_db(if c.id == CellId(0) { 120.0 } else { 190.0 })
        })
        .unwrap();
        assert_eq!(losses.keys().copied().collect::<Vec<_>>(), vec![CellId(0)]);
        assert!(associate(&cells, -140.0, |_| PathLoss::from_db(200.0)).is_none());
    }

    #[test]
    fn hotspots_double_the_local_density() {
        // Many seeds, count UEs per unit area inside vs outside the discs.
        let cells = vec![pico_at(0, 500.0, 500.0)];
        let radius = 100.0;
        let (mut inside, mut outside) = (0usize, 0usize);
        for seed in 0..200 {
            for p in drop_ues(&cells, 1.0, 450.0, 2.0, radius, seed) {
                if p.distance(&cells[0].position) < radius {
                    inside += 1;
                } else {
                    outside += 1;
                }
            }
        }
        let disc = PI * radius * radius;
        let ratio = (inside as f64 / disc) / (outside as f64 / (1e6 - disc));
        assert!((ratio - 2.0).abs() < 0.1, "density ratio {ratio}");
    }

    #[test]
    fn drop_counts() {
        assert!(drop_ues(&[], 9.0, 1e-12, 1.0, 100.0, 5).is_empty());
        let a = drop_ues(&[], 9.0, 450.0, 1.0, 100.0, 5);
        let b = drop_ues(&[], 9.0, 450.0, 1.0, 100.0, 5);
        assert_eq!(a, b);
        // Poisson(4050): 5 sigma is about 318.
        assert!((a.len() as f64 - 4050.0).abs() < 320.0, "{}", a.len());
    }

    #[test]
    fn snapshot_round_trips_through_json() {
        let config = NetworkConfig { area_km2: 1.0, macro_count: 6, pico_count: 1, density_per_km2: 60.0, ..Default::default() };
        let snap = generate_snapshot(&config).unwrap();
        let text = snap.to_json().unwrap();
        assert!(text.contains("\"schema_version\":1"));
        let back = NetworkSnapshot::from_json(&text).unwrap();
        assert_eq!(back, snap);
        assert_eq!(generate_snapshot(&config).unwrap(), snap);
    }

    #[test]
    fn snapshot_invariants() {
        let config = NetworkConfig { area_km2: 1.0, macro_count: 8, pico_count: 2, density_per_km2: 200.0, ..Default::default() };
        let snap = generate_snapshot(&config).unwrap();
        assert!(!snap.ues.is_empty());
        for ue in &snap.ues {
            let serving = snap.cell(ue.serving_cell).unwrap();
            let best = serving.tx_power_dbm() - ue.serving_loss().db();
            for (cid, loss) in &ue.losses {
                assert!(loss.linear() >= 1.0);
                let rsrp = snap.cell(*cid).unwrap().tx_power_dbm() - loss.db();
                assert!(rsrp <= best);
                assert!(rsrp >= config.rsrp_threshold_dbm);
            }
        }
    }
}
