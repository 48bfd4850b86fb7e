//! Measurement statistics built from per-UE path-loss reports: serving-loss
//! histograms, joint (serving, cross) loss histograms per interfering cell
//! pair, occupancy probabilities and loads.
//!
//! Bins are anchored at 0 dB and half-open, `[i*w, (i+1)*w)`, and stored
//! sparsely. Because snapshot losses are held at 0.01 dB resolution, binning
//! is exact integer arithmetic whenever the bin width is a multiple of
//! 0.01 dB.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netmodel::{Cell, CellId, CellKind, NetModelError, NetworkSnapshot, PathLoss, UeSample};
use crate::rng;
use crate::units::db_to_nat;

pub const STATISTICS_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BIN_WIDTH_DB: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("bin width must be positive, got {0}")]
    InvalidBinWidth(f64),
    #[error("snapshot has no UEs")]
    EmptySnapshot,
    #[error("subsample fraction must lie in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("statistics schema version {found} is not supported (expected {STATISTICS_SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("statistics file is inconsistent: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Snapshot(#[from] NetModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Maps a loss onto its bin index for a given width.
#[derive(Debug, Clone, Copy)]
struct Binner {
    width_db: f64,
    width_centi: Option<i64>,
}

impl Binner {
    fn new(width_db: f64) -> Result<Self, MeasurementError> {
        if !(width_db > 0.0) || !width_db.is_finite() {
            return Err(MeasurementError::InvalidBinWidth(width_db));
        }
        let centi = width_db * 100.0;
        let width_centi = ((centi - centi.round()).abs() < 1e-9 && centi.round() >= 1.0).then(|| centi.round() as i64);
        Ok(Self { width_db, width_centi })
    }

    fn index(&self, loss: PathLoss) -> i64 {
        match self.width_centi {
            Some(w) => loss.centi_db().div_euclid(w),
            None => (loss.db() / self.width_db).floor() as i64,
        }
    }

    fn index_db(&self, db: f64) -> i64 {
        (db / self.width_db).floor() as i64
    }
}

fn midpoint_db(index: i64, width_db: f64) -> f64 {
    (index as f64 + 0.5) * width_db
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bin1D {
    pub index: i64,
    pub midpoint_db: f64,
    pub probability: f64,
    pub count: u64,
}

impl Bin1D {
    /// Natural-log midpoint, the optimisation-domain loss of this bin.
    pub fn midpoint_nat(&self) -> f64 {
        db_to_nat(self.midpoint_db)
    }
}

/// Sparse one-dimensional loss histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram1D {
    pub bin_width_db: f64,
    pub bins: Vec<Bin1D>,
    pub total_samples: u64,
}

impl Histogram1D {
    fn from_counts(bin_width_db: f64, counts: BTreeMap<i64, u64>) -> Self {
        let total_samples: u64 = counts.values().sum();
        let bins = counts
            .into_iter()
            .map(|(index, count)| Bin1D {
                index,
                midpoint_db: midpoint_db(index, bin_width_db),
                probability: count as f64 / total_samples as f64,
                count,
            })
            .collect();
        Self { bin_width_db, bins, total_samples }
    }

    /// Histogram of raw dB samples.
    pub fn from_samples_db(samples: impl IntoIterator<Item = f64>, bin_width_db: f64) -> Result<Self, MeasurementError> {
        let binner = Binner::new(bin_width_db)?;
        let mut counts = BTreeMap::new();
        for db in samples {
            *counts.entry(binner.index_db(db)).or_insert(0) += 1;
        }
        Ok(Self::from_counts(bin_width_db, counts))
    }

    fn from_losses(samples: impl IntoIterator<Item = PathLoss>, binner: Binner) -> Self {
        let mut counts = BTreeMap::new();
        for l in samples {
            *counts.entry(binner.index(l)).or_insert(0) += 1;
        }
        Self::from_counts(binner.width_db, counts)
    }

    pub fn probability_mass(&self) -> f64 {
        self.bins.iter().map(|b| b.probability).sum()
    }

    pub fn max_midpoint_db(&self) -> Option<f64> {
        self.bins.last().map(|b| b.midpoint_db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bin2D {
    pub index: (i64, i64),
    pub midpoints_db: (f64, f64),
    pub probability: f64,
    pub count: u64,
}

impl Bin2D {
    pub fn midpoints_nat(&self) -> (f64, f64) {
        (db_to_nat(self.midpoints_db.0), db_to_nat(self.midpoints_db.1))
    }
}

/// Sparse joint histogram of (serving loss, cross loss) of an interfering
/// cell's UEs.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram2D {
    pub bin_width_db: f64,
    pub bins: Vec<Bin2D>,
    pub total_samples: u64,
}

impl Histogram2D {
    fn from_counts(bin_width_db: f64, counts: BTreeMap<(i64, i64), u64>) -> Self {
        let total_samples: u64 = counts.values().sum();
        let bins = counts
            .into_iter()
            .map(|(index, count)| Bin2D {
                index,
                midpoints_db: (midpoint_db(index.0, bin_width_db), midpoint_db(index.1, bin_width_db)),
                probability: count as f64 / total_samples as f64,
                count,
            })
            .collect();
        Self { bin_width_db, bins, total_samples }
    }

    /// Histogram of raw (dB, dB) sample pairs.
    pub fn from_samples_db(samples: impl IntoIterator<Item = (f64, f64)>, bin_width_db: f64) -> Result<Self, MeasurementError> {
        let binner = Binner::new(bin_width_db)?;
        let mut counts = BTreeMap::new();
        for (a, b) in samples {
            *counts.entry((binner.index_db(a), binner.index_db(b))).or_insert(0) += 1;
        }
        Ok(Self::from_counts(bin_width_db, counts))
    }

    fn from_losses(samples: impl IntoIterator<Item = (PathLoss, PathLoss)>, binner: Binner) -> Self {
        let mut counts = BTreeMap::new();
        for (a, b) in samples {
            *counts.entry((binner.index(a), binner.index(b))).or_insert(0) += 1;
        }
        Self::from_counts(binner.width_db, counts)
    }

    pub fn probability_mass(&self) -> f64 {
        self.bins.iter().map(|b| b.probability).sum()
    }

    fn marginal(&self, pick: impl Fn(&Bin2D) -> i64) -> Histogram1D {
        let mut counts = BTreeMap::new();
        for b in &self.bins {
            *counts.entry(pick(b)).or_insert(0) += b.count;
        }
        Histogram1D::from_counts(self.bin_width_db, counts)
    }

    /// Marginal of the interfering cell's serving loss.
    pub fn marginal_serving(&self) -> Histogram1D {
        self.marginal(|b| b.index.0)
    }

    /// Marginal of the cross loss towards the interfered cell.
    pub fn marginal_cross(&self) -> Histogram1D {
        self.marginal(|b| b.index.1)
    }
}

/// Which cells interfere with which, and how often.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InterfererGraph {
    /// c -> cells whose UEs are audible at c.
    pub edges: BTreeMap<CellId, BTreeSet<CellId>>,
    /// (e, c) -> probability that e schedules a UE audible at c.
    pub occupancy: BTreeMap<(CellId, CellId), f64>,
}

impl InterfererGraph {
    pub fn interferers(&self, c: CellId) -> impl Iterator<Item = CellId> + '_ {
        self.edges.get(&c).into_iter().flatten().copied()
    }

    pub fn occupancy(&self, e: CellId, c: CellId) -> f64 {
        self.occupancy.get(&(e, c)).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellInfo {
    pub id: CellId,
    pub kind: CellKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementStatistics {
    pub cells: Vec<CellInfo>,
    pub serving: BTreeMap<CellId, Histogram1D>,
    /// Keyed by (interferer e, interfered c).
    pub joint: BTreeMap<(CellId, CellId), Histogram2D>,
    pub graph: InterfererGraph,
    pub load: BTreeMap<CellId, f64>,
    pub bin_width_db: f64,
    pub snapshot_hash: String,
    /// Cells without any UE: no serving histogram, no objective terms.
    pub empty_cells: Vec<CellId>,
}

/// A subset of a snapshot's UEs.
#[derive(Debug, Clone)]
pub struct SnapshotView<'a> {
    pub snapshot: &'a NetworkSnapshot,
    pub ues: Vec<&'a UeSample>,
}

impl<'a> SnapshotView<'a> {
    pub fn full(snapshot: &'a NetworkSnapshot) -> Self {
        Self { snapshot, ues: snapshot.ues.iter().collect() }
    }

    pub fn cells(&self) -> &'a [Cell] {
        &self.snapshot.cells
    }

    pub fn to_snapshot(&self) -> NetworkSnapshot {
        NetworkSnapshot {
            cells: self.snapshot.cells.clone(),
            ues: self.ues.iter().map(|u| (*u).clone()).collect(),
            config_echo: self.snapshot.config_echo.clone(),
            coverage_holes: self.snapshot.coverage_holes,
        }
    }

    fn content_hash(&self) -> Result<String, MeasurementError> {
        if self.ues.len() == self.snapshot.ues.len() {
            return Ok(self.snapshot.content_hash()?);
        }
        Ok(self.to_snapshot().content_hash()?)
    }
}

/// Deterministic Bernoulli thinning of the UEs.
pub fn subsample(snapshot: &NetworkSnapshot, fraction: f64, seed: u64) -> Result<SnapshotView<'_>, MeasurementError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(MeasurementError::InvalidFraction(fraction));
    }
    let ues = snapshot
        .ues
        .iter()
        .filter(|u| rng::stream(seed, "subsample", u.id as u64).random::<f64>() < fraction)
        .collect();
    Ok(SnapshotView { snapshot, ues })
}

pub fn build_statistics(snapshot: &NetworkSnapshot, bin_width_db: f64) -> Result<MeasurementStatistics, MeasurementError> {
    build_statistics_from_view(&SnapshotView::full(snapshot), bin_width_db)
}

pub fn build_statistics_from_view(view: &SnapshotView<'_>, bin_width_db: f64) -> Result<MeasurementStatistics, MeasurementError> {
    let binner = Binner::new(bin_width_db)?;
    if view.ues.is_empty() {
        return Err(MeasurementError::EmptySnapshot);
    }
    let mut by_cell: BTreeMap<CellId, Vec<&UeSample>> = BTreeMap::new();
    for ue in &view.ues {
        by_cell.entry(ue.serving_cell).or_default().push(ue);
    }

    let mut serving = BTreeMap::new();
    let mut load = BTreeMap::new();
    let mut joint = BTreeMap::new();
    let mut graph = InterfererGraph::default();
    let mut empty_cells = Vec::new();
    let mut cell_ids: Vec<CellId> = view.cells().iter().map(|c| c.id).collect();
    cell_ids.sort();

    for &c in &cell_ids {
        graph.edges.entry(c).or_default();
        let Some(ues) = by_cell.get(&c) else {
            empty_cells.push(c);
            load.insert(c, 0.0);
            continue;
        };
        serving.insert(c, Histogram1D::from_losses(ues.iter().map(|u| u.serving_loss()), binner));
        load.insert(c, ues.len() as f64);
    }

    // Joint samples: UE u of cell e that is audible at c contributes
    // (l_e, l_{e->c}) to histogram (e, c).
    for (&e, ues) in &by_cell {
        let mut samples: BTreeMap<CellId, Vec<(PathLoss, PathLoss)>> = BTreeMap::new();
        for ue in ues {
            let own = ue.serving_loss();
            for (&c, &cross) in &ue.losses {
                if c != e {
                    samples.entry(c).or_default().push((own, cross));
                }
            }
        }
        for (c, pairs) in samples {
            let a = pairs.len() as f64 / ues.len() as f64;
            graph.edges.entry(c).or_default().insert(e);
            graph.occupancy.insert((e, c), a);
            joint.insert((e, c), Histogram2D::from_losses(pairs, binner));
        }
    }

    Ok(MeasurementStatistics {
        cells: view.cells().iter().map(|c| CellInfo { id: c.id, kind: c.kind }).collect(),
        serving,
        joint,
        graph,
        load,
        bin_width_db,
        snapshot_hash: view.content_hash()?,
        empty_cells,
    })
}

// ---------------------------------------------------------------------------
// Serialization. Counts are stored alongside rounded probabilities so the
// histograms reload exactly.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatisticsDoc {
    schema_version: u32,
    bin_width_db: f64,
    snapshot_hash: String,
    empty_cells: Vec<CellId>,
    cells: Vec<CellDoc>,
    edges: Vec<EdgeDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellDoc {
    id: CellId,
    kind: CellKind,
    load: f64,
    /// [index, midpoint_db, count, probability]
    serving_bins: Vec<(i64, f64, u64, f64)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeDoc {
    interferer: CellId,
    interfered: CellId,
    occupancy: f64,
    /// [serving index, cross index, serving midpoint_db, cross midpoint_db, count, probability]
    bins: Vec<(i64, i64, f64, f64, u64, f64)>,
}

fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

impl MeasurementStatistics {
    pub fn active_cells(&self) -> impl Iterator<Item = CellId> + '_ {
        self.serving.keys().copied()
    }

    pub fn to_json(&self) -> Result<String, MeasurementError> {
        let doc = StatisticsDoc {
            schema_version: STATISTICS_SCHEMA_VERSION,
            bin_width_db: self.bin_width_db,
            snapshot_hash: self.snapshot_hash.clone(),
            empty_cells: self.empty_cells.clone(),
            cells: self
                .cells
                .iter()
                .map(|info| CellDoc {
                    id: info.id,
                    kind: info.kind,
                    load: self.load.get(&info.id).copied().unwrap_or(0.0),
                    serving_bins: self
                        .serving
                        .get(&info.id)
                        .map(|h| {
                            h.bins
                                .iter()
                                .map(|b| (b.index, round_to(b.midpoint_db, 0.01), b.count, round_to(b.probability, 1e-9)))
                                .collect()
                        })
                        .unwrap_or_default(),
                })
                .collect(),
            edges: self
                .joint
                .iter()
                .map(|(&(e, c), h)| EdgeDoc {
                    interferer: e,
                    interfered: c,
                    occupancy: self.graph.occupancy(e, c),
                    bins: h
                        .bins
                        .iter()
                        .map(|b| {
                            (
                                b.index.0,
                                b.index.1,
                                round_to(b.midpoints_db.0, 0.01),
                                round_to(b.midpoints_db.1, 0.01),
                                b.count,
                                round_to(b.probability, 1e-9),
                            )
                        })
                        .collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self, MeasurementError> {
        let doc: StatisticsDoc = serde_json::from_str(text)?;
        if doc.schema_version != STATISTICS_SCHEMA_VERSION {
            return Err(MeasurementError::SchemaVersion { found: doc.schema_version });
        }
        let w = doc.bin_width_db;
        Binner::new(w)?;
        let mut serving = BTreeMap::new();
        let mut load = BTreeMap::new();
        let mut graph = InterfererGraph::default();
        for cell in &doc.cells {
            load.insert(cell.id, cell.load);
            graph.edges.entry(cell.id).or_default();
            if !cell.serving_bins.is_empty() {
                let counts = cell.serving_bins.iter().map(|&(i, _, n, _)| (i, n)).collect();
                serving.insert(cell.id, Histogram1D::from_counts(w, counts));
            }
        }
        let mut joint = BTreeMap::new();
        for edge in doc.edges {
            if edge.bins.is_empty() || !(edge.occupancy > 0.0) {
                return Err(MeasurementError::Inconsistent(format!(
                    "edge {} -> {} has no samples or zero occupancy",
                    edge.interferer, edge.interfered
                )));
            }
            let counts = edge.bins.iter().map(|&(i, j, _, _, n, _)| ((i, j), n)).collect();
            graph.edges.entry(edge.interfered).or_default().insert(edge.interferer);
            graph.occupancy.insert((edge.interferer, edge.interfered), edge.occupancy);
            joint.insert((edge.interferer, edge.interfered), Histogram2D::from_counts(w, counts));
        }
        Ok(Self {
            cells: doc.cells.iter().map(|c| CellInfo { id: c.id, kind: c.kind }).collect(),
            serving,
            joint,
            graph,
            load,
            bin_width_db: w,
            snapshot_hash: doc.snapshot_hash,
            empty_cells: doc.empty_cells,
        })
    }

    pub fn content_hash(&self) -> Result<String, MeasurementError> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}
