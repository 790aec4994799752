//! CSV and JSON report files.

use std::fs;
use std::path::Path;

use nnchip_core::mapping::{CommGraph, MeshCost, Placement};
use nnchip_core::tuning::TuneReport;
use serde::{Deserialize, Serialize};

use crate::Error;

/// Accuracy of a transformed model against its float baseline. Accuracies
/// are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub samples: usize,
    pub baseline_accuracy: f64,
    pub accuracy: f64,
    /// `baseline_accuracy − accuracy`.
    pub drop: f64,
    /// Core-op vertices; each occupies one physical core.
    pub core_ops: usize,
    /// Core-ops counting every position of a shared-weight group.
    pub logical_core_ops: usize,
}

impl EvalReport {
    pub fn new(model: &str, samples: usize, baseline_accuracy: f64, accuracy: f64) -> Self {
        Self {
            model: model.into(),
            samples,
            baseline_accuracy,
            accuracy,
            drop: baseline_accuracy - accuracy,
            core_ops: 0,
            logical_core_ops: 0,
        }
    }
}

/// One row of an evaluate or sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub accuracy: f64,
    pub drop: f64,
    pub core_ops: usize,
    pub wall_clock_s: f64,
    /// Failure message of a point that did not complete.
    pub error: String,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e.into(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.into(), source })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io { path: path.into(), source })
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| csv_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningRow {
    pub part: usize,
    /// Phase name, or `summary` for the per-part line.
    pub phase: String,
    /// Checkpoint index within the phase; the summary line counts all of them.
    pub epoch: usize,
    /// Held-out loss; the summary line carries the emitted core-ops' loss.
    pub loss: f64,
}

pub fn tuning_rows(report: &TuneReport) -> Vec<TuningRow> {
    let mut rows = Vec::new();
    for p in &report.parts {
        let mut checkpoints = 0;
        for ph in &p.phases {
            for (epoch, &loss) in ph.curve.iter().enumerate() {
                rows.push(TuningRow {
                    part: p.part,
                    phase: ph.phase.name().into(),
                    epoch,
                    loss,
                });
            }
            checkpoints += ph.curve.len();
        }
        rows.push(TuningRow {
            part: p.part,
            phase: "summary".into(),
            epoch: checkpoints,
            loss: p.post_mse,
        });
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRow {
    pub node_id: usize,
    pub row: usize,
    pub col: usize,
    pub chip_id: usize,
}

pub fn placement_rows(p: &Placement, mesh: &MeshCost) -> Vec<PlacementRow> {
    (0..p.cells.len())
        .map(|n| {
            let (row, col) = p.coord(n);
            PlacementRow {
                node_id: n,
                row,
                col,
                chip_id: mesh.chip_of(p.cells[n]),
            }
        })
        .collect()
}

/// Cost summary written next to the placement CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementSummary {
    pub total: f64,
    pub intra: f64,
    pub inter: f64,
    /// Physical cores placed (shared-weight groups coalesced onto one core).
    pub nodes: usize,
    pub logical_core_ops: usize,
    pub edges: usize,
    pub rows: usize,
    pub cols: usize,
    pub cores_per_chip: usize,
    /// Graph vertex hosted by each node.
    pub node_vertices: Vec<usize>,
    pub warnings: Vec<String>,
}

pub fn placement_summary(cg: &CommGraph, p: &Placement, mesh: &MeshCost, cpc: usize, warnings: Vec<String>) -> PlacementSummary {
    PlacementSummary {
        total: p.total,
        intra: p.intra,
        inter: p.inter,
        nodes: cg.len(),
        logical_core_ops: cg.nodes.iter().map(|n| n.logical).sum(),
        edges: cg.edges.len(),
        rows: mesh.rows,
        cols: mesh.cols,
        cores_per_chip: cpc,
        node_vertices: cg.nodes.iter().map(|n| n.vertex).collect(),
        warnings,
    }
}
