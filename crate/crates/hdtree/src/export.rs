//! Plain-text artifacts: tree and trajectory JSON, embedding, trajectory,
//! epoch-log and metric CSV tables.

use hdtree_core::htc::{occupancy, tree_records, CodePath, TreeNodeRecord};
use hdtree_core::lineage::{EdgeKind, LineageGraph, Trajectory};
use hdtree_core::trainer::{EpochRecord, Model, Phase};
use hdtree_core::Matrix;
use serde::Serialize;

use crate::io::fmt_f64;

fn to_csv(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV text is UTF-8")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeExport {
    pub depth: usize,
    pub dim: usize,
    /// Number of samples routed through the tree to count occupancy.
    pub samples: usize,
    pub nodes: Vec<TreeNodeRecord>,
}

/// Codebook tree with per-node occupancy of the given sample paths.
pub fn tree_export(model: &Model, paths: &[CodePath]) -> TreeExport {
    let depth = model.depth();
    let occ = occupancy(depth, paths);
    TreeExport { depth, dim: model.codebook.dim(), samples: paths.len(), nodes: tree_records(&model.codebook, &occ) }
}

fn kind_name(kind: EdgeKind) -> &'static str {
    match kind {
        EdgeKind::Tree => "tree",
        EdgeKind::Knn => "knn",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryNode {
    pub level: usize,
    pub index: usize,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryExport {
    pub nodes: Vec<TrajectoryNode>,
    /// Kind and weight of the edge leaving each node but the last.
    pub edge_kinds: Vec<&'static str>,
    pub edge_weights: Vec<f64>,
    pub total_weight: f64,
}

pub fn trajectory_export(graph: &LineageGraph, traj: &Trajectory) -> TrajectoryExport {
    TrajectoryExport {
        nodes: traj
            .nodes
            .iter()
            .map(|&n| TrajectoryNode { level: n.level, index: n.index, vector: graph.vector(n).to_vec() })
            .collect(),
        edge_kinds: traj.edge_kinds.iter().map(|&k| kind_name(k)).collect(),
        edge_weights: traj.edge_weights.clone(),
        total_weight: traj.total_weight,
    }
}

/// One row per trajectory node; the edge columns describe the edge to the
/// next node and are empty on the last row.
pub fn trajectory_csv(export: &TrajectoryExport) -> String {
    let dim = export.nodes.first().map_or(0, |n| n.vector.len());
    let mut header: Vec<String> = ["step", "level", "index", "edge_kind", "edge_weight", "cumulative_weight"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|j| format!("v{j}")));
    let mut cum = 0.0;
    let rows = export.nodes.iter().enumerate().map(|(s, n)| {
        let mut r = vec![s.to_string(), n.level.to_string(), n.index.to_string()];
        match (export.edge_kinds.get(s), export.edge_weights.get(s)) {
            (Some(k), Some(&w)) => {
                r.push(k.to_string());
                r.push(fmt_f64(w));
            }
            _ => r.extend([String::new(), String::new()]),
        }
        r.push(fmt_f64(cum));
        cum += export.edge_weights.get(s).copied().unwrap_or(0.0);
        r.extend(n.vector.iter().map(|&v| fmt_f64(v)));
        r
    });
    to_csv(&header, rows.collect::<Vec<_>>())
}

/// Encoder outputs `z*`, their codebook-space points `c*` and the code path `l1..lL`.
pub fn embed_csv(z: &Matrix, points: &Matrix, paths: &[CodePath]) -> String {
    let depth = paths.first().map_or(0, CodePath::depth);
    let mut header = vec!["sample".to_string()];
    header.extend((0..z.cols()).map(|j| format!("z{j}")));
    header.extend((0..points.cols()).map(|j| format!("c{j}")));
    header.extend((1..=depth).map(|l| format!("l{l}")));
    let rows = (0..z.rows()).map(|i| {
        let mut r = vec![i.to_string()];
        r.extend(z.row(i).iter().map(|&v| fmt_f64(v)));
        r.extend(points.row(i).iter().map(|&v| fmt_f64(v)));
        r.extend(paths[i].0.iter().map(usize::to_string));
        r
    });
    to_csv(&header, rows.collect::<Vec<_>>())
}

pub fn matrix_csv(x: &Matrix, prefix: &str) -> String {
    let header: Vec<String> = (0..x.cols()).map(|j| format!("{prefix}{j}")).collect();
    to_csv(&header, x.row_iter().map(|r| r.iter().map(|&v| fmt_f64(v)).collect()).collect::<Vec<_>>())
}

pub fn epochs_csv(records: &[EpochRecord]) -> String {
    let header: Vec<String> = ["epoch", "phase", "steps", "scl", "hql", "ddp", "total", "occupied_leaves", "reseeded_nodes"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = records.iter().map(|e| {
        vec![
            e.epoch.to_string(),
            match e.phase {
                Phase::Warmup => "warmup".into(),
                Phase::Joint => "joint".into(),
            },
            e.steps.to_string(),
            fmt_f64(e.losses.scl),
            fmt_f64(e.losses.hql),
            fmt_f64(e.losses.ddp),
            fmt_f64(e.losses.total),
            e.occupied_leaves.to_string(),
            e.reseeded_nodes.to_string(),
        ]
    });
    to_csv(&header, rows.collect::<Vec<_>>())
}

/// One evaluation result; metrics that do not apply to a method are `None`
/// and written as empty cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub dataset: String,
    pub method: String,
    pub seed: u64,
    pub dp: Option<f64>,
    pub lp: Option<f64>,
    pub acc: Option<f64>,
    pub nmi: Option<f64>,
    /// Negated reconstruction MSE.
    pub neg_rl: Option<f64>,
    pub ll: Option<f64>,
    pub fid: Option<f64>,
    pub rop: Option<f64>,
}

pub const METRIC_HEADER: [&str; 11] = ["dataset", "method", "seed", "DP", "LP", "ACC", "NMI", "-RL", "LL", "FID", "ROP"];

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let header: Vec<String> = METRIC_HEADER.iter().map(|s| s.to_string()).collect();
    let body = rows.iter().map(|m| {
        vec![
            m.dataset.clone(),
            m.method.clone(),
            m.seed.to_string(),
            opt(m.dp),
            opt(m.lp),
            opt(m.acc),
            opt(m.nmi),
            opt(m.neg_rl),
            opt(m.ll),
            opt(m.fid),
            opt(m.rop),
        ]
    });
    to_csv(&header, body.collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_cells() {
        let row = MetricRow {
            dataset: "d".into(),
            method: "m".into(),
            seed: 1,
            dp: Some(0.5),
            lp: None,
            acc: Some(1.0),
            nmi: None,
            neg_rl: None,
            ll: None,
            fid: None,
            rop: Some(0.25),
        };
        let text = metrics_csv(&[row]);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "dataset,method,seed,DP,LP,ACC,NMI,-RL,LL,FID,ROP");
        assert_eq!(lines.next().unwrap(), "d,m,1,0.5,,1.0,,,,,0.25");
    }

    #[test]
    fn matrix_table() {
        let x = Matrix::from_rows(&[[1.0, 2.5]]).unwrap();
        assert_eq!(matrix_csv(&x, "x"), "x0,x1\n1.0,2.5\n");
    }
}
