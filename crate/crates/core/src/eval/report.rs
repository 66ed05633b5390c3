use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BiasCurve, OpenWorld};
use crate::error::Result;
use crate::model::{AssociationKind, AssociationMatrix};

/// Probe accuracies: `values[r][c]` = representation `rows[r]` predicting label set `cols[c]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossPrediction {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cell: String,
    pub seed: u64,
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub hm_acc: f64,
    /// Accuracy per `(attribute, object)` test cell.
    pub pair_grid: Vec<Vec<Option<f64>>>,
    pub bias_curve: Option<BiasCurve>,
    pub cross_pred: Option<CrossPrediction>,
    pub source_cross_pred: Option<CrossPrediction>,
    pub assoc_matrix: Vec<[f64; 2]>,
    pub assoc_kind: AssociationKind,
}

impl EvalReport {
    pub fn open_world(&self) -> OpenWorld {
        OpenWorld { seen: self.seen_acc, unseen: self.unseen_acc, hm: self.hm_acc }
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// Multi-seed summary. `hm` averages the per-seed harmonic means;
/// `hm_of_means` is the harmonic mean of the averaged accuracies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: usize,
    pub seen: Stat,
    pub unseen: Stat,
    pub hm: Stat,
    pub hm_of_means: f64,
}

impl Aggregate {
    pub fn of(results: &[OpenWorld]) -> Self {
        let seen = Stat::of(&results.iter().map(|r| r.seen).collect::<Vec<_>>());
        let unseen = Stat::of(&results.iter().map(|r| r.unseen).collect::<Vec<_>>());
        Self {
            seeds: results.len(),
            seen,
            unseen,
            hm: Stat::of(&results.iter().map(|r| r.hm).collect::<Vec<_>>()),
            hm_of_means: super::harmonic_mean(seen.mean, unseen.mean),
        }
    }
}

/// One line of `report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: String,
    pub seed: String,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("cell,seed,seen,unseen,hm\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.4},{:.4},{:.4}", r.cell, r.seed, r.seen, r.unseen, r.hm);
    }
    out
}

pub fn assoc_csv(assoc: &AssociationMatrix, factor_names: &[String]) -> String {
    let mut out = String::from("factor,attribute,object\n");
    for r in 0..assoc.rows() {
        let name = factor_names.get(r).cloned().unwrap_or_else(|| format!("factor{r}"));
        let _ = writeln!(out, "{},{:.6},{:.6}", name, assoc.get(r, 0), assoc.get(r, 1));
    }
    out
}

pub fn crosspred_csv(cp: &CrossPrediction) -> String {
    let mut out = format!("representation,{}\n", cp.cols.join(","));
    for (name, row) in cp.rows.iter().zip(&cp.values) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
        let _ = writeln!(out, "{},{}", name, cells.join(","));
    }
    out
}

/// Heatmap of the association, one `cell`-pixel square per entry, white (0) to dark blue (1).
pub fn write_assoc_ppm(assoc: &AssociationMatrix, cell: usize, path: &Path) -> Result<()> {
    let (rows, cols) = (assoc.rows(), 2);
    let (w, h) = (cols * cell, rows * cell);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let v = assoc.get(y / cell, x / cell).clamp(0.0, 1.0);
            let shade = |lo: f64| (255.0 - (255.0 - lo) * v).round() as u8;
            bytes.extend_from_slice(&[shade(20.0), shade(40.0), shade(120.0)]);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aggregate_recomputes_from_seeds() {
        let runs = [OpenWorld::new(90.0, 30.0), OpenWorld::new(80.0, 50.0), OpenWorld::new(100.0, 0.0)];
        let agg = Aggregate::of(&runs);
        assert!((agg.seen.mean - 90.0).abs() < 1e-12);
        assert!((agg.seen.std - 10.0).abs() < 1e-12);
        let hm_mean = runs.iter().map(|r| r.hm).sum::<f64>() / 3.0;
        assert!((agg.hm.mean - hm_mean).abs() < 1e-12);
        assert!((agg.hm_of_means - super::super::harmonic_mean(90.0, 80.0 / 3.0)).abs() < 1e-12);
        assert_eq!(Stat::of(&[3.0]).std, 0.0);
    }

    #[test]
    fn csv_layouts() {
        let rows = [ReportRow { cell: "m".into(), seed: "0".into(), seen: 1.0, unseen: 2.0, hm: 1.5 }];
        assert_eq!(report_csv(&rows), "cell,seed,seen,unseen,hm\nm,0,1.0000,2.0000,1.5000\n");
        let cp = CrossPrediction {
            rows: vec!["z_a".into()],
            cols: vec!["attribute".into(), "object".into()],
            values: vec![vec![99.0, 12.5]],
        };
        assert_eq!(crosspred_csv(&cp), "representation,attribute,object\nz_a,99.00,12.50\n");
    }
}
