//! Generate, train, evaluate and aggregate one experiment directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use shortcutlab_core::datagen::{export_dataset, generate_dataset, load_dataset, write_ppm, Dataset, Manifest};
use shortcutlab_core::eval::{
    assoc_csv, crosspred_csv, evaluate_run, report_csv, write_assoc_ppm, Aggregate, CrossPrediction, EvalConfig,
    EvalReport, ReportRow,
};
use shortcutlab_core::model::load_checkpoint;
use shortcutlab_core::trainer::{run_dir, run_matrix, MatrixCell};
use shortcutlab_core::{LabError, Result};

use crate::config::{DatasetPlan, ExperimentConfig};

pub const VERSION: &str = concat!("shortcutlab ", env!("CARGO_PKG_VERSION"));

/// Pixel size of one association entry in `assoc.ppm`.
const HEATMAP_CELL: usize = 24;

/// Datasets of one experiment with their manifests.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub source: Option<(Arc<Dataset>, Manifest)>,
    pub target: (Arc<Dataset>, Manifest),
}

impl ExperimentData {
    pub fn source_dataset(&self) -> Option<Arc<Dataset>> {
        self.source.as_ref().map(|(d, _)| Arc::clone(d))
    }

    pub fn target_dataset(&self) -> Arc<Dataset> {
        Arc::clone(&self.target.0)
    }
}

/// One failed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub cell: String,
    pub seed: u64,
    pub error: String,
}

/// Per-cell means over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: String,
    pub aggregate: Aggregate,
    /// Mean cross-prediction table over seeds, when probed.
    pub cross_pred: Option<CrossPrediction>,
    /// Mean association over seeds.
    pub assoc: Vec<[f64; 2]>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub reports: Vec<EvalReport>,
    pub summaries: Vec<CellSummary>,
    pub failures: Vec<Failure>,
}

impl ExperimentOutcome {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self, cell: &str) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.cell == cell)
    }

    pub fn reports_for<'a>(&'a self, cell: &'a str) -> impl Iterator<Item = &'a EvalReport> + 'a {
        self.reports.iter().filter(move |r| r.cell == cell)
    }
}

/// Write the resolved config and tool version into `dir`.
pub fn write_provenance(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    fs::write(dir.join("version.txt"), format!("{VERSION}\n"))?;
    Ok(())
}

fn data_dir(dir: &Path, role: &str) -> PathBuf {
    dir.join("data").join(role)
}

fn build(plan: &DatasetPlan) -> Result<Dataset> {
    generate_dataset(plan.role, &plan.catalog, &plan.correlation, &plan.sizes, plan.seed)
}

/// Generate and export the experiment's datasets below `<output_dir>/data`.
/// `dump_ppm` writes that many target training images as PPM files.
pub fn generate(config: &ExperimentConfig, dump_ppm: usize) -> Result<ExperimentData> {
    let dir = &config.output_dir;
    write_provenance(config, dir)?;
    let source = match config.source_plan()? {
        Some(plan) => {
            let ds = build(&plan)?;
            let manifest = export_dataset(&ds, &data_dir(dir, "source"))?;
            Some((Arc::new(ds), manifest))
        }
        None => None,
    };
    let target = build(&config.target_plan()?)?;
    let target_dir = data_dir(dir, "target");
    let manifest = export_dataset(&target, &target_dir)?;
    if dump_ppm > 0 {
        let ppm_dir = target_dir.join("ppm");
        fs::create_dir_all(&ppm_dir)?;
        for (i, s) in target.train.iter().take(dump_ppm).enumerate() {
            write_ppm(s, target.catalog.image_size, &ppm_dir.join(format!("{i:04}.ppm")))?;
        }
    }
    Ok(ExperimentData { source, target: (Arc::new(target), manifest) })
}

fn load_checked(dir: &Path, plan: &DatasetPlan) -> Result<(Arc<Dataset>, Manifest)> {
    if !dir.join("manifest.json").is_file() {
        return Err(LabError::Data(format!("no dataset in {}; run `generate` first", dir.display())));
    }
    let ds = load_dataset(dir)?;
    if ds.catalog != plan.catalog || ds.correlation != plan.correlation {
        return Err(LabError::Data(format!("dataset in {} was generated from a different config", dir.display())));
    }
    let manifest = Manifest::of(&ds);
    Ok((Arc::new(ds), manifest))
}

/// Load previously generated datasets, checking them against the config.
pub fn load_data(config: &ExperimentConfig) -> Result<ExperimentData> {
    let dir = &config.output_dir;
    let source = config.source_plan()?.map(|plan| load_checked(&data_dir(dir, "source"), &plan)).transpose()?;
    let target = load_checked(&data_dir(dir, "target"), &config.target_plan()?)?;
    Ok(ExperimentData { source, target })
}

/// Train every configured cell and seed, writing records and checkpoints.
pub fn train(config: &ExperimentConfig, data: &ExperimentData, jobs: usize) -> Result<Vec<Failure>> {
    write_provenance(config, &config.output_dir)?;
    let cells = config
        .model
        .cells
        .iter()
        .map(|cell| {
            Ok(MatrixCell {
                name: cell.label(),
                model: config.model_config(cell)?,
                train: config.train_config(cell),
                source: if cell.method.uses_source() { data.source_dataset() } else { None },
                target: Some(data.target_dataset()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let runs = run_matrix(&cells, jobs, Some(&config.output_dir));
    Ok(runs
        .into_iter()
        .filter_map(|r| r.outcome.err().map(|error| Failure { cell: r.cell, seed: r.seed, error }))
        .collect())
}

/// Evaluate one checkpoint and write its report files next to it.
pub fn evaluate_checkpoint(
    run: &Path,
    data: &ExperimentData,
    config: &EvalConfig,
    cell: &str,
    seed: u64,
) -> Result<EvalReport> {
    let (_, params) = load_checkpoint(&run.join("model.ckpt"))?;
    let source = data.source.as_ref().map(|(d, _)| d.as_ref());
    let report = evaluate_run(&params, &data.target.0, source, config, cell, seed)?;
    fs::write(run.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(run.join("report.csv"), report_csv(&[row(&report)]))?;
    let assoc = params.association();
    let names: Vec<String> = match params.config.representation {
        shortcutlab_core::model::Representation::Factor => params
            .config
            .source_classes
            .iter()
            .enumerate()
            .map(|(i, _)| {
                source.map(|d| d.catalog.factors[i].kind.name().to_string()).unwrap_or_else(|| format!("factor{i}"))
            })
            .collect(),
        shortcutlab_core::model::Representation::Global => vec!["global".to_string()],
    };
    fs::write(run.join("assoc.csv"), assoc_csv(&assoc, &names))?;
    if config.assoc_heatmap {
        write_assoc_ppm(&assoc, HEATMAP_CELL, &run.join("assoc.ppm"))?;
    }
    if let Some(cp) = &report.cross_pred {
        fs::write(run.join("crosspred.csv"), crosspred_csv(cp))?;
    }
    if let Some(cp) = &report.source_cross_pred {
        fs::write(run.join("source_crosspred.csv"), crosspred_csv(cp))?;
    }
    if let Some(curve) = &report.bias_curve {
        let mut out = String::from("bias,seen,unseen,hm\n");
        for p in &curve.points {
            let _ = writeln!(out, "{:.6},{:.4},{:.4},{:.4}", p.bias, p.seen, p.unseen, p.hm);
        }
        fs::write(run.join("bias_curve.csv"), out)?;
    }
    Ok(report)
}

fn row(r: &EvalReport) -> ReportRow {
    ReportRow { cell: r.cell.clone(), seed: r.seed.to_string(), seen: r.seen_acc, unseen: r.unseen_acc, hm: r.hm_acc }
}

fn mean_table(tables: &[&CrossPrediction]) -> Option<CrossPrediction> {
    let first = tables.first()?;
    let n = tables.len() as f64;
    let values = first
        .values
        .iter()
        .enumerate()
        .map(|(r, row)| (0..row.len()).map(|c| tables.iter().map(|t| t.values[r][c]).sum::<f64>() / n).collect())
        .collect();
    Some(CrossPrediction { rows: first.rows.clone(), cols: first.cols.clone(), values })
}

/// Per-cell means in the order cells first appear.
pub fn summarize(reports: &[EvalReport]) -> Vec<CellSummary> {
    let mut order: Vec<&str> = Vec::new();
    let mut by_cell: BTreeMap<&str, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        if !by_cell.contains_key(r.cell.as_str()) {
            order.push(&r.cell);
        }
        by_cell.entry(&r.cell).or_default().push(r);
    }
    order
        .into_iter()
        .map(|cell| {
            let rs = &by_cell[cell];
            let n = rs.len() as f64;
            let cps: Vec<&CrossPrediction> = rs.iter().filter_map(|r| r.cross_pred.as_ref()).collect();
            let rows = rs[0].assoc_matrix.len();
            let assoc = (0..rows)
                .map(|i| {
                    let col = |c: usize| rs.iter().map(|r| r.assoc_matrix[i][c]).sum::<f64>() / n;
                    [col(0), col(1)]
                })
                .collect();
            CellSummary {
                cell: cell.to_string(),
                aggregate: Aggregate::of(&rs.iter().map(|r| r.open_world()).collect::<Vec<_>>()),
                cross_pred: if cps.len() == rs.len() { mean_table(&cps) } else { None },
                assoc,
            }
        })
        .collect()
}

/// `summary.csv`: one line per cell with mean and standard deviation over seeds.
pub fn summary_csv(prefix: &[(&str, &str)], summaries: &[CellSummary]) -> String {
    let mut out = String::new();
    for (name, _) in prefix {
        let _ = write!(out, "{name},");
    }
    out.push_str("cell,seeds,seen_mean,seen_std,unseen_mean,unseen_std,hm_mean,hm_std\n");
    for s in summaries {
        for (_, value) in prefix {
            let _ = write!(out, "{value},");
        }
        let a = &s.aggregate;
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            s.cell, a.seeds, a.seen.mean, a.seen.std, a.unseen.mean, a.unseen.std, a.hm.mean, a.hm.std
        );
    }
    out
}

fn crosspred_summary_csv(summaries: &[CellSummary]) -> Option<String> {
    let mut out = String::new();
    for s in summaries {
        let Some(cp) = &s.cross_pred else { continue };
        if out.is_empty() {
            let _ = writeln!(out, "cell,representation,{}", cp.cols.join(","));
        }
        for (name, row) in cp.rows.iter().zip(&cp.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
            let _ = writeln!(out, "{},{},{}", s.cell, name, cells.join(","));
        }
    }
    (!out.is_empty()).then_some(out)
}

/// Evaluate every checkpoint of the configured matrix, then write the
/// experiment-level `report.csv`, `summary.csv` and (if probed) `crosspred.csv`.
pub fn evaluate(
    config: &ExperimentConfig,
    data: &ExperimentData,
    mut failures: Vec<Failure>,
) -> Result<ExperimentOutcome> {
    let dir = &config.output_dir;
    let mut reports = Vec::new();
    for cell in &config.model.cells {
        let name = cell.label();
        for &seed in &config.train.seeds {
            if failures.iter().any(|f| f.cell == name && f.seed == seed) {
                continue;
            }
            match evaluate_checkpoint(&run_dir(dir, &name, seed), data, &config.eval, &name, seed) {
                Ok(r) => reports.push(r),
                Err(e) => failures.push(Failure { cell: name.clone(), seed, error: e.to_string() }),
            }
        }
    }
    let summaries = summarize(&reports);
    fs::write(dir.join("report.csv"), report_csv(&reports.iter().map(row).collect::<Vec<_>>()))?;
    fs::write(dir.join("summary.csv"), summary_csv(&[], &summaries))?;
    if let Some(cp) = crosspred_summary_csv(&summaries) {
        fs::write(dir.join("crosspred.csv"), cp)?;
    }
    if !failures.is_empty() {
        fs::write(dir.join("failures.json"), serde_json::to_string_pretty(&failures)? + "\n")?;
    }
    Ok(ExperimentOutcome { dir: dir.clone(), reports, summaries, failures })
}

/// Generate, train and evaluate.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize, dump_ppm: usize) -> Result<ExperimentOutcome> {
    let data = generate(config, dump_ppm)?;
    let failures = train(config, &data, jobs)?;
    evaluate(config, &data, failures)
}
