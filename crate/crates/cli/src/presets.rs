//! Named end-to-end studies.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use shortcutlab_core::datagen::{CorrelationMode, FactorKind, SplitSize, SplitSizes};
use shortcutlab_core::{LabError, Result};

use crate::config::{CellSpec, ExperimentConfig, Method, SourceKind};
use crate::runner::{run_experiment, summary_csv, CellSummary, ExperimentOutcome};

/// How a study condenses its experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    /// `summary.csv` with one line per experiment and cell.
    Table,
    /// `summary.csv` plus `heatmap.csv`: mean HM per manual association,
    /// rows the attribute factor, columns the object factor.
    AssocHeatmap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyExperiment {
    pub label: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study {
    pub name: String,
    pub summary: SummaryKind,
    pub output_dir: PathBuf,
    pub experiments: Vec<StudyExperiment>,
}

impl Study {
    fn new(name: &str, summary: SummaryKind, experiments: Vec<(&str, ExperimentConfig)>) -> Self {
        let mut study = Self {
            name: name.to_string(),
            summary,
            output_dir: PathBuf::from("out").join(name),
            experiments: experiments
                .into_iter()
                .map(|(label, config)| StudyExperiment { label: label.to_string(), config })
                .collect(),
        };
        study.relocate(&study.output_dir.clone());
        study
    }

    fn single(name: &str, config: ExperimentConfig) -> Self {
        Self::new(name, SummaryKind::Table, vec![(name, config)])
    }

    /// Place the study and each experiment (in `<dir>/<label>`) below `dir`.
    pub fn relocate(&mut self, dir: &Path) {
        self.output_dir = dir.to_path_buf();
        for e in &mut self.experiments {
            e.config.output_dir = dir.join(&e.label);
        }
    }

    /// Resolve every experiment (seed override, validation).
    pub fn resolve(mut self) -> Result<Self> {
        if self.experiments.is_empty() {
            return Err(LabError::Spec(format!("study {} has no experiments", self.name)));
        }
        let mut labels: Vec<&str> = self.experiments.iter().map(|e| e.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) || labels.iter().any(|l| l.is_empty() || l.contains(['/', '\\'])) {
            return Err(LabError::Spec("experiment labels must be unique directory names".into()));
        }
        for e in &mut self.experiments {
            e.config = std::mem::take(&mut e.config).resolve()?;
        }
        Ok(self)
    }
}

pub struct StudyOutcome {
    pub study: Study,
    pub experiments: Vec<(String, ExperimentOutcome)>,
}

impl StudyOutcome {
    pub fn complete(&self) -> bool {
        self.experiments.iter().all(|(_, o)| o.complete())
    }

    pub fn experiment(&self, label: &str) -> Option<&ExperimentOutcome> {
        self.experiments.iter().find(|(l, _)| l == label).map(|(_, o)| o)
    }
}

/// Run every experiment, then write `study.json` and the study summary.
pub fn run_study(study: Study, jobs: usize, dump_ppm: usize) -> Result<StudyOutcome> {
    let study = study.resolve()?;
    fs::create_dir_all(&study.output_dir)?;
    fs::write(study.output_dir.join("study.json"), serde_json::to_string_pretty(&study)? + "\n")?;
    let mut experiments = Vec::new();
    for e in &study.experiments {
        experiments.push((e.label.clone(), run_experiment(&e.config, jobs, dump_ppm)?));
    }
    let mut summary = String::new();
    for (label, out) in &experiments {
        let table = summary_csv(&[("experiment", label)], &out.summaries);
        let body =
            if summary.is_empty() { table.as_str() } else { table.split_once('\n').map_or("", |(_, rest)| rest) };
        summary.push_str(body);
    }
    if summary.is_empty() {
        summary = summary_csv(&[("experiment", "")], &[]);
    }
    fs::write(study.output_dir.join("summary.csv"), summary)?;
    if study.summary == SummaryKind::AssocHeatmap {
        let all: Vec<(&CellSpec, &CellSummary)> = study
            .experiments
            .iter()
            .zip(&experiments)
            .flat_map(|(e, (_, out))| {
                e.config.model.cells.iter().filter_map(move |c| out.summary(&c.label()).map(|s| (c, s)))
            })
            .collect();
        fs::write(study.output_dir.join("heatmap.csv"), heatmap_csv(&all))?;
    }
    Ok(StudyOutcome { study, experiments })
}

/// Mean HM per `[attribute factor, object factor]` over the five factors.
fn heatmap_csv(cells: &[(&CellSpec, &CellSummary)]) -> String {
    let kinds = FactorKind::ALL;
    let mut out = String::from("attribute\\object");
    for k in kinds {
        let _ = write!(out, ",{}", k.name());
    }
    out.push('\n');
    for a in kinds {
        out.push_str(a.name());
        for o in kinds {
            let hm = cells.iter().find(|(c, _)| c.manual == Some([a, o])).map(|(_, s)| s.aggregate.hm.mean);
            match hm {
                Some(v) => {
                    let _ = write!(out, ",{v:.4}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub const PRESETS: [&str; 10] = [
    "smoke",
    "dv-source",
    "dv-animal-full",
    "table1-desk",
    "semi-correlated",
    "source-ablation",
    "assoc-sweep",
    "lambda-sweep",
    "factor-subsets",
    "class-counts",
];

pub fn preset(name: &str) -> Result<Study> {
    Ok(match name {
        "smoke" => Study::single(name, smoke()),
        "dv-source" => Study::single(name, dv_source()),
        "dv-animal-full" => Study::single(name, dv_animal_full()),
        "table1-desk" => Study::single(name, table1_desk()),
        "semi-correlated" => Study::single(name, semi_correlated()),
        "source-ablation" => source_ablation(),
        "assoc-sweep" => assoc_sweep(),
        "lambda-sweep" => lambda_sweep(),
        "factor-subsets" => factor_subsets(),
        "class-counts" => class_counts(),
        _ => {
            return Err(LabError::Spec(format!("unknown preset {name:?}; known presets: {}", PRESETS.join(", "))));
        }
    })
}

fn cells(methods: &[Method]) -> Vec<CellSpec> {
    methods.iter().map(|&m| CellSpec::new(m)).collect()
}

/// Desk-scale defaults shared by the training presets: 20 source shapes.
fn desk() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.catalog.source.counts = [20, 12, 4, 5, 3];
    cfg
}

/// Minutes-scale check of the whole pipeline at 8 px.
pub fn smoke() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    for spec in [&mut cfg.catalog.source, &mut cfg.catalog.target] {
        spec.image_size = 8;
    }
    cfg.catalog.source.counts = [6, 4, 2, 2, 2];
    cfg.catalog.target.counts = [4, 4, 2, 2, 2];
    cfg.target_dataset.fixed = vec![(FactorKind::Lightness, 1), (FactorKind::Texture, 0)];
    cfg.source_dataset.sizes.train = SplitSize::Total(240);
    cfg.source_dataset.sizes.test = SplitSize::Total(60);
    cfg.target_dataset.sizes =
        SplitSizes { train: SplitSize::PerPair(8), val: SplitSize::PerPair(0), test: SplitSize::PerPair(2) };
    cfg.model.factor_width = 4;
    cfg.model.encoder_hidden = vec![16, 16];
    cfg.model.head_hidden = 8;
    cfg.model.cells = cells(&[Method::Factor0, Method::GlobalSrc, Method::FactorSrcCi, Method::FactorSrcIlLaR]);
    cfg.train.epochs = 2;
    cfg.train.seeds = vec![0, 1];
    cfg
}

/// The 50-shape uncorrelated source at 20k training images; generation only.
pub fn dv_source() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.source_dataset.sizes.train = SplitSize::Total(20_000);
    cfg.model.cells.clear();
    cfg
}

/// The 10×10 fully correlated target; generation only.
pub fn dv_animal_full() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.source_dataset.enabled = false;
    cfg.target_dataset.sizes.train = SplitSize::PerPair(20);
    cfg.model.cells.clear();
    cfg
}

pub const TABLE1_METHODS: [Method; 7] = [
    Method::Global0,
    Method::Factor0,
    Method::GlobalSrc,
    Method::GlobalSrcIl,
    Method::FactorSrc,
    Method::FactorSrcCi,
    Method::FactorSrcIl,
];

pub fn table1_desk() -> ExperimentConfig {
    let mut cfg = desk();
    cfg.model.cells = cells(&TABLE1_METHODS);
    cfg.eval.crosspred = true;
    cfg
}

pub fn semi_correlated() -> ExperimentConfig {
    let mut cfg = desk();
    for spec in [&mut cfg.catalog.source, &mut cfg.catalog.target] {
        spec.saturation = 0.12;
    }
    cfg.target_dataset.mode = CorrelationMode::SemiCorrelated(2);
    cfg.model.cells = cells(&[Method::FactorSrcIl, Method::FactorSrcIlLa, Method::FactorSrcIlLaR]);
    cfg.train.epochs = 30;
    cfg.eval.assoc_heatmap = true;
    cfg
}

/// FactorSRC-IL with an uncorrelated, a fully correlated and a target-as-source
/// source domain. Both source factors have 10 classes so they can be paired.
pub fn source_ablation() -> Study {
    let base = {
        let mut cfg = desk();
        cfg.catalog.source.counts = [10, 10, 4, 5, 3];
        cfg.model.cells = cells(&[Method::FactorSrcIl]);
        cfg
    };
    let with = |kind: SourceKind| {
        let mut cfg = base.clone();
        cfg.source_dataset.kind = kind;
        cfg
    };
    Study::new(
        "source-ablation",
        SummaryKind::Table,
        vec![
            ("uncorrelated", with(SourceKind::Uncorrelated)),
            ("correlated", with(SourceKind::FullyCorrelated)),
            ("target-as-source", with(SourceKind::TargetAsSource)),
        ],
    )
}

/// FactorSRC-IL under every manual association of two source factors.
pub fn assoc_sweep() -> Study {
    let mut cfg = desk();
    cfg.model.cells = FactorKind::ALL
        .iter()
        .flat_map(|&a| {
            FactorKind::ALL.iter().map(move |&o| CellSpec {
                manual: Some([a, o]),
                ..CellSpec::new(Method::FactorSrcIl).named(format!("{}-{}", a.name(), o.name()))
            })
        })
        .collect();
    cfg.train.seeds = vec![0, 1];
    Study::new("assoc-sweep", SummaryKind::AssocHeatmap, vec![("assoc-sweep", cfg)])
}

pub const LAMBDAS: [f64; 6] = [0.0, 0.1, 0.5, 1.0, 10.0, 50.0];

pub fn lambda_sweep() -> Study {
    let mut cfg = desk();
    cfg.model.cells = [Method::FactorSrc, Method::FactorSrcCi, Method::FactorSrcIl]
        .iter()
        .flat_map(|&m| {
            LAMBDAS.iter().map(move |&l| CellSpec {
                lambda: Some(l),
                ..CellSpec::new(m).named(format!("{}-lambda{l}", m.name()))
            })
        })
        .collect();
    cfg.train.seeds = vec![0, 1];
    Study::new("lambda-sweep", SummaryKind::Table, vec![("lambda-sweep", cfg)])
}

/// FactorSRC-IL with source domains containing different factor subsets.
pub fn factor_subsets() -> Study {
    use FactorKind::*;
    let subsets: [(&str, &[FactorKind]); 5] = [
        ("SC", &[Shape, Color]),
        ("SCL", &[Shape, Color, Lightness]),
        ("SCT", &[Shape, Color, Texture]),
        ("SCB", &[Shape, Color, Background]),
        ("SCLTB", &[Shape, Color, Lightness, Texture, Background]),
    ];
    let experiments = subsets
        .iter()
        .map(|&(label, kinds)| {
            let mut cfg = desk();
            cfg.catalog.source.factors = Some(kinds.to_vec());
            cfg.model.cells = cells(&[Method::FactorSrcIl]);
            cfg.train.seeds = vec![0, 1];
            (label, cfg)
        })
        .collect();
    Study::new("factor-subsets", SummaryKind::Table, experiments)
}

/// FactorSRC-IL while varying the number of source shape and color classes.
pub fn class_counts() -> Study {
    let variants: [(&str, usize, usize); 6] = [
        ("shape5", 5, 12),
        ("shape10", 10, 12),
        ("shape20", 20, 12),
        ("color4", 20, 4),
        ("color8", 20, 8),
        ("color12", 20, 12),
    ];
    let experiments = variants
        .iter()
        .map(|&(label, shapes, colors)| {
            let mut cfg = desk();
            cfg.catalog.source.counts[0] = shapes;
            cfg.catalog.source.counts[1] = colors;
            cfg.model.cells = cells(&[Method::FactorSrcIl]);
            cfg.train.seeds = vec![0, 1];
            (label, cfg)
        })
        .collect();
    Study::new("class-counts", SummaryKind::Table, experiments)
}
