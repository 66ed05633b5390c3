//! Experiment documents: datasets, method cells, training, evaluation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use shortcutlab_core::datagen::{
    CorrelationMode, CorrelationSpec, FactorCatalog, FactorKind, Role, ShapeFamily, SplitSize, SplitSizes,
};
use shortcutlab_core::eval::EvalConfig;
use shortcutlab_core::model::{AssociationMode, Constraint, ModelConfig, Representation};
use shortcutlab_core::objectives::LossConfig;
use shortcutlab_core::tensorops::AdamConfig;
use shortcutlab_core::trainer::TrainConfig;
use shortcutlab_core::{LabError, Result};

/// Environment variable that replaces the configured training seeds with one seed.
pub const SEED_ENV: &str = "SHORTCUTLAB_SEED";

/// Named architecture/constraint/association combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "global-0")]
    Global0,
    #[serde(rename = "factor-0")]
    Factor0,
    #[serde(rename = "global-src")]
    GlobalSrc,
    #[serde(rename = "global-src-il")]
    GlobalSrcIl,
    #[serde(rename = "factor-src")]
    FactorSrc,
    #[serde(rename = "factor-src-ci")]
    FactorSrcCi,
    #[serde(rename = "factor-src-il")]
    FactorSrcIl,
    #[serde(rename = "factor-src-il-la")]
    FactorSrcIlLa,
    #[serde(rename = "factor-src-il-laR")]
    FactorSrcIlLaR,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Global0,
        Method::Factor0,
        Method::GlobalSrc,
        Method::GlobalSrcIl,
        Method::FactorSrc,
        Method::FactorSrcCi,
        Method::FactorSrcIl,
        Method::FactorSrcIlLa,
        Method::FactorSrcIlLaR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Global0 => "global-0",
            Method::Factor0 => "factor-0",
            Method::GlobalSrc => "global-src",
            Method::GlobalSrcIl => "global-src-il",
            Method::FactorSrc => "factor-src",
            Method::FactorSrcCi => "factor-src-ci",
            Method::FactorSrcIl => "factor-src-il",
            Method::FactorSrcIlLa => "factor-src-il-la",
            Method::FactorSrcIlLaR => "factor-src-il-laR",
        }
    }

    pub fn representation(self) -> Representation {
        match self {
            Method::Global0 | Method::GlobalSrc | Method::GlobalSrcIl => Representation::Global,
            _ => Representation::Factor,
        }
    }

    pub fn constraint(self) -> Constraint {
        match self {
            Method::GlobalSrcIl | Method::FactorSrcIl | Method::FactorSrcIlLa | Method::FactorSrcIlLaR => {
                Constraint::Il
            }
            Method::FactorSrcCi => Constraint::Ci,
            _ => Constraint::None,
        }
    }

    pub fn association(self) -> AssociationMode {
        match self {
            Method::FactorSrcIlLa | Method::FactorSrcIlLaR => AssociationMode::Learned,
            _ => AssociationMode::Manual,
        }
    }

    /// Whether the method trains on the source domain at all.
    pub fn uses_source(self) -> bool {
        !matches!(self, Method::Global0 | Method::Factor0)
    }

    pub fn association_reg(self) -> bool {
        self == Method::FactorSrcIlLaR
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            LabError::Spec(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

/// One trained configuration of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub method: Method,
    /// Directory and report name; the method name when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Source-loss weight replacing the experiment's `loss.lambda`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Manual association `[attribute factor, object factor]` replacing the model default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manual: Option<[FactorKind; 2]>,
}

impl CellSpec {
    pub fn new(method: Method) -> Self {
        Self { method, name: None, lambda: None, manual: None }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.method.name().to_string())
    }
}

/// Catalog description with every field defaulted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogSpec {
    pub shape_family: ShapeFamily,
    /// Class counts of shape, color, lightness, texture and background.
    pub counts: [usize; 5],
    /// Factors kept, in catalog order; all five when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub factors: Option<Vec<FactorKind>>,
    pub image_size: usize,
    pub jitter: f64,
    pub saturation: f64,
}

impl CatalogSpec {
    pub fn source() -> Self {
        Self { shape_family: ShapeFamily::Caltech, counts: [50, 12, 4, 5, 3], ..Self::target() }
    }

    pub fn target() -> Self {
        Self {
            shape_family: ShapeFamily::Animal,
            counts: [10, 10, 4, 5, 3],
            factors: None,
            image_size: 16,
            jitter: 0.03,
            saturation: 0.3,
        }
    }

    pub fn build(&self) -> Result<FactorCatalog> {
        let mut c = FactorCatalog::with_counts(self.shape_family, &self.counts);
        if let Some(kinds) = &self.factors {
            c = c.restricted_to(kinds);
        }
        c.image_size = self.image_size;
        c.jitter = self.jitter;
        c.saturation = self.saturation;
        c.validate()?;
        Ok(c)
    }
}

impl Default for CatalogSpec {
    fn default() -> Self {
        Self::target()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CatalogConfig {
    pub source: CatalogSpec,
    pub target: CatalogSpec,
}

impl Default for CatalogConfig {
    fn default() -> Self {
        Self { source: CatalogSpec::source(), target: CatalogSpec::target() }
    }
}

/// How the source domain relates color to shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Every factor combination appears.
    Uncorrelated,
    /// Color and shape are paired one to one.
    FullyCorrelated,
    /// The target catalog and pairing, labeled with every factor.
    TargetAsSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceDatasetConfig {
    pub enabled: bool,
    pub kind: SourceKind,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for SourceDatasetConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            kind: SourceKind::Uncorrelated,
            sizes: SplitSizes { train: SplitSize::Total(4000), val: SplitSize::Total(0), test: SplitSize::Total(1000) },
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetDatasetConfig {
    pub mode: CorrelationMode,
    pub attribute: FactorKind,
    pub object: FactorKind,
    /// Nuisance factors held at one class.
    pub fixed: Vec<(FactorKind, usize)>,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for TargetDatasetConfig {
    fn default() -> Self {
        Self {
            mode: CorrelationMode::FullyCorrelated,
            attribute: FactorKind::Color,
            object: FactorKind::Shape,
            fixed: vec![(FactorKind::Lightness, 3), (FactorKind::Texture, 0)],
            sizes: SplitSizes {
                train: SplitSize::PerPair(40),
                val: SplitSize::PerPair(0),
                test: SplitSize::PerPair(10),
            },
            seed: 2,
        }
    }
}

impl TargetDatasetConfig {
    pub fn correlation(&self, catalog: &FactorCatalog, mode: CorrelationMode) -> Result<CorrelationSpec> {
        let index = |kind: FactorKind| {
            catalog
                .index_of(kind)
                .ok_or_else(|| LabError::Spec(format!("target catalog has no {} factor", kind.name())))
        };
        let mut spec = CorrelationSpec {
            mode,
            attribute_factor: index(self.attribute)?,
            object_factor: index(self.object)?,
            pairing: None,
            nuisance: Vec::new(),
        };
        for &(kind, class) in &self.fixed {
            index(kind)?;
            spec = spec.with_fixed(catalog, kind, class);
        }
        spec.validate(catalog)?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub factor_width: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: usize,
    /// Manual association: source factor read by the attribute head.
    pub attribute_factor: FactorKind,
    /// Manual association: source factor read by the object head.
    pub object_factor: FactorKind,
    pub cells: Vec<CellSpec>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            factor_width: 64,
            encoder_hidden: vec![256, 256],
            head_hidden: 64,
            attribute_factor: FactorKind::Color,
            object_factor: FactorKind::Shape,
            cells: vec![CellSpec::new(Method::FactorSrcIl)],
        }
    }
}

/// Optimization settings; the loss weights live in the experiment's `loss` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub association_optimizer: Option<AdamConfig>,
    pub seeds: Vec<u64>,
    pub val_fraction: f64,
    pub jobs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            optimizer: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
            association_optimizer: Some(AdamConfig { learning_rate: 1e-3, epsilon: 0.1, ..AdamConfig::default() }),
            seeds: (0..6).collect(),
            val_fraction: 0.1,
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub catalog: CatalogConfig,
    pub source_dataset: SourceDatasetConfig,
    pub target_dataset: TargetDatasetConfig,
    pub model: ModelSection,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            catalog: CatalogConfig::default(),
            source_dataset: SourceDatasetConfig::default(),
            target_dataset: TargetDatasetConfig::default(),
            model: ModelSection::default(),
            loss: LossConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Everything needed to generate one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPlan {
    pub role: Role,
    pub catalog: FactorCatalog,
    pub correlation: CorrelationSpec,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Apply the seed override and check every section. Resolving a resolved
    /// document returns it unchanged.
    pub fn resolve(mut self) -> Result<Self> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            let seed = raw
                .trim()
                .parse()
                .map_err(|_| LabError::Spec(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
            self.train.seeds = vec![seed];
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.train_config(&CellSpec::new(Method::FactorSrcIl)).validate()?;
        if self.train.seeds.is_empty() {
            return Err(LabError::Spec("train.seeds is empty".into()));
        }
        let mut names: Vec<String> = self.model.cells.iter().map(CellSpec::label).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(LabError::Spec("cell names must be unique".into()));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\']) || n.starts_with('.')) {
            return Err(LabError::Spec("cell names must be plain directory names".into()));
        }
        self.target_plan()?;
        let source = self.source_plan()?;
        for cell in &self.model.cells {
            if cell.method.uses_source() && source.is_none() {
                return Err(LabError::Spec(format!("{} needs the source dataset", cell.label())));
            }
            self.model_config(cell)?.validate()?;
        }
        Ok(())
    }

    pub fn target_plan(&self) -> Result<DatasetPlan> {
        let catalog = self.catalog.target.build()?;
        let correlation = self.target_dataset.correlation(&catalog, self.target_dataset.mode)?;
        Ok(DatasetPlan {
            role: Role::Target,
            catalog,
            correlation,
            sizes: self.target_dataset.sizes,
            seed: self.target_dataset.seed,
        })
    }

    /// The source dataset, if enabled.
    pub fn source_plan(&self) -> Result<Option<DatasetPlan>> {
        let cfg = &self.source_dataset;
        if !cfg.enabled {
            return Ok(None);
        }
        let (catalog, correlation) = match cfg.kind {
            SourceKind::TargetAsSource => {
                let catalog = self.catalog.target.build()?;
                let corr = self.target_dataset.correlation(&catalog, self.target_dataset.mode)?;
                (catalog, corr)
            }
            kind => {
                let catalog = self.catalog.source.build()?;
                let mode = if kind == SourceKind::Uncorrelated {
                    CorrelationMode::Uncorrelated
                } else {
                    CorrelationMode::FullyCorrelated
                };
                let corr = CorrelationSpec::color_shape(&catalog, mode)?;
                corr.validate(&catalog)?;
                (catalog, corr)
            }
        };
        Ok(Some(DatasetPlan { role: Role::Source, catalog, correlation, sizes: cfg.sizes, seed: cfg.seed }))
    }

    /// Catalog whose factors the encoder represents.
    fn factor_catalog(&self) -> Result<FactorCatalog> {
        match self.source_plan()? {
            Some(plan) => Ok(plan.catalog),
            None => self.catalog.source.build(),
        }
    }

    pub fn model_config(&self, cell: &CellSpec) -> Result<ModelConfig> {
        let factors = self.factor_catalog()?;
        let target = self.target_plan()?;
        if factors.pixel_len() != target.catalog.pixel_len() {
            return Err(LabError::Spec("source and target images differ in size".into()));
        }
        let [attr, obj] = cell.manual.unwrap_or([self.model.attribute_factor, self.model.object_factor]);
        let index = |kind: FactorKind| {
            factors
                .index_of(kind)
                .ok_or_else(|| LabError::Spec(format!("source catalog has no {} factor to associate", kind.name())))
        };
        let cfg = ModelConfig {
            representation: cell.method.representation(),
            constraint: cell.method.constraint(),
            association: cell.method.association(),
            input_dim: target.catalog.pixel_len(),
            factor_width: self.model.factor_width,
            encoder_hidden: self.model.encoder_hidden.clone(),
            head_hidden: self.model.head_hidden,
            source_classes: factors.class_counts(),
            attribute_classes: target.catalog.factors[target.correlation.attribute_factor].class_count,
            object_classes: target.catalog.factors[target.correlation.object_factor].class_count,
            attribute_factor: index(attr)?,
            object_factor: index(obj)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self, cell: &CellSpec) -> LossConfig {
        LossConfig {
            lambda: if cell.method.uses_source() { cell.lambda.unwrap_or(self.loss.lambda) } else { 0.0 },
            association_reg: cell.method.association_reg(),
            ..self.loss.clone()
        }
    }

    pub fn train_config(&self, cell: &CellSpec) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer.clone(),
            association_optimizer: self.train.association_optimizer.clone(),
            loss: self.loss_config(cell),
            seeds: self.train.seeds.clone(),
            val_fraction: self.train.val_fraction,
        }
    }
}
