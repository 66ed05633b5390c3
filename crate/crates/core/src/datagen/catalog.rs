use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// The five generative properties the renderer understands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorKind {
    Shape,
    Color,
    Lightness,
    Texture,
    Background,
}

impl FactorKind {
    pub const ALL: [FactorKind; 5] =
        [FactorKind::Shape, FactorKind::Color, FactorKind::Lightness, FactorKind::Texture, FactorKind::Background];

    pub fn name(self) -> &'static str {
        match self {
            FactorKind::Shape => "shape",
            FactorKind::Color => "color",
            FactorKind::Lightness => "lightness",
            FactorKind::Texture => "texture",
            FactorKind::Background => "background",
        }
    }

    /// Upper bound on classes the renderer can draw distinctly.
    pub fn max_classes(self) -> usize {
        match self {
            FactorKind::Shape | FactorKind::Color => 360,
            FactorKind::Lightness => 16,
            FactorKind::Texture => TEXTURE_NAMES.len(),
            FactorKind::Background => BACKGROUND_COLORS.len(),
        }
    }
}

pub const TEXTURE_NAMES: [&str; 5] = ["solid", "stripes", "checker", "dots", "noise"];

/// Desaturated background colors, one per background class.
pub const BACKGROUND_COLORS: [[f32; 3]; 6] = [
    [0.22, 0.22, 0.22],
    [0.60, 0.57, 0.50],
    [0.38, 0.44, 0.52],
    [0.48, 0.52, 0.44],
    [0.75, 0.75, 0.75],
    [0.50, 0.42, 0.46],
];

/// Silhouette families. Each family draws its base polygons from its own
/// random stream, so classes of different families never coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Source-style silhouettes (50 classes by default).
    Caltech,
    /// Target-style silhouettes (10 classes by default).
    Animal,
}

impl ShapeFamily {
    pub(crate) fn stream(self) -> u64 {
        match self {
            ShapeFamily::Caltech => 0x5ca1_7ec4,
            ShapeFamily::Animal => 0xa41_3a1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Factor {
    pub kind: FactorKind,
    pub class_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorCatalog {
    pub factors: Vec<Factor>,
    pub shape_family: ShapeFamily,
    pub image_size: usize,
    /// Maximum per-vertex displacement as a fraction of the image width.
    pub jitter: f64,
    /// HSV saturation of foreground colors.
    #[serde(default = "full_saturation")]
    pub saturation: f64,
}

fn full_saturation() -> f64 {
    1.0
}

impl FactorCatalog {
    /// Five factors with the given shape-class count and family.
    pub fn standard(shape_classes: usize, shape_family: ShapeFamily) -> Self {
        Self::with_counts(shape_family, &[shape_classes, 12, 4, 5, 3])
    }

    /// Source-style catalog: 50 shapes, 12 colors, 4 lightness levels, 5 textures, 3 backgrounds.
    pub fn source_default() -> Self {
        Self::standard(50, ShapeFamily::Caltech)
    }

    /// Target-style catalog: 10 disjoint shapes and 10 colors.
    pub fn target_default() -> Self {
        Self::with_counts(ShapeFamily::Animal, &[10, 10, 4, 5, 3])
    }

    /// Counts in [`FactorKind::ALL`] order.
    pub fn with_counts(shape_family: ShapeFamily, counts: &[usize; 5]) -> Self {
        Self {
            factors: FactorKind::ALL
                .iter()
                .zip(counts)
                .map(|(&kind, &class_count)| Factor { kind, class_count })
                .collect(),
            shape_family,
            image_size: 32,
            jitter: 0.10,
            saturation: 1.0,
        }
    }

    /// Keep only the listed kinds (in catalog order). Missing factors render at their defaults.
    pub fn restricted_to(&self, kinds: &[FactorKind]) -> Self {
        Self { factors: self.factors.iter().filter(|f| kinds.contains(&f.kind)).cloned().collect(), ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.class_count).collect()
    }

    pub fn index_of(&self, kind: FactorKind) -> Option<usize> {
        self.factors.iter().position(|f| f.kind == kind)
    }

    pub fn count_of(&self, kind: FactorKind) -> Option<usize> {
        self.index_of(kind).map(|i| self.factors[i].class_count)
    }

    pub fn pixel_len(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(LabError::Spec("catalog has no factors".into()));
        }
        if self.image_size < 8 {
            return Err(LabError::Spec(format!("image size {} is below 8", self.image_size)));
        }
        if !(self.saturation > 0.0 && self.saturation <= 1.0) {
            return Err(LabError::Spec(format!("saturation {} outside (0, 1]", self.saturation)));
        }
        if !(0.0..=0.25).contains(&self.jitter) {
            return Err(LabError::Spec(format!("jitter {} outside [0, 0.25]", self.jitter)));
        }
        for (i, f) in self.factors.iter().enumerate() {
            if f.class_count == 0 || f.class_count > f.kind.max_classes() {
                return Err(LabError::Spec(format!(
                    "factor {} has {} classes (allowed 1..={})",
                    f.kind.name(),
                    f.class_count,
                    f.kind.max_classes()
                )));
            }
            if self.factors[..i].iter().any(|g| g.kind == f.kind) {
                return Err(LabError::Spec(format!("factor {} listed twice", f.kind.name())));
            }
        }
        Ok(())
    }
}
