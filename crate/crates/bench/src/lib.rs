//! Shared fixtures for the criterion benches.

use shortcutlab_core::datagen::{
    generate_dataset, CorrelationMode, CorrelationSpec, Dataset, FactorCatalog, Role, ShapeFamily, SplitSize,
    SplitSizes,
};
use shortcutlab_core::model::{AssociationMode, Constraint, ModelConfig, Representation};

/// Desk-scale 16 px source and target domains.
pub fn domains(per_combination: usize) -> (Dataset, Dataset) {
    let mut sc = FactorCatalog::with_counts(ShapeFamily::Caltech, &[20, 12, 4, 5, 3]);
    let mut tc = FactorCatalog::target_default();
    for c in [&mut sc, &mut tc] {
        c.image_size = 16;
        c.jitter = 0.03;
    }
    let src_sizes = SplitSizes { train: SplitSize::Total(1024), val: SplitSize::Total(0), test: SplitSize::Total(256) };
    let tgt_sizes = SplitSizes {
        train: SplitSize::PerPair(per_combination),
        val: SplitSize::PerPair(0),
        test: SplitSize::PerPair(2),
    };
    let src = generate_dataset(
        Role::Source,
        &sc,
        &CorrelationSpec::color_shape(&sc, CorrelationMode::Uncorrelated).expect("color and shape"),
        &src_sizes,
        1,
    )
    .expect("source generates");
    let tgt = generate_dataset(
        Role::Target,
        &tc,
        &CorrelationSpec::color_shape(&tc, CorrelationMode::FullyCorrelated).expect("color and shape"),
        &tgt_sizes,
        2,
    )
    .expect("target generates");
    (src, tgt)
}

/// The desk model for `representation`/`constraint` on [`domains`].
pub fn model(
    representation: Representation,
    constraint: Constraint,
    association: AssociationMode,
    source: &Dataset,
) -> ModelConfig {
    ModelConfig {
        representation,
        constraint,
        association,
        input_dim: source.catalog.pixel_len(),
        factor_width: 64,
        encoder_hidden: vec![256, 256],
        head_hidden: 64,
        source_classes: source.catalog.class_counts(),
        attribute_classes: 10,
        object_classes: 10,
        attribute_factor: 1,
        object_factor: 0,
    }
}
