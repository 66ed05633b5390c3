use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use shortcutlab_bench::{domains, model};
use shortcutlab_core::datagen::{render_sample, FactorCatalog};
use shortcutlab_core::eval::evaluate_open_world;
use shortcutlab_core::model::{AssociationMode, Constraint, ModelParams, Representation};
use shortcutlab_core::objectives::{total_loss, LossConfig};
use shortcutlab_core::tensorops::{Graph, Tensor};
use shortcutlab_core::trainer::{source_batch, target_batch, train, TrainConfig};

fn bench_affine(c: &mut Criterion) {
    let x = Tensor::filled(&[64, 768], 0.1);
    let w = Tensor::filled(&[256, 768], 0.01);
    let b = Tensor::zeros(&[256]);
    c.bench_function("affine_forward_backward_64x768x256", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(&x), g.param(&w), g.param(&b));
            let y = g.affine(xv, wv, bv).expect("shapes agree");
            let l = g.sum(y);
            black_box(g.backward(l).expect("scalar loss"));
        })
    });
}

fn bench_render(c: &mut Criterion) {
    let mut catalog = FactorCatalog::source_default();
    catalog.image_size = 16;
    c.bench_function("render_sample_16px", |bench| {
        let mut seed = 0u64;
        bench.iter(|| {
            seed += 1;
            black_box(render_sample(&catalog, &[7, 3, 1, 2, 0], seed).expect("valid tuple"))
        })
    });
}

fn bench_step(c: &mut Criterion) {
    let (src, tgt) = domains(4);
    let mut group = c.benchmark_group("loss_and_gradients_batch64");
    for (name, rep, cons, assoc) in [
        ("factor_src_il", Representation::Factor, Constraint::Il, AssociationMode::Manual),
        ("factor_src_ci", Representation::Factor, Constraint::Ci, AssociationMode::Manual),
        ("factor_src_il_la", Representation::Factor, Constraint::Il, AssociationMode::Learned),
        ("global_src", Representation::Global, Constraint::None, AssociationMode::Manual),
    ] {
        let params = ModelParams::init(&model(rep, cons, assoc, &src), 0).expect("valid model");
        let sb = source_batch(&src.train.iter().take(64).collect::<Vec<_>>());
        let tb = target_batch(&tgt, &tgt.train.iter().take(64).collect::<Vec<_>>());
        let loss = LossConfig::default();
        group.bench_function(name, |bench| {
            bench.iter(|| {
                let mut g = Graph::new();
                let bound = params.bind(&mut g, |_| true);
                let vars = total_loss(&mut g, &params, &bound, Some(&sb), Some(&tb), &loss).expect("loss builds");
                black_box(g.backward(vars.total).expect("scalar loss"))
            })
        });
    }
    group.finish();
}

fn bench_epoch_and_eval(c: &mut Criterion) {
    let (src, tgt) = domains(4);
    let cfg = model(Representation::Factor, Constraint::Il, AssociationMode::Manual, &src);
    let train_cfg = TrainConfig { epochs: 1, seeds: vec![0], ..TrainConfig::default() };
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("one_epoch_factor_src_il", |bench| {
        bench.iter_batched(
            || ModelParams::init(&cfg, 0).expect("valid model"),
            |init| black_box(train(init, Some(&src), Some(&tgt), &train_cfg, 0).expect("trains")),
            BatchSize::LargeInput,
        )
    });
    let params = ModelParams::init(&cfg, 0).expect("valid model");
    group.bench_function("open_world_eval_10x10", |bench| {
        bench.iter(|| black_box(evaluate_open_world(&params, &tgt, 0.0).expect("evaluates")))
    });
    group.finish();
}

criterion_group!(benches, bench_affine, bench_render, bench_step, bench_epoch_and_eval);
criterion_main!(benches);
