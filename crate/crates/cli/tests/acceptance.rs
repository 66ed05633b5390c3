//! Acceptance criteria 1-10. Each test prints one PASS/FAIL line to stderr,
//! bypassing output capture, then asserts.
//!
//! Tests share a lock so the long presets never compete for the CPU, and the
//! table1-desk run is shared by criteria 4, 5, 7, 9 and 10.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use shortcutlab_cli::config::Method;
use shortcutlab_cli::presets::{preset, run_study, Study, StudyOutcome};
use shortcutlab_cli::runner::CellSummary;
use shortcutlab_cli::SEED_ENV;
use shortcutlab_core::datagen::{
    generate_dataset, CorrelationMode, CorrelationSpec, Dataset, FactorCatalog, FactorKind, Role, ShapeFamily, Split,
    SplitSize, SplitSizes,
};
use shortcutlab_core::eval::{
    bias_grid, bias_sweep, harmonic_mean, pair_log_probs, score_open_world, BiasCurve, PairLogProbs,
};
use shortcutlab_core::model::{
    load_checkpoint, AssociationMode, Constraint, ModelConfig, ModelParams, ParamGroup, Representation,
};
use shortcutlab_core::objectives::{loss_entropy, loss_source, loss_suppress, LossConfig};
use shortcutlab_core::tensorops::{AdamConfig, Graph, Tensor};
use shortcutlab_core::trainer::{run_dir, train, TrainConfig};
use shortcutlab_core::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, title: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id:>2} [{}] {title}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// One preset run with its wall time, kept alive for the whole test binary.
struct PresetRun {
    _dir: tempfile::TempDir,
    root: PathBuf,
    outcome: StudyOutcome,
    elapsed: Duration,
}

fn run_preset_in(study: Study, dir: tempfile::TempDir) -> PresetRun {
    std::env::remove_var(SEED_ENV);
    let root = dir.path().join("study");
    let mut study = study;
    study.relocate(&root);
    let start = Instant::now();
    let outcome = run_study(study, 1, 0).expect("preset runs");
    PresetRun { _dir: dir, root, outcome, elapsed: start.elapsed() }
}

fn preset_run(cell: &'static OnceLock<PresetRun>, name: &str) -> &'static PresetRun {
    cell.get_or_init(|| run_preset_in(preset(name).expect("known preset"), tempfile::tempdir().expect("tempdir")))
}

static TABLE1: OnceLock<PresetRun> = OnceLock::new();

fn table1() -> &'static PresetRun {
    preset_run(&TABLE1, "table1-desk")
}

fn cell<'a>(run: &'a PresetRun, experiment: &str, cell: &str) -> &'a CellSummary {
    run.outcome
        .experiment(experiment)
        .and_then(|e| e.summary(cell))
        .unwrap_or_else(|| panic!("{experiment}/{cell} missing"))
}

#[test]
fn criterion_01_formula_fidelity() {
    let _g = serial();
    let hm1 = harmonic_mean(95.5, 40.7);
    let hm2 = harmonic_mean(69.6, 7.3);

    let mut g = Graph::new();
    let a = g.param(&Tensor::matrix(1, 2, vec![0.6, 0.4]).unwrap());
    let s = loss_suppress(&mut g, a, 0.33).unwrap();
    let suppress = g.value(s).item();
    let grad = g.backward(s).unwrap().wrt(a);

    let mut g = Graph::new();
    let uniform = g.constant(&Tensor::filled(&[5, 2], 0.2));
    let e = loss_entropy(&mut g, uniform);
    let entropy = g.value(e).item();

    let counts = [50usize, 12, 4, 5, 3];
    let mut g = Graph::new();
    let logits: Vec<_> = counts.iter().map(|&n| g.constant(&Tensor::zeros(&[3, n]))).collect();
    let labels: Vec<Vec<usize>> = counts.iter().map(|&n| vec![0, n / 2, n - 1]).collect();
    let l = loss_source(&mut g, &logits, &labels).unwrap();
    let source = g.value(l).item();
    // Independent oracle: uniform heads cost ln(classes) per factor, averaged.
    let oracle = counts.iter().map(|&n| (n as f64).ln()).sum::<f64>() / counts.len() as f64;

    let checks = [
        ((hm1 - 57.0).abs() <= 0.1, format!("HM(95.5,40.7)={hm1:.3}")),
        ((hm2 - 13.2).abs() <= 0.1, format!("HM(69.6,7.3)={hm2:.3}")),
        ((suppress - 0.108).abs() <= 1e-12, format!("suppress={suppress:.15}")),
        (grad.data()[0] == 0.0 && grad.data()[1] != 0.0, format!("suppress grad={:?}", grad.data())),
        ((entropy - 2.0 * 5f64.ln()).abs() <= 1e-12, format!("entropy={entropy:.12}")),
        (
            (source - oracle).abs() <= 1e-3 && (oracle - 2.0982).abs() <= 1e-3,
            format!("source={source:.4} oracle={oracle:.4}"),
        ),
    ];
    let pass = checks.iter().all(|c| c.0);
    let detail: Vec<&str> = checks.iter().map(|c| c.1.as_str()).collect();
    report(1, "formula fidelity", pass, &detail.join(", "));
    assert!(pass, "{checks:?}");
}

#[test]
fn criterion_02_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let cases = gradcheck_suite(0).unwrap();
    let elapsed = start.elapsed();
    let worst = cases.iter().map(|c| c.max_relative_error).fold(0.0, f64::max);
    let failed: Vec<String> = cases.iter().filter(|c| !c.passed()).map(|c| c.name()).collect();
    let pass = cases.len() == 12 && failed.is_empty() && elapsed < Duration::from_secs(60);
    report(
        2,
        "gradient suite",
        pass,
        &format!(
            "{} cells, worst relative error {worst:.2e} < {GRADCHECK_TOLERANCE:e}, exact stop-grad zeros in all, {:.1}s; failed {failed:?}",
            cases.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

fn isolation_data() -> (Dataset, Dataset) {
    let mut sc = FactorCatalog::with_counts(ShapeFamily::Caltech, &[6, 6, 2, 2, 2]);
    let mut tc = FactorCatalog::with_counts(ShapeFamily::Animal, &[4, 4, 2, 2, 2]);
    for c in [&mut sc, &mut tc] {
        c.image_size = 8;
    }
    let sizes = SplitSizes { train: SplitSize::Total(384), val: SplitSize::Total(32), test: SplitSize::Total(32) };
    let src = generate_dataset(
        Role::Source,
        &sc,
        &CorrelationSpec::color_shape(&sc, CorrelationMode::Uncorrelated).unwrap(),
        &sizes,
        1,
    )
    .unwrap();
    let tgt = generate_dataset(
        Role::Target,
        &tc,
        &CorrelationSpec::color_shape(&tc, CorrelationMode::FullyCorrelated).unwrap(),
        &sizes,
        2,
    )
    .unwrap();
    (src, tgt)
}

fn encoder(params: &ModelParams) -> Vec<Vec<u64>> {
    params
        .group_indices(ParamGroup::Encoder)
        .into_iter()
        .map(|i| params.tensors[i].data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn criterion_03_il_isolation() {
    let _g = serial();
    let start = Instant::now();
    let (src, tgt) = isolation_data();
    let mut relabeled = tgt.clone();
    for s in relabeled.train.iter_mut().chain(relabeled.val.iter_mut()) {
        s.labels = vec![(s.labels[0] + 1) % 4, (s.labels[1] + 3) % 4];
    }
    // One epoch, so best-epoch selection on the relabeled validation split
    // cannot pick a different snapshot.
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: 32,
        optimizer: AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() },
        loss: LossConfig::default(),
        seeds: vec![7],
        ..TrainConfig::default()
    };
    let run = |constraint: Constraint, target: &Dataset| {
        let cfg = ModelConfig {
            representation: Representation::Factor,
            constraint,
            association: AssociationMode::Manual,
            input_dim: src.catalog.pixel_len(),
            factor_width: 6,
            encoder_hidden: vec![32, 32],
            head_hidden: 8,
            source_classes: src.catalog.class_counts(),
            attribute_classes: 4,
            object_classes: 4,
            attribute_factor: 1,
            object_factor: 0,
        };
        let init = ModelParams::init(&cfg, 7).unwrap();
        let (params, _) = train(init, Some(&src), Some(target), &train_cfg, 7).unwrap();
        encoder(&params)
    };
    let il_same = run(Constraint::Il, &tgt) == run(Constraint::Il, &relabeled);
    let none_differs = run(Constraint::None, &tgt) != run(Constraint::None, &relabeled);
    let elapsed = start.elapsed();
    let pass = il_same && none_differs && elapsed < Duration::from_secs(120);
    report(
        3,
        "IL isolation",
        pass,
        &format!(
            "IL encoders bitwise equal: {il_same}; unconstrained encoders differ: {none_differs}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_04_shortcut_mitigation() {
    let _g = serial();
    let run = table1();
    let il = &cell(run, "table1-desk", Method::FactorSrcIl.name()).aggregate;
    let f0 = &cell(run, "table1-desk", Method::Factor0.name()).aggregate;
    let g0 = &cell(run, "table1-desk", Method::Global0.name()).aggregate;
    let checks = [
        il.seeds == 6 && f0.seeds == 6 && g0.seeds == 6,
        il.unseen.mean - f0.unseen.mean >= 20.0,
        il.hm.mean > f0.hm.mean,
        f0.seen.mean >= 90.0 && f0.unseen.mean <= 15.0,
        g0.seen.mean >= 90.0 && g0.unseen.mean <= 15.0,
        run.elapsed < Duration::from_secs(15 * 60),
    ];
    let pass = checks.iter().all(|&c| c) && run.outcome.complete();
    report(
        4,
        "shortcut mitigation",
        pass,
        &format!(
            "unseen FactorSRC-IL {:.1} vs Factor-0 {:.1} (gap {:.1}); HM {:.1} vs {:.1}; Factor-0 seen/unseen {:.1}/{:.1}; Global-0 {:.1}/{:.1}; preset {:.0}s",
            il.unseen.mean,
            f0.unseen.mean,
            il.unseen.mean - f0.unseen.mean,
            il.hm.mean,
            f0.hm.mean,
            f0.seen.mean,
            f0.unseen.mean,
            g0.seen.mean,
            g0.unseen.mean,
            run.elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "{checks:?}");
}

#[test]
fn criterion_05_global_vs_factor() {
    let _g = serial();
    let run = table1();
    let il = cell(run, "table1-desk", Method::FactorSrcIl.name()).aggregate.unseen.mean;
    let global = cell(run, "table1-desk", Method::GlobalSrc.name()).aggregate.unseen.mean;
    let pass = il - global >= 10.0;
    report(
        5,
        "global vs factor",
        pass,
        &format!("unseen GlobalSRC {global:.1} vs FactorSRC-IL {il:.1} (gap {:.1})", il - global),
    );
    assert!(pass);
}

static ABLATION: OnceLock<PresetRun> = OnceLock::new();

#[test]
fn criterion_06_source_ablation() {
    let _g = serial();
    let run = preset_run(&ABLATION, "source-ablation");
    let hm = |e: &str| cell(run, e, Method::FactorSrcIl.name()).aggregate.hm.mean;
    let (u, c, t) = (hm("uncorrelated"), hm("correlated"), hm("target-as-source"));
    let seeds = ["uncorrelated", "correlated", "target-as-source"]
        .iter()
        .all(|e| cell(run, e, Method::FactorSrcIl.name()).aggregate.seeds == 6);
    let pass = seeds && u - c >= 15.0 && u - t >= 15.0 && run.outcome.complete();
    report(
        6,
        "uncorrelated source ablation",
        pass,
        &format!("HM uncorrelated {u:.1}, correlated {c:.1}, target-as-source {t:.1}"),
    );
    assert!(pass);
}

#[test]
fn criterion_07_cross_prediction() {
    let _g = serial();
    let run = table1();
    let table = |m: Method| cell(run, "table1-desk", m.name()).cross_pred.clone().expect("cross prediction probed");
    let (src, il) = (table(Method::FactorSrc), table(Method::FactorSrcIl));
    // Rows z_a, z_o; columns attribute, object.
    let cross = |t: &shortcutlab_core::eval::CrossPrediction| (t.values[0][1], t.values[1][0]);
    let direct = |t: &shortcutlab_core::eval::CrossPrediction| (t.values[0][0], t.values[1][1]);
    let (src_x, il_x) = (cross(&src), cross(&il));
    let (src_d, il_d) = (direct(&src), direct(&il));
    let pass =
        il_x.0 < src_x.0 && il_x.1 < src_x.1 && (il_d.0 - src_d.0).abs() <= 10.0 && (il_d.1 - src_d.1).abs() <= 10.0;
    report(
        7,
        "cross-prediction independence",
        pass,
        &format!(
            "z_a->object {:.2} vs {:.2}, z_o->attribute {:.2} vs {:.2} (IL vs FactorSRC); direct z_a->attribute {:.2} vs {:.2}, z_o->object {:.2} vs {:.2}",
            il_x.0, src_x.0, il_x.1, src_x.1, il_d.0, src_d.0, il_d.1, src_d.1
        ),
    );
    assert!(pass);
}

static SEMI: OnceLock<PresetRun> = OnceLock::new();

#[test]
fn criterion_08_learned_association() {
    let _g = serial();
    let run = preset_run(&SEMI, "semi-correlated");
    let out = run.outcome.experiment("semi-correlated").expect("experiment ran");
    let entropies = |m: Method| {
        let rs: Vec<_> = out.reports_for(m.name()).collect();
        let col = |c: usize| {
            rs.iter()
                .map(|r| r.assoc_matrix.iter().map(|row| row[c]).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
                .sum::<f64>()
                / rs.len() as f64
        };
        (col(0), col(1))
    };
    let (la, lar) = (entropies(Method::FactorSrcIlLa), entropies(Method::FactorSrcIlLaR));
    let seeds = out.reports_for(Method::FactorSrcIlLaR.name()).count();
    let factors = run.outcome.study.experiments[0].config.source_plan().unwrap().expect("source enabled").catalog;
    let color = factors.index_of(FactorKind::Color).unwrap();
    let shape = factors.index_of(FactorKind::Shape).unwrap();
    let argmax = |col: &[f64]| shortcutlab_core::tensorops::argmax(col);
    let matches = out
        .reports_for(Method::FactorSrcIlLaR.name())
        .filter(|r| {
            let a: Vec<f64> = r.assoc_matrix.iter().map(|row| row[0]).collect();
            let o: Vec<f64> = r.assoc_matrix.iter().map(|row| row[1]).collect();
            argmax(&a) == color && argmax(&o) == shape
        })
        .count();
    let hm = |m: Method| cell(run, "semi-correlated", m.name()).aggregate.hm.mean;
    let (hm_la, hm_lar) = (hm(Method::FactorSrcIlLa), hm(Method::FactorSrcIlLaR));
    let pass = seeds == 6 && lar.0 < la.0 && lar.1 < la.1 && matches >= 4 && hm_lar > hm_la && run.outcome.complete();
    report(
        8,
        "learned association",
        pass,
        &format!(
            "entropy LA-R ({:.3}, {:.3}) vs LA ({:.3}, {:.3}); argmax matches manual in {matches}/{seeds} seeds; HM LA-R {hm_lar:.1} vs LA {hm_la:.1}",
            lar.0, lar.1, la.0, la.1
        ),
    );
    assert!(pass);
}

/// Hand-enumerated 2×2 grid, seen pairs (0,0) and (1,1).
fn fixture() -> PairLogProbs {
    PairLogProbs {
        attribute: vec![vec![-0.1, -2.3], vec![-1.0, -0.5], vec![-0.3, -1.4], vec![-0.7, -0.7]],
        object: vec![vec![-0.2, -1.7], vec![-0.4, -1.1], vec![-0.9, -0.5], vec![-0.2, -1.7]],
        truth: vec![(0, 0), (1, 1), (0, 1), (1, 0)],
    }
}

fn monotone(curve: &BiasCurve) -> bool {
    curve.points.windows(2).all(|w| w[1].seen <= w[0].seen && w[1].unseen >= w[0].unseen)
}

#[test]
fn criterion_09_bias_sweep() {
    let _g = serial();
    let seen = [(0, 0), (1, 1)];
    let curve = bias_sweep(&fixture(), &seen, &[-1.0, 0.0, 1.0, 2.0]).unwrap();
    let got: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.seen, p.unseen)).collect();
    let expected = [(50.0, 0.0), (50.0, 50.0), (50.0, 100.0), (0.0, 100.0)];
    let fixture_ok = got == expected
        && curve.points[2].hm == 200.0 / 3.0
        && curve.max_hm == 200.0 / 3.0
        && curve.points[3].hm == 0.0;

    let run = table1();
    let out = run.outcome.experiment("table1-desk").expect("experiment ran");
    let grid = bias_grid(-10.0, 10.0, 41).unwrap();
    let mut trained_ok = true;
    let mut worst_gain = f64::INFINITY;
    let target = shortcutlab_core::datagen::load_dataset(&out.dir.join("data").join("target")).unwrap();
    for c in &out.summaries {
        for seed in 0..6u64 {
            let (_, params) = load_checkpoint(&run_dir(&out.dir, &c.cell, seed).join("model.ckpt")).unwrap();
            let probs = pair_log_probs(&params, &target, Split::Test).unwrap();
            let curve = bias_sweep(&probs, &target.seen_pairs, &grid).unwrap();
            let zero = score_open_world(&probs, &target.seen_pairs, 0.0);
            trained_ok &= monotone(&curve) && curve.max_hm >= zero.hm;
            worst_gain = worst_gain.min(curve.max_hm - zero.hm);
        }
    }
    let pass = fixture_ok && trained_ok;
    report(
        9,
        "bias-sweep properties",
        pass,
        &format!("2x2 fixture {got:?} max HM {:.3}; 41-point sweeps on {} trained models monotone with max HM >= bias-0 HM (min gain {worst_gain:.2})", curve.max_hm, out.summaries.len() * 6),
    );
    assert!(pass);
}

fn files(root: &Path) -> BTreeMap<PathBuf, PathBuf> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), path);
            }
        }
    }
    out
}

#[test]
fn criterion_10_reproducibility() {
    let _g = serial();
    let first = table1();
    let emitted: Study = serde_json::from_str(&fs::read_to_string(first.root.join("study.json")).unwrap()).unwrap();
    let second = run_preset_in(emitted, tempfile::tempdir().unwrap());
    let (a, b) = (files(&first.root), files(&second.root));
    let compared: Vec<&PathBuf> = a
        .keys()
        .filter(|p| {
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or("");
            name.ends_with(".csv") || name == "manifest.json"
        })
        .collect();
    let mismatched: Vec<&PathBuf> = compared
        .iter()
        .copied()
        .filter(|p| b.get(*p).map(|q| fs::read(q).unwrap()) != Some(fs::read(&a[*p]).unwrap()))
        .collect();
    let manifests = compared.iter().filter(|p| p.ends_with("manifest.json")).count();
    let csvs = compared.len() - manifests;
    let pass = mismatched.is_empty() && manifests == 2 && csvs > 0 && a.len() == b.len();
    report(
        10,
        "determinism",
        pass,
        &format!("rerun from emitted study.json: {manifests} dataset manifests and {csvs} report CSVs compared bitwise, mismatches {mismatched:?}"),
    );
    assert!(pass);
}
