//! Joint source/target minibatch training, best-epoch selection and
//! multi-seed orchestration.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{Dataset, LabeledImage, Role};
use crate::error::{LabError, Result};
use crate::model::{input_batch, save_checkpoint, Constraint, ModelConfig, ModelParams, ParamGroup};
use crate::objectives::{loss_ci_adversary, total_loss, LossConfig, LossValues, SourceBatch, TargetBatch};
use crate::tensorops::{Adam, AdamConfig, Graph, Tensor};

/// Rows per forward pass during validation and evaluation.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples drawn from each active domain per step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Separate settings for the association logits; `None` reuses `optimizer`.
    pub association_optimizer: Option<AdamConfig>,
    pub loss: LossConfig,
    pub seeds: Vec<u64>,
    /// Share of each train split held out for model selection when the dataset has no validation split.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            optimizer: AdamConfig::default(),
            association_optimizer: None,
            loss: LossConfig::default(),
            seeds: (0..6).collect(),
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(LabError::Spec("epochs and batch_size must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(LabError::Spec(format!("val_fraction {} outside (0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean of the per-step training losses.
    pub train: LossValues,
    pub val: LossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Hex checksum of the returned parameters.
    pub params_checksum: String,
    pub wall_seconds: f64,
    pub steps: usize,
    pub source_samples: usize,
    pub target_samples: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Seeded generator for one purpose of one run.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_CARVE: u64 = 11;
const STREAM_SOURCE: u64 = 12;
const STREAM_TARGET: u64 = 13;

/// Train and validation rows of one domain.
#[derive(Clone, Debug)]
struct Pool<'a> {
    train: Vec<&'a LabeledImage>,
    val: Vec<&'a LabeledImage>,
}

fn pool<'a>(ds: &'a Dataset, fraction: f64, seed: u64, stream: u64) -> Result<Pool<'a>> {
    if ds.train.is_empty() {
        return Err(LabError::Contract("dataset has no training samples".into()));
    }
    if !ds.val.is_empty() {
        return Ok(Pool { train: ds.train.iter().collect(), val: ds.val.iter().collect() });
    }
    let mut idx: Vec<usize> = (0..ds.train.len()).collect();
    idx.shuffle(&mut stream_rng(seed, stream));
    let n_val = ((ds.train.len() as f64 * fraction).round() as usize).clamp(1, ds.train.len().saturating_sub(1).max(1));
    let val: BTreeSet<usize> = idx[..n_val].iter().copied().collect();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, s) in ds.train.iter().enumerate() {
        if val.contains(&i) {
            held.push(s)
        } else {
            train.push(s)
        }
    }
    if train.is_empty() {
        train = held.clone();
    }
    Ok(Pool { train, val: held })
}

/// Endless reshuffled pass over a domain.
struct Sampler<'a> {
    rows: Vec<&'a LabeledImage>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    drawn: usize,
}

impl<'a> Sampler<'a> {
    fn new(rows: Vec<&'a LabeledImage>, rng: ChaCha8Rng) -> Self {
        let order = (0..rows.len()).collect();
        let mut s = Self { rows, order, cursor: 0, rng, drawn: 0 };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self, n: usize) -> Vec<&'a LabeledImage> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.rows[self.order[self.cursor]]);
            self.cursor += 1;
        }
        self.drawn += n;
        out
    }
}

pub fn source_batch(rows: &[&LabeledImage]) -> SourceBatch {
    let k = rows[0].labels.len();
    SourceBatch {
        inputs: input_batch(rows.iter().copied()),
        labels: (0..k).map(|f| rows.iter().map(|s| s.labels[f] as usize).collect()).collect(),
    }
}

pub fn target_batch(ds: &Dataset, rows: &[&LabeledImage]) -> TargetBatch {
    let pairs: Vec<(usize, usize)> = rows.iter().map(|s| ds.pair_of(s)).collect();
    TargetBatch {
        inputs: input_batch(rows.iter().copied()),
        attributes: pairs.iter().map(|p| p.0).collect(),
        objects: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Whether a run with this configuration consumes source batches.
pub fn uses_source(model: &ModelConfig, loss: &LossConfig) -> bool {
    loss.lambda > 0.0 || (model.constraint == Constraint::Ci && model.blocks() > 1)
}

fn check_inputs(model: &ModelConfig, source: Option<&Dataset>, target: Option<&Dataset>) -> Result<()> {
    if let Some(s) = source {
        if s.role != Role::Source {
            return Err(LabError::Contract("source dataset must carry full factor labels".into()));
        }
        if s.catalog.class_counts() != model.source_classes {
            return Err(LabError::Contract(format!(
                "source classes {:?} differ from model {:?}",
                s.catalog.class_counts(),
                model.source_classes
            )));
        }
    }
    if let Some(t) = target {
        if (t.attribute_count(), t.object_count()) != (model.attribute_classes, model.object_classes) {
            return Err(LabError::Contract("target label space differs from model heads".into()));
        }
    }
    for ds in source.into_iter().chain(target) {
        if ds.catalog.pixel_len() != model.input_dim {
            return Err(LabError::Contract(format!(
                "images have {} values, model expects {}",
                ds.catalog.pixel_len(),
                model.input_dim
            )));
        }
    }
    Ok(())
}

fn chunks<'a>(rows: &'a [&'a LabeledImage]) -> impl Iterator<Item = &'a [&'a LabeledImage]> {
    rows.chunks(EVAL_CHUNK)
}

fn weighted(acc: &mut f64, value: f64, n: usize, total: usize) {
    *acc += value * n as f64 / total as f64;
}

/// Total loss over held-out rows of both domains, with parameters frozen.
fn validation_loss(
    model: &ModelParams,
    source: Option<&[&LabeledImage]>,
    target: Option<(&Dataset, &[&LabeledImage])>,
    loss: &LossConfig,
) -> Result<LossValues> {
    let mut v = LossValues::default();
    if let Some((ds, rows)) = target {
        for chunk in chunks(rows) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, |_| false);
            let vars = total_loss(&mut g, model, &bound, None, Some(&target_batch(ds, chunk)), loss)?;
            let vals = vars.values(&g);
            weighted(&mut v.target, vals.target, chunk.len(), rows.len());
            v.entropy = vals.entropy;
            v.suppress = vals.suppress;
        }
    }
    if let Some(rows) = source {
        for chunk in chunks(rows) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, |_| false);
            let vars = total_loss(&mut g, model, &bound, Some(&source_batch(chunk)), None, loss)?;
            let vals = vars.values(&g);
            weighted(&mut v.source, vals.source, chunk.len(), rows.len());
            weighted(&mut v.ci, vals.ci, chunk.len(), rows.len());
            v.entropy = vals.entropy;
            v.suppress = vals.suppress;
        }
    }
    v.total = v.target + loss.lambda * v.source + loss.gamma * v.ci + loss.alpha * v.entropy + loss.beta * v.suppress;
    Ok(v)
}

/// Apply one Adam step to the parameters at `indices`.
fn apply(opt: &mut Adam, params: &mut ModelParams, indices: &[usize], grads: &[Tensor]) -> Result<()> {
    let mut refs: Vec<&mut Tensor> = Vec::with_capacity(indices.len());
    let mut wanted = indices.iter().peekable();
    for (i, t) in params.tensors.iter_mut().enumerate() {
        if wanted.peek() == Some(&&i) {
            refs.push(t);
            wanted.next();
        }
    }
    opt.step(&mut refs, grads)
}

/// Train one seed. Source batches are drawn only when the configuration uses
/// them; the target may be absent for source-only diagnostics.
pub fn train(
    init: ModelParams,
    source: Option<&Dataset>,
    target: Option<&Dataset>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(ModelParams, RunRecord)> {
    config.validate()?;
    let started = Instant::now();
    let mut params = init;
    let model_cfg = params.config.clone();
    let source = source.filter(|_| uses_source(&model_cfg, &config.loss));
    check_inputs(&model_cfg, source, target)?;
    if source.is_none() && target.is_none() {
        return Err(LabError::Contract("nothing to train on".into()));
    }

    let src_pool = source.map(|d| pool(d, config.val_fraction, seed, STREAM_CARVE)).transpose()?;
    let tgt_pool = target.map(|d| pool(d, config.val_fraction, seed, STREAM_CARVE + 100)).transpose()?;
    let larger =
        src_pool.iter().map(|p| p.train.len()).chain(tgt_pool.iter().map(|p| p.train.len())).max().unwrap_or(0);
    let steps_per_epoch = larger.div_ceil(config.batch_size);

    let mut src_sampler = src_pool.as_ref().map(|p| Sampler::new(p.train.clone(), stream_rng(seed, STREAM_SOURCE)));
    let mut tgt_sampler = tgt_pool.as_ref().map(|p| Sampler::new(p.train.clone(), stream_rng(seed, STREAM_TARGET)));

    let ci_idx = params.group_indices(ParamGroup::CiHeads);
    let assoc_idx = params.group_indices(ParamGroup::Association);
    let main_idx: Vec<usize> =
        (0..params.tensors.len()).filter(|i| !ci_idx.contains(i) && !assoc_idx.contains(i)).collect();
    let opt_for = |idx: &[usize], cfg: &AdamConfig| {
        Adam::new(cfg.clone(), &idx.iter().map(|&i| &params.tensors[i]).collect::<Vec<_>>())
    };
    let mut main_opt = opt_for(&main_idx, &config.optimizer);
    let mut ci_opt = opt_for(&ci_idx, &config.optimizer);
    let mut assoc_opt = opt_for(&assoc_idx, config.association_optimizer.as_ref().unwrap_or(&config.optimizer));
    let adversary = !ci_idx.is_empty() && src_sampler.is_some();

    let mut logs = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut steps = 0;

    for epoch in 1..=config.epochs {
        let mut sum = LossValues::default();
        for step in 0..steps_per_epoch {
            let sb = src_sampler.as_mut().map(|s| source_batch(&s.next(config.batch_size)));
            let tb = match (tgt_sampler.as_mut(), target) {
                (Some(s), Some(ds)) => Some(target_batch(ds, &s.next(config.batch_size))),
                _ => None,
            };

            if adversary {
                let sb = sb.as_ref().expect("adversary needs source");
                let mut g = Graph::new();
                let bound = params.bind(&mut g, |grp| grp == ParamGroup::CiHeads);
                let x = g.constant(&sb.inputs);
                let z = params.encode_graph(&mut g, &bound, x)?;
                let l = loss_ci_adversary(&mut g, &params, &bound, z, &sb.labels)?;
                if !g.value(l).item().is_finite() {
                    return Err(LabError::NonFinite { epoch, step });
                }
                let grads = g.backward(l)?;
                let gs: Vec<Tensor> = ci_idx.iter().map(|&i| grads.wrt(bound.vars[i])).collect();
                apply(&mut ci_opt, &mut params, &ci_idx, &gs)?;
            }

            let mut g = Graph::new();
            let bound = params.bind(&mut g, |grp| grp != ParamGroup::CiHeads);
            let vars = total_loss(&mut g, &params, &bound, sb.as_ref(), tb.as_ref(), &config.loss)?;
            let vals = vars.values(&g);
            if !vals.total.is_finite() {
                return Err(LabError::NonFinite { epoch, step });
            }
            let grads = g.backward(vars.total)?;
            let gs: Vec<Tensor> = main_idx.iter().map(|&i| grads.wrt(bound.vars[i])).collect();
            apply(&mut main_opt, &mut params, &main_idx, &gs)?;
            if !assoc_idx.is_empty() {
                let gs: Vec<Tensor> = assoc_idx.iter().map(|&i| grads.wrt(bound.vars[i])).collect();
                apply(&mut assoc_opt, &mut params, &assoc_idx, &gs)?;
            }

            steps += 1;
            let n = steps_per_epoch as f64;
            sum.total += vals.total / n;
            sum.target += vals.target / n;
            sum.source += vals.source / n;
            sum.ci += vals.ci / n;
            sum.entropy += vals.entropy / n;
            sum.suppress += vals.suppress / n;
        }

        let val = validation_loss(
            &params,
            src_pool.as_ref().map(|p| p.val.as_slice()),
            target.zip(tgt_pool.as_ref()).map(|(d, p)| (d, p.val.as_slice())),
            &config.loss,
        )?;
        if !val.total.is_finite() {
            return Err(LabError::NonFinite { epoch, step: steps_per_epoch });
        }
        if best.as_ref().is_none_or(|b| val.total < b.1) {
            best = Some((epoch, val.total, params.clone()));
        }
        logs.push(EpochLog { epoch, train: sum, val });
    }

    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch");
    let source_samples = src_sampler.as_ref().map_or(0, |s| s.drawn);
    let target_samples = tgt_sampler.as_ref().map_or(0, |s| s.drawn);
    debug_assert!(source_samples == 0 || source_samples == steps * config.batch_size);
    debug_assert!(target_samples == 0 || target_samples == steps * config.batch_size);
    let record = RunRecord {
        seed,
        epochs: logs,
        best_epoch,
        best_val_loss,
        params_checksum: format!("{:016x}", best_params.checksum()),
        wall_seconds: started.elapsed().as_secs_f64(),
        steps,
        source_samples,
        target_samples,
        model: model_cfg,
        train: config.clone(),
    };
    Ok((best_params, record))
}

/// Recompute the validation loss a record was selected on.
pub fn reevaluate_validation(
    params: &ModelParams,
    source: Option<&Dataset>,
    target: Option<&Dataset>,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let source = source.filter(|_| uses_source(&params.config, &config.loss));
    let src_pool = source.map(|d| pool(d, config.val_fraction, seed, STREAM_CARVE)).transpose()?;
    let tgt_pool = target.map(|d| pool(d, config.val_fraction, seed, STREAM_CARVE + 100)).transpose()?;
    Ok(validation_loss(
        params,
        src_pool.as_ref().map(|p| p.val.as_slice()),
        target.zip(tgt_pool.as_ref()).map(|(d, p)| (d, p.val.as_slice())),
        &config.loss,
    )?
    .total)
}

/// One method/configuration of an experiment grid.
#[derive(Clone, Debug)]
pub struct MatrixCell {
    pub name: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub source: Option<Arc<Dataset>>,
    pub target: Option<Arc<Dataset>>,
}

#[derive(Clone, Debug)]
pub struct CellRun {
    pub cell: String,
    pub seed: u64,
    pub outcome: std::result::Result<(ModelParams, RunRecord), String>,
}

/// Hex digest identifying the catalogs a cell was trained on.
pub fn catalog_hash(cell: &MatrixCell) -> String {
    let mut h = Sha256::new();
    for ds in cell.source.iter().chain(&cell.target) {
        h.update(serde_json::to_vec(&ds.catalog).expect("catalog serializes"));
    }
    format!("{:016x}", u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes")))
}

/// Directory of one run's outputs below `root`.
pub fn run_dir(root: &Path, cell: &str, seed: u64) -> PathBuf {
    root.join("runs").join(cell).join(seed.to_string())
}

fn run_cell(cell: &MatrixCell, seed: u64, out: Option<&Path>) -> Result<(ModelParams, RunRecord)> {
    let init = ModelParams::init(&cell.model, seed)?;
    let (params, record) = train(init, cell.source.as_deref(), cell.target.as_deref(), &cell.train, seed)?;
    if let Some(root) = out {
        let dir = run_dir(root, &cell.name, seed);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("record.json"), serde_json::to_vec_pretty(&record)?)?;
        save_checkpoint(&dir.join("model.ckpt"), &params, seed, &catalog_hash(cell), record.best_epoch)?;
    }
    Ok((params, record))
}

/// Run every cell over its seeds on up to `jobs` threads. Failures are
/// recorded per run; results come back in (cell, seed) order.
pub fn run_matrix(cells: &[MatrixCell], jobs: usize, out: Option<&Path>) -> Vec<CellRun> {
    let work: Vec<(usize, u64)> =
        cells.iter().enumerate().flat_map(|(c, cell)| cell.train.seeds.iter().map(move |&s| (c, s))).collect();
    let results: Mutex<Vec<Option<CellRun>>> = Mutex::new(vec![None; work.len()]);
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(work.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, seed)) = work.get(i) else { break };
                let outcome = run_cell(&cells[c], seed, out).map_err(|e| e.to_string());
                results.lock().expect("result lock")[i] = Some(CellRun { cell: cells[c].name.clone(), seed, outcome });
            });
        }
    });
    results.into_inner().expect("result lock").into_iter().map(|r| r.expect("every run reports")).collect()
}
