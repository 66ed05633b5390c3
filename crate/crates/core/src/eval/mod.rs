//! Open-world seen/unseen scoring, bias sweeps, linear probes and
//! cross-prediction matrices.

mod probe;
mod report;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, LabeledImage, Split};
use crate::error::{LabError, Result};
use crate::model::{input_batch, ModelParams, Representation};
use crate::tensorops::{log_softmax_slice, Graph};
use crate::trainer::EVAL_CHUNK;

pub use probe::{cross_prediction, linear_probe, ProbeConfig};
pub use report::{
    assoc_csv, crosspred_csv, report_csv, write_assoc_ppm, Aggregate, CrossPrediction, EvalReport, ReportRow, Stat,
};

/// One feature vector per sample.
pub type Rows = Vec<Vec<f64>>;

/// `2·s·u / (s + u)`, zero when both are zero.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// Per-sample log-probabilities of both target heads plus the true pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLogProbs {
    pub attribute: Vec<Vec<f64>>,
    pub object: Vec<Vec<f64>>,
    pub truth: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OpenWorld {
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
}

impl OpenWorld {
    pub fn new(seen: f64, unseen: f64) -> Self {
        Self { seen, unseen, hm: harmonic_mean(seen, unseen) }
    }
}

/// Latent rows for a set of images, evaluated in chunks.
pub fn encode_all(params: &ModelParams, rows: &[&LabeledImage]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let x = g.constant(&input_batch(chunk.iter().copied()));
        let z = params.encode_graph(&mut g, &bound, x)?;
        let t = g.value(z);
        out.extend((0..t.rows()).map(|r| t.row(r).to_vec()));
    }
    Ok(out)
}

/// `(z_a, z_o)` rows under the model's current association.
pub fn mixed_all(params: &ModelParams, rows: &[&LabeledImage]) -> Result<(Rows, Rows)> {
    let (mut za, mut zo) = (Vec::with_capacity(rows.len()), Vec::with_capacity(rows.len()));
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let x = g.constant(&input_batch(chunk.iter().copied()));
        let z = params.encode_graph(&mut g, &bound, x)?;
        let assoc = params.association_graph(&mut g, &bound)?;
        let (a, o) = params.mix_graph(&mut g, z, assoc)?;
        for r in 0..chunk.len() {
            za.push(g.value(a).row(r).to_vec());
            zo.push(g.value(o).row(r).to_vec());
        }
    }
    Ok((za, zo))
}

/// Target-head log-probabilities for one split of a target dataset.
pub fn pair_log_probs(params: &ModelParams, dataset: &Dataset, split: Split) -> Result<PairLogProbs> {
    let rows: Vec<&LabeledImage> = dataset.split(split).iter().collect();
    let (na, no) = (dataset.attribute_count(), dataset.object_count());
    let mut out = PairLogProbs {
        attribute: Vec::with_capacity(rows.len()),
        object: Vec::with_capacity(rows.len()),
        truth: Vec::with_capacity(rows.len()),
    };
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, |_| false);
        let x = g.constant(&input_batch(chunk.iter().copied()));
        let z = params.encode_graph(&mut g, &bound, x)?;
        let assoc = params.association_graph(&mut g, &bound)?;
        let (za, zo) = params.mix_graph(&mut g, z, assoc)?;
        let (la, lo) = params.target_logits_graph(&mut g, &bound, za, zo)?;
        for (r, s) in chunk.iter().enumerate() {
            let truth = dataset.pair_of(s);
            if truth.0 >= na || truth.1 >= no {
                return Err(LabError::Data(format!("test label {truth:?} outside the {na}x{no} grid")));
            }
            out.attribute.push(log_softmax_slice(g.value(la).row(r)));
            out.object.push(log_softmax_slice(g.value(lo).row(r)));
            out.truth.push(truth);
        }
    }
    Ok(out)
}

/// Highest-scoring pair over the full grid; unseen pairs get `bias` added.
/// Ties go to the lexicographically smallest pair.
pub fn predict_pair(attr: &[f64], obj: &[f64], seen: &BTreeSet<(usize, usize)>, bias: f64) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::NEG_INFINITY;
    for (a, &sa) in attr.iter().enumerate() {
        for (o, &so) in obj.iter().enumerate() {
            let score = sa + so + if seen.contains(&(a, o)) { 0.0 } else { bias };
            if score > best_score {
                best_score = score;
                best = (a, o);
            }
        }
    }
    best
}

/// Seen and unseen accuracy (percent) with a bias on unseen pair scores.
/// A sample counts only when both labels are right.
pub fn score_open_world(probs: &PairLogProbs, seen_pairs: &[(usize, usize)], bias: f64) -> OpenWorld {
    let seen: BTreeSet<(usize, usize)> = seen_pairs.iter().copied().collect();
    let (mut hit_s, mut n_s, mut hit_u, mut n_u) = (0usize, 0usize, 0usize, 0usize);
    for ((a, o), &truth) in probs.attribute.iter().zip(&probs.object).zip(&probs.truth) {
        let correct = predict_pair(a, o, &seen, bias) == truth;
        if seen.contains(&truth) {
            n_s += 1;
            hit_s += correct as usize;
        } else {
            n_u += 1;
            hit_u += correct as usize;
        }
    }
    let pct = |h: usize, n: usize| if n == 0 { 0.0 } else { 100.0 * h as f64 / n as f64 };
    OpenWorld::new(pct(hit_s, n_s), pct(hit_u, n_u))
}

/// Open-world accuracy of a model on a target dataset's test split.
pub fn evaluate_open_world(params: &ModelParams, dataset: &Dataset, bias: f64) -> Result<OpenWorld> {
    let probs = pair_log_probs(params, dataset, Split::Test)?;
    Ok(score_open_world(&probs, &dataset.seen_pairs, bias))
}

/// Accuracy per `(attribute, object)` cell of the test grid, `None` for empty cells.
pub fn pair_accuracy_grid(probs: &PairLogProbs, seen_pairs: &[(usize, usize)], bias: f64) -> Vec<Vec<Option<f64>>> {
    let seen: BTreeSet<(usize, usize)> = seen_pairs.iter().copied().collect();
    let na = probs.attribute.first().map_or(0, Vec::len);
    let no = probs.object.first().map_or(0, Vec::len);
    let mut hits = vec![vec![(0usize, 0usize); no]; na];
    for ((a, o), &(ta, to)) in probs.attribute.iter().zip(&probs.object).zip(&probs.truth) {
        let cell = &mut hits[ta][to];
        cell.1 += 1;
        cell.0 += (predict_pair(a, o, &seen, bias) == (ta, to)) as usize;
    }
    hits.into_iter()
        .map(|row| row.into_iter().map(|(h, n)| (n > 0).then(|| 100.0 * h as f64 / n as f64)).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasPoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasCurve {
    pub points: Vec<BiasPoint>,
    pub max_seen: f64,
    pub max_unseen: f64,
    pub max_hm: f64,
}

/// `steps` evenly spaced values from `lo` to `hi` inclusive.
pub fn bias_grid(lo: f64, hi: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 || !lo.is_finite() || !hi.is_finite() || lo > hi {
        return Err(LabError::Spec(format!("bad bias grid {lo}:{hi}:{steps}")));
    }
    if steps == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect())
}

/// Open-world accuracy at every bias of the grid, plus the best value of each metric.
pub fn bias_sweep(probs: &PairLogProbs, seen_pairs: &[(usize, usize)], grid: &[f64]) -> Result<BiasCurve> {
    if grid.is_empty() {
        return Err(LabError::Contract("bias grid is empty".into()));
    }
    let points: Vec<BiasPoint> = grid
        .iter()
        .map(|&bias| {
            let r = score_open_world(probs, seen_pairs, bias);
            BiasPoint { bias, seen: r.seen, unseen: r.unseen, hm: r.hm }
        })
        .collect();
    let max = |f: fn(&BiasPoint) -> f64| points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
    Ok(BiasCurve { max_seen: max(|p| p.seen), max_unseen: max(|p| p.unseen), max_hm: max(|p| p.hm), points })
}

/// Evenly spaced bias grid, written `lo:hi:steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSweep {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl BiasSweep {
    pub fn grid(&self) -> Result<Vec<f64>> {
        bias_grid(self.lo, self.hi, self.steps)
    }
}

impl std::str::FromStr for BiasSweep {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || LabError::Spec(format!("bias sweep {s:?} is not lo:hi:steps"));
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, steps] = parts[..] else { return Err(bad()) };
        let sweep = Self {
            lo: lo.trim().parse().map_err(|_| bad())?,
            hi: hi.trim().parse().map_err(|_| bad())?,
            steps: steps.trim().parse().map_err(|_| bad())?,
        };
        sweep.grid()?;
        Ok(sweep)
    }
}

/// Which analyses a report includes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Bias added to unseen-pair scores for the headline numbers.
    pub bias: f64,
    pub bias_sweep: Option<BiasSweep>,
    /// Probe `z_a`/`z_o` on the target test split.
    pub crosspred: bool,
    /// Probe every factor block on the source test split.
    pub source_crosspred: bool,
    /// Write the association as a PPM heatmap next to each report.
    pub assoc_heatmap: bool,
    pub probe: ProbeConfig,
    pub probe_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bias: 0.0,
            bias_sweep: None,
            crosspred: false,
            source_crosspred: false,
            assoc_heatmap: false,
            probe: ProbeConfig::default(),
            probe_seed: 0,
        }
    }
}

/// Full report for one trained model on the target test split.
pub fn evaluate_run(
    params: &ModelParams,
    target: &Dataset,
    source: Option<&Dataset>,
    config: &EvalConfig,
    cell: &str,
    seed: u64,
) -> Result<EvalReport> {
    let probs = pair_log_probs(params, target, Split::Test)?;
    let headline = score_open_world(&probs, &target.seen_pairs, config.bias);
    let bias_curve = config.bias_sweep.map(|s| bias_sweep(&probs, &target.seen_pairs, &s.grid()?)).transpose()?;
    let cross_pred = config
        .crosspred
        .then(|| target_cross_prediction(params, target, &config.probe, config.probe_seed))
        .transpose()?;
    let source_cross_pred = match source {
        Some(src) if config.source_crosspred && params.config.representation == Representation::Factor => {
            Some(source_cross_prediction(params, src, &config.probe, config.probe_seed)?)
        }
        _ => None,
    };
    let assoc = params.association();
    Ok(EvalReport {
        cell: cell.to_string(),
        seed,
        bias: config.bias,
        seen_acc: headline.seen,
        unseen_acc: headline.unseen,
        hm_acc: headline.hm,
        pair_grid: pair_accuracy_grid(&probs, &target.seen_pairs, config.bias),
        bias_curve,
        cross_pred,
        source_cross_pred,
        assoc_matrix: (0..assoc.rows()).map(|r| [assoc.get(r, 0), assoc.get(r, 1)]).collect(),
        assoc_kind: assoc.kind,
    })
}

/// Source-domain cross prediction: probe every factor block for every factor label.
pub fn source_cross_prediction(
    params: &ModelParams,
    dataset: &Dataset,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<CrossPrediction> {
    if params.config.representation != Representation::Factor {
        return Err(LabError::Contract("cross prediction needs factor representations".into()));
    }
    let rows: Vec<&LabeledImage> = dataset.split(Split::Test).iter().collect();
    let latent = encode_all(params, &rows)?;
    let w = params.config.factor_width;
    let k = params.config.factor_count();
    let reps: Vec<Vec<Vec<f64>>> =
        (0..k).map(|f| latent.iter().map(|z| z[f * w..(f + 1) * w].to_vec()).collect()).collect();
    let labels: Vec<Vec<usize>> = (0..k).map(|f| rows.iter().map(|s| s.labels[f] as usize).collect()).collect();
    let names: Vec<String> = dataset.catalog.factors.iter().map(|f| f.kind.name().to_string()).collect();
    cross_prediction(&reps, &names, &labels, &dataset.catalog.class_counts(), &names, probe, seed)
}

/// Target-domain cross prediction: `z_a` and `z_o` probed for attribute and object labels.
pub fn target_cross_prediction(
    params: &ModelParams,
    dataset: &Dataset,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<CrossPrediction> {
    let rows: Vec<&LabeledImage> = dataset.split(Split::Test).iter().collect();
    let (za, zo) = mixed_all(params, &rows)?;
    let pairs: Vec<(usize, usize)> = rows.iter().map(|s| dataset.pair_of(s)).collect();
    let labels = vec![pairs.iter().map(|p| p.0).collect(), pairs.iter().map(|p| p.1).collect()];
    let names = vec!["attribute".to_string(), "object".to_string()];
    cross_prediction(
        &[za, zo],
        &["z_a".to_string(), "z_o".to_string()],
        &labels,
        &[dataset.attribute_count(), dataset.object_count()],
        &names,
        probe,
        seed,
    )
}
