use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::report::CrossPrediction;
use crate::error::{LabError, Result};
use crate::tensorops::{argmax, Adam, AdamConfig, Graph, Tensor};
use crate::trainer::stream_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 0.01, train_fraction: 0.8 }
    }
}

const STREAM_PROBE: u64 = 21;

fn rows_tensor(reps: &[Vec<f64>], idx: &[usize]) -> Result<Tensor> {
    let d = reps[idx[0]].len();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&reps[i]);
    }
    Tensor::matrix(idx.len(), d, data)
}

/// Accuracy (percent) of an affine softmax classifier fitted on a seeded
/// split of frozen representations and scored on the held-out part.
pub fn linear_probe(
    reps: &[Vec<f64>],
    labels: &[usize],
    class_count: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    if reps.len() != labels.len() || reps.len() < 2 {
        return Err(LabError::Contract("probe needs at least two labeled representations".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
        return Err(LabError::Index { what: "probe label".into(), index: bad, size: class_count });
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(LabError::Contract("probe labels contain a single class".into()));
    }
    let mut idx: Vec<usize> = (0..reps.len()).collect();
    idx.shuffle(&mut stream_rng(seed, STREAM_PROBE));
    let n_train = ((reps.len() as f64 * probe.train_fraction).round() as usize).clamp(1, reps.len() - 1);
    let (train_idx, eval_idx) = idx.split_at(n_train);

    let x_train = rows_tensor(reps, train_idx)?;
    let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let d = x_train.cols();
    let mut w = Tensor::zeros(&[class_count, d]);
    let mut b = Tensor::zeros(&[class_count]);
    let cfg = AdamConfig { learning_rate: probe.learning_rate, weight_decay: 0.0, ..AdamConfig::default() };
    let mut opt = Adam::new(cfg, &[&w, &b]);
    for _ in 0..probe.epochs {
        let mut g = Graph::new();
        let (wv, bv) = (g.param(&w), g.param(&b));
        let x = g.constant(&x_train);
        let logits = g.affine(x, wv, bv)?;
        let loss = g.cross_entropy(logits, &y_train)?;
        let grads = g.backward(loss)?;
        opt.step(&mut [&mut w, &mut b], &[grads.wrt(wv), grads.wrt(bv)])?;
    }

    let mut g = Graph::new();
    let (wv, bv) = (g.constant(&w), g.constant(&b));
    let x = g.constant(&rows_tensor(reps, eval_idx)?);
    let logits = g.affine(x, wv, bv)?;
    let out = g.value(logits);
    let hits = eval_idx.iter().enumerate().filter(|&(r, &i)| argmax(out.row(r)) == labels[i]).count();
    Ok(100.0 * hits as f64 / eval_idx.len() as f64)
}

/// Probe accuracy of every representation (rows) for every label set (columns).
pub fn cross_prediction(
    reps: &[Vec<Vec<f64>>],
    rep_names: &[String],
    labels: &[Vec<usize>],
    class_counts: &[usize],
    label_names: &[String],
    probe: &ProbeConfig,
    seed: u64,
) -> Result<CrossPrediction> {
    let mut values = Vec::with_capacity(reps.len());
    for r in reps {
        let mut row = Vec::with_capacity(labels.len());
        for (l, &n) in labels.iter().zip(class_counts) {
            row.push(linear_probe(r, l, n, probe, seed)?);
        }
        values.push(row);
    }
    Ok(CrossPrediction { rows: rep_names.to_vec(), cols: label_names.to_vec(), values })
}
