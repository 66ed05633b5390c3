//! Loss terms and their gradient routing.
//!
//! Every function appends nodes to a [`Graph`]; which parameters receive
//! gradients is decided by how the model was bound (see
//! [`ModelParams::bind`]) plus the explicit `stop_grad` calls made here.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::{Bound, Constraint, ModelParams};
use crate::tensorops::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight on the source loss.
    pub lambda: f64,
    /// Weight on the cross-factor independence loss.
    pub gamma: f64,
    /// Weight on the association entropy.
    pub alpha: f64,
    /// Weight on the association suppression term.
    pub beta: f64,
    /// Suppression threshold.
    pub tau: f64,
    /// Add the entropy and suppression regularizers (learned association only).
    pub association_reg: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 10.0, gamma: 5.0, alpha: 5.0, beta: 20.0, tau: 0.33, association_reg: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("gamma", self.gamma), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(LabError::Spec(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(LabError::Spec(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// Source images with one label column per factor: `labels[k][b]`.
#[derive(Clone, Debug)]
pub struct SourceBatch {
    pub inputs: Tensor,
    pub labels: Vec<Vec<usize>>,
}

/// Target images with attribute and object labels.
#[derive(Clone, Debug)]
pub struct TargetBatch {
    pub inputs: Tensor,
    pub attributes: Vec<usize>,
    pub objects: Vec<usize>,
}

/// Mean over factors of the batch-mean cross-entropy.
pub fn loss_source(g: &mut Graph, logits: &[Var], labels: &[Vec<usize>]) -> Result<Var> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(LabError::Dimension { op: "loss_source", left: vec![logits.len()], right: vec![labels.len()] });
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (&l, y) in logits.iter().zip(labels) {
        terms.push(g.cross_entropy(l, y)?);
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / logits.len() as f64))
}

/// Average of the attribute and object cross-entropies.
pub fn loss_target(
    g: &mut Graph,
    attr_logits: Var,
    obj_logits: Var,
    attributes: &[usize],
    objects: &[usize],
) -> Result<Var> {
    let a = g.cross_entropy(attr_logits, attributes)?;
    let o = g.cross_entropy(obj_logits, objects)?;
    let sum = g.add(a, o)?;
    Ok(g.scale(sum, 0.5))
}

/// Adversary objective: every cross-prediction head predicts the other
/// factor's label from a detached representation.
pub fn loss_ci_adversary(
    g: &mut Graph,
    model: &ModelParams,
    bound: &Bound,
    z: Var,
    labels: &[Vec<usize>],
) -> Result<Var> {
    let detached = g.stop_grad(z);
    let heads = model.ci_logits_graph(g, bound, detached)?;
    let mut terms = Vec::with_capacity(heads.len());
    for (_, to, logits) in heads {
        terms.push(g.cross_entropy(logits, &labels[to])?);
    }
    sum_or_zero(g, &terms)
}

/// Independence objective: cross-prediction heads should be maximally
/// uncertain. Bind the heads as constants so only the encoder moves.
pub fn loss_ci(g: &mut Graph, model: &ModelParams, bound: &Bound, z: Var) -> Result<Var> {
    let heads = model.ci_logits_graph(g, bound, z)?;
    let terms: Vec<Var> = heads.into_iter().map(|(_, _, l)| g.cross_entropy_to_uniform(l)).collect();
    sum_or_zero(g, &terms)
}

fn sum_or_zero(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        Ok(g.constant(&Tensor::scalar(0.0)))
    } else {
        g.add_all(terms)
    }
}

/// Summed entropy of both association columns.
pub fn loss_entropy(g: &mut Graph, assoc: Var) -> Var {
    g.entropy(assoc)
}

/// Suppression of non-maximal entries in rows whose maximum exceeds `tau`.
/// The row maximum enters as a constant, so gradients reach only the other entries.
pub fn loss_suppress(g: &mut Graph, assoc: Var, tau: f64) -> Result<Var> {
    let a = g.value(assoc).clone();
    let cols = a.cols();
    let mut weights = vec![0.0; a.len()];
    for r in 0..a.rows() {
        let row = a.row(r);
        let jmax = crate::tensorops::argmax(row);
        if row[jmax] > tau {
            for j in (0..cols).filter(|&j| j != jmax) {
                weights[r * cols + j] = row[jmax] - tau;
            }
        }
    }
    let w = g.constant(&Tensor::new(a.shape().to_vec(), weights)?);
    let weighted = g.mul(assoc, w)?;
    Ok(g.sum(weighted))
}

/// Graph handles of each term of [`total_loss`]; absent terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub target: Option<Var>,
    pub source: Option<Var>,
    pub ci: Option<Var>,
    pub entropy: Option<Var>,
    pub suppress: Option<Var>,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub target: f64,
    pub source: f64,
    pub ci: f64,
    pub entropy: f64,
    pub suppress: f64,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        LossValues {
            total: g.value(self.total).item(),
            target: get(self.target),
            source: get(self.source),
            ci: get(self.ci),
            entropy: get(self.entropy),
            suppress: get(self.suppress),
        }
    }
}

/// `L_target + λ·L_source (+ γ·L_CI) (+ α·L_Entropy + β·L_Suppress)`.
///
/// Under the isolated-latent constraint the target latent is detached before
/// the association product. The cross-prediction heads must be bound as
/// constants by the caller. The source batch may be omitted when neither the
/// source nor the independence term is needed.
pub fn total_loss(
    g: &mut Graph,
    model: &ModelParams,
    bound: &Bound,
    source: Option<&SourceBatch>,
    target: Option<&TargetBatch>,
    config: &LossConfig,
) -> Result<LossVars> {
    let constraint = model.config.constraint;
    let mut terms = Vec::new();
    let mut out = LossVars {
        total: g.constant(&Tensor::scalar(0.0)),
        target: None,
        source: None,
        ci: None,
        entropy: None,
        suppress: None,
    };

    if let Some(t) = target {
        if t.inputs.rows() == 0 || t.attributes.len() != t.inputs.rows() {
            return Err(LabError::Contract("target batch is empty or mislabeled".into()));
        }
        let x = g.constant(&t.inputs);
        let mut z = model.encode_graph(g, bound, x)?;
        if constraint == Constraint::Il {
            z = g.stop_grad(z);
        }
        let assoc = model.association_graph(g, bound)?;
        let (za, zo) = model.mix_graph(g, z, assoc)?;
        let (la, lo) = model.target_logits_graph(g, bound, za, zo)?;
        let lt = loss_target(g, la, lo, &t.attributes, &t.objects)?;
        out.target = Some(lt);
        terms.push(lt);
    }

    if let Some(s) = source {
        if s.inputs.rows() == 0 {
            return Err(LabError::Contract("source batch is empty".into()));
        }
        let x = g.constant(&s.inputs);
        let z = model.encode_graph(g, bound, x)?;
        let logits = model.source_logits_graph(g, bound, z)?;
        let ls = loss_source(g, &logits, &s.labels)?;
        out.source = Some(ls);
        terms.push(g.scale(ls, config.lambda));
        if constraint == Constraint::Ci && !model.ci_heads.is_empty() {
            let lci = loss_ci(g, model, bound, z)?;
            out.ci = Some(lci);
            terms.push(g.scale(lci, config.gamma));
        }
    }

    if terms.is_empty() {
        return Err(LabError::Contract("total loss needs a source or a target batch".into()));
    }

    if config.association_reg && model.assoc_logits.is_some() {
        let assoc = model.association_graph(g, bound)?;
        let le = loss_entropy(g, assoc);
        let lsup = loss_suppress(g, assoc, config.tau)?;
        out.entropy = Some(le);
        out.suppress = Some(lsup);
        terms.push(g.scale(le, config.alpha));
        terms.push(g.scale(lsup, config.beta));
    }

    out.total = g.add_all(&terms)?;
    Ok(out)
}
