//! Finite-difference audit of the full training objective for every
//! architecture cell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{
    AssociationMatrix, AssociationMode, Bound, Constraint, ModelConfig, ModelParams, ParamGroup, Representation,
};
use crate::objectives::{loss_ci_adversary, total_loss, LossConfig, SourceBatch, TargetBatch};
use crate::tensorops::gradcheck::{finite_difference, relative_error};
use crate::tensorops::{Graph, Tensor};

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

const STEP: f64 = 1e-6;
const BATCH: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub representation: Representation,
    pub constraint: Constraint,
    pub association: AssociationMode,
    /// Scalars compared against finite differences.
    pub checked: usize,
    /// Worst per-tensor relative error over the main and adversary objectives.
    pub max_relative_error: f64,
    pub worst_tensor: String,
    /// Detached paths produced exactly zero encoder gradients.
    pub stop_grad_exact: bool,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE && self.stop_grad_exact
    }

    pub fn name(&self) -> String {
        let word = |s: &str| s.to_string();
        format!(
            "{}/{}/{}",
            word(match self.representation {
                Representation::Factor => "factor",
                Representation::Global => "global",
            }),
            word(match self.constraint {
                Constraint::None => "none",
                Constraint::Il => "il",
                Constraint::Ci => "ci",
            }),
            word(match self.association {
                AssociationMode::Manual => "manual",
                AssociationMode::Learned => "learned",
            })
        )
    }
}

/// Every representation × constraint × association combination.
pub fn architecture_cells() -> Vec<(Representation, Constraint, AssociationMode)> {
    let mut out = Vec::new();
    for rep in [Representation::Global, Representation::Factor] {
        for cons in [Constraint::None, Constraint::Il, Constraint::Ci] {
            for assoc in [AssociationMode::Manual, AssociationMode::Learned] {
                out.push((rep, cons, assoc));
            }
        }
    }
    out
}

fn tiny_config(representation: Representation, constraint: Constraint, association: AssociationMode) -> ModelConfig {
    ModelConfig {
        representation,
        constraint,
        association,
        input_dim: 6,
        factor_width: 3,
        encoder_hidden: vec![5, 4],
        head_hidden: 4,
        source_classes: vec![3, 2, 2],
        attribute_classes: 3,
        object_classes: 2,
        attribute_factor: 1,
        object_factor: 0,
    }
}

fn batches(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<(SourceBatch, TargetBatch)> {
    let mut inputs =
        || Tensor::matrix(BATCH, cfg.input_dim, (0..BATCH * cfg.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let (src_x, tgt_x) = (inputs()?, inputs()?);
    let source = SourceBatch {
        inputs: src_x,
        labels: cfg.source_classes.iter().map(|&n| (0..BATCH).map(|_| rng.gen_range(0..n)).collect()).collect(),
    };
    let target = TargetBatch {
        inputs: tgt_x,
        attributes: (0..BATCH).map(|_| rng.gen_range(0..cfg.attribute_classes)).collect(),
        objects: (0..BATCH).map(|_| rng.gen_range(0..cfg.object_classes)).collect(),
    };
    Ok((source, target))
}

fn with_values(model: &ModelParams, indices: &[usize], values: &[Tensor]) -> ModelParams {
    let mut m = model.clone();
    for (&i, v) in indices.iter().zip(values) {
        m.tensors[i] = v.clone();
    }
    m
}

fn not_ci(group: ParamGroup) -> bool {
    group != ParamGroup::CiHeads
}

fn only_ci(group: ParamGroup) -> bool {
    group == ParamGroup::CiHeads
}

fn forward(
    model: &ModelParams,
    src: Option<&SourceBatch>,
    tgt: Option<&TargetBatch>,
    loss: &LossConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, |_| false);
    let vars = total_loss(&mut g, model, &b, src, tgt, loss)?;
    Ok(g.value(vars.total).item())
}

/// Suppression weights of an association: `max − τ` on the non-max entries of
/// rows whose max (lowest index on ties) exceeds `τ`.
fn suppress_weights(assoc: &AssociationMatrix, tau: f64) -> Vec<[f64; 2]> {
    (0..assoc.rows())
        .map(|r| {
            let (a, o) = (assoc.get(r, 0), assoc.get(r, 1));
            let (max, jmax) = if o > a { (o, 1) } else { (a, 0) };
            let mut w = [0.0; 2];
            if max > tau {
                w[1 - jmax] = max - tau;
            }
            w
        })
        .collect()
}

/// Objective value whose true derivative the reverse pass computes: the
/// target branch under the isolated latent sees the unperturbed encoder, and
/// the suppression weights stay at their unperturbed values.
fn reference_loss(
    model: &ModelParams,
    original: &ModelParams,
    src: &SourceBatch,
    tgt: &TargetBatch,
    loss: &LossConfig,
) -> Result<f64> {
    let plain = LossConfig { association_reg: false, ..loss.clone() };
    let mut value = if model.config.constraint == Constraint::Il {
        let mut frozen = model.clone();
        for i in model.group_indices(ParamGroup::Encoder) {
            frozen.tensors[i] = original.tensors[i].clone();
        }
        forward(model, Some(src), None, &plain)? + forward(&frozen, None, Some(tgt), &plain)?
    } else {
        forward(model, Some(src), Some(tgt), &plain)?
    };
    if loss.association_reg && model.assoc_logits.is_some() {
        let assoc = model.association();
        let weights = suppress_weights(&original.association(), loss.tau);
        let entropy = assoc.column_entropy(0) + assoc.column_entropy(1);
        let suppress: f64 =
            weights.iter().enumerate().map(|(r, w)| assoc.get(r, 0) * w[0] + assoc.get(r, 1) * w[1]).sum();
        value += loss.alpha * entropy + loss.beta * suppress;
    }
    Ok(value)
}

/// Compare analytic and central-difference gradients of the training objective
/// (and of the adversary objective under CI) for one architecture cell.
pub fn gradcheck_cell(
    representation: Representation,
    constraint: Constraint,
    association: AssociationMode,
    seed: u64,
) -> Result<GradCheckCase> {
    let cfg = tiny_config(representation, constraint, association);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::init(&cfg, seed)?;
    for t in &mut model.tensors {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let (src, tgt) = batches(&cfg, &mut rng)?;
    let loss = LossConfig { association_reg: association == AssociationMode::Learned, ..LossConfig::default() };

    let mut worst = (0.0_f64, String::new());
    let mut checked = 0;
    let mut compare = |names: &[&String], analytic: &[Tensor], numeric: &[Tensor]| {
        for ((name, a), n) in names.iter().zip(analytic).zip(numeric) {
            checked += a.len();
            let err = relative_error(a, n);
            if err > worst.0 || worst.1.is_empty() {
                worst = (err.max(worst.0), (*name).clone());
            }
        }
    };

    let main_idx: Vec<usize> = (0..model.tensors.len()).filter(|&i| not_ci(model.groups[i])).collect();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, not_ci);
    let vars = total_loss(&mut g, &model, &bound, Some(&src), Some(&tgt), &loss)?;
    let grads = g.backward(vars.total)?;
    let analytic: Vec<Tensor> = main_idx.iter().map(|&i| grads.wrt(bound.vars[i])).collect();
    let start: Vec<Tensor> = main_idx.iter().map(|&i| model.tensors[i].clone()).collect();
    let numeric = finite_difference(&start, STEP, |vals| {
        let m = with_values(&model, &main_idx, vals);
        reference_loss(&m, &model, &src, &tgt, &loss).expect("loss evaluates")
    });
    let names: Vec<&String> = main_idx.iter().map(|&i| &model.names[i]).collect();
    compare(&names, &analytic, &numeric);

    let encoder = model.group_indices(ParamGroup::Encoder);
    let mut stop_grad_exact = true;
    if constraint == Constraint::Il {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, not_ci);
        let vars = total_loss(&mut g, &model, &bound, None, Some(&tgt), &loss)?;
        let grads = g.backward(vars.total)?;
        stop_grad_exact &= encoder.iter().all(|&i| grads.wrt(bound.vars[i]).data().iter().all(|&v| v == 0.0));
    }

    if constraint == Constraint::Ci && !model.ci_heads.is_empty() {
        let ci_idx = model.group_indices(ParamGroup::CiHeads);
        let adversary = |m: &ModelParams,
                         g: &mut Graph,
                         trainable: fn(ParamGroup) -> bool|
         -> Result<(Bound, crate::tensorops::Var)> {
            let b = m.bind(g, trainable);
            let x = g.constant(&src.inputs);
            let z = m.encode_graph(g, &b, x)?;
            let l = loss_ci_adversary(g, m, &b, z, &src.labels)?;
            Ok((b, l))
        };
        let mut g = Graph::new();
        let (bound, l) = adversary(&model, &mut g, only_ci)?;
        let grads = g.backward(l)?;
        let analytic: Vec<Tensor> = ci_idx.iter().map(|&i| grads.wrt(bound.vars[i])).collect();
        let start: Vec<Tensor> = ci_idx.iter().map(|&i| model.tensors[i].clone()).collect();
        let numeric = finite_difference(&start, STEP, |vals| {
            let m = with_values(&model, &ci_idx, vals);
            let mut g = Graph::new();
            let (_, l) = adversary(&m, &mut g, |_| false).expect("adversary evaluates");
            g.value(l).item()
        });
        let names: Vec<&String> = ci_idx.iter().map(|&i| &model.names[i]).collect();
        compare(&names, &analytic, &numeric);

        let mut g = Graph::new();
        let (bound, l) = adversary(&model, &mut g, |_| true)?;
        let grads = g.backward(l)?;
        stop_grad_exact &= encoder.iter().all(|&i| grads.wrt(bound.vars[i]).data().iter().all(|&v| v == 0.0));
    }

    Ok(GradCheckCase {
        representation,
        constraint,
        association,
        checked,
        max_relative_error: worst.0,
        worst_tensor: worst.1,
        stop_grad_exact,
    })
}

/// [`gradcheck_cell`] over [`architecture_cells`].
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    architecture_cells().into_iter().map(|(r, c, a)| gradcheck_cell(r, c, a, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_cell_passes() {
        let cases = gradcheck_suite(3).unwrap();
        assert_eq!(cases.len(), 12);
        for c in &cases {
            assert!(c.passed(), "{} {:e} at {}", c.name(), c.max_relative_error, c.worst_tensor);
            assert!(c.checked > 0);
        }
    }

    #[test]
    fn broken_gradient_is_detected() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 2.1]);
        assert!(relative_error(&a, &b) > GRADCHECK_TOLERANCE);
    }
}
