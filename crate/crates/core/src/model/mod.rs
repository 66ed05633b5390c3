//! Factorized and global encoder/head architectures with a factor-to-label
//! association matrix.
//!
//! The encoder maps an image to `K` blocks of `factor_width` values (factor
//! mode) or a single block of `K · factor_width` values (global mode). Source
//! heads classify each factor; the two target heads read the attribute and
//! object representations obtained by mixing the blocks through the
//! association matrix.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::LabeledImage;
use crate::error::{LabError, Result};
use crate::tensorops::{Graph, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint, CheckpointHeader, ParamInfo};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Factor,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    None,
    /// Isolated latent: target-loss gradients never reach the encoder.
    Il,
    /// Cross-factor independence: adversarial cross-prediction heads.
    Ci,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationMode {
    Manual,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub representation: Representation,
    pub constraint: Constraint,
    pub association: AssociationMode,
    pub input_dim: usize,
    pub factor_width: usize,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: usize,
    /// Class count of every source factor, in catalog order.
    pub source_classes: Vec<usize>,
    pub attribute_classes: usize,
    pub object_classes: usize,
    /// Factor feeding the attribute head under manual association.
    pub attribute_factor: usize,
    /// Factor feeding the object head under manual association.
    pub object_factor: usize,
}

impl ModelConfig {
    pub fn factor_count(&self) -> usize {
        self.source_classes.len()
    }

    /// Number of representation blocks the heads see.
    pub fn blocks(&self) -> usize {
        match self.representation {
            Representation::Factor => self.factor_count(),
            Representation::Global => 1,
        }
    }

    /// Width of each block.
    pub fn block_width(&self) -> usize {
        match self.representation {
            Representation::Factor => self.factor_width,
            Representation::Global => self.factor_width * self.factor_count(),
        }
    }

    pub fn latent_width(&self) -> usize {
        self.factor_width * self.factor_count()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.factor_count();
        if k == 0 || self.source_classes.contains(&0) {
            return Err(LabError::Spec("model needs at least one factor with classes".into()));
        }
        if self.input_dim == 0 || self.factor_width == 0 || self.head_hidden == 0 {
            return Err(LabError::Spec("model widths must be positive".into()));
        }
        if self.attribute_factor >= k || self.object_factor >= k {
            return Err(LabError::Spec(format!(
                "manual association factors ({}, {}) out of range for {k} factors",
                self.attribute_factor, self.object_factor
            )));
        }
        if self.attribute_classes == 0 || self.object_classes == 0 {
            return Err(LabError::Spec("target heads need classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    SourceHeads,
    TargetHeads,
    CiHeads,
    Association,
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: usize,
    pub bias: usize,
}

/// Layers of a ReLU MLP as indices into the parameter list.
#[derive(Clone, Debug, Default)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct CiHead {
    /// Factor whose representation is read.
    pub from: usize,
    /// Factor whose label is predicted.
    pub to: usize,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
    pub groups: Vec<ParamGroup>,
    pub encoder: Mlp,
    pub source_heads: Vec<Mlp>,
    /// Attribute head, then object head.
    pub target_heads: [Mlp; 2],
    pub ci_heads: Vec<CiHead>,
    pub assoc_logits: Option<usize>,
}

struct Builder<'a> {
    tensors: Vec<Tensor>,
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, group: ParamGroup, shape: &[usize], fan_in: Option<usize>) -> usize {
        let n: usize = shape.iter().product();
        let data = match (fan_in, self.rng.as_deref_mut()) {
            (Some(fan_in), Some(rng)) => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            _ => vec![0.0; n],
        };
        self.tensors.push(Tensor::new(shape.to_vec(), data).expect("layout shape"));
        self.names.push(name);
        self.groups.push(group);
        self.tensors.len() - 1
    }

    fn mlp(&mut self, name: &str, group: ParamGroup, widths: &[usize]) -> Mlp {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense {
                weight: self.tensor(format!("{name}.{i}.weight"), group, &[w[1], w[0]], Some(w[0])),
                bias: self.tensor(format!("{name}.{i}.bias"), group, &[w[1]], None),
            })
            .collect();
        Mlp { layers }
    }
}

/// Which parameter groups receive gradients in a graph.
pub type Trainable = fn(ParamGroup) -> bool;

/// Graph handles for every parameter of a model.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl ModelParams {
    /// Seeded fan-in-scaled uniform initialization; biases and association logits start at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(config, Some(&mut rng))
    }

    /// Every parameter zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { tensors: Vec::new(), names: Vec::new(), groups: Vec::new(), rng };
        let mut widths = vec![config.input_dim];
        widths.extend(&config.encoder_hidden);
        widths.push(config.latent_width());
        let encoder = b.mlp("encoder", ParamGroup::Encoder, &widths);

        let bw = config.block_width();
        let source_heads = config
            .source_classes
            .iter()
            .enumerate()
            .map(|(k, &n)| b.mlp(&format!("source_head.{k}"), ParamGroup::SourceHeads, &[bw, config.head_hidden, n]))
            .collect();
        let target_heads = [
            b.mlp(
                "target_head.attribute",
                ParamGroup::TargetHeads,
                &[bw, config.head_hidden, config.attribute_classes],
            ),
            b.mlp("target_head.object", ParamGroup::TargetHeads, &[bw, config.head_hidden, config.object_classes]),
        ];
        let mut ci_heads = Vec::new();
        if config.constraint == Constraint::Ci && config.blocks() > 1 {
            for from in 0..config.factor_count() {
                for to in 0..config.factor_count() {
                    if from != to {
                        let mlp = b.mlp(
                            &format!("ci_head.{from}.{to}"),
                            ParamGroup::CiHeads,
                            &[bw, config.head_hidden, config.source_classes[to]],
                        );
                        ci_heads.push(CiHead { from, to, mlp });
                    }
                }
            }
        }
        let assoc_logits = (config.association == AssociationMode::Learned)
            .then(|| b.tensor("assoc_logits".into(), ParamGroup::Association, &[config.blocks(), 2], None));
        Ok(Self {
            config: config.clone(),
            tensors: b.tensors,
            names: b.names,
            groups: b.groups,
            encoder,
            source_heads,
            target_heads,
            ci_heads,
            assoc_logits,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn group_indices(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.tensors.len()).filter(|&i| self.groups[i] == group).collect()
    }

    /// Order-sensitive checksum of every parameter value.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tensors {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        u64::from_be_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }

    pub fn bind(&self, g: &mut Graph, trainable: Trainable) -> Bound {
        let vars = self
            .tensors
            .iter()
            .zip(&self.groups)
            .map(|(t, &grp)| if trainable(grp) { g.param(t) } else { g.constant(t) })
            .collect();
        Bound { vars }
    }

    fn run_mlp(&self, g: &mut Graph, bound: &Bound, mlp: &Mlp, mut x: Var) -> Result<Var> {
        let last = mlp.layers.len() - 1;
        for (i, layer) in mlp.layers.iter().enumerate() {
            x = g.affine(x, bound.vars[layer.weight], bound.vars[layer.bias])?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Latent rows `[batch, K · factor_width]`; block `k` of a row is `z_k`.
    pub fn encode_graph(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.config.input_dim {
            return Err(LabError::Dimension {
                op: "encode",
                left: g.value(x).shape().to_vec(),
                right: vec![self.config.input_dim],
            });
        }
        self.run_mlp(g, bound, &self.encoder, x)
    }

    /// Block `k` of the latent (the whole latent in global mode).
    pub fn block(&self, g: &mut Graph, z: Var, k: usize) -> Result<Var> {
        let bw = self.config.block_width();
        g.slice_cols(z, k * bw, bw)
    }

    /// Logits of source head `k` for every factor. Factor mode feeds head `k`
    /// only block `k`; global mode feeds every head the full latent.
    pub fn source_logits_graph(&self, g: &mut Graph, bound: &Bound, z: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.source_heads.len());
        for (k, head) in self.source_heads.iter().enumerate() {
            let input = match self.config.representation {
                Representation::Factor => self.block(g, z, k)?,
                Representation::Global => z,
            };
            out.push(self.run_mlp(g, bound, head, input)?);
        }
        Ok(out)
    }

    /// The `blocks × 2` association matrix in the graph: a binary constant
    /// under manual association, the column softmax of the logits otherwise.
    pub fn association_graph(&self, g: &mut Graph, bound: &Bound) -> Result<Var> {
        match self.assoc_logits {
            Some(i) => {
                let t = g.transpose(bound.vars[i])?;
                let s = g.softmax(t);
                g.transpose(s)
            }
            None => Ok(g.constant(&self.manual_association().values)),
        }
    }

    /// `(z_a, z_o)` from the latent and association matrix.
    pub fn mix_graph(&self, g: &mut Graph, z: Var, assoc: Var) -> Result<(Var, Var)> {
        let bw = self.config.block_width();
        let mixed = g.factor_mix(z, assoc, bw)?;
        Ok((g.slice_cols(mixed, 0, bw)?, g.slice_cols(mixed, bw, bw)?))
    }

    /// Attribute and object logits.
    pub fn target_logits_graph(&self, g: &mut Graph, bound: &Bound, za: Var, zo: Var) -> Result<(Var, Var)> {
        let a = self.run_mlp(g, bound, &self.target_heads[0], za)?;
        let o = self.run_mlp(g, bound, &self.target_heads[1], zo)?;
        Ok((a, o))
    }

    /// Cross-prediction logits `H'_{from,to}(z_from)` for every ordered factor pair.
    pub fn ci_logits_graph(&self, g: &mut Graph, bound: &Bound, z: Var) -> Result<Vec<(usize, usize, Var)>> {
        let mut out = Vec::with_capacity(self.ci_heads.len());
        for head in &self.ci_heads {
            let block = self.block(g, z, head.from)?;
            out.push((head.from, head.to, self.run_mlp(g, bound, &head.mlp, block)?));
        }
        Ok(out)
    }

    /// Binary association with one `1` per column at the configured factors.
    pub fn manual_association(&self) -> AssociationMatrix {
        let blocks = self.config.blocks();
        let mut values = vec![0.0; blocks * 2];
        match self.config.representation {
            Representation::Factor => {
                values[self.config.attribute_factor * 2] = 1.0;
                values[self.config.object_factor * 2 + 1] = 1.0;
            }
            Representation::Global => {
                values[0] = 1.0;
                values[1] = 1.0;
            }
        }
        AssociationMatrix {
            values: Tensor::matrix(blocks, 2, values).expect("association shape"),
            kind: AssociationKind::Binary,
        }
    }

    /// The association currently in effect.
    pub fn association(&self) -> AssociationMatrix {
        match self.assoc_logits {
            Some(i) => soft_association(&self.tensors[i]),
            None => self.manual_association(),
        }
    }

    /// `Z` for one image as a `factor_width × K` matrix (`K·factor_width × 1` in global mode).
    pub fn encode(&self, pixels: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let x = g.constant(&Tensor::new(vec![pixels.len()], pixels.to_vec())?);
        let z = self.encode_graph(&mut g, &bound, x)?;
        let (bw, blocks) = (self.config.block_width(), self.config.blocks());
        let row = g.value(z).data();
        let mut out = vec![0.0; bw * blocks];
        for k in 0..blocks {
            for d in 0..bw {
                out[d * blocks + k] = row[k * bw + d];
            }
        }
        Tensor::matrix(bw, blocks, out)
    }

    /// Source logits for a `D × K` latent from [`ModelParams::encode`].
    pub fn predict_source(&self, z: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let zv = g.constant(&latent_row(z)?);
        let logits = self.source_logits_graph(&mut g, &bound, zv)?;
        Ok(logits.into_iter().map(|v| g.value(v).data().to_vec()).collect())
    }

    /// Attribute and object logits from explicit `(z_a, z_o)`.
    pub fn predict_target(&self, za: &Tensor, zo: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let (a, o) = (g.constant(za), g.constant(zo));
        let (la, lo) = self.target_logits_graph(&mut g, &bound, a, o)?;
        Ok((g.value(la).data().to_vec(), g.value(lo).data().to_vec()))
    }
}

/// `D × K` matrix to the row layout the graph uses (block `k` = column `k`).
fn latent_row(z: &Tensor) -> Result<Tensor> {
    if z.shape().len() != 2 {
        return Err(LabError::Dimension { op: "latent", left: z.shape().to_vec(), right: vec![2] });
    }
    let (d, k) = (z.shape()[0], z.shape()[1]);
    let mut out = vec![0.0; d * k];
    for j in 0..k {
        for i in 0..d {
            out[j * d + i] = z.data()[i * k + j];
        }
    }
    Tensor::new(vec![d * k], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociationKind {
    Binary,
    Soft,
}

/// `K × 2` map from factor representations to the attribute (column 0) and object (column 1) representations.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMatrix {
    pub values: Tensor,
    pub kind: AssociationKind,
}

impl AssociationMatrix {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values.data()[row * 2 + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows()).map(|r| self.get(r, col)).collect()
    }

    /// Shannon entropy (nats) of one column.
    pub fn column_entropy(&self, col: usize) -> f64 {
        self.column(col).iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }

    /// Row with the largest weight in a column (lowest index on ties).
    pub fn argmax_column(&self, col: usize) -> usize {
        crate::tensorops::argmax(&self.column(col))
    }
}

/// Column-wise softmax of `K × 2` logits.
pub fn soft_association(logits: &Tensor) -> AssociationMatrix {
    let (k, m) = (logits.shape()[0], logits.shape()[1]);
    let mut values = vec![0.0; k * m];
    for c in 0..m {
        let col: Vec<f64> = (0..k).map(|r| logits.data()[r * m + c]).collect();
        for (r, p) in crate::tensorops::softmax_slice(&col).into_iter().enumerate() {
            values[r * m + c] = p;
        }
    }
    AssociationMatrix { values: Tensor::matrix(k, m, values).expect("same shape"), kind: AssociationKind::Soft }
}

/// `[z_a z_o] = Z · A` for a `D × K` latent.
pub fn apply_association(z: &Tensor, assoc: &AssociationMatrix) -> Result<(Tensor, Tensor)> {
    if z.shape().len() != 2 || z.shape()[1] != assoc.rows() {
        return Err(LabError::Dimension {
            op: "apply_association",
            left: z.shape().to_vec(),
            right: assoc.values.shape().to_vec(),
        });
    }
    let (d, k) = (z.shape()[0], z.shape()[1]);
    let mut za = vec![0.0; d];
    let mut zo = vec![0.0; d];
    for i in 0..d {
        for j in 0..k {
            za[i] += z.data()[i * k + j] * assoc.get(j, 0);
            zo[i] += z.data()[i * k + j] * assoc.get(j, 1);
        }
    }
    Ok((Tensor::vector(za), Tensor::vector(zo)))
}

/// Pixels in `[0, 1]` shifted to `[-0.5, 0.5]`, one row per sample.
pub fn input_batch<'a>(samples: impl IntoIterator<Item = &'a LabeledImage>) -> Tensor {
    let mut data = Vec::new();
    let mut rows = 0;
    for s in samples {
        data.extend(s.pixels.iter().map(|&p| p as f64 - 0.5));
        rows += 1;
    }
    let cols = data.len() / rows.max(1);
    Tensor::new(vec![rows, cols], data).expect("non-empty batch")
}
