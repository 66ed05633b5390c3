use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::catalog::{FactorCatalog, FactorKind};
use super::render::{render_sample, LabeledImage};
use crate::error::{LabError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMode {
    Uncorrelated,
    /// Each object class co-occurs with exactly one attribute class, bijectively.
    FullyCorrelated,
    /// Each object class co-occurs with exactly `m ≥ 2` attribute classes.
    SemiCorrelated(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nuisance {
    Uniform,
    Fixed(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelationSpec {
    pub mode: CorrelationMode,
    pub attribute_factor: usize,
    pub object_factor: usize,
    /// Base attribute class per object class; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairing: Option<Vec<usize>>,
    /// Policy per catalog factor (entries for the attribute/object factors are
    /// ignored); empty means every remaining factor is uniform.
    #[serde(default)]
    pub nuisance: Vec<Nuisance>,
}

impl CorrelationSpec {
    /// Attribute = color, object = shape, every nuisance uniform.
    pub fn color_shape(catalog: &FactorCatalog, mode: CorrelationMode) -> Result<Self> {
        let attribute_factor =
            catalog.index_of(FactorKind::Color).ok_or_else(|| LabError::Spec("catalog has no color factor".into()))?;
        let object_factor =
            catalog.index_of(FactorKind::Shape).ok_or_else(|| LabError::Spec("catalog has no shape factor".into()))?;
        Ok(Self { mode, attribute_factor, object_factor, pairing: None, nuisance: Vec::new() })
    }

    pub fn with_fixed(mut self, catalog: &FactorCatalog, kind: FactorKind, class: usize) -> Self {
        if let Some(i) = catalog.index_of(kind) {
            if self.nuisance.is_empty() {
                self.nuisance = vec![Nuisance::Uniform; catalog.len()];
            }
            self.nuisance[i] = Nuisance::Fixed(class);
        }
        self
    }

    fn nuisance_for(&self, factor: usize) -> Nuisance {
        self.nuisance.get(factor).copied().unwrap_or(Nuisance::Uniform)
    }

    pub fn validate(&self, catalog: &FactorCatalog) -> Result<()> {
        let k = catalog.len();
        if self.attribute_factor >= k || self.object_factor >= k || self.attribute_factor == self.object_factor {
            return Err(LabError::Spec(format!(
                "attribute factor {} / object factor {} invalid for {} factors",
                self.attribute_factor, self.object_factor, k
            )));
        }
        if !self.nuisance.is_empty() && self.nuisance.len() != k {
            return Err(LabError::Spec(format!(
                "nuisance policy lists {} factors, catalog has {}",
                self.nuisance.len(),
                k
            )));
        }
        for (i, n) in self.nuisance.iter().enumerate() {
            if let Nuisance::Fixed(c) = n {
                if *c >= catalog.factors[i].class_count {
                    return Err(LabError::Spec(format!("fixed class {c} out of range for factor {i}")));
                }
            }
        }
        self.allowed_pairs(catalog).map(|_| ())
    }

    /// `(attribute, object)` pairs permitted in training, sorted.
    pub fn allowed_pairs(&self, catalog: &FactorCatalog) -> Result<Vec<(usize, usize)>> {
        let n_attr = catalog.factors[self.attribute_factor].class_count;
        let n_obj = catalog.factors[self.object_factor].class_count;
        let pairing: Vec<usize> = match &self.pairing {
            Some(p) => {
                if p.len() != n_obj || p.iter().any(|&a| a >= n_attr) {
                    return Err(LabError::Spec(format!("pairing must map {n_obj} objects into {n_attr} attributes")));
                }
                p.clone()
            }
            None => (0..n_obj).map(|o| o % n_attr).collect(),
        };
        let mut pairs = BTreeSet::new();
        match self.mode {
            CorrelationMode::Uncorrelated => {
                for a in 0..n_attr {
                    for o in 0..n_obj {
                        pairs.insert((a, o));
                    }
                }
            }
            CorrelationMode::FullyCorrelated => {
                let distinct: BTreeSet<usize> = pairing.iter().copied().collect();
                if n_attr != n_obj || distinct.len() != n_obj {
                    return Err(LabError::Spec(format!(
                        "full correlation needs a bijection; {n_attr} attributes vs {n_obj} objects"
                    )));
                }
                for (o, &a) in pairing.iter().enumerate() {
                    pairs.insert((a, o));
                }
            }
            CorrelationMode::SemiCorrelated(m) => {
                if m < 2 || m > n_attr {
                    return Err(LabError::Spec(format!("semi-correlation with m = {m} needs 2 <= m <= {n_attr}")));
                }
                for (o, &a) in pairing.iter().enumerate() {
                    for j in 0..m {
                        pairs.insert(((a + j) % n_attr, o));
                    }
                }
            }
        }
        Ok(pairs.into_iter().collect())
    }
}

/// How many samples a split holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSize {
    /// `n` samples of every full factor tuple.
    PerCombination(usize),
    /// `n` samples of every `(attribute, object)` pair; nuisances drawn at random.
    PerPair(usize),
    /// `n` samples spread evenly over every full factor tuple (counts differ by at most one).
    Total(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: SplitSize,
    pub val: SplitSize,
    pub test: SplitSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub role: Role,
    pub catalog: FactorCatalog,
    pub correlation: CorrelationSpec,
    pub seen_pairs: Vec<(usize, usize)>,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn all_pairs(&self) -> Vec<(usize, usize)> {
        let n_attr = self.catalog.factors[self.correlation.attribute_factor].class_count;
        let n_obj = self.catalog.factors[self.correlation.object_factor].class_count;
        (0..n_attr).flat_map(|a| (0..n_obj).map(move |o| (a, o))).collect()
    }

    pub fn unseen_pairs(&self) -> Vec<(usize, usize)> {
        let seen: BTreeSet<_> = self.seen_pairs.iter().copied().collect();
        self.all_pairs().into_iter().filter(|p| !seen.contains(p)).collect()
    }

    pub fn attribute_count(&self) -> usize {
        self.catalog.factors[self.correlation.attribute_factor].class_count
    }

    pub fn object_count(&self) -> usize {
        self.catalog.factors[self.correlation.object_factor].class_count
    }

    /// `(attribute, object)` of a sample of this dataset.
    pub fn pair_of(&self, sample: &LabeledImage) -> (usize, usize) {
        match self.role {
            Role::Target => (sample.labels[0] as usize, sample.labels[1] as usize),
            Role::Source => (
                sample.labels[self.correlation.attribute_factor] as usize,
                sample.labels[self.correlation.object_factor] as usize,
            ),
        }
    }

    pub fn label_width(&self) -> usize {
        match self.role {
            Role::Source => self.catalog.len(),
            Role::Target => 2,
        }
    }

    pub fn samples(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    });
    rng
}

/// Every full factor tuple whose `(attribute, object)` lies in `pairs`, in lexicographic order.
fn enumerate_tuples(catalog: &FactorCatalog, corr: &CorrelationSpec, pairs: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let k = catalog.len();
    let choices: Vec<Vec<usize>> = (0..k)
        .map(|f| match corr.nuisance_for(f) {
            Nuisance::Fixed(c) if f != corr.attribute_factor && f != corr.object_factor => vec![c],
            _ => (0..catalog.factors[f].class_count).collect(),
        })
        .collect();
    let allowed: BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
    let mut out = Vec::new();
    let mut idx = vec![0usize; k];
    loop {
        let tuple: Vec<usize> = idx.iter().enumerate().map(|(f, &i)| choices[f][i]).collect();
        if allowed.contains(&(tuple[corr.attribute_factor], tuple[corr.object_factor])) {
            out.push(tuple);
        }
        let mut f = k;
        loop {
            if f == 0 {
                return out;
            }
            f -= 1;
            idx[f] += 1;
            if idx[f] < choices[f].len() {
                break;
            }
            idx[f] = 0;
        }
    }
}

fn split_tuples(
    catalog: &FactorCatalog,
    corr: &CorrelationSpec,
    pairs: &[(usize, usize)],
    size: SplitSize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    match size {
        SplitSize::PerCombination(n) => {
            enumerate_tuples(catalog, corr, pairs).into_iter().flat_map(|t| std::iter::repeat_n(t, n)).collect()
        }
        SplitSize::Total(n) => {
            let grid = enumerate_tuples(catalog, corr, pairs);
            if grid.is_empty() {
                return Vec::new();
            }
            let (base, extra) = (n / grid.len(), n % grid.len());
            let mut order: Vec<usize> = (0..grid.len()).collect();
            order.shuffle(rng);
            let mut bonus = vec![false; grid.len()];
            for &i in &order[..extra] {
                bonus[i] = true;
            }
            grid.into_iter().zip(bonus).flat_map(|(t, b)| std::iter::repeat_n(t, base + usize::from(b))).collect()
        }
        SplitSize::PerPair(n) => {
            let mut out = Vec::with_capacity(pairs.len() * n);
            for &(a, o) in pairs {
                for _ in 0..n {
                    let tuple = (0..catalog.len())
                        .map(|f| {
                            if f == corr.attribute_factor {
                                a
                            } else if f == corr.object_factor {
                                o
                            } else {
                                match corr.nuisance_for(f) {
                                    Nuisance::Fixed(c) => c,
                                    Nuisance::Uniform => rng.gen_range(0..catalog.factors[f].class_count),
                                }
                            }
                        })
                        .collect();
                    out.push(tuple);
                }
            }
            out
        }
    }
}

/// Build train/val/test splits. Train and val only contain the pairs permitted
/// by `correlation`; test covers the full attribute × object grid.
pub fn generate_dataset(
    role: Role,
    catalog: &FactorCatalog,
    correlation: &CorrelationSpec,
    sizes: &SplitSizes,
    seed: u64,
) -> Result<Dataset> {
    catalog.validate()?;
    correlation.validate(catalog)?;
    let seen_pairs = correlation.allowed_pairs(catalog)?;
    let n_attr = catalog.factors[correlation.attribute_factor].class_count;
    let n_obj = catalog.factors[correlation.object_factor].class_count;
    let all_pairs: Vec<(usize, usize)> = (0..n_attr).flat_map(|a| (0..n_obj).map(move |o| (a, o))).collect();

    let build = |split: Split, size: SplitSize, pairs: &[(usize, usize)]| -> Result<Vec<LabeledImage>> {
        let mut rng = split_rng(seed, split);
        let tuples = split_tuples(catalog, correlation, pairs, size, &mut rng);
        tuples
            .into_iter()
            .map(|t| {
                let mut img = render_sample(catalog, &t, rng.next_u64())?;
                if role == Role::Target {
                    img.labels = vec![t[correlation.attribute_factor] as u16, t[correlation.object_factor] as u16];
                }
                Ok(img)
            })
            .collect()
    };
    let train = build(Split::Train, sizes.train, &seen_pairs)?;
    let val = build(Split::Val, sizes.val, &seen_pairs)?;
    let test = build(Split::Test, sizes.test, &all_pairs)?;
    Ok(Dataset { role, catalog: catalog.clone(), correlation: correlation.clone(), seen_pairs, train, val, test })
}

/// Digest of an empty sample stream: the leading 8 bytes of SHA-256("").
pub const EMPTY_DIGEST: u64 = 0xe3b0_c442_98fc_1c14;

fn write_sample(out: &mut impl Write, s: &LabeledImage) -> std::io::Result<()> {
    for p in &s.pixels {
        out.write_all(&p.to_le_bytes())?;
    }
    for l in &s.labels {
        out.write_all(&l.to_le_bytes())?;
    }
    Ok(())
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

/// Order-sensitive checksum of a sample sequence: the leading 8 bytes
/// (big-endian) of SHA-256 over exactly the bytes `samples.bin` stores.
pub fn samples_digest<'a>(samples: impl IntoIterator<Item = &'a LabeledImage>) -> u64 {
    let mut w = HashWriter(Sha256::new());
    for s in samples {
        write_sample(&mut w, s).expect("hashing cannot fail");
    }
    let bytes = w.0.finalize();
    u64::from_be_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// Checksum over train, val and test samples in that order.
pub fn dataset_digest(dataset: &Dataset) -> u64 {
    samples_digest(dataset.samples())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub role: Role,
    pub catalog: FactorCatalog,
    pub correlation: CorrelationSpec,
    pub seen_pairs: Vec<(usize, usize)>,
    pub image_size: usize,
    pub label_width: usize,
    pub counts: SplitCounts,
    pub digest: String,
    pub split_digests: [String; 3],
}

pub const MANIFEST_FORMAT: &str = "shortcutlab-dataset-v1";

impl Manifest {
    pub fn of(dataset: &Dataset) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            role: dataset.role,
            catalog: dataset.catalog.clone(),
            correlation: dataset.correlation.clone(),
            seen_pairs: dataset.seen_pairs.clone(),
            image_size: dataset.catalog.image_size,
            label_width: dataset.label_width(),
            counts: SplitCounts { train: dataset.train.len(), val: dataset.val.len(), test: dataset.test.len() },
            digest: format!("{:016x}", dataset_digest(dataset)),
            split_digests: [
                format!("{:016x}", samples_digest(&dataset.train)),
                format!("{:016x}", samples_digest(&dataset.val)),
                format!("{:016x}", samples_digest(&dataset.test)),
            ],
        }
    }
}

/// Write `manifest.json` and `samples.bin` (per sample: `H·W·3` little-endian
/// f32 pixels, then `label_width` little-endian u16 labels).
pub fn export_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest::of(dataset);
    let mut out = BufWriter::new(fs::File::create(dir.join("samples.bin"))?);
    for s in dataset.samples() {
        write_sample(&mut out, s)?;
    }
    out.flush()?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(LabError::Data(format!("unknown dataset format {:?}", manifest.format)));
    }
    let bytes = fs::read(dir.join("samples.bin"))?;
    let n_pix = manifest.catalog.pixel_len();
    let record = n_pix * 4 + manifest.label_width * 2;
    let total = manifest.counts.train + manifest.counts.val + manifest.counts.test;
    if bytes.len() != record * total {
        return Err(LabError::Data(format!(
            "samples.bin holds {} bytes, manifest implies {}",
            bytes.len(),
            record * total
        )));
    }
    let samples: Vec<LabeledImage> = bytes
        .chunks_exact(record)
        .map(|rec| {
            let (pix, lab) = rec.split_at(n_pix * 4);
            LabeledImage {
                pixels: pix.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
                labels: lab.chunks_exact(2).map(|b| u16::from_le_bytes(b.try_into().unwrap())).collect(),
            }
        })
        .collect();
    let found = samples_digest(&samples);
    let expected = u64::from_str_radix(&manifest.digest, 16)
        .map_err(|e| LabError::Data(format!("bad digest in manifest: {e}")))?;
    if found != expected {
        return Err(LabError::Checksum { expected, found });
    }
    let mut it = samples.into_iter();
    let train = it.by_ref().take(manifest.counts.train).collect();
    let val = it.by_ref().take(manifest.counts.val).collect();
    let test = it.collect();
    Ok(Dataset {
        role: manifest.role,
        catalog: manifest.catalog,
        correlation: manifest.correlation,
        seen_pairs: manifest.seen_pairs,
        train,
        val,
        test,
    })
}

/// Binary PPM (P6) of one sample.
pub fn write_ppm(sample: &LabeledImage, size: usize, path: &Path) -> Result<()> {
    let mut bytes = format!("P6\n{size} {size}\n255\n").into_bytes();
    bytes.extend(sample.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes)?;
    Ok(())
}
