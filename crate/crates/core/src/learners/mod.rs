//! Supervised learners used as stacking bases and as the ranking scorer.

pub mod forest;
pub mod gbdt;
pub mod mlp;
pub mod tree;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::types::PairSample;

pub use forest::{train_forest, ForestModel, ForestParams, MaxFeatures, VoteRule};
pub use gbdt::{pairwise_cost, train_gbdt, train_gbdt_rank, GbdtModel, GbdtParams, LeafStep, Objective};
pub use mlp::{train_mlp, MlpModel, MlpParams, Standardizer};

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid pulled strictly inside (0, 1).
pub(crate) fn probability(z: f64) -> f64 {
    sigmoid(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// ln(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dense row-major design matrix with one real target per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    dim: usize,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, dim: usize, y: Vec<f64>) -> Result<Self> {
        if x.len() != dim * y.len() {
            return Err(Error::DimensionMismatch {
                expected: dim * y.len(),
                got: x.len(),
            });
        }
        Ok(Self { x, dim, y })
    }

    /// Labeled samples with features; unlabeled rows get target 0.
    pub fn from_samples(samples: &[PairSample]) -> Result<Self> {
        let dim = samples.first().and_then(|s| s.features.as_ref()).map_or(0, Vec::len);
        let mut x = Vec::with_capacity(dim * samples.len());
        let mut y = Vec::with_capacity(samples.len());
        for s in samples {
            let f = s.features.as_ref().ok_or(Error::EmptyInput)?;
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: f.len(),
                });
            }
            x.extend_from_slice(f);
            y.push(f64::from(s.label.unwrap_or(0)));
        }
        Self::new(x, dim, y)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn value(&self, i: usize, feature: usize) -> f64 {
        self.x[i * self.dim + feature]
    }

    pub fn targets(&self) -> &[f64] {
        &self.y
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.x.chunks_exact(self.dim.max(1)).take(self.y.len())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut x = Vec::with_capacity(indices.len() * self.dim);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Self { x, dim: self.dim, y }
    }

    pub(crate) fn check_binary(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyInput);
        }
        if self.len() < 2 {
            return Err(Error::TooFew {
                needed: 2,
                got: self.len(),
            });
        }
        let positives = self.y.iter().filter(|&&v| v > 0.5).count();
        if positives == 0 || positives == self.len() {
            return Err(Error::SingleClass);
        }
        Ok(())
    }
}

/// Anything that maps a feature vector to a real score.
pub trait Scorer {
    fn dimension(&self) -> usize;

    fn score_unchecked(&self, features: &[f64]) -> f64;

    fn score(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.dimension() {
            return Err(Error::DimensionMismatch {
                expected: self.dimension(),
                got: features.len(),
            });
        }
        Ok(self.score_unchecked(features))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Gbdt(GbdtModel),
    Forest(ForestModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Gbdt(_) => "gbdt",
            Model::Forest(_) => "forest",
            Model::Mlp(_) => "mlp",
        }
    }
}

impl Scorer for Model {
    fn dimension(&self) -> usize {
        match self {
            Model::Gbdt(m) => m.dimension(),
            Model::Forest(m) => m.dimension(),
            Model::Mlp(m) => m.dimension(),
        }
    }

    fn score_unchecked(&self, features: &[f64]) -> f64 {
        match self {
            Model::Gbdt(m) => m.score_unchecked(features),
            Model::Forest(m) => m.score_unchecked(features),
            Model::Mlp(m) => m.score_unchecked(features),
        }
    }
}

/// A learner and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerSpec {
    Gbdt(GbdtParams),
    Forest(ForestParams),
    Mlp(MlpParams),
}

impl LearnerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Gbdt(_) => "gbdt",
            LearnerSpec::Forest(_) => "forest",
            LearnerSpec::Mlp(_) => "mlp",
        }
    }

    pub fn fit(&self, data: &Dataset) -> Result<Model> {
        Ok(match self {
            LearnerSpec::Gbdt(p) => Model::Gbdt(train_gbdt(data, p)?),
            LearnerSpec::Forest(p) => Model::Forest(train_forest(data, p)?),
            LearnerSpec::Mlp(p) => Model::Mlp(train_mlp(data, p)?),
        })
    }

    /// Same learner with its seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut spec = self.clone();
        match &mut spec {
            LearnerSpec::Gbdt(p) => p.seed = seed,
            LearnerSpec::Forest(p) => p.seed = seed,
            LearnerSpec::Mlp(p) => p.seed = seed,
        }
        spec
    }
}

/// Seeded partition of `0..n` into `k` folds of near-equal size.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(seed, "kfold"));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, i) in order.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Out-of-fold scores: each row is scored by a model that never saw it.
pub fn kfold_oof(spec: &LearnerSpec, data: &Dataset, k: usize, seed: u64) -> Result<Vec<f64>> {
    let folds = kfold_indices(data.len(), k, seed)?;
    let mut scores = vec![f64::NAN; data.len()];
    let mut in_fold = vec![usize::MAX; data.len()];
    for (f, rows) in folds.iter().enumerate() {
        for &r in rows {
            in_fold[r] = f;
        }
    }
    for (f, rows) in folds.iter().enumerate() {
        let train: Vec<usize> = (0..data.len()).filter(|&i| in_fold[i] != f).collect();
        let model = spec.fit(&data.subset(&train))?;
        for &r in rows {
            scores[r] = model.score_unchecked(data.row(r));
        }
    }
    Ok(scores)
}

pub const MODEL_FORMAT: &str = "xdevice-model";
pub const MODEL_VERSION: u32 = 1;

/// Envelope written around every serialized model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile<T> {
    pub format: String,
    pub version: u32,
    pub dimension: usize,
    pub registry_version: String,
    pub model: T,
}

impl<T: Serialize + for<'de> Deserialize<'de>> ModelFile<T> {
    pub fn new(model: T, dimension: usize, registry_version: &str) -> Self {
        Self {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            dimension,
            registry_version: registry_version.to_string(),
            model,
        }
    }

    pub fn write<W: std::io::Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, self)?;
        Ok(())
    }

    pub fn read<R: std::io::Read>(source: R) -> Result<Self> {
        let file: Self = serde_json::from_reader(source)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!(
                "expected {MODEL_FORMAT} v{MODEL_VERSION}, found {} v{}",
                file.format, file.version
            )));
        }
        Ok(file)
    }
}
