//! Run configuration: `key = value` lines under `[section]` headers (a TOML
//! subset), with every key overridable from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::features::lda::LdaParams;
use crate::learners::{ForestParams, GbdtParams, LearnerSpec, MlpParams};
use crate::matcher::DEFAULT_K_MAX;
use crate::rng::derive_seed;
use crate::synthgen::WorldConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Clf,
    Rank1,
    Rank2,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Clf => "clf",
            Mode::Rank1 => "rank1",
            Mode::Rank2 => "rank2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLearner {
    Gbdt,
    Forest,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Events, gold matches and test users.
    pub data_dir: PathBuf,
    /// Intermediate artifacts, models, predictions and reports.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    /// Terms held by more than this fraction of users are not indexed.
    pub max_df_fraction: f64,
    pub negatives_per_side: usize,
    /// Negatives kept per training user in the ranking set; 0 keeps all.
    pub rank_negatives_per_user: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            max_df_fraction: 0.01,
            negatives_per_side: 3,
            rank_negatives_per_user: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Adds the dense embedding similarity; needs `embedding_path`.
    pub embedding: bool,
    pub embedding_path: PathBuf,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            embedding: false,
            embedding_path: PathBuf::from("embeddings.tsv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub bases: Vec<BaseLearner>,
    pub folds: usize,
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            bases: vec![BaseLearner::Gbdt, BaseLearner::Forest, BaseLearner::Mlp],
            folds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub mode: Mode,
    /// Pairs to submit; 0 estimates it from the training graph density.
    pub top_n: usize,
    /// Degree cap of the greedy selection.
    pub k_max: usize,
    /// Points of the N sweep between `sweep_min` and `sweep_max` times N.
    pub sweep_steps: usize,
    pub sweep_min: f64,
    pub sweep_max: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rank2,
            top_n: 0,
            k_max: DEFAULT_K_MAX,
            sweep_steps: 20,
            sweep_min: 0.25,
            sweep_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Every stochastic stage derives its stream from this seed.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub paths: Paths,
    pub world: WorldConfig,
    pub candidates: CandidateConfig,
    pub features: FeatureConfig,
    pub lda: LdaParams,
    pub stack: StackConfig,
    pub gbdt: GbdtParams,
    pub forest: ForestParams,
    pub mlp: MlpParams,
    /// Layer-2 learner of the stack.
    pub meta: GbdtParams,
    pub rank: GbdtParams,
    pub predict: PredictConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: 0,
            paths: Paths::default(),
            world: WorldConfig::default(),
            candidates: CandidateConfig::default(),
            features: FeatureConfig::default(),
            lda: LdaParams::default(),
            stack: StackConfig::default(),
            gbdt: GbdtParams::default(),
            forest: ForestParams::default(),
            mlp: MlpParams::default(),
            meta: GbdtParams {
                rounds: 50,
                max_depth: 3,
                min_leaf: 20,
                ..GbdtParams::default()
            },
            rank: GbdtParams {
                rounds: 150,
                max_depth: 5,
                min_leaf: 10,
                ..GbdtParams::default()
            },
            predict: PredictConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::ConfigInvalid(msg.into())
}

/// Parses a command-line value as a TOML literal, falling back to a bare
/// string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Table, top: Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<Table>().map_err(|e| invalid(e.to_string()))?)
    }

    /// Layers `table` over the defaults section by section, so a partial
    /// section keeps the run-level defaults of its other keys.
    fn from_table(table: Table) -> Result<Self> {
        let mut merged = Self::default().to_table();
        merge(&mut merged, table);
        let cfg: Self = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.seeded())
    }

    /// Loads `path` (defaults when `None`) and applies `key value` overrides.
    /// Keys are `section.key`, or a bare key when it is top-level or unique
    /// across sections.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                if !p.exists() {
                    return Err(invalid(format!("config file {} does not exist", p.display())));
                }
                std::fs::read_to_string(p)?
                    .parse::<Table>()
                    .map_err(|e| invalid(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let defaults = Self::default().to_table();
        for (key, raw) in overrides {
            let (section, name) = Self::resolve_key(&defaults, key)?;
            let value = parse_value(raw);
            match section {
                None => {
                    table.insert(name, value);
                }
                Some(s) => {
                    let entry = table.entry(s.clone()).or_insert_with(|| Value::Table(Table::new()));
                    let Value::Table(t) = entry else {
                        return Err(invalid(format!("`{s}` is not a section")));
                    };
                    t.insert(name, value);
                }
            }
        }
        Self::from_table(table)
    }

    fn resolve_key(defaults: &Table, key: &str) -> Result<(Option<String>, String)> {
        if let Some((section, name)) = key.split_once('.') {
            match defaults.get(section) {
                Some(Value::Table(t)) if t.contains_key(name) || Self::optional_key(section, name) => {
                    return Ok((Some(section.to_string()), name.to_string()));
                }
                _ => return Err(invalid(format!("unknown key `{key}`"))),
            }
        }
        if defaults.get(key).is_some_and(|v| !v.is_table()) {
            return Ok((None, key.to_string()));
        }
        let owners: Vec<&String> = defaults
            .iter()
            .filter(|(_, v)| v.as_table().is_some_and(|t| t.contains_key(key)))
            .map(|(s, _)| s)
            .collect();
        match owners.as_slice() {
            [one] => Ok((Some((*one).clone()), key.to_string())),
            [] => Err(invalid(format!("unknown key `{key}`"))),
            many => Err(invalid(format!(
                "key `{key}` is ambiguous; qualify it with one of {}",
                many.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            ))),
        }
    }

    /// Keys whose default is absent from the serialized form.
    fn optional_key(section: &str, name: &str) -> bool {
        section == "lda" && name == "alpha"
    }

    pub fn to_table(&self) -> Table {
        Value::try_from(self)
            .ok()
            .and_then(|v| v.as_table().cloned())
            .expect("config serializes to a table")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if !(self.candidates.max_df_fraction > 0.0 && self.candidates.max_df_fraction <= 1.0) {
            return Err(invalid("candidates.max_df_fraction must lie in (0, 1]"));
        }
        if self.candidates.negatives_per_side == 0 {
            return Err(invalid("candidates.negatives_per_side must be positive"));
        }
        if self.stack.bases.len() < 2 {
            return Err(invalid("stack.bases needs at least two learners"));
        }
        if self.stack.folds < 2 {
            return Err(invalid("stack.folds must be at least 2"));
        }
        if self.predict.k_max == 0 {
            return Err(invalid("predict.k_max must be positive"));
        }
        if !(self.predict.sweep_min > 0.0 && self.predict.sweep_max >= self.predict.sweep_min) {
            return Err(invalid("predict.sweep_min must be positive and not exceed sweep_max"));
        }
        if self.lda.topics < 2 {
            return Err(invalid("lda.topics must be at least 2"));
        }
        Ok(())
    }

    /// Pushes the top-level seed into every seeded block.
    fn seeded(mut self) -> Self {
        self.world.seed = self.seed;
        self.lda.seed = derive_seed(self.seed, "lda");
        self.gbdt.seed = derive_seed(self.seed, "gbdt");
        self.forest.seed = derive_seed(self.seed, "forest");
        self.mlp.seed = derive_seed(self.seed, "mlp");
        self.meta.seed = derive_seed(self.seed, "meta");
        self.rank.seed = derive_seed(self.seed, "rank");
        self
    }

    /// Same configuration under another seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.seeded()
    }

    pub fn base_specs(&self) -> Vec<LearnerSpec> {
        self.stack
            .bases
            .iter()
            .map(|b| match b {
                BaseLearner::Gbdt => LearnerSpec::Gbdt(self.gbdt.clone()),
                BaseLearner::Forest => LearnerSpec::Forest(self.forest.clone()),
                BaseLearner::Mlp => LearnerSpec::Mlp(self.mlp.clone()),
            })
            .collect()
    }

    pub fn meta_spec(&self) -> LearnerSpec {
        LearnerSpec::Gbdt(self.meta.clone())
    }

    /// Every key with its default, one `section.key = value` per line.
    pub fn key_listing() -> String {
        let mut out = String::new();
        for (k, v) in Self::default().to_table() {
            match v {
                Value::Table(t) => {
                    for (name, value) in t {
                        out.push_str(&format!("  {k}.{name} = {value}\n"));
                    }
                    if k == "lda" {
                        out.push_str("  lda.alpha = 50 / topics when unset\n");
                    }
                }
                other => out.push_str(&format!("  {k} = {other}\n")),
            }
        }
        out
    }
}
