//! Random forest of probability trees.

use log::info;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, DecisionTree, SortedColumns, TreeParams};
use super::{Dataset, Scorer};
use crate::error::{Error, Result};
use crate::rng::{derive_seed_n, StageRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteRule {
    /// Mean of leaf positive fractions.
    Mean,
    /// Fraction of trees whose leaf leans positive.
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(self, dim: usize) -> Option<usize> {
        match self {
            MaxFeatures::All => None,
            MaxFeatures::Sqrt => Some(((dim as f64).sqrt().round() as usize).max(1)),
            MaxFeatures::Count(m) => Some(m.clamp(1, dim.max(1))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: u32,
    pub max_features: MaxFeatures,
    pub bootstrap: bool,
    pub vote: VoteRule,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 100,
            max_depth: 12,
            min_leaf: 2,
            max_features: MaxFeatures::Sqrt,
            bootstrap: true,
            vote: VoteRule::Mean,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub vote: VoteRule,
    pub dimension: usize,
}

impl ForestModel {
    pub fn from_trees(trees: Vec<DecisionTree>, vote: VoteRule, dimension: usize) -> Self {
        Self { trees, vote, dimension }
    }
}

impl Scorer for ForestModel {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn score_unchecked(&self, features: &[f64]) -> f64 {
        if self.trees.is_empty() {
            return 0.5;
        }
        let total: f64 = match self.vote {
            VoteRule::Mean => self.trees.iter().map(|t| t.predict(features)).sum(),
            VoteRule::Majority => self.trees.iter().filter(|t| t.predict(features) > 0.5).count() as f64,
        };
        total / self.trees.len() as f64
    }
}

pub fn train_forest(data: &Dataset, params: &ForestParams) -> Result<ForestModel> {
    data.check_binary()?;
    if params.trees == 0 {
        return Err(Error::ConfigInvalid("forest needs at least one tree".into()));
    }
    let cols = SortedColumns::new(data);
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        max_features: params.max_features.resolve(data.dim()),
    };
    let n = data.len();
    let trees: Vec<DecisionTree> = (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = StageRng::seed_from_u64(derive_seed_n(params.seed, "forest-tree", t as u64));
            let counts = if params.bootstrap {
                let mut c = vec![0u32; n];
                for _ in 0..n {
                    c[rng.random_range(0..n)] += 1;
                }
                c
            } else {
                vec![1; n]
            };
            fit_tree(data, &cols, data.targets(), &counts, &tree_params, Some(&mut rng)).tree
        })
        .collect();
    info!("forest: {} trees on {} rows", trees.len(), n);
    Ok(ForestModel {
        trees,
        vote: params.vote,
        dimension: data.dim(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = StageRng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = if i % 2 == 0 { 1.5 } else { -1.5 };
            x.push(c + rng.random_range(-1.0..1.0));
            x.push(c + rng.random_range(-1.0..1.0));
            y.push(f64::from(u8::from(i % 2 == 0)));
        }
        Dataset::new(x, 2, y).unwrap()
    }

    #[test]
    fn separates_blobs() {
        let model = train_forest(
            &blobs(200, 1),
            &ForestParams {
                trees: 20,
                ..Default::default()
            },
        )
        .unwrap();
        let test = blobs(200, 2);
        let correct = test
            .rows()
            .zip(test.targets())
            .filter(|(x, &y)| (model.score_unchecked(x) > 0.5) == (y > 0.5))
            .count();
        assert!(correct as f64 / 200.0 >= 0.95);
    }

    #[test]
    fn single_full_tree_is_a_tree() {
        let data = blobs(50, 3);
        let params = ForestParams {
            trees: 1,
            max_depth: 5,
            min_leaf: 1,
            max_features: MaxFeatures::All,
            bootstrap: false,
            ..Default::default()
        };
        let forest = train_forest(&data, &params).unwrap();
        let tree = DecisionTree::fit_regression(
            &data,
            data.targets(),
            &TreeParams {
                max_depth: 5,
                min_leaf: 1,
                max_features: None,
            },
        );
        for row in blobs(30, 4).rows() {
            assert_eq!(forest.score_unchecked(row), tree.predict(row));
        }
    }

    #[test]
    fn constant_tree_votes() {
        let m = ForestModel::from_trees(vec![DecisionTree::constant(0.37)], VoteRule::Mean, 2);
        assert_eq!(m.score(&[1.0, 2.0]).unwrap(), 0.37);
        let m = ForestModel::from_trees(vec![DecisionTree::constant(0.7); 3], VoteRule::Majority, 2);
        assert_eq!(m.score(&[1.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn deterministic_under_seed() {
        let data = blobs(100, 5);
        let p = ForestParams {
            trees: 8,
            seed: 42,
            ..Default::default()
        };
        assert_eq!(train_forest(&data, &p).unwrap(), train_forest(&data, &p).unwrap());
    }
}
