//! Gradient-boosted regression trees for the logistic and pairwise objectives.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::index::sample;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::tree::{fit_tree, DecisionTree, SortedColumns, TreeParams};
use super::{probability, sigmoid, softplus, Dataset, Scorer};
use crate::error::{Error, Result};
use crate::rng::{derive_seed_n, StageRng};

/// Halvings tried before a leaf or step is dropped to zero.
const MAX_HALVINGS: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Logistic,
    PairwiseRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafStep {
    /// Leaf holds the mean negative gradient.
    Gradient,
    /// Leaf holds sum(gradient) / sum(hessian).
    Newton,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_leaf: u32,
    pub subsample: f64,
    pub leaf_step: LeafStep,
    /// Weight pairwise gradients by |delta NDCG|.
    pub lambda_ndcg: bool,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            rounds: 100,
            max_depth: 4,
            learning_rate: 0.1,
            min_leaf: 5,
            subsample: 1.0,
            leaf_step: LeafStep::Newton,
            lambda_ndcg: false,
            seed: 0,
        }
    }
}

impl GbdtParams {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigInvalid(format!("learning_rate {}", self.learning_rate)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::ConfigInvalid(format!("subsample {}", self.subsample)));
        }
        Ok(())
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
            max_features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    /// (tree, shrinkage) per round.
    pub trees: Vec<(DecisionTree, f64)>,
    pub base_score: f64,
    pub objective: Objective,
    pub params: GbdtParams,
    pub dimension: usize,
    /// Training objective before the first round and after every round.
    pub loss_history: Vec<f64>,
}

impl GbdtModel {
    /// Base score plus the shrinkage-weighted tree outputs.
    pub fn margin(&self, x: &[f64]) -> f64 {
        self.trees
            .iter()
            .fold(self.base_score, |acc, (t, s)| acc + s * t.predict(x))
    }
}

impl Scorer for GbdtModel {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn score_unchecked(&self, features: &[f64]) -> f64 {
        match self.objective {
            Objective::Logistic => probability(self.margin(features)),
            Objective::PairwiseRank => self.margin(features),
        }
    }
}

fn logistic_loss(margin: f64, y: f64) -> f64 {
    softplus(margin) - y * margin
}

/// Pairwise logistic cost with f = sign(y_i - y_j).
pub fn pairwise_cost(s_i: f64, s_j: f64, y_i: u8, y_j: u8) -> f64 {
    let f = match y_i.cmp(&y_j) {
        Ordering::Greater => 1.0,
        Ordering::Equal => 0.0,
        Ordering::Less => -1.0,
    };
    softplus(-f * (s_i - s_j))
}

fn round_counts(n: usize, params: &GbdtParams, round: usize) -> Vec<u32> {
    if params.subsample >= 1.0 {
        return vec![1; n];
    }
    let take = ((n as f64 * params.subsample).round() as usize).clamp(1, n);
    let mut rng = StageRng::seed_from_u64(derive_seed_n(params.seed, "gbdt-subsample", round as u64));
    let mut counts = vec![0; n];
    for i in sample(&mut rng, n, take) {
        counts[i] = 1;
    }
    counts
}

/// Rows of `data` grouped by the leaf of `tree` they reach.
fn rows_by_leaf(tree: &DecisionTree, data: &Dataset) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..data.len() {
        out.entry(tree.leaf_index(data.row(i))).or_default().push(i);
    }
    out
}

/// Logistic boosting on 0/1 targets.
pub fn train_gbdt(data: &Dataset, params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    data.check_binary()?;
    let y = data.targets();
    let n = data.len();
    let prior = y.iter().sum::<f64>() / n as f64;
    let base_score = (prior / (1.0 - prior)).ln();
    let mut margins = vec![base_score; n];
    let total_loss = |m: &[f64]| m.iter().zip(y).map(|(&m, &y)| logistic_loss(m, y)).sum::<f64>() / n as f64;
    let mut history = vec![total_loss(&margins)];
    let cols = SortedColumns::new(data);
    let tree_params = params.tree_params();
    let mut trees = Vec::with_capacity(params.rounds);

    for round in 0..params.rounds {
        let p: Vec<f64> = margins.iter().map(|&m| sigmoid(m)).collect();
        let residual: Vec<f64> = p.iter().zip(y).map(|(p, y)| y - p).collect();
        let counts = round_counts(n, params, round);
        let fit = fit_tree(data, &cols, &residual, &counts, &tree_params, None);
        let mut tree = fit.tree;
        if params.leaf_step == LeafStep::Newton {
            for (node, rows) in &fit.leaves {
                let (mut g, mut h) = (0.0, 0.0);
                for &r in rows {
                    let c = f64::from(counts[r as usize]);
                    g += c * residual[r as usize];
                    h += c * p[r as usize] * (1.0 - p[r as usize]);
                }
                tree.set_leaf(*node, if h > 1e-12 { g / h } else { 0.0 });
            }
        }
        tree.scale_leaves(params.learning_rate);

        // Leaves touch disjoint rows, so a per-leaf non-increase gives a
        // global one.
        for (node, rows) in rows_by_leaf(&tree, data) {
            let mut step = tree.predict(data.row(rows[0]));
            let before: f64 = rows.iter().map(|&r| logistic_loss(margins[r], y[r])).sum();
            let mut halvings = 0;
            while step != 0.0 {
                let after: f64 = rows.iter().map(|&r| logistic_loss(margins[r] + step, y[r])).sum();
                if after <= before {
                    break;
                }
                halvings += 1;
                step = if halvings >= MAX_HALVINGS { 0.0 } else { step / 2.0 };
            }
            tree.set_leaf(node, step);
        }
        for (i, m) in margins.iter_mut().enumerate() {
            *m += tree.predict(data.row(i));
        }
        history.push(total_loss(&margins));
        debug!("gbdt round {round}: loss {:.6}", history[round + 1]);
        trees.push((tree, 1.0));
    }
    info!(
        "gbdt: {} rounds, loss {:.5} -> {:.5}",
        params.rounds,
        history[0],
        history[history.len() - 1]
    );
    Ok(GbdtModel {
        trees,
        base_score,
        objective: Objective::Logistic,
        params: params.clone(),
        dimension: data.dim(),
        loss_history: history,
    })
}

/// A ranking group: its row indices, with one-vs-rest relevance in the targets.
struct Group {
    rows: Vec<usize>,
    /// (better, worse) index pairs into `rows`.
    pairs: Vec<(usize, usize)>,
}

fn make_groups(data: &Dataset, groups: &[Vec<usize>]) -> (Vec<Group>, usize) {
    let y = data.targets();
    let mut out = Vec::new();
    let mut degenerate = 0;
    for rows in groups {
        let mut pairs = Vec::new();
        for (a, &ra) in rows.iter().enumerate() {
            for (b, &rb) in rows.iter().enumerate() {
                if y[ra] > y[rb] {
                    pairs.push((a, b));
                }
            }
        }
        if pairs.is_empty() {
            degenerate += 1;
        } else {
            out.push(Group {
                rows: rows.clone(),
                pairs,
            });
        }
    }
    (out, degenerate)
}

fn rank_cost(groups: &[Group], scores: &[f64]) -> f64 {
    groups
        .iter()
        .map(|g| {
            g.pairs
                .iter()
                .map(|&(a, b)| softplus(scores[g.rows[b]] - scores[g.rows[a]]))
                .sum::<f64>()
        })
        .sum()
}

/// |NDCG change| from swapping each better/worse pair, under current scores.
fn ndcg_weights(group: &Group, y: &[f64], scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..group.rows.len()).collect();
    order.sort_by(|&a, &b| scores[group.rows[b]].total_cmp(&scores[group.rows[a]]).then(a.cmp(&b)));
    let mut rank = vec![0; order.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let discount = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let gain = |i: usize| 2f64.powf(y[group.rows[i]]) - 1.0;
    let mut gains: Vec<f64> = (0..group.rows.len()).map(gain).collect();
    gains.sort_by(|a, b| b.total_cmp(a));
    let ideal: f64 = gains.iter().enumerate().map(|(r, g)| g * discount(r)).sum();
    group
        .pairs
        .iter()
        .map(|&(a, b)| ((gain(a) - gain(b)) * (discount(rank[a]) - discount(rank[b]))).abs() / ideal.max(1e-12))
        .collect()
}

/// Boosting over the pairwise cost summed within each group.
///
/// `groups` lists row indices of `data`; targets hold relevance. Groups
/// without two relevance levels are skipped.
pub fn train_gbdt_rank(data: &Dataset, groups: &[Vec<usize>], params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    if data.is_empty() || groups.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (groups_used, degenerate) = make_groups(data, groups);
    if degenerate > 0 {
        info!("rank: skipped {degenerate} degenerate groups");
    }
    if groups_used.is_empty() {
        return Err(Error::DegenerateGroups(degenerate));
    }
    let y = data.targets();
    let n = data.len();
    let mut scores = vec![0.0; n];
    let mut cost = rank_cost(&groups_used, &scores);
    let mut history = vec![cost];
    let cols = SortedColumns::new(data);
    let tree_params = params.tree_params();
    let mut trees = Vec::with_capacity(params.rounds);

    for round in 0..params.rounds {
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for g in &groups_used {
            let weights = params.lambda_ndcg.then(|| ndcg_weights(g, y, &scores));
            for (k, &(a, b)) in g.pairs.iter().enumerate() {
                let (ra, rb) = (g.rows[a], g.rows[b]);
                let w = weights.as_ref().map_or(1.0, |w| w[k]);
                let rho = sigmoid(scores[rb] - scores[ra]);
                grad[ra] += w * rho;
                grad[rb] -= w * rho;
                let h = w * rho * (1.0 - rho);
                hess[ra] += h;
                hess[rb] += h;
            }
        }
        let counts = round_counts(n, params, round);
        let fit = fit_tree(data, &cols, &grad, &counts, &tree_params, None);
        let mut tree = fit.tree;
        if params.leaf_step == LeafStep::Newton {
            for (node, rows) in &fit.leaves {
                let (mut g, mut h) = (0.0, 0.0);
                for &r in rows {
                    let c = f64::from(counts[r as usize]);
                    g += c * grad[r as usize];
                    h += c * hess[r as usize];
                }
                tree.set_leaf(*node, if h > 1e-12 { g / h } else { 0.0 });
            }
        }
        let outputs: Vec<f64> = (0..n).map(|i| tree.predict(data.row(i))).collect();
        let mut step = params.learning_rate;
        let mut halvings = 0;
        let mut next: Vec<f64>;
        loop {
            next = scores.iter().zip(&outputs).map(|(s, o)| s + step * o).collect();
            let c = rank_cost(&groups_used, &next);
            if c <= cost {
                cost = c;
                break;
            }
            halvings += 1;
            if halvings >= MAX_HALVINGS {
                step = 0.0;
                next = scores.clone();
                break;
            }
            step /= 2.0;
        }
        scores = next;
        history.push(cost);
        debug!("rank round {round}: cost {cost:.6} step {step}");
        trees.push((tree, step));
    }
    info!(
        "rank: {} groups, {} rounds, cost {:.4} -> {:.4}",
        groups_used.len(),
        params.rounds,
        history[0],
        cost
    );
    Ok(GbdtModel {
        trees,
        base_score: 0.0,
        objective: Objective::PairwiseRank,
        params: params.clone(),
        dimension: data.dim(),
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn threshold_data() -> Dataset {
        let x: Vec<f64> = (-20..20).map(|i| f64::from(i) + 0.5).collect();
        let y = x.iter().map(|&v| f64::from(u8::from(v > 0.0))).collect();
        Dataset::new(x, 1, y).unwrap()
    }

    #[test]
    fn separates_a_threshold() {
        let data = threshold_data();
        let params = GbdtParams {
            rounds: 20,
            max_depth: 2,
            min_leaf: 1,
            ..Default::default()
        };
        let model = train_gbdt(&data, &params).unwrap();
        let correct = data
            .rows()
            .zip(data.targets())
            .filter(|(x, &y)| (model.score_unchecked(x) > 0.5) == (y > 0.5))
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn zero_rounds_is_prior() {
        let data = threshold_data();
        let model = train_gbdt(
            &data,
            &GbdtParams {
                rounds: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(model.base_score, 0.0);
        assert_eq!(model.margin(&[3.0]), 0.0);
        assert_eq!(model.score_unchecked(&[3.0]), 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        let one = Dataset::new(vec![1.0, 2.0], 1, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            train_gbdt(&one, &GbdtParams::default()),
            Err(Error::SingleClass)
        ));
        let empty = Dataset::new(vec![], 1, vec![]).unwrap();
        assert!(matches!(
            train_gbdt(&empty, &GbdtParams::default()),
            Err(Error::EmptyInput)
        ));
        let model = train_gbdt(
            &threshold_data(),
            &GbdtParams {
                rounds: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(model.score(&[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn duplicating_samples_matches_doubled_min_leaf() {
        let mut rng = StageRng::seed_from_u64(4);
        let n = 60;
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| f64::from(u8::from(x[i * 3] + x[i * 3 + 1] > 0.1)))
            .collect();
        let data = Dataset::new(x.clone(), 3, y.clone()).unwrap();
        let doubled = Dataset::new([x.clone(), x].concat(), 3, [y.clone(), y].concat()).unwrap();
        let params = GbdtParams {
            rounds: 10,
            max_depth: 3,
            min_leaf: 2,
            ..Default::default()
        };
        let a = train_gbdt(&data, &params).unwrap();
        let b = train_gbdt(&doubled, &GbdtParams { min_leaf: 4, ..params }).unwrap();
        assert_eq!(a.trees.len(), b.trees.len());
        for ((ta, _), (tb, _)) in a.trees.iter().zip(&b.trees) {
            assert_eq!(ta.nodes().len(), tb.nodes().len());
        }
        for row in data.rows() {
            assert!((a.margin(row) - b.margin(row)).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_never_increases() {
        for seed in 0..5 {
            let mut rng = StageRng::seed_from_u64(seed);
            let n = 200;
            let x: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.3)))).collect();
            let params = GbdtParams {
                rounds: 30,
                learning_rate: 0.8,
                subsample: 0.7,
                seed,
                ..Default::default()
            };
            let model = train_gbdt(&Dataset::new(x, 4, y).unwrap(), &params).unwrap();
            for w in model.loss_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn pairwise_cost_values() {
        assert!((pairwise_cost(0.3, 0.3, 1, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((pairwise_cost(5.0, -2.0, 1, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        let tiny = pairwise_cost(50.0, 0.0, 1, 0);
        assert!((tiny - 1.928_749_847_963_918e-22).abs() < 1e-30);
        assert!(pairwise_cost(-1e6, 1e6, 1, 0).is_finite());
        assert!((pairwise_cost(-1e6, 0.0, 1, 0) - 1e6).abs() < 1e-6);
        assert_eq!(pairwise_cost(1.0, 0.0, 0, 1), pairwise_cost(0.0, 1.0, 1, 0));
    }

    #[test]
    fn rank_orders_a_dominant_positive() {
        let x = vec![3.0, 3.0, 1.0, 0.5, 0.0, 2.0, 2.5, 1.0];
        let y = vec![1.0, 0.0, 0.0, 0.0];
        let data = Dataset::new(x, 2, y).unwrap();
        let params = GbdtParams {
            rounds: 10,
            min_leaf: 1,
            ..Default::default()
        };
        let model = train_gbdt_rank(&data, &[vec![0, 1, 2, 3]], &params).unwrap();
        let s: Vec<f64> = data.rows().map(|r| model.score_unchecked(r)).collect();
        assert!(s[1..].iter().all(|&v| s[0] > v));
        for w in model.loss_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let zero = train_gbdt_rank(&data, &[vec![0, 1, 2, 3]], &GbdtParams { rounds: 0, ..params }).unwrap();
        assert!(data.rows().all(|r| zero.score_unchecked(r) == 0.0));
    }

    #[test]
    fn rank_needs_a_usable_group() {
        let data = Dataset::new(vec![1.0, 2.0], 1, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            train_gbdt_rank(&data, &[vec![0, 1]], &GbdtParams::default()),
            Err(Error::DegenerateGroups(1))
        ));
    }

    #[test]
    fn ndcg_weighting_still_descends() {
        let mut rng = StageRng::seed_from_u64(11);
        let x: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..30).map(|i| f64::from(u8::from(i % 5 == 0))).collect();
        let data = Dataset::new(x, 2, y).unwrap();
        let groups: Vec<Vec<usize>> = (0..6).map(|g| (g * 5..g * 5 + 5).collect()).collect();
        let params = GbdtParams {
            rounds: 15,
            min_leaf: 1,
            lambda_ndcg: true,
            ..Default::default()
        };
        let model = train_gbdt_rank(&data, &groups, &params).unwrap();
        for w in model.loss_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
