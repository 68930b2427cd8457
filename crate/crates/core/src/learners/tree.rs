//! Regression trees with exact greedy split search.
//!
//! Columns are sorted once per dataset; every node keeps, per feature, its
//! rows in sorted order, and children inherit those orders by a stable
//! partition. Splits maximize squared-error reduction; ties go to the lowest
//! feature index, then the lowest threshold.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::rng::StageRng;

/// Nodes below this size evaluate features sequentially.
const PARALLEL_MIN_ROWS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    max_depth: usize,
}

impl DecisionTree {
    pub fn constant(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
            max_depth: 0,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { .. } => return i,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            Node::Leaf { value } => value,
            Node::Split { .. } => unreachable!("leaf_index returns leaves"),
        }
    }

    pub(crate) fn set_leaf(&mut self, node: usize, value: f64) {
        self.nodes[node] = Node::Leaf { value };
    }

    pub(crate) fn scale_leaves(&mut self, factor: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value } = n {
                *value *= factor;
            }
        }
    }

    /// Largest feature index used by a split, if any.
    pub fn max_feature(&self) -> Option<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max()
    }

    /// Fits a regression tree to `targets` on every row of `data`.
    pub fn fit_regression(data: &Dataset, targets: &[f64], params: &TreeParams) -> Self {
        let cols = SortedColumns::new(data);
        let counts = vec![1; data.len()];
        fit_tree(data, &cols, targets, &counts, params, None).tree
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    /// Minimum total row weight per leaf.
    pub min_leaf: u32,
    /// Features drawn per split; `None` evaluates all.
    pub max_features: Option<usize>,
}

/// Row ids of each feature column, sorted by (value, row).
pub(crate) struct SortedColumns {
    order: Vec<Vec<u32>>,
}

impl SortedColumns {
    pub(crate) fn new(data: &Dataset) -> Self {
        let order = (0..data.dim())
            .into_par_iter()
            .map(|f| {
                let mut rows: Vec<u32> = (0..data.len() as u32).collect();
                rows.sort_by(|&a, &b| {
                    data.value(a as usize, f)
                        .total_cmp(&data.value(b as usize, f))
                        .then(a.cmp(&b))
                });
                rows
            })
            .collect();
        Self { order }
    }
}

pub(crate) struct FitOutput {
    pub tree: DecisionTree,
    /// (node index, rows reaching it during fitting) for every leaf.
    pub leaves: Vec<(usize, Vec<u32>)>,
}

struct Builder<'a> {
    data: &'a Dataset,
    targets: &'a [f64],
    counts: &'a [u32],
    params: &'a TreeParams,
    rng: Option<&'a mut StageRng>,
    nodes: Vec<Node>,
    leaves: Vec<(usize, Vec<u32>)>,
    go_left: Vec<bool>,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Fits a tree on rows with non-zero `counts`, each weighted by its count.
pub(crate) fn fit_tree(
    data: &Dataset,
    cols: &SortedColumns,
    targets: &[f64],
    counts: &[u32],
    params: &TreeParams,
    rng: Option<&mut StageRng>,
) -> FitOutput {
    let lists: Vec<Vec<u32>> = cols
        .order
        .iter()
        .map(|rows| rows.iter().copied().filter(|&r| counts[r as usize] > 0).collect())
        .collect();
    let mut builder = Builder {
        data,
        targets,
        counts,
        params,
        rng,
        nodes: Vec::new(),
        leaves: Vec::new(),
        go_left: vec![false; data.len()],
    };
    if data.dim() == 0 || lists[0].is_empty() {
        builder.nodes.push(Node::Leaf { value: 0.0 });
        let rows = lists.into_iter().next().unwrap_or_default();
        builder.leaves.push((0, rows));
    } else {
        builder.build(lists, 0);
    }
    FitOutput {
        tree: DecisionTree {
            nodes: builder.nodes,
            max_depth: params.max_depth,
        },
        leaves: builder.leaves,
    }
}

impl Builder<'_> {
    fn push_leaf(&mut self, rows: Vec<u32>, total: f64, n: f64) -> usize {
        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf {
            value: if n > 0.0 { total / n } else { 0.0 },
        });
        self.leaves.push((idx, rows));
        idx
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let dim = self.data.dim();
        match (self.params.max_features, self.rng.as_deref_mut()) {
            (Some(m), Some(rng)) if m < dim => {
                let mut f: Vec<usize> = sample(rng, dim, m.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..dim).collect(),
        }
    }

    fn best_for_feature(&self, rows: &[u32], feature: usize, n: f64, total: f64) -> Option<Candidate> {
        let min_leaf = f64::from(self.params.min_leaf.max(1));
        let parent = total * total / n;
        let (mut nl, mut sl) = (0.0, 0.0);
        let mut best: Option<Candidate> = None;
        for (i, &r) in rows.iter().enumerate() {
            let c = f64::from(self.counts[r as usize]);
            nl += c;
            sl += c * self.targets[r as usize];
            let Some(&next) = rows.get(i + 1) else { break };
            let (v, w) = (
                self.data.value(r as usize, feature),
                self.data.value(next as usize, feature),
            );
            if v >= w {
                continue;
            }
            let nr = n - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let sr = total - sl;
            let gain = sl * sl / nl + sr * sr / nr - parent;
            if best.is_none_or(|b| gain > b.gain) {
                let mut threshold = v + (w - v) / 2.0;
                if threshold >= w {
                    threshold = v;
                }
                best = Some(Candidate {
                    gain,
                    feature,
                    threshold,
                });
            }
        }
        best
    }

    fn build(&mut self, lists: Vec<Vec<u32>>, depth: usize) -> usize {
        let rows = &lists[0];
        let (mut n, mut total) = (0.0, 0.0);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &r in rows {
            let c = f64::from(self.counts[r as usize]);
            let t = self.targets[r as usize];
            n += c;
            total += c * t;
            lo = lo.min(t);
            hi = hi.max(t);
        }
        let min_leaf = f64::from(self.params.min_leaf.max(1));
        if depth >= self.params.max_depth || n < 2.0 * min_leaf || lo == hi {
            let rows = lists.into_iter().next().expect("one list per feature");
            return self.push_leaf(rows, total, n);
        }

        let features = self.candidate_features();
        let per_feature: Vec<Option<Candidate>> = if rows.len() >= PARALLEL_MIN_ROWS {
            features
                .par_iter()
                .map(|&f| self.best_for_feature(&lists[f], f, n, total))
                .collect()
        } else {
            features
                .iter()
                .map(|&f| self.best_for_feature(&lists[f], f, n, total))
                .collect()
        };
        let mut best: Option<Candidate> = None;
        for c in per_feature.into_iter().flatten() {
            if best.is_none_or(|b| c.gain > b.gain) {
                best = Some(c);
            }
        }
        let Some(split) = best.filter(|b| b.gain > 0.0) else {
            let rows = lists.into_iter().next().expect("one list per feature");
            return self.push_leaf(rows, total, n);
        };

        for &r in &lists[0] {
            self.go_left[r as usize] = self.data.value(r as usize, split.feature) <= split.threshold;
        }
        let (left, right): (Vec<Vec<u32>>, Vec<Vec<u32>>) = lists
            .into_iter()
            .map(|l| l.into_iter().partition(|&r| self.go_left[r as usize]))
            .unzip();

        let idx = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let l = self.build(left, depth + 1);
        let r = self.build(right, depth + 1);
        self.nodes[idx] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(rows: &[&[f64]]) -> Dataset {
        Dataset::new(
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            rows[0].len(),
            vec![0.0; rows.len()],
        )
        .unwrap()
    }

    fn params(depth: usize) -> TreeParams {
        TreeParams {
            max_depth: depth,
            min_leaf: 1,
            max_features: None,
        }
    }

    #[test]
    fn splits_a_step() {
        let d = data(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let t = DecisionTree::fit_regression(&d, &[0.0, 0.0, 1.0, 1.0], &params(3));
        assert_eq!(t.predict(&[0.5]), 0.0);
        assert_eq!(t.predict(&[2.5]), 1.0);
        match &t.nodes()[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 1.5);
            }
            Node::Leaf { .. } => panic!("expected a split"),
        }
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // Both columns separate the targets identically.
        let d = data(&[&[0.0, 0.0], &[1.0, 1.0]]);
        let t = DecisionTree::fit_regression(&d, &[0.0, 1.0], &params(1));
        assert!(matches!(t.nodes()[0], Node::Split { feature: 0, .. }));
    }

    #[test]
    fn pure_and_depth_zero_are_leaves() {
        let d = data(&[&[0.0], &[1.0]]);
        assert_eq!(
            DecisionTree::fit_regression(&d, &[0.3, 0.3], &params(4)).nodes().len(),
            1
        );
        let t = DecisionTree::fit_regression(&d, &[0.0, 1.0], &params(0));
        assert_eq!(t.predict(&[7.0]), 0.5);
    }

    #[test]
    fn piecewise_constant_between_thresholds() {
        let d = data(&[&[0.0, 5.0], &[1.0, 3.0], &[2.0, 1.0], &[3.0, 0.0]]);
        let t = DecisionTree::fit_regression(&d, &[0.1, 0.7, 0.2, 0.9], &params(4));
        let thresholds: Vec<(usize, f64)> = t
            .nodes()
            .iter()
            .filter_map(|n| match n {
                Node::Split { feature, threshold, .. } => Some((*feature, *threshold)),
                _ => None,
            })
            .collect();
        let x = [1.2, 2.2];
        let base = t.predict(&x);
        for delta in [-0.05, 0.05] {
            let y = [x[0] + delta, x[1] + delta];
            let crosses = thresholds.iter().any(|&(f, th)| (x[f] <= th) != (y[f] <= th));
            if !crosses {
                assert_eq!(t.predict(&y), base);
            }
        }
    }
}
