//! Stacked classification and pairwise ranking, plus the two top-N
//! selection rules.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{kfold_oof, train_gbdt_rank, Dataset, GbdtModel, GbdtParams, LearnerSpec, Model, Scorer};
use crate::rng::{derive_seed_n, stage_rng};
use crate::types::{sort_scored, Pair, PairSample, ScoredPair, UserId};

/// Default degree cap of the greedy selection.
pub const DEFAULT_K_MAX: usize = 51;

/// Seeded 2:1 split over distinct pairs; repeated samples of a pair stay
/// together.
pub fn split_learn_valid(samples: &[PairSample], seed: u64) -> Result<(Vec<PairSample>, Vec<PairSample>)> {
    let mut by_pair: BTreeMap<&Pair, Vec<&PairSample>> = BTreeMap::new();
    for s in samples {
        by_pair.entry(&s.pair).or_default().push(s);
    }
    if by_pair.len() < 3 {
        return Err(Error::TooFew {
            needed: 3,
            got: by_pair.len(),
        });
    }
    let mut groups: Vec<Vec<&PairSample>> = by_pair.into_values().collect();
    groups.shuffle(&mut stage_rng(seed, "learn-valid"));
    let cut = 2 * groups.len() / 3;
    let flatten = |g: &[Vec<&PairSample>]| g.iter().flatten().map(|s| (*s).clone()).collect();
    Ok((flatten(&groups[..cut]), flatten(&groups[cut..])))
}

/// Fraction of true matches among the `k` best-scored rows, where `k` is the
/// number of positives. Ties break by row order.
pub fn precision_at_positives(scores: &[f64], labels: &[f64]) -> f64 {
    let k = labels.iter().filter(|&&y| y > 0.5).count();
    if k == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order[..k].iter().filter(|&&i| labels[i] > 0.5).count() as f64 / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackModel {
    pub bases: Vec<Model>,
    pub meta: Model,
    pub k: usize,
    pub registry_version: String,
}

impl StackModel {
    pub fn dimension(&self) -> usize {
        self.bases.first().map_or(0, Scorer::dimension)
    }

    pub fn meta_features(&self, features: &[f64]) -> Vec<f64> {
        self.bases.iter().map(|b| b.score_unchecked(features)).collect()
    }
}

impl Scorer for StackModel {
    fn dimension(&self) -> usize {
        StackModel::dimension(self)
    }

    fn score_unchecked(&self, features: &[f64]) -> f64 {
        self.meta.score_unchecked(&self.meta_features(features))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackReport {
    pub n_learn: usize,
    pub n_valid: usize,
    /// (learner name, validation precision) per base, in order.
    pub base_precision: Vec<(String, f64)>,
    pub stack_precision: f64,
}

impl StackReport {
    pub fn best_base(&self) -> f64 {
        self.base_precision
            .iter()
            .map(|(_, p)| *p)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Layer-1 bases on the learn split, Layer-2 on their out-of-fold scores,
/// everything measured on the validation split.
pub fn train_stack(
    samples: &[PairSample],
    bases: &[LearnerSpec],
    meta: &LearnerSpec,
    k: usize,
    seed: u64,
    registry_version: &str,
) -> Result<(StackModel, StackReport)> {
    if bases.len() < 2 {
        return Err(Error::ConfigInvalid(format!(
            "stacking needs at least 2 bases, got {}",
            bases.len()
        )));
    }
    let (learn, valid) = split_learn_valid(samples, seed)?;
    let learn = Dataset::from_samples(&learn)?;
    let valid = Dataset::from_samples(&valid)?;
    let specs: Vec<LearnerSpec> = bases
        .iter()
        .enumerate()
        .map(|(i, s)| s.with_seed(derive_seed_n(seed, "stack-base", i as u64)))
        .collect();

    let fitted: Vec<(Model, Vec<f64>)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let oof = kfold_oof(spec, &learn, k, derive_seed_n(seed, "stack-folds", i as u64))?;
            Ok((spec.fit(&learn)?, oof))
        })
        .collect::<Result<_>>()?;

    let n_bases = fitted.len();
    let mut meta_x = Vec::with_capacity(learn.len() * n_bases);
    for row in 0..learn.len() {
        meta_x.extend(fitted.iter().map(|(_, oof)| oof[row]));
    }
    let meta_data = Dataset::new(meta_x, n_bases, learn.targets().to_vec())?;
    let meta_model = meta.with_seed(derive_seed_n(seed, "stack-meta", 0)).fit(&meta_data)?;
    let model = StackModel {
        bases: fitted.into_iter().map(|(m, _)| m).collect(),
        meta: meta_model,
        k,
        registry_version: registry_version.to_string(),
    };

    let base_precision = model
        .bases
        .iter()
        .map(|b| {
            let s: Vec<f64> = valid.rows().map(|r| b.score_unchecked(r)).collect();
            (b.name().to_string(), precision_at_positives(&s, valid.targets()))
        })
        .collect();
    let stack_scores: Vec<f64> = valid.rows().map(|r| model.score_unchecked(r)).collect();
    let report = StackReport {
        n_learn: learn.len(),
        n_valid: valid.len(),
        base_precision,
        stack_precision: precision_at_positives(&stack_scores, valid.targets()),
    };
    info!(
        "stack: learn {} valid {}, bases {:?}, stack {:.4}",
        report.n_learn, report.n_valid, report.base_precision, report.stack_precision
    );
    Ok((model, report))
}

/// Scores every sample with `scorer`; output sorted by descending weight.
pub fn score_samples<S: Scorer + Sync>(scorer: &S, samples: &[PairSample]) -> Result<Vec<ScoredPair>> {
    let mut out = samples
        .par_iter()
        .map(|s| {
            let f = s.features.as_deref().ok_or(Error::EmptyInput)?;
            let w = scorer.score(f)?;
            ScoredPair::new(s.pair.clone(), w)
        })
        .collect::<Result<Vec<_>>>()?;
    sort_scored(&mut out);
    Ok(out)
}

pub fn predict_stack(model: &StackModel, samples: &[PairSample]) -> Result<Vec<ScoredPair>> {
    score_samples(model, samples)
}

/// One query user and its candidate documents.
#[derive(Debug, Clone, PartialEq)]
pub struct RankGroup {
    pub query: UserId,
    /// (candidate, features, relevance), sorted by candidate.
    pub candidates: Vec<(UserId, Vec<f64>, Option<u8>)>,
}

type Candidate = (UserId, Vec<f64>, Option<u8>);

/// One group per user in the pair list; each pair feeds both endpoints.
pub fn build_rank_groups(samples: &[PairSample], gold: Option<&BTreeSet<Pair>>) -> Result<Vec<RankGroup>> {
    let mut groups: BTreeMap<&UserId, Vec<Candidate>> = BTreeMap::new();
    for s in samples {
        let f = s.features.clone().ok_or(Error::EmptyInput)?;
        let rel = gold.map(|g| u8::from(g.contains(&s.pair)));
        groups
            .entry(s.pair.a())
            .or_default()
            .push((s.pair.b().clone(), f.clone(), rel));
        groups.entry(s.pair.b()).or_default().push((s.pair.a().clone(), f, rel));
    }
    Ok(groups
        .into_iter()
        .map(|(q, mut c)| {
            c.sort_by(|x, y| x.0.cmp(&y.0));
            c.dedup_by(|x, y| x.0 == y.0);
            RankGroup {
                query: q.clone(),
                candidates: c,
            }
        })
        .collect())
}

/// Pairwise-cost boosting over the groups. Groups and candidates are
/// processed in canonical order, so input order never matters.
pub fn train_rank(groups: &[RankGroup], params: &GbdtParams) -> Result<GbdtModel> {
    let mut ordered: Vec<&RankGroup> = groups.iter().collect();
    ordered.sort_by(|a, b| a.query.cmp(&b.query));
    let dim = ordered
        .iter()
        .find_map(|g| g.candidates.first())
        .map_or(0, |c| c.1.len());
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = Vec::with_capacity(ordered.len());
    for g in ordered {
        let mut cands: Vec<&(UserId, Vec<f64>, Option<u8>)> = g.candidates.iter().collect();
        cands.sort_by(|a, b| a.0.cmp(&b.0));
        let mut idx = Vec::with_capacity(cands.len());
        for (_, f, rel) in cands {
            if f.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: f.len(),
                });
            }
            let rel = rel.ok_or_else(|| Error::ConfigInvalid(format!("group {} lacks relevance labels", g.query)))?;
            idx.push(y.len());
            x.extend_from_slice(f);
            y.push(f64::from(rel));
        }
        rows.push(idx);
    }
    let data = Dataset::new(x, dim, y)?;
    train_gbdt_rank(&data, &rows, params)
}

/// Highest weight per canonical pair.
fn dedup_max(triples: &[ScoredPair]) -> Vec<ScoredPair> {
    let mut best: HashMap<&Pair, f64> = HashMap::with_capacity(triples.len());
    for t in triples {
        let w = best.entry(&t.pair).or_insert(t.weight);
        if t.weight > *w {
            *w = t.weight;
        }
    }
    let mut out: Vec<ScoredPair> = best
        .into_iter()
        .map(|(p, w)| ScoredPair {
            pair: p.clone(),
            weight: w,
        })
        .collect();
    sort_scored(&mut out);
    out
}

/// Global top-N by weight.
pub fn select_rank1(triples: &[ScoredPair], n: usize) -> Vec<Pair> {
    dedup_max(triples).into_iter().take(n).map(|t| t.pair).collect()
}

/// Greedy degree-capped selection: the cap rises from 1 to `k_max`, each
/// level sweeping the sorted list once. Output is in acceptance order.
pub fn select_rank2(triples: &[ScoredPair], n: usize, k_max: usize) -> Vec<Pair> {
    let sorted = dedup_max(triples);
    let mut degree: HashMap<&UserId, usize> = HashMap::new();
    let mut taken = vec![false; sorted.len()];
    let mut out = Vec::with_capacity(n.min(sorted.len()));
    'phases: for k in 1..=k_max {
        if out.len() >= n {
            break;
        }
        for (i, t) in sorted.iter().enumerate() {
            if out.len() >= n {
                break 'phases;
            }
            if taken[i] {
                continue;
            }
            let (u, v) = (t.pair.a(), t.pair.b());
            if degree.get(u).copied().unwrap_or(0) < k && degree.get(v).copied().unwrap_or(0) < k {
                *degree.entry(u).or_default() += 1;
                *degree.entry(v).or_default() += 1;
                taken[i] = true;
                out.push(t.pair.clone());
            }
        }
    }
    out
}

/// Component size -> number of components, over the graph the pairs span.
pub fn component_histogram(pairs: &[Pair]) -> BTreeMap<usize, usize> {
    let mut index: HashMap<&UserId, usize> = HashMap::new();
    for p in pairs {
        for u in [p.a(), p.b()] {
            let next = index.len();
            index.entry(u).or_insert(next);
        }
    }
    let mut parent: Vec<usize> = (0..index.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for p in pairs {
        let (a, b) = (find(&mut parent, index[p.a()]), find(&mut parent, index[p.b()]));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut sizes: HashMap<usize, usize> = HashMap::new();
    for x in 0..parent.len() {
        *sizes.entry(find(&mut parent, x)).or_default() += 1;
    }
    let mut hist = BTreeMap::new();
    for s in sizes.into_values() {
        *hist.entry(s).or_default() += 1;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{ForestParams, MlpParams};
    use crate::types::canonical_pair;
    use proptest::prelude::*;

    fn uid(s: &str) -> UserId {
        UserId::new(s).unwrap()
    }

    fn pair(a: &str, b: &str) -> Pair {
        canonical_pair(uid(a), uid(b)).unwrap()
    }

    fn sp(a: &str, b: &str, w: f64) -> ScoredPair {
        ScoredPair::new(pair(a, b), w).unwrap()
    }

    fn samples(n: usize) -> Vec<PairSample> {
        (0..n)
            .map(|i| {
                let mut s = PairSample::labeled(pair(&format!("a{i}"), &format!("b{i}")), u8::from(i % 4 == 0));
                let signal = if i % 4 == 0 { 1.0 } else { 0.0 };
                s.features = Some(vec![signal + (i % 7) as f64 * 0.05, (i % 5) as f64]);
                s
            })
            .collect()
    }

    #[test]
    fn split_sizes() {
        let (l, v) = split_learn_valid(&samples(3), 1).unwrap();
        assert_eq!((l.len(), v.len()), (2, 1));
        let (l, v) = split_learn_valid(&samples(300), 1).unwrap();
        assert_eq!((l.len(), v.len()), (200, 100));
        assert_eq!(split_learn_valid(&samples(300), 1).unwrap().0, l);
        assert!(matches!(split_learn_valid(&samples(2), 1), Err(Error::TooFew { .. })));
    }

    #[test]
    fn split_keeps_pair_copies_together() {
        let mut s = samples(30);
        s.extend(samples(30));
        let (l, v) = split_learn_valid(&s, 4).unwrap();
        let lp: BTreeSet<&Pair> = l.iter().map(|x| &x.pair).collect();
        assert!(v.iter().all(|x| !lp.contains(&x.pair)));
        assert_eq!(l.len(), 40);
    }

    #[test]
    fn duplicate_bases_do_not_hurt() {
        let base = LearnerSpec::Gbdt(GbdtParams {
            rounds: 10,
            ..Default::default()
        });
        let (_, report) = train_stack(&samples(240), &[base.clone(), base.clone()], &base, 3, 5, "v").unwrap();
        assert!(report.stack_precision >= report.best_base() - 1e-9);
    }

    #[test]
    fn stack_with_oracle_feature_is_perfect() {
        let bases = [
            LearnerSpec::Forest(ForestParams {
                trees: 10,
                ..Default::default()
            }),
            LearnerSpec::Mlp(MlpParams {
                epochs: 5,
                ..Default::default()
            }),
        ];
        let meta = LearnerSpec::Gbdt(GbdtParams {
            rounds: 10,
            ..Default::default()
        });
        let data = samples(120);
        let (model, report) = train_stack(&data, &bases, &meta, 3, 2, "v").unwrap();
        assert_eq!(report.stack_precision, 1.0);
        for s in &data {
            let p = model.score(s.features.as_ref().unwrap()).unwrap();
            assert_eq!(p > 0.5, s.label == Some(1));
        }
        let scored = predict_stack(&model, &data).unwrap();
        assert_eq!(scored.len(), data.len());
        assert!(predict_stack(&model, &[]).unwrap().is_empty());
        let mut rev = data.clone();
        rev.reverse();
        assert_eq!(predict_stack(&model, &rev).unwrap(), scored);
        let mut bad = data[0].clone();
        bad.features = Some(vec![1.0]);
        assert!(matches!(
            predict_stack(&model, &[bad]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rank_groups_cover_both_endpoints() {
        let mut s1 = PairSample::unlabeled(pair("a", "b"));
        s1.features = Some(vec![1.0]);
        let mut s2 = PairSample::unlabeled(pair("a", "c"));
        s2.features = Some(vec![2.0]);
        let gold: BTreeSet<Pair> = [pair("a", "b")].into();
        let groups = build_rank_groups(&[s1.clone()], None).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].candidates[0].0, uid("b"));
        assert_eq!(groups[1].candidates[0].0, uid("a"));
        let groups = build_rank_groups(&[s1, s2], Some(&gold)).unwrap();
        assert_eq!(groups[0].candidates.len(), 2);
        let relevant: usize = groups
            .iter()
            .flat_map(|g| &g.candidates)
            .filter(|c| c.2 == Some(1))
            .count();
        assert_eq!(relevant, 2);
    }

    #[test]
    fn rank_training_ignores_candidate_order() {
        let mk = |c: &str, f: f64, r: u8| (uid(c), vec![f, f * f], Some(r));
        let g = RankGroup {
            query: uid("q"),
            candidates: vec![mk("p", 3.0, 1), mk("x", 1.0, 0), mk("y", 2.0, 0), mk("z", 0.5, 0)],
        };
        let mut shuffled = g.clone();
        shuffled.candidates.reverse();
        let params = GbdtParams {
            rounds: 8,
            min_leaf: 1,
            ..Default::default()
        };
        let a = train_rank(std::slice::from_ref(&g), &params).unwrap();
        let b = train_rank(&[shuffled], &params).unwrap();
        assert_eq!(a, b);
        let s: Vec<f64> = g.candidates.iter().map(|c| a.score_unchecked(&c.1)).collect();
        assert!(s[1..].iter().all(|&v| v < s[0]));
    }

    #[test]
    fn rank1_cases() {
        let t = [sp("a", "b", 0.3), sp("c", "d", 0.9), sp("e", "f", 0.5)];
        assert_eq!(select_rank1(&t, 2), vec![pair("c", "d"), pair("e", "f")]);
        assert_eq!(select_rank1(&t, 10).len(), 3);
        let dup = [sp("a", "b", 0.3), sp("b", "a", 0.9), sp("c", "d", 0.5)];
        assert_eq!(select_rank1(&dup, 1), vec![pair("a", "b")]);
        assert_eq!(select_rank1(&dup, 5).len(), 2);
    }

    #[test]
    fn rank2_hand_trace() {
        let t = [sp("a", "b", 0.9), sp("a", "c", 0.8), sp("b", "c", 0.7)];
        assert_eq!(select_rank2(&t, 2, DEFAULT_K_MAX), vec![pair("a", "b"), pair("a", "c")]);
        assert_eq!(select_rank2(&t[..1], 5, DEFAULT_K_MAX), vec![pair("a", "b")]);
    }

    #[test]
    fn rank2_caps_degree() {
        let t: Vec<ScoredPair> = (0..60)
            .map(|i| sp("u", &format!("v{i:02}"), 1.0 - i as f64 / 100.0))
            .collect();
        assert_eq!(select_rank2(&t, 100, DEFAULT_K_MAX).len(), 51);
        assert_eq!(select_rank2(&t, 100, 3).len(), 3);
    }

    #[test]
    fn component_cases() {
        assert_eq!(component_histogram(&[pair("a", "b"), pair("b", "c")]), [(3, 1)].into());
        assert_eq!(component_histogram(&[pair("a", "b"), pair("c", "d")]), [(2, 2)].into());
        assert!(component_histogram(&[]).is_empty());
    }

    proptest! {
        #[test]
        fn selections_are_valid(raw in prop::collection::vec((0u8..6, 0u8..6, 0u32..5), 0..20), n in 0usize..12) {
            let triples: Vec<ScoredPair> = raw
                .iter()
                .filter(|(a, b, _)| a != b)
                .map(|&(a, b, w)| sp(&format!("u{a}"), &format!("u{b}"), f64::from(w)))
                .collect();
            let distinct: BTreeSet<&Pair> = triples.iter().map(|t| &t.pair).collect();
            for out in [select_rank1(&triples, n), select_rank2(&triples, n, DEFAULT_K_MAX)] {
                let set: BTreeSet<&Pair> = out.iter().collect();
                prop_assert_eq!(set.len(), out.len());
                prop_assert!(set.iter().all(|p| distinct.contains(p)));
                prop_assert_eq!(out.len(), n.min(distinct.len()));
            }
            let picked = select_rank2(&triples, n, 2);
            let mut degree: HashMap<&UserId, usize> = HashMap::new();
            for p in &picked {
                *degree.entry(p.a()).or_default() += 1;
                *degree.entry(p.b()).or_default() += 1;
            }
            prop_assert!(degree.values().all(|&d| d <= 2));
        }
    }
}
