//! Stage implementations shared by the command-line tool and the in-memory
//! experiment runner.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;

use log::info;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::candidates::{build_indices, generate_prediction_pairs, sample_negatives};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{linear_grid, prf, sharing_report, sweep_prefixes, tv_distance, PrfReport, SharingReport, Sweep};
use crate::features::{read_embeddings, train_topic_models, FeatureRegistry, Featurizer};
use crate::ingest::{build_profile_store, ProfileStore};
use crate::learners::GbdtModel;
use crate::matcher::{
    build_rank_groups, component_histogram, predict_stack, score_samples, select_rank1, select_rank2, train_rank,
    train_stack, StackModel, StackReport,
};
use crate::rng::{derive_seed, StageRng};
use crate::synthgen::generate_world;
use crate::types::{Pair, PairSample, ScoredPair, UserId};

pub mod files {
    pub const EVENTS: &str = "events.jsonl";
    pub const MATCHES_TRAIN: &str = "matches_train.tsv";
    pub const MATCHES_TEST: &str = "matches_test.tsv";
    pub const TEST_USERS: &str = "test_users.txt";
    pub const TRAIN_PAIRS: &str = "train_pairs.tsv";
    pub const RANK_PAIRS: &str = "rank_pairs.tsv";
    pub const PREDICT_PAIRS: &str = "predict_pairs.tsv";
    pub const REGISTRY: &str = "registry.txt";
    pub const TRAIN_FEATURES: &str = "train_features.tsv";
    pub const RANK_FEATURES: &str = "rank_features.tsv";
    pub const PREDICT_FEATURES: &str = "predict_features.tsv";
    pub const MODEL_CLF: &str = "model_clf.json";
    pub const STACK_REPORT: &str = "stack_report.json";
    pub const MODEL_RANK: &str = "model_rank.json";
    pub const SCORED: &str = "scored.tsv";
    pub const PREDICTIONS: &str = "predictions.tsv";
    pub const PREDICTION_META: &str = "prediction.json";
    pub const REPORT: &str = "report.json";
    pub const HIST_TRAIN: &str = "components_train.tsv";
    pub const HIST_PREDICTIONS: &str = "components_predictions.tsv";
    pub const SHARING: &str = "sharing.json";
}

/// Labeled and unlabeled pair sets feeding the learners.
#[derive(Debug, Clone, Default)]
pub struct CandidateSets {
    /// Training matches plus sampled negatives.
    pub train: Vec<PairSample>,
    /// Blocked pairs among training users, labeled by the training matches.
    pub rank: Vec<PairSample>,
    /// Blocked pairs among test users.
    pub predict: Vec<PairSample>,
    pub raw_negatives: usize,
}

pub fn max_df_for(cfg: &RunConfig, n_users: usize) -> usize {
    ((cfg.candidates.max_df_fraction * n_users as f64).ceil() as usize).max(2)
}

pub fn build_candidates(
    cfg: &RunConfig,
    profiles: &ProfileStore,
    train_matches: &[Pair],
    test_users: &BTreeSet<UserId>,
) -> Result<CandidateSets> {
    let max_df = max_df_for(cfg, profiles.len());
    let (fact_idx, dom_idx) = build_indices(profiles, Some(max_df));
    let train_users: BTreeSet<UserId> = profiles.users().filter(|u| !test_users.contains(*u)).cloned().collect();
    let negatives = sample_negatives(
        train_matches,
        &train_users,
        &fact_idx,
        &dom_idx,
        derive_seed(cfg.seed, "negatives"),
        cfg.candidates.negatives_per_side,
    )?;
    let mut train: Vec<PairSample> = train_matches
        .iter()
        .map(|p| PairSample::labeled(p.clone(), 1))
        .collect();
    train.extend(negatives.samples);
    train.sort_by(|a, b| a.pair.cmp(&b.pair));

    let gold: BTreeSet<&Pair> = train_matches.iter().collect();
    let rank_pairs = thin_negatives(
        generate_prediction_pairs(&train_users, &fact_idx, &dom_idx),
        &gold,
        cfg.candidates.rank_negatives_per_user,
        derive_seed(cfg.seed, "rank-negatives"),
    );
    let rank = rank_pairs
        .into_iter()
        .map(|p| {
            let label = u8::from(gold.contains(&p));
            PairSample::labeled(p, label)
        })
        .collect::<Vec<_>>();
    let predict: Vec<PairSample> = generate_prediction_pairs(test_users, &fact_idx, &dom_idx)
        .into_iter()
        .map(PairSample::unlabeled)
        .collect();
    info!(
        "candidates: max_df {max_df}, {} training samples ({} raw negatives), {} rank pairs, {} prediction pairs",
        train.len(),
        negatives.raw.len(),
        rank.len(),
        predict.len()
    );
    Ok(CandidateSets {
        train,
        rank,
        predict,
        raw_negatives: negatives.raw.len(),
    })
}

/// Keeps every gold pair and, per user, a seeded sample of at most `per_user`
/// non-gold pairs; a pair survives if either endpoint samples it.
pub fn thin_negatives(pairs: Vec<Pair>, gold: &BTreeSet<&Pair>, per_user: usize, seed: u64) -> Vec<Pair> {
    if per_user == 0 {
        return pairs;
    }
    let mut by_user: BTreeMap<&UserId, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        if !gold.contains(p) {
            by_user.entry(p.a()).or_default().push(i);
            by_user.entry(p.b()).or_default().push(i);
        }
    }
    let mut keep: Vec<bool> = pairs.iter().map(|p| gold.contains(p)).collect();
    for (user, idx) in &by_user {
        let mut rng = StageRng::seed_from_u64(derive_seed(seed, user.as_str()));
        for &i in idx.choose_multiple(&mut rng, per_user) {
            keep[i] = true;
        }
    }
    pairs
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect()
}

/// Fits the topic models and fills in features for every set.
pub fn featurize_sets(
    cfg: &RunConfig,
    profiles: &ProfileStore,
    sets: CandidateSets,
) -> Result<(FeatureRegistry, CandidateSets)> {
    let registry = FeatureRegistry::standard(cfg.features.embedding);
    let topics = train_topic_models(profiles, &cfg.lda)?;
    let embeddings = if cfg.features.embedding {
        let f = File::open(&cfg.features.embedding_path)?;
        Some(read_embeddings(BufReader::new(f))?)
    } else {
        None
    };
    let featurizer = Featurizer::new(profiles, registry.clone(), Some(&topics), embeddings)?;
    let out = CandidateSets {
        train: featurizer.featurize_samples(sets.train)?,
        rank: featurizer.featurize_samples(sets.rank)?,
        predict: featurizer.featurize_samples(sets.predict)?,
        raw_negatives: sets.raw_negatives,
    };
    info!(
        "features: {} per pair ({}), {} pairs featurized",
        registry.len(),
        registry.version(),
        out.train.len() + out.rank.len() + out.predict.len()
    );
    Ok((registry, out))
}

pub fn train_classifier(
    cfg: &RunConfig,
    train: &[PairSample],
    registry: &FeatureRegistry,
) -> Result<(StackModel, StackReport)> {
    train_stack(
        train,
        &cfg.base_specs(),
        &cfg.meta_spec(),
        cfg.stack.folds,
        derive_seed(cfg.seed, "stack"),
        registry.version(),
    )
}

pub fn train_ranker(cfg: &RunConfig, rank: &[PairSample]) -> Result<GbdtModel> {
    let gold: BTreeSet<Pair> = rank
        .iter()
        .filter(|s| s.label == Some(1))
        .map(|s| s.pair.clone())
        .collect();
    let groups = build_rank_groups(rank, Some(&gold))?;
    train_rank(&groups, &cfg.rank)
}

/// Expected number of test matches if the test graph is as dense as the
/// training graph.
pub fn auto_top_n(n_test_users: usize, n_train_matches: usize, n_train_users: usize) -> usize {
    if n_train_users == 0 {
        return 0;
    }
    (n_test_users as f64 * n_train_matches as f64 / n_train_users as f64).round() as usize
}

/// Selection order for `mode` over descending scores, truncated to `n`.
pub fn select(mode: Mode, scored: &[ScoredPair], n: usize, k_max: usize) -> Vec<Pair> {
    match mode {
        Mode::Clf | Mode::Rank1 => select_rank1(scored, n),
        Mode::Rank2 => select_rank2(scored, n, k_max),
    }
}

/// Selected pairs with their weights, in selection order.
pub fn selected_with_weights(selected: &[Pair], scored: &[ScoredPair]) -> Vec<ScoredPair> {
    let mut weight: BTreeMap<&Pair, f64> = BTreeMap::new();
    for s in scored {
        let w = weight.entry(&s.pair).or_insert(s.weight);
        *w = w.max(s.weight);
    }
    selected
        .iter()
        .map(|p| ScoredPair {
            pair: p.clone(),
            weight: weight[p],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: Mode,
    pub top_n: usize,
    pub prf: PrfReport,
    pub sweep: Sweep,
    pub tv_distance_to_train: f64,
    pub components_predictions: BTreeMap<usize, usize>,
    pub components_train: BTreeMap<usize, usize>,
    pub sharing_test_gold: Option<SharingReport>,
}

pub struct EvalInputs<'a> {
    pub mode: Mode,
    pub top_n: usize,
    pub scored: &'a [ScoredPair],
    pub gold: &'a BTreeSet<Pair>,
    pub train_matches: &'a [Pair],
    pub profiles: Option<&'a ProfileStore>,
}

pub fn evaluate(cfg: &RunConfig, inputs: &EvalInputs<'_>) -> Result<Report> {
    if inputs.gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let n = inputs.top_n;
    let ordered = select(inputs.mode, inputs.scored, usize::MAX, cfg.predict.k_max);
    let predictions: Vec<Pair> = ordered.iter().take(n).cloned().collect();
    let lo = (n as f64 * cfg.predict.sweep_min).round() as usize;
    let hi = (n as f64 * cfg.predict.sweep_max).round() as usize;
    let grid = linear_grid(lo, hi, cfg.predict.sweep_steps, &[n, inputs.gold.len()]);
    let sweep = sweep_prefixes(&ordered, inputs.gold, &grid)?;
    let components_predictions = component_histogram(&predictions);
    let components_train = component_histogram(inputs.train_matches);
    let gold: Vec<Pair> = inputs.gold.iter().cloned().collect();
    Ok(Report {
        mode: inputs.mode,
        top_n: n,
        prf: prf(&predictions, inputs.gold)?,
        sweep,
        tv_distance_to_train: tv_distance(&components_predictions, &components_train),
        components_predictions,
        components_train,
        sharing_test_gold: inputs.profiles.map(|p| sharing_report(&gold, p)).transpose()?,
    })
}

/// Everything one synthetic run produces, kept in memory.
pub struct Experiment {
    pub config: RunConfig,
    pub profiles: ProfileStore,
    pub train_matches: Vec<Pair>,
    pub test_gold: BTreeSet<Pair>,
    pub n_test_users: usize,
    pub n_train_users: usize,
    pub sets: CandidateSets,
    pub registry: FeatureRegistry,
    pub stack: StackModel,
    pub stack_report: StackReport,
    pub ranker: GbdtModel,
    pub clf_scored: Vec<ScoredPair>,
    pub rank_scored: Vec<ScoredPair>,
    pub gold_sharing: SharingReport,
}

impl Experiment {
    pub fn default_top_n(&self) -> usize {
        if self.config.predict.top_n > 0 {
            self.config.predict.top_n
        } else {
            auto_top_n(self.n_test_users, self.train_matches.len(), self.n_train_users)
        }
    }

    pub fn scored(&self, mode: Mode) -> &[ScoredPair] {
        match mode {
            Mode::Clf => &self.clf_scored,
            Mode::Rank1 | Mode::Rank2 => &self.rank_scored,
        }
    }

    pub fn report(&self, mode: Mode, top_n: usize) -> Result<Report> {
        evaluate(
            &self.config,
            &EvalInputs {
                mode,
                top_n,
                scored: self.scored(mode),
                gold: &self.test_gold,
                train_matches: &self.train_matches,
                profiles: None,
            },
        )
    }
}

/// Synthesizes a world and runs every stage in memory.
pub fn run_experiment(cfg: &RunConfig) -> Result<Experiment> {
    let world = generate_world(&cfg.world)?;
    let profiles = build_profile_store(&world.events);
    let all_gold: Vec<Pair> = world.train_matches.iter().chain(&world.test_matches).cloned().collect();
    let gold_sharing = sharing_report(&all_gold, &profiles)?;
    let sets = build_candidates(cfg, &profiles, &world.train_matches, &world.test_users)?;
    let (registry, sets) = featurize_sets(cfg, &profiles, sets)?;
    let (stack, stack_report) = train_classifier(cfg, &sets.train, &registry)?;
    let ranker = train_ranker(cfg, &sets.rank)?;
    let clf_scored = predict_stack(&stack, &sets.predict)?;
    let rank_scored = score_samples(&ranker, &sets.predict)?;
    let n_train_users = profiles.len() - world.test_users.len();
    Ok(Experiment {
        config: cfg.clone(),
        train_matches: world.train_matches,
        test_gold: world.test_matches.into_iter().collect(),
        n_test_users: world.test_users.len(),
        n_train_users,
        profiles,
        sets,
        registry,
        stack,
        stack_report,
        ranker,
        clf_scored,
        rank_scored,
        gold_sharing,
    })
}
