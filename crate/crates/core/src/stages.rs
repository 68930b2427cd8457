//! File-backed pipeline stages. Each stage reads its declared inputs from the
//! data and work directories and writes its declared outputs.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{sharing_report, write_histogram_tsv, SharingReport};
use crate::features::{read_feature_rows, write_feature_rows, FeatureRegistry};
use crate::ingest::{self, build_profile_store, EventStore, ProfileStore};
use crate::learners::{GbdtModel, ModelFile};
use crate::matcher::{score_samples, StackModel, StackReport};
use crate::pipeline::{
    auto_top_n, build_candidates, evaluate, featurize_sets, files, select, selected_with_weights, train_classifier,
    train_ranker, CandidateSets, EvalInputs, Report,
};
use crate::synthgen::generate_world;
use crate::types::{Pair, PairSample, ScoredPair, UserId};

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn data(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.data_dir.join(name)
}

fn work(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.work_dir.join(name)
}

pub fn load_events(cfg: &RunConfig) -> Result<EventStore> {
    ingest::parse_events(open(&data(cfg, files::EVENTS))?)
}

fn load_profiles(cfg: &RunConfig) -> Result<ProfileStore> {
    Ok(build_profile_store(&load_events(cfg)?))
}

fn load_pairs(path: &Path) -> Result<Vec<Pair>> {
    ingest::read_pairs(open(path)?)
}

fn load_test_users(cfg: &RunConfig) -> Result<BTreeSet<UserId>> {
    ingest::read_users(open(&data(cfg, files::TEST_USERS))?)
}

fn labeled(samples: &[PairSample]) -> Vec<(Pair, u8)> {
    samples.iter().map(|s| (s.pair.clone(), s.label.unwrap_or(0))).collect()
}

fn from_labeled(pairs: Vec<(Pair, u8)>) -> Vec<PairSample> {
    pairs.into_iter().map(|(p, l)| PairSample::labeled(p, l)).collect()
}

/// Mode and size of the last prediction, read back by `eval`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionMeta {
    pub mode: Mode,
    pub top_n: usize,
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let world = generate_world(&cfg.world)?;
    world.write_to(&cfg.paths.data_dir)?;
    info!(
        "synth: {} events, {} users ({} test), {} train matches, {} test matches",
        world.events.event_count(),
        world.events.user_count(),
        world.test_users.len(),
        world.train_matches.len(),
        world.test_matches.len()
    );
    Ok(())
}

pub fn candidates(cfg: &RunConfig) -> Result<CandidateSets> {
    let profiles = load_profiles(cfg)?;
    let train_matches = load_pairs(&data(cfg, files::MATCHES_TRAIN))?;
    let test_users = load_test_users(cfg)?;
    let sets = build_candidates(cfg, &profiles, &train_matches, &test_users)?;
    write_with(&work(cfg, files::TRAIN_PAIRS), |w| {
        ingest::write_labeled_pairs(&labeled(&sets.train), w)
    })?;
    write_with(&work(cfg, files::RANK_PAIRS), |w| {
        ingest::write_labeled_pairs(&labeled(&sets.rank), w)
    })?;
    let predict: Vec<Pair> = sets.predict.iter().map(|s| s.pair.clone()).collect();
    write_with(&work(cfg, files::PREDICT_PAIRS), |w| ingest::write_pairs(&predict, w))?;
    Ok(sets)
}

pub fn featurize(cfg: &RunConfig) -> Result<FeatureRegistry> {
    let profiles = load_profiles(cfg)?;
    let sets = CandidateSets {
        train: from_labeled(ingest::read_labeled_pairs(open(&work(cfg, files::TRAIN_PAIRS))?)?),
        rank: from_labeled(ingest::read_labeled_pairs(open(&work(cfg, files::RANK_PAIRS))?)?),
        predict: load_pairs(&work(cfg, files::PREDICT_PAIRS))?
            .into_iter()
            .map(PairSample::unlabeled)
            .collect(),
        raw_negatives: 0,
    };
    let (registry, sets) = featurize_sets(cfg, &profiles, sets)?;
    write_with(&work(cfg, files::REGISTRY), |w| registry.write(w))?;
    write_with(&work(cfg, files::TRAIN_FEATURES), |w| {
        write_feature_rows(&sets.train, w)
    })?;
    write_with(&work(cfg, files::RANK_FEATURES), |w| write_feature_rows(&sets.rank, w))?;
    write_with(&work(cfg, files::PREDICT_FEATURES), |w| {
        write_feature_rows(&sets.predict, w)
    })?;
    Ok(registry)
}

fn load_registry(cfg: &RunConfig) -> Result<FeatureRegistry> {
    FeatureRegistry::read(open(&work(cfg, files::REGISTRY))?)
}

fn load_features(cfg: &RunConfig, name: &str, registry: &FeatureRegistry) -> Result<Vec<PairSample>> {
    read_feature_rows(open(&work(cfg, name))?, registry.len())
}

pub fn train_clf(cfg: &RunConfig) -> Result<StackReport> {
    let registry = load_registry(cfg)?;
    let train = load_features(cfg, files::TRAIN_FEATURES, &registry)?;
    let (model, report) = train_classifier(cfg, &train, &registry)?;
    let file = ModelFile::new(model, registry.len(), registry.version());
    write_with(&work(cfg, files::MODEL_CLF), |w| file.write(w))?;
    write_json(&work(cfg, files::STACK_REPORT), &report)?;
    Ok(report)
}

pub fn train_rank(cfg: &RunConfig) -> Result<GbdtModel> {
    let registry = load_registry(cfg)?;
    let rank = load_features(cfg, files::RANK_FEATURES, &registry)?;
    let model = train_ranker(cfg, &rank)?;
    info!("train-rank: {} rounds on {} pairs", model.trees.len(), rank.len());
    let file = ModelFile::new(model, registry.len(), registry.version());
    write_with(&work(cfg, files::MODEL_RANK), |w| file.write(w))?;
    Ok(file.model)
}

fn check_model<T>(file: &ModelFile<T>, registry: &FeatureRegistry) -> Result<()> {
    if file.registry_version != registry.version() {
        return Err(Error::ModelFormat(format!(
            "model built for registry {}, features use {}",
            file.registry_version,
            registry.version()
        )));
    }
    Ok(())
}

/// Number of pairs to submit: the configured value, or the training graph
/// density applied to the test users.
pub fn resolve_top_n(cfg: &RunConfig) -> Result<usize> {
    if cfg.predict.top_n > 0 {
        return Ok(cfg.predict.top_n);
    }
    let events = load_events(cfg)?;
    let n_users = events.user_count();
    let test_users = load_test_users(cfg)?;
    let n_test = events.users().filter(|u| test_users.contains(*u)).count();
    let train_matches = load_pairs(&data(cfg, files::MATCHES_TRAIN))?;
    Ok(auto_top_n(n_test, train_matches.len(), n_users - n_test))
}

pub fn predict(cfg: &RunConfig) -> Result<Vec<ScoredPair>> {
    let registry = load_registry(cfg)?;
    let samples = load_features(cfg, files::PREDICT_FEATURES, &registry)?;
    let mode = cfg.predict.mode;
    let scored = match mode {
        Mode::Clf => {
            let file: ModelFile<StackModel> = ModelFile::read(open(&work(cfg, files::MODEL_CLF))?)?;
            check_model(&file, &registry)?;
            score_samples(&file.model, &samples)?
        }
        Mode::Rank1 | Mode::Rank2 => {
            let file: ModelFile<GbdtModel> = ModelFile::read(open(&work(cfg, files::MODEL_RANK))?)?;
            check_model(&file, &registry)?;
            score_samples(&file.model, &samples)?
        }
    };
    let top_n = resolve_top_n(cfg)?;
    let selected = select(mode, &scored, top_n, cfg.predict.k_max);
    let mut predictions = selected_with_weights(&selected, &scored);
    crate::types::sort_scored(&mut predictions);
    write_with(&work(cfg, files::SCORED), |w| ingest::write_scores_exact(&scored, w))?;
    write_with(&work(cfg, files::PREDICTIONS), |w| {
        ingest::write_scored_pairs(&predictions, w)
    })?;
    write_json(&work(cfg, files::PREDICTION_META), &PredictionMeta { mode, top_n })?;
    info!(
        "predict: mode {}, {} scored pairs, {} predictions",
        mode.as_str(),
        scored.len(),
        predictions.len()
    );
    Ok(predictions)
}

pub fn eval(cfg: &RunConfig) -> Result<Report> {
    let gold: BTreeSet<Pair> = load_pairs(&data(cfg, files::MATCHES_TEST))?.into_iter().collect();
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let meta: PredictionMeta = read_json(&work(cfg, files::PREDICTION_META))?;
    let scored = ingest::read_scored_pairs(open(&work(cfg, files::SCORED))?)?;
    let train_matches = load_pairs(&data(cfg, files::MATCHES_TRAIN))?;
    let profiles = load_profiles(cfg)?;
    let report = evaluate(
        cfg,
        &EvalInputs {
            mode: meta.mode,
            top_n: meta.top_n,
            scored: &scored,
            gold: &gold,
            train_matches: &train_matches,
            profiles: Some(&profiles),
        },
    )?;
    write_json(&work(cfg, files::REPORT), &report)?;
    write_with(&work(cfg, files::HIST_TRAIN), |w| {
        write_histogram_tsv(&report.components_train, w)
    })?;
    write_with(&work(cfg, files::HIST_PREDICTIONS), |w| {
        write_histogram_tsv(&report.components_predictions, w)
    })?;
    info!(
        "eval: mode {}, N {}, precision {:.4}, recall {:.4}, F1 {:.4}",
        report.mode.as_str(),
        report.top_n,
        report.prf.precision,
        report.prf.recall,
        report.prf.f1
    );
    Ok(report)
}

/// Sharing statistics of every ground-truth pair, plus a text summary of
/// whatever reports the work directory holds.
pub fn report(cfg: &RunConfig) -> Result<(SharingReport, String)> {
    let profiles = load_profiles(cfg)?;
    let mut gold = load_pairs(&data(cfg, files::MATCHES_TRAIN))?;
    gold.extend(load_pairs(&data(cfg, files::MATCHES_TEST))?);
    let sharing = sharing_report(&gold, &profiles)?;
    write_json(&work(cfg, files::SHARING), &sharing)?;

    let mut text = format!(
        "ground truth: {} pairs, {:.4} share a fact, {:.4} share a domain\n",
        sharing.n_pairs, sharing.fact_share_fraction, sharing.domain_share_fraction
    );
    let stack_path = work(cfg, files::STACK_REPORT);
    if stack_path.exists() {
        let stack: StackReport = read_json(&stack_path)?;
        for (name, p) in &stack.base_precision {
            text.push_str(&format!("layer 1 {name}: {p:.4}\n"));
        }
        text.push_str(&format!("layer 2 stack: {:.4}\n", stack.stack_precision));
    }
    let report_path = work(cfg, files::REPORT);
    if report_path.exists() {
        let r: Report = read_json(&report_path)?;
        text.push_str(&format!(
            "{} at N={}: precision {:.4} recall {:.4} F1 {:.4}\n",
            r.mode.as_str(),
            r.top_n,
            r.prf.precision,
            r.prf.recall,
            r.prf.f1
        ));
        text.push_str(&format!(
            "best swept N={}: F1 {:.4}\n",
            r.sweep.best_n,
            r.sweep.best().f1
        ));
        text.push_str(&format!(
            "component TV distance to training graph: {:.4}\n",
            r.tv_distance_to_train
        ));
    }
    Ok((sharing, text))
}
