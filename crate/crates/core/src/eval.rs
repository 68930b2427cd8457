//! Precision/recall/F1, top-N sweeps, sharing statistics and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::similarity::shared_keys;
use crate::ingest::ProfileStore;
use crate::types::{Pair, ScoredPair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub n_predicted: usize,
    pub n_gold: usize,
    pub n_correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfReport {
    fn from_counts(n_predicted: usize, n_gold: usize, n_correct: usize) -> Self {
        let precision = if n_predicted == 0 {
            0.0
        } else {
            n_correct as f64 / n_predicted as f64
        };
        let recall = n_correct as f64 / n_gold as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            n_predicted,
            n_gold,
            n_correct,
            precision,
            recall,
            f1,
        }
    }
}

pub fn prf(predicted: &[Pair], gold: &BTreeSet<Pair>) -> Result<PrfReport> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let distinct: BTreeSet<&Pair> = predicted.iter().collect();
    let correct = distinct.iter().filter(|p| gold.contains(**p)).count();
    Ok(PrfReport::from_counts(distinct.len(), gold.len(), correct))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<(usize, PrfReport)>,
    /// Grid value with the highest F1; the smallest such N on ties.
    pub best_n: usize,
}

impl Sweep {
    pub fn best(&self) -> PrfReport {
        self.at(self.best_n).expect("best_n is on the grid")
    }

    pub fn at(&self, n: usize) -> Option<PrfReport> {
        self.rows.iter().find(|(m, _)| *m == n).map(|(_, r)| *r)
    }
}

/// Evaluates every prefix length in `grid` of an already ordered,
/// duplicate-free prediction list.
pub fn sweep_prefixes(ordered: &[Pair], gold: &BTreeSet<Pair>, grid: &[usize]) -> Result<Sweep> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let mut grid: Vec<usize> = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::EmptyInput);
    }
    // correct[i] = matches among the first i predictions.
    let mut seen = BTreeSet::new();
    let mut correct = Vec::with_capacity(ordered.len() + 1);
    let mut distinct = Vec::with_capacity(ordered.len() + 1);
    correct.push(0);
    distinct.push(0);
    for p in ordered {
        let new = seen.insert(p);
        distinct.push(distinct.last().unwrap() + usize::from(new));
        correct.push(correct.last().unwrap() + usize::from(new && gold.contains(p)));
    }
    let rows: Vec<(usize, PrfReport)> = grid
        .into_iter()
        .map(|n| {
            let i = n.min(ordered.len());
            (n, PrfReport::from_counts(distinct[i], gold.len(), correct[i]))
        })
        .collect();
    let mut best = 0;
    for (i, (_, r)) in rows.iter().enumerate() {
        if r.f1 > rows[best].1.f1 {
            best = i;
        }
    }
    Ok(Sweep {
        best_n: rows[best].0,
        rows,
    })
}

/// Top-N sweep over a descending score list.
pub fn sweep_n(scored: &[ScoredPair], gold: &BTreeSet<Pair>, grid: &[usize]) -> Result<Sweep> {
    if let Some(i) = scored.windows(2).position(|w| w[1].weight > w[0].weight) {
        return Err(Error::NotSorted(i + 1));
    }
    let ordered: Vec<Pair> = scored.iter().map(|s| s.pair.clone()).collect();
    sweep_prefixes(&ordered, gold, grid)
}

/// Evenly spaced grid from `lo` to `hi` (inclusive) with `extra` points added.
pub fn linear_grid(lo: usize, hi: usize, steps: usize, extra: &[usize]) -> Vec<usize> {
    let steps = steps.max(1);
    let mut grid: Vec<usize> = (0..=steps)
        .map(|i| lo + ((hi.saturating_sub(lo)) as f64 * i as f64 / steps as f64).round() as usize)
        .collect();
    grid.extend_from_slice(extra);
    grid.sort_unstable();
    grid.dedup();
    grid
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingReport {
    pub n_pairs: usize,
    pub fact_share_fraction: f64,
    pub domain_share_fraction: f64,
    /// Shared distinct facts -> number of pairs.
    pub shared_fact_histogram: BTreeMap<usize, usize>,
    pub shared_domain_histogram: BTreeMap<usize, usize>,
}

pub fn sharing_report(pairs: &[Pair], profiles: &ProfileStore) -> Result<SharingReport> {
    let mut facts = BTreeMap::new();
    let mut domains = BTreeMap::new();
    let (mut fact_sharing, mut domain_sharing) = (0, 0);
    for p in pairs {
        let (a, b) = (profiles.profile(p.a())?, profiles.profile(p.b())?);
        let f = shared_keys(&a.fact_counts, &b.fact_counts).len();
        let d = shared_keys(&a.domain_counts, &b.domain_counts).len();
        fact_sharing += usize::from(f > 0);
        domain_sharing += usize::from(d > 0);
        *facts.entry(f).or_insert(0) += 1;
        *domains.entry(d).or_insert(0) += 1;
    }
    let frac = |k: usize| {
        if pairs.is_empty() {
            0.0
        } else {
            k as f64 / pairs.len() as f64
        }
    };
    Ok(SharingReport {
        n_pairs: pairs.len(),
        fact_share_fraction: frac(fact_sharing),
        domain_share_fraction: frac(domain_sharing),
        shared_fact_histogram: facts,
        shared_domain_histogram: domains,
    })
}

/// Total-variation distance between two histograms, each normalized to a
/// distribution over its keys.
pub fn tv_distance(p: &BTreeMap<usize, usize>, q: &BTreeMap<usize, usize>) -> f64 {
    let sp: usize = p.values().sum();
    let sq: usize = q.values().sum();
    let norm = |count: usize, total: usize| if total == 0 { 0.0 } else { count as f64 / total as f64 };
    let keys: BTreeSet<&usize> = p.keys().chain(q.keys()).collect();
    0.5 * keys
        .into_iter()
        .map(|k| (norm(p.get(k).copied().unwrap_or(0), sp) - norm(q.get(k).copied().unwrap_or(0), sq)).abs())
        .sum::<f64>()
}

pub fn write_histogram_tsv<W: Write>(hist: &BTreeMap<usize, usize>, mut sink: W) -> Result<()> {
    writeln!(sink, "size\tcount")?;
    for (size, count) in hist {
        writeln!(sink, "{size}\t{count}")?;
    }
    Ok(())
}
