//! Latent Dirichlet Allocation by collapsed Gibbs sampling, with fold-in
//! inference for per-user topic distributions.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, StageRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaParams {
    pub topics: usize,
    pub iterations: usize,
    /// Document-topic prior; `None` means `50 / topics`.
    pub alpha: Option<f64>,
    pub beta: f64,
    pub fold_in_iterations: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LdaParams {
    fn default() -> Self {
        Self {
            topics: 50,
            iterations: 200,
            alpha: None,
            beta: 0.01,
            fold_in_iterations: 40,
            seed: 0,
        }
    }
}

impl LdaParams {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.topics as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TopicModel {
    topics: usize,
    alpha: f64,
    beta: f64,
    vocab: HashMap<String, u32>,
    /// Word-major smoothed topic-word probabilities: `phi[w * topics + k]`.
    phi: Vec<f64>,
    fold_in_iterations: usize,
    fold_in_seed: u64,
}

impl TopicModel {
    pub fn topics(&self) -> usize {
        self.topics
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// P(word | topic); 0 for words outside the vocabulary.
    pub fn word_probability(&self, topic: usize, word: &str) -> f64 {
        self.vocab
            .get(word)
            .map_or(0.0, |&w| self.phi[w as usize * self.topics + topic])
    }

    pub fn topic_word_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.topics];
        for row in self.phi.chunks_exact(self.topics) {
            for (s, p) in sums.iter_mut().zip(row) {
                *s += p;
            }
        }
        sums
    }
}

fn expand_tokens<'a>(
    doc: &'a BTreeMap<String, u32>,
    lookup: impl Fn(&str) -> Option<u32> + 'a,
) -> impl Iterator<Item = u32> + 'a {
    doc.iter()
        .filter_map(move |(term, &count)| lookup(term).map(|w| (w, count)))
        .flat_map(|(w, count)| std::iter::repeat_n(w, count as usize))
}

fn sample_index(rng: &mut StageRng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("at least one topic");
    let u = rng.random::<f64>() * total;
    cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1)
}

pub fn lda_train(corpus: &[BTreeMap<String, u32>], params: &LdaParams) -> Result<TopicModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let k_topics = params.topics;
    if k_topics < 2 {
        return Err(Error::ConfigInvalid("LDA needs at least 2 topics".into()));
    }
    let alpha = params.alpha();
    let beta = params.beta;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::ConfigInvalid("LDA priors must be positive".into()));
    }

    let mut terms: Vec<&String> = corpus.iter().flat_map(|d| d.keys()).collect();
    terms.sort_unstable();
    terms.dedup();
    let vocab: HashMap<String, u32> = terms
        .iter()
        .enumerate()
        .map(|(i, t)| ((*t).clone(), i as u32))
        .collect();
    let v_size = vocab.len();

    let docs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|d| expand_tokens(d, |t| vocab.get(t).copied()).collect())
        .collect();

    let mut rng = StageRng::seed_from_u64(derive_seed(params.seed, "lda-train"));
    let mut doc_topic = vec![0u32; docs.len() * k_topics];
    let mut word_topic = vec![0u32; v_size * k_topics];
    let mut topic_total = vec![0u32; k_topics];
    let mut assignments: Vec<Vec<u32>> = Vec::with_capacity(docs.len());
    for (d, tokens) in docs.iter().enumerate() {
        let z: Vec<u32> = tokens
            .iter()
            .map(|&w| {
                let k = rng.random_range(0..k_topics);
                doc_topic[d * k_topics + k] += 1;
                word_topic[w as usize * k_topics + k] += 1;
                topic_total[k] += 1;
                k as u32
            })
            .collect();
        assignments.push(z);
    }

    let v_beta = v_size as f64 * beta;
    let mut cumulative = vec![0.0; k_topics];
    for _ in 0..params.iterations {
        for (d, tokens) in docs.iter().enumerate() {
            let dt = &mut doc_topic[d * k_topics..(d + 1) * k_topics];
            for (i, &w) in tokens.iter().enumerate() {
                let old = assignments[d][i] as usize;
                let wt = &mut word_topic[w as usize * k_topics..(w as usize + 1) * k_topics];
                dt[old] -= 1;
                wt[old] -= 1;
                topic_total[old] -= 1;
                let mut acc = 0.0;
                for k in 0..k_topics {
                    acc +=
                        (f64::from(dt[k]) + alpha) * (f64::from(wt[k]) + beta) / (f64::from(topic_total[k]) + v_beta);
                    cumulative[k] = acc;
                }
                let new = sample_index(&mut rng, &cumulative);
                dt[new] += 1;
                wt[new] += 1;
                topic_total[new] += 1;
                assignments[d][i] = new as u32;
            }
        }
    }

    let mut phi = vec![0.0; v_size * k_topics];
    for w in 0..v_size {
        for k in 0..k_topics {
            phi[w * k_topics + k] =
                (f64::from(word_topic[w * k_topics + k]) + beta) / (f64::from(topic_total[k]) + v_beta);
        }
    }
    Ok(TopicModel {
        topics: k_topics,
        alpha,
        beta,
        vocab,
        phi,
        fold_in_iterations: params.fold_in_iterations,
        fold_in_seed: derive_seed(params.seed, "lda-fold-in"),
    })
}

/// Posterior topic mixture of an unseen document under a fixed model.
///
/// Fold-in Gibbs sampling with topic-word probabilities frozen; the estimate
/// averages the second half of the sweeps. Every document starts from the
/// same seed, so equal documents get equal distributions.
pub fn topic_distribution(doc: &BTreeMap<String, u32>, model: &TopicModel) -> Vec<f64> {
    let k_topics = model.topics;
    let tokens: Vec<u32> = expand_tokens(doc, |t| model.vocab.get(t).copied()).collect();
    if tokens.is_empty() {
        return vec![1.0 / k_topics as f64; k_topics];
    }
    let mut rng = StageRng::seed_from_u64(model.fold_in_seed);
    let mut counts = vec![0u32; k_topics];
    let mut z: Vec<usize> = tokens
        .iter()
        .map(|_| {
            let k = rng.random_range(0..k_topics);
            counts[k] += 1;
            k
        })
        .collect();

    let sweeps = model.fold_in_iterations.max(2);
    let burn_in = sweeps / 2;
    let mut theta = vec![0.0; k_topics];
    let mut cumulative = vec![0.0; k_topics];
    let norm = tokens.len() as f64 + k_topics as f64 * model.alpha;
    for sweep in 0..sweeps {
        for (i, &w) in tokens.iter().enumerate() {
            counts[z[i]] -= 1;
            let row = &model.phi[w as usize * k_topics..(w as usize + 1) * k_topics];
            let mut acc = 0.0;
            for k in 0..k_topics {
                acc += (f64::from(counts[k]) + model.alpha) * row[k];
                cumulative[k] = acc;
            }
            let new = sample_index(&mut rng, &cumulative);
            counts[new] += 1;
            z[i] = new;
        }
        if sweep >= burn_in {
            for k in 0..k_topics {
                theta[k] += (f64::from(counts[k]) + model.alpha) / norm;
            }
        }
    }
    let total: f64 = theta.iter().sum();
    theta.iter_mut().for_each(|t| *t /= total);
    theta
}
