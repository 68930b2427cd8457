//! Pair features: fact, domain, title, topic, time and hybrid families.
//!
//! Every feature is a symmetric function of the two profiles. The ordered
//! list of features is fixed by a [`FeatureRegistry`]; its version string
//! encodes the feature count.

pub mod lda;
pub mod similarity;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::ProfileStore;
use crate::types::{canonical_pair, HourHistogram, Pair, PairSample, UserId, UserProfile, HOURS};
use lda::{lda_train, topic_distribution, LdaParams, TopicModel};
use similarity::*;

pub const REGISTRY_PREFIX: &str = "xdev-v1";
/// Topics above this probability count as present for the topic jaccard.
pub const TOPIC_PRESENCE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Fact,
    Domain,
    Title,
    Time,
    Hybrid,
    Topic,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::Fact => "fact",
            Family::Domain => "domain",
            Family::Title => "title",
            Family::Time => "time",
            Family::Hybrid => "hybrid",
            Family::Topic => "topic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "fact" => Family::Fact,
            "domain" => Family::Domain,
            "title" => Family::Title,
            "time" => Family::Time,
            "hybrid" => Family::Hybrid,
            "topic" => Family::Topic,
            _ => return None,
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every feature the extractor knows how to compute, in computation order.
const CATALOG: &[(&str, Family)] = &[
    ("fact_jaccard", Family::Fact),
    ("fact_overlap", Family::Fact),
    ("fact_tfidf_cosine", Family::Fact),
    ("domain_jaccard", Family::Domain),
    ("domain_overlap", Family::Domain),
    ("domain_tfidf_cosine", Family::Domain),
    ("title_jaccard", Family::Title),
    ("title_tfidf_cosine", Family::Title),
    ("fact_topic_hellinger", Family::Topic),
    ("fact_topic_cosine", Family::Topic),
    ("fact_topic_jaccard", Family::Topic),
    ("domain_topic_hellinger", Family::Topic),
    ("domain_topic_cosine", Family::Topic),
    ("domain_topic_jaccard", Family::Topic),
    ("day_jaccard", Family::Time),
    ("day_tfidf_cosine", Family::Time),
    ("hour_l1", Family::Time),
    ("hour_cosine", Family::Time),
    ("hour_circular_distance", Family::Time),
    ("time_missing", Family::Time),
    ("shared_fact_hour_cosine", Family::Hybrid),
    ("shared_domain_hour_cosine", Family::Hybrid),
    ("same_day_fact_jaccard", Family::Hybrid),
    ("shared_fact_count", Family::Hybrid),
    ("shared_fact_log_count", Family::Hybrid),
    ("shared_domain_count", Family::Hybrid),
    ("shared_domain_log_count", Family::Hybrid),
    ("embedding_cosine", Family::Fact),
];

const EMBEDDING_FEATURE: &str = "embedding_cosine";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSpec {
    pub name: String,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureRegistry {
    version: String,
    features: Vec<FeatureSpec>,
}

impl FeatureRegistry {
    /// The default feature set; the dense-embedding slot is opt-in.
    pub fn standard(with_embedding: bool) -> Self {
        let features: Vec<FeatureSpec> = CATALOG
            .iter()
            .filter(|(name, _)| with_embedding || *name != EMBEDDING_FEATURE)
            .map(|(name, family)| FeatureSpec {
                name: name.to_string(),
                family: *family,
            })
            .collect();
        Self::from_specs(features).expect("catalog names are unique")
    }

    pub fn from_specs(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for f in &features {
            let known = CATALOG.iter().any(|(n, fam)| *n == f.name && *fam == f.family);
            if !known {
                return Err(Error::ConfigInvalid(format!(
                    "unknown feature {} ({})",
                    f.name, f.family
                )));
            }
            if !seen.insert(f.name.clone()) {
                return Err(Error::ConfigInvalid(format!("duplicate feature {}", f.name)));
            }
        }
        let version = format!("{REGISTRY_PREFIX}/{}", features.len());
        Ok(Self { version, features })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureSpec] {
        &self.features
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }

    fn uses_family(&self, family: Family) -> bool {
        self.features.iter().any(|f| f.family == family)
    }

    fn uses(&self, name: &str) -> bool {
        self.features.iter().any(|f| f.name == name)
    }

    /// `# version <v>` followed by `name<TAB>family` lines.
    pub fn write<W: Write>(&self, mut sink: W) -> Result<()> {
        writeln!(sink, "# version {}", self.version)?;
        for f in &self.features {
            writeln!(sink, "{}\t{}", f.name, f.family)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(source: R) -> Result<Self> {
        let mut version = None;
        let mut specs = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let line = line?;
            let malformed = |reason: &str| Error::MalformedLine {
                line: i + 1,
                reason: reason.to_string(),
            };
            if let Some(v) = line.strip_prefix("# version ") {
                version = Some(v.to_string());
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let (name, family) = line
                .split_once('\t')
                .ok_or_else(|| malformed("expected name<TAB>family"))?;
            let family = Family::parse(family).ok_or_else(|| malformed("unknown family"))?;
            specs.push(FeatureSpec {
                name: name.to_string(),
                family,
            });
        }
        let registry = Self::from_specs(specs)?;
        match version {
            Some(v) if v == registry.version => Ok(registry),
            Some(v) => Err(Error::ConfigInvalid(format!(
                "registry version {v} does not match its {} features",
                registry.len()
            ))),
            None => Err(Error::ConfigInvalid("registry has no version line".into())),
        }
    }
}

fn hist_to_f64(h: &HourHistogram) -> [f64; HOURS] {
    let mut out = [0.0; HOURS];
    for (o, &c) in out.iter_mut().zip(h) {
        *o = f64::from(c);
    }
    out
}

fn day_bag(p: &UserProfile) -> BTreeMap<i64, u32> {
    p.day_set.iter().map(|&d| (d, 1)).collect()
}

/// Day-set and hour-of-day features. All zero, with the missing flag set,
/// when either profile has no events.
pub fn time_features(pu: &UserProfile, pv: &UserProfile, store: &ProfileStore) -> Vec<(&'static str, f64)> {
    if pu.is_empty() || pv.is_empty() {
        return vec![
            ("day_jaccard", 0.0),
            ("day_tfidf_cosine", 0.0),
            ("hour_l1", 0.0),
            ("hour_cosine", 0.0),
            ("hour_circular_distance", 0.0),
            ("time_missing", 1.0),
        ];
    }
    let (du, dv) = (day_bag(pu), day_bag(pv));
    let centroid_gap = circular_hour_distance(
        circular_centroid_hour(&pu.hour_histogram),
        circular_centroid_hour(&pv.hour_histogram),
    );
    vec![
        ("day_jaccard", bag_jaccard(&du, &dv)),
        (
            "day_tfidf_cosine",
            tfidf_cosine(&du, &dv, store.day_df(), store.n_docs().max(1)),
        ),
        ("hour_l1", normalized_l1(&pu.hour_histogram, &pv.hour_histogram)),
        (
            "hour_cosine",
            dense_cosine(&hist_to_f64(&pu.hour_histogram), &hist_to_f64(&pv.hour_histogram)),
        ),
        ("hour_circular_distance", centroid_gap),
        ("time_missing", 0.0),
    ]
}

fn summed_hours<'a>(hours: &'a BTreeMap<String, HourHistogram>, keys: &[&'a String]) -> [f64; HOURS] {
    let mut out = [0.0; HOURS];
    for k in keys {
        if let Some(h) = hours.get(*k) {
            for (o, &c) in out.iter_mut().zip(h) {
                *o += f64::from(c);
            }
        }
    }
    out
}

fn facts_on_days(p: &UserProfile, days: &BTreeSet<i64>) -> BTreeMap<String, ()> {
    days.iter()
        .filter_map(|d| p.per_day_facts.get(d))
        .flatten()
        .map(|f| (f.clone(), ()))
        .collect()
}

/// Time-conditioned features over the shared facts/domains and shared days.
pub fn hybrid_features(pu: &UserProfile, pv: &UserProfile) -> Vec<(&'static str, f64)> {
    let shared_facts = shared_keys(&pu.fact_counts, &pv.fact_counts);
    let shared_domains = shared_keys(&pu.domain_counts, &pv.domain_counts);
    let fact_hour_cos = dense_cosine(
        &summed_hours(&pu.per_fact_hours, &shared_facts),
        &summed_hours(&pv.per_fact_hours, &shared_facts),
    );
    let domain_hour_cos = dense_cosine(
        &summed_hours(&pu.per_domain_hours, &shared_domains),
        &summed_hours(&pv.per_domain_hours, &shared_domains),
    );
    let common_days: BTreeSet<i64> = pu.day_set.intersection(&pv.day_set).copied().collect();
    let same_day = bag_jaccard(&facts_on_days(pu, &common_days), &facts_on_days(pv, &common_days));
    let nf = shared_facts.len() as f64;
    let nd = shared_domains.len() as f64;
    vec![
        ("shared_fact_hour_cosine", fact_hour_cos),
        ("shared_domain_hour_cosine", domain_hour_cos),
        ("same_day_fact_jaccard", same_day),
        ("shared_fact_count", nf),
        ("shared_fact_log_count", nf.ln_1p()),
        ("shared_domain_count", nd),
        ("shared_domain_log_count", nd.ln_1p()),
    ]
}

fn topic_features(p: &[f64], q: &[f64]) -> [f64; 3] {
    [
        hellinger(p, q).expect("same topic count"),
        dense_cosine(p, q),
        thresholded_jaccard(p, q, TOPIC_PRESENCE),
    ]
}

#[derive(Debug, Clone)]
pub struct TopicModels {
    pub fact: TopicModel,
    pub domain: TopicModel,
}

/// Trains the fact and domain topic models over every profile in the store.
pub fn train_topic_models(store: &ProfileStore, params: &LdaParams) -> Result<TopicModels> {
    let fact_corpus: Vec<_> = store.iter().map(|(_, p)| p.fact_counts.clone()).collect();
    let domain_corpus: Vec<_> = store.iter().map(|(_, p)| p.domain_counts.clone()).collect();
    let domain_params = LdaParams {
        seed: crate::rng::derive_seed(params.seed, "domain"),
        ..params.clone()
    };
    let (fact, domain) = rayon::join(
        || lda_train(&fact_corpus, params),
        || lda_train(&domain_corpus, &domain_params),
    );
    Ok(TopicModels {
        fact: fact?,
        domain: domain?,
    })
}

/// Dense per-user vectors for the optional embedding feature.
pub type Embeddings = HashMap<UserId, Vec<f64>>;

/// `uid<TAB>v1,...,vD` per line.
pub fn read_embeddings<R: BufRead>(source: R) -> Result<Embeddings> {
    let mut out = HashMap::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let malformed = |reason: String| Error::MalformedLine { line: i + 1, reason };
        let (uid, values) = line
            .split_once('\t')
            .ok_or_else(|| malformed("expected uid<TAB>vector".into()))?;
        let vector = values
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| malformed(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        out.insert(UserId::new(uid).map_err(|e| malformed(e.to_string()))?, vector);
    }
    Ok(out)
}

pub struct Featurizer<'a> {
    store: &'a ProfileStore,
    registry: FeatureRegistry,
    /// Registry position -> catalog position.
    layout: Vec<usize>,
    fact_topics: HashMap<UserId, Vec<f64>>,
    domain_topics: HashMap<UserId, Vec<f64>>,
    embeddings: Option<Embeddings>,
}

impl<'a> Featurizer<'a> {
    pub fn new(
        store: &'a ProfileStore,
        registry: FeatureRegistry,
        topics: Option<&TopicModels>,
        embeddings: Option<Embeddings>,
    ) -> Result<Self> {
        let layout = registry
            .names()
            .map(|n| CATALOG.iter().position(|(c, _)| *c == n).expect("validated registry"))
            .collect();
        let (fact_topics, domain_topics) = if registry.uses_family(Family::Topic) {
            let models =
                topics.ok_or_else(|| Error::ConfigInvalid("registry has topic features but no topic models".into()))?;
            let users: Vec<(&UserId, &UserProfile)> = store.iter().collect();
            let fact = users
                .par_iter()
                .map(|(u, p)| ((*u).clone(), topic_distribution(&p.fact_counts, &models.fact)))
                .collect();
            let domain = users
                .par_iter()
                .map(|(u, p)| ((*u).clone(), topic_distribution(&p.domain_counts, &models.domain)))
                .collect();
            (fact, domain)
        } else {
            (HashMap::new(), HashMap::new())
        };
        if registry.uses(EMBEDDING_FEATURE) && embeddings.is_none() {
            return Err(Error::ConfigInvalid(
                "registry has the embedding feature but no vectors file".into(),
            ));
        }
        Ok(Self {
            store,
            registry,
            layout,
            fact_topics,
            domain_topics,
            embeddings,
        })
    }

    pub fn registry(&self) -> &FeatureRegistry {
        &self.registry
    }

    pub fn dimension(&self) -> usize {
        self.registry.len()
    }

    /// Cached topic mixture; uniform for profiles outside the store.
    fn topics_of(&self, user: &UserId, fact: bool) -> Vec<f64> {
        let cached = if fact { &self.fact_topics } else { &self.domain_topics };
        cached.get(user).cloned().unwrap_or_else(|| {
            let k = cached.values().next().map_or(1, Vec::len);
            vec![1.0 / k as f64; k]
        })
    }

    /// Full catalog vector for two profiles; symmetric in its arguments.
    pub fn pair_features(&self, pu: &UserProfile, pv: &UserProfile) -> Vec<f64> {
        let store = self.store;
        let mut named: Vec<(&'static str, f64)> = Vec::with_capacity(CATALOG.len());
        let mut push = |n: &'static str, v: f64| named.push((n, v));

        push("fact_jaccard", bag_jaccard(&pu.fact_counts, &pv.fact_counts));
        push("fact_overlap", overlap_coefficient(&pu.fact_counts, &pv.fact_counts));
        push(
            "fact_tfidf_cosine",
            tfidf_cosine(&pu.fact_counts, &pv.fact_counts, store.fact_df(), store.n_docs().max(1)),
        );
        push("domain_jaccard", bag_jaccard(&pu.domain_counts, &pv.domain_counts));
        push(
            "domain_overlap",
            overlap_coefficient(&pu.domain_counts, &pv.domain_counts),
        );
        push(
            "domain_tfidf_cosine",
            tfidf_cosine(
                &pu.domain_counts,
                &pv.domain_counts,
                store.domain_df(),
                store.n_docs().max(1),
            ),
        );
        push("title_jaccard", bag_jaccard(&pu.title_counts, &pv.title_counts));
        push(
            "title_tfidf_cosine",
            tfidf_cosine(
                &pu.title_counts,
                &pv.title_counts,
                store.title_df(),
                store.n_docs().max(1),
            ),
        );
        let topic_names = [
            ["fact_topic_hellinger", "fact_topic_cosine", "fact_topic_jaccard"],
            ["domain_topic_hellinger", "domain_topic_cosine", "domain_topic_jaccard"],
        ];
        for (fact, names) in [true, false].into_iter().zip(topic_names) {
            let values = if self.registry.uses_family(Family::Topic) {
                topic_features(&self.topics_of(&pu.user, fact), &self.topics_of(&pv.user, fact))
            } else {
                [0.0; 3]
            };
            for (n, v) in names.into_iter().zip(values) {
                push(n, v);
            }
        }
        for (n, v) in time_features(pu, pv, store) {
            push(n, v);
        }
        for (n, v) in hybrid_features(pu, pv) {
            push(n, v);
        }
        let embedding = match &self.embeddings {
            Some(e) => match (e.get(&pu.user), e.get(&pv.user)) {
                (Some(x), Some(y)) if x.len() == y.len() => dense_cosine(x, y),
                _ => 0.0,
            },
            None => 0.0,
        };
        push(EMBEDDING_FEATURE, embedding);

        debug_assert!(named.iter().zip(CATALOG).all(|((n, _), (c, _))| n == c));
        named.into_iter().map(|(_, v)| v).collect()
    }

    pub fn featurize_profiles(&self, pu: &UserProfile, pv: &UserProfile) -> Vec<f64> {
        let all = self.pair_features(pu, pv);
        self.layout.iter().map(|&i| all[i]).collect()
    }

    pub fn featurize_pair(&self, pair: &Pair) -> Result<Vec<f64>> {
        let pu = self.store.profile(pair.a())?;
        let pv = self.store.profile(pair.b())?;
        Ok(self.featurize_profiles(pu, pv))
    }

    /// Attaches feature vectors to every sample, preserving order.
    pub fn featurize_samples(&self, samples: Vec<PairSample>) -> Result<Vec<PairSample>> {
        samples
            .into_par_iter()
            .map(|mut s| {
                s.features = Some(self.featurize_pair(&s.pair)?);
                Ok(s)
            })
            .collect()
    }
}

/// `uid1<TAB>uid2<TAB>label_or_dash<TAB>f1,...,fM`.
pub fn write_feature_rows<W: Write>(samples: &[PairSample], mut sink: W) -> Result<()> {
    for s in samples {
        let label = s.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        write!(sink, "{}\t{}\t{}\t", s.pair.a(), s.pair.b(), label)?;
        if let Some(features) = &s.features {
            for (i, v) in features.iter().enumerate() {
                if i > 0 {
                    sink.write_all(b",")?;
                }
                write!(sink, "{v}")?;
            }
        }
        sink.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_feature_rows<R: BufRead>(source: R, dimension: usize) -> Result<Vec<PairSample>> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let line_no = i + 1;
        let malformed = |reason: String| Error::MalformedLine { line: line_no, reason };
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(malformed(format!("expected 4 fields, got {}", parts.len())));
        }
        let a = UserId::new(parts[0]).map_err(|e| malformed(e.to_string()))?;
        let b = UserId::new(parts[1]).map_err(|e| malformed(e.to_string()))?;
        let label = match parts[2] {
            "-" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return Err(malformed(format!("bad label {other:?}"))),
        };
        let features = parts[3]
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|e| malformed(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if features.len() != dimension {
            return Err(Error::DimensionMismatch {
                expected: dimension,
                got: features.len(),
            });
        }
        out.push(PairSample {
            pair: canonical_pair(a, b)?,
            label,
            features: Some(features),
        });
    }
    Ok(out)
}
