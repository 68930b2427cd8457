//! Exact shared-term blocking.
//!
//! Two users are related when they share at least one indexed fact or domain.
//! Prediction pairs are all related test-user pairs; negatives for training
//! are drawn from the related lists of the users of each positive pair.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::ProfileStore;
use crate::rng::stage_rng;
use crate::types::{canonical_pair, Pair, PairSample, UserId};

/// Redraws from a related list before falling back to the global pool.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexNamespace {
    Fact,
    Domain,
}

#[derive(Debug, Clone)]
pub struct InvertedIndex {
    namespace: IndexNamespace,
    users: Arc<[UserId]>,
    terms: Vec<String>,
    postings: Vec<Vec<u32>>,
    user_terms: Vec<Vec<u32>>,
    max_df: Option<usize>,
}

impl InvertedIndex {
    pub fn namespace(&self) -> IndexNamespace {
        self.namespace
    }

    pub fn max_df(&self) -> Option<usize> {
        self.max_df
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(String::as_str)
    }

    /// Users holding `term`, in id order. `None` if the term is absent or pruned.
    pub fn postings(&self, term: &str) -> Option<Vec<&UserId>> {
        let t = self.terms.binary_search_by(|x| x.as_str().cmp(term)).ok()?;
        Some(self.postings[t].iter().map(|&u| &self.users[u as usize]).collect())
    }

    pub fn user_index(&self, user: &UserId) -> Option<u32> {
        self.users.binary_search(user).ok().map(|i| i as u32)
    }

    fn require_user(&self, user: &UserId) -> Result<u32> {
        self.user_index(user)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    fn same_users(&self, other: &InvertedIndex) -> bool {
        Arc::ptr_eq(&self.users, &other.users) || self.users == other.users
    }
}

pub fn build_index(profiles: &ProfileStore, namespace: IndexNamespace, max_df: Option<usize>) -> InvertedIndex {
    build_index_shared(profiles, namespace, max_df, profiles.users().cloned().collect())
}

/// Fact and domain indices over the same store, sharing one user table.
pub fn build_indices(profiles: &ProfileStore, max_df: Option<usize>) -> (InvertedIndex, InvertedIndex) {
    let users: Arc<[UserId]> = profiles.users().cloned().collect();
    (
        build_index_shared(profiles, IndexNamespace::Fact, max_df, users.clone()),
        build_index_shared(profiles, IndexNamespace::Domain, max_df, users),
    )
}

fn build_index_shared(
    profiles: &ProfileStore,
    namespace: IndexNamespace,
    max_df: Option<usize>,
    users: Arc<[UserId]>,
) -> InvertedIndex {
    let mut by_term: HashMap<&str, Vec<u32>> = HashMap::new();
    for (i, (_, profile)) in profiles.iter().enumerate() {
        let keys: Box<dyn Iterator<Item = &String>> = match namespace {
            IndexNamespace::Fact => Box::new(profile.fact_counts.keys()),
            IndexNamespace::Domain => Box::new(profile.domain_counts.keys()),
        };
        for term in keys {
            by_term.entry(term.as_str()).or_default().push(i as u32);
        }
    }
    let mut kept: Vec<(&str, Vec<u32>)> = by_term
        .into_iter()
        .filter(|(_, p)| max_df.is_none_or(|cap| p.len() <= cap))
        .collect();
    kept.sort_unstable_by(|a, b| a.0.cmp(b.0));

    let mut user_terms = vec![Vec::new(); users.len()];
    let mut terms = Vec::with_capacity(kept.len());
    let mut postings = Vec::with_capacity(kept.len());
    for (t, (term, posting)) in kept.into_iter().enumerate() {
        // Profiles iterate in id order and each term appears once per profile,
        // so postings are already sorted and unique.
        for &u in &posting {
            user_terms[u as usize].push(t as u32);
        }
        terms.push(term.to_string());
        postings.push(posting);
    }
    InvertedIndex {
        namespace,
        users,
        terms,
        postings,
        user_terms,
        max_df,
    }
}

fn related_indices(u: u32, fact_idx: &InvertedIndex, dom_idx: &InvertedIndex) -> Vec<u32> {
    let mut out: Vec<u32> = [fact_idx, dom_idx]
        .iter()
        .flat_map(|idx| {
            idx.user_terms[u as usize]
                .iter()
                .flat_map(|&t| idx.postings[t as usize].iter().copied())
        })
        .filter(|&v| v != u)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// L(u): users sharing at least one indexed fact or domain with `u`.
pub fn related_users(
    user: &UserId,
    fact_idx: &InvertedIndex,
    dom_idx: &InvertedIndex,
    restrict_to: Option<&BTreeSet<UserId>>,
) -> Result<BTreeSet<UserId>> {
    assert!(fact_idx.same_users(dom_idx), "indices built over different stores");
    let u = fact_idx.require_user(user)?;
    Ok(related_indices(u, fact_idx, dom_idx)
        .into_iter()
        .map(|v| &fact_idx.users[v as usize])
        .filter(|v| restrict_to.is_none_or(|r| r.contains(*v)))
        .cloned()
        .collect())
}

/// All related pairs among `test_users`, sorted and deduplicated.
pub fn generate_prediction_pairs(
    test_users: &BTreeSet<UserId>,
    fact_idx: &InvertedIndex,
    dom_idx: &InvertedIndex,
) -> Vec<Pair> {
    assert!(fact_idx.same_users(dom_idx), "indices built over different stores");
    let users = &fact_idx.users;
    let in_test: Vec<bool> = users.iter().map(|u| test_users.contains(u)).collect();

    let mut pairs: Vec<(u32, u32)> = [fact_idx, dom_idx]
        .par_iter()
        .flat_map(|idx| idx.postings.par_iter())
        .flat_map_iter(|posting| {
            let members: Vec<u32> = posting.iter().copied().filter(|&u| in_test[u as usize]).collect();
            let mut local = Vec::with_capacity(members.len() * members.len().saturating_sub(1) / 2);
            for (i, &x) in members.iter().enumerate() {
                for &y in &members[i + 1..] {
                    local.push((x, y));
                }
            }
            local
        })
        .collect();
    pairs.par_sort_unstable();
    pairs.dedup();
    pairs
        .into_iter()
        .map(|(x, y)| canonical_pair(users[x as usize].clone(), users[y as usize].clone()).expect("distinct users"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct NegativeSampling {
    /// Every draw, `2 * per_side` per positive, in draw order.
    pub raw: Vec<Pair>,
    /// Distinct negatives not equal to any positive, sorted.
    pub samples: Vec<PairSample>,
}

/// Draws `per_side` negatives for each user of every training match.
pub fn sample_negatives(
    train_matches: &[Pair],
    train_users: &BTreeSet<UserId>,
    fact_idx: &InvertedIndex,
    dom_idx: &InvertedIndex,
    seed: u64,
    per_side: usize,
) -> Result<NegativeSampling> {
    assert!(fact_idx.same_users(dom_idx), "indices built over different stores");
    if per_side == 0 {
        return Err(Error::ConfigInvalid("per_side must be at least 1".into()));
    }
    let users = &fact_idx.users;
    let mut is_train = vec![false; users.len()];
    let mut pool: Vec<u32> = Vec::with_capacity(train_users.len());
    for u in train_users {
        let i = fact_idx.require_user(u)?;
        is_train[i as usize] = true;
        pool.push(i);
    }

    let mut partners: HashMap<u32, HashSet<u32>> = HashMap::new();
    let mut positives: HashSet<(u32, u32)> = HashSet::with_capacity(train_matches.len());
    let mut matches = Vec::with_capacity(train_matches.len());
    for p in train_matches {
        let a = fact_idx.require_user(p.a())?;
        let b = fact_idx.require_user(p.b())?;
        partners.entry(a).or_default().insert(b);
        partners.entry(b).or_default().insert(a);
        positives.insert((a.min(b), a.max(b)));
        matches.push((a, b));
    }
    let no_partners = HashSet::new();

    let mut rng = stage_rng(seed, "negatives");
    let mut raw = Vec::with_capacity(matches.len() * 2 * per_side);
    let mut related_cache: HashMap<u32, Vec<u32>> = HashMap::new();
    for &(a, b) in &matches {
        for side in [a, b] {
            let excluded = partners.get(&side).unwrap_or(&no_partners);
            let eligible_global = pool
                .len()
                .saturating_sub(excluded.len())
                .saturating_sub(usize::from(is_train[side as usize]));
            if eligible_global < per_side {
                return Err(Error::InsufficientPopulation {
                    needed: per_side,
                    found: eligible_global,
                });
            }
            let related = related_cache.entry(side).or_insert_with(|| {
                related_indices(side, fact_idx, dom_idx)
                    .into_iter()
                    .filter(|&v| is_train[v as usize])
                    .collect()
            });
            let mut chosen: Vec<u32> = Vec::with_capacity(per_side);
            let valid = |x: u32, chosen: &[u32]| x != side && !excluded.contains(&x) && !chosen.contains(&x);
            for _ in 0..per_side {
                let mut pick = None;
                if !related.is_empty() {
                    for _ in 0..MAX_REDRAWS {
                        let x = related[rng.random_range(0..related.len())];
                        if valid(x, &chosen) {
                            pick = Some(x);
                            break;
                        }
                    }
                }
                if pick.is_none() {
                    pick = draw_global(&pool, &mut rng, |x| valid(x, &chosen));
                }
                let x = pick.ok_or(Error::InsufficientPopulation {
                    needed: per_side,
                    found: chosen.len(),
                })?;
                chosen.push(x);
            }
            for x in chosen {
                raw.push((side.min(x), side.max(x)));
            }
        }
    }

    let mut distinct: Vec<(u32, u32)> = raw.iter().copied().filter(|p| !positives.contains(p)).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let to_pair = |&(x, y): &(u32, u32)| {
        canonical_pair(users[x as usize].clone(), users[y as usize].clone()).expect("distinct users")
    };
    Ok(NegativeSampling {
        raw: raw.iter().map(to_pair).collect(),
        samples: distinct.iter().map(|p| PairSample::labeled(to_pair(p), 0)).collect(),
    })
}

fn draw_global(pool: &[u32], rng: &mut impl Rng, valid: impl Fn(u32) -> bool) -> Option<u32> {
    for _ in 0..MAX_REDRAWS {
        let x = pool[rng.random_range(0..pool.len())];
        if valid(x) {
            return Some(x);
        }
    }
    // Tiny or nearly exhausted populations: pick among the eligible directly.
    let eligible: Vec<u32> = pool.iter().copied().filter(|&x| valid(x)).collect();
    (!eligible.is_empty()).then(|| eligible[rng.random_range(0..eligible.len())])
}
