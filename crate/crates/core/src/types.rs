//! Domain types shared by every stage of the pipeline.
//!
//! Days and hours are derived in UTC from unix seconds. User ids order as raw
//! byte strings, which is what `String`'s `Ord` does.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;
pub const SECONDS_PER_HOUR: i64 = 3_600;
pub const HOURS: usize = 24;

pub type HourHistogram = [u32; HOURS];

/// Opaque device/browser identity token.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId(String);

impl UserId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidUserId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for UserId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        Self::new(value)
    }
}

impl From<UserId> for String {
    fn from(id: UserId) -> Self {
        id.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One browsing event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    pub user: UserId,
    pub ts: i64,
    pub fact: String,
    pub domain: String,
    pub title_tokens: Vec<u32>,
}

impl EventRecord {
    pub fn day(&self) -> i64 {
        self.ts.div_euclid(SECONDS_PER_DAY)
    }

    pub fn hour(&self) -> usize {
        self.ts.div_euclid(SECONDS_PER_HOUR).rem_euclid(HOURS as i64) as usize
    }
}

/// Aggregated view of one user's events. Bags keep multiplicity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserProfile {
    pub user: UserId,
    pub fact_counts: BTreeMap<String, u32>,
    pub domain_counts: BTreeMap<String, u32>,
    pub title_counts: BTreeMap<u32, u32>,
    pub day_set: BTreeSet<i64>,
    pub hour_histogram: HourHistogram,
    pub per_fact_hours: BTreeMap<String, HourHistogram>,
    pub per_domain_hours: BTreeMap<String, HourHistogram>,
    pub per_day_facts: BTreeMap<i64, BTreeSet<String>>,
}

impl UserProfile {
    pub fn empty(user: UserId) -> Self {
        Self {
            user,
            fact_counts: BTreeMap::new(),
            domain_counts: BTreeMap::new(),
            title_counts: BTreeMap::new(),
            day_set: BTreeSet::new(),
            hour_histogram: [0; HOURS],
            per_fact_hours: BTreeMap::new(),
            per_domain_hours: BTreeMap::new(),
            per_day_facts: BTreeMap::new(),
        }
    }

    pub fn event_count(&self) -> u64 {
        self.hour_histogram.iter().map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.event_count() == 0
    }
}

/// Aggregate a single user's events into a profile.
///
/// An empty slice cannot name its user, so the caller supplies it.
pub fn build_profile(user: &UserId, events: &[EventRecord]) -> Result<UserProfile> {
    let mut profile = UserProfile::empty(user.clone());
    for event in events {
        if &event.user != user {
            return Err(Error::MixedUsers {
                expected: user.to_string(),
                found: event.user.to_string(),
            });
        }
        let hour = event.hour();
        let day = event.day();
        *profile.fact_counts.entry(event.fact.clone()).or_default() += 1;
        *profile.domain_counts.entry(event.domain.clone()).or_default() += 1;
        for &token in &event.title_tokens {
            *profile.title_counts.entry(token).or_default() += 1;
        }
        profile.day_set.insert(day);
        profile.hour_histogram[hour] += 1;
        profile.per_fact_hours.entry(event.fact.clone()).or_insert([0; HOURS])[hour] += 1;
        profile
            .per_domain_hours
            .entry(event.domain.clone())
            .or_insert([0; HOURS])[hour] += 1;
        profile.per_day_facts.entry(day).or_default().insert(event.fact.clone());
    }
    Ok(profile)
}

/// Unordered pair of distinct users, stored with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Pair {
    a: UserId,
    b: UserId,
}

impl Pair {
    pub fn a(&self) -> &UserId {
        &self.a
    }

    pub fn b(&self) -> &UserId {
        &self.b
    }

    pub fn contains(&self, user: &UserId) -> bool {
        &self.a == user || &self.b == user
    }

    /// The member of the pair that is not `user`.
    pub fn other(&self, user: &UserId) -> Option<&UserId> {
        if &self.a == user {
            Some(&self.b)
        } else if &self.b == user {
            Some(&self.a)
        } else {
            None
        }
    }
}

impl fmt::Display for Pair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.a, self.b)
    }
}

pub fn canonical_pair(x: UserId, y: UserId) -> Result<Pair> {
    match x.cmp(&y) {
        std::cmp::Ordering::Less => Ok(Pair { a: x, b: y }),
        std::cmp::Ordering::Greater => Ok(Pair { a: y, b: x }),
        std::cmp::Ordering::Equal => Err(Error::SelfPair(x.0)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub pair: Pair,
    pub label: Option<u8>,
    pub features: Option<Vec<f64>>,
}

impl PairSample {
    pub fn unlabeled(pair: Pair) -> Self {
        Self {
            pair,
            label: None,
            features: None,
        }
    }

    pub fn labeled(pair: Pair, label: u8) -> Self {
        Self {
            pair,
            label: Some(label),
            features: None,
        }
    }
}

/// A pair with a finite association weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub pair: Pair,
    pub weight: f64,
}

impl ScoredPair {
    pub fn new(pair: Pair, weight: f64) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::NonFinite(pair.to_string()));
        }
        Ok(Self { pair, weight })
    }
}

/// Descending weight, ties by canonical pair order.
pub fn sort_scored(pairs: &mut [ScoredPair]) {
    pairs.sort_by(|x, y| y.weight.total_cmp(&x.weight).then_with(|| x.pair.cmp(&y.pair)));
}
