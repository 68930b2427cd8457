//! File formats and the event/profile stores.
//!
//! * `events.jsonl`: one JSON object per line with keys `uid`, `ts`, `fact`,
//!   `domain`, `title`.
//! * `matches.tsv` / `candidates.tsv`: `uid1<TAB>uid2`.
//! * `negatives.tsv`: `uid1<TAB>uid2<TAB>label`.
//! * `predictions.tsv`: `uid1<TAB>uid2<TAB>score`, score with 6 decimals.
//! * `test_users.txt`: one uid per line.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{build_profile, canonical_pair, EventRecord, Pair, ScoredPair, UserId, UserProfile};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventStore {
    by_user: BTreeMap<UserId, Vec<EventRecord>>,
}

impl EventStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, event: EventRecord) {
        self.by_user.entry(event.user.clone()).or_default().push(event);
    }

    pub fn events(&self, user: &UserId) -> Option<&[EventRecord]> {
        self.by_user.get(user).map(Vec::as_slice)
    }

    pub fn users(&self) -> impl Iterator<Item = &UserId> {
        self.by_user.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&UserId, &[EventRecord])> {
        self.by_user.iter().map(|(u, e)| (u, e.as_slice()))
    }

    pub fn user_count(&self) -> usize {
        self.by_user.len()
    }

    pub fn event_count(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_user.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct RawEvent {
    uid: String,
    ts: i64,
    fact: String,
    domain: String,
    title: Vec<u32>,
}

pub fn parse_events<R: BufRead>(source: R) -> Result<EventStore> {
    let mut store = EventStore::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEvent = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        if raw.ts < 0 {
            return Err(Error::NegativeTimestamp {
                line: line_no,
                ts: raw.ts,
            });
        }
        if raw.fact.is_empty() || raw.domain.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: "empty fact or domain".into(),
            });
        }
        let user = UserId::new(raw.uid).map_err(|e| Error::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        store.push(EventRecord {
            user,
            ts: raw.ts,
            fact: raw.fact,
            domain: raw.domain,
            title_tokens: raw.title,
        });
    }
    Ok(store)
}

/// Writes users in id order, each user's events in stored order.
pub fn write_events<W: Write>(store: &EventStore, mut sink: W) -> Result<()> {
    for (_, events) in store.iter() {
        for e in events {
            let raw = RawEvent {
                uid: e.user.to_string(),
                ts: e.ts,
                fact: e.fact.clone(),
                domain: e.domain.clone(),
                title: e.title_tokens.clone(),
            };
            serde_json::to_writer(&mut sink, &raw)?;
            sink.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Term namespaces that carry document frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Namespace {
    Fact,
    Domain,
    Title,
    Day,
}

#[derive(Debug, Clone, Default)]
pub struct ProfileStore {
    profiles: BTreeMap<UserId, UserProfile>,
    fact_df: HashMap<String, u32>,
    domain_df: HashMap<String, u32>,
    title_df: HashMap<u32, u32>,
    day_df: HashMap<i64, u32>,
}

impl ProfileStore {
    pub fn get(&self, user: &UserId) -> Option<&UserProfile> {
        self.profiles.get(user)
    }

    pub fn profile(&self, user: &UserId) -> Result<&UserProfile> {
        self.get(user).ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&UserId, &UserProfile)> {
        self.profiles.iter()
    }

    pub fn users(&self) -> impl Iterator<Item = &UserId> {
        self.profiles.keys()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn n_docs(&self) -> usize {
        self.profiles.len()
    }

    pub fn fact_df(&self) -> &HashMap<String, u32> {
        &self.fact_df
    }

    pub fn domain_df(&self) -> &HashMap<String, u32> {
        &self.domain_df
    }

    pub fn title_df(&self) -> &HashMap<u32, u32> {
        &self.title_df
    }

    pub fn day_df(&self) -> &HashMap<i64, u32> {
        &self.day_df
    }

    /// Number of profiles containing `term` in the fact or domain namespace.
    pub fn df(&self, namespace: Namespace, term: &str) -> u32 {
        let found = match namespace {
            Namespace::Fact => self.fact_df.get(term),
            Namespace::Domain => self.domain_df.get(term),
            Namespace::Title => term.parse().ok().and_then(|t: u32| self.title_df.get(&t)),
            Namespace::Day => term.parse().ok().and_then(|d: i64| self.day_df.get(&d)),
        };
        found.copied().unwrap_or(0)
    }

    pub fn from_profiles(profiles: impl IntoIterator<Item = UserProfile>) -> Self {
        let mut store = ProfileStore::default();
        for profile in profiles {
            for term in profile.fact_counts.keys() {
                *store.fact_df.entry(term.clone()).or_default() += 1;
            }
            for term in profile.domain_counts.keys() {
                *store.domain_df.entry(term.clone()).or_default() += 1;
            }
            for &token in profile.title_counts.keys() {
                *store.title_df.entry(token).or_default() += 1;
            }
            for &day in &profile.day_set {
                *store.day_df.entry(day).or_default() += 1;
            }
            store.profiles.insert(profile.user.clone(), profile);
        }
        store
    }
}

pub fn build_profile_store(store: &EventStore) -> ProfileStore {
    use rayon::prelude::*;
    let users: Vec<_> = store.iter().collect();
    let profiles: Vec<UserProfile> = users
        .par_iter()
        .map(|(user, events)| build_profile(user, events).expect("events grouped by user"))
        .collect();
    ProfileStore::from_profiles(profiles)
}

fn split_tab_line(line: &str, line_no: usize, fields: usize) -> Result<Vec<&str>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != fields {
        return Err(Error::MalformedLine {
            line: line_no,
            reason: format!("expected {fields} tab-separated fields, got {}", parts.len()),
        });
    }
    Ok(parts)
}

fn parse_uid(raw: &str, line_no: usize) -> Result<UserId> {
    UserId::new(raw).map_err(|e| Error::MalformedLine {
        line: line_no,
        reason: e.to_string(),
    })
}

fn parse_pair(a: &str, b: &str, line_no: usize) -> Result<Pair> {
    canonical_pair(parse_uid(a, line_no)?, parse_uid(b, line_no)?)
}

fn non_blank_lines<R: BufRead>(source: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    source
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map(|s| !s.is_empty()).unwrap_or(true))
}

pub fn read_pairs<R: BufRead>(source: R) -> Result<Vec<Pair>> {
    let mut pairs = Vec::new();
    for (line_no, line) in non_blank_lines(source) {
        let line = line?;
        let parts = split_tab_line(&line, line_no, 2)?;
        pairs.push(parse_pair(parts[0], parts[1], line_no)?);
    }
    Ok(pairs)
}

pub fn write_pairs<W: Write>(pairs: &[Pair], mut sink: W) -> Result<()> {
    for p in pairs {
        writeln!(sink, "{}\t{}", p.a(), p.b())?;
    }
    Ok(())
}

pub fn read_labeled_pairs<R: BufRead>(source: R) -> Result<Vec<(Pair, u8)>> {
    let mut pairs = Vec::new();
    for (line_no, line) in non_blank_lines(source) {
        let line = line?;
        let parts = split_tab_line(&line, line_no, 3)?;
        let label = match parts[2] {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        pairs.push((parse_pair(parts[0], parts[1], line_no)?, label));
    }
    Ok(pairs)
}

pub fn write_labeled_pairs<W: Write>(pairs: &[(Pair, u8)], mut sink: W) -> Result<()> {
    for (p, label) in pairs {
        writeln!(sink, "{}\t{}\t{}", p.a(), p.b(), label)?;
    }
    Ok(())
}

/// Score column is written with 6 decimals, in the given order.
pub fn write_scored_pairs<W: Write>(pairs: &[ScoredPair], mut sink: W) -> Result<()> {
    for sp in pairs {
        writeln!(sink, "{}\t{}\t{:.6}", sp.pair.a(), sp.pair.b(), sp.weight)?;
    }
    Ok(())
}

/// Like [`write_scored_pairs`] with scores in shortest round-trip form.
pub fn write_scores_exact<W: Write>(pairs: &[ScoredPair], mut sink: W) -> Result<()> {
    for sp in pairs {
        writeln!(sink, "{}\t{}\t{}", sp.pair.a(), sp.pair.b(), sp.weight)?;
    }
    Ok(())
}

pub fn read_scored_pairs<R: BufRead>(source: R) -> Result<Vec<ScoredPair>> {
    let mut pairs = Vec::new();
    for (line_no, line) in non_blank_lines(source) {
        let line = line?;
        let parts = split_tab_line(&line, line_no, 3)?;
        let weight: f64 = parts[2].parse().map_err(|_| Error::MalformedLine {
            line: line_no,
            reason: format!("bad score {:?}", parts[2]),
        })?;
        let pair = parse_pair(parts[0], parts[1], line_no)?;
        pairs.push(ScoredPair::new(pair, weight).map_err(|e| Error::MalformedLine {
            line: line_no,
            reason: e.to_string(),
        })?);
    }
    Ok(pairs)
}

pub fn read_users<R: BufRead>(source: R) -> Result<BTreeSet<UserId>> {
    let mut users = BTreeSet::new();
    for (line_no, line) in non_blank_lines(source) {
        users.insert(parse_uid(line?.trim_end(), line_no)?);
    }
    Ok(users)
}

pub fn write_users<'a, W: Write>(users: impl IntoIterator<Item = &'a UserId>, mut sink: W) -> Result<()> {
    for u in users {
        writeln!(sink, "{u}")?;
    }
    Ok(())
}
