//! Synthetic multi-device world with known ground truth.
//!
//! Persons belong to small communities that share part of their interests, so
//! non-matching users in the same community look alike. Every device of a
//! person draws events from the person's interest profile, on the person's
//! active days, at device-specific preferred hours. A calibrated set of
//! "detached" devices draws its facts (and sometimes its domains) from a
//! private vocabulary; their pairs are exactly the matching pairs that share
//! nothing, which pins the measured sharing rates to the configured targets.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::weighted::WeightedIndex;
use rand_distr::{StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, EventStore};
use crate::rng::{derive_seed, derive_seed_n, StageRng};
use crate::types::{canonical_pair, EventRecord, Pair, UserId, HOURS, SECONDS_PER_DAY, SECONDS_PER_HOUR};

const MAX_ATTEMPTS: u64 = 5;
const TOLERANCE: f64 = 0.02;
/// First simulated day; around mid 2016.
const EPOCH_DAY: i64 = 17_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_persons: usize,
    /// Relative weights of a person owning 1..=6 devices.
    pub devices_per_person: [f64; 6],
    pub n_facts: usize,
    pub n_domains: usize,
    pub n_title_tokens: usize,
    pub events_min: usize,
    pub events_max: usize,
    /// Zipf exponent of global fact and domain popularity.
    pub person_interest_skew: f64,
    pub interest_size: usize,
    /// Scale of the per-device perturbation of the person's interest ranking;
    /// 0 gives every device the same preferences.
    pub device_divergence: f64,
    /// Probability an event comes from the person's interests rather than
    /// global popularity.
    pub personal_rate: f64,
    pub community_size: usize,
    /// Share of a person's interests inherited from the community.
    pub community_rate: f64,
    pub n_days: u32,
    /// Probability a given day is one of the person's active days.
    pub active_day_rate: f64,
    pub hour_concentration: f64,
    /// Target fraction of matching pairs sharing at least one fact.
    pub share_rate: f64,
    /// Target fraction of matching pairs sharing at least one domain.
    pub domain_share_rate: f64,
    pub noise_user_fraction: f64,
    pub train_fraction: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_persons: 2000,
            devices_per_person: [0.0, 0.94, 0.05, 0.01, 0.0, 0.0],
            n_facts: 60_000,
            n_domains: 3_000,
            n_title_tokens: 20_000,
            events_min: 5,
            events_max: 400,
            person_interest_skew: 1.0,
            interest_size: 40,
            device_divergence: 1.5,
            personal_rate: 0.5,
            community_size: 8,
            community_rate: 0.5,
            n_days: 30,
            active_day_rate: 0.4,
            hour_concentration: 1.5,
            share_rate: 0.985,
            domain_share_rate: 0.996,
            noise_user_fraction: 0.005,
            train_fraction: 0.6,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::ConfigInvalid(msg.to_string()));
        if self.n_persons == 0 || self.n_facts == 0 || self.n_domains == 0 || self.n_title_tokens == 0 {
            return bad("person and vocabulary counts must be positive");
        }
        if self.events_min == 0 || self.events_max < self.events_min {
            return bad("events_min must be positive and not exceed events_max");
        }
        if self.interest_size == 0 || self.community_size == 0 || self.n_days == 0 {
            return bad("interest_size, community_size and n_days must be positive");
        }
        if self.devices_per_person.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.devices_per_person.iter().sum::<f64>() <= 0.0
        {
            return bad("devices_per_person weights must be non-negative with a positive sum");
        }
        for (name, v) in [
            ("personal_rate", self.personal_rate),
            ("community_rate", self.community_rate),
            ("active_day_rate", self.active_day_rate),
            ("share_rate", self.share_rate),
            ("domain_share_rate", self.domain_share_rate),
            ("noise_user_fraction", self.noise_user_fraction),
            ("train_fraction", self.train_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::ConfigInvalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.noise_user_fraction >= 1.0 {
            return bad("noise_user_fraction must be below 1");
        }
        if !(self.device_divergence.is_finite() && self.device_divergence >= 0.0) {
            return bad("device_divergence must be finite and non-negative");
        }
        if !(self.person_interest_skew > 0.0 && self.hour_concentration >= 0.0) {
            return bad("person_interest_skew must be positive and hour_concentration non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub events: EventStore,
    pub train_matches: Vec<Pair>,
    pub test_matches: Vec<Pair>,
    pub test_users: BTreeSet<UserId>,
    /// Device ids of every person, noise persons included.
    pub persons: Vec<Vec<UserId>>,
    pub fact_share_rate: f64,
    pub domain_share_rate: f64,
}

impl World {
    pub fn train_users(&self) -> BTreeSet<UserId> {
        self.events
            .users()
            .filter(|u| !self.test_users.contains(u))
            .cloned()
            .collect()
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("events.jsonl"))?);
        ingest::write_events(&self.events, &mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("matches_train.tsv"))?);
        ingest::write_pairs(&self.train_matches, &mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("matches_test.tsv"))?);
        ingest::write_pairs(&self.test_matches, &mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("test_users.txt"))?);
        ingest::write_users(&self.test_users, &mut w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Detachment {
    None,
    Facts,
    FactsAndDomains,
}

struct Person {
    community: usize,
    devices: usize,
}

/// Lazily materialized per-fact attributes; each is a pure function of the
/// world seed and the fact id.
struct Vocabulary<'a> {
    cfg: &'a WorldConfig,
    seed: u64,
    domain_zipf: Zipf<f64>,
    title_zipf: Zipf<f64>,
    domains: HashMap<usize, usize>,
    titles: HashMap<usize, Vec<u32>>,
}

impl<'a> Vocabulary<'a> {
    fn new(cfg: &'a WorldConfig, seed: u64) -> Self {
        Self {
            cfg,
            seed,
            domain_zipf: Zipf::new(cfg.n_domains as f64, cfg.person_interest_skew).expect("validated"),
            title_zipf: Zipf::new(cfg.n_title_tokens as f64, 1.0).expect("validated"),
            domains: HashMap::new(),
            titles: HashMap::new(),
        }
    }

    fn domain_of(&mut self, fact: usize) -> usize {
        let (seed, zipf) = (self.seed, self.domain_zipf);
        *self.domains.entry(fact).or_insert_with(|| {
            let mut rng = StageRng::seed_from_u64(derive_seed_n(seed, "fact-domain", fact as u64));
            zipf.sample(&mut rng) as usize - 1
        })
    }

    fn title_of(&mut self, fact: usize) -> Vec<u32> {
        let (seed, zipf) = (self.seed, self.title_zipf);
        self.titles
            .entry(fact)
            .or_insert_with(|| {
                let mut rng = StageRng::seed_from_u64(derive_seed_n(seed, "fact-title", fact as u64));
                let len = rng.random_range(2..=6);
                (0..len).map(|_| zipf.sample(&mut rng) as u32 - 1).collect()
            })
            .clone()
    }

    fn fact_id(&self, fact: usize) -> String {
        format!("{:012x}", derive_seed_n(self.seed, "fact-id", fact as u64) >> 16)
    }

    fn domain_id(&self, domain: usize) -> String {
        format!("{:08x}", derive_seed_n(self.seed, "domain-id", domain as u64) >> 32)
    }

    /// Private facts live above the shared vocabulary.
    fn private_fact(&self, device: usize, k: usize) -> usize {
        self.cfg.n_facts + device * 1_000 + k
    }

    fn private_domain(&self, device: usize) -> usize {
        self.cfg.n_domains + device
    }
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut personal_rate = cfg.personal_rate;
    let mut last = (0.0, 0.0);
    for attempt in 0..MAX_ATTEMPTS {
        let seed = if attempt == 0 {
            cfg.seed
        } else {
            derive_seed_n(cfg.seed, "attempt", attempt)
        };
        let world = generate_attempt(cfg, seed, personal_rate);
        let ok_fact = world.fact_share_rate >= cfg.share_rate - TOLERANCE;
        let ok_domain = world.domain_share_rate >= cfg.domain_share_rate - TOLERANCE;
        if ok_fact && ok_domain {
            return Ok(world);
        }
        log::warn!(
            "synth attempt {attempt}: fact share {:.4}, domain share {:.4}; resampling",
            world.fact_share_rate,
            world.domain_share_rate
        );
        last = (world.fact_share_rate, world.domain_share_rate);
        personal_rate += (1.0 - personal_rate) / 2.0;
    }
    Err(Error::TargetUnreachable(format!(
        "after {MAX_ATTEMPTS} attempts fact share {:.4} (target {}), domain share {:.4} (target {})",
        last.0, cfg.share_rate, last.1, cfg.domain_share_rate
    )))
}

fn sample_interests(
    rng: &mut StageRng,
    zipf: &Zipf<f64>,
    size: usize,
    inherited: Option<(&[usize], f64)>,
) -> Vec<usize> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(size);
    for _ in 0..size * 4 {
        if out.len() == size {
            break;
        }
        let fact = match inherited {
            Some((pool, rate)) if !pool.is_empty() && rng.random_bool(rate) => pool[rng.random_range(0..pool.len())],
            _ => zipf.sample(rng) as usize - 1,
        };
        if seen.insert(fact) {
            out.push(fact);
        }
    }
    out.shuffle(rng);
    out
}

/// Discrete circular preference over the 24 hours peaked at `mode`.
fn hour_weights(mode: f64, concentration: f64) -> [f64; HOURS] {
    let mut w = [0.0; HOURS];
    for (h, slot) in w.iter_mut().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * (h as f64 + 0.5 - mode) / HOURS as f64;
        *slot = (concentration * angle.cos()).exp();
    }
    w
}

fn generate_attempt(cfg: &WorldConfig, seed: u64, personal_rate: f64) -> World {
    let mut rng = StageRng::seed_from_u64(derive_seed(seed, "world"));
    let device_dist = WeightedIndex::new(cfg.devices_per_person).expect("validated");
    let n_communities = cfg.n_persons.div_ceil(cfg.community_size);

    let mut persons: Vec<Person> = (0..cfg.n_persons)
        .map(|i| Person {
            community: i / cfg.community_size,
            devices: device_dist.sample(&mut rng) + 1,
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.n_persons).collect();
    order.shuffle(&mut rng);
    let n_train = (cfg.train_fraction * cfg.n_persons as f64).round() as usize;
    let is_test: Vec<bool> = {
        let mut flags = vec![false; cfg.n_persons];
        for &p in &order[n_train..] {
            flags[p] = true;
        }
        flags
    };

    let test_devices: usize = (0..cfg.n_persons)
        .filter(|&p| is_test[p])
        .map(|p| persons[p].devices)
        .sum();
    let n_noise = (cfg.noise_user_fraction * test_devices as f64 / (1.0 - cfg.noise_user_fraction)).round() as usize;
    for _ in 0..n_noise {
        persons.push(Person {
            community: rng.random_range(0..n_communities),
            devices: 1,
        });
    }

    // Device numbering: person-major. Ids come from a shuffled permutation so
    // that id order carries no information about ownership.
    let mut first_device = Vec::with_capacity(persons.len());
    let mut n_devices = 0;
    for p in &persons {
        first_device.push(n_devices);
        n_devices += p.devices;
    }
    let mut id_perm: Vec<usize> = (0..n_devices).collect();
    id_perm.shuffle(&mut rng);
    let width = n_devices.to_string().len().max(6);
    let device_ids: Vec<UserId> = id_perm
        .iter()
        .map(|&k| UserId::new(format!("u{k:0width$}")).expect("well-formed"))
        .collect();

    let detachment = plan_detachment(cfg, &persons[..cfg.n_persons], &first_device, n_devices, &mut rng);

    let fact_zipf = Zipf::new(cfg.n_facts as f64, cfg.person_interest_skew).expect("validated");
    let mut vocab = Vocabulary::new(cfg, seed);
    let community_interests: Vec<Vec<usize>> = (0..n_communities)
        .map(|c| {
            let mut crng = StageRng::seed_from_u64(derive_seed_n(seed, "community", c as u64));
            sample_interests(&mut crng, &fact_zipf, cfg.interest_size, None)
        })
        .collect();

    let log_min = (cfg.events_min as f64).ln();
    let log_max = (cfg.events_max as f64 + 1.0).ln();
    let day_uniform = Uniform::new(0, cfg.n_days).expect("validated");

    let mut events = EventStore::new();
    let mut device_facts: Vec<HashSet<usize>> = vec![HashSet::new(); n_devices];
    let mut device_domains: Vec<HashSet<usize>> = vec![HashSet::new(); n_devices];

    for (pi, person) in persons.iter().enumerate() {
        let mut prng = StageRng::seed_from_u64(derive_seed_n(seed, "person", pi as u64));
        let interests = sample_interests(
            &mut prng,
            &fact_zipf,
            cfg.interest_size,
            Some((&community_interests[person.community], cfg.community_rate)),
        );
        let mut active_days: Vec<u32> = (0..cfg.n_days)
            .filter(|_| prng.random_bool(cfg.active_day_rate))
            .collect();
        if active_days.is_empty() {
            active_days.push(day_uniform.sample(&mut prng));
        }

        for d in 0..person.devices {
            let device = first_device[pi] + d;
            let user = &device_ids[device];
            let mode = prng.random_range(0.0..HOURS as f64);
            let hours = WeightedIndex::new(hour_weights(mode, cfg.hour_concentration)).expect("positive weights");
            let n_events = prng.random_range(log_min..log_max).exp().floor() as usize;
            let n_events = n_events.clamp(cfg.events_min, cfg.events_max);
            let detach = detachment.get(device).copied().unwrap_or(Detachment::None);
            let private_pool = (n_events / 2).max(1);
            let interest_dist = WeightedIndex::new((0..interests.len()).map(|i| {
                let jitter: f64 = StandardNormal.sample(&mut prng);
                (cfg.device_divergence * jitter).exp() / (i as f64 + 1.0)
            }))
            .expect("non-empty interests");

            let mut device_events = Vec::with_capacity(n_events);
            for e in 0..n_events {
                let day = if prng.random_bool(0.85) {
                    active_days[prng.random_range(0..active_days.len())]
                } else {
                    day_uniform.sample(&mut prng)
                };
                let hour = hours.sample(&mut prng) as i64;
                let second = prng.random_range(0..SECONDS_PER_HOUR);
                let ts = (EPOCH_DAY + i64::from(day)) * SECONDS_PER_DAY + hour * SECONDS_PER_HOUR + second;

                let (fact, domain) = match detach {
                    Detachment::None => {
                        // First event of every device hits the anchor interest.
                        let fact = if e == 0 {
                            interests[0]
                        } else if prng.random_bool(personal_rate) {
                            interests[interest_dist.sample(&mut prng)]
                        } else {
                            fact_zipf.sample(&mut prng) as usize - 1
                        };
                        (fact, vocab.domain_of(fact))
                    }
                    Detachment::Facts => {
                        let fact = vocab.private_fact(device, prng.random_range(0..private_pool));
                        let anchor = if e == 0 {
                            interests[0]
                        } else {
                            interests[interest_dist.sample(&mut prng)]
                        };
                        (fact, vocab.domain_of(anchor))
                    }
                    Detachment::FactsAndDomains => {
                        let fact = vocab.private_fact(device, prng.random_range(0..private_pool));
                        (fact, vocab.private_domain(device))
                    }
                };
                device_facts[device].insert(fact);
                device_domains[device].insert(domain);
                device_events.push(EventRecord {
                    user: user.clone(),
                    ts,
                    fact: vocab.fact_id(fact),
                    domain: vocab.domain_id(domain),
                    title_tokens: vocab.title_of(fact),
                });
            }
            device_events.sort_by(|a, b| {
                (a.ts, &a.fact, &a.domain, &a.title_tokens).cmp(&(b.ts, &b.fact, &b.domain, &b.title_tokens))
            });
            for e in device_events {
                events.push(e);
            }
        }
    }

    let mut train_matches = Vec::new();
    let mut test_matches = Vec::new();
    let mut test_users = BTreeSet::new();
    let mut person_ids = Vec::with_capacity(persons.len());
    let mut shared_fact = 0usize;
    let mut shared_domain = 0usize;
    let mut total = 0usize;
    for (pi, person) in persons.iter().enumerate() {
        let devices: Vec<usize> = (first_device[pi]..first_device[pi] + person.devices).collect();
        let test = pi >= cfg.n_persons || is_test[pi];
        for (i, &x) in devices.iter().enumerate() {
            if test {
                test_users.insert(device_ids[x].clone());
            }
            for &y in &devices[i + 1..] {
                total += 1;
                if !device_facts[x].is_disjoint(&device_facts[y]) {
                    shared_fact += 1;
                }
                if !device_domains[x].is_disjoint(&device_domains[y]) {
                    shared_domain += 1;
                }
                let pair = canonical_pair(device_ids[x].clone(), device_ids[y].clone()).expect("distinct devices");
                if test {
                    test_matches.push(pair);
                } else {
                    train_matches.push(pair);
                }
            }
        }
        person_ids.push(devices.iter().map(|&d| device_ids[d].clone()).collect());
    }
    train_matches.sort();
    test_matches.sort();

    let rate = |k: usize| if total == 0 { 1.0 } else { k as f64 / total as f64 };
    World {
        events,
        train_matches,
        test_matches,
        test_users,
        persons: person_ids,
        fact_share_rate: rate(shared_fact),
        domain_share_rate: rate(shared_domain),
    }
}

/// Marks devices whose matching pairs will share no facts (or no domains) so
/// that the non-sharing pair counts hit the configured targets.
fn plan_detachment(
    cfg: &WorldConfig,
    persons: &[Person],
    first_device: &[usize],
    n_devices: usize,
    rng: &mut StageRng,
) -> Vec<Detachment> {
    let total_pairs: usize = persons.iter().map(|p| p.devices * (p.devices - 1) / 2).sum();
    let fact_target = ((1.0 - cfg.share_rate) * total_pairs as f64).round() as usize;
    let domain_target = ((1.0 - cfg.domain_share_rate) * total_pairs as f64).round() as usize;
    let mut plan = vec![Detachment::None; n_devices];

    let mut order: Vec<usize> = (0..persons.len()).filter(|&p| persons[p].devices > 1).collect();
    order.shuffle(rng);

    // Pairs a detached device cuts off: its pairs with every sibling not
    // already detached at the same level (detached-detached pairs count once).
    let mark = |level: Detachment, target: usize, plan: &mut Vec<Detachment>| {
        let mut affected = count_affected(persons, first_device, plan, level);
        for &p in &order {
            if affected >= target {
                break;
            }
            let base = first_device[p];
            let devs = persons[p].devices;
            let Some(d) = (0..devs).find(|&d| !reaches(plan[base + d], level)) else {
                continue;
            };
            let gain = (0..devs).filter(|&o| o != d && !reaches(plan[base + o], level)).count();
            if affected + gain > target + gain / 2 {
                continue;
            }
            plan[base + d] = level;
            affected += gain;
        }
    };
    mark(Detachment::FactsAndDomains, domain_target, &mut plan);
    mark(Detachment::Facts, fact_target, &mut plan);
    plan
}

fn reaches(actual: Detachment, level: Detachment) -> bool {
    match level {
        Detachment::None => true,
        Detachment::Facts => actual != Detachment::None,
        Detachment::FactsAndDomains => actual == Detachment::FactsAndDomains,
    }
}

fn count_affected(persons: &[Person], first_device: &[usize], plan: &[Detachment], level: Detachment) -> usize {
    persons
        .iter()
        .zip(first_device)
        .map(|(p, &base)| {
            let detached = (0..p.devices).filter(|&d| reaches(plan[base + d], level)).count();
            let attached = p.devices - detached;
            detached * (detached.saturating_sub(1)) / 2 + detached * attached
        })
        .sum()
}
