//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use xdevice::candidates::{build_indices, generate_prediction_pairs, sample_negatives};
use xdevice::config::{Mode, RunConfig};
use xdevice::features::similarity::{bag_jaccard, hellinger, tfidf_cosine};
use xdevice::ingest::{build_profile_store, EventStore};
use xdevice::learners::{pairwise_cost, train_gbdt, Dataset, GbdtParams, MlpModel, Standardizer};
use xdevice::matcher::select_rank2;
use xdevice::pipeline::{run_experiment, Experiment};
use xdevice::rng::StageRng;
use xdevice::synthgen::{generate_world, WorldConfig};
use xdevice::types::{canonical_pair, EventRecord, Pair, ScoredPair, UserId};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn uid(i: usize) -> UserId {
    UserId::new(format!("u{i:03}")).unwrap()
}

fn pair(x: usize, y: usize) -> Pair {
    canonical_pair(uid(x), uid(y)).unwrap()
}

fn random_bag(rng: &mut StageRng, vocab: usize, max_len: usize) -> BTreeMap<String, u32> {
    let len = rng.random_range(0..=max_len);
    (0..len)
        .map(|_| (format!("t{}", rng.random_range(0..vocab)), rng.random_range(1..6)))
        .collect()
}

fn random_simplex(rng: &mut StageRng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut v = vec![0.0; k];
        v[0] = 1.0;
        return v;
    }
    raw.iter().map(|x| x / s).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn criterion_formulas() -> Outcome {
    let start = Instant::now();
    let mut rng = StageRng::seed_from_u64(101);
    let mut worst = [0.0f64; 4];
    let mut failures = 0;

    for _ in 0..1000 {
        let a = random_bag(&mut rng, 12, 8);
        let b = random_bag(&mut rng, 12, 8);
        let ka: HashSet<&String> = a.keys().collect();
        let kb: HashSet<&String> = b.keys().collect();
        let union = ka.union(&kb).count();
        let expected = if union == 0 {
            0.0
        } else {
            ka.intersection(&kb).count() as f64 / union as f64
        };
        let got = bag_jaccard(&a, &b);
        worst[0] = worst[0].max((got - expected).abs());
        failures += usize::from(!close(got, expected, 1e-9));
    }

    for _ in 0..1000 {
        let a = random_bag(&mut rng, 15, 10);
        let b = random_bag(&mut rng, 15, 10);
        let n_docs = rng.random_range(1..50usize);
        let mut df: HashMap<String, u32> = HashMap::new();
        for t in 0..15 {
            if rng.random_bool(0.8) {
                df.insert(format!("t{t}"), rng.random_range(0..=n_docs as u32));
            }
        }
        let vocab: Vec<String> = (0..15).map(|t| format!("t{t}")).collect();
        let dense = |bag: &BTreeMap<String, u32>| -> Vec<f64> {
            vocab
                .iter()
                .map(|t| {
                    let tf = f64::from(bag.get(t).copied().unwrap_or(0));
                    let d = f64::from(df.get(t).copied().unwrap_or(0));
                    tf * (((1 + n_docs) as f64 / (1.0 + d)).ln() + 1.0)
                })
                .collect()
        };
        let (va, vb) = (dense(&a), dense(&b));
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let expected = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
        let got = tfidf_cosine(&a, &b, &df, n_docs);
        worst[1] = worst[1].max((got - expected).abs());
        failures += usize::from(!close(got, expected, 1e-9));
    }

    for _ in 0..1000 {
        let k = rng.random_range(1..12);
        let p = random_simplex(&mut rng, k);
        let q = random_simplex(&mut rng, k);
        let mut acc = 0.0;
        for i in 0..k {
            let d = p[i].sqrt() - q[i].sqrt();
            acc += d * d;
        }
        let expected = (acc / 2.0).sqrt();
        let got = hellinger(&p, &q).unwrap();
        worst[2] = worst[2].max((got - expected).abs());
        failures += usize::from(!close(got, expected, 1e-9));
    }

    for _ in 0..1000 {
        let s_i: f64 = rng.random_range(-60.0..60.0);
        let s_j: f64 = rng.random_range(-60.0..60.0);
        let (y_i, y_j) = (rng.random_range(0..2u8), rng.random_range(0..2u8));
        let f: f64 = match y_i.cmp(&y_j) {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => -1.0,
        };
        // ln(1 + e^z) evaluated branch-wise.
        let z = -f * (s_i - s_j);
        let expected = if z > 35.0 {
            z + (-z).exp()
        } else if z < -35.0 {
            z.exp()
        } else {
            (1.0 + z.exp()).ln()
        };
        let got = pairwise_cost(s_i, s_j, y_i, y_j);
        worst[3] = worst[3].max((got - expected).abs() / expected.max(1.0));
        failures += usize::from(!close(got, expected, 1e-9));
    }
    let ln2_err = (pairwise_cost(0.25, 0.25, 1, 0) - std::f64::consts::LN_2).abs();
    let elapsed = start.elapsed();
    outcome(
        failures == 0 && ln2_err <= 1e-12 && elapsed < Duration::from_secs(5),
        format!(
            "max err jaccard {:.1e} tfidf {:.1e} hellinger {:.1e} pairwise {:.1e}; ln2 err {:.1e}; {failures} mismatches; {:.2}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            ln2_err,
            elapsed.as_secs_f64()
        ),
    )
}

/// Literal step-by-step run of the greedy degree-capped selection.
fn simulate_greedy(triples: &[ScoredPair], n: usize, k_max: usize) -> Vec<Pair> {
    let mut best: HashMap<Pair, f64> = HashMap::new();
    for t in triples {
        let w = best.entry(t.pair.clone()).or_insert(t.weight);
        if t.weight > *w {
            *w = t.weight;
        }
    }
    let mut list: Vec<(Pair, f64)> = best.into_iter().collect();
    list.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap().then(x.0.cmp(&y.0)));
    let mut out: Vec<Pair> = Vec::new();
    let mut degree: HashMap<UserId, usize> = HashMap::new();
    for k in 1..=k_max {
        for (p, _) in &list {
            if out.len() >= n {
                return out;
            }
            if out.contains(p) {
                continue;
            }
            let du = degree.get(p.a()).copied().unwrap_or(0);
            let dv = degree.get(p.b()).copied().unwrap_or(0);
            if du < k && dv < k {
                out.push(p.clone());
                *degree.entry(p.a().clone()).or_default() += 1;
                *degree.entry(p.b().clone()).or_default() += 1;
            }
        }
    }
    out
}

fn criterion_greedy() -> Outcome {
    let start = Instant::now();
    let mut rng = StageRng::seed_from_u64(202);
    let mut mismatches = 0;
    for _ in 0..500 {
        let len = rng.random_range(0..=8);
        let users = rng.random_range(2..7);
        let triples: Vec<ScoredPair> = (0..len)
            .map(|_| {
                let x = rng.random_range(0..users);
                let mut y = rng.random_range(0..users);
                while y == x {
                    y = rng.random_range(0..users);
                }
                let w = f64::from(rng.random_range(0..5u8)) / 4.0;
                ScoredPair::new(pair(x, y), w).unwrap()
            })
            .collect();
        let n = rng.random_range(0..10);
        let k_max = if rng.random_bool(0.5) {
            51
        } else {
            rng.random_range(1..4)
        };
        if select_rank2(&triples, n, k_max) != simulate_greedy(&triples, n, k_max) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(5),
        format!("{mismatches}/500 mismatches; {:.2}s", elapsed.as_secs_f64()),
    )
}

fn random_store(rng: &mut StageRng, n_users: usize) -> EventStore {
    let mut store = EventStore::new();
    let n_facts = rng.random_range(5..400);
    let n_domains = rng.random_range(3..60);
    for u in 0..n_users {
        for _ in 0..rng.random_range(1..6) {
            // Skewed toward low ids.
            let f = (rng.random::<f64>().powi(2) * n_facts as f64) as usize;
            let d = (rng.random::<f64>().powi(2) * n_domains as f64) as usize;
            store.push(EventRecord {
                user: uid(u),
                ts: rng.random_range(0..86_400 * 30),
                fact: format!("f{f}"),
                domain: format!("d{d}"),
                title_tokens: vec![],
            });
        }
    }
    store
}

fn criterion_blocking() -> Outcome {
    let mut rng = StageRng::seed_from_u64(303);
    let mut mismatches = 0;
    let mut total_pairs = 0;
    for _ in 0..50 {
        let n_users = rng.random_range(2..=200);
        let store = random_store(&mut rng, n_users);
        let profiles = build_profile_store(&store);
        let max_df = if rng.random_bool(0.3) {
            None
        } else {
            Some(rng.random_range(1..20))
        };
        let test: BTreeSet<UserId> = (0..n_users).filter(|_| rng.random_bool(0.6)).map(uid).collect();
        let (fi, di) = build_indices(&profiles, max_df);
        let got: BTreeSet<Pair> = generate_prediction_pairs(&test, &fi, &di).into_iter().collect();

        let users: Vec<(&UserId, BTreeSet<String>)> = profiles
            .iter()
            .map(|(u, p)| {
                let terms = p
                    .fact_counts
                    .keys()
                    .map(|f| format!("F{f}"))
                    .chain(p.domain_counts.keys().map(|d| format!("D{d}")))
                    .collect();
                (u, terms)
            })
            .collect();
        let mut df: HashMap<&String, usize> = HashMap::new();
        for (_, terms) in &users {
            for t in terms {
                *df.entry(t).or_default() += 1;
            }
        }
        let indexed = |t: &String| max_df.is_none_or(|cap| df[t] <= cap);
        let mut expected = BTreeSet::new();
        for (i, (u, tu)) in users.iter().enumerate() {
            for (v, tv) in &users[i + 1..] {
                if test.contains(*u) && test.contains(*v) && tu.iter().any(|t| tv.contains(t) && indexed(t)) {
                    expected.insert(canonical_pair((*u).clone(), (*v).clone()).unwrap());
                }
            }
        }
        total_pairs += expected.len();
        mismatches += usize::from(got != expected);
    }
    outcome(
        mismatches == 0,
        format!("{mismatches}/50 worlds differ; {total_pairs} oracle pairs"),
    )
}

fn criterion_negatives() -> Outcome {
    let cfg = WorldConfig {
        n_persons: 300,
        seed: 404,
        ..Default::default()
    };
    let world = generate_world(&cfg).unwrap();
    let profiles = build_profile_store(&world.events);
    let train_users = world.train_users();
    let (fi, di) = build_indices(&profiles, Some(30));
    let run = |seed| sample_negatives(&world.train_matches, &train_users, &fi, &di, seed, 3).unwrap();
    let first = run(9);
    let second = run(9);
    let positives: BTreeSet<&Pair> = world.train_matches.iter().collect();

    let exact_six = first.raw.len() == 6 * world.train_matches.len()
        && first.raw.chunks(6).zip(&world.train_matches).all(|(chunk, m)| {
            chunk[..3].iter().all(|p| p.contains(m.a())) && chunk[3..].iter().all(|p| p.contains(m.b()))
        });
    let overlap = first.raw.iter().filter(|p| positives.contains(p)).count()
        + first.samples.iter().filter(|s| positives.contains(&s.pair)).count();
    let deterministic = first.raw == second.raw && first.samples == second.samples;
    outcome(
        exact_six && overlap == 0 && deterministic,
        format!(
            "{} positives, {} raw ({:.2} per positive), {} distinct; overlap {overlap}; deterministic {deterministic}",
            world.train_matches.len(),
            first.raw.len(),
            first.raw.len() as f64 / world.train_matches.len() as f64,
            first.samples.len()
        ),
    )
}

fn random_dataset(rng: &mut StageRng, n: usize, dim: usize) -> Dataset {
    let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut x = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let margin: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + rng.random_range(-1.5..1.5);
        x.extend(row);
        y.push(f64::from(u8::from(margin > 0.0)));
    }
    if y.iter().all(|&v| v == y[0]) {
        y[0] = 1.0 - y[0];
    }
    Dataset::new(x, dim, y).unwrap()
}

fn criterion_learners() -> Outcome {
    let mut rng = StageRng::seed_from_u64(505);
    let data = random_dataset(&mut rng, 60, 5);
    let mut model = MlpModel::zeros(5, 8);
    model.standardizer = Standardizer::fit(&data);
    for w in &mut model.weights {
        *w = rng.random_range(-0.8..0.8);
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let (_, grad) = model.loss_and_gradient(&data, &rows);
    let h = 1e-5;
    let mut worst_rel: f64 = 0.0;
    for (i, g) in grad.iter().enumerate() {
        let mut plus = model.clone();
        plus.weights[i] += h;
        let mut minus = model.clone();
        minus.weights[i] -= h;
        let fd = (plus.loss_and_gradient(&data, &rows).0 - minus.loss_and_gradient(&data, &rows).0) / (2.0 * h);
        let rel = (*g - fd).abs() / (g.abs() + fd.abs()).max(1e-6);
        worst_rel = worst_rel.max(rel);
    }

    let mut increases = 0;
    let mut rounds = 0;
    for _ in 0..20 {
        let n = rng.random_range(40..300);
        let dim = rng.random_range(1..8);
        let d = random_dataset(&mut rng, n, dim);
        let params = GbdtParams {
            rounds: rng.random_range(5..40),
            max_depth: rng.random_range(1..6),
            learning_rate: rng.random_range(0.05..1.0),
            min_leaf: rng.random_range(1..10),
            ..Default::default()
        };
        let m = train_gbdt(&d, &params).unwrap();
        rounds += m.loss_history.len() - 1;
        increases += m.loss_history.windows(2).filter(|w| w[1] > w[0]).count();
    }
    outcome(
        worst_rel < 1e-4 && increases == 0,
        format!("mlp max relative gradient error {worst_rel:.2e}; gbdt {increases} loss increases over {rounds} rounds on 20 datasets"),
    )
}

struct Run {
    seed: u64,
    exp: Experiment,
}

fn criterion_stacking(runs: &[Run], elapsed: Duration) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for r in runs {
        let s = &r.exp.stack_report;
        let ok = s.stack_precision >= s.best_base();
        wins += usize::from(ok);
        parts.push(format!("{}:{:.4}/{:.4}", r.seed, s.stack_precision, s.best_base()));
    }
    outcome(
        wins >= 3 && elapsed < Duration::from_secs(600),
        format!(
            "stack >= best base in {wins}/5 (seed:stack/base {}); 5 runs took {:.0}s",
            parts.join(" "),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_ranking(runs: &[Run]) -> Outcome {
    let (mut over_clf, mut over_rank1) = (0, 0);
    let mut parts = Vec::new();
    for r in runs {
        let n = r.exp.test_gold.len();
        let f1 = |m| r.exp.report(m, n).unwrap().prf.f1;
        let (c, r1, r2) = (f1(Mode::Clf), f1(Mode::Rank1), f1(Mode::Rank2));
        over_clf += usize::from(r2 > c);
        over_rank1 += usize::from(r2 >= r1);
        parts.push(format!("{}:{c:.3}/{r1:.3}/{r2:.3}", r.seed));
    }
    outcome(
        over_clf >= 4 && over_rank1 >= 4,
        format!(
            "rank2 > clf in {over_clf}/5, rank2 >= rank1 in {over_rank1}/5 (seed:clf/rank1/rank2 F1 {})",
            parts.join(" ")
        ),
    )
}

fn criterion_sweep(runs: &[Run]) -> Outcome {
    let mut ok = 0;
    let mut total = 0;
    for r in runs {
        let n = r.exp.default_top_n();
        for mode in [Mode::Clf, Mode::Rank1, Mode::Rank2] {
            let report = r.exp.report(mode, n).unwrap();
            total += 1;
            let on_grid = report.sweep.at(n) == Some(report.prf);
            ok += usize::from(on_grid && report.sweep.best().f1 >= report.prf.f1);
        }
    }
    outcome(
        ok == total,
        format!("best swept F1 >= default-N F1 in {ok}/{total} run-modes"),
    )
}

fn criterion_components(runs: &[Run]) -> Outcome {
    let mut wins = 0;
    let mut parts = Vec::new();
    for r in runs {
        let n = r.exp.default_top_n();
        let tv1 = r.exp.report(Mode::Rank1, n).unwrap().tv_distance_to_train;
        let tv2 = r.exp.report(Mode::Rank2, n).unwrap().tv_distance_to_train;
        wins += usize::from(tv2 <= tv1);
        parts.push(format!("{}:{tv1:.3}/{tv2:.3}", r.seed));
    }
    outcome(
        wins >= 4,
        format!(
            "rank2 TV <= rank1 TV in {wins}/5 (seed:rank1/rank2 {})",
            parts.join(" ")
        ),
    )
}

fn criterion_sharing(runs: &[Run]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for r in runs {
        let s = &r.exp.gold_sharing;
        let w = &r.exp.config.world;
        let fine = (s.fact_share_fraction - w.share_rate).abs() <= 0.02
            && (s.domain_share_fraction - w.domain_share_rate).abs() <= 0.02;
        ok += usize::from(fine);
        parts.push(format!(
            "{}:{:.4}/{:.4}",
            r.seed, s.fact_share_fraction, s.domain_share_fraction
        ));
    }
    outcome(
        ok == runs.len(),
        format!(
            "{ok}/{} worlds within 0.02 of targets (seed:fact/domain {})",
            runs.len(),
            parts.join(" ")
        ),
    )
}

fn run_cli(dir: &Path, threads: usize) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_xdevice");
    let steps: &[&[&str]] = &[
        &["synth"],
        &["candidates"],
        &["featurize"],
        &["train-clf"],
        &["train-rank"],
        &["predict", "--mode", "rank2"],
        &["eval"],
    ];
    for step in steps {
        let out = Command::new(bin)
            .current_dir(dir)
            .args(*step)
            .args(["--seed", "11", "--threads", &threads.to_string()])
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{step:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn criterion_determinism() -> Outcome {
    let start = Instant::now();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    if let Err(e) = run_cli(a.path(), 1).and_then(|_| run_cli(b.path(), 3)) {
        return outcome(false, format!("pipeline failed: {e}"));
    }
    let mut same = Vec::new();
    for name in ["predictions.tsv", "report.json"] {
        let x = std::fs::read(a.path().join("work").join(name)).unwrap();
        let y = std::fs::read(b.path().join("work").join(name)).unwrap();
        same.push((name, x == y && !x.is_empty(), x.len()));
    }
    outcome(
        same.iter().all(|s| s.1),
        format!(
            "{}; {:.0}s for both runs (1 and 3 threads)",
            same.iter()
                .map(|(n, s, len)| format!("{n} {} ({len} bytes)", if *s { "identical" } else { "DIFFERS" }))
                .collect::<Vec<_>>()
                .join(", "),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id, name, o: Outcome| {
        println!(
            "[{}] {id:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };

    record(1, "formula oracles", criterion_formulas());
    record(2, "greedy selection oracle", criterion_greedy());
    record(3, "blocking oracle", criterion_blocking());
    record(4, "negative sampling contract", criterion_negatives());
    record(5, "learner numerics", criterion_learners());

    let start = Instant::now();
    let runs: Vec<Run> = SEEDS
        .iter()
        .map(|&seed| Run {
            seed,
            exp: run_experiment(&RunConfig::default().with_seed(seed)).expect("experiment runs"),
        })
        .collect();
    let elapsed = start.elapsed();
    record(6, "stacking ordering", criterion_stacking(&runs, elapsed));
    record(7, "ranking beats classification", criterion_ranking(&runs));
    record(8, "N sweep", criterion_sweep(&runs));
    record(9, "component distribution", criterion_components(&runs));
    record(10, "generator fidelity", criterion_sharing(&runs));
    drop(runs);
    record(11, "end-to-end determinism", criterion_determinism());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria pass",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
