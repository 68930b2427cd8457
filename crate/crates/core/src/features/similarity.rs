//! Set, bag and distribution similarities used by the pair features.
//!
//! All functions are exactly symmetric in their two arguments: sums run over
//! key-sorted merges, so the floating-point summation order never depends on
//! which side is passed first.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Visits keys of two sorted maps in key order.
fn merge<'a, K: Ord, A, B>(
    left: &'a BTreeMap<K, A>,
    right: &'a BTreeMap<K, B>,
    mut visit: impl FnMut(&'a K, Option<&'a A>, Option<&'a B>),
) {
    let mut l = left.iter().peekable();
    let mut r = right.iter().peekable();
    loop {
        match (l.peek(), r.peek()) {
            (None, None) => break,
            (Some((k, a)), None) => {
                visit(k, Some(a), None);
                l.next();
            }
            (None, Some((k, b))) => {
                visit(k, None, Some(b));
                r.next();
            }
            (Some((ka, a)), Some((kb, b))) => match ka.cmp(kb) {
                Ordering::Less => {
                    visit(ka, Some(a), None);
                    l.next();
                }
                Ordering::Greater => {
                    visit(kb, None, Some(b));
                    r.next();
                }
                Ordering::Equal => {
                    visit(ka, Some(a), Some(b));
                    l.next();
                    r.next();
                }
            },
        }
    }
}

fn key_overlap<K: Ord, A, B>(a: &BTreeMap<K, A>, b: &BTreeMap<K, B>) -> (usize, usize) {
    let (mut inter, mut union) = (0, 0);
    merge(a, b, |_, x, y| {
        union += 1;
        if x.is_some() && y.is_some() {
            inter += 1;
        }
    });
    (inter, union)
}

/// Jaccard index over the key sets; 0 when both are empty.
pub fn bag_jaccard<K: Ord, A, B>(a: &BTreeMap<K, A>, b: &BTreeMap<K, B>) -> f64 {
    let (inter, union) = key_overlap(a, b);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// |A ∩ B| / min(|A|, |B|) over key sets; 0 when either is empty.
pub fn overlap_coefficient<K: Ord, A, B>(a: &BTreeMap<K, A>, b: &BTreeMap<K, B>) -> f64 {
    let smaller = a.len().min(b.len());
    if smaller == 0 {
        return 0.0;
    }
    key_overlap(a, b).0 as f64 / smaller as f64
}

pub fn shared_keys<'a, K: Ord, A, B>(a: &'a BTreeMap<K, A>, b: &'a BTreeMap<K, B>) -> Vec<&'a K> {
    let mut out = Vec::new();
    merge(a, b, |k, x, y| {
        if x.is_some() && y.is_some() {
            out.push(k);
        }
    });
    out
}

/// Smoothed inverse document frequency, `ln((1 + n) / (1 + df)) + 1`.
pub fn idf(df: u32, n_docs: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + f64::from(df))).ln() + 1.0
}

/// Cosine of raw-count tf-idf vectors. Terms missing from `df` count as df 0.
pub fn tfidf_cosine<K: Ord + Hash>(
    a: &BTreeMap<K, u32>,
    b: &BTreeMap<K, u32>,
    df: &HashMap<K, u32>,
    n_docs: usize,
) -> f64 {
    let weight = |k: &K, count: u32| f64::from(count) * idf(df.get(k).copied().unwrap_or(0), n_docs);
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    merge(a, b, |k, x, y| {
        let wa = x.map(|&c| weight(k, c));
        let wb = y.map(|&c| weight(k, c));
        if let Some(w) = wa {
            na += w * w;
        }
        if let Some(w) = wb {
            nb += w * w;
        }
        if let (Some(p), Some(q)) = (wa, wb) {
            dot += p * q;
        }
    });
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 1.0)
}

/// Cosine of two dense non-negative vectors; 0 if either has zero norm.
pub fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

pub fn hellinger(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: q.len(),
        });
    }
    let sum: f64 = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            let d = a.max(0.0).sqrt() - b.max(0.0).sqrt();
            d * d
        })
        .sum();
    Ok((sum.sqrt() / std::f64::consts::SQRT_2).min(1.0))
}

/// L1 distance between two histograms after normalizing each to sum 1.
pub fn normalized_l1(a: &[u32], b: &[u32]) -> f64 {
    let sa: f64 = a.iter().map(|&x| f64::from(x)).sum();
    let sb: f64 = b.iter().map(|&x| f64::from(x)).sum();
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (f64::from(x) / sa - f64::from(y) / sb).abs())
        .sum()
}

/// Mean direction of a 24-bin hour histogram, in hours; bins sit at their
/// midpoints. A histogram with no dominant direction maps to 0.
pub fn circular_centroid_hour(hist: &[u32]) -> f64 {
    let n = hist.len() as f64;
    let (mut s, mut c) = (0.0, 0.0);
    for (h, &count) in hist.iter().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * (h as f64 + 0.5) / n;
        s += f64::from(count) * angle.sin();
        c += f64::from(count) * angle.cos();
    }
    let angle = s.atan2(c).rem_euclid(2.0 * std::f64::consts::PI);
    angle * n / (2.0 * std::f64::consts::PI)
}

/// Shortest distance around a 24-hour clock, in [0, 12].
pub fn circular_hour_distance(x: f64, y: f64) -> f64 {
    let d = (x - y).abs().rem_euclid(24.0);
    d.min(24.0 - d)
}

/// Jaccard over the sets of components whose probability exceeds `threshold`.
pub fn thresholded_jaccard(p: &[f64], q: &[f64], threshold: f64) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in p.iter().zip(q) {
        let (x, y) = (*a > threshold, *b > threshold);
        if x || y {
            union += 1;
        }
        if x && y {
            inter += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bag(items: &[(&str, u32)]) -> BTreeMap<String, u32> {
        items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn jaccard_cases() {
        assert!((bag_jaccard(&bag(&[("a", 1), ("b", 2)]), &bag(&[("b", 1), ("c", 1)])) - 1.0 / 3.0).abs() < 1e-15);
        let x = bag(&[("a", 3), ("b", 1)]);
        assert_eq!(bag_jaccard(&x, &x), 1.0);
        assert_eq!(bag_jaccard(&bag(&[]), &bag(&[])), 0.0);
    }

    #[test]
    fn tfidf_cases() {
        let df: HashMap<String, u32> = [("x".to_string(), 1), ("y".to_string(), 1)].into();
        let a = bag(&[("x", 1)]);
        assert!((tfidf_cosine(&a, &a, &df, 5) - 1.0).abs() < 1e-12);
        assert_eq!(tfidf_cosine(&a, &bag(&[("z", 4)]), &df, 5), 0.0);
        // idf(x) = idf(y) = ln(3/2) + 1, so cosine = w^2 / (sqrt(2) w * w) = 1/sqrt(2).
        let v = tfidf_cosine(&bag(&[("x", 1), ("y", 1)]), &bag(&[("x", 1)]), &df, 2);
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn hellinger_cases() {
        assert_eq!(hellinger(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((hellinger(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
        // sqrt(((sqrt(.5)-.5)^2 + (sqrt(.5)-sqrt(.75))^2) / 2)
        let v = hellinger(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!((v - 0.184_591_911_7).abs() < 1e-9, "{v}");
        assert!(matches!(
            hellinger(&[1.0], &[0.5, 0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn antipodal_hours() {
        let mut a = [0u32; 24];
        let mut b = [0u32; 24];
        a[9] = 5;
        b[21] = 2;
        let d = circular_hour_distance(circular_centroid_hour(&a), circular_centroid_hour(&b));
        assert!((d - 12.0).abs() < 1e-9);
        assert!((normalized_l1(&a, &b) - 2.0).abs() < 1e-15);
    }

    fn simplex(raw: Vec<f64>) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn metric_axioms(
            a in prop::collection::vec(0.01f64..1.0, 6),
            b in prop::collection::vec(0.01f64..1.0, 6),
            c in prop::collection::vec(0.01f64..1.0, 6),
        ) {
            let (p, q, r) = (simplex(a), simplex(b), simplex(c));
            let h = |x: &[f64], y: &[f64]| hellinger(x, y).unwrap();
            prop_assert!(h(&p, &q) >= 0.0);
            prop_assert_eq!(h(&p, &q), h(&q, &p));
            prop_assert!(h(&p, &r) <= h(&p, &q) + h(&q, &r) + 1e-9);
        }

        #[test]
        fn histogram_metrics(
            a in prop::collection::vec(0u32..20, 24),
            b in prop::collection::vec(0u32..20, 24),
            c in prop::collection::vec(0u32..20, 24),
        ) {
            prop_assume!(a.iter().sum::<u32>() > 0 && b.iter().sum::<u32>() > 0 && c.iter().sum::<u32>() > 0);
            prop_assert_eq!(normalized_l1(&a, &b), normalized_l1(&b, &a));
            prop_assert!(normalized_l1(&a, &c) <= normalized_l1(&a, &b) + normalized_l1(&b, &c) + 1e-9);
            let (ha, hb, hc) = (circular_centroid_hour(&a), circular_centroid_hour(&b), circular_centroid_hour(&c));
            let d = circular_hour_distance;
            prop_assert!((0.0..=12.0).contains(&d(ha, hb)));
            prop_assert_eq!(d(ha, hb), d(hb, ha));
            prop_assert!(d(ha, hc) <= d(ha, hb) + d(hb, hc) + 1e-9);
        }

        #[test]
        fn bag_measures_symmetric(
            a in prop::collection::btree_map(0u8..12, 1u32..5, 0..8),
            b in prop::collection::btree_map(0u8..12, 1u32..5, 0..8),
            df_raw in prop::collection::vec(1u32..6, 12),
        ) {
            let df: HashMap<u8, u32> = (0..12u8).map(|k| (k, df_raw[k as usize])).collect();
            prop_assert_eq!(bag_jaccard(&a, &b), bag_jaccard(&b, &a));
            prop_assert_eq!(tfidf_cosine(&a, &b, &df, 6), tfidf_cosine(&b, &a, &df, 6));
            let j = bag_jaccard(&a, &b);
            prop_assert!((0.0..=1.0).contains(&j));
        }
    }
}
