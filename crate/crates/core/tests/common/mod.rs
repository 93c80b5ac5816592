//! Brute-force reference implementations used by the integration tests.
//! These deliberately share no code with the library beyond plain data types.

#![allow(dead_code)]

use hiercon::linalg::{keyed_rng, Matrix};
use hiercon::taxonomy::{LabelTriple, Level};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn sim(z: &Matrix, a: usize, b: usize) -> f64 {
    let mut s = 0.0;
    for k in 0..z.cols() {
        s += z[(a, k)] * z[(b, k)];
    }
    s
}

/// `log Σ_{n≠i} exp(zᵢ·zₙ/τ) − zᵢ·zₚ/τ`, summed naively.
pub fn pair_term(z: &Matrix, i: usize, p: usize, tau: f64) -> f64 {
    let mut denom = 0.0;
    for n in 0..z.rows() {
        if n != i {
            denom += (sim(z, i, n) / tau).exp();
        }
    }
    denom.ln() - sim(z, i, p) / tau
}

fn label_at(t: &LabelTriple, level: Level) -> &str {
    match level {
        Level::Individual => &t.individual,
        Level::Species => &t.species,
        Level::Taxon => &t.taxon,
    }
}

/// All positive pair terms of one level, anchor-major, with the anchor's
/// positive count.
pub fn level_pairs_generic<T: PartialEq>(z: &Matrix, labels: &[T], tau: f64) -> Vec<(usize, usize, f64, usize)> {
    let b = labels.len();
    let mut out = Vec::new();
    for i in 0..b {
        let mut count = 0;
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                count += 1;
            }
        }
        for p in 0..b {
            if p != i && labels[p] == labels[i] {
                out.push((i, p, pair_term(z, i, p, tau), count));
            }
        }
    }
    out
}

pub fn level_pairs(z: &Matrix, labels: &[LabelTriple], level: Level, tau: f64) -> Vec<(usize, usize, f64, usize)> {
    let l: Vec<&str> = labels.iter().map(|t| label_at(t, level)).collect();
    level_pairs_generic(z, &l, tau)
}

/// `Σᵢ (1/|P(i)|) Σₚ ℓ(i, p)` over arbitrary labels.
pub fn supcon_oracle<T: PartialEq>(z: &Matrix, labels: &[T], tau: f64) -> f64 {
    level_pairs_generic(z, labels, tau)
        .into_iter()
        .map(|(_, _, term, count)| term / count as f64)
        .sum()
}

/// `(1/|L|) Σ_l λ_l L_l`, optionally flooring each level's pair terms by the
/// previous level's largest raw term.
pub fn hierarchical_oracle(
    levels: &[(Level, &Matrix)],
    labels: &[LabelTriple],
    lambdas: [f64; 3],
    tau: f64,
    clamp: bool,
) -> f64 {
    let mut total = 0.0;
    let mut prev_max: Option<f64> = None;
    for (idx, (level, z)) in levels.iter().enumerate() {
        let pairs = level_pairs(z, labels, *level, tau);
        let floor = if clamp && idx > 0 { prev_max } else { None };
        let mut loss = 0.0;
        for &(_, _, term, count) in &pairs {
            let t = match floor {
                Some(f) if term < f => f,
                _ => term,
            };
            loss += t / count as f64;
        }
        let lambda = match level {
            Level::Individual => lambdas[0],
            Level::Species => lambdas[1],
            Level::Taxon => lambdas[2],
        };
        total += lambda * loss;
        prev_max = pairs.iter().map(|p| p.2).fold(None, |m: Option<f64>, t| Some(m.map_or(t, |m| m.max(t))));
    }
    total / levels.len() as f64
}

/// `(distance, reference index)` for every reference, sorted.
pub fn sorted_distances(refs: &[Vec<f64>], query: &[f64], euclidean: bool, skip: Option<usize>) -> Vec<(f64, usize)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all = Vec::new();
    for (i, r) in refs.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        let d = if euclidean {
            r.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        } else {
            let dot: f64 = r.iter().zip(query).map(|(a, b)| a * b).sum();
            1.0 - dot / (norm(r) * norm(query))
        };
        all.push((d, i));
    }
    // Insertion sort keeps this independent of the library's ordering code.
    for a in 1..all.len() {
        let mut b = a;
        while b > 0 && (all[b].0 < all[b - 1].0 || (all[b].0 == all[b - 1].0 && all[b].1 < all[b - 1].1)) {
            all.swap(b, b - 1);
            b -= 1;
        }
    }
    all
}

/// Majority label among `neighbours`; ties by smaller summed distance, then
/// lexicographic order.
pub fn vote(neighbours: &[(f64, usize)], labels: &[String]) -> String {
    let mut best: Option<(String, usize, f64)> = None;
    let mut seen: Vec<String> = neighbours.iter().map(|n| labels[n.1].clone()).collect();
    seen.sort();
    seen.dedup();
    for label in seen {
        let count = neighbours.iter().filter(|n| labels[n.1] == label).count();
        let dist: f64 = neighbours.iter().filter(|n| labels[n.1] == label).map(|n| n.0).sum();
        let better = match &best {
            None => true,
            Some((_, c, d)) => count > *c || (count == *c && dist < *d),
        };
        if better {
            best = Some((label, count, dist));
        }
    }
    best.unwrap().0
}

/// Mean per-class recall over the classes that occur in `truths`.
pub fn balanced_accuracy_oracle(preds: &[&str], truths: &[&str]) -> f64 {
    let mut classes: Vec<&str> = truths.to_vec();
    classes.sort();
    classes.dedup();
    let mut sum = 0.0;
    for c in &classes {
        let total = truths.iter().filter(|t| *t == c).count();
        let hits = truths.iter().zip(preds).filter(|(t, p)| *t == c && *p == c).count();
        sum += hits as f64 / total as f64;
    }
    sum / classes.len() as f64
}

pub fn rng(index: u64) -> ChaCha8Rng {
    keyed_rng(0xACCE97, 0x7E57, index)
}

pub fn unit_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / n));
    }
    Matrix::from_vec(rows, cols, data)
}

/// Random batch labels from a two-taxon, four-species, six-individual tree.
/// Always contains at least one individual-level positive pair.
pub fn random_labels(rng: &mut impl Rng, batch: usize) -> Vec<LabelTriple> {
    const TREE: [(&str, &str, &str); 6] = [
        ("i0", "s0", "t0"),
        ("i1", "s0", "t0"),
        ("i2", "s1", "t0"),
        ("i3", "s2", "t1"),
        ("i4", "s2", "t1"),
        ("i5", "s3", "t1"),
    ];
    loop {
        let labels: Vec<LabelTriple> = (0..batch)
            .map(|_| {
                let (i, s, t) = TREE[rng.random_range(0..TREE.len())];
                LabelTriple::new(i, s, t).unwrap()
            })
            .collect();
        let has_pair = (0..batch).any(|a| (0..batch).any(|b| a != b && labels[a].individual == labels[b].individual));
        if has_pair {
            return labels;
        }
    }
}
