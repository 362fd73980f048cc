//! Independent brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;

/// `ceil(j n / 10)` in integer arithmetic, for coverage `j / 10`.
pub fn k_for_tenths(j: usize, n: usize) -> usize {
    (j * n).div_ceil(10).max(1)
}

/// Scans every score as a candidate threshold and keeps the largest one
/// that still admits at least `k` samples.
pub fn brute_force_tau(scores: &[f64], k: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut found = false;
    for &t in scores {
        let admitted = scores.iter().filter(|&&s| s >= t).count();
        if admitted >= k && (!found || t > best) {
            best = t;
            found = true;
        }
    }
    assert!(found, "k exceeds n");
    best
}

/// Exactly `k` samples: everything strictly above `tau`, then ties at
/// `tau` by ascending index.
pub fn exact_k_mask(scores: &[f64], tau: f64, k: usize) -> Vec<bool> {
    let mut mask: Vec<bool> = scores.iter().map(|&s| s > tau).collect();
    let mut need = k - mask.iter().filter(|&&b| b).count();
    for (i, &s) in scores.iter().enumerate() {
        if need == 0 {
            break;
        }
        if s == tau {
            mask[i] = true;
            need -= 1;
        }
    }
    mask
}

/// Top-`k` by descending score, ties to the lower index.
pub fn top_k_mask(scores: &[f64], k: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in &idx[..k] {
        mask[i] = true;
    }
    mask
}

pub fn risk_of(mask: &[bool], pred: &[usize], truth: &[usize]) -> f64 {
    let sel = mask.iter().filter(|&&m| m).count();
    let wrong = (0..mask.len()).filter(|&i| mask[i] && pred[i] != truth[i]).count();
    wrong as f64 / sel as f64
}

/// Scores mixing continuous values, a few heavily tied levels, and `-inf`.
pub fn random_scores<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let p_inf = rng.random_range(0.0..0.3);
    let p_tie = rng.random_range(0.0..0.6);
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            if u < p_inf {
                f64::NEG_INFINITY
            } else if u < p_inf + p_tie {
                [0.0, 0.25, 0.5, 1.0][rng.random_range(0..4)]
            } else {
                rng.random_range(-1.0..2.0)
            }
        })
        .collect()
}
