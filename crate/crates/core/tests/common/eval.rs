//! Independent metric and re-ranking oracles.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rptm_core::evalrank::DistanceMatrix;

pub fn random_ids(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Random instance where every query id also occurs in the gallery.
pub fn instance(rng: &mut ChaCha8Rng) -> (DistanceMatrix, Vec<usize>, Vec<usize>) {
    let q = rng.random_range(1..6);
    let g = rng.random_range(2..10);
    let classes = rng.random_range(1..4);
    let mut g_ids = random_ids(rng, g, classes);
    g_ids[0] = 0;
    let q_ids: Vec<usize> = (0..q).map(|_| g_ids[rng.random_range(0..g)]).collect();
    // coarse values so ties occur
    let data = (0..q * g).map(|_| rng.random_range(0..6) as f64 / 2.0).collect();
    (DistanceMatrix::new(q, g, data).unwrap(), q_ids, g_ids)
}

pub fn stable_order(row: &[f64]) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
    // insertion sort: stable by construction
    for i in 1..pairs.len() {
        let mut j = i;
        while j > 0 && pairs[j - 1].0 > pairs[j].0 {
            pairs.swap(j - 1, j);
            j -= 1;
        }
    }
    pairs.into_iter().map(|p| p.1).collect()
}

pub fn cmc_oracle(d: &DistanceMatrix, q_ids: &[usize], g_ids: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for q in 0..d.rows {
        // scan every gallery entry: a hit if some match has fewer than k
        // entries ranked ahead of it
        let row = d.row(q);
        let hit = (0..d.cols).any(|g| {
            g_ids[g] == q_ids[q]
                && (0..d.cols).filter(|&o| row[o] < row[g] || (row[o] == row[g] && o < g)).count() < k
        });
        hits += hit as usize;
    }
    hits as f64 / d.rows as f64
}

pub fn map_oracle(d: &DistanceMatrix, q_ids: &[usize], g_ids: &[usize]) -> f64 {
    let mut total = 0.0;
    for q in 0..d.rows {
        let row = d.row(q);
        let position = |g: usize| (0..d.cols).filter(|&o| row[o] < row[g] || (row[o] == row[g] && o < g)).count() + 1;
        let mut matches: Vec<usize> = (0..d.cols).filter(|&g| g_ids[g] == q_ids[q]).collect();
        // accumulate in rank order so the float sum is reproducible
        matches.sort_by_key(|&m| position(m));
        let mut ap = 0.0;
        for &m in &matches {
            let r = position(m);
            let better = matches.iter().filter(|&&o| position(o) <= r).count();
            ap += better as f64 / r as f64;
        }
        total += ap / matches.len() as f64;
    }
    total / d.rows as f64
}

/// Set-based re-implementation of the k-reciprocal Jaccard distance.
pub fn jaccard_oracle(d: &DistanceMatrix, q: usize, k1: usize, k2: usize) -> Vec<Vec<f64>> {
    let n = d.rows;
    let sq: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row: Vec<f64> = (0..n).map(|j| d.get(i, j).powi(2)).collect();
            let m = row.iter().cloned().fold(0.0, f64::max);
            row.into_iter().map(|v| v / m).collect()
        })
        .collect();
    let order: Vec<Vec<usize>> = sq.iter().map(|r| stable_order(r)).collect();
    let near = |p: usize, k: usize| -> BTreeSet<usize> { order[p].iter().take(k + 1).copied().collect() };
    let recip = |p: usize, k: usize| -> BTreeSet<usize> {
        near(p, k).into_iter().filter(|&c| near(c, k).contains(&p)).collect()
    };
    let half = (k1 as f64 / 2.0).round_ties_even() as usize;
    let v: Vec<Vec<f64>> = (0..n)
        .map(|p| {
            let base = recip(p, k1);
            let mut all = base.clone();
            for &c in &base {
                let cand = recip(c, half);
                if cand.intersection(&base).count() as f64 > 2.0 / 3.0 * cand.len() as f64 {
                    all.extend(cand);
                }
            }
            let mut row = vec![0.0; n];
            let z: f64 = all.iter().map(|&g| (-sq[p][g]).exp()).sum();
            for &g in &all {
                row[g] = (-sq[p][g]).exp() / z;
            }
            row
        })
        .collect();
    let v: Vec<Vec<f64>> = if k2 > 1 {
        (0..n)
            .map(|p| {
                let nb: Vec<usize> = order[p].iter().take(k2).copied().collect();
                (0..n).map(|j| nb.iter().map(|&r| v[r][j]).sum::<f64>() / k2 as f64).collect()
            })
            .collect()
    } else {
        v
    };
    (0..q)
        .map(|p| {
            (0..n)
                .map(|g| {
                    let inter: f64 = (0..n).map(|j| v[p][j].min(v[g][j])).sum();
                    let union: f64 = (0..n).map(|j| v[p][j].max(v[g][j])).sum();
                    1.0 - inter / union
                })
                .collect()
        })
        .collect()
}

pub fn toy_points() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0],
        vec![4.0, 4.1],
        vec![0.3, 0.1],
        vec![-0.2, 0.4],
        vec![4.2, 3.7],
        vec![2.1, 1.9],
    ]
}

