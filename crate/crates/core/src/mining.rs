//! Relation-preserving triplet construction.
//!
//! Positives come from the precomputed relational matrix over the whole
//! training set: among same-identity images whose match count with the
//! anchor exceeds the anchor's threshold, the one closest to it. Negatives are batch-hard: the
//! nearest different-identity instance in the current batch.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};
use crate::relational::{tau, DatasetManifest, RelationalMatrix, TauPolicy, DEFAULT_TAU_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// How anchors get their positives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveStrategy {
    /// Closest count to tau in the relational matrix.
    Relational,
    /// Uniformly random other image of the same identity (ablation baseline).
    RandomSameId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub policy: TauPolicy,
    /// Threshold used by [`TauPolicy::Min`].
    pub tau_min: f64,
    pub positive: PositiveStrategy,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            policy: TauPolicy::Mean,
            tau_min: DEFAULT_TAU_MIN,
            positive: PositiveStrategy::Relational,
        }
    }
}

/// Image indices of one training batch with their class labels and, once
/// the learner has run, their embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub embeddings: Option<Vec<Vec<f64>>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// 1 when the pair's count strictly exceeds `tau_value`.
pub fn relational_indicator(mx: &RelationalMatrix, i: usize, j: usize, tau_value: f64) -> Result<bool> {
    Ok(mx.get(i, j)? as f64 > tau_value)
}

/// Positive for `anchor`, or `None` when its row has no nonzero count.
///
/// Candidates must satisfy the relational indicator (count > tau); the one
/// closest to tau wins. When no count exceeds tau (the max policy, or a
/// min floor above the whole row) the closest nonzero count is used.
pub fn select_positive(
    mx: &RelationalMatrix,
    anchor: usize,
    policy: TauPolicy,
    tau_min: f64,
) -> Result<Option<usize>> {
    let row = mx.row(anchor)?;
    let Some(t) = tau(row, policy, tau_min) else {
        return Ok(None);
    };
    Ok(closest_exceeding(row, t).or_else(|| closest_to(row, t)))
}

/// Index of the entry strictly above `t` closest to it, lowest index on ties.
pub fn closest_exceeding(row: &[u32], t: f64) -> Option<usize> {
    closest_where(row, t, |c| c as f64 > t)
}

/// Index of the nonzero entry closest to `t`, lowest index on ties.
pub fn closest_to(row: &[u32], t: f64) -> Option<usize> {
    closest_where(row, t, |c| c > 0)
}

fn closest_where(row: &[u32], t: f64, keep: impl Fn(u32) -> bool) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (j, &c) in row.iter().enumerate() {
        if c == 0 || !keep(c) {
            continue;
        }
        let gap = (c as f64 - t).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, j));
        }
    }
    best.map(|(_, j)| j)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Batch position of the nearest instance with a different label than the
/// anchor; lowest position on ties.
pub fn select_negative_batch_hard(batch: &Batch, anchor_pos: usize) -> Result<usize> {
    let emb = batch
        .embeddings
        .as_ref()
        .ok_or_else(|| Error::Config("batch has no embeddings".into()))?;
    check_index(anchor_pos, batch.len())?;
    if emb.len() != batch.len() || batch.labels.len() != batch.len() {
        return Err(Error::Dimension("batch arrays are not parallel".into()));
    }
    let label = batch.labels[anchor_pos];
    let a = &emb[anchor_pos];
    let mut best: Option<(f64, usize)> = None;
    for (pos, e) in emb.iter().enumerate() {
        if batch.labels[pos] == label {
            continue;
        }
        let d = squared_distance(a, e);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, pos));
        }
    }
    best.map(|(_, p)| p).ok_or(Error::NoNegative(anchor_pos))
}

/// One triplet per batch position whose anchor has a positive. Positives
/// come from `mx`; negatives from the batch.
pub fn mine_triplets(
    batch: &Batch,
    mx: &RelationalMatrix,
    policy: TauPolicy,
    tau_min: f64,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(batch.len());
    for pos in 0..batch.len() {
        let anchor = batch.indices[pos];
        let Some(positive) = select_positive(mx, anchor, policy, tau_min)? else {
            continue;
        };
        let neg_pos = select_negative_batch_hard(batch, pos)?;
        out.push(Triplet {
            anchor,
            positive,
            negative: batch.indices[neg_pos],
        });
    }
    Ok(out)
}

/// Like [`mine_triplets`] but with a uniformly random same-identity
/// positive. `labels` covers the whole training set.
pub fn mine_triplets_random_positive<R: Rng>(
    batch: &Batch,
    labels: &[usize],
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::with_capacity(batch.len());
    for pos in 0..batch.len() {
        let anchor = batch.indices[pos];
        check_index(anchor, labels.len())?;
        let candidates: Vec<usize> = (0..labels.len())
            .filter(|&j| j != anchor && labels[j] == labels[anchor])
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let positive = candidates[rng.random_range(0..candidates.len())];
        let neg_pos = select_negative_batch_hard(batch, pos)?;
        out.push(Triplet {
            anchor,
            positive,
            negative: batch.indices[neg_pos],
        });
    }
    Ok(out)
}

/// P identities x K instances batch sampler.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    groups: Vec<Vec<usize>>,
    labels: Vec<usize>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    /// `labels` are the dense class labels of every training image.
    pub fn new(labels: &[usize], p: usize, k: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if p == 0 || k < 2 {
            return Err(Error::Config(format!("need P >= 1 and K >= 2, got P={p} K={k}")));
        }
        if p * k != batch_size {
            return Err(Error::Config(format!(
                "P x K = {} does not equal batch size {batch_size}",
                p * k
            )));
        }
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let mut groups = vec![Vec::new(); n_classes];
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups.retain(|g| !g.is_empty());
        if groups.len() < p {
            return Err(Error::Config(format!(
                "batch needs {p} identities but only {} exist",
                groups.len()
            )));
        }
        Ok(Self {
            groups,
            labels: labels.to_vec(),
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut indices = Vec::with_capacity(self.p * self.k);
        for gi in sample(&mut self.rng, self.groups.len(), self.p).into_iter() {
            let group = &self.groups[gi];
            if group.len() >= self.k {
                for j in sample(&mut self.rng, group.len(), self.k).into_iter() {
                    indices.push(group[j]);
                }
            } else {
                for _ in 0..self.k {
                    indices.push(group[self.rng.random_range(0..group.len())]);
                }
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Batch {
            indices,
            labels,
            embeddings: None,
        }
    }
}

/// First batch of a fresh sampler seeded with `rng_seed`.
pub fn sample_batch(
    manifest: &DatasetManifest,
    rng_seed: u64,
    p: usize,
    k: usize,
    batch_size: usize,
) -> Result<Batch> {
    let (labels, _) = manifest.class_labels();
    Ok(BatchSampler::new(&labels, p, k, batch_size, rng_seed)?.next_batch())
}

/// One anchor's relational positive over the whole matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveChoice {
    pub anchor: usize,
    pub positive: usize,
    pub count: u32,
    pub tau: f64,
}

/// Positive choice for every anchor that has one, in anchor order.
pub fn positive_choices(mx: &RelationalMatrix, policy: TauPolicy, tau_min: f64) -> Result<Vec<PositiveChoice>> {
    let mut out = Vec::new();
    for anchor in 0..mx.m() {
        let row = mx.row(anchor)?;
        let Some(t) = tau(row, policy, tau_min) else {
            continue;
        };
        if let Some(positive) = select_positive(mx, anchor, policy, tau_min)? {
            out.push(PositiveChoice {
                anchor,
                positive,
                count: row[positive],
                tau: t,
            });
        }
    }
    Ok(out)
}

/// `anchor,positive,count,tau` rows.
pub fn positive_choices_csv(choices: &[PositiveChoice]) -> String {
    let mut s = String::from("anchor,positive,count,tau\n");
    for c in choices {
        s.push_str(&format!("{},{},{},{}\n", c.anchor, c.positive, c.count, c.tau));
    }
    s
}

/// Writes `anchor,positive,negative` rows.
pub fn write_triplets_csv(triplets: &[Triplet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("anchor,positive,negative\n");
    for t in triplets {
        s.push_str(&format!("{},{},{}\n", t.anchor, t.positive, t.negative));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
