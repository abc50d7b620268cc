//! Retrieval evaluation: distance matrices, ranking, CMC, mAP and
//! k-reciprocal re-ranking.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Euclidean distances between every query and every gallery vector.
pub fn pairwise_distances(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<DistanceMatrix> {
    let dim = queries.first().or(gallery.first()).map_or(0, Vec::len);
    if queries.iter().chain(gallery).any(|v| v.len() != dim) {
        return Err(Error::Dimension("vectors must share one dimension".into()));
    }
    let mut data = Vec::with_capacity(queries.len() * gallery.len());
    for q in queries {
        for g in gallery {
            data.push(q.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    DistanceMatrix::new(queries.len(), gallery.len(), data)
}

/// Per-query gallery order and match flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub orders: Vec<Vec<usize>>,
    pub matches: Vec<Vec<bool>>,
}

impl RankingResult {
    pub fn query_count(&self) -> usize {
        self.orders.len()
    }
}

/// Ascending order of `row`, ties by index.
pub fn argsort(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    idx
}

pub fn rank<S: PartialEq>(dists: &DistanceMatrix, query_ids: &[S], gallery_ids: &[S]) -> Result<RankingResult> {
    rank_with_exclusions(dists, query_ids, gallery_ids, None)
}

/// Ranks with an optional per-query mask of gallery entries to leave out
/// (`exclude[q][g] == true` removes `g` from query `q`'s list).
pub fn rank_with_exclusions<S: PartialEq>(
    dists: &DistanceMatrix,
    query_ids: &[S],
    gallery_ids: &[S],
    exclude: Option<&[Vec<bool>]>,
) -> Result<RankingResult> {
    if query_ids.len() != dists.rows || gallery_ids.len() != dists.cols {
        return Err(Error::Dimension(format!(
            "{} query ids and {} gallery ids for a {}x{} matrix",
            query_ids.len(),
            gallery_ids.len(),
            dists.rows,
            dists.cols
        )));
    }
    if let Some(ex) = exclude {
        if ex.len() != dists.rows || ex.iter().any(|r| r.len() != dists.cols) {
            return Err(Error::Dimension("exclusion mask shape differs from matrix".into()));
        }
    }
    let mut orders = Vec::with_capacity(dists.rows);
    let mut matches = Vec::with_capacity(dists.rows);
    for q in 0..dists.rows {
        let order: Vec<usize> = argsort(dists.row(q))
            .into_iter()
            .filter(|&g| exclude.is_none_or(|ex| !ex[q][g]))
            .collect();
        matches.push(order.iter().map(|&g| gallery_ids[g] == query_ids[q]).collect());
        orders.push(order);
    }
    Ok(RankingResult { orders, matches })
}

fn check_has_matches(result: &RankingResult) -> Result<()> {
    if let Some(q) = result.matches.iter().position(|m| !m.iter().any(|&b| b)) {
        return Err(Error::Config(format!("query {q} has no gallery match")));
    }
    Ok(())
}

/// Fraction of queries with a match in their top `k`.
pub fn cmc(result: &RankingResult, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("cmc rank must be at least 1".into()));
    }
    check_has_matches(result)?;
    if result.query_count() == 0 {
        return Ok(0.0);
    }
    let hits = result
        .matches
        .iter()
        .filter(|m| m.iter().take(k).any(|&b| b))
        .count();
    Ok(hits as f64 / result.query_count() as f64)
}

/// Average precision of one ranked match-flag list.
pub fn average_precision(flags: &[bool]) -> f64 {
    let total = flags.iter().filter(|&&b| b).count();
    if total == 0 {
        return 0.0;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, &hit) in flags.iter().enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    sum / total as f64
}

pub fn mean_average_precision(result: &RankingResult) -> Result<f64> {
    check_has_matches(result)?;
    if result.query_count() == 0 {
        return Ok(0.0);
    }
    Ok(result.matches.iter().map(|m| average_precision(m)).sum::<f64>() / result.query_count() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub k1: usize,
    pub k2: usize,
    /// Weight of the original distance in the blend.
    pub eta: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k1: 60,
            k2: 15,
            eta: 0.2,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= self.k2 && self.k2 >= 1) {
            return Err(Error::Config(format!(
                "re-ranking needs k1 >= k2 >= 1, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// Intermediate products of re-ranking over the `n = q + g` joint set.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankParts {
    /// Squared original distances with each row divided by its maximum.
    pub normalized: DistanceMatrix,
    /// Sparse neighbour encodings after local query expansion, `n x n`.
    pub encodings: DistanceMatrix,
    /// Jaccard distances from every query to every joint-set point, `q x n`.
    pub jaccard: DistanceMatrix,
}

/// Rounds half to even, matching the usual reference implementation's `k1/2`.
fn half_k(k1: usize) -> usize {
    (k1 as f64 / 2.0).round_ties_even() as usize
}

/// Members of `forward[..=k]` that also list `p` within their own
/// `k + 1` nearest neighbours.
fn k_reciprocal(ranks: &[Vec<usize>], p: usize, k: usize) -> Vec<usize> {
    let n = ranks.len();
    let k = k.min(n - 1);
    ranks[p][..=k]
        .iter()
        .copied()
        .filter(|&c| ranks[c][..=k].contains(&p))
        .collect()
}

/// Neighbour sets, encodings and Jaccard distances for `all` over the joint
/// query-then-gallery set; the first `query_count` rows are queries.
pub fn rerank_parts(all: &DistanceMatrix, query_count: usize, k1: usize, k2: usize) -> Result<RerankParts> {
    if all.rows != all.cols {
        return Err(Error::Dimension("joint distance matrix must be square".into()));
    }
    let n = all.rows;
    if query_count > n {
        return Err(Error::Dimension(format!("{query_count} queries in a joint set of {n}")));
    }
    if !(k1 >= k2 && k2 >= 1) {
        return Err(Error::Config(format!(
            "re-ranking needs k1 >= k2 >= 1, got k1={k1} k2={k2}"
        )));
    }
    if n == 0 {
        let empty = DistanceMatrix::new(0, 0, vec![])?;
        return Ok(RerankParts {
            normalized: empty.clone(),
            encodings: empty,
            jaccard: DistanceMatrix::new(query_count, 0, vec![])?,
        });
    }

    // squared distances, each row scaled by its maximum
    let mut normalized = all.clone();
    for r in 0..n {
        let row = &mut normalized.data[r * n..(r + 1) * n];
        row.iter_mut().for_each(|v| *v *= *v);
        let max = row.iter().copied().fold(0.0f64, f64::max);
        if max > 0.0 {
            row.iter_mut().for_each(|v| *v /= max);
        }
    }
    let ranks: Vec<Vec<usize>> = (0..n).map(|r| argsort(normalized.row(r))).collect();

    let mut enc = vec![0.0f64; n * n];
    let half = half_k(k1);
    for p in 0..n {
        let base = k_reciprocal(&ranks, p, k1);
        let mut expanded = base.clone();
        for &c in &base {
            let cand = k_reciprocal(&ranks, c, half);
            let shared = cand.iter().filter(|x| base.contains(x)).count();
            if shared as f64 > 2.0 / 3.0 * cand.len() as f64 {
                expanded.extend(cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        let weights: Vec<f64> = expanded.iter().map(|&j| (-normalized.get(p, j)).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (&j, w) in expanded.iter().zip(weights) {
            enc[p * n + j] = w / total;
        }
    }

    if k2 > 1 {
        let k2 = k2.min(n);
        let mut expanded = vec![0.0f64; n * n];
        for p in 0..n {
            for &nb in &ranks[p][..k2] {
                for j in 0..n {
                    expanded[p * n + j] += enc[nb * n + j];
                }
            }
            for j in 0..n {
                expanded[p * n + j] /= k2 as f64;
            }
        }
        enc = expanded;
    }

    // inverted index over nonzero encoding columns
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); n];
    for p in 0..n {
        for j in 0..n {
            if enc[p * n + j] != 0.0 {
                holders[j].push(p);
            }
        }
    }
    let mut jaccard = vec![0.0f64; query_count * n];
    for q in 0..query_count {
        let mut overlap = vec![0.0f64; n];
        for j in 0..n {
            let vq = enc[q * n + j];
            if vq == 0.0 {
                continue;
            }
            for &p in &holders[j] {
                overlap[p] += vq.min(enc[p * n + j]);
            }
        }
        for p in 0..n {
            jaccard[q * n + p] = 1.0 - overlap[p] / (2.0 - overlap[p]);
        }
    }

    Ok(RerankParts {
        normalized,
        encodings: DistanceMatrix::new(n, n, enc)?,
        jaccard: DistanceMatrix::new(query_count, n, jaccard)?,
    })
}

/// Re-ranked `q x g` distances `eta * d + (1 - eta) * d_J`, where `d` is the
/// row-normalised squared original distance and `d_J` the Jaccard distance
/// between k-reciprocal encodings. `all` holds plain Euclidean distances.
pub fn k_reciprocal_rerank(all: &DistanceMatrix, query_count: usize, cfg: &RerankConfig) -> Result<DistanceMatrix> {
    cfg.validate()?;
    let parts = rerank_parts(all, query_count, cfg.k1, cfg.k2)?;
    let n = all.rows;
    let g = n - query_count;
    let mut out = Vec::with_capacity(query_count * g);
    for q in 0..query_count {
        for j in query_count..n {
            out.push(cfg.eta * parts.normalized.get(q, j) + (1.0 - cfg.eta) * parts.jaccard.get(q, j));
        }
    }
    DistanceMatrix::new(query_count, g, out)
}

/// Joint `(q + g) x (q + g)` Euclidean distances, queries first.
pub fn joint_distances(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<DistanceMatrix> {
    let all: Vec<Vec<f64>> = queries.iter().chain(gallery).cloned().collect();
    pairwise_distances(&all, &all)
}

/// Headline metrics of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
}

impl Metrics {
    pub fn from_ranking(r: &RankingResult) -> Result<Self> {
        Ok(Self {
            map: mean_average_precision(r)?,
            cmc1: cmc(r, 1)?,
            cmc5: cmc(r, 5)?,
            cmc10: cmc(r, 10)?,
        })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        format!(
            "metric,value\nmAP,{}\ncmc@1,{}\ncmc@5,{}\ncmc@10,{}\n",
            self.map, self.cmc1, self.cmc5, self.cmc10
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Distance, optional re-ranking, ranking and metrics in one call. Queries
/// without any gallery match are dropped first.
pub fn evaluate_embeddings<S: PartialEq + Clone>(
    query: &[Vec<f64>],
    query_ids: &[S],
    gallery: &[Vec<f64>],
    gallery_ids: &[S],
    rerank: Option<&RerankConfig>,
) -> Result<Metrics> {
    if query.len() != query_ids.len() || gallery.len() != gallery_ids.len() {
        return Err(Error::Dimension("embeddings and ids differ in length".into()));
    }
    let keep: Vec<usize> = (0..query.len())
        .filter(|&q| gallery_ids.contains(&query_ids[q]))
        .collect();
    if keep.is_empty() {
        return Err(Error::Config("no query has a gallery match".into()));
    }
    let query: Vec<Vec<f64>> = keep.iter().map(|&q| query[q].clone()).collect();
    let query_ids: Vec<S> = keep.iter().map(|&q| query_ids[q].clone()).collect();
    let dists = match rerank {
        Some(cfg) => k_reciprocal_rerank(&joint_distances(&query, gallery)?, query.len(), cfg)?,
        None => pairwise_distances(&query, gallery)?,
    };
    Metrics::from_ranking(&rank(&dists, &query_ids, gallery_ids)?)
}

pub const EMBEDDING_MAGIC: &[u8; 7] = b"RPTMEMB";
pub const EMBEDDING_VERSION: u16 = 1;

/// Little-endian embedding file: magic, version, count, dim, f32 vectors.
pub fn embeddings_to_bytes(vectors: &[Vec<f64>]) -> Result<Vec<u8>> {
    let dim = vectors.first().map_or(0, Vec::len);
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Dimension("embeddings must share one dimension".into()));
    }
    let mut out = Vec::with_capacity(17 + vectors.len() * dim * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(vectors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in vectors {
        for &x in v {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    if bytes.len() < 17 || &bytes[..7] != EMBEDDING_MAGIC {
        return Err(Error::Corrupt("bad embedding file magic".into()));
    }
    let version = u16::from_le_bytes([bytes[7], bytes[8]]);
    if version != EMBEDDING_VERSION {
        return Err(Error::Corrupt(format!("unsupported embedding version {version}")));
    }
    let count = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[13..17].try_into().unwrap()) as usize;
    if bytes.len() - 17 != count * dim * 4 {
        return Err(Error::Corrupt(format!(
            "embedding payload is {} bytes, expected {}",
            bytes.len() - 17,
            count * dim * 4
        )));
    }
    let values: Vec<f64> = bytes[17..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(if dim == 0 {
        vec![Vec::new(); count]
    } else {
        values.chunks_exact(dim).map(<[f64]>::to_vec).collect()
    })
}

pub fn save_embeddings(vectors: &[Vec<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, embeddings_to_bytes(vectors)?).map_err(|e| Error::io(path, e))
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    embeddings_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitEntry {
    pub index: usize,
    pub id: String,
    pub split: Split,
}

/// Reads the `index,id,split` sidecar.
pub fn parse_split_csv(text: &str) -> Result<Vec<SplitEntry>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| Error::Format(format!("split header: {e}")))?;
    if headers.iter().collect::<Vec<_>>() != ["index", "id", "split"] {
        return Err(Error::Format("split header must be \"index,id,split\"".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("split row {}: {e}", i + 1)))?;
        let index = rec[0]
            .parse()
            .map_err(|_| Error::Format(format!("split row {}: bad index {:?}", i + 1, &rec[0])))?;
        let split = match &rec[2] {
            "query" => Split::Query,
            "gallery" => Split::Gallery,
            other => return Err(Error::Format(format!("split row {}: unknown split {other:?}", i + 1))),
        };
        out.push(SplitEntry {
            index,
            id: rec[1].to_string(),
            split,
        });
    }
    Ok(out)
}

pub fn load_split(path: impl AsRef<Path>) -> Result<Vec<SplitEntry>> {
    let path = path.as_ref();
    parse_split_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn split_csv(entries: &[SplitEntry]) -> String {
    let mut s = String::from("index,id,split\n");
    for e in entries {
        let split = match e.split {
            Split::Query => "query",
            Split::Gallery => "gallery",
        };
        s.push_str(&format!("{},{},{}\n", e.index, e.id, split));
    }
    s
}
