//! The relational matrix: verified match counts between every pair of
//! images that share an identity, plus the per-anchor thresholds derived
//! from it.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_index, Error, Result};
use crate::features::{extract, FeatureConfig, FeatureSet};
use crate::gmsmatch::{match_count, GmsConfig};
use crate::imageio::load_image;
use crate::rng::fnv1a64;

pub const MATRIX_MAGIC: &[u8; 4] = b"RPTM";
pub const MATRIX_VERSION: u16 = 1;
const MATRIX_HEADER_LEN: usize = 4 + 2 + 4 + 8;

/// Default threshold of the `min` policy.
pub const DEFAULT_TAU_MIN: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path as written in the manifest; relative paths resolve against
    /// [`DatasetManifest::base_dir`].
    pub path: String,
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            entries,
            base_dir: PathBuf::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, i: usize) -> PathBuf {
        let p = Path::new(&self.entries[i].path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads a `path,id` CSV. Relative paths are taken relative to the
    /// manifest's own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| Error::Format(format!("manifest header: {e}")))?;
        if headers.iter().collect::<Vec<_>>() != ["path", "id"] {
            return Err(Error::Format(format!(
                "manifest header must be \"path,id\", got {:?}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(format!("manifest row {}: {e}", i + 1)))?;
            if rec.len() != 2 || rec[0].is_empty() || rec[1].is_empty() {
                return Err(Error::Format(format!(
                    "manifest row {} must have a non-empty path and id",
                    i + 1
                )));
            }
            entries.push(ManifestEntry {
                path: rec[0].to_string(),
                id: rec[1].to_string(),
            });
        }
        let m = Self::new(entries);
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["path", "id"]).expect("write to vec");
        for e in &self.entries {
            w.write_record([&e.path, &e.id]).expect("write to vec");
        }
        let bytes = w.into_inner().expect("flush to vec");
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Paths are unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Format(format!("duplicate manifest path {}", e.path)));
            }
        }
        Ok(())
    }

    /// Paths are unique and every identity has at least two images.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for e in &self.entries {
            *counts.entry(&e.id).or_default() += 1;
        }
        let mut single: Vec<&str> = counts
            .iter()
            .filter(|(_, &c)| c < 2)
            .map(|(id, _)| *id)
            .collect();
        if !single.is_empty() {
            single.sort();
            return Err(Error::Config(format!(
                "identities with fewer than two images: {}",
                single.join(", ")
            )));
        }
        Ok(())
    }

    /// Content hash over the rows as written.
    pub fn content_hash(&self) -> u64 {
        let mut buf = Vec::new();
        for e in &self.entries {
            buf.extend_from_slice(e.path.as_bytes());
            buf.push(0x1f);
            buf.extend_from_slice(e.id.as_bytes());
            buf.push(0x1e);
        }
        fnv1a64(&buf)
    }

    /// Dense class index per entry (in order of first appearance) and the
    /// identity name of each class.
    pub fn class_labels(&self) -> (Vec<usize>, Vec<String>) {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut names = Vec::new();
        let labels = self
            .entries
            .iter()
            .map(|e| {
                *index.entry(&e.id).or_insert_with(|| {
                    names.push(e.id.clone());
                    names.len() - 1
                })
            })
            .collect();
        (labels, names)
    }
}

/// Symmetric `m x m` match-count matrix with a zero diagonal and zeros
/// between different identities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationalMatrix {
    m: usize,
    counts: Vec<u32>,
    manifest_hash: u64,
}

impl RelationalMatrix {
    pub fn zeros(m: usize, manifest_hash: u64) -> Self {
        Self {
            m,
            counts: vec![0; m * m],
            manifest_hash,
        }
    }

    /// Builds from row-major counts, checking symmetry and the zero diagonal.
    pub fn from_counts(m: usize, counts: Vec<u32>, manifest_hash: u64) -> Result<Self> {
        if counts.len() != m * m {
            return Err(Error::Dimension(format!(
                "{} counts for a {m}x{m} matrix",
                counts.len()
            )));
        }
        let mx = Self {
            m,
            counts,
            manifest_hash,
        };
        mx.check_structure()?;
        Ok(mx)
    }

    fn check_structure(&self) -> Result<()> {
        for i in 0..self.m {
            if self.counts[i * self.m + i] != 0 {
                return Err(Error::Corrupt(format!("nonzero diagonal at {i}")));
            }
            for j in i + 1..self.m {
                if self.counts[i * self.m + j] != self.counts[j * self.m + i] {
                    return Err(Error::Corrupt(format!("asymmetric entry ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn manifest_hash(&self) -> u64 {
        self.manifest_hash
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn get(&self, i: usize, j: usize) -> Result<u32> {
        check_index(i, self.m)?;
        check_index(j, self.m)?;
        Ok(self.counts[i * self.m + j])
    }

    pub fn row(&self, i: usize) -> Result<&[u32]> {
        check_index(i, self.m)?;
        Ok(&self.counts[i * self.m..(i + 1) * self.m])
    }

    /// Sets both `(i, j)` and `(j, i)`.
    pub fn set_pair(&mut self, i: usize, j: usize, count: u32) -> Result<()> {
        check_index(i, self.m)?;
        check_index(j, self.m)?;
        if i == j {
            return Err(Error::Config(format!("diagonal entry ({i}, {i}) must stay zero")));
        }
        self.counts[i * self.m + j] = count;
        self.counts[j * self.m + i] = count;
        Ok(())
    }

    /// Checks that no entry links two different identities.
    pub fn check_against(&self, manifest: &DatasetManifest) -> Result<()> {
        if manifest.content_hash() != self.manifest_hash {
            return Err(Error::HashMismatch {
                expected: self.manifest_hash,
                actual: manifest.content_hash(),
            });
        }
        if manifest.len() != self.m {
            return Err(Error::Corrupt(format!(
                "matrix has {} rows, manifest {} entries",
                self.m,
                manifest.len()
            )));
        }
        for i in 0..self.m {
            for j in 0..self.m {
                if self.counts[i * self.m + j] != 0 && manifest.entries[i].id != manifest.entries[j].id {
                    return Err(Error::Corrupt(format!("cross-identity entry ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + self.counts.len() * 4);
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.m as u32).to_le_bytes());
        out.extend_from_slice(&self.manifest_hash.to_le_bytes());
        for c in &self.counts {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MATRIX_HEADER_LEN {
            return Err(Error::Corrupt("matrix file shorter than its header".into()));
        }
        if &bytes[..4] != MATRIX_MAGIC {
            return Err(Error::Corrupt("bad matrix magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != MATRIX_VERSION {
            return Err(Error::Corrupt(format!("unsupported matrix version {version}")));
        }
        let m = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let manifest_hash = u64::from_le_bytes(bytes[10..18].try_into().unwrap());
        let payload = &bytes[MATRIX_HEADER_LEN..];
        let expected = m
            .checked_mul(m)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corrupt(format!("matrix size {m} overflows")))?;
        if payload.len() != expected {
            return Err(Error::Corrupt(format!(
                "matrix payload is {} bytes, expected {expected} for m = {m}",
                payload.len()
            )));
        }
        let counts = payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mx = Self {
            m,
            counts,
            manifest_hash,
        };
        mx.check_structure()?;
        Ok(mx)
    }
}

pub fn save_matrix(mx: &RelationalMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, mx.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<RelationalMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RelationalMatrix::from_bytes(&bytes)
}

/// Extracts features for every manifest image, in manifest order.
pub fn extract_all(manifest: &DatasetManifest, cfg: &FeatureConfig) -> Result<Vec<FeatureSet>> {
    cfg.validate()?;
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let path = manifest.resolve(i);
            load_image(&path)
                .and_then(|img| extract(&img, cfg))
                .map_err(|e| Error::Image {
                    index: i,
                    path,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Unordered same-identity pairs `(i, j)` with `i < j`.
pub fn same_id_pairs<S: AsRef<str>>(ids: &[S]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            if ids[i].as_ref() == ids[j].as_ref() {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Fills the matrix from precomputed features: each same-identity pair gets
/// the larger of its two directed match counts.
pub fn build_from_features<S: AsRef<str> + Sync>(
    features: &[FeatureSet],
    ids: &[S],
    manifest_hash: u64,
    gms: &GmsConfig,
) -> Result<RelationalMatrix> {
    gms.validate()?;
    if features.len() != ids.len() {
        return Err(Error::Dimension(format!(
            "{} feature sets for {} identities",
            features.len(),
            ids.len()
        )));
    }
    let pairs = same_id_pairs(ids);
    let counts: Vec<u32> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let fwd = match_count(&features[i], &features[j], gms)?;
            let bwd = match_count(&features[j], &features[i], gms)?;
            Ok(fwd.max(bwd) as u32)
        })
        .collect::<Result<_>>()?;
    let mut mx = RelationalMatrix::zeros(features.len(), manifest_hash);
    for (&(i, j), c) in pairs.iter().zip(counts) {
        mx.set_pair(i, j, c)?;
    }
    Ok(mx)
}

pub fn build_relational_matrix(
    manifest: &DatasetManifest,
    features: &FeatureConfig,
    gms: &GmsConfig,
) -> Result<RelationalMatrix> {
    manifest.validate()?;
    let sets = extract_all(manifest, features)?;
    let ids: Vec<&str> = manifest.entries.iter().map(|e| e.id.as_str()).collect();
    build_from_features(&sets, &ids, manifest.content_hash(), gms)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauPolicy {
    /// Fixed low threshold (hard positives).
    Min,
    /// Mean of the nonzero counts (semi-hard positives).
    Mean,
    /// Largest nonzero count (easy positives).
    Max,
}

impl std::str::FromStr for TauPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Self::Min),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!("unknown tau policy {other:?}"))),
        }
    }
}

impl std::fmt::Display for TauPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Min => "min",
            Self::Mean => "mean",
            Self::Max => "max",
        })
    }
}

/// Threshold for an anchor's count row, or `None` when the row has no
/// nonzero entry.
pub fn tau(row: &[u32], policy: TauPolicy, min_constant: f64) -> Option<f64> {
    let nonzero = row.iter().copied().filter(|&c| c > 0);
    let (n, sum, max) = nonzero.fold((0usize, 0u64, 0u32), |(n, s, m), c| {
        (n + 1, s + c as u64, m.max(c))
    });
    if n == 0 {
        return None;
    }
    Some(match policy {
        TauPolicy::Min => min_constant,
        TauPolicy::Mean => sum as f64 / n as f64,
        TauPolicy::Max => max as f64,
    })
}
