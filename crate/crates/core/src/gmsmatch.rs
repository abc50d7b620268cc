//! Brute-force Hamming matching and grid-based motion statistics (GMS)
//! verification.
//!
//! A candidate match is kept when its grid-cell pair is backed by enough
//! other matches between the neighbouring cells of both images. Support is
//! the sum over the nine cells of the 3x3 neighbourhood of the source cell,
//! each paired with the corresponding neighbour of the target cell; the
//! threshold is `alpha * sqrt(n / 9)` where `n` counts all matches whose
//! source lies in that neighbourhood.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{BinaryDescriptor, FeatureSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Match {
    pub query_idx: usize,
    pub train_idx: usize,
    pub distance: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    pub accepted: Vec<bool>,
    pub grid_size: usize,
}

impl MatchSet {
    pub fn accepted_count(&self) -> usize {
        self.accepted.iter().filter(|&&a| a).count()
    }

    pub fn accepted_matches(&self) -> impl Iterator<Item = &Match> {
        self.matches
            .iter()
            .zip(&self.accepted)
            .filter_map(|(m, &a)| a.then_some(m))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmsConfig {
    pub grid_size: usize,
    pub alpha: f64,
    pub with_rotation: bool,
    pub with_shifts: bool,
}

impl Default for GmsConfig {
    fn default() -> Self {
        Self {
            grid_size: 20,
            alpha: 6.0,
            with_rotation: true,
            with_shifts: true,
        }
    }
}

impl GmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 1 {
            return Err(Error::Config("grid_size must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Neighbour orderings of the target cell's 3x3 block. Entry `k` of a row is
/// the target-block position (row-major, 1-based) paired with source-block
/// position `k + 1`. Row 0 is the identity; the others are the seven
/// rotations in 45-degree steps.
pub const ROTATION_PATTERNS: [[usize; 9]; 8] = [
    [1, 2, 3, 4, 5, 6, 7, 8, 9],
    [4, 1, 2, 7, 5, 3, 8, 9, 6],
    [7, 4, 1, 8, 5, 2, 9, 6, 3],
    [8, 7, 4, 9, 5, 1, 6, 3, 2],
    [9, 8, 7, 6, 5, 4, 3, 2, 1],
    [6, 9, 8, 3, 5, 7, 2, 1, 4],
    [3, 6, 9, 2, 5, 8, 1, 4, 7],
    [2, 3, 6, 1, 5, 9, 4, 7, 8],
];

/// Half-cell offsets applied to the source grid.
const SHIFTS: [(f64, f64); 4] = [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)];

#[inline]
pub fn hamming_distance(a: &BinaryDescriptor, b: &BinaryDescriptor) -> u32 {
    let (wa, wb) = (a.as_words(), b.as_words());
    (0..4).map(|i| (wa[i] ^ wb[i]).count_ones()).sum()
}

/// Nearest neighbour in `b` for every descriptor of `a`; ties go to the
/// lowest train index.
pub fn match_brute_force(a: &FeatureSet, b: &FeatureSet) -> Vec<Match> {
    if b.descriptors.is_empty() {
        return Vec::new();
    }
    let train: Vec<[u64; 4]> = b.descriptors.iter().map(|d| d.as_words()).collect();
    a.descriptors
        .iter()
        .enumerate()
        .map(|(qi, d)| {
            let q = d.as_words();
            let mut best = (u32::MAX, 0usize);
            for (ti, t) in train.iter().enumerate() {
                let dist = (q[0] ^ t[0]).count_ones()
                    + (q[1] ^ t[1]).count_ones()
                    + (q[2] ^ t[2]).count_ones()
                    + (q[3] ^ t[3]).count_ones();
                if dist < best.0 {
                    best = (dist, ti);
                }
            }
            Match {
                query_idx: qi,
                train_idx: best.1,
                distance: best.0,
            }
        })
        .collect()
}

/// Grid cell as `(column, row)`.
type Cell = (usize, usize);

struct Grid {
    size: usize,
}

impl Grid {
    /// Cell of a point at fractional position `(fx, fy)` after shifting the
    /// grid by `shift` cells, or `None` when it falls off the shifted grid.
    fn cell(&self, fx: f64, fy: f64, shift: (f64, f64)) -> Option<Cell> {
        let g = self.size as f64;
        let cx = (fx * g + shift.0).floor();
        let cy = (fy * g + shift.1).floor();
        if cx < 0.0 || cy < 0.0 || cx >= g || cy >= g {
            None
        } else {
            Some((cx as usize, cy as usize))
        }
    }

    /// 3x3 neighbourhood in row-major order; off-grid neighbours are `None`.
    fn neighbourhood(&self, (cx, cy): Cell) -> [Option<usize>; 9] {
        let mut out = [None; 9];
        let g = self.size as i64;
        for (k, slot) in out.iter_mut().enumerate() {
            let nx = cx as i64 + (k % 3) as i64 - 1;
            let ny = cy as i64 + (k / 3) as i64 - 1;
            if nx >= 0 && ny >= 0 && nx < g && ny < g {
                *slot = Some((ny * g + nx) as usize);
            }
        }
        out
    }
}

fn fraction(v: f32, extent: usize) -> f64 {
    (v as f64 / extent.max(1) as f64).clamp(0.0, 1.0 - f64::EPSILON)
}

fn verify(
    matches: &[Match],
    a: &FeatureSet,
    b: &FeatureSet,
    cfg: &GmsConfig,
    patterns: &[[usize; 9]],
) -> Result<MatchSet> {
    cfg.validate()?;
    for m in matches {
        if m.query_idx >= a.len() || m.train_idx >= b.len() {
            return Err(Error::Index {
                index: m.query_idx.max(m.train_idx),
                len: a.len().min(b.len()),
            });
        }
    }
    let grid = Grid {
        size: cfg.grid_size,
    };
    let shifts: &[(f64, f64)] = if cfg.with_shifts { &SHIFTS } else { &SHIFTS[..1] };
    let mut accepted = vec![false; matches.len()];

    let targets: Vec<Cell> = matches
        .iter()
        .map(|m| {
            let kp = &b.keypoints[m.train_idx];
            grid.cell(fraction(kp.x, b.image_dims.0), fraction(kp.y, b.image_dims.1), (0.0, 0.0))
                .expect("unshifted grid covers the image")
        })
        .collect();

    for &shift in shifts {
        let mut pair_counts: HashMap<Cell, u32> = HashMap::new();
        let mut source_counts = vec![0u32; cfg.grid_size * cfg.grid_size];
        let mut assigned: Vec<Option<(Cell, Cell)>> = Vec::with_capacity(matches.len());
        for (m, &tcell) in matches.iter().zip(&targets) {
            let kp = &a.keypoints[m.query_idx];
            let scell =
                grid.cell(fraction(kp.x, a.image_dims.0), fraction(kp.y, a.image_dims.1), shift);
            match scell {
                Some(sc) => {
                    let si = sc.1 * cfg.grid_size + sc.0;
                    let ti = tcell.1 * cfg.grid_size + tcell.0;
                    *pair_counts.entry((si, ti)).or_insert(0) += 1;
                    source_counts[si] += 1;
                    assigned.push(Some((sc, tcell)));
                }
                None => assigned.push(None),
            }
        }

        let mut verdicts: HashMap<Cell, bool> = HashMap::new();
        for (i, cells) in assigned.iter().enumerate() {
            let Some((sc, tc)) = *cells else { continue };
            let key = (sc.1 * cfg.grid_size + sc.0, tc.1 * cfg.grid_size + tc.0);
            let ok = *verdicts.entry(key).or_insert_with(|| {
                let snb = grid.neighbourhood(sc);
                let tnb = grid.neighbourhood(tc);
                let n: u32 = snb.iter().flatten().map(|&c| source_counts[c]).sum();
                let threshold = cfg.alpha * (n as f64 / 9.0).sqrt();
                patterns.iter().any(|pattern| {
                    let support: u32 = (0..9)
                        .filter_map(|k| {
                            let s = snb[k]?;
                            let t = tnb[pattern[k] - 1]?;
                            pair_counts.get(&(s, t)).copied()
                        })
                        .sum();
                    support as f64 > threshold
                })
            });
            if ok {
                accepted[i] = true;
            }
        }
    }

    Ok(MatchSet {
        matches: matches.to_vec(),
        accepted,
        grid_size: cfg.grid_size,
    })
}

/// GMS verdict for each candidate match. With rotation enabled a cell pair
/// passes if any of the eight neighbour orderings clears the threshold; with
/// shifts enabled a match passes if any of the four half-cell grid shifts
/// accepts it.
pub fn gms_verify(
    matches: &[Match],
    a: &FeatureSet,
    b: &FeatureSet,
    cfg: &GmsConfig,
) -> Result<MatchSet> {
    let patterns: &[[usize; 9]] = if cfg.with_rotation {
        &ROTATION_PATTERNS
    } else {
        &ROTATION_PATTERNS[..1]
    };
    verify(matches, a, b, cfg, patterns)
}

/// GMS with a single neighbour ordering from [`ROTATION_PATTERNS`],
/// ignoring `cfg.with_rotation`.
pub fn gms_verify_with_ordering(
    matches: &[Match],
    a: &FeatureSet,
    b: &FeatureSet,
    cfg: &GmsConfig,
    ordering: usize,
) -> Result<MatchSet> {
    let pattern = ROTATION_PATTERNS
        .get(ordering)
        .ok_or(Error::Index {
            index: ordering,
            len: ROTATION_PATTERNS.len(),
        })?;
    verify(matches, a, b, cfg, std::slice::from_ref(pattern))
}

/// Number of GMS-accepted nearest-neighbour matches from `a` to `b`.
pub fn match_count(a: &FeatureSet, b: &FeatureSet, cfg: &GmsConfig) -> Result<usize> {
    cfg.validate()?;
    if a.is_empty() || b.is_empty() {
        return Ok(0);
    }
    let matches = match_brute_force(a, b);
    Ok(gms_verify(&matches, a, b, cfg)?.accepted_count())
}
