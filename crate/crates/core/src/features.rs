//! Oriented FAST keypoints with steered 256-bit binary descriptors.
//!
//! Detection runs the FAST-9 segment test on every pyramid level, ranks the
//! corners by Harris response, suppresses non-maxima in a 3x3 window and
//! keeps the strongest `max_features`. Each keypoint is oriented by the
//! intensity centroid of a radius-15 disc. Descriptors compare 256 fixed
//! point pairs in a smoothed 31x31 patch rotated by the keypoint angle.

use std::f64::consts::TAU;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{build_pyramid, resize_bilinear, GrayImage};

/// Half-width of the descriptor patch.
pub const PATCH_RADIUS: i32 = 15;
/// Keypoints closer than this to a level border are not described.
pub const DESCRIPTOR_BORDER: usize = 16;
/// Radius of the disc used for the orientation centroid.
pub const ORIENTATION_RADIUS: i32 = 15;

const HARRIS_BLOCK_RADIUS: i32 = 3;
const SMOOTHING_SIGMA: f64 = 2.0;
const SMOOTHING_RADIUS: i32 = 3;

const PAIR_TABLE: &str = include_str!("../data/brief_pairs.txt");

/// Bresenham circle of radius 3, clockwise from 12 o'clock.
pub const FAST_CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-2, -2),
    (-1, -3),
];

/// Contiguous arc length required by FAST-9.
pub const FAST_ARC: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    /// Column in level-0 pixel coordinates.
    pub x: f32,
    /// Row in level-0 pixel coordinates.
    pub y: f32,
    pub response: f32,
    /// Radians in `[0, 2pi)`.
    pub angle: f32,
    pub level: usize,
}

/// 256 bits, bit `i` stored in byte `i / 8` at position `i % 8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BinaryDescriptor(pub [u8; 32]);

impl BinaryDescriptor {
    pub const BITS: u32 = 256;

    pub fn bit(&self, i: usize) -> bool {
        self.0[i / 8] >> (i % 8) & 1 == 1
    }

    pub fn complement(&self) -> Self {
        let mut b = self.0;
        b.iter_mut().for_each(|v| *v = !*v);
        Self(b)
    }

    pub fn as_words(&self) -> [u64; 4] {
        let mut w = [0u64; 4];
        for (i, chunk) in self.0.chunks_exact(8).enumerate() {
            w[i] = u64::from_le_bytes(chunk.try_into().unwrap());
        }
        w
    }
}

/// Keypoints and their descriptors, as parallel arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureSet {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<BinaryDescriptor>,
    pub image_dims: (usize, usize),
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Images are resized to `(width, height)` before extraction.
    pub match_size: (usize, usize),
    pub max_features: usize,
    pub fast_threshold: u8,
    pub pyramid_levels: usize,
    pub pyramid_factor: f64,
    pub harris_k: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            match_size: (224, 224),
            max_features: 10_000,
            fast_threshold: 20,
            pyramid_levels: 4,
            pyramid_factor: 1.2,
            harris_k: 0.04,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_features == 0 {
            return Err(Error::Config("max_features must be at least 1".into()));
        }
        if self.fast_threshold == 0 {
            return Err(Error::Config("fast_threshold must be at least 1".into()));
        }
        if self.pyramid_levels == 0 || !(self.pyramid_factor > 1.0) {
            return Err(Error::Config(format!(
                "invalid pyramid settings: {} levels, factor {}",
                self.pyramid_levels, self.pyramid_factor
            )));
        }
        if self.match_size.0 == 0 || self.match_size.1 == 0 {
            return Err(Error::Dimension("match_size must be positive".into()));
        }
        Ok(())
    }
}

/// One comparison pair `((x1, y1), (x2, y2))` relative to the patch centre.
pub type TestPair = ((i32, i32), (i32, i32));

static TEST_PAIRS: LazyLock<Vec<TestPair>> =
    LazyLock::new(|| parse_pair_table(PAIR_TABLE).expect("embedded pair table is valid"));

/// The committed comparison-pair layout.
pub fn test_pairs() -> &'static [TestPair] {
    &TEST_PAIRS
}

/// Parses a pair table: 256 lines of `x1 y1 x2 y2` in `[-15, 15]`.
pub fn parse_pair_table(text: &str) -> Result<Vec<TestPair>> {
    let mut pairs = Vec::with_capacity(256);
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<i32> = line
            .split_whitespace()
            .map(|t| t.parse::<i32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("pair table line {}: {e}", lineno + 1)))?;
        if vals.len() != 4 || vals.iter().any(|v| !(-PATCH_RADIUS..=PATCH_RADIUS).contains(v)) {
            return Err(Error::Format(format!(
                "pair table line {}: expected four integers in [-15, 15]",
                lineno + 1
            )));
        }
        pairs.push(((vals[0], vals[1]), (vals[2], vals[3])));
    }
    if pairs.len() != BinaryDescriptor::BITS as usize {
        return Err(Error::Format(format!(
            "pair table has {} entries, expected 256",
            pairs.len()
        )));
    }
    Ok(pairs)
}

/// FAST segment test: at least [`FAST_ARC`] contiguous circle pixels all
/// brighter than `p + t` or all darker than `p - t`. The caller guarantees a
/// 3-pixel margin around `(x, y)`.
pub fn is_fast_corner(img: &GrayImage, x: usize, y: usize, threshold: u8) -> bool {
    let p = img.get(x, y) as i16;
    let t = threshold as i16;
    let mut cls = [0i8; 16];
    for (k, &(dx, dy)) in FAST_CIRCLE.iter().enumerate() {
        let v = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as i16;
        cls[k] = if v > p + t {
            1
        } else if v < p - t {
            -1
        } else {
            0
        };
    }
    // quick rejection: an arc of 9 always covers two of the compass points
    // 0, 4, 8, 12 with the same sign
    let compass = [cls[0], cls[4], cls[8], cls[12]];
    let bright = compass.iter().filter(|&&c| c == 1).count();
    let dark = compass.iter().filter(|&&c| c == -1).count();
    if bright < 2 && dark < 2 {
        return false;
    }
    for sign in [1i8, -1] {
        let mut run = 0;
        for k in 0..16 + FAST_ARC - 1 {
            if cls[k % 16] == sign {
                run += 1;
                if run >= FAST_ARC {
                    return true;
                }
            } else {
                run = 0;
            }
        }
    }
    false
}

fn harris_response(img: &GrayImage, x: usize, y: usize, k: f64) -> f64 {
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    let px = |xx: i32, yy: i32| img.get(xx as usize, yy as usize) as f64;
    for dy in -HARRIS_BLOCK_RADIUS..=HARRIS_BLOCK_RADIUS {
        for dx in -HARRIS_BLOCK_RADIUS..=HARRIS_BLOCK_RADIUS {
            let cx = x as i32 + dx;
            let cy = y as i32 + dy;
            // Sobel
            let gx = (px(cx + 1, cy - 1) + 2.0 * px(cx + 1, cy) + px(cx + 1, cy + 1))
                - (px(cx - 1, cy - 1) + 2.0 * px(cx - 1, cy) + px(cx - 1, cy + 1));
            let gy = (px(cx - 1, cy + 1) + 2.0 * px(cx, cy + 1) + px(cx + 1, cy + 1))
                - (px(cx - 1, cy - 1) + 2.0 * px(cx, cy - 1) + px(cx + 1, cy - 1));
            sxx += gx * gx;
            syy += gy * gy;
            sxy += gx * gy;
        }
    }
    // scale so responses stay in a readable range for 8-bit input
    let norm = 1.0 / (4.0 * 49.0 * 255.0);
    let (a, b, c) = (sxx * norm * norm, syy * norm * norm, sxy * norm * norm);
    (a * b - c * c - k * (a + b) * (a + b)).max(0.0)
}

fn intensity_centroid_angle(img: &GrayImage, x: usize, y: usize) -> f32 {
    let mut m10 = 0.0f64;
    let mut m01 = 0.0f64;
    let r2 = ORIENTATION_RADIUS * ORIENTATION_RADIUS;
    for dy in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
        for dx in -ORIENTATION_RADIUS..=ORIENTATION_RADIUS {
            if dx * dx + dy * dy > r2 {
                continue;
            }
            let v = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) as f64;
            m10 += dx as f64 * v;
            m01 += dy as f64 * v;
        }
    }
    normalize_angle(m01.atan2(m10)) as f32
}

fn normalize_angle(a: f64) -> f64 {
    let a = a.rem_euclid(TAU);
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// Level coordinate from a level-0 coordinate.
#[inline]
fn to_level(v: f32, full: usize, level_dim: usize) -> f64 {
    v as f64 * level_dim as f64 / full as f64
}

#[inline]
fn inside_border(x: f64, y: f64, w: usize, h: usize) -> Option<(usize, usize)> {
    let xr = x.round();
    let yr = y.round();
    let b = DESCRIPTOR_BORDER as f64;
    if xr >= b && yr >= b && xr + b < w as f64 && yr + b < h as f64 {
        Some((xr as usize, yr as usize))
    } else {
        None
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    x: usize,
    y: usize,
    response: f64,
}

fn detect_level(img: &GrayImage, threshold: u8, harris_k: f64) -> Vec<Candidate> {
    let (w, h) = (img.width(), img.height());
    let b = DESCRIPTOR_BORDER;
    if w <= 2 * b || h <= 2 * b {
        return Vec::new();
    }
    let mut score = vec![-1.0f64; w * h];
    let mut corners = Vec::new();
    for y in b..h - b {
        for x in b..w - b {
            if is_fast_corner(img, x, y, threshold) {
                let r = harris_response(img, x, y, harris_k);
                score[y * w + x] = r;
                corners.push((x, y));
            }
        }
    }
    // 3x3 non-maximum suppression; equal neighbours resolve toward lower (y, x)
    corners
        .into_iter()
        .filter_map(|(x, y)| {
            let r = score[y * w + x];
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    let nx = (x as i32 + dx) as usize;
                    let ny = (y as i32 + dy) as usize;
                    let nr = score[ny * w + nx];
                    if nr > r || (nr == r && (ny, nx) < (y, x)) {
                        return None;
                    }
                }
            }
            Some(Candidate { x, y, response: r })
        })
        .collect()
}

fn detect_on_pyramid(levels: &[GrayImage], cfg: &FeatureConfig) -> Vec<Keypoint> {
    let (w0, h0) = (levels[0].width(), levels[0].height());
    let mut kps: Vec<Keypoint> = Vec::new();
    for (li, img) in levels.iter().enumerate() {
        let sx = w0 as f64 / img.width() as f64;
        let sy = h0 as f64 / img.height() as f64;
        for c in detect_level(img, cfg.fast_threshold, cfg.harris_k) {
            kps.push(Keypoint {
                x: (c.x as f64 * sx) as f32,
                y: (c.y as f64 * sy) as f32,
                response: c.response as f32,
                angle: 0.0,
                level: li,
            });
        }
    }
    kps.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
            .then(a.level.cmp(&b.level))
    });
    kps.truncate(cfg.max_features);
    for kp in &mut kps {
        let img = &levels[kp.level];
        let lx = to_level(kp.x, w0, img.width()).round() as usize;
        let ly = to_level(kp.y, h0, img.height()).round() as usize;
        kp.angle = intensity_centroid_angle(img, lx, ly);
    }
    kps
}

/// Oriented FAST-9 keypoints over the configured pyramid, strongest first.
pub fn detect_keypoints(img: &GrayImage, cfg: &FeatureConfig) -> Result<Vec<Keypoint>> {
    cfg.validate()?;
    let levels = build_pyramid(img, cfg.pyramid_levels, cfg.pyramid_factor)?;
    Ok(detect_on_pyramid(&levels, cfg))
}

/// Separable Gaussian smoothing with clamp-to-edge borders.
fn smooth(img: &GrayImage) -> Vec<f32> {
    let kernel: Vec<f64> = {
        let raw: Vec<f64> = (-SMOOTHING_RADIUS..=SMOOTHING_RADIUS)
            .map(|i| (-(i * i) as f64 / (2.0 * SMOOTHING_SIGMA * SMOOTHING_SIGMA)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    };
    let (w, h) = (img.width() as i32, img.height() as i32);
    let mut tmp = vec![0f64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let xx = (x + k as i32 - SMOOTHING_RADIUS).clamp(0, w - 1);
                acc += kv * img.get(xx as usize, y as usize) as f64;
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0f32; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let yy = (y + k as i32 - SMOOTHING_RADIUS).clamp(0, h - 1);
                acc += kv * tmp[(yy * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc as f32;
        }
    }
    out
}

fn describe_on_pyramid(levels: &[GrayImage], kps: &[Keypoint]) -> FeatureSet {
    let (w0, h0) = (levels[0].width(), levels[0].height());
    let mut smoothed: Vec<Option<Vec<f32>>> = vec![None; levels.len()];
    let pairs = test_pairs();
    let mut out = FeatureSet {
        keypoints: Vec::with_capacity(kps.len()),
        descriptors: Vec::with_capacity(kps.len()),
        image_dims: (w0, h0),
    };
    for kp in kps {
        let Some(img) = levels.get(kp.level) else {
            continue;
        };
        let (w, h) = (img.width(), img.height());
        let Some((cx, cy)) = inside_border(
            to_level(kp.x, w0, w),
            to_level(kp.y, h0, h),
            w,
            h,
        ) else {
            continue;
        };
        let sm = smoothed[kp.level].get_or_insert_with(|| smooth(img));
        let (s, c) = (kp.angle as f64).sin_cos();
        let sample = |(px, py): (i32, i32)| -> f32 {
            let rx = (c * px as f64 - s * py as f64).round() as i32;
            let ry = (s * px as f64 + c * py as f64).round() as i32;
            sm[(cy as i32 + ry) as usize * w + (cx as i32 + rx) as usize]
        };
        let mut bits = [0u8; 32];
        for (i, &(p1, p2)) in pairs.iter().enumerate() {
            if sample(p1) < sample(p2) {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.keypoints.push(*kp);
        out.descriptors.push(BinaryDescriptor(bits));
    }
    out
}

/// Computes steered descriptors for `kps`; keypoints within
/// [`DESCRIPTOR_BORDER`] pixels of their level's border are dropped.
pub fn describe(img: &GrayImage, kps: &[Keypoint], cfg: &FeatureConfig) -> Result<FeatureSet> {
    cfg.validate()?;
    let levels = build_pyramid(img, cfg.pyramid_levels, cfg.pyramid_factor)?;
    Ok(describe_on_pyramid(&levels, kps))
}

/// Resize to `cfg.match_size`, detect, describe.
pub fn extract(img: &GrayImage, cfg: &FeatureConfig) -> Result<FeatureSet> {
    cfg.validate()?;
    let resized = resize_bilinear(img, cfg.match_size.0, cfg.match_size.1)?;
    let levels = build_pyramid(&resized, cfg.pyramid_levels, cfg.pyramid_factor)?;
    let kps = detect_on_pyramid(&levels, cfg);
    Ok(describe_on_pyramid(&levels, &kps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn committed_pair_table_matches_generator() {
        let mut rng = SplitMix64::new(0x5EED);
        let mut coord = || (rng.next_u64() % 31) as i32 - 15;
        let mut point = || loop {
            let (x, y) = (coord(), coord());
            if x * x + y * y <= 225 {
                break (x, y);
            }
        };
        let mut pairs = Vec::new();
        while pairs.len() < 256 {
            let (a, b) = (point(), point());
            if a != b {
                pairs.push((a, b));
            }
        }
        assert_eq!(test_pairs(), &pairs[..]);
    }

    #[test]
    fn pair_table_rejects_bad_rows() {
        assert!(parse_pair_table("1 2 3\n").is_err());
        assert!(parse_pair_table(&"0 0 16 0\n".repeat(256)).is_err());
        assert!(parse_pair_table(&"0 0 1 0\n".repeat(255)).is_err());
        assert_eq!(parse_pair_table(&"0 0 1 0\n".repeat(256)).unwrap().len(), 256);
    }

    #[test]
    fn steered_pairs_stay_inside_the_border() {
        for &(a, b) in test_pairs() {
            for (x, y) in [a, b] {
                assert!(((x * x + y * y) as f64).sqrt() <= 15.0);
            }
        }
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        let img = GrayImage::filled(64, 64, 90).unwrap();
        assert!(detect_keypoints(&img, &FeatureConfig::default()).unwrap().is_empty());
        assert!(extract(&img, &FeatureConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn keypoint_near_border_is_dropped() {
        let img = GrayImage::from_fn(224, 224, |x, y| ((x * 7) ^ (y * 13)) as u8).unwrap();
        let kp = |x, y| Keypoint {
            x,
            y,
            response: 1.0,
            angle: 0.0,
            level: 0,
        };
        let fs = describe(&img, &[kp(3.0, 3.0), kp(100.0, 100.0)], &FeatureConfig::default())
            .unwrap();
        assert_eq!(fs.len(), 1);
        assert_eq!(fs.keypoints[0].x, 100.0);
        assert_eq!(fs.descriptors.len(), fs.keypoints.len());
    }

    #[test]
    fn complement_flips_every_bit() {
        let d = BinaryDescriptor([0b1010_0101; 32]);
        let c = d.complement();
        assert!((0..256).all(|i| d.bit(i) != c.bit(i)));
    }

    #[test]
    fn bad_config_is_rejected() {
        let img = GrayImage::filled(64, 64, 90).unwrap();
        let cfg = FeatureConfig {
            max_features: 0,
            ..Default::default()
        };
        assert!(matches!(extract(&img, &cfg), Err(Error::Config(_))));
        let cfg = FeatureConfig {
            match_size: (0, 224),
            ..Default::default()
        };
        assert!(matches!(extract(&img, &cfg), Err(Error::Dimension(_))));
    }
}
