//! Deterministic pose-grouped synthetic data.
//!
//! Every identity owns a random dead-leaves texture split into one vertical
//! strip per pose. An image of `(id, pose)` is a projective view of its strip
//! only, so two poses of one identity share no source pixel. Instances of a
//! pose differ by a small corner jitter and additive Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalrank::{split_csv, Split, SplitEntry};
use crate::imageio::{save_pgm, GrayImage};
use crate::relational::{DatasetManifest, ManifestEntry, RelationalMatrix};
use crate::rng::derive_seed;

const TEXTURE_KEY: u64 = 1;
const POSE_KEY: u64 = 2;
const IMAGE_KEY: u64 = 3;

/// Largest per-corner instance jitter as a fraction of the image side.
pub const MAX_JITTER: f64 = 0.03;
/// Largest pose-specific corner displacement as a fraction of the strip side.
const POSE_WARP: f64 = 0.08;
/// Inset of a pose view inside its strip, as a fraction of the strip side.
const POSE_INSET: f64 = 0.12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_ids: usize,
    pub poses_per_id: usize,
    pub images_per_pose: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids == 0 || self.poses_per_id == 0 || self.images_per_pose == 0 {
            return Err(Error::Config("synth counts must all be at least 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.n_ids * self.poses_per_id * self.images_per_pose
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// `(id, pose, instance)` of image `index`; images are ordered id-major.
    pub fn layout(&self, index: usize) -> (usize, usize, usize) {
        let per_id = self.poses_per_id * self.images_per_pose;
        (
            index / per_id,
            (index % per_id) / self.images_per_pose,
            index % self.images_per_pose,
        )
    }
}

pub fn id_name(id: usize) -> String {
    format!("id{id:03}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub manifest: DatasetManifest,
    /// Pose index within the identity, parallel to the manifest.
    pub pose_labels: Vec<usize>,
    pub split: Vec<SplitEntry>,
    pub dir: PathBuf,
}

impl SynthDataset {
    /// Dense natural-group label `id * poses + pose` per image.
    pub fn group_labels(&self, poses_per_id: usize) -> Vec<usize> {
        let (ids, _) = self.manifest.class_labels();
        ids.iter().zip(&self.pose_labels).map(|(&i, &p)| i * poses_per_id + p).collect()
    }
}

/// Bilinear sample with coordinates clamped into `[x0, x1] x [0, h-1]`.
fn sample_clamped(tex: &[f32], width: usize, height: usize, x0: f64, x1: f64, x: f64, y: f64) -> f64 {
    let x = x.clamp(x0, x1);
    let y = y.clamp(0.0, (height - 1) as f64);
    let xi = (x.floor() as usize).min(width - 1);
    let yi = (y.floor() as usize).min(height - 1);
    let xj = (xi + 1).min(x1 as usize);
    let yj = (yi + 1).min(height - 1);
    let fx = x - xi as f64;
    let fy = y - yi as f64;
    let at = |cx: usize, cy: usize| tex[cy * width + cx] as f64;
    let top = at(xi, yi) * (1.0 - fx) + at(xj, yi) * fx;
    let bottom = at(xi, yj) * (1.0 - fx) + at(xj, yj) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Dead-leaves texture: occluding rectangles and discs with random grey
/// levels, painted back to front.
pub fn dead_leaves(width: usize, height: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tex = vec![rng.random_range(0.0f32..256.0); width * height];
    let shapes = width * height / 90;
    let side = width.min(height) as f64;
    for _ in 0..shapes {
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        // small shapes dominate, which keeps corners dense at every scale
        let r = side * 0.012 * (1.0 + 9.0 * rng.random::<f64>().powi(3));
        let value = rng.random_range(0.0f32..256.0);
        let disc = rng.random_bool(0.4);
        let aspect = rng.random_range(0.5..2.0);
        let (rx, ry) = (r * aspect, r / aspect);
        let xa = (cx - rx).floor().max(0.0) as usize;
        let xb = ((cx + rx).ceil() as usize).min(width - 1);
        let ya = (cy - ry).floor().max(0.0) as usize;
        let yb = ((cy + ry).ceil() as usize).min(height - 1);
        for y in ya..=yb {
            for x in xa..=xb {
                let inside = if disc {
                    let dx = (x as f64 - cx) / rx;
                    let dy = (y as f64 - cy) / ry;
                    dx * dx + dy * dy <= 1.0
                } else {
                    (x as f64 - cx).abs() <= rx && (y as f64 - cy).abs() <= ry
                };
                if inside {
                    tex[y * width + x] = value;
                }
            }
        }
    }
    tex
}

/// Homography mapping each `src[i]` to `dst[i]` (direct linear transform
/// with `h33 = 1`).
pub fn homography_from_points(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Matrix3<f64>> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), &(u, v))) in src.iter().zip(dst).enumerate() {
        let r = 2 * i;
        a.row_mut(r).copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1).copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::Numeric("degenerate homography correspondences".into()))?;
    Ok(Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0))
}

pub fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64) {
    let p = h * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z)
}

fn jitter_corners(corners: &mut [(f64, f64); 4], amount: f64, rng: &mut ChaCha8Rng) {
    for c in corners.iter_mut() {
        c.0 += rng.random_range(-amount..=amount);
        c.1 += rng.random_range(-amount..=amount);
    }
}

/// Source quadrilateral of `(id, pose)` inside its strip, before instance
/// jitter. Strip coordinates run over `[0, side)` in both axes.
fn pose_quad(spec: &SynthSpec, id: usize, pose: usize) -> [(f64, f64); 4] {
    let side = spec.image_size as f64;
    let lo = side * POSE_INSET;
    let hi = side * (1.0 - POSE_INSET);
    let mut quad = [(lo, lo), (hi, lo), (hi, hi), (lo, hi)];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[POSE_KEY, id as u64, pose as u64]));
    jitter_corners(&mut quad, side * POSE_WARP, &mut rng);
    quad
}

/// Renders image `index` of the dataset from its identity texture.
pub fn render_image(spec: &SynthSpec, texture: &[f32], index: usize) -> Result<GrayImage> {
    let (id, pose, _) = spec.layout(index);
    let n = spec.image_size;
    let side = n as f64;
    let tex_w = n * spec.poses_per_id;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[IMAGE_KEY, index as u64]));
    let mut quad = pose_quad(spec, id, pose);
    jitter_corners(&mut quad, side * MAX_JITTER, &mut rng);
    let offset = (pose * n) as f64;
    for c in quad.iter_mut() {
        c.0 = c.0.clamp(0.0, side - 1.0) + offset;
        c.1 = c.1.clamp(0.0, side - 1.0);
    }
    let last = side - 1.0;
    let h = homography_from_points(&[(0.0, 0.0), (last, 0.0), (last, last), (0.0, last)], &quad)?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (x0, x1) = (offset, offset + last);
    let mut data = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (u, v) = apply_homography(&h, x as f64, y as f64);
            let value = sample_clamped(texture, tex_w, n, x0, x1, u, v) + noise.sample(&mut rng);
            data.push(value.round().clamp(0.0, 255.0) as u8);
        }
    }
    GrayImage::new(n, n, data)
}

/// Identity texture: `poses_per_id` strips of `image_size x image_size`.
pub fn identity_texture(spec: &SynthSpec, id: usize) -> Vec<f32> {
    dead_leaves(
        spec.image_size * spec.poses_per_id,
        spec.image_size,
        derive_seed(spec.seed, &[TEXTURE_KEY, id as u64]),
    )
}

/// Renders every image without touching the filesystem.
pub fn render_dataset(spec: &SynthSpec) -> Result<Vec<GrayImage>> {
    spec.validate()?;
    let textures: Vec<Vec<f32>> = (0..spec.n_ids).into_par_iter().map(|id| identity_texture(spec, id)).collect();
    (0..spec.image_count())
        .into_par_iter()
        .map(|i| render_image(spec, &textures[spec.layout(i).0], i))
        .collect()
}

/// Writes `img_NNNNN.pgm`, `manifest.csv`, `poses.csv` and `split.csv`
/// into `out_dir`. The first instance of each `(id, pose)` is a query, the
/// rest are gallery.
pub fn generate_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<SynthDataset> {
    let dir = out_dir.as_ref();
    let images = render_dataset(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(images.len());
    let mut pose_labels = Vec::with_capacity(images.len());
    let mut split = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let (id, pose, instance) = spec.layout(i);
        let name = format!("img_{i:05}.pgm");
        save_pgm(img, dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            id: id_name(id),
        });
        pose_labels.push(pose);
        split.push(SplitEntry {
            index: i,
            id: id_name(id),
            split: if instance == 0 { Split::Query } else { Split::Gallery },
        });
    }
    let mut manifest = DatasetManifest::new(entries);
    manifest.save(dir.join("manifest.csv"))?;
    manifest.base_dir = dir.to_path_buf();

    let mut poses = String::from("index,pose\n");
    for (i, p) in pose_labels.iter().enumerate() {
        poses.push_str(&format!("{i},{p}\n"));
    }
    let poses_path = dir.join("poses.csv");
    fs::write(&poses_path, poses).map_err(|e| Error::io(&poses_path, e))?;
    let split_path = dir.join("split.csv");
    fs::write(&split_path, split_csv(&split)).map_err(|e| Error::io(&split_path, e))?;

    Ok(SynthDataset {
        manifest,
        pose_labels,
        split,
        dir: dir.to_path_buf(),
    })
}

/// Gaussian clusters, one per `(id, pose)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub n_ids: usize,
    /// Global index of the first identity. Sets generated with the same
    /// seed and disjoint id ranges share their pose vectors, which is how
    /// held-out identities are produced.
    #[serde(default)]
    pub first_id: usize,
    pub poses_per_id: usize,
    pub points_per_pose: usize,
    pub dim: usize,
    pub within_sigma: f64,
    /// Expected distance between the private parts of two cluster centres.
    pub center_distance: f64,
    /// Expected distance between two pose vectors. Every identity's pose `p`
    /// cluster is offset by the same pose vector, so views of one pose look
    /// alike across identities.
    #[serde(default)]
    pub pose_distance: f64,
}

impl ClusterSpec {
    pub fn cluster_count(&self) -> usize {
        self.n_ids * self.poses_per_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    /// Global identity index per vector.
    pub ids: Vec<usize>,
    /// Pose index within the identity per vector.
    pub poses: Vec<usize>,
    /// Instance index within the `(id, pose)` cluster.
    pub instances: Vec<usize>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Identities relabelled densely from 0 in order of appearance.
    pub fn dense_labels(&self) -> (Vec<usize>, usize) {
        let mut seen: Vec<usize> = Vec::new();
        let labels = self
            .ids
            .iter()
            .map(|id| match seen.iter().position(|s| s == id) {
                Some(k) => k,
                None => {
                    seen.push(*id);
                    seen.len() - 1
                }
            })
            .collect();
        (labels, seen.len())
    }

    /// A placeholder manifest (`vec_NNNNN`, `idNNN`) so matrices built for
    /// this set carry a content hash like image datasets do.
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::new(
            self.ids
                .iter()
                .enumerate()
                .map(|(i, &id)| ManifestEntry {
                    path: format!("vec_{i:05}"),
                    id: id_name(id),
                })
                .collect(),
        )
    }

    /// Natural group `(id, pose)` of vector `i`.
    pub fn group(&self, i: usize) -> (usize, usize) {
        (self.ids[i], self.poses[i])
    }
}

const CENTER_KEY: u64 = 4;
const POSE_VECTOR_KEY: u64 = 5;
const POINT_KEY: u64 = 6;

fn gaussian_vector(dim: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim).map(|_| scale * unit.sample(&mut rng)).collect()
}

/// Centres and pose vectors are isotropic Gaussians scaled so that two of
/// them lie `center_distance` (resp. `pose_distance`) apart on average.
/// Everything is keyed by `(seed, global id, pose, instance)`.
pub fn generate_embeddings(spec: &ClusterSpec, seed: u64) -> Result<EmbeddingSet> {
    if spec.cluster_count() == 0 || spec.points_per_pose == 0 || spec.dim == 0 {
        return Err(Error::Config("cluster counts and dim must all be at least 1".into()));
    }
    let noise = Normal::new(0.0, spec.within_sigma).map_err(|e| Error::Config(format!("within_sigma: {e}")))?;
    let spread = |d: f64| d / (2.0 * spec.dim as f64).sqrt();
    let pose_vectors: Vec<Vec<f64>> = (0..spec.poses_per_id)
        .map(|p| gaussian_vector(spec.dim, spread(spec.pose_distance), derive_seed(seed, &[POSE_VECTOR_KEY, p as u64])))
        .collect();
    let mut set = EmbeddingSet {
        vectors: Vec::new(),
        ids: Vec::new(),
        poses: Vec::new(),
        instances: Vec::new(),
    };
    for id in spec.first_id..spec.first_id + spec.n_ids {
        for (pose, pose_vector) in pose_vectors.iter().enumerate() {
            let key = [id as u64, pose as u64];
            let centre = gaussian_vector(spec.dim, spread(spec.center_distance), derive_seed(seed, &[CENTER_KEY, key[0], key[1]]));
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[POINT_KEY, key[0], key[1]]));
            for instance in 0..spec.points_per_pose {
                set.vectors.push(
                    centre
                        .iter()
                        .zip(pose_vector)
                        .map(|(c, p)| c + p + noise.sample(&mut rng))
                        .collect(),
                );
                set.ids.push(id);
                set.poses.push(pose);
                set.instances.push(instance);
            }
        }
    }
    Ok(set)
}

/// Stand-in for GMS counts on an embedding set: same-pose pairs of one
/// identity score `base + round(scale * exp(-distance))`, every other pair 0.
pub fn cluster_relational_matrix(set: &EmbeddingSet, base: u32, scale: f64) -> Result<RelationalMatrix> {
    let n = set.len();
    let mut mx = RelationalMatrix::zeros(n, set.manifest().content_hash());
    for i in 0..n {
        for j in i + 1..n {
            if set.group(i) == set.group(j) {
                let d = set.vectors[i]
                    .iter()
                    .zip(&set.vectors[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                mx.set_pair(i, j, base + (scale * (-d).exp()).round() as u32)?;
            }
        }
    }
    Ok(mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_ids: 2,
            poses_per_id: 2,
            images_per_pose: 3,
            image_size: 64,
            noise_sigma: 2.0,
            seed: 5,
        }
    }

    #[test]
    fn layout_is_id_major() {
        let s = small();
        assert_eq!(s.layout(0), (0, 0, 0));
        assert_eq!(s.layout(4), (0, 1, 1));
        assert_eq!(s.layout(11), (1, 1, 2));
    }

    #[test]
    fn homography_maps_corners() {
        let src = [(0.0, 0.0), (10.0, 0.0), (10.0, 10.0), (0.0, 10.0)];
        let dst = [(1.0, 2.0), (12.0, 1.0), (11.0, 13.0), (-1.0, 9.0)];
        let h = homography_from_points(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = apply_homography(&h, s.0, s.1);
            assert!((u - d.0).abs() < 1e-9 && (v - d.1).abs() < 1e-9);
        }
        let collapsed = [(0.0, 0.0); 4];
        assert!(homography_from_points(&collapsed, &dst).is_err());
    }

    #[test]
    fn spec_parsing_is_strict() {
        let ok = r#"{"n_ids":2,"poses_per_id":2,"images_per_pose":3,"image_size":224,"noise_sigma":2,"seed":5}"#;
        assert_eq!(SynthSpec::from_json(ok).unwrap().image_count(), 12);
        let extra = ok.replace("\"seed\":5", "\"seed\":5,\"colour\":true");
        assert!(SynthSpec::from_json(&extra).is_err());
        let zero = ok.replace("\"n_ids\":2", "\"n_ids\":0");
        assert!(SynthSpec::from_json(&zero).is_err());
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_dataset(&small()).unwrap();
        let b = render_dataset(&small()).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn writes_all_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&small(), dir.path()).unwrap();
        assert_eq!(ds.manifest.len(), 12);
        let reloaded = DatasetManifest::load(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(reloaded.entries, ds.manifest.entries);
        assert!(crate::imageio::load_image(reloaded.resolve(7)).is_ok());
        let poses = fs::read_to_string(dir.path().join("poses.csv")).unwrap();
        assert!(poses.starts_with("index,pose\n0,0\n"));
        assert_eq!(ds.split.iter().filter(|e| e.split == Split::Query).count(), 4);
        assert_eq!(ds.group_labels(2), vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn embeddings() {
        let spec = ClusterSpec {
            n_ids: 3,
            first_id: 0,
            poses_per_id: 2,
            points_per_pose: 5,
            dim: 64,
            within_sigma: 0.1,
            center_distance: 10.0,
            pose_distance: 0.0,
        };
        let a = generate_embeddings(&spec, 9).unwrap();
        assert_eq!(a.len(), 30);
        assert_eq!(a.vectors[0].len(), 64);
        assert_eq!(a, generate_embeddings(&spec, 9).unwrap());
        assert_ne!(a, generate_embeddings(&spec, 10).unwrap());
        assert_eq!((a.ids[7], a.poses[7], a.instances[7]), (0, 1, 2));
        assert_eq!(a.dense_labels(), ((0..30).map(|i| i / 10).collect(), 3));
        // within-cluster spread about sigma * sqrt(2 dim), far below the centre gap
        assert!(dist(&a.vectors[0], &a.vectors[1]) < 2.0);
        assert!(dist(&a.vectors[0], &a.vectors[5]) > 6.0);
        let mx = cluster_relational_matrix(&a, 20, 40.0).unwrap();
        assert!(mx.get(0, 1).unwrap() >= 20);
        assert_eq!(mx.get(0, 5).unwrap(), 0);
        assert_eq!(mx.get(0, 10).unwrap(), 0);
        mx.check_against(&a.manifest()).unwrap();
    }

    #[test]
    fn held_out_identities_share_pose_vectors() {
        let spec = ClusterSpec {
            n_ids: 2,
            first_id: 0,
            poses_per_id: 2,
            points_per_pose: 1,
            dim: 256,
            within_sigma: 0.0,
            center_distance: 0.0,
            pose_distance: 5.0,
        };
        let train = generate_embeddings(&spec, 3).unwrap();
        let test = generate_embeddings(&ClusterSpec { first_id: 2, ..spec }, 3).unwrap();
        assert_eq!(test.ids, vec![2, 2, 3, 3]);
        // with no private part, a pose looks identical for every identity
        assert_eq!(train.vectors[0], test.vectors[0]);
        assert_eq!(train.vectors[1], test.vectors[3]);
        assert!((dist(&train.vectors[0], &train.vectors[1]) - 5.0).abs() < 1.0);
    }
}
