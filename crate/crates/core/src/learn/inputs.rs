//! Fixed image descriptor used as model input: a grid of intensity
//! histograms over the resized image.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{load_image, resize_bilinear, GrayImage};
use crate::relational::DatasetManifest;

pub const GRID: usize = 4;
pub const BINS: usize = 4;
pub const INPUT_DIM: usize = GRID * GRID * BINS;

/// `GRID x GRID` cells of a `size x size` resize, each a `BINS`-bin
/// normalised histogram.
pub fn histogram_grid(img: &GrayImage, size: usize) -> Result<Vec<f64>> {
    let r = resize_bilinear(img, size, size)?;
    let mut out = vec![0.0; INPUT_DIM];
    let cell = |v: usize| (v * GRID / size).min(GRID - 1);
    for y in 0..size {
        for x in 0..size {
            let bin = r.get(x, y) as usize * BINS / 256;
            out[(cell(y) * GRID + cell(x)) * BINS + bin] += 1.0;
        }
    }
    let mut totals = [0.0; GRID * GRID];
    for (c, t) in totals.iter_mut().enumerate() {
        *t = out[c * BINS..(c + 1) * BINS].iter().sum();
    }
    for (i, v) in out.iter_mut().enumerate() {
        let t = totals[i / BINS];
        if t > 0.0 {
            *v /= t;
        }
    }
    Ok(out)
}

/// Model inputs for every manifest image, in manifest order.
pub fn manifest_inputs(manifest: &DatasetManifest, size: usize) -> Result<Vec<Vec<f64>>> {
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let path = manifest.resolve(i);
            load_image(&path)
                .and_then(|img| histogram_grid(&img, size))
                .map_err(|e| Error::Image {
                    index: i,
                    path,
                    source: Box::new(e),
                })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_are_normalised() {
        let img = GrayImage::from_fn(50, 30, |x, y| (x * 5 + y) as u8).unwrap();
        let v = histogram_grid(&img, 224).unwrap();
        assert_eq!(v.len(), 64);
        for c in v.chunks(BINS) {
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_image_fills_one_bin() {
        let img = GrayImage::filled(10, 10, 200).unwrap();
        let v = histogram_grid(&img, 224).unwrap();
        for c in v.chunks(BINS) {
            assert_eq!(c, &[0.0, 0.0, 0.0, 1.0]);
        }
    }
}
