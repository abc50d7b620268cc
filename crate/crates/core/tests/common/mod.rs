#![allow(dead_code)]

pub mod eval;
pub mod gradcheck;

use rptm_core::imageio::GrayImage;
use rptm_core::rng::SplitMix64;

pub fn white_square(size: usize, lo: usize, hi: usize) -> GrayImage {
    GrayImage::from_fn(size, size, |x, y| {
        if (lo..hi).contains(&x) && (lo..hi).contains(&y) {
            255
        } else {
            0
        }
    })
    .unwrap()
}

pub fn checkerboard(size: usize, square: usize) -> GrayImage {
    GrayImage::from_fn(size, size, |x, y| if (x / square + y / square).is_multiple_of(2) { 230 } else { 25 }).unwrap()
}

pub fn noise(width: usize, height: usize, seed: u64) -> GrayImage {
    let mut r = SplitMix64::new(seed);
    let data = (0..width * height).map(|_| (r.next_u64() >> 56) as u8).collect();
    GrayImage::new(width, height, data).unwrap()
}

/// Blocky random texture: `block`-pixel cells with independent grey levels.
pub fn blocks(size: usize, block: usize, seed: u64) -> GrayImage {
    let mut r = SplitMix64::new(seed);
    let cells = size.div_ceil(block);
    let levels: Vec<u8> = (0..cells * cells).map(|_| (r.next_u64() >> 56) as u8).collect();
    GrayImage::from_fn(size, size, |x, y| levels[(y / block) * cells + x / block]).unwrap()
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut r = SplitMix64::new(seed);
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (r.next_u64() % (i as u64 + 1)) as usize;
        p.swap(i, j);
    }
    p
}
