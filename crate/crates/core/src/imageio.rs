//! Grayscale image container, PGM/PPM decoding, bilinear resizing and
//! image pyramids.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Largest accepted width or height.
pub const MAX_DIMENSION: usize = 8192;

/// Pyramid levels whose smaller side would drop below this are not built.
pub const MIN_PYRAMID_DIMENSION: usize = 8;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if width > MAX_DIMENSION || height > MAX_DIMENSION {
            return Err(Error::Dimension(format!(
                "image dimensions {width}x{height} exceed {MAX_DIMENSION}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "pixel buffer has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Constant-intensity image.
    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// The image rotated a quarter turn: pixel `(x, y)` moves to
    /// `(height - 1 - y, x)`.
    pub fn rotate90(&self) -> GrayImage {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0u8; w * h];
        for y in 0..h {
            for x in 0..w {
                let nx = h - 1 - y;
                let ny = x;
                data[ny * h + nx] = self.get(x, y);
            }
        }
        GrayImage {
            width: h,
            height: w,
            data,
        }
    }
}

/// Reads a PGM (P2/P5) or PPM (P3/P6) file as grayscale.
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes)
}

/// Writes a binary PGM (P5).
pub fn save_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(img.data.len() + 20);
    write!(out, "P5\n{} {}\n255\n", img.width, img.height).expect("write to vec");
    out.extend_from_slice(&img.data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next_uint(&mut self, what: &str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("{what} out of range")))
    }
}

fn decode_netpbm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::Format("missing netpbm magic".into()));
    }
    let (channels, binary) = match bytes[1] {
        b'2' => (1, false),
        b'5' => (1, true),
        b'3' => (3, false),
        b'6' => (3, true),
        other => {
            return Err(Error::Format(format!(
                "unsupported magic P{}",
                other as char
            )))
        }
    };
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.next_uint("width")?;
    let height = rd.next_uint("height")?;
    let maxval = rd.next_uint("maxval")?;
    if width == 0 || height == 0 || width > MAX_DIMENSION || height > MAX_DIMENSION {
        return Err(Error::Format(format!("bad image dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("bad maxval {maxval}")));
    }
    let count = width * height * channels;
    let samples: Vec<u32> = if binary {
        // exactly one whitespace byte separates the header from the payload
        if rd.pos >= bytes.len() || !bytes[rd.pos].is_ascii_whitespace() {
            return Err(Error::Format("missing separator before payload".into()));
        }
        let payload = &bytes[rd.pos + 1..];
        let sample_bytes = if maxval > 255 { 2 } else { 1 };
        if payload.len() < count * sample_bytes {
            return Err(Error::Format(format!(
                "truncated payload: {} bytes, expected {}",
                payload.len(),
                count * sample_bytes
            )));
        }
        if sample_bytes == 1 {
            payload[..count].iter().map(|&b| b as u32).collect()
        } else {
            payload[..count * 2]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect()
        }
    } else {
        let mut v = Vec::with_capacity(count);
        for _ in 0..count {
            let s = rd.next_uint("sample").map_err(|_| {
                Error::Format(format!("truncated payload: expected {count} samples"))
            })?;
            v.push(s as u32);
        }
        v
    };
    if samples.iter().any(|&s| s as usize > maxval) {
        return Err(Error::Format("sample exceeds maxval".into()));
    }

    let scale = |s: u32| -> f64 {
        if maxval == 255 {
            s as f64
        } else {
            s as f64 * 255.0 / maxval as f64
        }
    };
    let data = if channels == 1 {
        samples.iter().map(|&s| to_u8(scale(s))).collect()
    } else {
        samples
            .chunks_exact(3)
            .map(|px| {
                to_u8(0.299 * scale(px[0]) + 0.587 * scale(px[1]) + 0.114 * scale(px[2]))
            })
            .collect()
    };
    GrayImage::new(width, height, data)
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Corner-aligned bilinear resize: output pixel `i` samples source
/// coordinate `i * (src - 1) / (dst - 1)` on each axis.
pub fn resize_bilinear(img: &GrayImage, out_w: usize, out_h: usize) -> Result<GrayImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Dimension(format!(
            "target dimensions must be positive, got {out_w}x{out_h}"
        )));
    }
    if out_w == img.width && out_h == img.height {
        return Ok(img.clone());
    }
    let xs = axis_samples(img.width, out_w);
    let ys = axis_samples(img.height, out_h);
    let mut data = Vec::with_capacity(out_w * out_h);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = img.get(x0, y0) as f64 * (1.0 - fx) + img.get(x1, y0) as f64 * fx;
            let bottom = img.get(x0, y1) as f64 * (1.0 - fx) + img.get(x1, y1) as f64 * fx;
            data.push(to_u8(top * (1.0 - fy) + bottom * fy));
        }
    }
    GrayImage::new(out_w, out_h, data)
}

fn axis_samples(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            let pos = if dst == 1 || src == 1 {
                0.0
            } else {
                i as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Dimensions of pyramid level `level`: `floor(dim / factor^level)`.
pub fn pyramid_level_dims(width: usize, height: usize, factor: f64, level: usize) -> (usize, usize) {
    let s = factor.powi(level as i32);
    (
        (width as f64 / s).floor() as usize,
        (height as f64 / s).floor() as usize,
    )
}

/// Level 0 is `img`; each further level is resized from level 0. Stops early
/// once a side would fall below [`MIN_PYRAMID_DIMENSION`].
pub fn build_pyramid(img: &GrayImage, levels: usize, factor: f64) -> Result<Vec<GrayImage>> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    if !(factor > 1.0) {
        return Err(Error::Config(format!("pyramid factor must exceed 1, got {factor}")));
    }
    let mut out = vec![img.clone()];
    for level in 1..levels {
        let (w, h) = pyramid_level_dims(img.width, img.height, factor, level);
        if w < MIN_PYRAMID_DIMENSION || h < MIN_PYRAMID_DIMENSION {
            break;
        }
        out.push(resize_bilinear(img, w, h)?);
    }
    Ok(out)
}
