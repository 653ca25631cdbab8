//! Image features: LBP histogram, dense SIFT-style descriptors with a
//! bag-of-visual-words histogram, low-frequency DCT and HSV histograms.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dct_matrix, l1_normalize, l2_normalize, FeatureError, FeatureVector};
use crate::shallow::Codebook;

pub const DESCRIPTOR_LEN: usize = 128;
const PATCH: usize = 16;
const STRIDE: usize = 8;
const CELL: usize = 4;
const ORIENTATIONS: usize = 8;
const DESCRIPTOR_CLIP: f64 = 0.2;

/// Row-major luminance in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    /// Values are clamped into `[0, 1]`.
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(width * height, pixels.len(), "pixel count");
        let pixels = pixels
            .into_iter()
            .map(|p| if p.is_nan() { 0.0 } else { p.clamp(0.0, 1.0) })
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear resampling with pixel-center alignment.
    pub fn resize(&self, width: usize, height: usize) -> GrayImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let (y0, y1, fy) = source_coord(y, height, self.height);
            for x in 0..width {
                let (x0, x1, fx) = source_coord(x, width, self.width);
                let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
                let bottom = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
        GrayImage::new(width, height, out)
    }
}

fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Row-major RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Self {
        assert_eq!(width * height, pixels.len(), "pixel count");
        let pixels = pixels
            .into_iter()
            .map(|p| p.map(|c| if c.is_nan() { 0.0 } else { c.clamp(0.0, 1.0) }))
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let img = ::image::open(path).map_err(|e| FeatureError::Decode {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let pixels = rgb
            .pixels()
            .map(|p| p.0.map(|c| f64::from(c) / 255.0))
            .collect();
        Ok(Self::new(w as usize, h as usize, pixels))
    }

    /// ITU-R BT.601 luma.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.pixels
                .iter()
                .map(|[r, g, b]| 0.299 * r + 0.587 * g + 0.114 * b)
                .collect(),
        )
    }
}

// clockwise from the top-left neighbor; bit k set when neighbor k >= center
const LBP_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
];

pub fn lbp_code(img: &GrayImage, x: usize, y: usize) -> u8 {
    let c = img.at(x, y);
    let mut code = 0u8;
    for (k, (dx, dy)) in LBP_OFFSETS.iter().enumerate() {
        let v = img.at((x as isize + dx) as usize, (y as isize + dy) as usize);
        if v >= c {
            code |= 1 << k;
        }
    }
    code
}

/// Normalized 256-bin histogram of 8-neighbor LBP codes over interior pixels.
pub fn lbp_histogram(img: &GrayImage) -> Result<FeatureVector, FeatureError> {
    if img.width < 3 || img.height < 3 {
        return Err(FeatureError::ImageTooSmall {
            width: img.width,
            height: img.height,
            min: 3,
        });
    }
    let mut hist = vec![0.0; 256];
    for y in 1..img.height - 1 {
        for x in 1..img.width - 1 {
            hist[lbp_code(img, x, y) as usize] += 1.0;
        }
    }
    l1_normalize(&mut hist);
    Ok(FeatureVector::new(hist, "lbp256"))
}

/// Full orthonormal 2-D DCT-II of a square image, row-major `(v, u)`.
pub fn dct2(img: &GrayImage) -> Vec<f64> {
    assert_eq!(img.width, img.height, "dct2 expects a square image");
    let n = img.width;
    let basis = dct_matrix(n);
    // rows first, then columns
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        let row = &img.pixels[y * n..(y + 1) * n];
        for (u, b) in basis.iter().enumerate() {
            tmp[y * n + u] = b.iter().zip(row).map(|(a, p)| a * p).sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for (v, b) in basis.iter().enumerate() {
            out[v * n + u] = (0..n).map(|y| b[y] * tmp[y * n + u]).sum();
        }
    }
    out
}

/// JPEG-style zigzag traversal of the top-left `block x block` corner.
pub fn zigzag(block: usize) -> Vec<(usize, usize)> {
    let mut order = Vec::with_capacity(block * block);
    for s in 0..(2 * block).saturating_sub(1) {
        let lo = s.saturating_sub(block - 1);
        let hi = s.min(block - 1);
        if s % 2 == 0 {
            for r in (lo..=hi).rev() {
                order.push((r, s - r));
            }
        } else {
            for r in lo..=hi {
                order.push((r, s - r));
            }
        }
    }
    order
}

/// Top-left `block x block` DCT coefficients of the 64x64 resized image, zigzag order.
pub fn dct_low_freq(img: &GrayImage, block: usize) -> Result<FeatureVector, FeatureError> {
    if block > 64 {
        return Err(FeatureError::BlockTooLarge(block));
    }
    let small = img.resize(64, 64);
    let coeffs = dct2(&small);
    let values = zigzag(block)
        .into_iter()
        .map(|(r, c)| coeffs[r * 64 + c])
        .collect();
    Ok(FeatureVector::new(values, format!("dct{}", block * block)))
}

/// `(h, s, v)` with hue in `[0, 360)`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    (h.rem_euclid(360.0), s, max)
}

fn bin_of(value: f64, bins: usize) -> usize {
    ((value * bins as f64).floor() as usize).min(bins - 1)
}

/// Per-channel normalized H, S and V histograms, concatenated.
pub fn hsv_histograms(img: &RgbImage, bins: usize) -> FeatureVector {
    let mut h = vec![0.0; bins];
    let mut s = vec![0.0; bins];
    let mut v = vec![0.0; bins];
    for p in &img.pixels {
        let (hh, ss, vv) = rgb_to_hsv(*p);
        h[bin_of(hh / 360.0, bins)] += 1.0;
        s[bin_of(ss, bins)] += 1.0;
        v[bin_of(vv, bins)] += 1.0;
    }
    for ch in [&mut h, &mut s, &mut v] {
        l1_normalize(ch);
    }
    let mut values = h;
    values.extend(s);
    values.extend(v);
    FeatureVector::new(values, format!("hsv{}", 3 * bins))
}

/// 4x4 cells x 8 orientations on 16-pixel patches every 8 pixels. Each
/// descriptor is L2-normalized, clipped at 0.2 and renormalized; flat
/// patches give all-zero descriptors.
pub fn dense_descriptors(img: &GrayImage) -> Vec<Vec<f64>> {
    let (w, h) = (img.width, img.height);
    if w < PATCH || h < PATCH {
        return Vec::new();
    }
    let mut mag = vec![0.0; w * h];
    let mut ang = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let gx = img.at((x + 1).min(w - 1), y) - img.at(x.saturating_sub(1), y);
            let gy = img.at(x, (y + 1).min(h - 1)) - img.at(x, y.saturating_sub(1));
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
            ang[y * w + x] = gy.atan2(gx).rem_euclid(2.0 * PI);
        }
    }
    let bin_width = 2.0 * PI / ORIENTATIONS as f64;
    let mut out = Vec::new();
    for y0 in (0..=h - PATCH).step_by(STRIDE) {
        for x0 in (0..=w - PATCH).step_by(STRIDE) {
            let mut d = vec![0.0; DESCRIPTOR_LEN];
            for py in 0..PATCH {
                for px in 0..PATCH {
                    let i = (y0 + py) * w + x0 + px;
                    let m = mag[i];
                    if m == 0.0 {
                        continue;
                    }
                    let pos = ang[i] / bin_width;
                    let b0 = pos.floor() as usize % ORIENTATIONS;
                    let frac = pos - pos.floor();
                    let cell = (py / CELL) * (PATCH / CELL) + px / CELL;
                    d[cell * ORIENTATIONS + b0] += m * (1.0 - frac);
                    d[cell * ORIENTATIONS + (b0 + 1) % ORIENTATIONS] += m * frac;
                }
            }
            l2_normalize(&mut d);
            if d.iter().any(|&v| v > DESCRIPTOR_CLIP) {
                d.iter_mut().for_each(|v| *v = v.min(DESCRIPTOR_CLIP));
                l2_normalize(&mut d);
            }
            out.push(d);
        }
    }
    out
}

/// Normalized histogram of nearest-centroid assignments.
pub fn bovw_histogram(descriptors: &[Vec<f64>], codebook: &Codebook) -> Result<FeatureVector, FeatureError> {
    let mut hist = vec![0.0; codebook.k()];
    for d in descriptors {
        if d.len() != codebook.dim() {
            return Err(FeatureError::DimensionMismatch {
                expected: codebook.dim(),
                got: d.len(),
            });
        }
        hist[codebook.nearest(d)] += 1.0;
    }
    l1_normalize(&mut hist);
    Ok(FeatureVector::new(hist, format!("bovw{}", codebook.k())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageFeatureConfig {
    /// Side of the grid LBP and descriptors are computed on.
    pub texture_size: usize,
    pub dct_block: usize,
    pub hsv_bins: usize,
    pub codebook_size: usize,
}

impl Default for ImageFeatureConfig {
    fn default() -> Self {
        Self {
            texture_size: 256,
            dct_block: 8,
            hsv_bins: 32,
            codebook_size: 64,
        }
    }
}

impl ImageFeatureConfig {
    pub fn schema_id(&self) -> String {
        format!(
            "image/v1:size{}:lbp256+bovw{}+dct{}+hsv{}",
            self.texture_size,
            self.codebook_size,
            self.dct_block * self.dct_block,
            3 * self.hsv_bins
        )
    }

    pub fn descriptors(&self, img: &RgbImage) -> Vec<Vec<f64>> {
        let g = img.to_gray().resize(self.texture_size, self.texture_size);
        dense_descriptors(&g)
    }

    /// LBP, BoVW, DCT and HSV parts concatenated.
    pub fn extract(&self, img: &RgbImage, codebook: &Codebook) -> Result<FeatureVector, FeatureError> {
        let gray = img.to_gray();
        let texture = gray.resize(self.texture_size, self.texture_size);
        let lbp = lbp_histogram(&texture)?;
        let bovw = bovw_histogram(&dense_descriptors(&texture), codebook)?;
        let dct = dct_low_freq(&gray, self.dct_block)?;
        let hsv = hsv_histograms(img, self.hsv_bins);
        let mut v = FeatureVector::concat(&[lbp, bovw, dct, hsv]);
        v.schema_id = self.schema_id();
        Ok(v)
    }
}
