use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::Format(format!(
                "gray image {width}x{height} with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &p in &self.pixels {
            h[p as usize] += 1;
        }
        h
    }

    /// Sub-image, clipped to the image bounds.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Self> {
        if x >= self.width || y >= self.height || w == 0 || h == 0 {
            return Err(Error::Format(format!(
                "crop {x},{y},{w},{h} outside {}x{} image",
                self.width, self.height
            )));
        }
        let w = w.min(self.width - x);
        let h = h.min(self.height - y);
        let mut pixels = Vec::with_capacity(w * h);
        for row in y..y + h {
            let start = row * self.width + x;
            pixels.extend_from_slice(&self.pixels[start..start + w]);
        }
        Self::new(w, h, pixels)
    }

    /// Loads any image format the `image` crate decodes; color is converted
    /// to luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )?;
        Ok(())
    }
}

/// Ink mask, row-major; `true` is ink.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    width: usize,
    height: usize,
    ink: Vec<bool>,
}

impl BinaryImage {
    pub fn new(width: usize, height: usize, ink: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 || ink.len() != width * height {
            return Err(Error::Format(format!(
                "binary image {width}x{height} with {} pixels",
                ink.len()
            )));
        }
        Ok(Self { width, height, ink })
    }

    pub fn blank(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0);
        Self {
            width,
            height,
            ink: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn ink(&self) -> &[bool] {
        &self.ink
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.ink[y * self.width + x]
    }

    /// Ink lookup with non-ink outside the image.
    pub fn get_padded(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.ink[y as usize * self.width + x as usize]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.ink[y * self.width + x] = v;
    }

    pub fn ink_count(&self) -> usize {
        self.ink.iter().filter(|&&b| b).count()
    }

    pub fn ink_fraction(&self) -> f64 {
        self.ink_count() as f64 / self.ink.len() as f64
    }

    /// Ink as 0, background as 255.
    pub fn to_gray(&self) -> GrayImage {
        let pixels = self.ink.iter().map(|&b| if b { 0 } else { 255 }).collect();
        GrayImage::new(self.width, self.height, pixels).expect("same dimensions")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save_png(path)
    }
}

/// Otsu's threshold over the 256-bin histogram.
///
/// Class 0 holds intensities `0..=t`, class 1 holds `t+1..=255`. The
/// between-class variance is compared exactly in integer arithmetic, so ties
/// resolve deterministically to the smallest `t`.
pub fn otsu_threshold(img: &GrayImage) -> Result<u8> {
    otsu_from_histogram(&img.histogram())
}

pub fn otsu_from_histogram(hist: &[u64; 256]) -> Result<u8> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total: u128 = hist.iter().map(|&c| c as u128).sum();
    let total_sum: u128 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as u128 * c as u128)
        .sum();

    // sigma_b^2 * total^2 = (total*s0 - n0*S)^2 / (n0*n1), compared by
    // cross-multiplication in 384-bit integers.
    let mut best_t = 0usize;
    let mut best: Option<(u128, u128)> = None;
    let mut n0: u128 = 0;
    let mut s0: u128 = 0;
    for t in 0..255 {
        n0 += hist[t] as u128;
        s0 += t as u128 * hist[t] as u128;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (total * s0).abs_diff(n0 * total_sum);
        let num = diff;
        let den = n0 * n1;
        let better = match best {
            None => true,
            Some((bn, bd)) => ratio_sq_gt(num, den, bn, bd),
        };
        if better {
            best = Some((num, den));
            best_t = t;
        }
    }
    Ok(best_t as u8)
}

/// `a^2 / b > c^2 / d` without overflow, i.e. `a^2 * d > c^2 * b`.
fn ratio_sq_gt(a: u128, b: u128, c: u128, d: u128) -> bool {
    let lhs = mul_wide(mul_wide_u128(a, a), d);
    let rhs = mul_wide(mul_wide_u128(c, c), b);
    lhs > rhs
}

type U256 = (u128, u128);

fn mul_wide_u128(a: u128, b: u128) -> U256 {
    let mask = u64::MAX as u128;
    let (a_hi, a_lo) = (a >> 64, a & mask);
    let (b_hi, b_lo) = (b >> 64, b & mask);
    let lo_lo = a_lo * b_lo;
    let hi_lo = a_hi * b_lo;
    let lo_hi = a_lo * b_hi;
    let hi_hi = a_hi * b_hi;
    let mid = (lo_lo >> 64) + (hi_lo & mask) + (lo_hi & mask);
    let lo = (lo_lo & mask) | (mid << 64);
    let hi = hi_hi + (hi_lo >> 64) + (lo_hi >> 64) + (mid >> 64);
    (hi, lo)
}

/// (hi, lo) * d as three 128-bit words, most significant first. Tuple order is
/// numeric order.
fn mul_wide(x: U256, d: u128) -> (u128, u128, u128) {
    let (hi, lo) = x;
    let (p1_hi, p1_lo) = mul_wide_u128(lo, d);
    let (p2_hi, p2_lo) = mul_wide_u128(hi, d);
    let (mid, carry) = p1_hi.overflowing_add(p2_lo);
    let top = p2_hi + carry as u128;
    (top, mid, p1_lo)
}

/// Otsu binarization; dark pixels (`<= threshold`) become ink.
pub fn binarize(img: &GrayImage) -> Result<BinaryImage> {
    let t = otsu_threshold(img)?;
    Ok(threshold_image(img, t))
}

pub fn threshold_image(img: &GrayImage, t: u8) -> BinaryImage {
    let ink = img.pixels().iter().map(|&p| p <= t).collect();
    BinaryImage::new(img.width(), img.height(), ink).expect("same dimensions")
}
