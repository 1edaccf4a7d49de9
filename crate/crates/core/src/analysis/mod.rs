//! Image analysis: QC metrics, breast segmentation, density, microcalcification
//! detection and intensity standardization.
//!
//! All floating point work is f64. Sums are accumulated in integers so the
//! mean and population standard deviation are exact up to the final division.

mod morph;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{tags, Dataset, Element};

pub use morph::{components, opening, BreastMask, Connectivity};

pub const MIN_SIDE: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("invalid image: {0}")]
    BadImage(String),
    #[error("histogram has a single non-empty bin")]
    NoContrast,
    #[error("no foreground pixels above the threshold")]
    EmptyForeground,
    #[error("mask pixels have zero variance")]
    ZeroVariance,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    rows: usize,
    cols: usize,
    bits: u8,
    pixels: Vec<u16>,
}

impl Image {
    pub fn new(rows: usize, cols: usize, bits: u8, pixels: Vec<u16>) -> Result<Self, AnalysisError> {
        if bits != 8 && bits != 16 {
            return Err(AnalysisError::BadImage(format!("bits {bits} not in {{8, 16}}")));
        }
        if rows < MIN_SIDE || cols < MIN_SIDE {
            return Err(AnalysisError::BadImage(format!("{rows}x{cols} smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if pixels.len() != rows * cols {
            return Err(AnalysisError::BadImage(format!("{} samples for {rows}x{cols}", pixels.len())));
        }
        let maxval = ((1u32 << bits) - 1) as u16;
        if pixels.iter().any(|&p| p > maxval) {
            return Err(AnalysisError::BadImage(format!("sample above {maxval}")));
        }
        Ok(Image { rows, cols, bits, pixels })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn maxval(&self) -> u16 {
        ((1u32 << self.bits) - 1) as u16
    }

    pub fn pixels(&self) -> &[u16] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.pixels[r * self.cols + c]
    }

    /// Histogram bin of a sample: the top 8 bits.
    pub fn bin(&self, v: u16) -> usize {
        (v >> (self.bits - 8)) as usize
    }

    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for &p in &self.pixels {
            h[self.bin(p)] += 1;
        }
        h
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self, AnalysisError> {
        let missing = |what: &str| AnalysisError::BadImage(format!("missing {what}"));
        let rows = ds.u16(tags::ROWS).ok_or_else(|| missing("Rows"))? as usize;
        let cols = ds.u16(tags::COLUMNS).ok_or_else(|| missing("Columns"))? as usize;
        let bits = ds.u16(tags::BITS_ALLOCATED).ok_or_else(|| missing("BitsAllocated"))?;
        let data = ds.get(tags::PIXEL_DATA).ok_or_else(|| missing("PixelData"))?.value();
        let n = rows * cols;
        let pixels: Vec<u16> = match bits {
            8 if data.len() >= n => data[..n].iter().map(|&b| b as u16).collect(),
            16 if data.len() >= 2 * n => {
                data[..2 * n].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect()
            }
            8 | 16 => return Err(AnalysisError::BadImage("pixel data too short".into())),
            b => return Err(AnalysisError::BadImage(format!("bits {b} not in {{8, 16}}"))),
        };
        Image::new(rows, cols, bits as u8, pixels)
    }

    /// Little-endian sample bytes as stored in PixelData.
    pub fn pixel_bytes(&self) -> Vec<u8> {
        match self.bits {
            8 => self.pixels.iter().map(|&p| p as u8).collect(),
            _ => self.pixels.iter().flat_map(|p| p.to_le_bytes()).collect(),
        }
    }

    /// Replaces the geometry and pixel elements of `ds` with this image.
    pub fn write_into(&self, ds: &mut Dataset) {
        let bits = self.bits as u16;
        ds.put(Element::u16(tags::ROWS, self.rows as u16).expect("dictionary tag"));
        ds.put(Element::u16(tags::COLUMNS, self.cols as u16).expect("dictionary tag"));
        ds.put(Element::u16(tags::BITS_ALLOCATED, bits).expect("dictionary tag"));
        ds.put(Element::u16(tags::BITS_STORED, bits).expect("dictionary tag"));
        ds.put(Element::bytes(tags::PIXEL_DATA, self.pixel_bytes()).expect("dictionary tag"));
    }
}

fn sums(values: impl Iterator<Item = u16>) -> (u64, u128, u128) {
    let mut n = 0u64;
    let mut s = 0u128;
    let mut sq = 0u128;
    for v in values {
        n += 1;
        s += v as u128;
        sq += (v as u128) * (v as u128);
    }
    (n, s, sq)
}

fn mean_std(values: impl Iterator<Item = u16>) -> (f64, f64) {
    let (n, s, sq) = sums(values);
    if n == 0 {
        return (0.0, 0.0);
    }
    let n128 = n as u128;
    // N^2 var = N*sum(x^2) - sum(x)^2, exact in integers.
    let scaled_var = n128 * sq - s * s;
    let mean = s as f64 / n as f64;
    let var = scaled_var as f64 / (n as f64 * n as f64);
    (mean, var.sqrt())
}

pub fn mean_brightness(img: &Image) -> f64 {
    mean_std(img.pixels.iter().copied()).0
}

/// Population standard deviation.
pub fn rms_contrast(img: &Image) -> f64 {
    mean_std(img.pixels.iter().copied()).1
}

/// Threshold bin maximizing between-class variance; class 0 is bins `<= k`.
/// Ties go to the smallest `k`.
pub fn otsu(hist: &[u64; 256]) -> Result<u8, AnalysisError> {
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(AnalysisError::NoContrast);
    }
    let total: u64 = hist.iter().sum();
    let total_sum: u128 = hist.iter().enumerate().map(|(i, &c)| i as u128 * c as u128).sum();
    let (mut n0, mut s0) = (0u64, 0u128);
    let mut best = (0u8, f64::NEG_INFINITY);
    for k in 0..255usize {
        n0 += hist[k];
        s0 += k as u128 * hist[k] as u128;
        let n1 = total - n0;
        let score = if n0 == 0 || n1 == 0 {
            0.0
        } else {
            // n0 n1 (m0 - m1)^2 / N^2 == (N s0 - n0 S)^2 / (n0 n1 N^2)
            let d = total as f64 * s0 as f64 - n0 as f64 * total_sum as f64;
            d * d / (n0 as f64 * n1 as f64)
        };
        if score > best.1 {
            best = (k as u8, score);
        }
    }
    Ok(best.0)
}

/// Largest 4-connected component of `bin > otsu(histogram)`.
pub fn segment_breast(img: &Image) -> Result<BreastMask, AnalysisError> {
    let k = otsu(&img.histogram())? as usize;
    let fg: Vec<bool> = img.pixels.iter().map(|&p| img.bin(p) > k).collect();
    morph::largest_component(img.rows, img.cols, &fg).ok_or(AnalysisError::EmptyForeground)
}

/// Fraction of mask pixels above a second Otsu threshold over mask pixels.
pub fn breast_density(img: &Image, mask: &BreastMask) -> f64 {
    let mut h = [0u64; 256];
    for i in mask.indices() {
        h[img.bin(img.pixels[i])] += 1;
    }
    let Ok(k2) = otsu(&h) else { return 0.0 };
    let dense: u64 = h[k2 as usize + 1..].iter().sum();
    dense as f64 / mask.area() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McParams {
    pub r: usize,
    pub k: f64,
    pub area_min: usize,
    pub area_max: usize,
}

impl Default for McParams {
    fn default() -> Self {
        McParams { r: 4, k: 4.0, area_min: 2, area_max: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McDetection {
    pub centroids: Vec<(f64, f64)>,
    pub count: usize,
    pub params: McParams,
}

/// White top-hat, `mu + k sigma` threshold inside the mask, 8-connected
/// components gated by area. Centroids are `(row, col)`, sorted.
pub fn detect_microcalcs(img: &Image, mask: &BreastMask, params: &McParams) -> McDetection {
    let opened = opening(img.rows, img.cols, &img.pixels, params.r);
    let residual: Vec<u16> = img.pixels.iter().zip(&opened).map(|(&p, &o)| p - o).collect();
    let (mu, sigma) = mean_std(mask.indices().map(|i| residual[i]));
    let t = mu + params.k * sigma;
    let cand: Vec<bool> =
        (0..residual.len()).map(|i| mask.contains_index(i) && residual[i] as f64 > t).collect();
    let mut centroids: Vec<(f64, f64)> = components(img.rows, img.cols, &cand, Connectivity::Eight)
        .into_iter()
        .filter(|c| (params.area_min..=params.area_max).contains(&c.len()))
        .map(|c| {
            let n = c.len() as f64;
            let (sr, sc) = c.iter().fold((0usize, 0usize), |(a, b), &i| (a + i / img.cols, b + i % img.cols));
            (sr as f64 / n, sc as f64 / n)
        })
        .collect();
    centroids.sort_by(|a, b| a.partial_cmp(b).expect("finite centroids"));
    McDetection { count: centroids.len(), centroids, params: *params }
}

/// Linear map putting mask pixels at mean `maxval/2`, std `maxval/8`;
/// clamped and rounded half up.
pub fn standardize(img: &Image, mask: &BreastMask) -> Result<Image, AnalysisError> {
    let (m, s) = mean_std(mask.indices().map(|i| img.pixels[i]));
    if s == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    let maxval = img.maxval() as f64;
    let a = 0.125 * maxval / s;
    let b = 0.5 * maxval - a * m;
    let pixels = img
        .pixels
        .iter()
        .map(|&x| {
            let y = (a * x as f64 + b + 0.5).floor();
            y.clamp(0.0, maxval) as u16
        })
        .collect();
    Image::new(img.rows, img.cols, img.bits, pixels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub mean_brightness: f64,
    pub rms_contrast: f64,
    pub breast_density: f64,
    pub microcalc_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// All metrics with default parameters, plus the detections they count.
pub fn qc_report(img: &Image) -> (QcReport, McDetection) {
    let (mean, std) = mean_std(img.pixels.iter().copied());
    let params = McParams::default();
    match segment_breast(img) {
        Ok(mask) => {
            let det = detect_microcalcs(img, &mask, &params);
            let report = QcReport {
                mean_brightness: mean,
                rms_contrast: std,
                breast_density: breast_density(img, &mask),
                microcalc_count: det.count as u64,
                warning: None,
            };
            (report, det)
        }
        Err(e) => {
            let report = QcReport {
                mean_brightness: mean,
                rms_contrast: std,
                breast_density: 0.0,
                microcalc_count: 0,
                warning: Some(e.to_string()),
            };
            (report, McDetection { centroids: Vec::new(), count: 0, params })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(rows: usize, cols: usize, f: impl Fn(usize, usize) -> u16) -> Image {
        let px = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Image::new(rows, cols, 8, px).unwrap()
    }

    #[test]
    fn validation() {
        assert!(Image::new(4, 8, 8, vec![0; 32]).is_err());
        assert!(Image::new(8, 8, 12, vec![0; 64]).is_err());
        assert!(Image::new(8, 8, 8, vec![256; 64]).is_err());
        assert!(Image::new(8, 8, 8, vec![0; 63]).is_err());
    }

    #[test]
    fn mean_and_contrast_examples() {
        let z = img(8, 8, |_, _| 0);
        assert_eq!(mean_brightness(&z), 0.0);
        assert_eq!(rms_contrast(&z), 0.0);
        // 2x2 examples embedded in 8x8 by repetition keep mean and std.
        let q = img(8, 8, |r, c| [10, 20, 30, 40][(r % 2) * 2 + c % 2]);
        assert_eq!(mean_brightness(&q), 25.0);
        let t = img(8, 8, |r, _| if r % 2 == 0 { 0 } else { 255 });
        assert_eq!(rms_contrast(&t), 127.5);
        assert_eq!(rms_contrast(&img(8, 8, |_, _| 77)), 0.0);
    }

    #[test]
    fn otsu_examples() {
        let mut h = [0u64; 256];
        h[0] = 100;
        h[200] = 100;
        assert_eq!(otsu(&h).unwrap(), 0);
        let mut c = [0u64; 256];
        c[42] = 64;
        assert_eq!(otsu(&c), Err(AnalysisError::NoContrast));
    }

    #[test]
    fn segmentation_examples() {
        let half = img(16, 16, |_, c| if c >= 8 { 200 } else { 10 });
        let m = segment_breast(&half).unwrap();
        assert_eq!(m.area(), 128);
        assert!((0..256).all(|i| m.contains_index(i) == (i % 16 >= 8)));

        // blobs of 50 (5x10) and 40 (5x8) pixels
        let blobs = img(20, 30, |r, c| {
            let a = (2..7).contains(&r) && (2..12).contains(&c);
            let b = (10..15).contains(&r) && (15..23).contains(&c);
            if a || b { 220 } else { 15 }
        });
        let m = segment_breast(&blobs).unwrap();
        assert_eq!(m.area(), 50);
        assert!(m.contains(3, 3));
    }

    #[test]
    fn density_examples() {
        let full = BreastMask::full(8, 8);
        assert_eq!(breast_density(&img(8, 8, |_, _| 90), &full), 0.0);
        let bi = img(8, 8, |r, _| if r < 4 { 60 } else { 200 });
        assert_eq!(breast_density(&bi, &full), 0.5);
    }

    #[test]
    fn big_spot_gated_out() {
        // 10x15 plateau = 150 px, above area_max
        let im = img(40, 40, |r, c| if (10..20).contains(&r) && (10..25).contains(&c) { 200 } else { 50 });
        let det = detect_microcalcs(&im, &BreastMask::full(40, 40), &McParams { r: 10, ..McParams::default() });
        assert_eq!(det.count, 0);
        // same plateau cut to 3x3 is detected once at its centre
        let small = img(40, 40, |r, c| if (10..13).contains(&r) && (20..23).contains(&c) { 200 } else { 50 });
        let det = detect_microcalcs(&small, &BreastMask::full(40, 40), &McParams::default());
        assert_eq!(det.centroids, vec![(11.0, 21.0)]);
    }

    #[test]
    fn standardize_examples() {
        let full = BreastMask::full(8, 8);
        assert_eq!(standardize(&img(8, 8, |_, _| 5), &full), Err(AnalysisError::ZeroVariance));
        // already mean 127.5 std 31.875: {95.625, 159.375} is not integral,
        // so use the mapped image as a fixed point instead.
        let src = img(8, 8, |r, c| ((r * 8 + c) * 3) as u16);
        let once = standardize(&src, &full).unwrap();
        let twice = standardize(&once, &full).unwrap();
        let diff = once.pixels().iter().zip(twice.pixels()).map(|(a, b)| a.abs_diff(*b)).max().unwrap();
        assert!(diff <= 1);
    }

    #[test]
    fn qc_on_constant_image() {
        let (r, d) = qc_report(&img(8, 8, |_, _| 42));
        assert_eq!(r.mean_brightness, 42.0);
        assert_eq!(r.rms_contrast, 0.0);
        assert_eq!(r.breast_density, 0.0);
        assert_eq!(r.microcalc_count, 0);
        assert!(r.warning.is_some());
        assert_eq!(d.count, 0);
    }

    #[test]
    fn dataset_round_trip() {
        let im = Image::new(8, 8, 16, (0..64).map(|i| i * 1000).collect()).unwrap();
        let mut ds = Dataset::new();
        im.write_into(&mut ds);
        assert_eq!(Image::from_dataset(&ds).unwrap(), im);
    }
}
