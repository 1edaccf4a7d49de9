//! Synthetic mammogram phantoms with exact ground truth.
//!
//! Geometry: the breast is a half-disc centred on the middle of the left
//! edge; dense tissue is a concentric half-disc whose radius is scaled so its
//! pixel share approaches `dense_fraction`. Spots are isotropic Gaussians
//! (sigma 1.5 px) kept `3r` away from each other and from both region
//! boundaries. Noise is uniform, so its tail is bounded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{BreastMask, Image};
use crate::dataset::{encode, tags, Dataset, Element};

pub const SPOT_SIGMA: f64 = 1.5;
const SPOT_CLEARANCE: f64 = 12.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("bad phantom spec: {0}")]
    BadSpec(String),
}

fn d_rows() -> usize {
    256
}
fn d_bits() -> u8 {
    8
}
fn d_background() -> u16 {
    20
}
fn d_tissue() -> u16 {
    110
}
fn d_dense() -> u16 {
    200
}
fn d_noise() -> f64 {
    2.0
}
fn d_fraction() -> f64 {
    0.3
}

/// Intensities are given on the 8-bit scale and multiplied by 257 for
/// 16-bit phantoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    #[serde(default = "d_rows")]
    pub rows: usize,
    #[serde(default = "d_rows")]
    pub cols: usize,
    #[serde(default = "d_bits")]
    pub bits: u8,
    #[serde(default = "d_background")]
    pub background: u16,
    #[serde(default = "d_tissue")]
    pub tissue: u16,
    #[serde(default = "d_dense")]
    pub dense: u16,
    #[serde(default = "d_fraction")]
    pub dense_fraction: f64,
    #[serde(default)]
    pub spots: usize,
    /// Standard deviation of the zero-mean uniform noise added to every pixel.
    #[serde(default = "d_noise")]
    pub noise_sigma: f64,
    /// Spot peak height; defaults to eight noise sigmas.
    #[serde(default)]
    pub amplitude: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            rows: d_rows(),
            cols: d_rows(),
            bits: d_bits(),
            background: d_background(),
            tissue: d_tissue(),
            dense: d_dense(),
            dense_fraction: d_fraction(),
            spots: 0,
            noise_sigma: d_noise(),
            amplitude: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub mask_area: usize,
    pub dense_pixels: usize,
    pub dense_fraction: f64,
    pub spots: Vec<(f64, f64)>,
    #[serde(skip)]
    pub mask: Vec<usize>,
}

impl GroundTruth {
    pub fn mask(&self, rows: usize, cols: usize) -> BreastMask {
        BreastMask::from_indices(rows, cols, &self.mask)
    }
}

/// Patient and study identity written into a phantom file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomIdentity {
    pub patient_id: String,
    pub patient_name: String,
    pub birth_date: String,
    pub sex: String,
    pub age_years: u32,
    pub study_uid: String,
    pub series_uid: String,
    pub sop_uid: String,
    pub study_date: String,
    pub institution: String,
}

impl PhantomIdentity {
    /// A deterministic identity derived from a seed.
    pub fn synthetic(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let patient = rng.gen_range(0..400u32);
        let age = rng.gen_range(40..80u32);
        let year = 2003 + rng.gen_range(0..3u32);
        PhantomIdentity {
            patient_id: format!("HOSP-{patient:05}"),
            patient_name: format!("Phantom^Patient{patient}"),
            birth_date: format!("{}0101", year - age),
            sex: "F".into(),
            age_years: age,
            study_uid: format!("1.2.826.0.1.{}.{}", patient, rng.gen_range(0..3u32)),
            series_uid: format!("1.2.826.0.2.{seed}"),
            sop_uid: format!("1.2.826.0.3.{seed}"),
            study_date: format!("{year}{:02}{:02}", rng.gen_range(1..13u32), rng.gen_range(1..29u32)),
            institution: "Phantom General".into(),
        }
    }
}

fn validate(spec: &PhantomSpec) -> Result<(), PhantomError> {
    let bad = |m: &str| Err(PhantomError::BadSpec(m.into()));
    if spec.bits != 8 && spec.bits != 16 {
        return bad("bits must be 8 or 16");
    }
    if spec.rows < 32 || spec.cols < 32 || spec.rows > 4096 || spec.cols > 4096 {
        return bad("rows and cols must be within 32..=4096");
    }
    if !(0.0..=0.9).contains(&spec.dense_fraction) {
        return bad("dense_fraction must be within [0, 0.9]");
    }
    if spec.background.max(spec.tissue).max(spec.dense) > 255 {
        return bad("intensities are on the 8-bit scale");
    }
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return bad("noise_sigma must be finite and non-negative");
    }
    Ok(())
}

/// Nudges a radius up so the extreme row and column of the digitized disc
/// are at least 9 pixels long (`R^2 - floor(R)^2 >= 16`). A shorter tip is
/// removed by the detector's opening and would show up as a false spot.
fn snap_radius(r: f64) -> f64 {
    let c = r.floor();
    if c < 8.0 {
        return r;
    }
    let need = (c * c + 16.0).sqrt() + 1e-6;
    r.max(need)
}

/// Image and ground truth for a spec. Deterministic in `spec.seed`.
pub fn generate_image(spec: &PhantomSpec) -> Result<(Image, GroundTruth), PhantomError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (rows, cols) = (spec.rows, spec.cols);
    let cy = (rows / 2) as f64;
    let radius = snap_radius((rows as f64 * 0.45).min(cols as f64 * 0.9));
    let dense_r = snap_radius(radius * spec.dense_fraction.sqrt());
    let d2 = |r: usize, c: usize| {
        let dy = r as f64 - cy;
        dy * dy + (c as f64) * (c as f64)
    };

    let mut base = vec![spec.background as f64; rows * cols];
    let mut mask = Vec::new();
    let mut dense_pixels = 0;
    for r in 0..rows {
        for c in 0..cols {
            let dd = d2(r, c);
            if dd <= radius * radius {
                mask.push(r * cols + c);
                let dense = spec.dense_fraction > 0.0 && dd <= dense_r * dense_r;
                if dense {
                    dense_pixels += 1;
                }
                base[r * cols + c] = if dense { spec.dense } else { spec.tissue } as f64;
            }
        }
    }

    let amplitude = spec.amplitude.unwrap_or(8.0 * spec.noise_sigma.max(0.5));
    let mut spots: Vec<(f64, f64)> = Vec::new();
    let mut attempts = 0;
    while spots.len() < spec.spots {
        attempts += 1;
        if attempts > 100_000 {
            return Err(PhantomError::BadSpec(format!("no room for {} spots", spec.spots)));
        }
        let r = rng.gen_range(0.0..rows as f64);
        let c = rng.gen_range(SPOT_CLEARANCE..cols as f64);
        let dist = (r - cy).hypot(c);
        let clear_outer = dist <= radius - SPOT_CLEARANCE;
        let clear_dense = spec.dense_fraction == 0.0 || (dist - dense_r).abs() >= SPOT_CLEARANCE;
        let clear_spots = spots.iter().all(|&(sr, sc)| (sr - r).hypot(sc - c) >= SPOT_CLEARANCE);
        if clear_outer && clear_dense && clear_spots && r >= SPOT_CLEARANCE && r <= rows as f64 - SPOT_CLEARANCE {
            spots.push((r, c));
        }
    }
    for &(sr, sc) in &spots {
        let (r0, r1) = ((sr - 6.0).floor().max(0.0) as usize, ((sr + 6.0).ceil() as usize).min(rows - 1));
        let (c0, c1) = ((sc - 6.0).floor().max(0.0) as usize, ((sc + 6.0).ceil() as usize).min(cols - 1));
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dd = (r as f64 - sr).powi(2) + (c as f64 - sc).powi(2);
                base[r * cols + c] += amplitude * (-dd / (2.0 * SPOT_SIGMA * SPOT_SIGMA)).exp();
            }
        }
    }

    let scale = if spec.bits == 16 { 257.0 } else { 1.0 };
    let maxval = ((1u32 << spec.bits) - 1) as f64;
    // Uniform on [-h, h] has standard deviation h / sqrt(3).
    let half_width = spec.noise_sigma * 3f64.sqrt();
    let noise = Uniform::new_inclusive(-half_width, half_width);
    let pixels: Vec<u16> = base
        .iter()
        .map(|&v| {
            let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            ((v + n) * scale).round().clamp(0.0, maxval) as u16
        })
        .collect();
    let img = Image::new(rows, cols, spec.bits, pixels).map_err(|e| PhantomError::BadSpec(e.to_string()))?;
    spots.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let truth = GroundTruth {
        mask_area: mask.len(),
        dense_pixels,
        dense_fraction: if mask.is_empty() { 0.0 } else { dense_pixels as f64 / mask.len() as f64 },
        spots,
        mask,
    };
    Ok((img, truth))
}

/// Builds the identified (not yet anonymized) dataset for a phantom.
pub fn phantom_dataset(img: &Image, id: &PhantomIdentity) -> Dataset {
    let mut ds = Dataset::new();
    let text = |tag, v: &str| Element::text(tag, v).expect("dictionary text tag");
    ds.put(text(tags::SOP_INSTANCE_UID, &id.sop_uid));
    ds.put(text(tags::STUDY_DATE, &id.study_date));
    ds.put(text(tags::MODALITY, "MG"));
    ds.put(text(tags::INSTITUTION_NAME, &id.institution));
    ds.put(text(tags::PATIENT_NAME, &id.patient_name));
    ds.put(text(tags::PATIENT_ID, &id.patient_id));
    ds.put(text(tags::PATIENT_BIRTH_DATE, &id.birth_date));
    ds.put(text(tags::PATIENT_SEX, &id.sex));
    ds.put(text(tags::PATIENT_AGE, &format!("{:03}Y", id.age_years)));
    ds.put(text(tags::STUDY_INSTANCE_UID, &id.study_uid));
    ds.put(text(tags::SERIES_INSTANCE_UID, &id.series_uid));
    img.write_into(&mut ds);
    ds
}

/// Encoded MGD bytes plus ground truth.
pub fn generate_phantom(spec: &PhantomSpec, id: &PhantomIdentity) -> Result<(Vec<u8>, GroundTruth), PhantomError> {
    let (img, truth) = generate_image(spec)?;
    let bytes = encode(&phantom_dataset(&img, id)).map_err(|e| PhantomError::BadSpec(e.to_string()))?;
    Ok((bytes, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let spec = PhantomSpec { spots: 3, seed: 11, ..PhantomSpec::default() };
        let id = PhantomIdentity::synthetic(11);
        assert_eq!(generate_phantom(&spec, &id).unwrap().0, generate_phantom(&spec, &id).unwrap().0);
    }

    #[test]
    fn truth_shape() {
        let (_, t) = generate_image(&PhantomSpec { dense_fraction: 0.0, ..PhantomSpec::default() }).unwrap();
        assert_eq!(t.dense_fraction, 0.0);
        let (_, t) = generate_image(&PhantomSpec { spots: 5, seed: 3, ..PhantomSpec::default() }).unwrap();
        assert_eq!(t.spots.len(), 5);
        assert!((t.dense_fraction - 0.3).abs() < 0.01);
    }

    #[test]
    fn bad_specs() {
        assert!(generate_image(&PhantomSpec { bits: 12, ..PhantomSpec::default() }).is_err());
        assert!(generate_image(&PhantomSpec { dense: 300, ..PhantomSpec::default() }).is_err());
        assert!(generate_image(&PhantomSpec { rows: 8, ..PhantomSpec::default() }).is_err());
    }
}
