//! Reproducible synthetic cohorts.
//!
//! Each patient gets demographics drawn from the reference cohort
//! distribution, a linear FVC decline with Gaussian visit noise, and a CT
//! volume whose inferior slices carry a honeycomb texture covering a share
//! of the lungs proportional to the decline rate.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{
    assemble_volume, write_dicom_slice, write_metadata_csv, CtSlice, CtVolume, IngestError, PatientRecord, Sex,
    SmokingStatus, Visit, METADATA_FILE,
};
use crate::preprocess::lower_slice_count;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub age_mean: f64,
    pub age_std: f64,
    pub p_male: f64,
    /// Probabilities for (current, ex, never) smokers.
    pub smoking_probs: [f64; 3],
    pub slope_mean: f64,
    pub slope_std: f64,
    pub base_fvc_mean: f64,
    pub base_fvc_std: f64,
    pub visit_weeks: Vec<i32>,
    pub fvc_noise_std: f64,
    /// (slices, rows, cols).
    pub volume_dims: (usize, usize, usize),
    pub slice_spacing_mm: f64,
    /// Share of the slices (from the bottom) that can carry texture.
    pub texture_fraction: f64,
    /// |slope| in ml/week at which the texture covers the whole lung.
    pub texture_full_slope: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_patients: 40,
            age_mean: 67.14,
            age_std: 7.01,
            p_male: 0.7855,
            smoking_probs: [0.054, 0.663, 0.283],
            slope_mean: -8.0,
            slope_std: 6.0,
            base_fvc_mean: 2700.0,
            base_fvc_std: 600.0,
            visit_weeks: vec![0, 6, 12, 24, 36, 48],
            fvc_noise_std: 60.0,
            volume_dims: (10, 64, 64),
            slice_spacing_mm: 2.5,
            texture_fraction: 0.55,
            texture_full_slope: 25.0,
        }
    }
}

pub const FVC_FLOOR_ML: f64 = 200.0;
pub const AIR_HU: f64 = -1000.0;
pub const TISSUE_HU: f64 = 40.0;
pub const LUNG_HU: f64 = -850.0;
pub const WALL_HU: f64 = -200.0;
pub const CYST_HU: f64 = -950.0;
const RAW_OFFSET: f64 = 1024.0;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SynthError::Config(m));
        if self.n_patients == 0 {
            return err("n_patients must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.p_male) {
            return err(format!("p_male {} not a probability", self.p_male));
        }
        if self.smoking_probs.iter().any(|p| !(*p >= 0.0)) || (self.smoking_probs.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return err(format!("smoking_probs {:?} must be non-negative and sum to 1", self.smoking_probs));
        }
        for (name, v) in [
            ("age_std", self.age_std),
            ("slope_std", self.slope_std),
            ("base_fvc_std", self.base_fvc_std),
            ("fvc_noise_std", self.fvc_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} {v} must be a finite non-negative number"));
            }
        }
        if self.visit_weeks.len() < 2 || self.visit_weeks.windows(2).any(|w| w[0] >= w[1]) {
            return err("visit_weeks needs two or more strictly increasing weeks".into());
        }
        let (s, r, c) = self.volume_dims;
        if s == 0 || r < 4 || c < 4 {
            return err(format!("volume_dims {:?} too small", self.volume_dims));
        }
        if !(self.texture_fraction > 0.0 && self.texture_fraction <= 1.0) || !(self.texture_full_slope > 0.0) {
            return err("texture settings out of range".into());
        }
        Ok(())
    }
}

/// A generated patient with the decline rate used to produce it.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPatient {
    pub record: PatientRecord,
    pub volume: CtVolume,
    pub slope: f64,
}

pub fn patient_id(index: usize) -> String {
    format!("SYN{index:05}")
}

/// Typical FVC (ml) for a sex and age, used to express FVC as a percentage.
pub fn typical_fvc(sex: Sex, age: f64) -> f64 {
    let (at40, per_year) = match sex {
        Sex::Male => (4300.0, 28.0),
        Sex::Female => (3200.0, 22.0),
    };
    (at40 - per_year * (age - 40.0)).max(1200.0)
}

/// Share of the lung height covered by texture for a given decline rate.
pub fn texture_extent(slope: f64, cfg: &SynthConfig) -> f64 {
    (slope.abs() / cfg.texture_full_slope).min(1.0)
}

struct Geometry {
    rows: usize,
    cols: usize,
}

impl Geometry {
    fn norm(&self, r: usize, c: usize) -> (f64, f64) {
        let y = (r as f64 + 0.5) / self.rows as f64 * 2.0 - 1.0;
        let x = (c as f64 + 0.5) / self.cols as f64 * 2.0 - 1.0;
        (y, x)
    }

    fn in_body(&self, r: usize, c: usize) -> bool {
        let (y, x) = self.norm(r, c);
        (x / 0.88).powi(2) + (y / 0.72).powi(2) <= 1.0
    }

    /// Vertical position inside a lung, 0 at the top and 1 at the bottom.
    fn lung_depth(&self, r: usize, c: usize) -> Option<f64> {
        let (y, x) = self.norm(r, c);
        let (ry, rx) = (0.52, 0.3);
        for cx in [-0.4, 0.4] {
            if ((x - cx) / rx).powi(2) + (y / ry).powi(2) <= 1.0 {
                return Some((y + ry) / (2.0 * ry));
            }
        }
        None
    }
}

/// HU value of one pixel.
fn pixel_hu(g: &Geometry, r: usize, c: usize, textured: bool, extent: f64) -> f64 {
    if !g.in_body(r, c) {
        return AIR_HU;
    }
    match g.lung_depth(r, c) {
        None => TISSUE_HU,
        Some(depth) => {
            if textured && depth > 1.0 - extent {
                if r.is_multiple_of(4) || c.is_multiple_of(4) {
                    WALL_HU
                } else {
                    CYST_HU
                }
            } else {
                LUNG_HU + 40.0 * depth
            }
        }
    }
}

/// Volume for one patient; slice 0 is the most inferior.
pub fn synth_volume(id: &str, slope: f64, cfg: &SynthConfig) -> Result<CtVolume> {
    let (n, rows, cols) = cfg.volume_dims;
    let g = Geometry { rows, cols };
    let textured = lower_slice_count(n, cfg.texture_fraction);
    let extent = texture_extent(slope, cfg);
    let slices = (0..n)
        .map(|k| {
            let pixels = (0..rows * cols)
                .map(|i| (pixel_hu(&g, i / cols, i % cols, k < textured, extent) + RAW_OFFSET).round() as i16)
                .collect();
            CtSlice {
                rows,
                cols,
                pixels,
                rescale_slope: 1.0,
                rescale_intercept: -RAW_OFFSET,
                z_position: k as f64 * cfg.slice_spacing_mm,
                source_id: format!("{id}.{k}"),
            }
        })
        .collect();
    Ok(assemble_volume(id, slices)?)
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("validated standard deviation")
}

/// Draws one patient's record and decline rate from its own stream.
pub fn sample_record(index: usize, cfg: &SynthConfig) -> (PatientRecord, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let age = normal(cfg.age_mean, cfg.age_std).sample(&mut rng).round();
    let sex = if rng.random_bool(cfg.p_male) { Sex::Male } else { Sex::Female };
    let smoking = SmokingStatus::ALL[WeightedIndex::new(cfg.smoking_probs)
        .expect("validated probabilities")
        .sample(&mut rng)];
    let slope = normal(cfg.slope_mean, cfg.slope_std).sample(&mut rng);
    let base = normal(cfg.base_fvc_mean, cfg.base_fvc_std).sample(&mut rng);
    let noise = normal(0.0, cfg.fvc_noise_std);
    let typical = typical_fvc(sex, age);
    let w0 = cfg.visit_weeks[0];
    let visits = cfg
        .visit_weeks
        .iter()
        .map(|&week| {
            let clean = base + slope * f64::from(week - w0);
            let fvc_ml = (clean + noise.sample(&mut rng)).max(FVC_FLOOR_ML).round();
            Visit {
                week,
                fvc_ml,
                percent: fvc_ml / typical * 100.0,
            }
        })
        .collect();
    let record = PatientRecord {
        patient_id: patient_id(index),
        visits,
        age,
        sex,
        smoking,
    };
    (record, slope)
}

/// Deterministic in `cfg.seed`; patients are generated independently and in
/// parallel.
pub fn sample_cohort(cfg: &SynthConfig) -> Result<Vec<SyntheticPatient>> {
    cfg.validate()?;
    (0..cfg.n_patients)
        .into_par_iter()
        .map(|i| {
            let (record, slope) = sample_record(i, cfg);
            let volume = synth_volume(&record.patient_id, slope, cfg)?;
            Ok(SyntheticPatient { record, volume, slope })
        })
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError {
    let path = path.display().to_string();
    move |source| SynthError::Io { path, source }
}

/// Writes `metadata.csv` and `<patient>/<k>.dcm` under `dir`; returns every
/// written file.
pub fn export_cohort(cohort: &[SyntheticPatient], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let records: Vec<PatientRecord> = cohort.iter().map(|p| p.record.clone()).collect();
    let csv_path = dir.join(METADATA_FILE);
    fs::write(&csv_path, write_metadata_csv(&records)).map_err(io_err(&csv_path))?;
    let mut written = vec![csv_path];
    for p in cohort {
        let pdir = dir.join(&p.record.patient_id);
        fs::create_dir_all(&pdir).map_err(io_err(&pdir))?;
        for (k, s) in p.volume.slices().iter().enumerate() {
            let path = pdir.join(format!("{k:04}.dcm"));
            fs::write(&path, write_dicom_slice(s)).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::read_dataset;
    use crate::preprocess::{preprocess_volume, PreprocessConfig};

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_patients: n,
            volume_dims: (4, 16, 16),
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = sample_cohort(&small(3)).unwrap();
        let b = sample_cohort(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = sample_cohort(&SynthConfig { seed: 1, ..small(3) }).unwrap();
        assert_ne!(a[0].record, c[0].record);
    }

    #[test]
    fn flat_noiseless_series() {
        let cfg = SynthConfig {
            slope_mean: 0.0,
            slope_std: 0.0,
            fvc_noise_std: 0.0,
            ..small(2)
        };
        for p in sample_cohort(&cfg).unwrap() {
            let first = p.record.visits[0].fvc_ml;
            assert!(p.record.visits.iter().all(|v| v.fvc_ml == first));
        }
    }

    #[test]
    fn export_round_trip() {
        let cohort = sample_cohort(&small(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = export_cohort(&cohort, dir.path()).unwrap();
        assert_eq!(files.len(), 3 * 4 + 1);
        let text = fs::read_to_string(dir.path().join(METADATA_FILE)).unwrap();
        assert!(text.starts_with("Patient,Weeks,FVC,Percent,Age,Sex,SmokingStatus\n"));
        let back = read_dataset(dir.path()).unwrap();
        for (p, (r, v)) in cohort.iter().zip(&back) {
            assert_eq!(&p.record, r);
            assert_eq!(Some(&p.volume), v.as_ref());
        }
    }

    #[test]
    fn texture_grows_with_slope() {
        let cfg = small(1);
        let g = Geometry { rows: 16, cols: 16 };
        let count = |s: f64| {
            (0..256)
                .filter(|&i| pixel_hu(&g, i / 16, i % 16, true, texture_extent(s, &cfg)) != pixel_hu(&g, i / 16, i % 16, false, 0.0))
                .count()
        };
        assert_eq!(count(0.0), 0);
        assert!(count(-5.0) <= count(-12.0));
        assert!(count(-12.0) <= count(-30.0));
        assert!(count(-30.0) > 0);
    }

    #[test]
    fn volumes_need_no_artifact_handling() {
        let cohort = sample_cohort(&small(2)).unwrap();
        let cfg = PreprocessConfig {
            target_size: (16, 16),
            ..Default::default()
        };
        for p in &cohort {
            let slices = preprocess_volume(&p.volume, &cfg).unwrap();
            assert_eq!(slices.len(), 3);
            // corner pixel is air: windowed (−1000 + 1500) / 1700
            assert!((slices[0].at(0, 0) - 500.0 / 1700.0).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { n_patients: 0, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { smoking_probs: [0.5, 0.5, 0.5], ..Default::default() }.validate().is_err());
        assert!(SynthConfig { visit_weeks: vec![0], ..Default::default() }.validate().is_err());
        assert!(SynthConfig::default().validate().is_ok());
    }
}
