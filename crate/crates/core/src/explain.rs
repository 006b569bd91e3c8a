//! Occlusion attribution: slide a patch over a slice, replace it with a
//! baseline intensity, and credit each covered pixel with the absolute change
//! in predicted slope, averaged over the patches covering it.

use std::fs;
use std::path::Path;

use image::ImageEncoder as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{slice_features, slice_slope, ClinicalFeatures, FvcModel, PredictError};
use crate::preprocess::NormalizedSlice;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("invalid occlusion config: {0}")]
    Config(String),
    #[error("map {map:?} does not match slice {slice:?}")]
    ShapeMismatch { map: (usize, usize), slice: (usize, usize) },
    #[error("model: {0}")]
    Model(#[from] PredictError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("png encoding: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionConfig {
    pub patch: usize,
    pub stride: usize,
    pub baseline_value: f32,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            stride: 8,
            baseline_value: 0.0,
        }
    }
}

impl OcclusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.stride > self.patch {
            return Err(ExplainError::Config(format!(
                "need 1 <= stride ({}) <= patch ({})",
                self.stride, self.patch
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AttributionMap {
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Anything that maps a preprocessed slice plus clinical features to a slope.
pub trait SlopeModel: Sync {
    fn slope(&self, slice: &NormalizedSlice, clinical: &ClinicalFeatures) -> Result<f64>;
}

impl SlopeModel for FvcModel {
    fn slope(&self, slice: &NormalizedSlice, clinical: &ClinicalFeatures) -> Result<f64> {
        let feats = slice_features(std::slice::from_ref(slice), &self.backbone_config, &self.backbone)?;
        Ok(slice_slope(&feats[0], clinical, &self.head, &self.head_config)?)
    }
}

impl<F> SlopeModel for F
where
    F: Fn(&NormalizedSlice, &ClinicalFeatures) -> f64 + Sync,
{
    fn slope(&self, slice: &NormalizedSlice, clinical: &ClinicalFeatures) -> Result<f64> {
        Ok(self(slice, clinical))
    }
}

/// Patch origins along one axis: every `stride` steps, plus a final origin
/// flush with the far edge so every pixel is covered.
pub fn patch_origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if patch >= len {
        return vec![0];
    }
    let last = len - patch;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

/// A patch as (row, col, height, width).
pub type Patch = (usize, usize, usize, usize);

pub fn patches(height: usize, width: usize, cfg: &OcclusionConfig) -> Vec<Patch> {
    let rows = patch_origins(height, cfg.patch, cfg.stride);
    let cols = patch_origins(width, cfg.patch, cfg.stride);
    let (ph, pw) = (cfg.patch.min(height), cfg.patch.min(width));
    rows.iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c, ph, pw)))
        .collect()
}

pub fn occlude(slice: &NormalizedSlice, patch: Patch, value: f32) -> NormalizedSlice {
    let mut out = slice.clone();
    let (r0, c0, h, w) = patch;
    for r in r0..r0 + h {
        out.values[r * slice.width + c0..r * slice.width + c0 + w].fill(value);
    }
    out
}

/// Absolute slope change for each patch, in [`patches`] order.
pub fn patch_effects<M: SlopeModel + ?Sized>(
    model: &M,
    slice: &NormalizedSlice,
    clinical: &ClinicalFeatures,
    cfg: &OcclusionConfig,
) -> Result<Vec<(Patch, f64)>> {
    cfg.validate()?;
    let original = model.slope(slice, clinical)?;
    patches(slice.height, slice.width, cfg)
        .into_par_iter()
        .map(|p| {
            let s = model.slope(&occlude(slice, p, cfg.baseline_value), clinical)?;
            Ok((p, (s - original).abs()))
        })
        .collect()
}

pub fn occlusion_attribution<M: SlopeModel + ?Sized>(
    model: &M,
    slice: &NormalizedSlice,
    clinical: &ClinicalFeatures,
    cfg: &OcclusionConfig,
) -> Result<AttributionMap> {
    let effects = patch_effects(model, slice, clinical, cfg)?;
    let (h, w) = (slice.height, slice.width);
    let mut sum = vec![0.0; h * w];
    let mut count = vec![0u32; h * w];
    for ((r0, c0, ph, pw), e) in effects {
        for r in r0..r0 + ph {
            for c in c0..c0 + pw {
                sum[r * w + c] += e;
                count[r * w + c] += 1;
            }
        }
    }
    let values = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n == 0 { 0.0 } else { s / f64::from(n) })
        .collect();
    Ok(AttributionMap {
        height: h,
        width: w,
        values,
    })
}

/// 8-bit overlay: `slice·(1−a) + a` with `a = 0.6·map/max(map)`.
pub fn overlay_pixels(slice: &NormalizedSlice, map: &AttributionMap) -> Result<Vec<u8>> {
    if (map.height, map.width) != (slice.height, slice.width) {
        return Err(ExplainError::ShapeMismatch {
            map: (map.height, map.width),
            slice: (slice.height, slice.width),
        });
    }
    let max = map.values.iter().copied().fold(0.0, f64::max);
    Ok(slice
        .values
        .iter()
        .zip(&map.values)
        .map(|(&v, &m)| {
            let a = if max > 0.0 { 0.6 * m / max } else { 0.0 };
            let x = f64::from(v).clamp(0.0, 1.0) * (1.0 - a) + a;
            (x * 255.0).round() as u8
        })
        .collect())
}

/// Binary PGM (P5) bytes.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes the overlay as PNG when `path` ends in `.png`, PGM otherwise.
pub fn render_overlay(slice: &NormalizedSlice, map: &AttributionMap, path: &Path) -> Result<()> {
    let pixels = overlay_pixels(slice, map)?;
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png {
        let mut buf = Vec::new();
        image::codecs::png::PngEncoder::new(&mut buf).write_image(
            &pixels,
            slice.width as u32,
            slice.height as u32,
            image::ExtendedColorType::L8,
        )?;
        buf
    } else {
        encode_pgm(slice.width, slice.height, &pixels)
    };
    fs::write(path, bytes).map_err(|source| ExplainError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clinical() -> ClinicalFeatures {
        ClinicalFeatures {
            age_z: 0.0,
            sex_male: 1.0,
            smoking_onehot: [0.0, 1.0, 0.0],
            percent_z: 0.0,
            base_fvc_z: 0.0,
            base_week: 0,
        }
    }

    fn slice(h: usize, w: usize) -> NormalizedSlice {
        NormalizedSlice {
            height: h,
            width: w,
            values: (0..h * w).map(|i| (i % 7) as f32 / 7.0).collect(),
        }
    }

    #[test]
    fn origins_cover_everything() {
        assert_eq!(patch_origins(64, 16, 8), vec![0, 8, 16, 24, 32, 40, 48]);
        assert_eq!(patch_origins(20, 16, 8), vec![0, 4]);
        assert_eq!(patch_origins(10, 16, 8), vec![0]);
    }

    #[test]
    fn constant_model_gives_zero_map() {
        let m = |_: &NormalizedSlice, _: &ClinicalFeatures| -5.0;
        let map = occlusion_attribution(&m, &slice(32, 24), &clinical(), &OcclusionConfig::default()).unwrap();
        assert_eq!((map.height, map.width), (32, 24));
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract() {
        let m = |s: &NormalizedSlice, _: &ClinicalFeatures| s.values.iter().map(|&v| v as f64).sum::<f64>();
        for (patch, stride) in [(1, 1), (3, 2), (5, 5), (16, 8), (40, 3)] {
            let cfg = OcclusionConfig { patch, stride, baseline_value: 0.0 };
            let map = occlusion_attribution(&m, &slice(13, 17), &clinical(), &cfg).unwrap();
            assert_eq!(map.values.len(), 13 * 17);
            assert!(map.values.iter().all(|&v| v >= 0.0));
        }
        assert!(OcclusionConfig { patch: 4, stride: 5, baseline_value: 0.0 }.validate().is_err());
    }

    #[test]
    fn single_pixel_model() {
        let m = |s: &NormalizedSlice, _: &ClinicalFeatures| f64::from(s.at(10, 20));
        let mut sl = slice(32, 32);
        sl.values[10 * 32 + 20] = 1.0;
        let cfg = OcclusionConfig { patch: 8, stride: 4, baseline_value: 0.0 };
        let effects = patch_effects(&m, &sl, &clinical(), &cfg).unwrap();
        let (best, _) = effects.iter().copied().fold(((0, 0, 0, 0), -1.0), |a, b| if b.1 > a.1 { b } else { a });
        assert!(best.0 <= 10 && 10 < best.0 + best.2 && best.1 <= 20 && 20 < best.1 + best.3);
        let map = occlusion_attribution(&m, &sl, &clinical(), &cfg).unwrap();
        assert_eq!(map.at(0, 0), 0.0);
        assert!(map.at(10, 20) > 0.0);
    }

    #[test]
    fn bias_shift_invariance_and_identity_baseline() {
        let sl = slice(16, 16);
        let a = |s: &NormalizedSlice, _: &ClinicalFeatures| s.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        let b = |s: &NormalizedSlice, c: &ClinicalFeatures| a(s, c) - 12.5;
        let cfg = OcclusionConfig { patch: 4, stride: 2, baseline_value: 0.0 };
        assert_eq!(
            occlusion_attribution(&a, &sl, &clinical(), &cfg).unwrap(),
            occlusion_attribution(&b, &sl, &clinical(), &cfg).unwrap()
        );
        let flat = NormalizedSlice { height: 16, width: 16, values: vec![0.25; 256] };
        let cfg = OcclusionConfig { baseline_value: 0.25, ..cfg };
        let map = occlusion_attribution(&a, &flat, &clinical(), &cfg).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn overlay_rendering() {
        let sl = slice(8, 8);
        let zero = AttributionMap { height: 8, width: 8, values: vec![0.0; 64] };
        let plain: Vec<u8> = sl.values.iter().map(|&v| (f64::from(v) * 255.0).round() as u8).collect();
        assert_eq!(overlay_pixels(&sl, &zero).unwrap(), plain);
        let mut hot = zero.clone();
        hot.values[3 * 8 + 4] = 2.0;
        let flat = NormalizedSlice { height: 8, width: 8, values: vec![0.3; 64] };
        let px = overlay_pixels(&flat, &hot).unwrap();
        let brightest = (0..64).max_by_key(|&i| px[i]).unwrap();
        assert_eq!(brightest, 3 * 8 + 4);
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.pgm", "a.png"] {
            let p = dir.path().join(name);
            render_overlay(&sl, &hot, &p).unwrap();
            let first = fs::read(&p).unwrap();
            render_overlay(&sl, &hot, &p).unwrap();
            assert_eq!(first, fs::read(&p).unwrap());
        }
        assert!(fs::read(dir.path().join("a.pgm")).unwrap().starts_with(b"P5\n8 8\n255\n"));
        let bad = AttributionMap { height: 2, width: 2, values: vec![0.0; 4] };
        assert!(overlay_pixels(&sl, &bad).is_err());
    }
}
