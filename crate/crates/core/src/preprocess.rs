//! Raw CT slices to fixed-size network inputs.
//!
//! The pipeline is: Hounsfield conversion, padding and circular-FOV artifact
//! masking, per-volume air calibration, selection of the inferior slices,
//! lung windowing and bilinear resampling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{CtSlice, CtVolume};

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("volume has no slices")]
    EmptyVolume,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub window_level: f32,
    pub window_width: f32,
    pub lower_fraction: f64,
    pub target_size: (usize, usize),
    pub padding_sentinel_threshold: f32,
    pub air_hu: f32,
    pub calibration_tolerance: f32,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window_level: -650.0,
            window_width: 1700.0,
            lower_fraction: 0.55,
            target_size: (256, 256),
            padding_sentinel_threshold: -2000.0,
            air_hu: -1000.0,
            calibration_tolerance: 50.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: String| Err(PreprocessError::InvalidConfig(m));
        if !(self.window_width > 0.0) {
            return bad(format!("window_width {} must be positive", self.window_width));
        }
        if !(self.lower_fraction > 0.0 && self.lower_fraction <= 1.0) {
            return bad(format!("lower_fraction {} must lie in (0, 1]", self.lower_fraction));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return bad("target_size must be positive".into());
        }
        if !(self.calibration_tolerance >= 0.0) {
            return bad("calibration_tolerance must be non-negative".into());
        }
        Ok(())
    }
}

/// Slice in Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct HuSlice {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

/// Windowed slice with every value in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSlice {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl NormalizedSlice {
    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.width + c]
    }
}

pub fn to_hounsfield(slice: &CtSlice) -> HuSlice {
    let values = slice
        .pixels
        .iter()
        .map(|&p| (p as f64 * slice.rescale_slope + slice.rescale_intercept) as f32)
        .collect();
    HuSlice {
        rows: slice.rows,
        cols: slice.cols,
        values,
    }
}

/// Clamps to `[level - width/2, level + width/2]` and maps linearly to [0, 1].
pub fn apply_window(slice: &HuSlice, level: f32, width: f32) -> NormalizedSlice {
    let lo = level - width / 2.0;
    let values = slice
        .values
        .iter()
        .map(|&v| window_value(v, lo, width))
        .collect();
    NormalizedSlice {
        height: slice.rows,
        width: slice.cols,
        values,
    }
}

#[inline]
fn window_value(v: f32, lo: f32, width: f32) -> f32 {
    ((v - lo) / width).clamp(0.0, 1.0)
}

/// Pixels outside the largest circle inscribed in the frame.
fn outside_inscribed_circle(rows: usize, cols: usize) -> Vec<bool> {
    let cy = (rows as f64 - 1.0) / 2.0;
    let cx = (cols as f64 - 1.0) / 2.0;
    let radius = rows.min(cols) as f64 / 2.0;
    let r2 = radius * radius;
    (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| {
                let dy = r as f64 - cy;
                let dx = c as f64 - cx;
                dy * dy + dx * dx > r2
            })
        })
        .collect()
}

/// Overlap ratio (intersection over union) needed to call a sentinel mask a
/// circular field-of-view artifact.
const CIRCLE_OVERLAP: f64 = 0.9;

/// Replaces padding sentinels with air and, when the sentinels trace the
/// outside of the inscribed circle, fills the whole outside with air.
pub fn mask_artifacts(slice: &HuSlice, cfg: &PreprocessConfig) -> HuSlice {
    let sentinel: Vec<bool> = slice
        .values
        .iter()
        .map(|&v| v <= cfg.padding_sentinel_threshold)
        .collect();
    let n_sentinel = sentinel.iter().filter(|&&s| s).count();
    if n_sentinel == 0 {
        return slice.clone();
    }
    let mut out = slice.clone();
    for (v, &s) in out.values.iter_mut().zip(&sentinel) {
        if s {
            *v = cfg.air_hu;
        }
    }
    let outside = outside_inscribed_circle(slice.rows, slice.cols);
    let inter = sentinel.iter().zip(&outside).filter(|(s, o)| **s && **o).count();
    let union = sentinel.iter().zip(&outside).filter(|(s, o)| **s || **o).count();
    if union > 0 && inter as f64 / union as f64 >= CIRCLE_OVERLAP {
        for (v, &o) in out.values.iter_mut().zip(&outside) {
            if o {
                *v = cfg.air_hu;
            }
        }
    }
    out
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Width of the border frame sampled for the air reference.
const BORDER: usize = 2;

fn border_values(s: &HuSlice, out: &mut Vec<f32>) {
    for r in 0..s.rows {
        for c in 0..s.cols {
            if r < BORDER || c < BORDER || r + BORDER >= s.rows || c + BORDER >= s.cols {
                out.push(s.values[r * s.cols + c]);
            }
        }
    }
}

/// Median HU over the outer frame of every slice.
pub fn border_air_median(slices: &[HuSlice]) -> Option<f32> {
    let mut border = Vec::new();
    for s in slices {
        border_values(s, &mut border);
    }
    (!border.is_empty()).then(|| median(border))
}

/// Shifts the whole volume so that its border air sits at `air_hu` when the
/// measured air reference is off by more than the tolerance.
pub fn correct_calibration(slices: &[HuSlice], cfg: &PreprocessConfig) -> Vec<HuSlice> {
    let Some(air) = border_air_median(slices) else {
        return slices.to_vec();
    };
    let offset = air - cfg.air_hu;
    if offset.abs() <= cfg.calibration_tolerance {
        return slices.to_vec();
    }
    slices
        .iter()
        .map(|s| HuSlice {
            rows: s.rows,
            cols: s.cols,
            values: s.values.iter().map(|v| v - offset).collect(),
        })
        .collect()
}

/// Number of slices kept from an `n`-slice volume.
pub fn lower_slice_count(n: usize, fraction: f64) -> usize {
    // 0.55 * 100 evaluates to 55.000000000000007; the slack keeps exact
    // products from rounding up.
    let k = (fraction * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n)
}

/// Keeps the inferior `ceil(fraction * n)` slices of a z-ascending list.
pub fn select_lower_slices<T: Clone>(slices: &[T], fraction: f64) -> Result<Vec<T>, PreprocessError> {
    if slices.is_empty() {
        return Err(PreprocessError::EmptyVolume);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PreprocessError::InvalidConfig(format!(
            "lower_fraction {fraction} must lie in (0, 1]"
        )));
    }
    Ok(slices[..lower_slice_count(slices.len(), fraction)].to_vec())
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_slice(slice: &NormalizedSlice, target: (usize, usize)) -> NormalizedSlice {
    let (h, w) = target;
    if (h, w) == (slice.height, slice.width) {
        return slice.clone();
    }
    let sy = slice.height as f64 / h as f64;
    let sx = slice.width as f64 / w as f64;
    let max_y = (slice.height - 1) as f64;
    let max_x = (slice.width - 1) as f64;
    let mut values = Vec::with_capacity(h * w);
    for i in 0..h {
        let y = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(slice.height - 1);
        let fy = y - y0 as f64;
        for j in 0..w {
            let x = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(slice.width - 1);
            let fx = x - x0 as f64;
            let top = slice.at(y0, x0) as f64 * (1.0 - fx) + slice.at(y0, x1) as f64 * fx;
            let bottom = slice.at(y1, x0) as f64 * (1.0 - fx) + slice.at(y1, x1) as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            values.push((v as f32).clamp(0.0, 1.0));
        }
    }
    NormalizedSlice {
        height: h,
        width: w,
        values,
    }
}

/// Runs the full chain on a volume and returns the model inputs for the
/// selected inferior slices, in ascending z.
pub fn preprocess_volume(
    volume: &CtVolume,
    cfg: &PreprocessConfig,
) -> Result<Vec<NormalizedSlice>, PreprocessError> {
    cfg.validate()?;
    if volume.is_empty() {
        return Err(PreprocessError::EmptyVolume);
    }
    // Calibration looks at the whole volume, so every slice is masked first.
    let masked: Vec<HuSlice> = volume
        .slices()
        .iter()
        .map(|s| mask_artifacts(&to_hounsfield(s), cfg))
        .collect();
    let calibrated = correct_calibration(&masked, cfg);
    let lower = select_lower_slices(&calibrated, cfg.lower_fraction)?;
    Ok(lower
        .iter()
        .map(|s| resize_slice(&apply_window(s, cfg.window_level, cfg.window_width), cfg.target_size))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hu(rows: usize, cols: usize, values: Vec<f32>) -> HuSlice {
        HuSlice { rows, cols, values }
    }

    fn raw(pixel: i16, slope: f64, intercept: f64) -> f32 {
        let s = CtSlice {
            rows: 1,
            cols: 1,
            pixels: vec![pixel],
            rescale_slope: slope,
            rescale_intercept: intercept,
            z_position: 0.0,
            source_id: String::new(),
        };
        to_hounsfield(&s).values[0]
    }

    #[test]
    fn hounsfield_affine() {
        assert_eq!(raw(0, 1.0, -1024.0), -1024.0);
        assert_eq!(raw(1024, 1.0, -1024.0), 0.0);
        assert_eq!(raw(500, 2.0, -1000.0), 0.0);
    }

    #[test]
    fn window_endpoints() {
        let s = hu(1, 5, vec![-1500.0, 200.0, -650.0, -2000.0, 900.0]);
        let w = apply_window(&s, -650.0, 1700.0);
        assert_eq!(w.values, vec![0.0, 1.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn corner_padding_becomes_air() {
        let cfg = PreprocessConfig::default();
        let mut values = vec![-700.0f32; 64];
        for &i in &[0, 7, 56, 63] {
            values[i] = -3000.0;
        }
        let s = hu(8, 8, values.clone());
        let out = mask_artifacts(&s, &cfg);
        for (i, (&a, &b)) in values.iter().zip(&out.values).enumerate() {
            if [0, 7, 56, 63].contains(&i) {
                assert_eq!(b, -1000.0);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn clean_slice_unchanged() {
        let cfg = PreprocessConfig::default();
        let s = hu(3, 3, vec![-1000.0, -500.0, 0.0, 100.0, -1999.0, 40.0, 3000.0, -10.0, 5.0]);
        assert_eq!(mask_artifacts(&s, &cfg), s);
    }

    #[test]
    fn circular_fov_filled_with_air() {
        let cfg = PreprocessConfig::default();
        let n = 64;
        let (cy, cx, r) = (31.5f64, 31.5f64, 32.0f64);
        let mut values = vec![0f32; n * n];
        let mut outside = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let o = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2) > r * r;
                outside[i * n + j] = o;
                values[i * n + j] = if o { -2048.0 } else { 20.0 };
            }
        }
        // A few outside pixels carry ordinary values; the sentinel set still
        // overlaps the outside region by well over 90%.
        let mut seen = 0;
        for k in 0..n * n {
            if outside[k] && seen < 5 {
                values[k] = 35.0;
                seen += 1;
            }
        }
        let out = mask_artifacts(&hu(n, n, values.clone()), &cfg);
        for k in 0..n * n {
            if outside[k] {
                assert_eq!(out.values[k], -1000.0);
            } else {
                assert_eq!(out.values[k], values[k]);
            }
        }
    }

    fn frame_volume(border: f32, interior: f32) -> Vec<HuSlice> {
        (0..3)
            .map(|_| {
                let n = 10;
                let mut v = vec![interior; n * n];
                for r in 0..n {
                    for c in 0..n {
                        if r < 2 || c < 2 || r >= n - 2 || c >= n - 2 {
                            v[r * n + c] = border;
                        }
                    }
                }
                hu(n, n, v)
            })
            .collect()
    }

    #[test]
    fn calibration_shift() {
        let cfg = PreprocessConfig::default();
        let vol = frame_volume(-900.0, -300.0);
        let out = correct_calibration(&vol, &cfg);
        for (a, b) in vol.iter().zip(&out) {
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(*y, x - 100.0);
            }
        }
    }

    #[test]
    fn calibration_within_tolerance() {
        let cfg = PreprocessConfig::default();
        let vol = frame_volume(-1000.0, -300.0);
        assert_eq!(correct_calibration(&vol, &cfg), vol);
        let vol = frame_volume(-960.0, -300.0);
        assert_eq!(correct_calibration(&vol, &cfg), vol);
    }

    #[test]
    fn lower_slice_counts() {
        let v: Vec<usize> = (0..100).collect();
        assert_eq!(select_lower_slices(&v, 0.55).unwrap(), (0..55).collect::<Vec<_>>());
        assert_eq!(select_lower_slices(&v[..20], 0.55).unwrap().len(), 11);
        assert_eq!(select_lower_slices(&v[..1], 0.55).unwrap().len(), 1);
        assert_eq!(
            select_lower_slices::<usize>(&[], 0.55),
            Err(PreprocessError::EmptyVolume)
        );
    }

    #[test]
    fn resize_identity_and_constant() {
        let s = NormalizedSlice {
            height: 3,
            width: 4,
            values: (0..12).map(|i| i as f32 / 12.0).collect(),
        };
        assert_eq!(resize_slice(&s, (3, 4)), s);
        let c = NormalizedSlice {
            height: 7,
            width: 5,
            values: vec![0.375; 35],
        };
        for target in [(1, 1), (3, 9), (16, 16)] {
            assert!(resize_slice(&c, target).values.iter().all(|&v| v == 0.375));
        }
    }

    #[test]
    fn config_json_field_names() {
        let json = serde_json::to_value(PreprocessConfig::default()).unwrap();
        for key in [
            "window_level",
            "window_width",
            "lower_fraction",
            "target_size",
            "padding_sentinel_threshold",
            "air_hu",
            "calibration_tolerance",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let partial: PreprocessConfig = serde_json::from_str(r#"{"window_level": -600}"#).unwrap();
        assert_eq!(partial.window_level, -600.0);
        assert_eq!(partial.window_width, 1700.0);
        assert!(serde_json::from_str::<PreprocessConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PreprocessConfig { window_width: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = PreprocessConfig { lower_fraction: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn window_bounded_and_monotone(a in -5000f32..5000.0, b in -5000f32..5000.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let w = apply_window(&hu(1, 2, vec![lo, hi]), -650.0, 1700.0);
            prop_assert!(w.values.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(w.values[0] <= w.values[1]);
        }

        #[test]
        fn masking_idempotent(rows in 1usize..20, cols in 1usize..20, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let values = (0..rows * cols)
                .map(|_| if rng.random_bool(0.3) { -3000.0 } else { rng.random_range(-1100.0..400.0) })
                .collect();
            let cfg = PreprocessConfig::default();
            let once = mask_artifacts(&hu(rows, cols, values), &cfg);
            prop_assert_eq!(mask_artifacts(&once, &cfg), once.clone());
        }

        #[test]
        fn calibration_idempotent(offset in -400f32..400.0, interior in -900f32..100.0) {
            let cfg = PreprocessConfig::default();
            let once = correct_calibration(&frame_volume(-1000.0 + offset, interior), &cfg);
            prop_assert_eq!(correct_calibration(&once, &cfg), once.clone());
        }

        #[test]
        fn lower_count_is_ceiling(n in 1usize..2000, pct in 1u32..=100) {
            let fraction = pct as f64 / 100.0;
            let expected = (pct as usize * n).div_ceil(100);
            prop_assert_eq!(lower_slice_count(n, fraction), expected);
        }
    }
}
