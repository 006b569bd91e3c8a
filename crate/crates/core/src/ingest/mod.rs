//! CT slice and clinical metadata ingestion.
//!
//! Parsers here are pure functions of their input; no state is shared.

mod dicom;
mod metadata;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dicom::{parse_dicom_slice, write_dicom_slice};
pub use metadata::{parse_metadata_csv, write_metadata_csv, METADATA_HEADER};

/// File name of the metadata table inside a dataset directory.
pub const METADATA_FILE: &str = "metadata.csv";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("missing DICM magic after the 128-byte preamble")]
    MissingMagic,
    #[error("truncated data element at byte offset {offset}")]
    TruncatedElement { offset: usize },
    #[error("element ({group:04X},{element:04X}) uses undefined length, which is unsupported")]
    UndefinedLength { group: u16, element: u16 },
    #[error("pixel data holds {actual} bytes, expected {expected} (2 x rows x cols)")]
    PixelLengthMismatch { expected: usize, actual: usize },
    #[error("unsupported BitsAllocated {0}, only 16 is accepted")]
    UnsupportedBitsAllocated(u16),
    #[error("required tag {0} is missing")]
    MissingTag(&'static str),
    #[error("malformed value for {tag}: {value:?}")]
    BadValue { tag: &'static str, value: String },
    #[error("unsigned pixel value {0} does not fit a signed 16-bit sample")]
    PixelOutOfRange(u16),
    #[error("invalid slice: {0}")]
    InvalidSlice(String),
    #[error("volume needs at least one slice")]
    EmptyVolume,
    #[error("slice {index} is {got_rows}x{got_cols}, volume is {rows}x{cols}")]
    DimensionMismatch {
        index: usize,
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error("two slices share z position {0}")]
    DuplicateZ(f64),
    #[error("bad CSV header {0:?}")]
    BadHeader(String),
    #[error("line {line}: {field} value {value:?} is outside the vocabulary")]
    BadEnum {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: {field} value {value:?} is not numeric")]
    NonNumericField {
        line: usize,
        field: &'static str,
        value: String,
    },
    #[error("line {line}: {reason}")]
    BadRow { line: usize, reason: String },
    #[error("patient {patient}: week {week} appears twice")]
    DuplicateWeek { patient: String, week: i32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// One axial CT image with its raw stored samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtSlice {
    pub rows: usize,
    pub cols: usize,
    /// Raw stored values, row-major.
    pub pixels: Vec<i16>,
    /// HU per raw unit.
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    /// Patient-axis position in mm.
    pub z_position: f64,
    pub source_id: String,
}

impl CtSlice {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(IngestError::InvalidSlice(format!(
                "dimensions {}x{} must be positive",
                self.rows, self.cols
            )));
        }
        if self.pixels.len() != self.rows * self.cols {
            return Err(IngestError::InvalidSlice(format!(
                "{} pixels for a {}x{} slice",
                self.pixels.len(),
                self.rows,
                self.cols
            )));
        }
        if self.rescale_slope == 0.0 || !self.rescale_slope.is_finite() {
            return Err(IngestError::InvalidSlice(format!(
                "rescale slope {} must be finite and non-zero",
                self.rescale_slope
            )));
        }
        if !self.rescale_intercept.is_finite() || !self.z_position.is_finite() {
            return Err(IngestError::InvalidSlice(
                "rescale intercept and z position must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// A patient's slices ordered by strictly increasing z.
#[derive(Clone, Debug, PartialEq)]
pub struct CtVolume {
    pub patient_id: String,
    slices: Vec<CtSlice>,
}

impl CtVolume {
    pub fn slices(&self) -> &[CtSlice] {
        &self.slices
    }

    pub fn into_slices(self) -> Vec<CtSlice> {
        self.slices
    }

    pub fn rows(&self) -> usize {
        self.slices[0].rows
    }

    pub fn cols(&self) -> usize {
        self.slices[0].cols
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Sorts slices by z and checks that they stack into one volume.
pub fn assemble_volume(patient_id: impl Into<String>, mut slices: Vec<CtSlice>) -> Result<CtVolume> {
    let first = slices.first().ok_or(IngestError::EmptyVolume)?;
    let (rows, cols) = (first.rows, first.cols);
    for (index, s) in slices.iter().enumerate() {
        s.validate()?;
        if s.rows != rows || s.cols != cols {
            return Err(IngestError::DimensionMismatch {
                index,
                rows,
                cols,
                got_rows: s.rows,
                got_cols: s.cols,
            });
        }
    }
    slices.sort_by(|a, b| a.z_position.total_cmp(&b.z_position));
    if let Some(w) = slices.windows(2).find(|w| w[0].z_position == w[1].z_position) {
        return Err(IngestError::DuplicateZ(w[0].z_position));
    }
    Ok(CtVolume {
        patient_id: patient_id.into(),
        slices,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "Male",
            Sex::Female => "Female",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Male" => Some(Sex::Male),
            "Female" => Some(Sex::Female),
            _ => None,
        }
    }
}

/// Smoking history. The declaration order is the one-hot order used by the
/// clinical encoders: current, ex, never.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SmokingStatus {
    CurrentlySmokes,
    ExSmoker,
    NeverSmoked,
}

impl SmokingStatus {
    pub const ALL: [SmokingStatus; 3] = [
        SmokingStatus::CurrentlySmokes,
        SmokingStatus::ExSmoker,
        SmokingStatus::NeverSmoked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SmokingStatus::CurrentlySmokes => "Currently smokes",
            SmokingStatus::ExSmoker => "Ex-smoker",
            SmokingStatus::NeverSmoked => "Never smoked",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.as_str() == s)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One spirometry visit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub week: i32,
    pub fvc_ml: f64,
    pub percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Sorted by strictly increasing week.
    pub visits: Vec<Visit>,
    pub age: f64,
    pub sex: Sex,
    pub smoking: SmokingStatus,
}

impl PatientRecord {
    /// The earliest visit, used as the spirometry baseline.
    pub fn base_visit(&self) -> Visit {
        self.visits[0]
    }
}

/// Reads a dataset directory: `metadata.csv` plus one sub-directory of
/// `.dcm` files per patient. Patients without a volume directory are
/// returned with `None`.
pub fn read_dataset(dir: &Path) -> Result<Vec<(PatientRecord, Option<CtVolume>)>> {
    let csv_path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&csv_path).map_err(|source| IngestError::Io {
        path: csv_path.display().to_string(),
        source,
    })?;
    let records = parse_metadata_csv(&text)?;
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let pdir = dir.join(&record.patient_id);
        let volume = if pdir.is_dir() {
            Some(read_volume_dir(&record.patient_id, &pdir)?)
        } else {
            None
        };
        out.push((record, volume));
    }
    Ok(out)
}

/// Reads every `.dcm` file of a directory into one volume.
pub fn read_volume_dir(patient_id: &str, dir: &Path) -> Result<CtVolume> {
    let io_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| IngestError::Io { path, source }
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("dcm")))
        .collect();
    paths.sort();
    let mut slices = Vec::with_capacity(paths.len());
    for path in paths {
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let mut slice = parse_dicom_slice(&bytes)?;
        if slice.source_id.is_empty() {
            slice.source_id = path.display().to_string();
        }
        slices.push(slice);
    }
    assemble_volume(patient_id, slices)
}
