//! Pulmonary fibrosis progression from chest CT.
//!
//! The crate covers the whole pipeline: reading a minimal DICOM subset and the
//! clinical metadata CSV, Hounsfield conversion and windowing, a small
//! reverse-mode tensor engine, the PRPE convolutional backbone, the FVC
//! prediction layer with its Elastic Net companion, the modified Laplace Log
//! Likelihood metric, occlusion attribution and a synthetic cohort generator.

pub mod backbone;
pub mod explain;
pub mod ingest;
pub mod predictor;
pub mod preprocess;
pub mod regress;
pub mod scoring;
pub mod synth;
pub mod tensor;

pub use ingest::{CtSlice, CtVolume, PatientRecord, Sex, SmokingStatus, Visit};
pub use predictor::{FvcModel, FvcPrediction};
pub use preprocess::{NormalizedSlice, PreprocessConfig};
pub use tensor::Tensor;
