//! FVC prediction: per-slice decline slopes from image features and clinical
//! metadata, median aggregation, extrapolation from the baseline visit,
//! ensembling with the Elastic Net regressor and a confidence σ.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{backbone_graph, BackboneConfig, BackboneError, Bound};
use crate::ingest::{CtVolume, PatientRecord, Sex, SmokingStatus};
use crate::preprocess::{preprocess_volume, NormalizedSlice, PreprocessConfig, PreprocessError};
use crate::regress::{
    fit_elastic_net, fit_quantile, predict_elastic_net, select_elastic_net, sigma_from_quantiles,
    ElasticNetModel, ElasticNetParams, QuantileModel, RegressError, DEFAULT_QUANTILES,
};
use crate::tensor::{read_params, write_params, Adam, Graph, LrSchedule, ParamStore, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("encoding statistics unusable: {0}")]
    MissingStats(String),
    #[error("no slopes to aggregate")]
    EmptyInput,
    #[error("training needs at least one patient with a volume and two or more visits")]
    InsufficientVisits,
    #[error("patient {0} has no CT volume")]
    NoVolume(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("preprocess: {0}")]
    Preprocess(#[from] PreprocessError),
    #[error("backbone: {0}")]
    Backbone(#[from] BackboneError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("regression: {0}")]
    Regress(#[from] RegressError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("prediction csv line {line}: {reason}")]
    BadCsv { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, PredictError>;

/// Length of [`ClinicalFeatures::to_vector`].
pub const CLINICAL_DIM: usize = 7;

/// Training-set statistics used to standardise clinical inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingStats {
    pub age_mean: f64,
    pub age_std: f64,
    pub percent_mean: f64,
    pub percent_std: f64,
    pub base_fvc_mean: f64,
    pub base_fvc_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if sd > 1e-9 { sd } else { 1.0 })
}

impl EncodingStats {
    /// Statistics over the baseline visits of `records`.
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a PatientRecord>) -> Result<Self> {
        let (mut age, mut pct, mut fvc) = (vec![], vec![], vec![]);
        for r in records {
            let b = r.base_visit();
            age.push(r.age);
            pct.push(b.percent);
            fvc.push(b.fvc_ml);
        }
        if age.is_empty() {
            return Err(PredictError::MissingStats("no records".into()));
        }
        let (age_mean, age_std) = mean_std(&age);
        let (percent_mean, percent_std) = mean_std(&pct);
        let (base_fvc_mean, base_fvc_std) = mean_std(&fvc);
        let stats = Self {
            age_mean,
            age_std,
            percent_mean,
            percent_std,
            base_fvc_mean,
            base_fvc_std,
        };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.age_mean,
            self.age_std,
            self.percent_mean,
            self.percent_std,
            self.base_fvc_mean,
            self.base_fvc_std,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(PredictError::MissingStats("non-finite statistic".into()));
        }
        if self.age_std <= 0.0 || self.percent_std <= 0.0 || self.base_fvc_std <= 0.0 {
            return Err(PredictError::MissingStats("standard deviations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFeatures {
    pub age_z: f64,
    pub sex_male: f64,
    /// One-hot in the order (current, ex, never).
    pub smoking_onehot: [f64; 3],
    pub percent_z: f64,
    pub base_fvc_z: f64,
    pub base_week: i32,
}

impl ClinicalFeatures {
    pub fn to_vector(&self) -> [f64; CLINICAL_DIM] {
        [
            self.age_z,
            self.sex_male,
            self.smoking_onehot[0],
            self.smoking_onehot[1],
            self.smoking_onehot[2],
            self.percent_z,
            self.base_fvc_z,
        ]
    }
}

pub fn encode_metadata(record: &PatientRecord, stats: &EncodingStats) -> Result<ClinicalFeatures> {
    stats.validate()?;
    let base = record
        .visits
        .first()
        .ok_or_else(|| PredictError::InvalidConfig(format!("patient {} has no visits", record.patient_id)))?;
    let mut smoking_onehot = [0.0; 3];
    smoking_onehot[record.smoking.index()] = 1.0;
    Ok(ClinicalFeatures {
        age_z: (record.age - stats.age_mean) / stats.age_std,
        sex_male: f64::from(u8::from(record.sex == Sex::Male)),
        smoking_onehot,
        percent_z: (base.percent - stats.percent_mean) / stats.percent_std,
        base_fvc_z: (base.fvc_ml - stats.base_fvc_mean) / stats.base_fvc_std,
        base_week: base.week,
    })
}

/// Dense slope head over `[features ‖ clinical]`. Inputs are multiplied by
/// `input_gain` before the dense layer so the head can move in ml/week units
/// at small learning rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_gain: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { input_gain: 30.0 }
    }
}

pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";

/// Head parameters: `head.w` is (feature_dim + 7)×1, `head.b` has one entry.
pub fn init_head(feature_dim: usize, bias: f32) -> ParamStore<f32> {
    let mut p = ParamStore::new();
    p.insert(HEAD_W, Tensor::zeros(&[feature_dim + CLINICAL_DIM, 1]));
    p.insert(HEAD_B, Tensor::scalar(bias));
    p
}

/// Slope in ml/week for one feature vector.
pub fn slice_slope(features: &[f32], clinical: &ClinicalFeatures, head: &ParamStore<f32>, cfg: &HeadConfig) -> Result<f64> {
    let w = head.require(HEAD_W)?;
    let b = head.require(HEAD_B)?;
    let n = features.len() + CLINICAL_DIM;
    if w.shape() != [n, 1] || b.numel() != 1 {
        return Err(PredictError::ShapeMismatch(format!(
            "head weights {:?} do not fit {} features",
            w.shape(),
            features.len()
        )));
    }
    let clin = clinical.to_vector();
    let input = features.iter().map(|&v| v as f64).chain(clin);
    let dot: f64 = input.zip(w.data()).map(|(x, &wi)| x * cfg.input_gain * wi as f64).sum();
    Ok(b.data()[0] as f64 + dot)
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Median; an even count averages the two middle values.
pub fn aggregate_slopes(slopes: &[f64]) -> Result<f64> {
    if slopes.is_empty() {
        return Err(PredictError::EmptyInput);
    }
    if slopes.iter().any(|s| !s.is_finite()) {
        return Err(PredictError::NonFinite("slice slope".into()));
    }
    let s = sorted(slopes);
    let n = s.len();
    Ok(if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    })
}

/// Linearly interpolated quantile of an ascending slice.
fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Interquartile range of the per-slice slopes (0 for one slice).
pub fn slope_iqr(slopes: &[f64]) -> Result<f64> {
    if slopes.is_empty() {
        return Err(PredictError::EmptyInput);
    }
    let s = sorted(slopes);
    Ok(quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25))
}

pub fn extrapolate_fvc(base_fvc: f64, base_week: i32, slope: f64, target_week: i32) -> f64 {
    base_fvc + slope * f64::from(target_week - base_week)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    #[default]
    Formula,
    Quantile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub cnn_weight: f64,
    pub sigma0: f64,
    pub sigma_week_gain: f64,
    pub sigma_dispersion_gain: f64,
    pub sigma_source: SigmaSource,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            cnn_weight: 0.5,
            sigma0: 200.0,
            sigma_week_gain: 3.0,
            sigma_dispersion_gain: 1.0,
            sigma_source: SigmaSource::Formula,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cnn_weight) {
            return Err(PredictError::InvalidConfig(format!("cnn_weight {} not in [0, 1]", self.cnn_weight)));
        }
        for (name, v) in [
            ("sigma0", self.sigma0),
            ("sigma_week_gain", self.sigma_week_gain),
            ("sigma_dispersion_gain", self.sigma_dispersion_gain),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PredictError::InvalidConfig(format!("{name} {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// `w·cnn + (1−w)·enet`, at least 1 ml.
pub fn ensemble_fvc(fvc_cnn: f64, fvc_enet: f64, cfg: &EnsembleConfig) -> f64 {
    let w = cfg.cnn_weight;
    (w * fvc_cnn + (1.0 - w) * fvc_enet).max(1.0)
}

/// `sigma0 + a·weeks + b·iqr·weeks`, at least 1 ml.
pub fn estimate_sigma(weeks_elapsed: f64, slope_iqr: f64, cfg: &EnsembleConfig) -> f64 {
    let w = weeks_elapsed.abs();
    (cfg.sigma0 + cfg.sigma_week_gain * w + cfg.sigma_dispersion_gain * slope_iqr * w).max(1.0)
}

/// Elastic Net / quantile inputs: base FVC, base percent, age, sex, smoking
/// one-hot (current, ex, never) and weeks since baseline.
pub fn metadata_features(record: &PatientRecord, target_week: i32) -> Vec<f64> {
    let base = record.base_visit();
    let mut v = vec![
        base.fvc_ml,
        base.percent,
        record.age,
        f64::from(u8::from(record.sex == Sex::Male)),
    ];
    v.extend(SmokingStatus::ALL.iter().map(|s| f64::from(u8::from(*s == record.smoking))));
    v.push(f64::from(target_week - base.week));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FvcPrediction {
    pub fvc_ml: f64,
    pub sigma_ml: f64,
    pub target_week: i32,
}

#[derive(Clone, Debug)]
pub struct FvcModel {
    pub preprocess: PreprocessConfig,
    pub backbone_config: BackboneConfig,
    pub backbone: ParamStore<f32>,
    pub head_config: HeadConfig,
    pub head: ParamStore<f32>,
    pub stats: EncodingStats,
    pub elastic_net: ElasticNetModel,
    pub quantile: Option<QuantileModel>,
    pub ensemble: EnsembleConfig,
}

/// Backbone features for each slice, in slice order.
pub fn slice_features(slices: &[NormalizedSlice], cfg: &BackboneConfig, params: &ParamStore<f32>) -> Result<Vec<Vec<f32>>> {
    let one = |s: &NormalizedSlice| -> Result<Vec<f32>> {
        let x = Tensor::new(vec![1, 1, s.height, s.width], s.values.clone())?;
        Ok(crate::backbone::backbone_forward(&x, cfg, params)?.into_data())
    };
    slices.par_iter().map(one).collect()
}

/// Per-slice slopes of one patient plus their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientSlopes {
    pub slice_slopes: Vec<f64>,
    pub slope: f64,
    pub iqr: f64,
}

impl FvcModel {
    pub fn clinical(&self, record: &PatientRecord) -> Result<ClinicalFeatures> {
        encode_metadata(record, &self.stats)
    }

    pub fn slopes_from_slices(&self, slices: &[NormalizedSlice], record: &PatientRecord) -> Result<PatientSlopes> {
        let clinical = self.clinical(record)?;
        let feats = slice_features(slices, &self.backbone_config, &self.backbone)?;
        let slice_slopes = feats
            .iter()
            .map(|f| slice_slope(f, &clinical, &self.head, &self.head_config))
            .collect::<Result<Vec<_>>>()?;
        Ok(PatientSlopes {
            slope: aggregate_slopes(&slice_slopes)?,
            iqr: slope_iqr(&slice_slopes)?,
            slice_slopes,
        })
    }

    pub fn patient_slopes(&self, volume: &CtVolume, record: &PatientRecord) -> Result<PatientSlopes> {
        let slices = preprocess_volume(volume, &self.preprocess)?;
        self.slopes_from_slices(&slices, record)
    }

    /// CNN-branch FVC at `target_week` (no ensembling).
    pub fn cnn_fvc(&self, slopes: &PatientSlopes, record: &PatientRecord, target_week: i32) -> f64 {
        let base = record.base_visit();
        extrapolate_fvc(base.fvc_ml, base.week, slopes.slope, target_week)
    }

    pub fn predict_at(&self, slopes: &PatientSlopes, record: &PatientRecord, target_week: i32) -> Result<FvcPrediction> {
        let base = record.base_visit();
        let cnn = self.cnn_fvc(slopes, record, target_week);
        let feats = metadata_features(record, target_week);
        let enet = predict_elastic_net(&self.elastic_net, &feats);
        let fvc_ml = ensemble_fvc(cnn, enet, &self.ensemble);
        let sigma_ml = match (&self.ensemble.sigma_source, &self.quantile) {
            (SigmaSource::Quantile, Some(q)) => sigma_from_quantiles(q, &feats),
            _ => estimate_sigma(f64::from(target_week - base.week), slopes.iqr, &self.ensemble),
        };
        if !fvc_ml.is_finite() || !sigma_ml.is_finite() {
            return Err(PredictError::NonFinite(format!("prediction for {}", record.patient_id)));
        }
        Ok(FvcPrediction {
            fvc_ml,
            sigma_ml,
            target_week,
        })
    }
}

pub fn predict_patient(volume: &CtVolume, record: &PatientRecord, target_week: i32, model: &FvcModel) -> Result<FvcPrediction> {
    let slopes = model.patient_slopes(volume, record)?;
    model.predict_at(&slopes, record, target_week)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub head: HeadConfig,
    /// Choose Elastic Net hyperparameters by grid search; otherwise use the defaults.
    pub grid_search: bool,
    pub quantiles: Vec<f64>,
    pub quantile_lr: f64,
    pub quantile_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 500,
            batch_size: 8,
            schedule: LrSchedule::default(),
            head: HeadConfig::default(),
            grid_search: true,
            quantiles: DEFAULT_QUANTILES.to_vec(),
            quantile_lr: 0.05,
            quantile_steps: 2000,
        }
    }
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub const ENET_LAMBDAS: [f64; 4] = [0.01, 0.1, 1.0, 10.0];
pub const ENET_ALPHAS: [f64; 3] = [0.1, 0.5, 0.9];

fn fit_metadata_models(records: &[&PatientRecord], cfg: &TrainConfig) -> Result<(ElasticNetModel, Option<QuantileModel>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for r in records {
        for v in &r.visits {
            x.push(metadata_features(r, v.week));
            y.push(v.fvc_ml);
        }
    }
    let params = if cfg.grid_search && x.len() >= 10 {
        select_elastic_net(&x, &y, &ENET_LAMBDAS, &ENET_ALPHAS, 0.2)?
    } else {
        ElasticNetParams::default()
    };
    let enet = fit_elastic_net(&x, &y, &params)?.model;
    let quantile = if cfg.quantiles.is_empty() {
        None
    } else {
        Some(fit_quantile(&x, &y, &cfg.quantiles, cfg.quantile_lr, cfg.quantile_steps)?)
    };
    Ok((enet, quantile))
}

/// Mean of the per-visit slopes relative to baseline; the head bias starts here.
fn mean_visit_slope(records: &[&PatientRecord]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records {
        let b = r.base_visit();
        for v in &r.visits[1..] {
            total += (v.fvc_ml - b.fvc_ml) / f64::from(v.week - b.week);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

struct Sample<'a> {
    slice: &'a NormalizedSlice,
    clinical: [f64; CLINICAL_DIM],
    base_fvc: f64,
    weeks: f64,
    target: f64,
}

/// One forward/backward pass over a batch; returns the loss and the
/// gradients of every parameter.
fn batch_gradients(
    samples: &[Sample<'_>],
    cfg: &BackboneConfig,
    params: &ParamStore<f32>,
    head_cfg: &HeadConfig,
) -> Result<(f64, ParamStore<f32>)> {
    let n = samples.len();
    let (h, w) = cfg.input_size;
    let mut pixels = Vec::with_capacity(n * h * w);
    for s in samples {
        if (s.slice.height, s.slice.width) != (h, w) {
            return Err(PredictError::ShapeMismatch(format!(
                "slice {}x{} vs backbone input {h}x{w}",
                s.slice.height, s.slice.width
            )));
        }
        pixels.extend_from_slice(&s.slice.values);
    }
    let col = |f: &dyn Fn(&Sample) -> f64| Tensor::new(vec![n, 1], samples.iter().map(|s| f(s) as f32).collect());
    let mut g: Graph<f32> = Graph::new();
    let bound = Bound::new(&mut g, params);
    let x = g.leaf(Tensor::new(vec![n, 1, h, w], pixels)?);
    let clin = g.leaf(Tensor::new(
        vec![n, CLINICAL_DIM],
        samples.iter().flat_map(|s| s.clinical.map(|v| v as f32)).collect(),
    )?);
    let base = g.leaf(col(&|s| s.base_fvc)?);
    let weeks = g.leaf(col(&|s| s.weeks)?);
    let target = g.leaf(col(&|s| s.target)?);
    let feats = backbone_graph(&mut g, x, cfg, &bound)?;
    let joined = g.concat(&[feats, clin], 1)?;
    let joined = g.scale(joined, head_cfg.input_gain);
    let slope = g.dense(joined, bound.var(HEAD_W)?, bound.var(HEAD_B)?)?;
    let change = g.mul(slope, weeks)?;
    let pred = g.add(base, change)?;
    let loss = g.mae_loss(pred, target)?;
    let loss_value = g.value(loss).item() as f64;
    let grads = g.backward(loss)?;
    let mut out = ParamStore::new();
    for (name, v) in bound.iter() {
        out.insert(name.clone(), grads.get(*v));
    }
    Ok((loss_value, out))
}

/// Trains the CNN branch end to end on visit FVC and fits the metadata
/// regressors. The loop is sequential and fully determined by `cfg.seed`.
pub fn train(
    cohort: &[(PatientRecord, CtVolume)],
    preprocess: &PreprocessConfig,
    backbone_config: &BackboneConfig,
    ensemble: &EnsembleConfig,
    cfg: &TrainConfig,
) -> Result<(FvcModel, Vec<StepLog>)> {
    ensemble.validate()?;
    backbone_config.validate()?;
    if cfg.batch_size == 0 {
        return Err(PredictError::InvalidConfig("batch_size must be positive".into()));
    }
    if backbone_config.input_size != preprocess.target_size {
        return Err(PredictError::InvalidConfig(format!(
            "backbone input {:?} differs from preprocess target {:?}",
            backbone_config.input_size, preprocess.target_size
        )));
    }
    let eligible: Vec<usize> = (0..cohort.len()).filter(|&i| cohort[i].0.visits.len() >= 2).collect();
    if eligible.is_empty() {
        return Err(PredictError::InsufficientVisits);
    }
    let records: Vec<&PatientRecord> = cohort.iter().map(|(r, _)| r).collect();
    let stats = EncodingStats::from_records(records.iter().copied())?;
    let train_records: Vec<&PatientRecord> = eligible.iter().map(|&i| &cohort[i].0).collect();
    let (elastic_net, quantile) = fit_metadata_models(&records, cfg)?;

    let slices: Vec<Vec<NormalizedSlice>> = eligible
        .par_iter()
        .map(|&i| preprocess_volume(&cohort[i].1, preprocess))
        .collect::<std::result::Result<_, _>>()?;
    let clinical: Vec<[f64; CLINICAL_DIM]> = train_records
        .iter()
        .map(|r| encode_metadata(r, &stats).map(|c| c.to_vector()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = backbone_config.init_params(&mut rng);
    params.extend(init_head(backbone_config.feature_dim, mean_visit_slope(&train_records) as f32));
    let mut opt = Adam::new(cfg.schedule.clone());
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch_size)
            .map(|_| {
                let p = rng.random_range(0..train_records.len());
                let r = train_records[p];
                let v = r.visits[rng.random_range(1..r.visits.len())];
                let s = &slices[p][rng.random_range(0..slices[p].len())];
                let b = r.base_visit();
                Sample {
                    slice: s,
                    clinical: clinical[p],
                    base_fvc: b.fvc_ml,
                    weeks: f64::from(v.week - b.week),
                    target: v.fvc_ml,
                }
            })
            .collect();
        let (loss, grads) = batch_gradients(&batch, backbone_config, &params, &cfg.head)?;
        if !loss.is_finite() {
            return Err(PredictError::NonFinite(format!("training loss at step {step}")));
        }
        let lr = opt.step(&mut params, &grads);
        log::debug!("step {step} lr {lr:.3e} loss {loss:.3}");
        log.push(StepLog { step, lr, loss });
    }

    let mut backbone = ParamStore::new();
    let mut head = ParamStore::new();
    for (name, t) in params.iter() {
        if name.starts_with("head.") {
            head.insert(name.clone(), t.clone());
        } else {
            backbone.insert(name.clone(), t.clone());
        }
    }
    Ok((
        FvcModel {
            preprocess: preprocess.clone(),
            backbone_config: backbone_config.clone(),
            backbone,
            head_config: cfg.head.clone(),
            head,
            stats,
            elastic_net,
            quantile,
            ensemble: ensemble.clone(),
        },
        log,
    ))
}

pub const BUNDLE_FILES: [&str; 9] = [
    "backbone.fnet",
    "head.fnet",
    "backbone_config.json",
    "head_config.json",
    "encoding_stats.json",
    "elastic_net.json",
    "quantile.json",
    "ensemble.json",
    "preprocess.json",
];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PredictError {
    let path = path.display().to_string();
    move |source| PredictError::Io { path, source }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| PredictError::Json {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PredictError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn write_store(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_params(store, &mut buf)?;
    fs::write(path, buf).map_err(io_err(path))
}

fn read_store(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(read_params(&bytes[..])?)
}

/// Writes the model bundle into `dir` (created if needed) and returns the
/// written paths.
pub fn save_bundle(model: &FvcModel, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = |name: &str| dir.join(name);
    write_store(&p("backbone.fnet"), &model.backbone)?;
    write_store(&p("head.fnet"), &model.head)?;
    write_json(&p("backbone_config.json"), &model.backbone_config)?;
    write_json(&p("head_config.json"), &model.head_config)?;
    write_json(&p("encoding_stats.json"), &model.stats)?;
    write_json(&p("elastic_net.json"), &model.elastic_net)?;
    write_json(&p("quantile.json"), &model.quantile)?;
    write_json(&p("ensemble.json"), &model.ensemble)?;
    write_json(&p("preprocess.json"), &model.preprocess)?;
    Ok(BUNDLE_FILES.iter().map(|f| p(f)).collect())
}

pub fn load_bundle(dir: &Path) -> Result<FvcModel> {
    let p = |name: &str| dir.join(name);
    let model = FvcModel {
        preprocess: read_json(&p("preprocess.json"))?,
        backbone_config: read_json(&p("backbone_config.json"))?,
        backbone: read_store(&p("backbone.fnet"))?,
        head_config: read_json(&p("head_config.json"))?,
        head: read_store(&p("head.fnet"))?,
        stats: read_json(&p("encoding_stats.json"))?,
        elastic_net: read_json(&p("elastic_net.json"))?,
        quantile: read_json(&p("quantile.json"))?,
        ensemble: read_json(&p("ensemble.json"))?,
    };
    model.backbone_config.validate()?;
    model.ensemble.validate()?;
    model.stats.validate()?;
    model.preprocess.validate()?;
    Ok(model)
}

/// One row of a prediction CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub patient_id: String,
    pub week: i32,
    pub fvc_ml: f64,
    pub confidence: f64,
}

pub const PREDICTION_HEADER: &str = "Patient_Week,FVC,Confidence";

pub fn write_predictions_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from(PREDICTION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}_{},{:.1},{:.1}\n", r.patient_id, r.week, r.fvc_ml, r.confidence));
    }
    out
}

/// Splits `P1_20` into (`P1`, 20) at the last underscore.
pub fn split_patient_week(key: &str) -> Option<(String, i32)> {
    let (p, w) = key.rsplit_once('_')?;
    (!p.is_empty()).then_some(())?;
    Some((p.to_string(), w.trim().parse().ok()?))
}

pub fn parse_predictions_csv(text: &str) -> Result<Vec<PredictionRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == PREDICTION_HEADER => {}
        _ => {
            return Err(PredictError::BadCsv {
                line: 1,
                reason: format!("expected header {PREDICTION_HEADER:?}"),
            })
        }
    }
    lines
        .map(|(i, l)| {
            let bad = |reason: String| PredictError::BadCsv { line: i + 1, reason };
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 3 {
                return Err(bad(format!("expected 3 fields, got {}", f.len())));
            }
            let (patient_id, week) = split_patient_week(f[0]).ok_or_else(|| bad(format!("bad Patient_Week {:?}", f[0])))?;
            let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| bad(format!("bad number {s:?}")));
            Ok(PredictionRow {
                patient_id,
                week,
                fvc_ml: num(f[1])?,
                confidence: num(f[2])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Visit;
    use proptest::prelude::*;

    fn record() -> PatientRecord {
        PatientRecord {
            patient_id: "P1".into(),
            visits: vec![
                Visit { week: 0, fvc_ml: 3000.0, percent: 80.0 },
                Visit { week: 10, fvc_ml: 2900.0, percent: 77.0 },
            ],
            age: 67.0,
            sex: Sex::Male,
            smoking: SmokingStatus::ExSmoker,
        }
    }

    fn stats() -> EncodingStats {
        EncodingStats {
            age_mean: 67.0,
            age_std: 7.0,
            percent_mean: 70.0,
            percent_std: 10.0,
            base_fvc_mean: 2700.0,
            base_fvc_std: 600.0,
        }
    }

    #[test]
    fn encoding() {
        let c = encode_metadata(&record(), &stats()).unwrap();
        assert_eq!(c.age_z, 0.0);
        assert_eq!(c.sex_male, 1.0);
        assert_eq!(c.smoking_onehot, [0.0, 1.0, 0.0]);
        assert_eq!(c.percent_z, 1.0);
        assert_eq!(c.base_fvc_z, 0.5);
        assert_eq!(c, encode_metadata(&record(), &stats()).unwrap());
        let bad = EncodingStats { age_std: 0.0, ..stats() };
        assert!(matches!(encode_metadata(&record(), &bad), Err(PredictError::MissingStats(_))));
    }

    #[test]
    fn head_bias_only() {
        let mut head = init_head(4, -5.0);
        let c = encode_metadata(&record(), &stats()).unwrap();
        let s = slice_slope(&[1.0, 2.0, 3.0, 4.0], &c, &head, &HeadConfig::default()).unwrap();
        assert_eq!(s, -5.0);
        head.get_mut(HEAD_W).unwrap().data_mut()[1] = 2.0;
        let cfg = HeadConfig { input_gain: 1.0 };
        let a = slice_slope(&[1.0, 2.0, 3.0, 4.0], &c, &head, &cfg).unwrap();
        let b = slice_slope(&[1.0, 4.0, 3.0, 4.0], &c, &head, &cfg).unwrap();
        assert_eq!(b - a, 4.0);
        assert!(matches!(
            slice_slope(&[1.0], &c, &head, &cfg),
            Err(PredictError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn median_rules() {
        assert_eq!(aggregate_slopes(&[-5.0, -2.0, -9.0]).unwrap(), -5.0);
        assert_eq!(aggregate_slopes(&[-4.0, -2.0]).unwrap(), -3.0);
        assert_eq!(aggregate_slopes(&[-7.0]).unwrap(), -7.0);
        assert!(matches!(aggregate_slopes(&[]), Err(PredictError::EmptyInput)));
        assert_eq!(slope_iqr(&[-7.0]).unwrap(), 0.0);
        assert_eq!(slope_iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(), 2.0);
    }

    #[test]
    fn extrapolation_ensemble_sigma() {
        assert_eq!(extrapolate_fvc(3000.0, 0, -10.0, 20), 2800.0);
        assert_eq!(extrapolate_fvc(3000.0, 5, 0.0, 40), 3000.0);
        assert_eq!(extrapolate_fvc(3000.0, 5, -9.0, 5), 3000.0);
        let mut cfg = EnsembleConfig::default();
        assert_eq!(ensemble_fvc(2800.0, 2900.0, &cfg), 2850.0);
        cfg.cnn_weight = 1.0;
        assert_eq!(ensemble_fvc(2800.0, 2900.0, &cfg), 2800.0);
        cfg.cnn_weight = 0.0;
        assert_eq!(ensemble_fvc(2800.0, 2900.0, &cfg), 2900.0);
        assert_eq!(ensemble_fvc(-50.0, -10.0, &cfg), 1.0);
        let cfg = EnsembleConfig::default();
        assert_eq!(estimate_sigma(0.0, 5.0, &cfg), 200.0);
        let cfg = EnsembleConfig { sigma_dispersion_gain: 0.0, ..cfg };
        assert_eq!(estimate_sigma(10.0, 5.0, &cfg), 230.0);
        assert!(EnsembleConfig { cnn_weight: 1.5, ..cfg }.validate().is_err());
    }

    #[test]
    fn metadata_feature_layout() {
        let f = metadata_features(&record(), 24);
        assert_eq!(f, vec![3000.0, 80.0, 67.0, 1.0, 0.0, 1.0, 0.0, 24.0]);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![PredictionRow {
            patient_id: "ID_00_7".into(),
            week: -3,
            fvc_ml: 2800.0,
            confidence: 230.0,
        }];
        let text = write_predictions_csv(&rows);
        assert_eq!(text, "Patient_Week,FVC,Confidence\nID_00_7_-3,2800.0,230.0\n");
        assert_eq!(parse_predictions_csv(&text).unwrap(), rows);
        assert!(parse_predictions_csv("a,b\n").is_err());
        assert!(parse_predictions_csv("Patient_Week,FVC,Confidence\nP1,1,2\n").is_err());
    }

    #[test]
    fn training_needs_visits() {
        let mut r = record();
        r.visits.truncate(1);
        let vol = crate::ingest::assemble_volume(
            "P1",
            vec![crate::ingest::CtSlice {
                rows: 8,
                cols: 8,
                pixels: vec![0; 64],
                rescale_slope: 1.0,
                rescale_intercept: -1024.0,
                z_position: 0.0,
                source_id: String::new(),
            }],
        )
        .unwrap();
        let pre = PreprocessConfig { target_size: (8, 8), ..Default::default() };
        let err = train(&[(r, vol)], &pre, &BackboneConfig::desk((8, 8)), &EnsembleConfig::default(), &TrainConfig::default());
        assert!(matches!(err, Err(PredictError::InsufficientVisits)));
    }

    proptest! {
        #[test]
        fn median_permutation_and_duplication(mut v in proptest::collection::vec(-50.0f64..50.0, 1..15), seed in any::<u64>()) {
            if v.len() % 2 == 0 { v.pop(); }
            let m = aggregate_slopes(&v).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = v.clone();
            for i in (1..p.len()).rev() { p.swap(i, rand::Rng::random_range(&mut rng, 0..=i)); }
            prop_assert_eq!(aggregate_slopes(&p).unwrap(), m);
            let mut d = v.clone();
            d.push(m);
            d.push(m);
            prop_assert_eq!(aggregate_slopes(&d).unwrap(), m);
        }

        #[test]
        fn extrapolation_linear(b in 500.0f64..5000.0, w0 in -10i32..100, w1 in -10i32..200, s in -30.0f64..10.0) {
            let d = extrapolate_fvc(b, w0, s, w1) - extrapolate_fvc(b, w0, s, w0);
            prop_assert!((d - s * f64::from(w1 - w0)).abs() <= 1e-9 * (1.0 + b.abs()));
        }

        #[test]
        fn ensemble_convex(a in 1.0f64..5000.0, c in 1.0f64..5000.0, w in 0.0f64..=1.0) {
            let cfg = EnsembleConfig { cnn_weight: w, ..Default::default() };
            let e = ensemble_fvc(a, c, &cfg);
            prop_assert!(e >= a.min(c) - 1e-9 && e <= a.max(c) + 1e-9);
        }

        #[test]
        fn sigma_monotone(w1 in 0.0f64..100.0, dw in 0.0f64..100.0, iqr in 0.0f64..20.0) {
            let cfg = EnsembleConfig::default();
            prop_assert!(estimate_sigma(w1 + dw, iqr, &cfg) >= estimate_sigma(w1, iqr, &cfg));
            prop_assert!(estimate_sigma(w1, iqr, &cfg) >= 1.0);
        }
    }
}
