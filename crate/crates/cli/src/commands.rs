use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fnet_core::backbone::BackboneConfig;
use fnet_core::explain::{encode_pgm, occlusion_attribution, render_overlay, OcclusionConfig};
use fnet_core::ingest::{parse_metadata_csv, read_dataset, CtVolume, PatientRecord, METADATA_FILE, METADATA_HEADER};
use fnet_core::predictor::{
    load_bundle, parse_predictions_csv, save_bundle, split_patient_week, train, write_predictions_csv,
    EnsembleConfig, PredictionRow, TrainConfig,
};
use fnet_core::preprocess::{preprocess_volume, PreprocessConfig};
use fnet_core::scoring::{ScoreReport, ScoredPrediction};
use fnet_core::synth::{export_cohort, sample_cohort, SynthConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::manifest::{sha256_file, Manifest};
use crate::{CliError, Command, ExplainArgs, IngestArgs, PredictArgs, PreprocessArgs, ScoreArgs, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Score(a) => score(a),
        Command::Explain(a) => explain(a),
    }
}

fn require_dir(component: &'static str, path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::validation(component, format!("{} is not a directory", path.display())))
    }
}

fn require_file(component: &'static str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(component, format!("{} is not a file", path.display())))
    }
}

fn make_out_dir(component: &'static str, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::runtime(component, format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(component: &'static str, path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::validation(component, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::validation(component, format!("{}: {e}", path.display())))
}

fn optional_json<T: DeserializeOwned + Default>(component: &'static str, path: Option<&PathBuf>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), |p| read_json(component, p))
}

fn write_json<T: Serialize>(component: &'static str, path: &Path, value: &T) -> Result<PathBuf> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(component, e.to_string()))?;
    write_file(component, path, (text + "\n").as_bytes())
}

fn write_file(component: &'static str, path: &Path, bytes: &[u8]) -> Result<PathBuf> {
    fs::write(path, bytes).map_err(|e| CliError::runtime(component, format!("{}: {e}", path.display())))?;
    Ok(path.to_path_buf())
}

fn load_dataset(data: &Path) -> Result<Vec<(PatientRecord, Option<CtVolume>)>> {
    require_dir("ingest", data)?;
    read_dataset(data).map_err(|e| CliError::validation("ingest", e.to_string()))
}

fn with_volumes(dataset: Vec<(PatientRecord, Option<CtVolume>)>) -> Result<Vec<(PatientRecord, CtVolume)>> {
    dataset
        .into_iter()
        .map(|(r, v)| match v {
            Some(v) => Ok((r, v)),
            None => Err(CliError::validation("ingest", format!("patient {} has no CT volume", r.patient_id))),
        })
        .collect()
}

fn ingest(a: IngestArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    make_out_dir("ingest", &a.out)?;
    let summary: Vec<_> = dataset
        .iter()
        .map(|(r, v)| {
            json!({
                "patient_id": r.patient_id,
                "visits": r.visits.len(),
                "base_week": r.base_visit().week,
                "base_fvc_ml": r.base_visit().fvc_ml,
                "slices": v.as_ref().map_or(0, CtVolume::len),
                "rows": v.as_ref().map(CtVolume::rows),
                "cols": v.as_ref().map(CtVolume::cols),
            })
        })
        .collect();
    let out = write_json("ingest", &a.out.join("ingest_summary.json"), &summary)?;
    println!("{} patients, {} with CT volumes", dataset.len(), dataset.iter().filter(|(_, v)| v.is_some()).count());
    let config = json!({ "data": a.data, "inputs": input_hashes(&a.data)? });
    Manifest::new("ingest", None, config).write(&a.out, &[out])?;
    Ok(())
}

fn input_hashes(data: &Path) -> Result<BTreeMap<String, String>> {
    let csv = data.join(METADATA_FILE);
    Ok(BTreeMap::from([(METADATA_FILE.to_string(), sha256_file(&csv)?)]))
}

fn preprocess_config(path: Option<&PathBuf>, image_size: Option<usize>) -> Result<PreprocessConfig> {
    let mut cfg: PreprocessConfig = optional_json("preprocess", path)?;
    if let Some(s) = image_size {
        cfg.target_size = (s, s);
    }
    cfg.validate().map_err(|e| CliError::validation("preprocess", e.to_string()))?;
    Ok(cfg)
}

fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = preprocess_config(a.preprocess_config.as_ref(), a.image_size)?;
    let dataset = load_dataset(&a.data)?;
    make_out_dir("preprocess", &a.out)?;
    let mut written = Vec::new();
    let mut summary = Vec::new();
    for (r, v) in &dataset {
        let Some(v) = v else { continue };
        let slices = preprocess_volume(v, &cfg).map_err(|e| CliError::validation("preprocess", format!("{}: {e}", r.patient_id)))?;
        let pdir = a.out.join(&r.patient_id);
        make_out_dir("preprocess", &pdir)?;
        for (k, s) in slices.iter().enumerate() {
            let px: Vec<u8> = s.values.iter().map(|&x| (f64::from(x).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            written.push(write_file("preprocess", &pdir.join(format!("{k:04}.pgm")), &encode_pgm(s.width, s.height, &px))?);
        }
        summary.push(json!({ "patient_id": r.patient_id, "input_slices": v.len(), "selected_slices": slices.len() }));
    }
    written.push(write_json("preprocess", &a.out.join("preprocess_summary.json"), &summary)?);
    println!("preprocessed {} volumes", summary.len());
    let config = json!({ "data": a.data, "preprocess": cfg, "inputs": input_hashes(&a.data)? });
    Manifest::new("preprocess", None, config).write(&a.out, &written)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = optional_json("synth", a.config.as_ref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_patients {
        cfg.n_patients = n;
    }
    let (mut s, mut r, mut c) = cfg.volume_dims;
    s = a.slices.unwrap_or(s);
    r = a.rows.unwrap_or(r);
    c = a.cols.unwrap_or(c);
    cfg.volume_dims = (s, r, c);
    if let Some(n) = a.fvc_noise {
        cfg.fvc_noise_std = n;
    }
    cfg.validate().map_err(|e| CliError::validation("synth", e.to_string()))?;
    let cohort = sample_cohort(&cfg).map_err(|e| CliError::runtime("synth", e.to_string()))?;
    let mut written = export_cohort(&cohort, &a.out).map_err(|e| CliError::runtime("synth", e.to_string()))?;
    let slopes: BTreeMap<&str, f64> = cohort.iter().map(|p| (p.record.patient_id.as_str(), p.slope)).collect();
    written.push(write_json("synth", &a.out.join("true_slopes.json"), &slopes)?);
    println!("wrote {} patients to {}", cohort.len(), a.out.display());
    Manifest::new("synth", Some(cfg.seed), json!({ "synth": cfg })).write(&a.out, &written)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let pre = preprocess_config(a.preprocess_config.as_ref(), a.image_size)?;
    let backbone = match &a.backbone_config {
        Some(p) => read_json::<BackboneConfig>("backbone", p)?,
        None => BackboneConfig::desk(pre.target_size),
    };
    backbone.validate().map_err(|e| CliError::validation("backbone", e.to_string()))?;
    let mut ensemble: EnsembleConfig = optional_json("predictor", a.ensemble_config.as_ref())?;
    if let Some(w) = a.cnn_weight {
        ensemble.cnn_weight = w;
    }
    ensemble.validate().map_err(|e| CliError::validation("predictor", e.to_string()))?;
    let mut tc: TrainConfig = optional_json("train", a.train_config.as_ref())?;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    let cohort = with_volumes(load_dataset(&a.data)?)?;
    let (model, log) = train(&cohort, &pre, &backbone, &ensemble, &tc).map_err(|e| {
        use fnet_core::predictor::PredictError as P;
        match e {
            P::InsufficientVisits | P::InvalidConfig(_) | P::ShapeMismatch(_) | P::MissingStats(_) | P::Preprocess(_) => {
                CliError::validation("train", e.to_string())
            }
            other => CliError::runtime("train", other.to_string()),
        }
    })?;
    let mut written = save_bundle(&model, &a.out).map_err(|e| CliError::runtime("train", e.to_string()))?;
    written.push(write_json("train", &a.out.join("train_log.json"), &log)?);
    if let Some(last) = log.last() {
        println!("trained {} steps, final batch loss {:.2} ml", log.len(), last.loss);
    }
    let config = json!({
        "data": a.data,
        "inputs": input_hashes(&a.data)?,
        "preprocess": pre,
        "backbone": backbone,
        "ensemble": ensemble,
        "train": tc,
    });
    Manifest::new("train", Some(tc.seed), config).write(&a.out, &written)?;
    Ok(())
}

fn bundle_hashes(dir: &Path) -> Result<BTreeMap<String, String>> {
    fnet_core::predictor::BUNDLE_FILES
        .iter()
        .map(|f| Ok((f.to_string(), sha256_file(&dir.join(f))?)))
        .collect()
}

fn load_model(dir: &Path) -> Result<fnet_core::FvcModel> {
    require_dir("predictor", dir)?;
    load_bundle(dir).map_err(|e| CliError::validation("predictor", e.to_string()))
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut model = load_model(&a.model)?;
    if let Some(p) = &a.ensemble_config {
        model.ensemble = read_json("predictor", p)?;
        model.ensemble.validate().map_err(|e| CliError::validation("predictor", e.to_string()))?;
    }
    let cohort = with_volumes(load_dataset(&a.data)?)?;
    make_out_dir("predictor", &a.out)?;
    let mut rows = Vec::new();
    for (record, volume) in &cohort {
        let slopes = model
            .patient_slopes(volume, record)
            .map_err(|e| CliError::runtime("predictor", format!("{}: {e}", record.patient_id)))?;
        let weeks: Vec<i32> = match &a.weeks {
            Some(w) => w.clone(),
            None => record.visits[1..].iter().map(|v| v.week).collect(),
        };
        for week in weeks {
            let p = model
                .predict_at(&slopes, record, week)
                .map_err(|e| CliError::runtime("predictor", e.to_string()))?;
            rows.push(PredictionRow {
                patient_id: record.patient_id.clone(),
                week,
                fvc_ml: p.fvc_ml,
                confidence: p.sigma_ml,
            });
        }
    }
    let csv = write_file("predictor", &a.out.join("predictions.csv"), write_predictions_csv(&rows).as_bytes())?;
    println!("wrote {} predictions", rows.len());
    let config = json!({
        "data": a.data,
        "inputs": input_hashes(&a.data)?,
        "model": bundle_hashes(&a.model)?,
        "ensemble": model.ensemble,
        "weeks": a.weeks,
    });
    Manifest::new("predict", None, config).write(&a.out, &[csv])?;
    Ok(())
}

/// Ground-truth rows keyed by (patient, week).
fn parse_truth(text: &str, last_n: Option<usize>) -> Result<BTreeMap<(String, i32), f64>> {
    let header = text.lines().next().unwrap_or("").trim();
    let mut by_patient: BTreeMap<String, Vec<(i32, f64)>> = BTreeMap::new();
    if header == METADATA_HEADER {
        let records = parse_metadata_csv(text).map_err(|e| CliError::validation("score", e.to_string()))?;
        for r in records {
            let v = r.visits[1..].iter().map(|v| (v.week, v.fvc_ml)).collect();
            by_patient.insert(r.patient_id, v);
        }
    } else if header == "Patient_Week,FVC" {
        for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |m: String| CliError::validation("score", format!("truth line {}: {m}", i + 1));
            let (key, fvc) = line.split_once(',').ok_or_else(|| bad("expected 2 fields".into()))?;
            let (p, w) = split_patient_week(key.trim()).ok_or_else(|| bad(format!("bad Patient_Week {key:?}")))?;
            let fvc: f64 = fvc.trim().parse().map_err(|_| bad(format!("bad FVC {fvc:?}")))?;
            by_patient.entry(p).or_default().push((w, fvc));
        }
    } else {
        return Err(CliError::validation(
            "score",
            format!("truth header must be \"Patient_Week,FVC\" or {METADATA_HEADER:?}"),
        ));
    }
    let mut out = BTreeMap::new();
    for (p, mut rows) in by_patient {
        rows.sort_by_key(|r| r.0);
        let skip = last_n.map_or(0, |n| rows.len().saturating_sub(n));
        for (w, f) in rows.into_iter().skip(skip) {
            if out.insert((p.clone(), w), f).is_some() {
                return Err(CliError::validation("score", format!("duplicate truth for {p}_{w}")));
            }
        }
    }
    Ok(out)
}

fn score(a: ScoreArgs) -> Result<()> {
    require_file("score", &a.pred)?;
    require_file("score", &a.truth)?;
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| CliError::validation("score", format!("{}: {e}", p.display())));
    let preds = parse_predictions_csv(&read(&a.pred)?).map_err(|e| CliError::validation("score", e.to_string()))?;
    let truth = parse_truth(&read(&a.truth)?, a.last_n)?;
    let lookup: BTreeMap<(String, i32), &PredictionRow> =
        preds.iter().map(|r| ((r.patient_id.clone(), r.week), r)).collect();
    let mut scored = Vec::with_capacity(truth.len());
    for ((p, w), fvc) in &truth {
        let row = lookup
            .get(&(p.clone(), *w))
            .ok_or_else(|| CliError::validation("score", format!("no prediction for {p}_{w}")))?;
        scored.push(ScoredPrediction::new(*fvc, row.fvc_ml, row.confidence));
    }
    let report = ScoreReport::new(&a.method, &scored).map_err(|e| CliError::validation("score", e.to_string()))?;
    make_out_dir("score", &a.out)?;
    let out = write_json("score", &a.out.join("score_report.json"), &report)?;
    print!("{}", report.render_table());
    println!("Laplace Log Likelihood ({} predictions): {:.5}", report.n_predictions, report.score());
    let config = json!({
        "pred": sha256_file(&a.pred)?,
        "truth": sha256_file(&a.truth)?,
        "last_n": a.last_n,
        "method": a.method,
    });
    Manifest::new("score", None, config).write(&a.out, &[out])?;
    Ok(())
}

fn explain(a: ExplainArgs) -> Result<()> {
    let format = a.format.to_ascii_lowercase();
    if format != "pgm" && format != "png" {
        return Err(CliError::validation("explain", format!("unknown format {:?}", a.format)));
    }
    let cfg = OcclusionConfig {
        patch: a.patch,
        stride: a.stride,
        baseline_value: a.baseline,
    };
    cfg.validate().map_err(|e| CliError::validation("explain", e.to_string()))?;
    let model = load_model(&a.model)?;
    let dataset = load_dataset(&a.data)?;
    let (record, volume) = dataset
        .into_iter()
        .find(|(r, _)| r.patient_id == a.patient)
        .ok_or_else(|| CliError::validation("explain", format!("unknown patient {}", a.patient)))?;
    let volume = volume.ok_or_else(|| CliError::validation("explain", format!("patient {} has no CT volume", a.patient)))?;
    let slices = preprocess_volume(&volume, &model.preprocess).map_err(|e| CliError::validation("explain", e.to_string()))?;
    let k = a.slice.unwrap_or(slices.len() / 2);
    let slice = slices
        .get(k)
        .ok_or_else(|| CliError::validation("explain", format!("slice {k} out of range (0..{})", slices.len())))?;
    let clinical = model.clinical(&record).map_err(|e| CliError::runtime("explain", e.to_string()))?;
    let map = occlusion_attribution(&model, slice, &clinical, &cfg).map_err(|e| CliError::runtime("explain", e.to_string()))?;
    make_out_dir("explain", &a.out)?;
    let image = a.out.join(format!("{}_slice{k:04}.{format}", a.patient));
    render_overlay(slice, &map, &image).map_err(|e| CliError::runtime("explain", e.to_string()))?;
    let (argmax, max) = map
        .values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b });
    let summary = json!({
        "patient_id": a.patient,
        "slice": k,
        "height": map.height,
        "width": map.width,
        "total_attribution": map.total(),
        "max_attribution": max,
        "argmax": [argmax / map.width, argmax % map.width],
    });
    let js = write_json("explain", &a.out.join("attribution.json"), &summary)?;
    println!("wrote {}", image.display());
    let config = json!({
        "data": a.data,
        "model": bundle_hashes(&a.model)?,
        "occlusion": cfg,
        "patient": a.patient,
        "slice": k,
    });
    Manifest::new("explain", None, config).write(&a.out, &[image, js])?;
    Ok(())
}
