//! Clinical metadata table: one row per spirometry visit.

use std::collections::BTreeMap;

use super::{IngestError, PatientRecord, Result, Sex, SmokingStatus, Visit};

pub const METADATA_HEADER: &str = "Patient,Weeks,FVC,Percent,Age,Sex,SmokingStatus";

const COLUMNS: [&str; 7] = ["Patient", "Weeks", "FVC", "Percent", "Age", "Sex", "SmokingStatus"];

fn number<T: std::str::FromStr>(line: usize, field: &'static str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| IngestError::NonNumericField {
        line,
        field,
        value: value.to_string(),
    })
}

/// Parses the visit table and groups rows into one record per patient.
///
/// Records come back sorted by patient id with visits sorted by week, so the
/// result does not depend on row order. Demographics are taken from the first
/// row seen for a patient.
pub fn parse_metadata_csv(text: &str) -> Result<Vec<PatientRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| IngestError::BadHeader(e.to_string()))?
        .clone();
    if header.len() != COLUMNS.len() || header.iter().zip(COLUMNS).any(|(h, c)| h != c) {
        return Err(IngestError::BadHeader(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut patients: BTreeMap<String, PatientRecord> = BTreeMap::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| IngestError::BadRow {
            line,
            reason: e.to_string(),
        })?;
        if row.len() != COLUMNS.len() {
            return Err(IngestError::BadRow {
                line,
                reason: format!("expected {} fields, found {}", COLUMNS.len(), row.len()),
            });
        }
        let id = row[0].trim().to_string();
        if id.is_empty() {
            return Err(IngestError::BadRow {
                line,
                reason: "empty patient id".into(),
            });
        }
        let week: i32 = number(line, "Weeks", &row[1])?;
        let fvc_ml: f64 = number(line, "FVC", &row[2])?;
        let percent: f64 = number(line, "Percent", &row[3])?;
        let age: f64 = number(line, "Age", &row[4])?;
        let sex = Sex::parse(row[5].trim()).ok_or_else(|| IngestError::BadEnum {
            line,
            field: "Sex",
            value: row[5].to_string(),
        })?;
        let smoking = SmokingStatus::parse(row[6].trim()).ok_or_else(|| IngestError::BadEnum {
            line,
            field: "SmokingStatus",
            value: row[6].to_string(),
        })?;
        if !(fvc_ml.is_finite() && fvc_ml > 0.0) || !(percent.is_finite() && percent > 0.0) {
            return Err(IngestError::BadRow {
                line,
                reason: "FVC and Percent must be positive".into(),
            });
        }
        if !age.is_finite() || age < 0.0 {
            return Err(IngestError::BadRow {
                line,
                reason: format!("age {age} is invalid"),
            });
        }

        let visit = Visit { week, fvc_ml, percent };
        let record = patients.entry(id.clone()).or_insert_with(|| PatientRecord {
            patient_id: id.clone(),
            visits: Vec::new(),
            age,
            sex,
            smoking,
        });
        if record.age != age || record.sex != sex || record.smoking != smoking {
            log::warn!("line {line}: demographics for {id} differ from the first row; keeping the first");
        }
        record.visits.push(visit);
    }

    let mut out = Vec::with_capacity(patients.len());
    for (_, mut record) in patients {
        record.visits.sort_by_key(|v| v.week);
        if let Some(w) = record.visits.windows(2).find(|w| w[0].week == w[1].week) {
            return Err(IngestError::DuplicateWeek {
                patient: record.patient_id,
                week: w[0].week,
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Renders records in the table layout [`parse_metadata_csv`] reads.
pub fn write_metadata_csv(records: &[PatientRecord]) -> String {
    let mut out = String::from(METADATA_HEADER);
    out.push('\n');
    for r in records {
        for v in &r.visits {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.patient_id,
                v.week,
                v.fvc_ml,
                v.percent,
                r.age,
                r.sex.as_str(),
                r.smoking.as_str()
            ));
        }
    }
    out
}
