use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Cohort, DiseaseVocabulary, PatientRecord, Sex};
use crate::error::{Error, Result};

pub fn load_vocabulary(path: &Path) -> Result<DiseaseVocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let codes: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    DiseaseVocabulary::new(codes).map_err(|e| Error::File {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn write_vocabulary(vocabulary: &DiseaseVocabulary, path: &Path) -> Result<()> {
    let mut text = vocabulary.codes().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::File {
            path: path.into(),
            message: e.to_string(),
        })
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::File {
            path: path.into(),
            message: format!("missing column {name:?} in header"),
        })
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    path: &Path,
    line: u64,
) -> Result<T> {
    let raw = record.get(idx).unwrap_or("");
    raw.parse()
        .map_err(|_| Error::malformed(path, line, format!("cannot parse {name} from {raw:?}")))
}

/// Read the diagnoses and demographics files into a cohort. Rows are sorted
/// by patient id; repeated `(patient, code)` rows are summed.
pub fn load_cohort(
    diagnoses_path: &Path,
    demographics_path: &Path,
    vocabulary: &DiseaseVocabulary,
) -> Result<Cohort> {
    let demographics = load_demographics(demographics_path)?;

    let mut rdr = reader(diagnoses_path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::malformed(diagnoses_path, 1, e.to_string()))?
        .clone();
    let pid_col = column(&headers, "patient_id", diagnoses_path)?;
    let code_col = column(&headers, "code", diagnoses_path)?;
    let count_col = headers.iter().position(|h| h == "count");

    let mut totals: BTreeMap<String, HashMap<usize, u32>> = BTreeMap::new();
    let mut any = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::malformed(diagnoses_path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(Error::malformed(
                diagnoses_path,
                line,
                format!("expected {} fields, found {}", headers.len(), rec.len()),
            ));
        }
        let pid = rec.get(pid_col).unwrap_or("");
        if pid.is_empty() {
            return Err(Error::malformed(diagnoses_path, line, "empty patient_id"));
        }
        let code = rec.get(code_col).unwrap_or("");
        let n = vocabulary.index_of(code).ok_or_else(|| {
            Error::malformed(
                diagnoses_path,
                line,
                format!("unknown disease code {code:?}"),
            )
        })?;
        let count: u32 = match count_col.and_then(|c| rec.get(c)) {
            None | Some("") => 1,
            Some(_) => parse_field(&rec, count_col.unwrap(), "count", diagnoses_path, line)?,
        };
        if !demographics.contains_key(pid) {
            return Err(Error::malformed(
                diagnoses_path,
                line,
                format!("patient {pid} is missing from the demographics file"),
            ));
        }
        *totals
            .entry(pid.to_string())
            .or_default()
            .entry(n)
            .or_insert(0) += count;
        any = true;
    }
    if !any {
        return Err(Error::File {
            path: diagnoses_path.into(),
            message: "no diagnoses".into(),
        });
    }

    let mut patients = Vec::with_capacity(demographics.len());
    let mut counts = Array2::<u32>::zeros((demographics.len(), vocabulary.len()));
    for (m, (id, record)) in demographics.into_iter().enumerate() {
        let row = totals.get(&id);
        if row.is_none_or(|r| r.values().all(|&c| c == 0)) {
            return Err(Error::Data(format!("patient {id} has zero diagnoses")));
        }
        for (&n, &c) in row.unwrap() {
            counts[[m, n]] = c;
        }
        patients.push(record);
    }
    Cohort::new(vocabulary.clone(), patients, counts)
}

fn load_demographics(path: &Path) -> Result<BTreeMap<String, PatientRecord>> {
    let mut rdr = reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::malformed(path, 1, e.to_string()))?
        .clone();
    let cols = [
        "patient_id",
        "sex",
        "age_at_entry",
        "followup_years",
        "survival_time",
        "event",
    ]
    .map(|name| column(&headers, name, path));
    let [pid, sex, age, fu, st, ev] = match cols {
        [Ok(a), Ok(b), Ok(c), Ok(d), Ok(e), Ok(f)] => [a, b, c, d, e, f],
        other => return Err(other.into_iter().find_map(|c| c.err()).unwrap()),
    };

    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::malformed(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let id = rec.get(pid).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::malformed(path, line, "empty patient_id"));
        }
        let sex_raw = rec.get(sex).unwrap_or("");
        let sex = Sex::parse(sex_raw).ok_or_else(|| {
            Error::malformed(path, line, format!("sex must be M or F, got {sex_raw:?}"))
        })?;
        let event = match rec.get(ev).unwrap_or("") {
            "1" => true,
            "0" => false,
            other => {
                return Err(Error::malformed(
                    path,
                    line,
                    format!("event must be 0 or 1, got {other:?}"),
                ))
            }
        };
        let record = PatientRecord {
            id: id.clone(),
            sex,
            age_at_entry: parse_field(&rec, age, "age_at_entry", path, line)?,
            followup_years: parse_field(&rec, fu, "followup_years", path, line)?,
            survival_time: parse_field(&rec, st, "survival_time", path, line)?,
            event,
        };
        record
            .check()
            .map_err(|e| Error::malformed(path, line, e.to_string()))?;
        if out.insert(id.clone(), record).is_some() {
            return Err(Error::malformed(
                path,
                line,
                format!("duplicate patient id {id}"),
            ));
        }
    }
    Ok(out)
}

/// Write the cohort as the diagnoses and demographics files `load_cohort`
/// reads. Floats are written with shortest round-trip formatting.
pub fn write_cohort(
    cohort: &Cohort,
    diagnoses_path: &Path,
    demographics_path: &Path,
) -> Result<()> {
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| Error::File {
            path: path.clone(),
            message: e.to_string(),
        }
    };
    let mut w = csv::Writer::from_path(diagnoses_path).map_err(csv_err(diagnoses_path))?;
    w.write_record(["patient_id", "code", "count"])
        .map_err(csv_err(diagnoses_path))?;
    for (m, p) in cohort.patients().iter().enumerate() {
        for (n, c) in cohort.diagnosed(m) {
            w.write_record([p.id.as_str(), cohort.vocabulary().code(n), &c.to_string()])
                .map_err(csv_err(diagnoses_path))?;
        }
    }
    w.flush().map_err(|e| Error::io(diagnoses_path, e))?;

    let mut w = csv::Writer::from_path(demographics_path).map_err(csv_err(demographics_path))?;
    w.write_record([
        "patient_id",
        "sex",
        "age_at_entry",
        "followup_years",
        "survival_time",
        "event",
    ])
    .map_err(csv_err(demographics_path))?;
    for p in cohort.patients() {
        w.write_record([
            p.id.clone(),
            p.sex.as_str().to_string(),
            p.age_at_entry.to_string(),
            p.followup_years.to_string(),
            p.survival_time.to_string(),
            if p.event { "1" } else { "0" }.to_string(),
        ])
        .map_err(csv_err(demographics_path))?;
    }
    w.flush().map_err(|e| Error::io(demographics_path, e))
}
