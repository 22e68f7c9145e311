//! Patients, the disease vocabulary, and the patient-by-disease count matrix.

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod exposure;
pub mod generator;
mod io;

pub use exposure::{bin_exposure, follow_up_segments, ExposureBin, ExposureBins};
pub use io::{load_cohort, load_vocabulary, write_cohort, write_vocabulary};

/// Tolerance for `survival_time <= followup_years`.
pub const SURVIVAL_TOLERANCE: f64 = 1e-9;

/// Ordered set of disease category codes. Column `n` of every matrix in the
/// crate refers to `codes()[n]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiseaseVocabulary {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl DiseaseVocabulary {
    pub fn new<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let codes: Vec<String> = codes.into_iter().map(Into::into).collect();
        if codes.is_empty() {
            return Err(Error::Data("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Data(format!("empty disease code at position {i}")));
            }
            if index.insert(c.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate disease code {c:?}")));
            }
        }
        Ok(Self { codes, index })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn code(&self, n: usize) -> &str {
        &self.codes[n]
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Male, Sex::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }

    pub fn parse(s: &str) -> Option<Sex> {
        match s.trim() {
            "M" | "m" => Some(Sex::Male),
            "F" | "f" => Some(Sex::Female),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Sex::Male => 0,
            Sex::Female => 1,
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub sex: Sex,
    /// Years, fractional.
    pub age_at_entry: f64,
    pub followup_years: f64,
    pub survival_time: f64,
    /// Death observed (`true`) or censored.
    pub event: bool,
}

impl PatientRecord {
    pub fn check(&self) -> Result<()> {
        if !self.age_at_entry.is_finite() {
            return Err(Error::Data(format!("patient {}: non-finite age", self.id)));
        }
        if !(self.followup_years > 0.0) || !self.followup_years.is_finite() {
            return Err(Error::Data(format!(
                "patient {}: followup_years must be positive, got {}",
                self.id, self.followup_years
            )));
        }
        if !(self.survival_time >= 0.0)
            || self.survival_time > self.followup_years + SURVIVAL_TOLERANCE
        {
            return Err(Error::Data(format!(
                "patient {}: survival_time {} outside [0, followup_years={}]",
                self.id, self.survival_time, self.followup_years
            )));
        }
        Ok(())
    }
}

/// A cohort: `M` patients, a vocabulary of size `V`, and the `M x V`
/// diagnosis-count matrix. Every patient has at least one diagnosis.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    vocabulary: DiseaseVocabulary,
    patients: Vec<PatientRecord>,
    counts: Array2<u32>,
}

impl Cohort {
    pub fn new(
        vocabulary: DiseaseVocabulary,
        patients: Vec<PatientRecord>,
        counts: Array2<u32>,
    ) -> Result<Self> {
        if counts.nrows() != patients.len() || counts.ncols() != vocabulary.len() {
            return Err(Error::Dimension(format!(
                "count matrix is {}x{} but cohort has {} patients and {} codes",
                counts.nrows(),
                counts.ncols(),
                patients.len(),
                vocabulary.len()
            )));
        }
        let mut seen = HashMap::with_capacity(patients.len());
        for (m, p) in patients.iter().enumerate() {
            p.check()?;
            if seen.insert(p.id.as_str(), m).is_some() {
                return Err(Error::Data(format!("duplicate patient id {}", p.id)));
            }
            if counts.row(m).iter().all(|&c| c == 0) {
                return Err(Error::Data(format!("patient {} has zero diagnoses", p.id)));
            }
        }
        Ok(Self {
            vocabulary,
            patients,
            counts,
        })
    }

    pub fn vocabulary(&self) -> &DiseaseVocabulary {
        &self.vocabulary
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn counts(&self) -> &Array2<u32> {
        &self.counts
    }

    pub fn n_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn n_codes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn row(&self, m: usize) -> ArrayView1<'_, u32> {
        self.counts.row(m)
    }

    /// Total diagnoses for patient `m`.
    pub fn total(&self, m: usize) -> u64 {
        self.counts.row(m).iter().map(|&c| c as u64).sum()
    }

    /// `(code index, count)` for every code patient `m` was diagnosed with.
    pub fn diagnosed(&self, m: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.counts
            .row(m)
            .into_iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(n, &c)| (n, c))
    }

    pub fn ages(&self) -> Vec<f64> {
        self.patients.iter().map(|p| p.age_at_entry).collect()
    }

    pub fn total_followup(&self) -> f64 {
        self.patients.iter().map(|p| p.followup_years).sum()
    }

    /// Cohort restricted to the given patient rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Result<Cohort> {
        let patients = rows.iter().map(|&m| self.patients[m].clone()).collect();
        let counts = self.counts.select(ndarray::Axis(0), rows);
        Cohort::new(self.vocabulary.clone(), patients, counts)
    }
}

/// Inclusion rule: total diagnoses within `[min_total, max_total]` and at
/// least `min_index` diagnoses of `index_code`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InclusionCriteria {
    pub min_total: u64,
    pub max_total: u64,
    pub index_code: String,
    pub min_index: u32,
}

impl InclusionCriteria {
    /// 300 to 500 total diagnoses, at least 30 of the index code.
    pub fn standard(index_code: impl Into<String>) -> Self {
        Self {
            min_total: 300,
            max_total: 500,
            index_code: index_code.into(),
            min_index: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExclusionReason {
    TotalBelowMinimum,
    TotalAboveMaximum,
    IndexCountBelowMinimum,
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExclusionReason::TotalBelowMinimum => "total below minimum",
            ExclusionReason::TotalAboveMaximum => "total above maximum",
            ExclusionReason::IndexCountBelowMinimum => "index count below minimum",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientValidation {
    pub patient_id: String,
    pub total: u64,
    pub index_count: u32,
    pub reasons: Vec<ExclusionReason>,
}

impl PatientValidation {
    pub fn passed(&self) -> bool {
        self.reasons.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub patients: Vec<PatientValidation>,
}

impl ValidationReport {
    pub fn n_passed(&self) -> usize {
        self.patients.iter().filter(|p| p.passed()).count()
    }

    pub fn failures(&self) -> impl Iterator<Item = &PatientValidation> {
        self.patients.iter().filter(|p| !p.passed())
    }

    pub fn passing_rows(&self) -> Vec<usize> {
        self.patients
            .iter()
            .enumerate()
            .filter(|(_, p)| p.passed())
            .map(|(m, _)| m)
            .collect()
    }
}

pub fn validate_cohort(cohort: &Cohort, criteria: &InclusionCriteria) -> Result<ValidationReport> {
    let index = cohort
        .vocabulary()
        .index_of(&criteria.index_code)
        .ok_or_else(|| {
            Error::Parameter(format!(
                "index code {:?} is not in the vocabulary",
                criteria.index_code
            ))
        })?;
    let patients = cohort
        .patients()
        .iter()
        .enumerate()
        .map(|(m, p)| {
            let total = cohort.total(m);
            let index_count = cohort.counts()[[m, index]];
            let mut reasons = Vec::new();
            if total < criteria.min_total {
                reasons.push(ExclusionReason::TotalBelowMinimum);
            }
            if total > criteria.max_total {
                reasons.push(ExclusionReason::TotalAboveMaximum);
            }
            if index_count < criteria.min_index {
                reasons.push(ExclusionReason::IndexCountBelowMinimum);
            }
            PatientValidation {
                patient_id: p.id.clone(),
                total,
                index_count,
                reasons,
            }
        })
        .collect();
    Ok(ValidationReport { patients })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn patient(id: &str, sex: Sex, age: f64, followup: f64) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            sex,
            age_at_entry: age,
            followup_years: followup,
            survival_time: followup,
            event: false,
        }
    }

    fn one_patient(row: Vec<u32>, codes: &[&str]) -> Cohort {
        let vocab = DiseaseVocabulary::new(codes.iter().copied()).unwrap();
        let counts = Array2::from_shape_vec((1, row.len()), row).unwrap();
        Cohort::new(vocab, vec![patient("p1", Sex::Female, 74.4, 5.0)], counts).unwrap()
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_empty() {
        assert!(DiseaseVocabulary::new(["1", "2", "1"]).is_err());
        assert!(DiseaseVocabulary::new(Vec::<String>::new()).is_err());
    }

    #[test]
    fn cohort_rejects_empty_rows() {
        let vocab = DiseaseVocabulary::new(["a", "b"]).unwrap();
        let counts = Array2::from_shape_vec((1, 2), vec![0, 0]).unwrap();
        let err = Cohort::new(vocab, vec![patient("p1", Sex::Male, 60.0, 1.0)], counts);
        assert!(err.is_err());
    }

    #[test]
    fn validation_passes_typical_osteoporosis_patient() {
        let cohort = one_patient(vec![35, 371], &["206", "1"]);
        let report = validate_cohort(&cohort, &InclusionCriteria::standard("206")).unwrap();
        assert_eq!(report.patients[0].total, 406);
        assert!(report.patients[0].passed());
    }

    #[test]
    fn validation_boundaries() {
        let cohort = one_patient(vec![35, 264], &["206", "1"]);
        let report = validate_cohort(&cohort, &InclusionCriteria::standard("206")).unwrap();
        assert_eq!(
            report.patients[0].reasons,
            vec![ExclusionReason::TotalBelowMinimum]
        );
        assert_eq!(
            report.patients[0].reasons[0].to_string(),
            "total below minimum"
        );

        let cohort = one_patient(vec![29, 371], &["206", "1"]);
        let report = validate_cohort(&cohort, &InclusionCriteria::standard("206")).unwrap();
        assert_eq!(
            report.patients[0].reasons,
            vec![ExclusionReason::IndexCountBelowMinimum]
        );

        let cohort = one_patient(vec![30, 270], &["206", "1"]);
        let report = validate_cohort(&cohort, &InclusionCriteria::standard("206")).unwrap();
        assert!(report.patients[0].passed());
    }

    #[test]
    fn validation_rejects_unknown_index_code() {
        let cohort = one_patient(vec![1, 1], &["206", "1"]);
        assert!(validate_cohort(&cohort, &InclusionCriteria::standard("653")).is_err());
    }

    #[test]
    fn validation_does_not_touch_the_cohort() {
        let cohort = one_patient(vec![3, 1], &["206", "1"]);
        let before = cohort.clone();
        let _ = validate_cohort(&cohort, &InclusionCriteria::standard("206")).unwrap();
        assert_eq!(cohort, before);
    }
}
