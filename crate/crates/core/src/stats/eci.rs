use std::fmt;
use std::path::Path;

use ndarray::ArrayView1;

use crate::cohort::{Cohort, DiseaseVocabulary};
use crate::error::{Error, Result};
use crate::topic::write_rows;

pub const ECI_CATEGORIES: [&str; 29] = [
    "congestive_heart_failure",
    "cardiac_arrhythmias",
    "valvular_disease",
    "pulmonary_circulation_disorders",
    "peripheral_vascular_disease",
    "hypertension",
    "paralysis",
    "other_neurological_disorders",
    "chronic_pulmonary_disease",
    "diabetes_uncomplicated",
    "diabetes_complicated",
    "hypothyroidism",
    "renal_failure",
    "liver_disease",
    "peptic_ulcer_disease",
    "lymphoma",
    "metastatic_cancer",
    "solid_tumour",
    "rheumatoid_arthritis",
    "coagulopathy",
    "obesity",
    "weight_loss",
    "fluid_electrolyte_disorders",
    "blood_loss_anaemia",
    "deficiency_anaemia",
    "alcohol_abuse",
    "drug_abuse",
    "psychoses",
    "depression",
];

/// Approximate single-level CCS codes for each category, in category
/// order. Used for the standard 285-code vocabulary.
const CCS_CODES: [&[u32]; 29] = [
    &[108],
    &[106],
    &[96],
    &[103],
    &[114, 115],
    &[98, 99],
    &[82],
    &[79, 80, 81, 83],
    &[127, 128, 132],
    &[49],
    &[50],
    &[48],
    &[158],
    &[151],
    &[139],
    &[37, 38],
    &[42],
    &[
        11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25, 26, 27, 28, 29, 30, 31, 32, 33,
        34, 35, 36,
    ],
    &[202, 210],
    &[62],
    &[58],
    &[52],
    &[55],
    &[60],
    &[59],
    &[660],
    &[661],
    &[659],
    &[657],
];

pub(crate) fn category_index(name: &str) -> Option<usize> {
    let norm = name.trim().to_ascii_lowercase().replace([' ', '-'], "_");
    ECI_CATEGORIES.iter().position(|c| *c == norm)
}

/// Code-to-category table over a vocabulary; a code may feed several
/// categories.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EciMapping {
    /// `(code index, category index)`, sorted and unique.
    pairs: Vec<(usize, usize)>,
}

impl EciMapping {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_pairs<'a>(
        vocabulary: &DiseaseVocabulary,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut out = Vec::new();
        for (code, category) in pairs {
            let n = vocabulary.index_of(code).ok_or_else(|| {
                Error::Data(format!("ECI mapping code {code} is not in the vocabulary"))
            })?;
            let c = category_index(category)
                .ok_or_else(|| Error::Data(format!("unknown ECI category {category}")))?;
            out.push((n, c));
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self { pairs: out })
    }

    /// The built-in CCS-based table restricted to codes in `vocabulary`.
    pub fn standard(vocabulary: &DiseaseVocabulary) -> Self {
        let mut pairs = Vec::new();
        for (c, codes) in CCS_CODES.iter().enumerate() {
            for code in codes.iter() {
                if let Some(n) = vocabulary.index_of(&code.to_string()) {
                    pairs.push((n, c));
                }
            }
        }
        pairs.sort_unstable();
        Self { pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn codes_for(&self, category: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs
            .iter()
            .filter(move |p| p.1 == category)
            .map(|p| p.0)
    }

    /// Read `code,category`. Codes outside the vocabulary are skipped with a
    /// warning; unknown categories are an error.
    pub fn load(path: &Path, vocabulary: &DiseaseVocabulary) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::File {
                path: path.into(),
                message: e.to_string(),
            })?;
        let mut pairs = Vec::new();
        let mut skipped = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                Error::malformed(path, e.position().map_or(0, |p| p.line()), e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 2 {
                return Err(Error::malformed(path, line, "expected code,category"));
            }
            let c = category_index(&rec[1]).ok_or_else(|| {
                Error::malformed(path, line, format!("unknown ECI category {}", &rec[1]))
            })?;
            match vocabulary.index_of(&rec[0]) {
                Some(n) => pairs.push((n, c)),
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            log::warn!(
                "{}: {skipped} mapped codes are not in the vocabulary",
                path.display()
            );
        }
        pairs.sort_unstable();
        pairs.dedup();
        Ok(Self { pairs })
    }

    pub fn write(&self, path: &Path, vocabulary: &DiseaseVocabulary) -> Result<()> {
        write_rows(path, ["code", "category"], |w| {
            for &(n, c) in &self.pairs {
                w.write_record([vocabulary.code(n), ECI_CATEGORIES[c]])?;
            }
            Ok(())
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EciBand {
    ZeroToOne,
    TwoToFour,
    FivePlus,
}

impl EciBand {
    pub const ALL: [EciBand; 3] = [EciBand::ZeroToOne, EciBand::TwoToFour, EciBand::FivePlus];

    pub fn of(score: usize) -> Self {
        match score {
            0 | 1 => EciBand::ZeroToOne,
            2..=4 => EciBand::TwoToFour,
            _ => EciBand::FivePlus,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EciBand::ZeroToOne => "0-1",
            EciBand::TwoToFour => "2-4",
            EciBand::FivePlus => "5+",
        }
    }
}

impl fmt::Display for EciBand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EciProfile {
    pub flags: [bool; 29],
    pub score: usize,
    pub band: EciBand,
}

/// Flags every category with at least one mapped code counted in `row`.
pub fn eci_profile(row: ArrayView1<'_, u32>, mapping: &EciMapping) -> EciProfile {
    let mut flags = [false; 29];
    for &(n, c) in mapping.pairs() {
        if row.get(n).is_some_and(|&y| y > 0) {
            flags[c] = true;
        }
    }
    let score = flags.iter().filter(|f| **f).count();
    EciProfile {
        flags,
        score,
        band: EciBand::of(score),
    }
}

pub fn eci_profiles(cohort: &Cohort, mapping: &EciMapping) -> Vec<EciProfile> {
    (0..cohort.n_patients())
        .map(|m| eci_profile(cohort.row(m), mapping))
        .collect()
}
