use std::collections::BTreeMap;

use super::{Cohort, Sex};

/// Person-years and diagnosis counts for one `(sex, single year of age)` cell.
///
/// Counts are real-valued: a patient's diagnoses are spread over the age
/// years they were followed in, in proportion to the time spent in each.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureBin {
    pub sex: Sex,
    pub age: i32,
    pub person_years: f64,
    pub counts: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExposureBins {
    /// Sorted by `(sex, age)`; each pair appears once.
    pub bins: Vec<ExposureBin>,
    pub n_codes: usize,
}

impl ExposureBins {
    pub fn total_person_years(&self) -> f64 {
        self.bins.iter().map(|b| b.person_years).sum()
    }

    pub fn for_sex(&self, sex: Sex) -> impl Iterator<Item = &ExposureBin> {
        self.bins.iter().filter(move |b| b.sex == sex)
    }
}

/// Split the interval `[age, age + followup)` at integer ages. Returns
/// `(integer age, years spent at that age)`, skipping empty pieces.
pub fn follow_up_segments(age_at_entry: f64, followup_years: f64) -> Vec<(i32, f64)> {
    let end = age_at_entry + followup_years;
    let mut out = Vec::new();
    let mut year = age_at_entry.floor();
    while year < end {
        let lo = age_at_entry.max(year);
        let hi = end.min(year + 1.0);
        let py = hi - lo;
        if py > 0.0 {
            out.push((year as i32, py));
        }
        year += 1.0;
    }
    out
}

pub fn bin_exposure(cohort: &Cohort) -> ExposureBins {
    let v = cohort.n_codes();
    let mut cells: BTreeMap<(Sex, i32), (f64, Vec<f64>)> = BTreeMap::new();
    for (m, p) in cohort.patients().iter().enumerate() {
        let segments = follow_up_segments(p.age_at_entry, p.followup_years);
        let span: f64 = segments.iter().map(|s| s.1).sum();
        for (age, py) in segments {
            let cell = cells
                .entry((p.sex, age))
                .or_insert_with(|| (0.0, vec![0.0; v]));
            cell.0 += py;
            let share = py / span;
            for (n, c) in cohort.diagnosed(m) {
                cell.1[n] += c as f64 * share;
            }
        }
    }
    ExposureBins {
        bins: cells
            .into_iter()
            .map(|((sex, age), (person_years, counts))| ExposureBin {
                sex,
                age,
                person_years,
                counts,
            })
            .collect(),
        n_codes: v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::tests::patient;
    use crate::cohort::{DiseaseVocabulary, PatientRecord};
    use ndarray::Array2;
    use proptest::prelude::*;

    #[test]
    fn whole_years() {
        assert_eq!(follow_up_segments(70.0, 2.0), vec![(70, 1.0), (71, 1.0)]);
    }

    #[test]
    fn fractional_split() {
        assert_eq!(follow_up_segments(70.5, 1.0), vec![(70, 0.5), (71, 0.5)]);
    }

    #[test]
    fn counts_follow_person_years() {
        let vocab = DiseaseVocabulary::new(["a"]).unwrap();
        let counts = Array2::from_shape_vec((1, 1), vec![4]).unwrap();
        let cohort = Cohort::new(vocab, vec![patient("p", Sex::Male, 70.75, 1.0)], counts).unwrap();
        let bins = bin_exposure(&cohort);
        assert_eq!(bins.bins.len(), 2);
        assert!((bins.bins[0].counts[0] - 1.0).abs() < 1e-12);
        assert!((bins.bins[1].counts[0] - 3.0).abs() < 1e-12);
    }

    fn random_cohort(people: Vec<(bool, f64, f64, u32)>) -> Cohort {
        let vocab = DiseaseVocabulary::new(["a", "b"]).unwrap();
        let m = people.len();
        let mut counts = Array2::zeros((m, 2));
        let patients: Vec<PatientRecord> = people
            .iter()
            .enumerate()
            .map(|(i, &(female, age, fu, c))| {
                counts[[i, 0]] = c;
                counts[[i, 1]] = 1;
                let sex = if female { Sex::Female } else { Sex::Male };
                patient(&format!("p{i:03}"), sex, age, fu)
            })
            .collect();
        Cohort::new(vocab, patients, counts).unwrap()
    }

    proptest! {
        #[test]
        fn person_years_and_counts_are_conserved(
            people in prop::collection::vec((any::<bool>(), 50.0f64..99.0, 0.01f64..17.0, 0u32..40), 1..50)
        ) {
            let cohort = random_cohort(people);
            let bins = bin_exposure(&cohort);
            let direct: f64 = cohort.patients().iter().map(|p| p.followup_years).sum();
            prop_assert!((bins.total_person_years() - direct).abs() < 1e-6);
            let binned: f64 = bins.bins.iter().map(|b| b.counts[0]).sum();
            let raw: f64 = cohort.counts().column(0).iter().map(|&c| c as f64).sum();
            prop_assert!((binned - raw).abs() < 1e-6);
            for w in bins.bins.windows(2) {
                prop_assert!((w[0].sex, w[0].age) < (w[1].sex, w[1].age));
            }
        }
    }
}
