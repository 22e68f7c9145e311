use comorbid::cohort::generator::{generate_synthetic_cohort, GeneratorConfig};
use comorbid::cohort::{bin_exposure, Cohort, DiseaseVocabulary, ExposureBin, ExposureBins, PatientRecord, Sex};
use comorbid::rates::*;
use comorbid::rng::rng_from_seed;
use ndarray::Array2;
use rand_distr::{Distribution, Poisson};

fn curve(age: f64) -> f64 {
    (-5.0 + 0.04 * age).exp()
}

/// Bins for ages 50..=99, both sexes, with Poisson counts from `curve`.
fn simulated_bins(person_years: f64, seed: u64) -> ExposureBins {
    let mut rng = rng_from_seed(seed);
    let mut bins = Vec::new();
    for sex in Sex::ALL {
        for age in 50..=99 {
            let mu = curve(age as f64 + 0.5) * person_years;
            let y = Poisson::new(mu).unwrap().sample(&mut rng);
            bins.push(ExposureBin {
                sex,
                age,
                person_years,
                counts: vec![y, (y / 3.0).floor()],
            });
        }
    }
    ExposureBins { bins, n_codes: 2 }
}

#[test]
fn doubling_exposure_and_counts_keeps_coefficients() {
    let bins = simulated_bins(400.0, 1);
    let doubled = ExposureBins {
        bins: bins
            .bins
            .iter()
            .map(|b| ExposureBin {
                person_years: 2.0 * b.person_years,
                counts: b.counts.iter().map(|c| 2.0 * c).collect(),
                ..b.clone()
            })
            .collect(),
        n_codes: bins.n_codes,
    };
    let a = fit_rate_model(&bins, &RateModelOptions::default()).unwrap();
    let b = fit_rate_model(&doubled, &RateModelOptions::default()).unwrap();
    for sex in Sex::ALL {
        for (ca, cb) in a.sex(sex).unwrap().codes.iter().zip(&b.sex(sex).unwrap().codes) {
            for (x, y) in ca.coefficients.iter().zip(&cb.coefficients) {
                assert!((x - y).abs() < 1e-6, "{x} vs {y}");
            }
        }
    }
}

#[test]
fn intercept_only_fit_is_calibrated() {
    let bins = simulated_bins(250.0, 2);
    let options = RateModelOptions {
        df: 0,
        ..RateModelOptions::default()
    };
    let fit = fit_rate_model(&bins, &options).unwrap();
    for sex in Sex::ALL {
        for n in 0..2 {
            let observed: f64 = bins.for_sex(sex).map(|b| b.counts[n]).sum();
            let predicted: f64 = bins
                .for_sex(sex)
                .map(|b| fit.rate(n, sex, b.age as f64).unwrap() * b.person_years)
                .sum();
            assert!((observed - predicted).abs() < 1e-6, "{observed} vs {predicted}");
        }
    }
}

#[test]
fn log_linear_curve_is_recovered() {
    let bins = simulated_bins(1e5, 3);
    let fit = fit_rate_model(&bins, &RateModelOptions::default()).unwrap();
    assert!(fit.all_converged());
    for sex in Sex::ALL {
        for age in 55..=95 {
            let a = age as f64 + 0.5;
            let got = fit.rate(0, sex, age as f64).unwrap();
            let rel = (got - curve(a)).abs() / curve(a);
            assert!(rel < 0.05, "age {age}: {got} vs {}", curve(a));
        }
    }
}

#[test]
fn irls_deviance_never_increases() {
    let bins = simulated_bins(30.0, 4);
    let fit = fit_rate_model(&bins, &RateModelOptions::default()).unwrap();
    for sex in Sex::ALL {
        for c in &fit.sex(sex).unwrap().codes {
            assert!(c.deviance >= 0.0);
            for w in c.deviance_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "{:?}", c.deviance_trace);
            }
        }
    }
}

#[test]
fn monotone_truth_gives_monotone_fits() {
    let mut monotone = 0;
    for rep in 0..100 {
        let bins = simulated_bins(300.0, 100 + rep);
        let fit = fit_rate_model(&bins, &RateModelOptions::default()).unwrap();
        let f = fit.sex(Sex::Female).unwrap();
        let lr: Vec<f64> = (55..=95).map(|a| f.log_rate(0, a as f64)).collect();
        if lr.windows(2).all(|w| w[1] >= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 95, "{monotone}/100 monotone");
}

fn patient(id: &str, sex: Sex, age: f64, followup: f64) -> PatientRecord {
    PatientRecord {
        id: id.into(),
        sex,
        age_at_entry: age,
        followup_years: followup,
        survival_time: followup,
        event: false,
    }
}

#[test]
fn expected_counts_add_over_bins() {
    let vocab = DiseaseVocabulary::new(["a"]).unwrap();
    let cohort = Cohort::new(
        vocab,
        vec![patient("p1", Sex::Male, 70.0, 2.0), patient("p2", Sex::Male, 70.5, 1.0)],
        Array2::ones((2, 1)),
    )
    .unwrap();
    let mut flat = RateTable::new(1);
    flat.insert(0, Sex::Male, 70, 0.1);
    flat.insert(0, Sex::Male, 71, 0.1);
    let e = predict_expected(&flat, &cohort).unwrap();
    assert!((e.get(0, 0) - 0.2).abs() < 1e-12);

    let mut steps = RateTable::new(1);
    steps.insert(0, Sex::Male, 70, 0.1);
    steps.insert(0, Sex::Male, 71, 0.4);
    let e = predict_expected(&steps, &cohort).unwrap();
    assert!((e.get(1, 0) - (0.1 * 0.5 + 0.4 * 0.5)).abs() < 1e-12);
}

#[test]
fn synthetic_totals_match_within_poisson_error() {
    let (cohort, _) = generate_synthetic_cohort(&GeneratorConfig {
        n_patients: 300,
        seed: 5,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let fit = fit_rate_model(&bin_exposure(&cohort), &RateModelOptions::default()).unwrap();
    let e = predict_expected(&fit, &cohort).unwrap();
    assert_eq!(e.dim(), (cohort.n_patients(), cohort.n_codes()));
    for n in 0..cohort.n_codes() {
        let expected: f64 = (0..cohort.n_patients()).map(|m| e.get(m, n)).sum();
        let observed: f64 = (0..cohort.n_patients()).map(|m| cohort.counts()[[m, n]] as f64).sum();
        assert!((expected - observed).abs() <= 3.0 * expected.sqrt().max(1.0), "code {n}: {expected} vs {observed}");
    }
}
