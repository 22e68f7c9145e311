use comorbid::cohort::generator::{generate_synthetic_cohort, standard_codes, GeneratorConfig};
use comorbid::cohort::{Cohort, DiseaseVocabulary};
use comorbid::rng::rng_from_seed;
use comorbid::stats::*;
use ndarray::Array1;
use rand::Rng;
use statrs::function::gamma::ln_gamma;

fn s(time: f64, event: bool, group: usize) -> SurvivalSample {
    SurvivalSample { time, event, group }
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = (a + b) / 2.0;
        let (lm, rm) = ((a + m) / 2.0, (m + b) / 2.0);
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f((a + b) / 2.0), f(b));
    rec(
        f,
        a,
        b,
        fa,
        fm,
        fb,
        (b - a) / 6.0 * (fa + 4.0 * fm + fb),
        tol,
        40,
    )
}

/// Upper tail by integrating the chi-square density in u = sqrt(t), which
/// removes the singularity at zero for one degree of freedom.
fn tail_by_quadrature(x: f64, df: usize) -> f64 {
    let k = df as f64;
    let log_norm = -(k / 2.0) * 2f64.ln() - ln_gamma(k / 2.0);
    let g = move |u: f64| {
        if u <= 0.0 {
            return if df == 1 { 2.0 * log_norm.exp() } else { 0.0 };
        }
        let t = u * u;
        2.0 * u * (log_norm + (k / 2.0 - 1.0) * t.ln() - t / 2.0).exp()
    };
    let upper = (x.max(k) + 600.0).sqrt();
    // split at the mode so the adaptive rule sees the peak
    let mode = (k - 1.0).max(0.0).sqrt();
    let lo = x.sqrt();
    if mode > lo {
        simpson(&g, lo, mode, 1e-14) + simpson(&g, mode, upper, 1e-14)
    } else {
        simpson(&g, lo, upper, 1e-14)
    }
}

#[test]
fn chi_square_tail_matches_quadrature() {
    let mut worst: f64 = 0.0;
    for df in [1, 2, 3, 4, 7, 10, 19, 30, 50] {
        for i in 0..=40 {
            let x = 5.0 * i as f64;
            let err = (chi_square_sf(x, df) - tail_by_quadrature(x, df)).abs();
            worst = worst.max(err);
        }
    }
    assert!(worst < 1e-10, "worst absolute error {worst:e}");
    assert!((chi_square_sf(3.841, 1) - 0.05).abs() < 5e-4);
}

#[test]
fn chi_square_tail_is_decreasing() {
    for df in [1, 5, 40] {
        let mut prev = 1.0;
        for i in 1..400 {
            let q = chi_square_sf(i as f64 * 0.25, df);
            // strictly where the difference is representable
            let strict = prev < 1.0 - 1e-12 && q > 1e-290;
            assert!(
                q <= prev && (!strict || q < prev),
                "df {df} x {}",
                i as f64 * 0.25
            );
            prev = q;
        }
    }
}

#[test]
fn km_doubling_leaves_curve_unchanged() {
    let data = vec![
        s(1.0, true, 0),
        s(2.0, false, 0),
        s(2.5, true, 0),
        s(4.0, true, 0),
        s(5.0, false, 0),
    ];
    let twice: Vec<_> = data.iter().chain(&data).copied().collect();
    let a = kaplan_meier(&data).unwrap();
    let b = kaplan_meier(&twice).unwrap();
    assert_eq!(a.times, b.times);
    for (x, y) in a.survival.iter().zip(&b.survival) {
        assert!((x - y).abs() < 1e-15);
    }
    assert!(a.at_risk.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn km_all_evented_ends_at_zero() {
    let c = kaplan_meier(&[
        s(3.0, true, 0),
        s(1.0, true, 0),
        s(2.0, true, 0),
        s(2.0, true, 0),
    ])
    .unwrap();
    assert_eq!(*c.survival.last().unwrap(), 0.0);
}

/// Per-time table for the two-group example, written out by hand:
/// t=1: n=4 (A 2), d=1 -> E_A 1/2, V 1/4
/// t=2: n=3 (A 1), d=1 -> E_A 1/3, V 2/9
/// t=3, t=4: no A subjects at risk -> E_A 0, V 0
#[test]
fn log_rank_two_group_hand_table() {
    let data = [
        s(1.0, true, 0),
        s(2.0, true, 0),
        s(3.0, true, 1),
        s(4.0, true, 1),
    ];
    let r = log_rank_test(&data, 2).unwrap();
    let o_minus_e: f64 = 2.0 - (0.5 + 1.0 / 3.0);
    let v: f64 = 0.25 + 2.0 / 9.0;
    assert!((r.expected[0] - 5.0 / 6.0).abs() < 1e-12);
    assert!((r.chi_square - o_minus_e * o_minus_e / v).abs() < 1e-10);
    assert!((r.chi_square - 49.0 / 17.0).abs() < 1e-10);
    let z = (r.observed[0] - r.expected[0]) / r.variance[0][0].sqrt();
    assert!((z * z - r.chi_square).abs() < 1e-10);
    assert_eq!(r.degrees_of_freedom, 1);
    assert_eq!(r.p_value, chi_square_sf(r.chi_square, 1));
}

#[test]
fn log_rank_identical_groups() {
    let base = [
        (1.0, true),
        (2.0, false),
        (2.0, true),
        (5.0, true),
        (7.0, false),
    ];
    let data: Vec<_> = (0..2)
        .flat_map(|g| base.iter().map(move |&(t, e)| s(t, e, g)))
        .collect();
    let r = log_rank_test(&data, 2).unwrap();
    assert_eq!(r.chi_square, 0.0);
    assert_eq!(r.p_value, 1.0);
}

fn three_groups() -> Vec<SurvivalSample> {
    let mut rng = rng_from_seed(5);
    (0..90)
        .map(|i| {
            let g = i % 3;
            let t: f64 = -(1.0 - rng.random::<f64>()).ln() / (0.2 + 0.15 * g as f64);
            s((t * 10.0).round() / 10.0, rng.random::<f64>() < 0.8, g)
        })
        .collect()
}

#[test]
fn log_rank_invariances() {
    let data = three_groups();
    let base = log_rank_test(&data, 3).unwrap();
    assert_eq!(base.degrees_of_freedom, 2);
    let relabelled: Vec<_> = data
        .iter()
        .map(|x| s(x.time, x.event, (x.group + 1) % 3))
        .collect();
    let r = log_rank_test(&relabelled, 3).unwrap();
    assert!((r.chi_square - base.chi_square).abs() < 1e-9 * base.chi_square.max(1.0));
    let warped: Vec<_> = data
        .iter()
        .map(|x| s((x.time + 1.0).ln().powi(3), x.event, x.group))
        .collect();
    let r = log_rank_test(&warped, 3).unwrap();
    assert!((r.chi_square - base.chi_square).abs() < 1e-9 * base.chi_square.max(1.0));
}

#[test]
fn log_rank_merged_groups_against_copy() {
    let data = three_groups();
    let mut paired: Vec<_> = data.iter().map(|x| s(x.time, x.event, 0)).collect();
    paired.extend(data.iter().map(|x| s(x.time, x.event, 1)));
    let r = log_rank_test(&paired, 2).unwrap();
    assert!((r.p_value - 1.0).abs() < 1e-12);
}

#[test]
fn log_rank_singular_covariance_uses_generalized_inverse() {
    // group 2 is gone before the first event, so its row of V is zero
    let data = [
        s(0.5, false, 2),
        s(1.0, true, 0),
        s(2.0, true, 1),
        s(3.0, true, 0),
        s(4.0, true, 1),
    ];
    let r = log_rank_test(&data, 3).unwrap();
    let two = log_rank_test(&data[1..], 2).unwrap();
    assert!((r.chi_square - two.chi_square).abs() < 1e-9);
    assert_eq!(r.degrees_of_freedom, 2);
}

#[test]
fn kruskal_wallis_hand_ranks() {
    let r = kruskal_wallis(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    // mean ranks 2 and 5 around a centre of 3.5
    let h = 12.0 / (6.0 * 7.0) * (3.0 * 1.5f64.powi(2) + 3.0 * 1.5f64.powi(2));
    assert!((r.h - h).abs() < 1e-10);
    assert!((r.h - 27.0 / 7.0).abs() < 1e-10);
    let dup = kruskal_wallis(&[vec![3.0, 1.0, 4.0, 1.0], vec![3.0, 1.0, 4.0, 1.0]]).unwrap();
    assert_eq!(dup.h, 0.0);
    assert_eq!(dup.p_value, 1.0);
}

#[test]
fn kruskal_wallis_monotone_invariance() {
    let g: Vec<Vec<f64>> = vec![
        vec![0.3, 1.7, 2.2, 2.2],
        vec![0.1, 5.0, 3.3],
        vec![4.4, 4.4, 0.9, 7.0],
    ];
    let warped: Vec<Vec<f64>> = g
        .iter()
        .map(|v| v.iter().map(|x| x.exp() * 3.0 - 1.0).collect())
        .collect();
    let a = kruskal_wallis(&g).unwrap();
    let b = kruskal_wallis(&warped).unwrap();
    assert!((a.h - b.h).abs() < 1e-12);
}

#[test]
fn eci_prevalence_matches_plant() {
    let vocab = DiseaseVocabulary::new(standard_codes()).unwrap();
    let mapping = EciMapping::standard(&vocab);
    let plant: Vec<f64> = (0..29).map(|c| 0.05 + 0.03 * c as f64).collect();
    let m = 3000;
    let mut rng = rng_from_seed(11);
    let mut hits = [0usize; 29];
    for _ in 0..m {
        let mut row = Array1::<u32>::zeros(vocab.len());
        for (c, &p) in plant.iter().enumerate() {
            if rng.random::<f64>() < p {
                let codes: Vec<usize> = mapping.codes_for(c).collect();
                row[codes[rng.random_range(0..codes.len())]] += 1 + rng.random_range(0..3);
            }
        }
        let prof = eci_profile(row.view(), &mapping);
        assert_eq!(prof.score, prof.flags.iter().filter(|f| **f).count());
        for c in 0..29 {
            hits[c] += prof.flags[c] as usize;
        }
    }
    for c in 0..29 {
        let se = (plant[c] * (1.0 - plant[c]) / m as f64).sqrt();
        let est = hits[c] as f64 / m as f64;
        assert!(
            (est - plant[c]).abs() < 3.0 * se,
            "{}: {est} vs {}",
            ECI_CATEGORIES[c],
            plant[c]
        );
    }
}

#[test]
fn eci_mapping_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = DiseaseVocabulary::new(standard_codes()).unwrap();
    let mapping = EciMapping::standard(&vocab);
    let path = dir.path().join("eci.csv");
    mapping.write(&path, &vocab).unwrap();
    assert_eq!(EciMapping::load(&path, &vocab).unwrap(), mapping);
    std::fs::write(&path, "code,category\n108,gout\n").unwrap();
    let err = EciMapping::load(&path, &vocab).unwrap_err().to_string();
    assert!(err.contains(":2:") || err.contains("line"), "{err}");
}

fn small_cohort() -> Cohort {
    let config = GeneratorConfig {
        n_patients: 60,
        n_codes: 285,
        n_clusters: 4,
        codes: Some(standard_codes()),
        target_mean_diagnoses: 80.0,
        seed: 3,
        ..GeneratorConfig::default()
    };
    generate_synthetic_cohort(&config).unwrap().0
}

#[test]
fn report_on_duplicated_subgroups_has_unit_p_values() {
    let cohort = small_cohort();
    let m = cohort.n_patients();
    let mut patients = cohort.patients().to_vec();
    for p in cohort.patients() {
        let mut q = p.clone();
        q.id = format!("{}_copy", p.id);
        patients.push(q);
    }
    let rows: Vec<usize> = (0..m).chain(0..m).collect();
    let counts = cohort.counts().select(ndarray::Axis(0), &rows);
    let doubled = Cohort::new(cohort.vocabulary().clone(), patients, counts).unwrap();
    let labels: Vec<usize> = (0..2 * m).map(|i| i / m).collect();
    let mapping = EciMapping::standard(doubled.vocabulary());
    let profiles = eci_profiles(&doubled, &mapping);
    let report = subgroup_report(&doubled, &labels, &profiles).unwrap();
    let ps: Vec<_> = report.p_values().collect();
    assert_eq!(ps.len(), 1 + 3 + 1 + 29);
    for (name, p) in ps {
        assert!((p - 1.0).abs() < 1e-9, "{name}: {p}");
    }
    assert_eq!(
        report
            .rows
            .iter()
            .filter(|r| ECI_CATEGORIES.contains(&r.variable.as_str()))
            .count(),
        29
    );
}

#[test]
fn report_single_subgroup_and_empty_labels() {
    let cohort = small_cohort();
    let mapping = EciMapping::standard(cohort.vocabulary());
    let profiles = eci_profiles(&cohort, &mapping);
    let one = subgroup_report(&cohort, &vec![0; cohort.n_patients()], &profiles).unwrap();
    assert_eq!(one.p_values().count(), 0);
    // label 1 unused: dropped from the columns
    let labels: Vec<usize> = (0..cohort.n_patients())
        .map(|i| if i % 2 == 0 { 0 } else { 2 })
        .collect();
    let r = subgroup_report(&cohort, &labels, &profiles).unwrap();
    assert_eq!(r.subgroups, vec![0, 2]);
    let text = r.to_text();
    assert!(text.contains("subgroup_3") && !text.contains("subgroup_2"));
    let dir = tempfile::tempdir().unwrap();
    r.write_csv(&dir.path().join("report.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + r.rows.len());
}
