//! Forward simulation of synthetic cohorts from the two topic-model
//! generative processes, with age/sex-dependent baseline rates and
//! per-cluster survival.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, Uniform};

use super::{follow_up_segments, Cohort, DiseaseVocabulary, PatientRecord, Sex};
use crate::dist;
use crate::error::{Error, Result};
use crate::rates::{predict_expected, ExpectedCounts, RateTable};
use crate::rng::substream;

/// Age at which baseline log rates and hazards are centred.
pub const REFERENCE_AGE: f64 = 75.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_codes: usize,
    pub n_clusters: usize,
    /// Symmetric Dirichlet concentration for patient mixtures.
    pub alpha: f64,
    /// Symmetric Dirichlet concentration for cluster profiles.
    pub beta: f64,
    /// Gamma shape of the patient multiplier.
    pub xi: f64,
    /// Gamma scale of the patient multiplier; `xi * delta` must be 1.
    pub delta: f64,
    pub female_fraction: f64,
    pub median_age: f64,
    pub age_sd: f64,
    pub min_age: f64,
    pub max_age: f64,
    /// Administrative censoring time is uniform on `[followup_min, followup_max]`.
    pub followup_min: f64,
    pub followup_max: f64,
    pub target_mean_diagnoses: f64,
    /// Spread of per-disease log baseline rates.
    pub base_rate_sd: f64,
    /// Spread of per-disease log-rate slopes per year of age.
    pub age_slope_sd: f64,
    pub sex_effect_sd: f64,
    /// Death hazard per year at the reference age, per dominant cluster
    /// (cycled when shorter than `n_clusters`). Empty selects a default
    /// spread.
    pub survival_hazards: Vec<f64>,
    /// Log-hazard change per year of age.
    pub age_hazard_slope: f64,
    /// Draw diagnosis tokens by the multinomial process instead of Poisson
    /// counts.
    pub lda_mode: bool,
    /// When set, cluster `k` puts this much mass uniformly on its own
    /// contiguous block of codes and the rest uniformly elsewhere.
    pub phi_block_mass: Option<f64>,
    /// Every patient belongs to exactly one cluster (assigned cyclically).
    pub theta_one_hot: bool,
    /// Vocabulary; `None` takes the first `n_codes` of [`standard_codes`].
    pub codes: Option<Vec<String>>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 300,
            n_codes: 50,
            n_clusters: 5,
            alpha: 0.2,
            beta: 0.5,
            xi: 2.0,
            delta: 0.5,
            female_fraction: 0.5,
            median_age: 74.0,
            age_sd: 8.0,
            min_age: 50.0,
            max_age: 100.0,
            followup_min: 1.0,
            followup_max: 17.0,
            target_mean_diagnoses: 400.0,
            base_rate_sd: 1.0,
            age_slope_sd: 0.03,
            sex_effect_sd: 0.3,
            survival_hazards: Vec::new(),
            age_hazard_slope: 0.03,
            lda_mode: false,
            phi_block_mass: None,
            theta_one_hot: false,
            codes: None,
            seed: 1,
        }
    }
}

/// Cohort-level presets from the study demographics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Osteoporosis,
    Dementia,
    Copd,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s.to_ascii_lowercase().as_str() {
            "osteoporosis" => Some(Preset::Osteoporosis),
            "dementia" | "delirium" => Some(Preset::Dementia),
            "copd" => Some(Preset::Copd),
            _ => None,
        }
    }

    pub fn index_code(self) -> &'static str {
        match self {
            Preset::Osteoporosis => "206",
            Preset::Dementia => "653",
            Preset::Copd => "127",
        }
    }

    pub fn config(self, seed: u64) -> GeneratorConfig {
        let (n_patients, female_fraction, median_age, target) = match self {
            Preset::Osteoporosis => (388, 0.946, 74.4, 406.0),
            Preset::Dementia => (304, 0.688, 83.6, 387.5),
            Preset::Copd => (685, 0.508, 73.2, 402.0),
        };
        GeneratorConfig {
            n_patients,
            n_codes: 285,
            n_clusters: 20,
            female_fraction,
            median_age,
            target_mean_diagnoses: target,
            seed,
            ..GeneratorConfig::default()
        }
    }
}

/// 285 single-level diagnosis category codes: 1-259, 650-670, 2601-2605.
pub fn standard_codes() -> Vec<String> {
    (1..=259)
        .chain(650..=670)
        .chain(2601..=2605)
        .map(|c: u32| c.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub theta: Array2<f64>,
    pub phi: Array2<f64>,
    pub gamma: Vec<f64>,
    /// Per patient, `(code index, cluster)` for every diagnosed code. In
    /// LDA mode the label is the most frequent cluster among that code's
    /// tokens.
    pub z: Vec<Vec<(usize, usize)>>,
    /// Expected counts implied by the scaled baseline rates.
    pub expected: ExpectedCounts,
    /// Scaled baseline rates per `(code, sex, age)`.
    pub rates: RateTable,
}

impl GroundTruth {
    /// Largest-weight cluster per patient.
    pub fn dominant_clusters(&self) -> Vec<usize> {
        self.theta
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect()
    }
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.n_patients == 0 || self.n_codes == 0 || self.n_clusters == 0 {
            return bad("patients, codes and clusters must all be at least 1".into());
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("xi", self.xi),
            ("delta", self.delta),
            ("age_sd", self.age_sd),
            ("target_mean_diagnoses", self.target_mean_diagnoses),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if (self.xi * self.delta - 1.0).abs() > 1e-12 {
            return bad(format!(
                "xi * delta must equal 1 (mean-one multiplier), got {}",
                self.xi * self.delta
            ));
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return bad("female_fraction must lie in [0, 1]".into());
        }
        if !(self.min_age < self.max_age) {
            return bad("min_age must be below max_age".into());
        }
        if !(self.followup_min > 0.0 && self.followup_min <= self.followup_max) {
            return bad("need 0 < followup_min <= followup_max".into());
        }
        if self.survival_hazards.iter().any(|h| !(*h > 0.0)) {
            return bad("survival hazards must be positive".into());
        }
        if let Some(mass) = self.phi_block_mass {
            if !(0.0..=1.0).contains(&mass) {
                return bad("phi_block_mass must lie in [0, 1]".into());
            }
        }
        if let Some(codes) = &self.codes {
            if codes.len() != self.n_codes {
                return bad(format!(
                    "{} codes given for n_codes = {}",
                    codes.len(),
                    self.n_codes
                ));
            }
        }
        Ok(())
    }

    fn vocabulary(&self) -> Result<DiseaseVocabulary> {
        match &self.codes {
            Some(c) => DiseaseVocabulary::new(c.iter().cloned()),
            None => {
                let std = standard_codes();
                if self.n_codes <= std.len() {
                    DiseaseVocabulary::new(std.into_iter().take(self.n_codes))
                } else {
                    DiseaseVocabulary::new((1..=self.n_codes).map(|c| c.to_string()))
                }
            }
        }
    }

    fn hazard(&self, cluster: usize) -> f64 {
        if self.survival_hazards.is_empty() {
            let k = self.n_clusters;
            let pos = if k > 1 {
                cluster as f64 / (k - 1) as f64 - 0.5
            } else {
                0.0
            };
            0.06 * (3f64.ln() * pos).exp()
        } else {
            self.survival_hazards[cluster % self.survival_hazards.len()]
        }
    }
}

struct Demographics {
    record: PatientRecord,
    theta: Vec<f64>,
    gamma: f64,
}

/// Simulate a cohort and keep the parameters it was drawn from. The same
/// configuration (including seed) always produces the same output.
pub fn generate_synthetic_cohort(config: &GeneratorConfig) -> Result<(Cohort, GroundTruth)> {
    config.validate()?;
    let vocabulary = config.vocabulary()?;
    let (v, k, m_total) = (config.n_codes, config.n_clusters, config.n_patients);

    // cluster profiles
    let mut rng = substream(config.seed, &[0]);
    let mut phi = Array2::<f64>::zeros((k, v));
    for c in 0..k {
        let row = match config.phi_block_mass {
            Some(mass) => block_profile(c, k, v, mass),
            None => dist::dirichlet(&vec![config.beta; v], &mut rng),
        };
        phi.row_mut(c).assign(&ndarray::Array1::from(row));
    }

    // baseline log-rate curves
    let mut rng = substream(config.seed, &[1]);
    let normal = |sd: f64| Normal::new(0.0, sd.max(0.0)).expect("finite sd");
    let base: Vec<(f64, f64, f64)> = (0..v)
        .map(|_| {
            (
                normal(config.base_rate_sd).sample(&mut rng),
                normal(config.age_slope_sd).sample(&mut rng),
                normal(config.sex_effect_sd).sample(&mut rng),
            )
        })
        .collect();
    let unscaled_rate = |n: usize, sex: Sex, age: i32| -> f64 {
        let (b, slope, sex_eff) = base[n];
        let female = if sex == Sex::Female { sex_eff } else { 0.0 };
        (b + slope * (age as f64 - REFERENCE_AGE) + female).exp()
    };

    // demographics, mixtures, multipliers, survival
    let width = m_total.to_string().len().max(4);
    let age_dist = Normal::new(config.median_age, config.age_sd).expect("finite age sd");
    let gamma_dist =
        rand_distr::Gamma::new(config.xi, config.delta).expect("validated gamma parameters");
    let censor = Uniform::new_inclusive(config.followup_min, config.followup_max)
        .expect("validated follow-up range");
    let people: Vec<Demographics> = (0..m_total)
        .map(|m| {
            let mut rng = substream(config.seed, &[2, m as u64]);
            let sex = if rng.random::<f64>() < config.female_fraction {
                Sex::Female
            } else {
                Sex::Male
            };
            let age = loop {
                let a: f64 = age_dist.sample(&mut rng);
                if a >= config.min_age && a <= config.max_age {
                    break a;
                }
            };
            let gamma = if config.lda_mode {
                1.0
            } else {
                gamma_dist.sample(&mut rng)
            };
            let theta = if config.theta_one_hot {
                let mut t = vec![0.0; k];
                t[m % k] = 1.0;
                t
            } else {
                dist::dirichlet(&vec![config.alpha; k], &mut rng)
            };
            let dominant = argmax(theta.iter().copied());
            let hazard =
                config.hazard(dominant) * (config.age_hazard_slope * (age - REFERENCE_AGE)).exp();
            let death: f64 = Exp::new(hazard).expect("positive hazard").sample(&mut rng);
            let admin: f64 = censor.sample(&mut rng);
            let followup = death.min(admin);
            Demographics {
                record: PatientRecord {
                    id: format!("P{:0width$}", m + 1),
                    sex,
                    age_at_entry: age,
                    followup_years: followup,
                    survival_time: followup,
                    event: death <= admin,
                },
                theta,
                gamma,
            }
        })
        .collect();

    // scale baseline rates so the mean total diagnoses hits the target
    let mut expected_total = 0.0;
    for d in &people {
        let mix: Vec<f64> = (0..v)
            .map(|n| (0..k).map(|c| d.theta[c] * phi[[c, n]]).sum())
            .collect();
        for (age, py) in follow_up_segments(d.record.age_at_entry, d.record.followup_years) {
            for (n, w) in mix.iter().enumerate() {
                expected_total += w * unscaled_rate(n, d.record.sex, age) * py * d.gamma;
            }
        }
    }
    if !(expected_total > 0.0) || !expected_total.is_finite() {
        return Err(Error::Parameter(
            "target mean unattainable: baseline rates are all zero".into(),
        ));
    }
    let scale = config.target_mean_diagnoses * m_total as f64 / expected_total;

    let lo_age = config.min_age.floor() as i32;
    let hi_age = (config.max_age + config.followup_max).ceil() as i32;
    let mut rates = RateTable::new(v);
    for n in 0..v {
        for sex in Sex::ALL {
            for age in lo_age..=hi_age {
                rates.insert(n, sex, age, unscaled_rate(n, sex, age) * scale);
            }
        }
    }

    // Expected counts need a cohort; build a placeholder count matrix first,
    // then fill in the real draws below.
    let records: Vec<PatientRecord> = people.iter().map(|d| d.record.clone()).collect();
    let placeholder = Cohort::new(
        vocabulary.clone(),
        records.clone(),
        Array2::from_elem((m_total, v), 1),
    )?;
    let expected = predict_expected(&rates, &placeholder)?;

    let mut counts = Array2::<u32>::zeros((m_total, v));
    let mut z_true = Vec::with_capacity(m_total);
    for (m, d) in people.iter().enumerate() {
        let mut rng = substream(config.seed, &[3, m as u64]);
        let mut attempts = 0;
        loop {
            attempts += 1;
            let (row, labels) = if config.lda_mode {
                draw_tokens(&d.theta, &phi, config.target_mean_diagnoses, &mut rng)
            } else {
                draw_counts(&d.theta, &phi, expected.values().row(m), d.gamma, &mut rng)
            };
            if row.iter().any(|&c| c > 0) {
                counts.row_mut(m).assign(&ndarray::Array1::from(row));
                z_true.push(labels);
                break;
            }
            if attempts >= 10_000 {
                return Err(Error::Parameter(format!(
                    "target mean unattainable: patient {} never received a diagnosis",
                    d.record.id
                )));
            }
        }
    }

    let cohort = Cohort::new(vocabulary, records, counts)?;
    let theta = Array2::from_shape_fn((m_total, k), |(m, c)| people[m].theta[c]);
    let truth = GroundTruth {
        theta,
        phi,
        gamma: people.iter().map(|d| d.gamma).collect(),
        z: z_true,
        expected,
        rates,
    };
    Ok((cohort, truth))
}

fn block_profile(cluster: usize, k: usize, v: usize, mass: f64) -> Vec<f64> {
    let block = |n: usize| n * k / v;
    let inside = (0..v).filter(|&n| block(n) == cluster).count();
    let outside = v - inside;
    (0..v)
        .map(|n| {
            if block(n) == cluster {
                (if outside == 0 { 1.0 } else { mass }) / inside as f64
            } else if outside > 0 {
                (1.0 - mass) / outside as f64
            } else {
                0.0
            }
        })
        .collect()
}

fn draw_counts<R: Rng>(
    theta: &[f64],
    phi: &Array2<f64>,
    expected: ndarray::ArrayView1<'_, f64>,
    gamma: f64,
    rng: &mut R,
) -> (Vec<u32>, Vec<(usize, usize)>) {
    let v = phi.ncols();
    let mut row = vec![0u32; v];
    let mut labels = Vec::new();
    for n in 0..v {
        let z = dist::categorical(theta, rng);
        let mean = phi[[z, n]] * expected[n] * gamma;
        let y = if mean > 0.0 {
            Poisson::new(mean).expect("positive mean").sample(rng) as u32
        } else {
            0
        };
        if y > 0 {
            row[n] = y;
            labels.push((n, z));
        }
    }
    (row, labels)
}

fn draw_tokens<R: Rng>(
    theta: &[f64],
    phi: &Array2<f64>,
    mean_tokens: f64,
    rng: &mut R,
) -> (Vec<u32>, Vec<(usize, usize)>) {
    let (k, v) = phi.dim();
    let n_tokens = (Poisson::new(mean_tokens)
        .expect("positive mean")
        .sample(rng) as usize)
        .max(1);
    let mut row = vec![0u32; v];
    let mut per_code = vec![vec![0u32; k]; v];
    for _ in 0..n_tokens {
        let z = dist::categorical(theta, rng);
        let w = dist::categorical(phi.row(z).as_slice().expect("row-major"), rng);
        row[w] += 1;
        per_code[w][z] += 1;
    }
    let labels = (0..v)
        .filter(|&n| row[n] > 0)
        .map(|n| (n, argmax(per_code[n].iter().map(|&c| c as f64))))
        .collect();
    (row, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_patients: 40,
            n_codes: 12,
            n_clusters: 3,
            target_mean_diagnoses: 60.0,
            seed: 42,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = generate_synthetic_cohort(&small()).unwrap();
        let b = generate_synthetic_cohort(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_cohort(&GeneratorConfig {
            seed: 43,
            ..small()
        })
        .unwrap();
        assert_ne!(a.0.counts(), c.0.counts());
    }

    #[test]
    fn single_cluster_labels_are_zero() {
        let (_, truth) = generate_synthetic_cohort(&GeneratorConfig {
            n_clusters: 1,
            ..small()
        })
        .unwrap();
        assert!(truth.theta.iter().all(|&t| t == 1.0));
        assert!(truth.z.iter().flatten().all(|&(_, z)| z == 0));
    }

    #[test]
    fn simplex_rows_and_positive_gamma() {
        let (cohort, truth) = generate_synthetic_cohort(&small()).unwrap();
        for r in truth.theta.rows().into_iter().chain(truth.phi.rows()) {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        assert!(truth.gamma.iter().all(|&g| g > 0.0));
        for (m, labels) in truth.z.iter().enumerate() {
            let diagnosed: Vec<usize> = cohort.diagnosed(m).map(|(n, _)| n).collect();
            let labelled: Vec<usize> = labels.iter().map(|&(n, _)| n).collect();
            assert_eq!(diagnosed, labelled);
        }
    }

    #[test]
    fn rejects_non_unit_multiplier_mean() {
        let cfg = GeneratorConfig {
            xi: 2.0,
            delta: 0.4,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_cohort(&cfg),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn degenerate_baseline_rates_are_rejected() {
        let cfg = GeneratorConfig {
            base_rate_sd: 1e4,
            ..small()
        };
        let err = generate_synthetic_cohort(&cfg).unwrap_err();
        assert!(err.to_string().contains("unattainable"), "{err}");
    }

    #[test]
    fn lda_mode_and_blocks() {
        let cfg = GeneratorConfig {
            lda_mode: true,
            phi_block_mass: Some(1.0),
            theta_one_hot: true,
            n_clusters: 2,
            n_codes: 10,
            ..small()
        };
        let (cohort, truth) = generate_synthetic_cohort(&cfg).unwrap();
        for m in 0..cohort.n_patients() {
            let half = m % 2;
            assert!(cohort.diagnosed(m).all(|(n, _)| n * 2 / 10 == half));
        }
        assert!(truth.gamma.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn survival_within_followup() {
        let (cohort, _) = generate_synthetic_cohort(&small()).unwrap();
        for p in cohort.patients() {
            assert!(p.survival_time <= p.followup_years + 1e-9);
            assert!(p.age_at_entry >= 50.0 && p.age_at_entry <= 100.0);
        }
    }

    #[test]
    fn standard_vocabulary_has_index_codes() {
        let codes = standard_codes();
        assert_eq!(codes.len(), 285);
        for c in ["206", "653", "127"] {
            assert!(codes.iter().any(|x| x == c));
        }
    }
}
