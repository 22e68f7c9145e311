//! Per-disease, per-sex Poisson rate model over single-year age bins, and the
//! expected-count matrix derived from it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rayon::prelude::*;

use crate::cohort::{follow_up_segments, Cohort, DiseaseVocabulary, ExposureBins, Sex};
use crate::error::{Error, Result};

mod spline;

pub use spline::SplineBasis;

/// Lower bound applied to every expected count.
pub const EXPECTED_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RateModelOptions {
    /// Spline degrees of freedom for age.
    pub df: usize,
    pub max_iter: usize,
    /// Relative deviance change that counts as converged.
    pub tol: f64,
    /// Added to the diagonal of the IRLS normal equations.
    pub ridge: f64,
}

/// Newton steps smaller than this are taken without a deviance check.
const POLISH_STEP: f64 = 1e-6;

impl Default for RateModelOptions {
    fn default() -> Self {
        Self {
            df: 4,
            max_iter: 100,
            tol: 1e-8,
            ridge: 1e-8,
        }
    }
}

/// One Poisson GLM: intercept first, then spline coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeFit {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub deviance: f64,
    pub iterations: usize,
    /// Deviance after each accepted IRLS update.
    pub deviance_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SexFit {
    /// `None` when there were too few age bins for a spline; the model is
    /// then intercept-only.
    pub basis: Option<SplineBasis>,
    pub codes: Vec<CodeFit>,
}

impl SexFit {
    fn design_row(&self, age: f64) -> Vec<f64> {
        let mut row = vec![1.0];
        if let Some(b) = &self.basis {
            row.extend(b.eval(age));
        }
        row
    }

    /// Linear predictor without offset: the log rate per person-year.
    pub fn log_rate(&self, code: usize, age: f64) -> f64 {
        let row = self.design_row(age);
        row.iter()
            .zip(&self.codes[code].coefficients)
            .map(|(x, b)| x * b)
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateModelFit {
    /// Indexed by `Sex::index()`; `None` for a sex with no exposure.
    pub by_sex: [Option<SexFit>; 2],
    pub n_codes: usize,
}

impl RateModelFit {
    pub fn sex(&self, sex: Sex) -> Option<&SexFit> {
        self.by_sex[sex.index()].as_ref()
    }

    pub fn rate(&self, code: usize, sex: Sex, age: f64) -> Option<f64> {
        self.sex(sex).map(|f| f.log_rate(code, age).exp())
    }

    pub fn all_converged(&self) -> bool {
        self.by_sex
            .iter()
            .flatten()
            .all(|s| s.codes.iter().all(|c| c.converged))
    }

    /// Rows of the fit export: `code,sex,coef_index,value,deviance,converged`.
    pub fn write_csv(&self, vocabulary: &DiseaseVocabulary, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let err = |e: csv::Error| Error::File {
            path: path.into(),
            message: e.to_string(),
        };
        w.write_record([
            "code",
            "sex",
            "coef_index",
            "value",
            "deviance",
            "converged",
        ])
        .map_err(err)?;
        for sex in Sex::ALL {
            let Some(fit) = self.sex(sex) else { continue };
            for (n, cf) in fit.codes.iter().enumerate() {
                for (j, v) in cf.coefficients.iter().enumerate() {
                    w.write_record([
                        vocabulary.code(n).to_string(),
                        sex.as_str().to_string(),
                        j.to_string(),
                        v.to_string(),
                        cf.deviance.to_string(),
                        (cf.converged as u8).to_string(),
                    ])
                    .map_err(err)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::File {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Anything that can give per-person-year rates for every code at a given
/// sex and integer age.
pub trait RateSource: Sync {
    fn n_codes(&self) -> usize;

    /// Rates for all codes. `None` means the source has nothing for this
    /// sex.
    fn rates_at(&self, sex: Sex, age: i32) -> Option<Vec<f64>>;

    /// Whether `age` lies inside the range the source was built on.
    fn supports(&self, sex: Sex, age: i32) -> bool;

    fn describe(&self) -> String;
}

impl RateSource for RateModelFit {
    fn n_codes(&self) -> usize {
        self.n_codes
    }

    fn rates_at(&self, sex: Sex, age: i32) -> Option<Vec<f64>> {
        let fit = self.sex(sex)?;
        Some(
            (0..self.n_codes)
                .map(|n| fit.log_rate(n, age as f64).exp())
                .collect(),
        )
    }

    fn supports(&self, sex: Sex, age: i32) -> bool {
        match self.sex(sex).and_then(|f| f.basis.as_ref()) {
            Some(b) => b.contains(age as f64),
            None => true,
        }
    }

    fn describe(&self) -> String {
        let df = self
            .by_sex
            .iter()
            .flatten()
            .find_map(|s| s.basis.as_ref().map(|b| b.df()))
            .unwrap_or(0);
        format!("poisson-spline-df{df}")
    }
}

/// Poisson GLM with log link and offset, by iteratively reweighted least
/// squares with step halving.
pub fn poisson_irls(
    design: &DMatrix<f64>,
    y: &[f64],
    offset: &[f64],
    options: &RateModelOptions,
) -> Result<CodeFit> {
    let p = design.ncols();
    let total: f64 = y.iter().sum();
    if total <= 0.0 {
        let mut coefficients = vec![0.0; p];
        coefficients[0] = f64::MIN_POSITIVE.ln();
        return Ok(CodeFit {
            coefficients,
            converged: true,
            deviance: 0.0,
            iterations: 0,
            deviance_trace: vec![0.0],
        });
    }

    let eval = |beta: &DVector<f64>| -> (Vec<f64>, f64) {
        let eta = design * beta;
        let mu: Vec<f64> = eta
            .iter()
            .zip(offset)
            .map(|(e, o)| (e + o).min(700.0).exp())
            .collect();
        (mu.clone(), poisson_deviance(y, &mu))
    };

    let mut mu: Vec<f64> = y.iter().map(|&v| v + 0.1).collect();
    let mut eta_no_offset: Vec<f64> = mu.iter().zip(offset).map(|(m, o)| m.ln() - o).collect();
    let mut beta: Option<DVector<f64>> = None;
    let mut deviance = f64::INFINITY;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=options.max_iter {
        iterations = iter;
        let mut xtwx = DMatrix::<f64>::zeros(p, p);
        let mut xtwz = DVector::<f64>::zeros(p);
        for i in 0..design.nrows() {
            let w = mu[i];
            let z = eta_no_offset[i] + (y[i] - mu[i]) / mu[i];
            let row = design.row(i);
            for a in 0..p {
                xtwz[a] += w * row[a] * z;
                for b in 0..p {
                    xtwx[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            xtwx[(a, a)] += options.ridge;
        }
        let chol = xtwx.cholesky().ok_or_else(|| {
            Error::Numerical("rank-deficient rate-model design after ridge jitter".into())
        })?;
        let proposal = chol.solve(&xtwz);

        let (mut new_beta, (mut new_mu, mut new_dev)) = (proposal.clone(), eval(&proposal));
        if let Some(prev) = &beta {
            if (&proposal - prev).amax() < POLISH_STEP {
                // deviance is flat to rounding here but the score is not;
                // the undamped Newton step is safe this close
                beta = Some(proposal);
                deviance = new_dev;
                trace.push(deviance);
                converged = true;
                break;
            }
            let mut halvings = 0;
            while !(new_dev <= deviance) && halvings < 40 {
                halvings += 1;
                new_beta = prev + (&proposal - prev) * 0.5f64.powi(halvings);
                (new_mu, new_dev) = eval(&new_beta);
            }
            if !(new_dev <= deviance) {
                // no descent direction left at working precision
                converged = true;
                break;
            }
        }
        let change = (deviance - new_dev).abs() / (new_dev.abs() + 0.1);
        let had_prev = beta.is_some();
        eta_no_offset = (design * &new_beta).iter().copied().collect();
        mu = new_mu;
        deviance = new_dev;
        trace.push(deviance);
        beta = Some(new_beta);
        if had_prev && change < options.tol {
            converged = true;
            break;
        }
    }
    let beta = beta.expect("at least one IRLS iteration");
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::Numerical(
            "non-finite rate-model coefficients".into(),
        ));
    }
    Ok(CodeFit {
        coefficients: beta.iter().copied().collect(),
        converged,
        deviance: deviance.max(0.0),
        iterations,
        deviance_trace: trace,
    })
}

pub fn poisson_deviance(y: &[f64], mu: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .map(|(&yi, &mi)| {
            if yi > 0.0 {
                yi * (yi / mi).ln() - (yi - mi)
            } else {
                mi
            }
        })
        .sum::<f64>()
}

/// Fit one Poisson model per (disease, sex) with log person-years as offset.
/// Sexes without exposure are skipped.
pub fn fit_rate_model(bins: &ExposureBins, options: &RateModelOptions) -> Result<RateModelFit> {
    let mut by_sex: [Option<SexFit>; 2] = [None, None];
    for sex in Sex::ALL {
        let rows: Vec<_> = bins.for_sex(sex).filter(|b| b.person_years > 0.0).collect();
        if rows.is_empty() {
            continue;
        }
        let basis = if options.df > 0 && rows.len() > options.df {
            let ages: Vec<(f64, f64)> = rows
                .iter()
                .map(|b| (b.age as f64, b.person_years))
                .collect();
            Some(SplineBasis::from_weighted_ages(&ages, options.df)?)
        } else {
            log::warn!(
                "sex {sex}: {} age bins, need more than {} for the spline; fitting intercept only",
                rows.len(),
                options.df
            );
            None
        };
        let p = 1 + basis.as_ref().map_or(0, |b| b.df());
        let mut design = DMatrix::<f64>::zeros(rows.len(), p);
        for (i, b) in rows.iter().enumerate() {
            design[(i, 0)] = 1.0;
            if let Some(basis) = &basis {
                for (j, v) in basis.eval(b.age as f64).into_iter().enumerate() {
                    design[(i, j + 1)] = v;
                }
            }
        }
        let offset: Vec<f64> = rows.iter().map(|b| b.person_years.ln()).collect();
        let codes = (0..bins.n_codes)
            .into_par_iter()
            .map(|n| {
                let y: Vec<f64> = rows.iter().map(|b| b.counts[n]).collect();
                poisson_irls(&design, &y, &offset, options)
            })
            .collect::<Result<Vec<_>>>()?;
        for (n, c) in codes.iter().enumerate() {
            if !c.converged {
                log::warn!("rate model for code index {n}, sex {sex} did not converge");
            }
        }
        by_sex[sex.index()] = Some(SexFit { basis, codes });
    }
    if by_sex.iter().all(Option::is_none) {
        return Err(Error::Data("no exposure to fit a rate model on".into()));
    }
    Ok(RateModelFit {
        by_sex,
        n_codes: bins.n_codes,
    })
}

/// External per-person-year rates keyed by `(code, sex, age)`. Lookups for
/// ages outside the table use the nearest tabulated age.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateTable {
    n_codes: usize,
    rates: HashMap<(usize, Sex), BTreeMap<i32, f64>>,
}

impl RateTable {
    pub fn new(n_codes: usize) -> Self {
        Self {
            n_codes,
            rates: HashMap::new(),
        }
    }

    pub fn insert(&mut self, code: usize, sex: Sex, age: i32, rate: f64) {
        self.rates.entry((code, sex)).or_default().insert(age, rate);
    }

    pub fn get(&self, code: usize, sex: Sex, age: i32) -> Option<f64> {
        let ages = self.rates.get(&(code, sex))?;
        if let Some(r) = ages.get(&age) {
            return Some(*r);
        }
        let below = ages.range(..age).next_back();
        let above = ages.range(age..).next();
        match (below, above) {
            (Some(b), Some(a)) => Some(if age - b.0 <= a.0 - age { *b.1 } else { *a.1 }),
            (Some(b), None) => Some(*b.1),
            (None, Some(a)) => Some(*a.1),
            (None, None) => None,
        }
    }

    pub fn load(path: &Path, vocabulary: &DiseaseVocabulary) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::File {
                path: path.into(),
                message: e.to_string(),
            })?;
        let mut table = RateTable::new(vocabulary.len());
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                Error::malformed(path, e.position().map_or(0, |p| p.line()), e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 4 {
                return Err(Error::malformed(
                    path,
                    line,
                    "expected code,sex,age,rate_per_person_year",
                ));
            }
            let code = vocabulary.index_of(&rec[0]).ok_or_else(|| {
                Error::malformed(path, line, format!("unknown code {:?}", &rec[0]))
            })?;
            let sex = Sex::parse(&rec[1])
                .ok_or_else(|| Error::malformed(path, line, "sex must be M or F"))?;
            let age: i32 = rec[2]
                .parse()
                .map_err(|_| Error::malformed(path, line, "age must be an integer"))?;
            let rate: f64 = rec[3]
                .parse()
                .ok()
                .filter(|r: &f64| *r >= 0.0 && r.is_finite())
                .ok_or_else(|| {
                    Error::malformed(path, line, "rate must be a non-negative number")
                })?;
            table.insert(code, sex, age, rate);
        }
        Ok(table)
    }

    pub fn write(&self, vocabulary: &DiseaseVocabulary, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let err = |e: csv::Error| Error::File {
            path: path.into(),
            message: e.to_string(),
        };
        w.write_record(["code", "sex", "age", "rate_per_person_year"])
            .map_err(err)?;
        let mut keys: Vec<_> = self.rates.keys().copied().collect();
        keys.sort();
        for (code, sex) in keys {
            for (age, rate) in &self.rates[&(code, sex)] {
                w.write_record([
                    vocabulary.code(code).to_string(),
                    sex.as_str().to_string(),
                    age.to_string(),
                    rate.to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl RateSource for RateTable {
    fn n_codes(&self) -> usize {
        self.n_codes
    }

    fn rates_at(&self, sex: Sex, age: i32) -> Option<Vec<f64>> {
        (0..self.n_codes).map(|n| self.get(n, sex, age)).collect()
    }

    fn supports(&self, sex: Sex, age: i32) -> bool {
        self.rates
            .get(&(0, sex))
            .is_some_and(|a| a.contains_key(&age))
    }

    fn describe(&self) -> String {
        "rate-table".into()
    }
}

/// Expected diagnosis counts `e[m, n]`, floored at [`EXPECTED_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    values: Array2<f64>,
    pub provenance: String,
}

impl ExpectedCounts {
    pub fn new(mut values: Array2<f64>, provenance: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Data(
                "expected counts must be finite and non-negative".into(),
            ));
        }
        values.mapv_inplace(|v| v.max(EXPECTED_FLOOR));
        Ok(Self {
            values,
            provenance: provenance.into(),
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.values[[m, n]]
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.values.mapv(|v| v * factor), self.provenance.clone())
    }

    /// Rows in the order given; used when a cohort is subset.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: self.values.select(ndarray::Axis(0), rows),
            provenance: self.provenance.clone(),
        }
    }

    /// Dense `patient_id,code,expected` file.
    pub fn write_csv(&self, cohort: &Cohort, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        let err = |e: csv::Error| Error::File {
            path: path.into(),
            message: e.to_string(),
        };
        w.write_record(["patient_id", "code", "expected"])
            .map_err(err)?;
        for (m, p) in cohort.patients().iter().enumerate() {
            for n in 0..cohort.n_codes() {
                w.write_record([
                    p.id.as_str(),
                    cohort.vocabulary().code(n),
                    &self.values[[m, n]].to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(cohort: &Cohort, path: &Path) -> Result<Self> {
        let rows: HashMap<&str, usize> = cohort
            .patients()
            .iter()
            .enumerate()
            .map(|(m, p)| (p.id.as_str(), m))
            .collect();
        let mut values =
            Array2::<f64>::from_elem((cohort.n_patients(), cohort.n_codes()), f64::NAN);
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::File {
                path: path.into(),
                message: e.to_string(),
            })?;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                Error::malformed(path, e.position().map_or(0, |p| p.line()), e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 3 {
                return Err(Error::malformed(
                    path,
                    line,
                    "expected patient_id,code,expected",
                ));
            }
            let m = *rows.get(&rec[0]).ok_or_else(|| {
                Error::malformed(path, line, format!("unknown patient {}", &rec[0]))
            })?;
            let n = cohort
                .vocabulary()
                .index_of(&rec[1])
                .ok_or_else(|| Error::malformed(path, line, format!("unknown code {}", &rec[1])))?;
            values[[m, n]] = rec[2]
                .parse()
                .map_err(|_| Error::malformed(path, line, "expected must be a number"))?;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::File {
                path: path.into(),
                message: "expected counts do not cover every (patient, code) pair".into(),
            });
        }
        Self::new(values, format!("file:{}", path.display()))
    }
}

/// `e[m, n]` = sum over the patient's age bins of rate x person-years.
pub fn predict_expected(source: &dyn RateSource, cohort: &Cohort) -> Result<ExpectedCounts> {
    if source.n_codes() != cohort.n_codes() {
        return Err(Error::Dimension(format!(
            "rate source has {} codes, cohort has {}",
            source.n_codes(),
            cohort.n_codes()
        )));
    }
    let v = cohort.n_codes();
    let mut cache: HashMap<(Sex, i32), Vec<f64>> = HashMap::new();
    let mut values = Array2::<f64>::zeros((cohort.n_patients(), v));
    let mut clamped = 0usize;
    for (m, p) in cohort.patients().iter().enumerate() {
        for (age, py) in follow_up_segments(p.age_at_entry, p.followup_years) {
            if !cache.contains_key(&(p.sex, age)) {
                if !source.supports(p.sex, age) {
                    clamped += 1;
                }
                let rates = source.rates_at(p.sex, age).ok_or_else(|| {
                    Error::Data(format!(
                        "rate source has no rates for sex {} (patient {})",
                        p.sex, p.id
                    ))
                })?;
                cache.insert((p.sex, age), rates);
            }
            let rates = &cache[&(p.sex, age)];
            for n in 0..v {
                values[[m, n]] += rates[n] * py;
            }
        }
    }
    if clamped > 0 {
        log::warn!(
            "{clamped} (sex, age) cells fell outside the rate model's age range and were clamped"
        );
    }
    ExpectedCounts::new(values, source.describe())
}
