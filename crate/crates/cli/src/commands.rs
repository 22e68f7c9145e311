//! Subcommand bodies. Each takes resolved settings, writes its outputs and
//! reports the files it read and wrote; manifests are handled by the caller.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use comorbid::cluster::{read_assignments, sweep_subgroups, write_assignments, Algorithm, SubgroupAssignment, SweepOptions};
use comorbid::cohort::generator::{generate_synthetic_cohort, GeneratorConfig, GroundTruth, Preset};
use comorbid::cohort::{bin_exposure, load_cohort, load_vocabulary, write_cohort, write_vocabulary, Cohort};
use comorbid::embed::{export_embedding, tsne, EmbedConfig};
use comorbid::lda::{fit_lda, patient_topic_posterior};
use comorbid::pdm::{fit_pdm, patient_topic_posterior_pdm};
use comorbid::rates::{fit_rate_model, predict_expected, ExpectedCounts, RateModelOptions, RateTable};
use comorbid::stats::{
    eci_profiles, kaplan_meier_by_group, log_rank_test, subgroup_report, write_km_csv, write_km_svg, EciMapping,
    SurvivalSample,
};
use comorbid::topic::{ModelKind, TopicFit};
use comorbid::{Error, Result};
use ndarray::Array2;

use crate::config::*;

pub const DIAGNOSES: &str = "diagnoses.csv";
pub const DEMOGRAPHICS: &str = "demographics.csv";
pub const VOCABULARY: &str = "vocabulary.txt";
pub const ECI_MAPPING: &str = "eci_mapping.csv";

/// Files a stage read and wrote.
#[derive(Debug, Default, Clone)]
pub struct Run {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl Run {
    fn absorb(&mut self, other: Run) {
        self.inputs.extend(other.inputs);
        self.outputs.extend(other.outputs);
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::File {
        path: path.into(),
        message: e.to_string(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::File {
        path: dir.into(),
        message: e.to_string(),
    })
}

/// Refuse to write into a non-empty directory unless forced.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some());
    if occupied && !force {
        return Err(Error::Parameter(format!(
            "{} is not empty; pass --force to overwrite",
            dir.display()
        )));
    }
    create_dir(dir)
}

pub fn load_cohort_dir(dir: &Path) -> Result<(Cohort, Vec<PathBuf>)> {
    let files = [dir.join(VOCABULARY), dir.join(DIAGNOSES), dir.join(DEMOGRAPHICS)];
    let vocab = load_vocabulary(&files[0])?;
    let cohort = load_cohort(&files[1], &files[2], &vocab)?;
    Ok((cohort, files.to_vec()))
}

fn write_long<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(&r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::File {
        path: path.into(),
        message: e.to_string(),
    })
}

fn write_truth(cohort: &Cohort, truth: &GroundTruth, dir: &Path) -> Result<Vec<PathBuf>> {
    create_dir(dir)?;
    let ids: Vec<&str> = cohort.patients().iter().map(|p| p.id.as_str()).collect();
    let vocab = cohort.vocabulary();
    let theta = dir.join("theta.csv");
    let k = truth.theta.ncols();
    write_long(
        &theta,
        ["patient_id", "topic", "weight"],
        (0..ids.len()).flat_map(|m| (0..k).map(move |t| (m, t))).map(|(m, t)| {
            [ids[m].to_string(), t.to_string(), truth.theta[[m, t]].to_string()]
        }),
    )?;
    let phi = dir.join("phi.csv");
    write_long(
        &phi,
        ["topic", "code", "weight"],
        (0..k).flat_map(|t| (0..vocab.len()).map(move |n| (t, n))).map(|(t, n)| {
            [t.to_string(), vocab.code(n).to_string(), truth.phi[[t, n]].to_string()]
        }),
    )?;
    let gamma = dir.join("gamma.csv");
    write_long(
        &gamma,
        ["patient_id", "gamma"],
        ids.iter().zip(&truth.gamma).map(|(id, g)| [id.to_string(), g.to_string()]),
    )?;
    let expected = dir.join("expected.csv");
    truth.expected.write_csv(cohort, &expected)?;
    let rates = dir.join("rates.csv");
    truth.rates.write(vocab, &rates)?;
    Ok(vec![theta, phi, gamma, expected, rates])
}

pub fn generate(s: &GenerateSettings) -> Result<Run> {
    prepare_out(&s.out, s.force)?;
    let base = match &s.preset {
        Some(p) => Preset::parse(p)
            .ok_or_else(|| Error::Parameter(format!("unknown preset {p}")))?
            .config(s.seed),
        None => GeneratorConfig::default(),
    };
    let config = GeneratorConfig {
        n_patients: s.m,
        n_codes: s.v,
        n_clusters: s.k,
        lda_mode: s.lda_mode,
        seed: s.seed,
        ..base
    };
    let (cohort, truth) = generate_synthetic_cohort(&config)?;
    let files = [s.out.join(VOCABULARY), s.out.join(DIAGNOSES), s.out.join(DEMOGRAPHICS), s.out.join(ECI_MAPPING)];
    write_vocabulary(cohort.vocabulary(), &files[0])?;
    write_cohort(&cohort, &files[1], &files[2])?;
    EciMapping::standard(cohort.vocabulary()).write(&files[3], cohort.vocabulary())?;
    let mut outputs = files.to_vec();
    outputs.extend(write_truth(&cohort, &truth, &s.out.join("truth"))?);
    log::info!(
        "generated {} patients x {} codes with {} clusters",
        cohort.n_patients(),
        cohort.n_codes(),
        s.k
    );
    Ok(Run {
        inputs: Vec::new(),
        outputs,
    })
}

pub fn rates(s: &RatesSettings) -> Result<Run> {
    let (cohort, inputs) = load_cohort_dir(&s.cohort)?;
    let mut run = Run {
        inputs,
        outputs: Vec::new(),
    };
    create_dir(&s.out)?;
    let expected = match &s.rates_file {
        Some(path) => {
            run.inputs.push(path.clone());
            predict_expected(&RateTable::load(path, cohort.vocabulary())?, &cohort)?
        }
        None => {
            let options = RateModelOptions {
                df: s.df,
                ..RateModelOptions::default()
            };
            let fit = fit_rate_model(&bin_exposure(&cohort), &options)?;
            if !fit.all_converged() {
                log::warn!("some rate curves did not converge; see rate_fit.csv");
            }
            let path = s.out.join("rate_fit.csv");
            fit.write_csv(cohort.vocabulary(), &path)?;
            run.outputs.push(path);
            predict_expected(&fit, &cohort)?
        }
    };
    let path = s.out.join("expected.csv");
    expected.write_csv(&cohort, &path)?;
    run.outputs.push(path);
    Ok(run)
}

/// Expected counts from a `rates` output directory or a rate table.
fn expected_counts(cohort: &Cohort, rates: Option<&Path>, rates_file: Option<&Path>, run: &mut Run) -> Result<ExpectedCounts> {
    if let Some(dir) = rates {
        let path = dir.join("expected.csv");
        run.inputs.push(path.clone());
        return ExpectedCounts::load_csv(cohort, &path);
    }
    if let Some(path) = rates_file {
        run.inputs.push(path.to_path_buf());
        return predict_expected(&RateTable::load(path, cohort.vocabulary())?, cohort);
    }
    Err(Error::Parameter(
        "the pdm model needs expected counts: run `comorbid rates --cohort <dir> --out <rates-dir>` \
         and pass --rates <rates-dir>, or pass --rates-file <table.csv>"
            .into(),
    ))
}

pub fn fit(s: &FitSettings) -> Result<Run> {
    let (cohort, inputs) = load_cohort_dir(&s.cohort)?;
    let mut run = Run {
        inputs,
        outputs: Vec::new(),
    };
    let config = s.sampler.sampler_config(s.seed);
    let fit = match s.sampler.model() {
        ModelKind::Lda => fit_lda(&cohort, &s.sampler.lda(), &config)?,
        ModelKind::Pdm => {
            let expected = expected_counts(&cohort, s.rates.as_deref(), s.rates_file.as_deref(), &mut run)?;
            fit_pdm(&cohort, &expected, &s.sampler.pdm(), &config)?
        }
    };
    if let Some(acc) = &fit.acceptance {
        for (c, rates) in acc.iter().enumerate() {
            let mean = rates.iter().sum::<f64>() / rates.len() as f64;
            log::info!("chain {c}: mean phi acceptance {mean:.3}");
        }
    }
    create_dir(&s.out)?;
    run.outputs = fit.write_dir(&cohort, &s.out)?;
    Ok(run)
}

/// Fits written by `fit` carry gamma.csv only for the PDM.
pub fn read_fit(cohort: &Cohort, dir: &Path, run: &mut Run) -> Result<TopicFit> {
    let model = if dir.join("gamma.csv").exists() {
        ModelKind::Pdm
    } else {
        ModelKind::Lda
    };
    run.inputs.push(dir.join("theta.csv"));
    run.inputs.push(dir.join("phi.csv"));
    if model == ModelKind::Pdm {
        run.inputs.push(dir.join("gamma.csv"));
    }
    TopicFit::read_dir(model, cohort, dir)
}

pub fn write_posterior(path: &Path, cohort: &Cohort, post: &Array2<f64>) -> Result<()> {
    let mut header = vec!["patient_id".to_string()];
    header.extend((0..post.ncols()).map(|k| format!("topic_{k}")));
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(&header).map_err(csv_err(path))?;
    for (m, p) in cohort.patients().iter().enumerate() {
        let mut rec = vec![p.id.clone()];
        rec.extend(post.row(m).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::File {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn read_posterior(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let k = rdr.headers().map_err(csv_err(path))?.len().saturating_sub(1);
    if k == 0 {
        return Err(Error::Malformed {
            path: path.into(),
            line: 1,
            message: "expected patient_id followed by topic columns".into(),
        });
    }
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != k + 1 {
            return Err(Error::Malformed {
                path: path.into(),
                line,
                message: format!("expected {} fields, found {}", k + 1, rec.len()),
            });
        }
        ids.push(rec[0].to_string());
        for f in rec.iter().skip(1) {
            values.push(f.trim().parse::<f64>().map_err(|_| Error::Malformed {
                path: path.into(),
                line,
                message: format!("`{f}` is not a number"),
            })?);
        }
    }
    let x = Array2::from_shape_vec((ids.len(), k), values).map_err(|e| Error::Dimension(e.to_string()))?;
    Ok((ids, x))
}

pub fn posterior(s: &PosteriorSettings) -> Result<Run> {
    let (cohort, inputs) = load_cohort_dir(&s.cohort)?;
    let mut run = Run {
        inputs,
        outputs: Vec::new(),
    };
    let fit = read_fit(&cohort, &s.fit, &mut run)?;
    let post = match (fit.model, &fit.gamma) {
        (ModelKind::Pdm, Some(gamma)) => {
            let expected = expected_counts(&cohort, s.rates.as_deref(), s.rates_file.as_deref(), &mut run)?;
            patient_topic_posterior_pdm(&fit, &cohort, &expected, gamma)?
        }
        _ => patient_topic_posterior(&fit, &cohort)?,
    };
    create_dir(&s.out)?;
    let path = s.out.join("posterior.csv");
    write_posterior(&path, &cohort, &post)?;
    run.outputs.push(path);
    Ok(run)
}

pub fn cluster(s: &ClusterSettings) -> Result<Run> {
    let (ids, x) = read_posterior(&s.posterior)?;
    let options = SweepOptions {
        algorithms: parse_algorithms(Some(s.algorithms.clone()))?,
        g_range: s.g_min..=s.g_max,
        seed: s.seed,
        birch_threshold: s.birch_threshold,
    };
    let cells = sweep_subgroups(&x, &options);
    create_dir(&s.out)?;
    let ok: Vec<&SubgroupAssignment> = cells.iter().filter_map(|c| c.result.as_ref().ok()).collect();
    let assignments = s.out.join("assignments.csv");
    write_assignments(&assignments, &ids, &ok)?;
    let status = s.out.join("cells.csv");
    write_long(
        &status,
        ["algorithm", "G", "status", "sizes"],
        cells.iter().map(|c| match &c.result {
            Ok(a) => [
                c.algorithm.name().to_string(),
                c.g.to_string(),
                "ok".to_string(),
                a.sizes().iter().map(|n| n.to_string()).collect::<Vec<_>>().join(" "),
            ],
            Err(e) => [c.algorithm.name().to_string(), c.g.to_string(), "failed".to_string(), e.to_string()],
        }),
    )?;
    Ok(Run {
        inputs: vec![s.posterior.clone()],
        outputs: vec![assignments, status],
    })
}

/// Log-rank result for one (algorithm, G) cell; `None` when the test failed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub algorithm: Algorithm,
    pub g: usize,
    pub chi_square: Option<f64>,
    pub df: Option<usize>,
    pub p_value: Option<f64>,
}

pub fn survival_samples(cohort: &Cohort, labels: &[usize]) -> Vec<SurvivalSample> {
    cohort
        .patients()
        .iter()
        .zip(labels)
        .map(|(p, &group)| SurvivalSample {
            time: p.survival_time,
            event: p.event,
            group,
        })
        .collect()
}

/// Log-rank test for every subgrouping, in algorithm then G order.
pub fn p_grid(cohort: &Cohort, assignments: &[SubgroupAssignment]) -> Vec<GridCell> {
    let mut sorted: Vec<&SubgroupAssignment> = assignments.iter().collect();
    sorted.sort_by_key(|a| (a.algorithm, a.g));
    sorted
        .into_iter()
        .map(|a| match log_rank_test(&survival_samples(cohort, &a.labels), a.g) {
            Ok(r) => GridCell {
                algorithm: a.algorithm,
                g: a.g,
                chi_square: Some(r.chi_square),
                df: Some(r.degrees_of_freedom),
                p_value: Some(r.p_value),
            },
            Err(e) => {
                log::warn!("log-rank test for {} G={} failed: {e}", a.algorithm, a.g);
                GridCell {
                    algorithm: a.algorithm,
                    g: a.g,
                    chi_square: None,
                    df: None,
                    p_value: None,
                }
            }
        })
        .collect()
}

/// Smallest p-value; ties go to the smaller G, then to algorithm order.
pub fn select(grid: &[GridCell]) -> Option<&GridCell> {
    grid.iter()
        .filter(|c| c.p_value.is_some_and(|p| !p.is_nan()))
        .min_by(|a, b| {
            a.p_value
                .unwrap()
                .total_cmp(&b.p_value.unwrap())
                .then(a.g.cmp(&b.g))
                .then(a.algorithm.cmp(&b.algorithm))
        })
}

fn fmt_p(p: f64) -> String {
    if p < 1e-3 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

fn grid_text(grid: &[GridCell]) -> String {
    let mut gs: Vec<usize> = grid.iter().map(|c| c.g).collect();
    gs.sort_unstable();
    gs.dedup();
    let mut algs: Vec<Algorithm> = grid.iter().map(|c| c.algorithm).collect();
    algs.sort_unstable();
    algs.dedup();
    let mut out = format!("{:<14}", "log-rank p");
    for g in &gs {
        let _ = write!(out, "{:>11}", format!("G={g}"));
    }
    out.push('\n');
    for a in algs {
        let _ = write!(out, "{:<14}", a.name());
        for &g in &gs {
            let cell = grid.iter().find(|c| c.algorithm == a && c.g == g);
            let text = cell.and_then(|c| c.p_value).map_or_else(|| "-".to_string(), fmt_p);
            let _ = write!(out, "{text:>11}");
        }
        out.push('\n');
    }
    out
}

fn write_km(cohort: &Cohort, a: &SubgroupAssignment, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let samples = survival_samples(cohort, &a.labels);
    let curves = kaplan_meier_by_group(&samples, a.g);
    let horizon = samples.iter().map(|s| s.time).fold(0.0, f64::max);
    let csv = dir.join(format!("{stem}.csv"));
    let svg = dir.join(format!("{stem}.svg"));
    write_km_csv(&csv, &curves)?;
    write_km_svg(&svg, &curves, horizon, &format!("Kaplan-Meier, {} G={}", a.algorithm, a.g))?;
    Ok(vec![csv, svg])
}

pub struct SurvivalOutcome {
    pub run: Run,
    pub selected: Option<(Algorithm, usize)>,
}

pub fn survive_cohort(cohort: &Cohort, assignments: &[SubgroupAssignment], out: &Path) -> Result<SurvivalOutcome> {
    create_dir(out)?;
    let grid = p_grid(cohort, assignments);
    let mut outputs = Vec::new();
    let path = out.join("p_grid.csv");
    write_long(
        &path,
        ["algorithm", "G", "chi_square", "df", "p_value"],
        grid.iter().map(|c| {
            let opt = |v: Option<String>| v.unwrap_or_default();
            [
                c.algorithm.name().to_string(),
                c.g.to_string(),
                opt(c.chi_square.map(|v| v.to_string())),
                opt(c.df.map(|v| v.to_string())),
                opt(c.p_value.map(|v| v.to_string())),
            ]
        }),
    )?;
    outputs.push(path);
    let path = out.join("p_grid.txt");
    fs::write(&path, grid_text(&grid)).map_err(|e| Error::File {
        path: path.clone(),
        message: e.to_string(),
    })?;
    outputs.push(path);

    let find = |alg: Algorithm, g: usize| assignments.iter().find(|a| a.algorithm == alg && a.g == g);
    let selected = select(&grid).map(|c| (c.algorithm, c.g, c.p_value.unwrap()));
    let path = out.join("selection.csv");
    write_long(
        &path,
        ["algorithm", "G", "p_value"],
        selected.iter().map(|(a, g, p)| [a.name().to_string(), g.to_string(), p.to_string()]),
    )?;
    outputs.push(path);
    if let Some((alg, g, p)) = selected {
        log::info!("selected {alg} with G={g} (log-rank p = {})", fmt_p(p));
        outputs.extend(write_km(cohort, find(alg, g).unwrap(), out, "km")?);
    } else {
        log::warn!("no subgrouping produced a log-rank p-value");
    }
    // best cell per algorithm, for side-by-side curves
    let mut algs: Vec<Algorithm> = grid.iter().map(|c| c.algorithm).collect();
    algs.dedup();
    for alg in algs {
        let cells: Vec<GridCell> = grid.iter().filter(|c| c.algorithm == alg).cloned().collect();
        if let Some(best) = select(&cells) {
            outputs.extend(write_km(cohort, find(alg, best.g).unwrap(), out, &format!("km_{}", alg.name()))?);
        }
    }
    Ok(SurvivalOutcome {
        run: Run {
            inputs: Vec::new(),
            outputs,
        },
        selected: selected.map(|(a, g, _)| (a, g)),
    })
}

fn load_assignments(cohort: &Cohort, path: &Path) -> Result<Vec<SubgroupAssignment>> {
    let ids: Vec<String> = cohort.patients().iter().map(|p| p.id.clone()).collect();
    read_assignments(path, &ids)
}

pub fn survive(s: &SurviveSettings) -> Result<Run> {
    let (cohort, mut inputs) = load_cohort_dir(&s.cohort)?;
    let assignments = load_assignments(&cohort, &s.assignments)?;
    inputs.push(s.assignments.clone());
    let mut outcome = survive_cohort(&cohort, &assignments, &s.out)?;
    outcome.run.inputs = inputs;
    Ok(outcome.run)
}

/// The explicit mapping, else the cohort's eci_mapping.csv, else the
/// built-in table.
fn eci_mapping(cohort: &Cohort, cohort_dir: &Path, explicit: Option<&Path>, run: &mut Run) -> Result<EciMapping> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| cohort_dir.join(ECI_MAPPING));
    if path.exists() {
        run.inputs.push(path.clone());
        EciMapping::load(&path, cohort.vocabulary())
    } else {
        log::warn!("no ECI mapping found; using the built-in table");
        Ok(EciMapping::standard(cohort.vocabulary()))
    }
}

pub fn report(cohort: &Cohort, mapping: &EciMapping, a: &SubgroupAssignment, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let profiles = eci_profiles(cohort, mapping);
    let report = subgroup_report(cohort, &a.labels, &profiles)?;
    let csv = out.join("report.csv");
    report.write_csv(&csv)?;
    let txt = out.join("report.txt");
    let text = format!("Subgroups from {} with G={}\n\n{}", a.algorithm, a.g, report.to_text());
    fs::write(&txt, text).map_err(|e| Error::File {
        path: txt.clone(),
        message: e.to_string(),
    })?;
    Ok(vec![csv, txt])
}

pub fn eci(s: &EciSettings) -> Result<Run> {
    let (cohort, inputs) = load_cohort_dir(&s.cohort)?;
    let mut run = Run {
        inputs,
        outputs: Vec::new(),
    };
    let mapping = eci_mapping(&cohort, &s.cohort, s.mapping.as_deref(), &mut run)?;
    let assignments = load_assignments(&cohort, &s.assignments)?;
    run.inputs.push(s.assignments.clone());
    let (alg, g) = match (&s.algorithm, s.g) {
        (Some(name), Some(g)) => (Algorithm::parse(name).expect("validated"), g),
        _ => {
            let grid = p_grid(&cohort, &assignments);
            let c = select(&grid).ok_or_else(|| Error::Data("no subgrouping has a log-rank p-value".into()))?;
            (c.algorithm, c.g)
        }
    };
    let a = assignments
        .iter()
        .find(|a| a.algorithm == alg && a.g == g)
        .ok_or_else(|| Error::Data(format!("{} has no {alg} subgrouping with G={g}", s.assignments.display())))?;
    run.outputs = report(&cohort, &mapping, a, &s.out)?;
    Ok(run)
}

pub fn embed_fit(fit: &TopicFit, cohort: &Cohort, perplexity: f64, iterations: usize, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let rows = fit.phi.t().to_owned();
    let config = EmbedConfig {
        perplexity,
        iterations,
        seed,
        ..EmbedConfig::default()
    };
    let e = tsne(&rows, &config)?;
    log::info!("t-SNE final KL divergence {:.4}", e.kl);
    let labels: Vec<String> = cohort.vocabulary().codes().to_vec();
    let csv = out.join("embedding.csv");
    let svg = out.join("embedding.svg");
    export_embedding(&e, &labels, &csv, &svg)?;
    let trace = out.join("kl_trace.csv");
    write_long(
        &trace,
        ["iteration", "kl"],
        e.kl_trace.iter().map(|(i, kl)| [i.to_string(), kl.to_string()]),
    )?;
    Ok(vec![csv, svg, trace])
}

pub fn embed(s: &EmbedSettings) -> Result<Run> {
    let (cohort, inputs) = load_cohort_dir(&s.cohort)?;
    let mut run = Run {
        inputs,
        outputs: Vec::new(),
    };
    let fit = read_fit(&cohort, &s.fit, &mut run)?;
    let perplexity = s.perplexity.unwrap_or(default_perplexity(fit.model));
    run.outputs = embed_fit(&fit, &cohort, perplexity, s.tsne_iters, s.seed, &s.out)?;
    Ok(run)
}

/// Stage failure inside the pipeline, with whatever had been written.
pub struct StageFailure {
    pub stage: &'static str,
    pub error: Error,
    pub partial: Run,
}

pub fn pipeline(s: &PipelineSettings) -> std::result::Result<Run, StageFailure> {
    use comorbid::rng::derive_seed;

    let mut run = Run::default();
    macro_rules! stage {
        ($name:expr, $body:expr) => {
            match $body {
                Ok(v) => v,
                Err(error) => {
                    return Err(StageFailure {
                        stage: $name,
                        error,
                        partial: run,
                    })
                }
            }
        };
    }

    stage!("setup", prepare_out(&s.out, s.force));
    let cohort_dir = match (&s.cohort, &s.preset) {
        (Some(dir), _) => dir.clone(),
        (None, Some(preset)) => {
            let dir = s.out.join("cohort");
            let settings = stage!(
                "generate",
                resolve_generate(crate::args::GenerateArgs {
                    out: Some(dir.clone()),
                    preset: Some(preset.clone()),
                    seed: Some(s.seed),
                    force: Some(true),
                    ..Default::default()
                })
            );
            run.absorb(stage!("generate", generate(&settings)));
            dir
        }
        (None, None) => unreachable!("validated at resolution"),
    };
    let (cohort, inputs) = stage!("load", load_cohort_dir(&cohort_dir));
    if s.cohort.is_some() {
        run.inputs.extend(inputs);
    }

    let rates_dir = s.out.join("rates");
    run.absorb(stage!(
        "rates",
        rates(&RatesSettings {
            cohort: cohort_dir.clone(),
            out: rates_dir.clone(),
            df: s.df,
            rates_file: s.rates_file.clone(),
        })
    ));
    let expected = stage!("rates", ExpectedCounts::load_csv(&cohort, &rates_dir.join("expected.csv")));

    let fit_dir = s.out.join("fit");
    let config = s.sampler.sampler_config(derive_seed(s.seed, 1));
    let fit = stage!(
        "fit",
        match s.sampler.model() {
            ModelKind::Lda => fit_lda(&cohort, &s.sampler.lda(), &config),
            ModelKind::Pdm => fit_pdm(&cohort, &expected, &s.sampler.pdm(), &config),
        }
    );
    stage!("fit", create_dir(&fit_dir));
    run.outputs.extend(stage!("fit", fit.write_dir(&cohort, &fit_dir)));

    let post = stage!(
        "posterior",
        match (&fit.gamma, fit.model) {
            (Some(gamma), ModelKind::Pdm) => patient_topic_posterior_pdm(&fit, &cohort, &expected, gamma),
            _ => patient_topic_posterior(&fit, &cohort),
        }
    );
    let post_path = s.out.join("posterior").join("posterior.csv");
    stage!("posterior", create_dir(&s.out.join("posterior")));
    stage!("posterior", write_posterior(&post_path, &cohort, &post));
    run.outputs.push(post_path.clone());

    run.absorb(stage!(
        "cluster",
        cluster(&ClusterSettings {
            posterior: post_path.clone(),
            out: s.out.join("cluster"),
            algorithms: s.algorithms.clone(),
            g_min: s.g_min,
            g_max: s.g_max,
            seed: derive_seed(s.seed, 2),
            birch_threshold: None,
        })
    ));
    run.inputs.retain(|p| p != &post_path);
    let assignments = stage!("cluster", load_assignments(&cohort, &s.out.join("cluster").join("assignments.csv")));

    let outcome = stage!("survive", survive_cohort(&cohort, &assignments, &s.out.join("survival")));
    run.absorb(outcome.run);

    if let Some((alg, g)) = outcome.selected {
        let mut tmp = Run::default();
        let mapping = stage!("eci", eci_mapping(&cohort, &cohort_dir, s.mapping.as_deref(), &mut tmp));
        if s.cohort.is_some() || s.mapping.is_some() {
            run.inputs.extend(tmp.inputs);
        }
        let a = assignments.iter().find(|a| a.algorithm == alg && a.g == g).unwrap();
        run.outputs.extend(stage!("eci", report(&cohort, &mapping, a, &s.out.join("report"))));
    }

    run.outputs.extend(stage!(
        "embed",
        embed_fit(&fit, &cohort, s.perplexity, s.tsne_iters, derive_seed(s.seed, 3), &s.out.join("embedding"))
    ));
    run.inputs.sort();
    run.inputs.dedup();
    Ok(run)
}
