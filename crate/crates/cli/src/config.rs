//! Config-file merging and the resolved settings recorded in manifests.

use std::path::{Path, PathBuf};

use comorbid::cluster::Algorithm;
use comorbid::lda::LdaHyperparams;
use comorbid::pdm::{LikelihoodScope, PdmHyperparams};
use comorbid::topic::{ModelKind, SamplerConfig};
use comorbid::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::*;

/// Parsed settings file: top-level keys apply to every subcommand that
/// has them, `[section]` tables only to that subcommand.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    table: toml::Table,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::File {
            path: path.into(),
            message: e.to_string(),
        })?;
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start].matches('\n').count() as u64 + 1);
            Error::Malformed {
                path: path.into(),
                line,
                message: e.message().to_string(),
            }
        })?;
        Ok(Self { table })
    }

    /// Fill every unset field of `args` from the file.
    pub fn merge<T: Serialize + DeserializeOwned>(&self, args: &T, section: &str) -> Result<T> {
        let serde_json::Value::Object(mut map) = to_json(args)? else {
            unreachable!("argument structs serialise to objects")
        };
        if let Some(toml::Value::Table(t)) = self.table.get(section) {
            for (key, value) in t {
                let key = key.replace('-', "_");
                match map.get_mut(&key) {
                    Some(slot) if slot.is_null() => *slot = to_json(value)?,
                    Some(_) => {}
                    None => {
                        return Err(Error::Parameter(format!(
                            "unknown setting `{key}` in [{section}]"
                        )))
                    }
                }
            }
        }
        for (key, value) in &self.table {
            if value.is_table() {
                continue;
            }
            if let Some(slot) = map.get_mut(&key.replace('-', "_")) {
                if slot.is_null() {
                    *slot = to_json(value)?;
                }
            }
        }
        serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::Parameter(format!("[{section}] settings: {e}")))
    }
}

pub fn to_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Parameter(format!("cannot encode settings: {e}")))
}

fn require<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::Parameter(format!("--{flag} is required (flag or config file)")))
}

/// Absolute form of an input path, which must exist.
fn existing(path: PathBuf, what: &str) -> Result<PathBuf> {
    if !path.exists() {
        return Err(Error::Parameter(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    std::path::absolute(&path).map_err(|e| Error::File {
        path,
        message: e.to_string(),
    })
}

fn existing_opt(path: Option<PathBuf>, what: &str) -> Result<Option<PathBuf>> {
    path.map(|p| existing(p, what)).transpose()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSettings {
    pub out: PathBuf,
    pub preset: Option<String>,
    pub m: usize,
    pub v: usize,
    pub k: usize,
    pub seed: u64,
    pub lda_mode: bool,
    pub force: bool,
}

pub fn resolve_generate(a: GenerateArgs) -> Result<GenerateSettings> {
    let seed = require(a.seed, "seed")?;
    let (m, v, k) = match &a.preset {
        Some(p) => {
            let preset = comorbid::cohort::generator::Preset::parse(p)
                .ok_or_else(|| Error::Parameter(format!("unknown preset {p}")))?;
            let c = preset.config(seed);
            (c.n_patients, c.n_codes, c.n_clusters)
        }
        None => (300, 50, 5),
    };
    Ok(GenerateSettings {
        out: require(a.out, "out")?,
        preset: a.preset,
        m: a.m.unwrap_or(m),
        v: a.v.unwrap_or(v),
        k: a.k.unwrap_or(k),
        seed,
        lda_mode: a.lda_mode.unwrap_or(false),
        force: a.force.unwrap_or(false),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesSettings {
    pub cohort: PathBuf,
    pub out: PathBuf,
    pub df: usize,
    pub rates_file: Option<PathBuf>,
}

pub fn resolve_rates(a: RatesArgs) -> Result<RatesSettings> {
    Ok(RatesSettings {
        cohort: existing(require(a.cohort, "cohort")?, "cohort directory")?,
        out: require(a.out, "out")?,
        df: a.df.unwrap_or(4),
        rates_file: existing_opt(a.rates_file, "rates file")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub model: String,
    pub k: usize,
    pub chains: usize,
    pub burnin: usize,
    pub samples: usize,
    pub thin: usize,
    pub alpha: f64,
    pub beta: f64,
    pub scope: String,
    pub phi_steps: usize,
}

impl SamplerSettings {
    pub fn model(&self) -> ModelKind {
        ModelKind::parse(&self.model).expect("validated at resolution")
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            chains: self.chains,
            burn_in: self.burnin,
            samples: self.samples,
            thin: self.thin,
            seed,
        }
    }

    pub fn lda(&self) -> LdaHyperparams {
        LdaHyperparams {
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn pdm(&self) -> PdmHyperparams {
        PdmHyperparams {
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
            phi_steps: self.phi_steps,
            scope: LikelihoodScope::parse(&self.scope).expect("validated at resolution"),
            ..PdmHyperparams::default()
        }
    }
}

pub fn resolve_sampler(a: SamplerArgs) -> Result<SamplerSettings> {
    let model_name = a.model.unwrap_or_else(|| "pdm".into());
    let model = ModelKind::parse(&model_name)
        .ok_or_else(|| Error::Parameter(format!("--model must be lda or pdm, got {model_name}")))?;
    let k = a.k.unwrap_or(20);
    if k == 0 {
        return Err(Error::Parameter("--k must be at least 1".into()));
    }
    let (alpha, beta) = match model {
        ModelKind::Lda => {
            let h = LdaHyperparams::with_topics(k);
            (h.alpha, h.beta)
        }
        ModelKind::Pdm => {
            let h = PdmHyperparams::default();
            (h.alpha, h.beta)
        }
    };
    let scope_name = a.scope.unwrap_or_else(|| LikelihoodScope::default().name().into());
    let scope = LikelihoodScope::parse(&scope_name).ok_or_else(|| {
        Error::Parameter(format!("--scope must be diagnosed or all-pairs, got {scope_name}"))
    })?;
    let defaults = SamplerConfig::default();
    let s = SamplerSettings {
        model: model.to_string(),
        k,
        chains: a.chains.unwrap_or(defaults.chains),
        burnin: a.burnin.unwrap_or(defaults.burn_in),
        samples: a.samples.unwrap_or(defaults.samples),
        thin: a.thin.unwrap_or(defaults.thin),
        alpha: a.alpha.unwrap_or(alpha),
        beta: a.beta.unwrap_or(beta),
        scope: scope.name().into(),
        phi_steps: a.phi_steps.unwrap_or(PdmHyperparams::default().phi_steps),
    };
    s.sampler_config(0).validate()?;
    match model {
        ModelKind::Lda => s.lda().validate()?,
        ModelKind::Pdm => s.pdm().validate()?,
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub cohort: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub rates: Option<PathBuf>,
    pub rates_file: Option<PathBuf>,
    #[serde(flatten)]
    pub sampler: SamplerSettings,
}

pub fn resolve_fit(a: FitArgs) -> Result<FitSettings> {
    Ok(FitSettings {
        cohort: existing(require(a.cohort, "cohort")?, "cohort directory")?,
        out: require(a.out, "out")?,
        seed: require(a.seed, "seed")?,
        rates: existing_opt(a.rates, "rates directory")?,
        rates_file: existing_opt(a.rates_file, "rates file")?,
        sampler: resolve_sampler(a.sampler)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSettings {
    pub cohort: PathBuf,
    pub fit: PathBuf,
    pub rates: Option<PathBuf>,
    pub rates_file: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn resolve_posterior(a: PosteriorArgs) -> Result<PosteriorSettings> {
    Ok(PosteriorSettings {
        cohort: existing(require(a.cohort, "cohort")?, "cohort directory")?,
        fit: existing(require(a.fit, "fit")?, "fit directory")?,
        rates: existing_opt(a.rates, "rates directory")?,
        rates_file: existing_opt(a.rates_file, "rates file")?,
        out: require(a.out, "out")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSettings {
    pub posterior: PathBuf,
    pub out: PathBuf,
    pub algorithms: Vec<String>,
    pub g_min: usize,
    pub g_max: usize,
    pub seed: u64,
    pub birch_threshold: Option<f64>,
}

pub fn parse_algorithms(names: Option<Vec<String>>) -> Result<Vec<Algorithm>> {
    let Some(names) = names else {
        return Ok(Algorithm::ALL.to_vec());
    };
    let mut out = Vec::new();
    for n in names {
        let a = Algorithm::parse(n.trim())
            .ok_or_else(|| Error::Parameter(format!("unknown clustering algorithm {n}")))?;
        if !out.contains(&a) {
            out.push(a);
        }
    }
    if out.is_empty() {
        return Err(Error::Parameter("no clustering algorithm selected".into()));
    }
    Ok(out)
}

fn g_range(g_min: Option<usize>, g_max: Option<usize>) -> Result<(usize, usize)> {
    let (lo, hi) = (g_min.unwrap_or(2), g_max.unwrap_or(6));
    if lo == 0 || lo > hi {
        return Err(Error::Parameter(format!(
            "need 1 <= g_min <= g_max, got {lo} and {hi}"
        )));
    }
    Ok((lo, hi))
}

pub fn resolve_cluster(a: ClusterArgs) -> Result<ClusterSettings> {
    let (g_min, g_max) = g_range(a.g_min, a.g_max)?;
    Ok(ClusterSettings {
        posterior: existing(require(a.posterior, "posterior")?, "posterior file")?,
        out: require(a.out, "out")?,
        algorithms: parse_algorithms(a.algorithms)?
            .iter()
            .map(|a| a.name().to_string())
            .collect(),
        g_min,
        g_max,
        seed: a.seed.unwrap_or(1),
        birch_threshold: a.birch_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurviveSettings {
    pub cohort: PathBuf,
    pub assignments: PathBuf,
    pub out: PathBuf,
}

pub fn resolve_survive(a: SurviveArgs) -> Result<SurviveSettings> {
    Ok(SurviveSettings {
        cohort: existing(require(a.cohort, "cohort")?, "cohort directory")?,
        assignments: existing(require(a.assignments, "assignments")?, "assignments file")?,
        out: require(a.out, "out")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EciSettings {
    pub cohort: PathBuf,
    pub assignments: PathBuf,
    pub algorithm: Option<String>,
    pub g: Option<usize>,
    pub mapping: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn resolve_eci(a: EciArgs) -> Result<EciSettings> {
    if a.algorithm.is_some() != a.g.is_some() {
        return Err(Error::Parameter(
            "--algorithm and --g must be given together".into(),
        ));
    }
    if let Some(n) = &a.algorithm {
        parse_algorithms(Some(vec![n.clone()]))?;
    }
    Ok(EciSettings {
        cohort: existing(require(a.cohort, "cohort")?, "cohort directory")?,
        assignments: existing(require(a.assignments, "assignments")?, "assignments file")?,
        algorithm: a.algorithm,
        g: a.g,
        mapping: existing_opt(a.mapping, "ECI mapping")?,
        out: require(a.out, "out")?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedSettings {
    pub cohort: PathBuf,
    pub fit: PathBuf,
    pub out: PathBuf,
    /// `None` picks the model default when the fit is read.
    pub perplexity: Option<f64>,
    pub tsne_iters: usize,
    pub seed: u64,
}

pub fn default_perplexity(model: ModelKind) -> f64 {
    match model {
        ModelKind::Pdm => 10.0,
        ModelKind::Lda => 20.0,
    }
}

pub fn resolve_embed(a: EmbedArgs) -> Result<EmbedSettings> {
    Ok(EmbedSettings {
        cohort: existing(require(a.cohort, "cohort")?, "cohort directory")?,
        fit: existing(require(a.fit, "fit")?, "fit directory")?,
        out: require(a.out, "out")?,
        perplexity: a.perplexity,
        tsne_iters: a.tsne_iters.unwrap_or(5000),
        seed: a.seed.unwrap_or(1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub cohort: Option<PathBuf>,
    pub preset: Option<String>,
    pub out: PathBuf,
    pub seed: u64,
    pub rates_file: Option<PathBuf>,
    pub df: usize,
    #[serde(flatten)]
    pub sampler: SamplerSettings,
    pub algorithms: Vec<String>,
    pub g_min: usize,
    pub g_max: usize,
    pub mapping: Option<PathBuf>,
    pub perplexity: f64,
    pub tsne_iters: usize,
    pub force: bool,
}

pub fn resolve_pipeline(a: PipelineArgs) -> Result<PipelineSettings> {
    if a.cohort.is_some() == a.preset.is_some() {
        return Err(Error::Parameter(
            "give exactly one of --cohort and --preset".into(),
        ));
    }
    let (g_min, g_max) = g_range(a.g_min, a.g_max)?;
    let sampler = resolve_sampler(a.sampler)?;
    Ok(PipelineSettings {
        cohort: existing_opt(a.cohort, "cohort directory")?,
        preset: a.preset,
        out: require(a.out, "out")?,
        seed: require(a.seed, "seed")?,
        rates_file: existing_opt(a.rates_file, "rates file")?,
        df: a.df.unwrap_or(4),
        perplexity: a.perplexity.unwrap_or(default_perplexity(sampler.model())),
        sampler,
        algorithms: parse_algorithms(a.algorithms)?
            .iter()
            .map(|a| a.name().to_string())
            .collect(),
        g_min,
        g_max,
        mapping: existing_opt(a.mapping, "ECI mapping")?,
        tsne_iters: a.tsne_iters.unwrap_or(5000),
        force: a.force.unwrap_or(false),
    })
}
