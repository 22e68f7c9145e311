mod args;
mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use comorbid::{Error, ErrorClass};
use serde::de::DeserializeOwned;

use args::{Cli, Command, ReplayArgs};
use commands::Run;
use config::*;
use manifest::{RunManifest, RunStatus, MANIFEST_FILE};

#[derive(Debug)]
enum CliError {
    Core(Error),
    Stage { stage: &'static str, error: Error },
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Stage { stage, error } => write!(f, "stage `{stage}` failed: {error}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let (CliError::Core(e) | CliError::Stage { error: e, .. }) = self;
        match e.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numerical => 4,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Parameter("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Parameter(format!("cannot set up {n} threads: {e}")))?;
    }
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let name = cli.command.name();
    let settings = match cli.command {
        Command::Generate(a) => to_json(&resolve_generate(file.merge(&a, name)?)?)?,
        Command::Rates(a) => to_json(&resolve_rates(file.merge(&a, name)?)?)?,
        Command::Fit(a) => to_json(&resolve_fit(file.merge(&a, name)?)?)?,
        Command::Posterior(a) => to_json(&resolve_posterior(file.merge(&a, name)?)?)?,
        Command::Cluster(a) => to_json(&resolve_cluster(file.merge(&a, name)?)?)?,
        Command::Survive(a) => to_json(&resolve_survive(file.merge(&a, name)?)?)?,
        Command::Eci(a) => to_json(&resolve_eci(file.merge(&a, name)?)?)?,
        Command::Embed(a) => to_json(&resolve_embed(file.merge(&a, name)?)?)?,
        Command::Pipeline(a) => to_json(&resolve_pipeline(file.merge(&a, name)?)?)?,
        Command::Replay(a) => return replay(&a),
    };
    let manifest = execute(name, settings)?;
    println!("{} outputs written; manifest in {}", manifest.outputs.len(), out_dir(&manifest.config)?.display());
    Ok(())
}

fn out_dir(config: &serde_json::Value) -> Result<PathBuf, Error> {
    config
        .get("out")
        .and_then(|v| v.as_str())
        .map(PathBuf::from)
        .ok_or_else(|| Error::Parameter("settings have no output directory".into()))
}

fn settings<T: DeserializeOwned>(config: &serde_json::Value, name: &str) -> Result<T, Error> {
    serde_json::from_value(config.clone()).map_err(|e| Error::Parameter(format!("{name} settings: {e}")))
}

/// Run a subcommand from its resolved settings and write the manifest.
fn execute(name: &str, config: serde_json::Value) -> Result<RunManifest, CliError> {
    let out = out_dir(&config)?;
    let mut manifest = RunManifest::new(name, config.clone(), config.get("seed").and_then(|v| v.as_u64()));
    let result: Result<Run, CliError> = match name {
        "generate" => commands::generate(&settings(&config, name)?).map_err(Into::into),
        "rates" => commands::rates(&settings(&config, name)?).map_err(Into::into),
        "fit" => commands::fit(&settings(&config, name)?).map_err(Into::into),
        "posterior" => commands::posterior(&settings(&config, name)?).map_err(Into::into),
        "cluster" => commands::cluster(&settings(&config, name)?).map_err(Into::into),
        "survive" => commands::survive(&settings(&config, name)?).map_err(Into::into),
        "eci" => commands::eci(&settings(&config, name)?).map_err(Into::into),
        "embed" => commands::embed(&settings(&config, name)?).map_err(Into::into),
        "pipeline" => match commands::pipeline(&settings(&config, name)?) {
            Ok(run) => Ok(run),
            Err(failure) => {
                record_failure(&mut manifest, &out, failure.stage, &failure.partial);
                return Err(CliError::Stage {
                    stage: failure.stage,
                    error: failure.error,
                });
            }
        },
        other => return Err(Error::Parameter(format!("cannot run subcommand `{other}`")).into()),
    };
    let run = result?;
    manifest.add_inputs(&run.inputs)?;
    manifest.set_outputs(&out, &run.outputs)?;
    manifest.write(&out)?;
    Ok(manifest)
}

/// Best-effort manifest for a pipeline that stopped part way.
fn record_failure(manifest: &mut RunManifest, out: &Path, stage: &str, partial: &Run) {
    manifest.status = RunStatus::Failed;
    manifest.failed_stage = Some(stage.to_string());
    let inputs: Vec<PathBuf> = partial.inputs.iter().filter(|p| p.exists()).cloned().collect();
    let outputs: Vec<PathBuf> = partial.outputs.iter().filter(|p| p.exists()).cloned().collect();
    let _ = manifest.add_inputs(&inputs);
    let _ = manifest.set_outputs(out, &outputs);
    if out.is_dir() {
        if let Err(e) = manifest.write(out) {
            log::warn!("could not record the failed run: {e}");
        }
    }
}

fn replay(a: &ReplayArgs) -> Result<(), CliError> {
    let old = RunManifest::read(&a.manifest)?;
    if old.status == RunStatus::Failed {
        log::warn!("replaying a run that failed at stage {}", old.failed_stage.as_deref().unwrap_or("?"));
    }
    let changed = old.changed_inputs();
    if !changed.is_empty() {
        let list: Vec<String> = changed.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Data(format!("inputs changed since the run: {}", list.join(", "))).into());
    }
    let mut config = old.config.clone();
    let out = match &a.out {
        Some(dir) => dir.clone(),
        None => a
            .manifest
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    let obj = config
        .as_object_mut()
        .ok_or_else(|| Error::Parameter("manifest config is not a table".into()))?;
    obj.insert("out".into(), serde_json::json!(out));
    if obj.contains_key("force") {
        obj.insert("force".into(), serde_json::json!(true));
    }
    let new = execute(&old.subcommand, config)?;
    let mut differ: Vec<String> = Vec::new();
    for f in &old.outputs {
        match new.outputs.iter().find(|g| g.path == f.path) {
            Some(g) if g.digest == f.digest => {}
            Some(_) => differ.push(f.path.display().to_string()),
            None => differ.push(format!("{} (missing)", f.path.display())),
        }
    }
    for g in &new.outputs {
        if !old.outputs.iter().any(|f| f.path == g.path) {
            differ.push(format!("{} (new)", g.path.display()));
        }
    }
    if !differ.is_empty() {
        return Err(Error::Numerical(format!("replay outputs differ: {}", differ.join(", "))).into());
    }
    println!(
        "replayed {}: {} outputs match ({})",
        old.subcommand,
        new.outputs.len(),
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}
