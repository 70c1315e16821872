//! Command-line front end: `estimate`, `simulate`, `describe` and `curves`.

use std::ffi::OsString;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::{load_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::estimation::{estimate, render_table, EstimateOptions, EstimationResult};
use crate::reporting::{
    default_groups, describe, render_descriptives, reversion_curves, trajectories, write_curves, write_descriptives,
    write_trajectories, CurveGroup,
};
use crate::synthesis::{simulate_dataset, ScenarioSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "deliberate", version, about = "Ordered-logit panel models of opinion change over workshop series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed of the draws and of simulation.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of simulation draws per individual.
    #[arg(long)]
    pub draws: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DataPaths {
    #[arg(long)]
    pub ratings: PathBuf,
    #[arg(long)]
    pub individuals: PathBuf,
    #[arg(long)]
    pub schedule: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Recovery,
    Table3,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the model by simulated maximum likelihood.
    Estimate {
        #[command(flatten)]
        data: DataPaths,
        /// Model configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// Keep individuals missing a beginning or end measurement.
        #[arg(long)]
        keep_incomplete: bool,
        /// Pin every active standard deviation at this value.
        #[arg(long)]
        fix_sigmas: Option<f64>,
        /// Reuse or create a binary draw cache at this path.
        #[arg(long)]
        draw_cache: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
        /// Use finite-difference gradients instead of the analytic gradient.
        #[arg(long)]
        numeric_gradient: bool,
    },
    /// Simulate a complete panel from known parameters.
    Simulate {
        /// Scenario file (TOML).
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        scenario: Option<PathBuf>,
        /// Built-in scenario.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Number of individuals for a preset.
        #[arg(long, default_value_t = 500)]
        individuals: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Descriptive table and trajectory means.
    Describe {
        #[command(flatten)]
        data: DataPaths,
        #[command(flatten)]
        common: Common,
    },
    /// Reversion curves from an estimation result.
    Curves {
        /// `estimates.json` written by `estimate`.
        #[arg(long)]
        result: PathBuf,
        /// Group definitions (TOML, `[[groups]]` tables); one group per covariate level when omitted.
        #[arg(long)]
        groups: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        steps_per_day: usize,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Estimate { common, .. }
            | Command::Simulate { common, .. }
            | Command::Describe { common, .. }
            | Command::Curves { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Estimate { .. } => "estimate",
            Command::Simulate { .. } => "simulate",
            Command::Describe { .. } => "describe",
            Command::Curves { .. } => "curves",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub converged: bool,
    pub stop_reason: String,
    pub iterations: usize,
    pub loglik: f64,
    pub gradient_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub inputs: Vec<InputHash>,
    pub seed: Option<u64>,
    pub draws: Option<usize>,
    pub toolkit_version: String,
    pub started: String,
    pub finished: String,
    pub convergence: Option<ConvergenceSummary>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn hashes(paths: &[&Path]) -> Result<Vec<InputHash>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputHash {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))
}

/// Exit code for an error.
pub fn exit_code(error: &Error) -> i32 {
    if error.is_io() {
        EXIT_IO
    } else {
        EXIT_VALIDATION
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command on a dedicated pool of `--threads` workers.
pub fn run(command: &Command) -> Result<i32> {
    let common = command.common();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(Error::invalid("--threads must be at least 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let started = chrono::Utc::now().to_rfc3339();
    let (code, mut manifest) = pool.install(|| match command {
        Command::Estimate { .. } => cmd_estimate(command),
        Command::Simulate { .. } => cmd_simulate(command),
        Command::Describe { .. } => cmd_describe(command),
        Command::Curves { .. } => cmd_curves(command),
    })?;
    manifest.command = command.name().to_string();
    manifest.started = started;
    manifest.finished = chrono::Utc::now().to_rfc3339();
    manifest.toolkit_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.outputs.push(MANIFEST_FILE.to_string());
    write_text(&common.out.join(MANIFEST_FILE), &to_json(&manifest)?)?;
    Ok(code)
}

fn empty_manifest() -> RunManifest {
    RunManifest {
        command: String::new(),
        config_path: None,
        inputs: Vec::new(),
        seed: None,
        draws: None,
        toolkit_version: String::new(),
        started: String::new(),
        finished: String::new(),
        convergence: None,
        outputs: Vec::new(),
    }
}

fn cmd_estimate(command: &Command) -> Result<(i32, RunManifest)> {
    let Command::Estimate {
        data,
        config,
        common,
        keep_incomplete,
        fix_sigmas,
        draw_cache,
        max_iterations,
        numeric_gradient,
    } = command
    else {
        unreachable!("dispatched on variant")
    };
    let mut cfg = match config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(q) = common.draws {
        cfg.draws = q;
    }
    if let Some(v) = fix_sigmas {
        if *v < 0.0 {
            return Err(Error::invalid("--fix-sigmas must be nonnegative"));
        }
        cfg.fix_sigmas(*v);
    }
    cfg.validate()?;
    let dataset = load_dataset(&data.ratings, &data.individuals, &data.schedule)?;
    let mut options = EstimateOptions {
        keep_incomplete: *keep_incomplete,
        analytic_gradient: !numeric_gradient,
        draw_cache: draw_cache.clone(),
        ..EstimateOptions::default()
    };
    if let Some(m) = max_iterations {
        options.settings.max_iterations = *m;
    }
    let result = estimate(&dataset, &cfg, &options)?;
    let outputs = write_estimation_outputs(&result, &common.out)?;

    let mut inputs: Vec<&Path> = vec![&data.ratings, &data.individuals, &data.schedule];
    if let Some(p) = config {
        inputs.push(p);
    }
    let manifest = RunManifest {
        config_path: config.as_ref().map(|p| p.display().to_string()),
        inputs: hashes(&inputs)?,
        seed: Some(cfg.seed),
        draws: Some(result.draws),
        convergence: Some(ConvergenceSummary {
            converged: result.converged,
            stop_reason: format!("{:?}", result.stop_reason),
            iterations: result.iterations,
            loglik: result.loglik,
            gradient_norm: result.gradient_norm,
        }),
        outputs,
        ..empty_manifest()
    };
    let code = if result.converged {
        EXIT_OK
    } else {
        eprintln!("warning: estimation did not converge ({:?}); outputs written", result.stop_reason);
        EXIT_NOT_CONVERGED
    };
    Ok((code, manifest))
}

/// Writes `estimates.json`, `estimates.txt`, `estimates.csv`, `covariance.csv` and `contributions.csv`.
pub fn write_estimation_outputs(result: &EstimationResult, out: &Path) -> Result<Vec<String>> {
    write_text(&out.join("estimates.json"), &result.to_json()?)?;
    write_text(&out.join("estimates.txt"), &render_table(result))?;

    let path = out.join("estimates.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["name", "estimate", "robust_se", "t_ratio", "free"]).map_err(|e| csv_err(&path, e))?;
    for p in &result.parameters {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([p.name.clone(), p.estimate.to_string(), opt(p.robust_se), opt(p.t_ratio), p.free.to_string()])
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("covariance.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    let names: Vec<&str> = result.parameters.iter().map(|p| p.name.as_str()).collect();
    w.write_record(std::iter::once("").chain(names.iter().copied())).map_err(|e| csv_err(&path, e))?;
    for (name, row) in names.iter().zip(&result.robust_covariance) {
        w.write_record(std::iter::once(name.to_string()).chain(row.iter().map(f64::to_string)))
            .map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("contributions.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["individual_id", "loglik"]).map_err(|e| csv_err(&path, e))?;
    for c in &result.per_individual {
        w.write_record([c.individual_id.clone(), c.loglik.to_string()]).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    Ok(["estimates.json", "estimates.txt", "estimates.csv", "covariance.csv", "contributions.csv"]
        .map(String::from)
        .to_vec())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, e.to_string()))
}

fn cmd_simulate(command: &Command) -> Result<(i32, RunManifest)> {
    let Command::Simulate {
        scenario,
        preset,
        individuals,
        common,
    } = command
    else {
        unreachable!("dispatched on variant")
    };
    let seed = common.seed.unwrap_or(crate::config::DEFAULT_SEED);
    let mut spec = match (scenario, preset) {
        (Some(p), _) => ScenarioSpec::load(p)?,
        (None, Some(Preset::Recovery)) => ScenarioSpec::recovery(*individuals, seed),
        (None, Some(Preset::Table3)) => ScenarioSpec::table3_like(*individuals, seed),
        (None, None) => return Err(Error::invalid("give --scenario or --preset")),
    };
    if let Some(s) = common.seed {
        spec.seed = s;
    }
    if let Some(q) = common.draws {
        spec.model.draws = q;
    }
    let sim = simulate_dataset(&spec)?;
    write_dataset(&sim.dataset, &common.out)?;
    write_text(&common.out.join("truth.json"), &to_json(&sim.truth_report())?)?;
    write_text(&common.out.join("scenario.toml"), &spec.to_toml()?)?;
    write_text(&common.out.join("config.toml"), &spec.estimation_config().to_toml()?)?;
    let inputs = match scenario {
        Some(p) => hashes(&[p])?,
        None => Vec::new(),
    };
    Ok((
        EXIT_OK,
        RunManifest {
            config_path: scenario.as_ref().map(|p| p.display().to_string()),
            inputs,
            seed: Some(spec.seed),
            draws: Some(spec.model.draws),
            outputs: ["ratings.csv", "individuals.csv", "schedule.csv", "truth.json", "scenario.toml", "config.toml"]
                .map(String::from)
                .to_vec(),
            ..empty_manifest()
        },
    ))
}

fn cmd_describe(command: &Command) -> Result<(i32, RunManifest)> {
    let Command::Describe { data, common } = command else {
        unreachable!("dispatched on variant")
    };
    let dataset = load_dataset(&data.ratings, &data.individuals, &data.schedule)?;
    let rows = describe(&dataset)?;
    write_descriptives(&rows, &common.out.join("descriptives.csv"))?;
    write_text(&common.out.join("descriptives.txt"), &render_descriptives(&rows))?;
    write_trajectories(&trajectories(&dataset)?, &common.out.join("trajectories.csv"))?;
    Ok((
        EXIT_OK,
        RunManifest {
            inputs: hashes(&[&data.ratings, &data.individuals, &data.schedule])?,
            outputs: ["descriptives.csv", "descriptives.txt", "trajectories.csv"].map(String::from).to_vec(),
            ..empty_manifest()
        },
    ))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupFile {
    #[serde(default)]
    groups: Vec<CurveGroup>,
}

fn cmd_curves(command: &Command) -> Result<(i32, RunManifest)> {
    let Command::Curves {
        result,
        groups,
        steps_per_day,
        common,
    } = command
    else {
        unreachable!("dispatched on variant")
    };
    let text = std::fs::read_to_string(result).map_err(|e| Error::io(result, e))?;
    let estimation = EstimationResult::from_json(&text)?;
    let groups_list = match groups {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<GroupFile>(&text)
                .map_err(|e| Error::Config(e.to_string()))?
                .groups
        }
        None => default_groups(&estimation),
    };
    let curves = reversion_curves(&estimation, &groups_list, *steps_per_day)?;
    write_curves(&curves, &common.out.join("curves.csv"))?;
    #[derive(Serialize)]
    struct CurveMetadata<'a> {
        reversion_columns: &'a [String],
        alpha_columns: &'a [String],
        covariate_codings: &'a [crate::design::CovariateEncoding],
        curves: &'a [crate::reporting::ReversionCurve],
    }
    let meta = CurveMetadata {
        reversion_columns: &estimation.reversion_columns,
        alpha_columns: &estimation.alpha_columns,
        covariate_codings: &estimation.covariate_codings,
        curves: &curves,
    };
    write_text(&common.out.join("curves.json"), &to_json(&meta)?)?;
    let mut inputs: Vec<&Path> = vec![result];
    if let Some(p) = groups {
        inputs.push(p);
    }
    Ok((
        EXIT_OK,
        RunManifest {
            inputs: hashes(&inputs)?,
            outputs: ["curves.csv", "curves.json"].map(String::from).to_vec(),
            ..empty_manifest()
        },
    ))
}
