//! The `reward-calib` command line.
//!
//! Exit codes: 0 on success, 1 on data errors, 2 on usage errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::calibrate::{self, CalibrationConfig, Method};
use crate::dataset::{self, SampleFormat, SampleSet, LENGTH, MARKDOWN};
use crate::error::Error;
use crate::metrics::{self, EvaluateOptions};
use crate::synth::{self, BiasShape, CharDistribution, SynthConfig};

pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "reward-calib", version, about = "Remove characteristic bias from reward model scores")]
pub struct Cli {
    /// Worker threads for LOWESS fits; results do not depend on it.
    #[arg(long, global = true, env = "REWARD_CALIB_THREADS",
          value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Calibrate rewards and write them next to the input records.
    Calibrate(CalibrateArgs),
    /// Compute accuracy, correlations, win rates and overturns.
    Evaluate(EvaluateArgs),
    /// Generate a synthetic dataset with known bias.
    Synth(SynthArgs),
    /// Store text-derived characteristics explicitly on every record.
    Features(FeaturesArgs),
    /// Rank groups by Bradley-Terry win rate against a baseline group.
    Winrate(WinrateArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Input format; defaults to csv for `.csv` files and jsonl otherwise.
    #[arg(long, value_parser = parse_format)]
    pub format: Option<SampleFormat>,
    #[arg(long, default_value = "rc-lwr", value_parser = parse_method)]
    pub method: Method,
    /// Characteristic name(s); more than one calibrates them jointly.
    #[arg(long, value_delimiter = ',', default_value = LENGTH)]
    pub characteristic: Vec<String>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long, default_value_t = 3)]
    pub iters: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
    #[arg(long)]
    pub d: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub min_neighbors: usize,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Also write the fitted LOWESS curve (rc-lwr, one characteristic).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Calibrated samples (records without calibration fields count as raw).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<SampleFormat>,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, default_value = LENGTH)]
    pub characteristic: String,
    /// Group to compute win rates against.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Three variant names; groups named `model@variant` feed gameability.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub variants: Option<Vec<String>>,
    /// JSON object mapping group to an external score.
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub groups: usize,
    #[arg(long, default_value_t = 2)]
    pub responses: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `uniform:LO,HI` or `lognormal:MU,SIGMA`.
    #[arg(long, default_value = "uniform:100,3000")]
    pub c_dist: String,
    /// `linear:SLOPE`, `logistic:SCALE,MIDPOINT`, `sine:AMPLITUDE,PERIOD` or `none`.
    #[arg(long, default_value = "linear:0.002")]
    pub bias: String,
    /// Comma-separated mean true reward per group.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub quality_means: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<SampleFormat>,
    #[arg(long, value_delimiter = ',', default_values = [LENGTH, MARKDOWN])]
    pub characteristics: Vec<String>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct WinrateArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<SampleFormat>,
    #[arg(long)]
    pub baseline: String,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_format(s: &str) -> Result<SampleFormat, String> {
    match s {
        "jsonl" => Ok(SampleFormat::Jsonl),
        "csv" => Ok(SampleFormat::Csv),
        other => Err(format!("unknown format {other:?}, expected jsonl or csv")),
    }
}

/// Error with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let command_line = args
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n.into());
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| dispatch(&cli.command, &command_line)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(command: &Command, command_line: &str) -> CliResult {
    match command {
        Command::Calibrate(a) => cmd_calibrate(a, command_line),
        Command::Evaluate(a) => cmd_evaluate(a, command_line),
        Command::Synth(a) => cmd_synth(a, command_line),
        Command::Features(a) => cmd_features(a, command_line),
        Command::Winrate(a) => cmd_winrate(a, command_line),
    }
}

fn read_samples(path: &Path, format: Option<SampleFormat>) -> CliResult<SampleSet> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let format = format.unwrap_or_else(|| SampleFormat::from_path(path));
    dataset::parse_samples(BufReader::new(file), format)
        .map_err(|e| CliError::from(e).with_path(path))
}

fn read_pairs(path: &Path) -> CliResult<Vec<dataset::PreferencePair>> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    dataset::parse_pairs(BufReader::new(file)).map_err(|e| CliError::from(e).with_path(path))
}

impl CliError {
    fn with_path(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn json_line<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec(value).map_err(Error::from)?;
    out.push(b'\n');
    Ok(out)
}

/// Provenance written next to every output file.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command_line: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub tool_version: &'static str,
    /// Seconds since the Unix epoch; the only field that varies between
    /// identical runs.
    pub timestamp: u64,
}

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

fn digest(path: &Path) -> CliResult<InputDigest> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(InputDigest {
        path: path.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// `out.jsonl` -> `out.jsonl.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn write_manifest<C: Serialize>(
    path: &Path,
    command_line: &str,
    config: &C,
    inputs: &[&Path],
) -> CliResult {
    let manifest = RunManifest {
        command_line: command_line.to_string(),
        config: serde_json::to_value(config).map_err(Error::from)?,
        inputs: inputs.iter().map(|p| digest(p)).collect::<CliResult<_>>()?,
        tool_version: env!("CARGO_PKG_VERSION"),
        timestamp: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(Error::from)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

pub fn cmd_calibrate(a: &CalibrateArgs, command_line: &str) -> CliResult {
    let cfg = CalibrationConfig {
        method: a.method,
        characteristics: a.characteristic.clone(),
        alpha: a.alpha,
        d: a.d,
        min_neighbors: a.min_neighbors,
        gamma: a.gamma,
        bandwidth: a.bandwidth,
        iterations: a.iters,
        delta: a.delta,
    };
    cfg.validate()?;
    if cfg.method == Method::RcMean && cfg.d.is_none() && a.pairs.is_none() {
        return Err(CliError::usage("--method rc-mean needs --d or --pairs"));
    }
    if a.curve.is_some() && (cfg.method != Method::RcLwr || cfg.characteristics.len() != 1) {
        return Err(CliError::usage("--curve needs --method rc-lwr and one characteristic"));
    }

    let set = read_samples(&a.input, a.format)?;
    let pairs = a.pairs.as_deref().map(read_pairs).transpose()?;
    if let Some(pairs) = &pairs {
        set.resolve_pairs(pairs)?;
    }
    let calibrated = calibrate::calibrate(&set, &cfg, pairs.as_deref())?;

    let mut out = Vec::new();
    calibrate::write_calibrated_jsonl(&mut out, &set, &calibrated)?;
    write_file(&a.output, &out)?;
    let mut outputs = vec![a.output.as_path()];
    if let Some(curve_path) = &a.curve {
        let curve = calibrate::lwr_curve(&set, &cfg.characteristics[0], &cfg)?;
        write_file(curve_path, &json_line(&curve)?)?;
        outputs.push(curve_path);
    }

    let mut inputs = vec![a.input.as_path()];
    inputs.extend(a.pairs.as_deref());
    for output in outputs {
        write_manifest(&manifest_path(output), command_line, &cfg, &inputs)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvaluateManifestConfig<'a> {
    characteristic: &'a str,
    baseline: &'a Option<String>,
    variants: &'a Option<Vec<String>>,
}

pub fn cmd_evaluate(a: &EvaluateArgs, command_line: &str) -> CliResult {
    let variants = match a.variants.as_deref() {
        None => None,
        Some([x, y, z]) => Some([x.clone(), y.clone(), z.clone()]),
        Some(_) => return Err(CliError::usage("--variants takes exactly three names")),
    };
    if (variants.is_some() || a.ranking.is_some()) && a.baseline.is_none() {
        return Err(CliError::usage("--variants and --ranking need --baseline"));
    }
    let set = read_samples(&a.input, a.format)?;
    let pairs = read_pairs(&a.pairs)?;
    let external_ranking = match &a.ranking {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let map: BTreeMap<String, f64> = serde_json::from_str(&text)
                .map_err(|e| CliError::from(Error::from(e)).with_path(path))?;
            Some(map)
        }
        None => None,
    };
    let calibrated = calibrate::read_calibrated(&set)?;
    let opts = EvaluateOptions {
        characteristic: Some(a.characteristic.clone()),
        baseline: a.baseline.clone(),
        variants,
        external_ranking,
    };
    let report = metrics::evaluate(&set, &calibrated, &pairs, &opts)?;
    let mut bytes = serde_json::to_vec_pretty(&report).map_err(Error::from)?;
    bytes.push(b'\n');
    emit(a.output.as_deref(), &bytes)?;
    if let Some(out) = &a.output {
        let mut inputs = vec![a.input.as_path(), a.pairs.as_path()];
        inputs.extend(a.ranking.as_deref());
        let config = EvaluateManifestConfig {
            characteristic: &a.characteristic,
            baseline: &a.baseline,
            variants: &a.variants,
        };
        write_manifest(&manifest_path(out), command_line, &config, &inputs)?;
    }
    Ok(())
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> CliResult {
    match output {
        Some(path) => write_file(path, bytes),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| io_error(Path::new("<stdout>"), e)),
    }
}

fn parse_params(params: &str, name: &str, expected: usize) -> Result<Vec<f64>, Error> {
    let values = params
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Error::InvalidConfig(format!("bad {name} parameters {params:?}: {e}")))?;
    if values.len() != expected {
        return Err(Error::InvalidConfig(format!(
            "{name} takes {expected} parameter(s), got {}",
            values.len()
        )));
    }
    Ok(values)
}

impl FromStr for CharDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (kind, params) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "uniform" => {
                let p = parse_params(params, kind, 2)?;
                Ok(CharDistribution::Uniform { lo: p[0], hi: p[1] })
            }
            "lognormal" => {
                let p = parse_params(params, kind, 2)?;
                Ok(CharDistribution::Lognormal {
                    mu: p[0],
                    sigma: p[1],
                })
            }
            other => Err(Error::InvalidConfig(format!("unknown distribution {other:?}"))),
        }
    }
}

impl FromStr for BiasShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let (kind, params) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "none" => Ok(BiasShape::None),
            "linear" => Ok(BiasShape::Linear {
                slope: parse_params(params, kind, 1)?[0],
            }),
            "logistic" => {
                let p = parse_params(params, kind, 2)?;
                Ok(BiasShape::Logistic {
                    scale: p[0],
                    midpoint: p[1],
                })
            }
            "sine" => {
                let p = parse_params(params, kind, 2)?;
                Ok(BiasShape::Sine {
                    amplitude: p[0],
                    period: p[1],
                })
            }
            other => Err(Error::InvalidConfig(format!("unknown bias shape {other:?}"))),
        }
    }
}

pub fn cmd_synth(a: &SynthArgs, command_line: &str) -> CliResult {
    let cfg = SynthConfig {
        n_samples: a.n,
        n_groups: a.groups,
        n_responses: a.responses,
        seed: a.seed,
        c_distribution: a.c_dist.parse()?,
        bias_shape: a.bias.parse()?,
        quality_means: a.quality_means.clone(),
        noise_std: a.noise,
    };
    let (set, pairs, truth) = synth::generate(&cfg)?;

    let mut samples = Vec::new();
    dataset::write_samples_jsonl(&mut samples, set.samples())?;
    let mut pair_bytes = Vec::new();
    dataset::write_pairs_jsonl(&mut pair_bytes, &pairs)?;
    let mut truth_bytes = Vec::new();
    for r in &truth.records {
        truth_bytes.extend(json_line(r)?);
    }
    write_file(&a.out_dir.join("samples.jsonl"), &samples)?;
    write_file(&a.out_dir.join("pairs.jsonl"), &pair_bytes)?;
    write_file(&a.out_dir.join("truth.jsonl"), &truth_bytes)?;
    write_manifest(&a.out_dir.join("manifest.json"), command_line, &cfg, &[])
}

pub fn cmd_features(a: &FeaturesArgs, command_line: &str) -> CliResult {
    let set = read_samples(&a.input, a.format)?;
    let annotated = dataset::annotate_characteristics(&set, &a.characteristics)?;
    let mut out = Vec::new();
    dataset::write_samples_jsonl(&mut out, &annotated)?;
    write_file(&a.output, &out)?;
    write_manifest(
        &manifest_path(&a.output),
        command_line,
        &a.characteristics,
        &[a.input.as_path()],
    )
}

pub fn cmd_winrate(a: &WinrateArgs, command_line: &str) -> CliResult {
    let set = read_samples(&a.input, a.format)?;
    let calibrated = calibrate::read_calibrated(&set)?;
    let ranked = metrics::rank_models(&set, &calibrated, &a.baseline)?;
    let mut bytes = serde_json::to_vec_pretty(&ranked).map_err(Error::from)?;
    bytes.push(b'\n');
    emit(a.output.as_deref(), &bytes)?;
    if let Some(out) = &a.output {
        write_manifest(&manifest_path(out), command_line, &a.baseline, &[a.input.as_path()])?;
    }
    Ok(())
}
