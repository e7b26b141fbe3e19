//! The `morse` command line.
//!
//! Every subcommand that writes files also writes `<out stem>.run.json` next
//! to its main output: the fully resolved arguments (seed included), which
//! `morse replay` executes again to reproduce the outputs byte for byte.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, FeatureFn, NormMap};
use crate::data::{format_real, gen_two_moons, read_csv, read_idx, sample_box, write_csv, Dataset, SampleBox};
use crate::error::Error;
use crate::eval::{
    auroc_report, read_score_column, scale_logits, score_dataset, softmax, train_classifier, write_scores_csv,
    ClassifierArch, ClassifierConfig, Origin, ScoreRecord, ScoreSet,
};
use crate::geometry::{morse_bott_check, HessianReport, MorseBottTolerances};
use crate::kernels::{KernelKind, KernelSpec};
use crate::model::MorseModel;
use crate::persist::{load_any, load_model, save_ensemble, save_model, SavedModel};
use crate::sampler::{run_flow, write_trajectories_csv, FlowConfig, FlowResult};
use crate::training::{
    train_separate, train_supervised, train_unsupervised, write_loss_csv, Architecture, ModelSpec, Schedule,
    TrainConfig,
};

/// Environment variable supplying the seed when `--seed` is absent.
pub const SEED_ENV: &str = "MORSE_SEED";

const TOOL: &str = concat!("morse-net ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "morse", version, about = "Fit, score and sample Morse neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Two-moons dataset as CSV (columns x0, x1, label).
    GenMoons(GenMoonsArgs),
    /// Uniform samples from a box as CSV.
    SampleBox(SampleBoxArgs),
    /// Train a model and save it as JSON.
    Fit(FitArgs),
    /// Per-row mu, s, V, T for a dataset.
    Score(ScoreArgs),
    /// AUROC of two score files, as JSON on stdout.
    Auroc(AurocArgs),
    /// Gradient flow of the potential from a set of starting points.
    Sample(SampleArgs),
    /// Train a classifier and emit raw and temperature-scaled probability grids.
    Calibrate(CalibrateArgs),
    /// Hessian eigen-analysis of the potential at mode points.
    VerifyMorseBott(VerifyArgs),
    /// Density raster over a 2-d box.
    Grid(GridArgs),
    /// IDX images (and labels) to CSV.
    ConvertIdx(ConvertIdxArgs),
    /// Re-run a command from its `.run.json` file.
    Replay(ReplayArgs),
}

/// `low:high` with scalar or comma-separated bounds, e.g. `-5:5` or `0,0:1,2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRange {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl FromStr for BoxRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (lo, hi) = s
            .split_once(':')
            .ok_or_else(|| format!("expected LOW:HIGH, got `{s}`"))?;
        let low = parse_list(lo)?;
        let high = parse_list(hi)?;
        if low.len() != high.len() && low.len() != 1 && high.len() != 1 {
            return Err(format!("bounds have {} and {} entries", low.len(), high.len()));
        }
        Ok(Self { low, high })
    }
}

impl BoxRange {
    /// Broadcasts scalar bounds to `dim` coordinates.
    pub fn resolve(&self, dim: usize) -> crate::Result<SampleBox> {
        let widen = |v: &[f64]| -> crate::Result<Vec<f64>> {
            match v.len() {
                1 => Ok(vec![v[0]; dim]),
                n if n == dim => Ok(v.to_vec()),
                n => Err(Error::dim("box bounds", dim, n)),
            }
        };
        SampleBox::new(widen(&self.low)?, widen(&self.high)?)
    }

    fn explicit_dim(&self) -> Option<usize> {
        let n = self.low.len().max(self.high.len());
        (n > 1).then_some(n)
    }
}

/// Comma-separated coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PointArg(pub Vec<f64>);

impl FromStr for PointArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_list(s).map(PointArg)
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect()
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenMoonsArgs {
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleBoxArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long = "box", default_value = "-5:5", allow_hyphen_values = true)]
    pub bounds: BoxRange,
    /// Required when the bounds are scalars.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMode {
    Unsupervised,
    Supervised,
    Separate,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// CSV with a header row; a `label` column is required for supervised modes.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = FitMode::Unsupervised)]
    pub mode: FitMode,
    #[arg(long, default_value = "gaussian")]
    pub kernel: KernelKind,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    /// JSON kernel description (needed for mixtures); overrides --kernel.
    #[arg(long)]
    pub kernel_file: Option<PathBuf>,
    /// Target `a` (one value broadcasts), or the one-hot scale when supervised.
    #[arg(long, value_delimiter = ',', default_value = "1", allow_hyphen_values = true)]
    pub a: Vec<f64>,
    /// Layer sizes after the input; the last one is the feature dimension.
    #[arg(long, value_delimiter = ',', required = true)]
    pub layers: Vec<usize>,
    #[arg(long, default_value = "relu")]
    pub activation: Activation,
    #[arg(long)]
    pub output_activation: Option<Activation>,
    #[arg(long)]
    pub no_bias: bool,
    #[arg(long, conflicts_with = "steps")]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub batch: usize,
    /// Box for the uniform negatives; `-5:5` when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub reg_box: Option<BoxRange>,
    #[arg(long)]
    pub reg_count: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub reg_weight: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss trace CSV.
    #[arg(long)]
    pub loss_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AurocArgs {
    #[arg(long)]
    pub ind: PathBuf,
    #[arg(long)]
    pub ood: PathBuf,
    /// Score column; higher must mean more out-of-distribution.
    #[arg(long, default_value = "s")]
    pub column: String,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV of starting points.
    #[arg(long, conflicts_with = "bounds")]
    pub starts: Option<PathBuf>,
    /// Draw `--count` starting points uniformly from this box.
    #[arg(long = "box", allow_hyphen_values = true)]
    pub bounds: Option<BoxRange>,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub step_size: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Full trajectories CSV.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct CalibrateArgs {
    /// Labeled 2-d training data (CSV).
    #[arg(long)]
    pub data: PathBuf,
    /// Unsupervised Morse model supplying the temperature.
    #[arg(long)]
    pub morse: PathBuf,
    /// Kernel bandwidths to scale with; the model's own kernel when empty.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long = "box", default_value = "-5:5", allow_hyphen_values = true)]
    pub bounds: BoxRange,
    #[arg(long, default_value_t = 50)]
    pub resolution: usize,
    /// Points at which to report probabilities on stdout.
    #[arg(long = "probe", allow_hyphen_values = true)]
    pub probes: Vec<PointArg>,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 6)]
    pub blocks: usize,
    #[arg(long)]
    pub no_skip: bool,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct VerifyArgs {
    #[arg(long, required_unless_present = "sphere")]
    pub model: Option<PathBuf>,
    /// Use the built-in sphere model `φ(x) = ‖x‖` in this dimension.
    #[arg(long, conflicts_with = "model")]
    pub sphere: Option<usize>,
    /// Gaussian bandwidth of the sphere model.
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Radius of the sphere model.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    #[arg(long = "point", allow_hyphen_values = true)]
    pub points: Vec<PointArg>,
    /// CSV of points to check.
    #[arg(long)]
    pub points_file: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    pub on_mode: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub zero_relative: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tangency: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// JSON array of reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GridArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "box", default_value = "-3:3", allow_hyphen_values = true)]
    pub bounds: BoxRange,
    /// Points per axis.
    #[arg(long, default_value_t = 100)]
    pub resolution: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ConvertIdxArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    pub config: PathBuf,
}

/// The resolved-config document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub command: Command,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(Error::Csv(e))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `args` (program name first) and runs the command.
///
/// Returns the process exit code: 0 on success, 1 on runtime failure, 2 on
/// usage errors.
pub fn dispatch<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                2
            } else {
                let _ = write!(out, "{text}");
                0
            };
        }
    };
    match run(cli.command, out, err) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(err, "error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn resolve_seed(seed: &mut Option<u64>) -> CliResult<u64> {
    if let Some(s) = seed {
        return Ok(*s);
    }
    let resolved = match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| usage(format!("{SEED_ENV} must be a non-negative integer, got `{v}`")))?,
        Err(_) => 0,
    };
    *seed = Some(resolved);
    Ok(resolved)
}

fn run_record_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.run.json"))
}

fn write_run_record(out: &Path, command: Command) -> CliResult {
    let path = run_record_path(out);
    let record = RunRecord {
        tool: TOOL.into(),
        command,
    };
    let mut text = serde_json::to_string_pretty(&record).map_err(Error::from)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn run(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    match command {
        Command::GenMoons(a) => gen_moons_cmd(a, out),
        Command::SampleBox(a) => sample_box_cmd(a, out),
        Command::Fit(a) => fit_cmd(a, out, err),
        Command::Score(a) => score_cmd(a, out, err),
        Command::Auroc(a) => auroc_cmd(a, out),
        Command::Sample(a) => sample_cmd(a, out, err),
        Command::Calibrate(a) => calibrate_cmd(a, out, err),
        Command::VerifyMorseBott(a) => verify_cmd(a, out),
        Command::Grid(a) => grid_cmd(a, out),
        Command::ConvertIdx(a) => convert_idx_cmd(a, out),
        Command::Replay(a) => replay_cmd(a, out, err),
    }
}

fn say(out: &mut dyn Write, msg: std::fmt::Arguments<'_>) {
    let _ = out.write_fmt(msg);
    let _ = out.write_all(b"\n");
}

fn load_csv(path: &Path, err: &mut dyn Write) -> CliResult<Dataset> {
    let import = read_csv(path)?;
    if import.rejected_rows > 0 {
        say(err, format_args!("warning: {}: rejected {} rows with non-finite values", path.display(), import.rejected_rows));
    }
    Ok(import.dataset)
}

fn gen_moons_cmd(mut a: GenMoonsArgs, out: &mut dyn Write) -> CliResult {
    let seed = resolve_seed(&mut a.seed)?;
    let data = gen_two_moons(a.n, a.noise, seed)?;
    write_csv(&data, &a.out)?;
    write_run_record(&a.out, Command::GenMoons(a.clone()))?;
    say(out, format_args!("wrote {} points to {}", data.len(), a.out.display()));
    Ok(())
}

fn sample_box_cmd(mut a: SampleBoxArgs, out: &mut dyn Write) -> CliResult {
    let seed = resolve_seed(&mut a.seed)?;
    let dim = match (a.dim, a.bounds.explicit_dim()) {
        (Some(d), Some(e)) if d != e => return Err(usage(format!("--dim {d} but the box has {e} coordinates"))),
        (Some(d), _) | (None, Some(d)) => d,
        (None, None) => return Err(usage("scalar box bounds need --dim")),
    };
    a.dim = Some(dim);
    let bounds = a.bounds.resolve(dim)?;
    let data = sample_box(a.count, &bounds.low, &bounds.high, seed)?;
    write_csv(&data, &a.out)?;
    write_run_record(&a.out, Command::SampleBox(a.clone()))?;
    say(out, format_args!("wrote {} points to {}", data.len(), a.out.display()));
    Ok(())
}

fn fit_kernel(a: &FitArgs) -> CliResult<KernelSpec> {
    if let Some(path) = &a.kernel_file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: KernelSpec = serde_json::from_str(&text).map_err(Error::from)?;
        spec.validate()?;
        return Ok(spec);
    }
    KernelSpec::from_parts(a.kernel, a.lambda, a.nu, a.m).map_err(|e| usage(e.to_string()))
}

fn fit_cmd(mut a: FitArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let seed = resolve_seed(&mut a.seed)?;
    if a.epochs.is_none() && a.steps.is_none() {
        a.epochs = Some(1);
    }
    let kernel = fit_kernel(&a)?;
    let data = load_csv(&a.data, err)?;
    let mut arch = Architecture::new(a.layers.clone(), a.activation);
    arch.output_activation = a.output_activation;
    arch.bias = !a.no_bias;
    let spec = ModelSpec {
        arch,
        kernel,
        a: a.a.clone(),
    };
    let reg_box = a.reg_box.as_ref().map(|b| b.resolve(data.dim())).transpose()?;
    let config = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        schedule: match a.steps {
            Some(s) => Schedule::Steps(s),
            None => Schedule::Epochs(a.epochs.unwrap_or(1)),
        },
        seed,
        reg_box,
        reg_count: a.reg_count,
        reg_weight: a.reg_weight,
        ..TrainConfig::default()
    };
    let trace = match a.mode {
        FitMode::Unsupervised => {
            let outcome = train_unsupervised(&data, &spec, &config)?;
            save_model(&outcome.model, &a.out)?;
            outcome.trace
        }
        FitMode::Supervised => {
            let outcome = train_supervised(&data, &spec, &config)?;
            save_model(&outcome.model, &a.out)?;
            outcome.trace
        }
        FitMode::Separate => {
            let outcome = train_separate(&data, std::slice::from_ref(&spec), &config)?;
            save_ensemble(&outcome.model, &a.out)?;
            outcome.trace
        }
    };
    if let Some(path) = &a.loss_out {
        write_loss_csv(&trace, path)?;
    }
    write_run_record(&a.out, Command::Fit(a.clone()))?;
    let last = trace.last().map_or(f64::NAN, |r| r.loss);
    say(out, format_args!("trained {} steps, final loss {last:.6}; wrote {}", trace.len(), a.out.display()));
    Ok(())
}

fn score_cmd(a: ScoreArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let model = load_any(&a.model)?;
    let data = load_csv(&a.data, err)?;
    let records = score_dataset(&model, &data)?;
    write_scores_csv(&records, &a.out)?;
    write_run_record(&a.out, Command::Score(a.clone()))?;
    say(out, format_args!("scored {} rows; wrote {}", records.len(), a.out.display()));
    Ok(())
}

fn auroc_cmd(a: AurocArgs, out: &mut dyn Write) -> CliResult {
    let ind = ScoreSet::new(read_score_column(&a.ind, &a.column)?, Origin::Ind)?;
    let ood = ScoreSet::new(read_score_column(&a.ood, &a.column)?, Origin::Ood)?;
    let report = auroc_report(&ind, &ood)?;
    let text = serde_json::to_string(&report).map_err(Error::from)?;
    say(out, format_args!("{text}"));
    if let Some(path) = &a.out {
        std::fs::write(path, format!("{text}\n")).map_err(|e| Error::io(path, e))?;
        write_run_record(path, Command::Auroc(a.clone()))?;
    }
    Ok(())
}

fn single_model(model: SavedModel, path: &Path) -> CliResult<MorseModel> {
    match model {
        SavedModel::Single(m) if !m.is_supervised() => Ok(m),
        _ => Err(CliError::Runtime(Error::Unsupported(format!(
            "{}: this command needs a single unsupervised model",
            path.display()
        )))),
    }
}

fn sample_cmd(mut a: SampleArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let seed = resolve_seed(&mut a.seed)?;
    let model = single_model(load_any(&a.model)?, &a.model)?;
    let starts = match (&a.starts, &a.bounds) {
        (Some(path), None) => load_csv(path, err)?.features,
        (None, Some(b)) => {
            let bounds = b.resolve(model.input_dim())?;
            sample_box(a.count, &bounds.low, &bounds.high, seed)?.features
        }
        _ => return Err(usage("sample needs exactly one of --starts or --box")),
    };
    if starts.ncols() != model.input_dim() {
        return Err(Error::dim("starting points", model.input_dim(), starts.ncols()).into());
    }
    let config = FlowConfig {
        step_size: a.step_size,
        steps: a.steps,
        trace: a.trace_out.is_some(),
    };
    let results = starts
        .rows()
        .into_iter()
        .map(|r| run_flow(&model, &r.to_vec(), &config))
        .collect::<crate::Result<Vec<_>>>()?;
    write_flow_summary(&results, &a.out)?;
    if let Some(path) = &a.trace_out {
        write_trajectories_csv(&results, path)?;
    }
    write_run_record(&a.out, Command::Sample(a.clone()))?;
    let converged = results.iter().filter(|r| r.converged).count();
    say(out, format_args!("{} flows, {converged} converged; wrote {}", results.len(), a.out.display()));
    Ok(())
}

fn write_flow_summary(results: &[FlowResult], path: &Path) -> CliResult {
    let d = results.first().map_or(0, |r| r.point.len());
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["flow".to_string()];
    header.extend((0..d).map(|j| format!("start_{j}")));
    header.extend((0..d).map(|j| format!("x_{j}")));
    header.extend(["mu", "s", "V_initial", "V", "grad_norm", "converged"].map(String::from));
    w.write_record(&header)?;
    for (i, r) in results.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(r.start.iter().chain(&r.point).copied().map(format_real));
        row.extend(
            [r.density, 1.0 - r.density, r.initial_potential, r.potential, r.grad_norm]
                .map(format_real),
        );
        row.push(r.converged.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn grid_points(bounds: &BoxRange, resolution: usize) -> CliResult<Array2<f64>> {
    if resolution < 2 {
        return Err(usage("--resolution must be at least 2"));
    }
    let b = bounds.resolve(2)?;
    let axis = |j: usize, i: usize| b.low[j] + (b.high[j] - b.low[j]) * i as f64 / (resolution - 1) as f64;
    Ok(Array2::from_shape_fn((resolution * resolution, 2), |(r, c)| {
        // x0 varies fastest
        if c == 0 {
            axis(0, r % resolution)
        } else {
            axis(1, r / resolution)
        }
    }))
}

fn calibrate_cmd(mut a: CalibrateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let seed = resolve_seed(&mut a.seed)?;
    let data = load_csv(&a.data, err)?;
    let morse = single_model(load_any(&a.morse)?, &a.morse)?;
    if data.dim() != 2 || morse.input_dim() != 2 {
        return Err(usage("calibrate works on 2-d data and a 2-d Morse model"));
    }
    let kernels: Vec<(String, MorseModel)> = if a.lambdas.is_empty() {
        vec![("model".into(), morse.clone())]
    } else {
        a.lambdas
            .iter()
            .map(|&l| Ok((format!("l{l}"), morse.clone().with_kernel(morse.kernel().with_lambda(l)?)?)))
            .collect::<crate::Result<_>>()?
    };
    let arch = ClassifierArch {
        width: a.width,
        blocks: a.blocks,
        activation: Activation::Relu,
        residual: !a.no_skip,
    };
    let config = ClassifierConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        schedule: Schedule::Epochs(a.epochs),
        seed,
        ..ClassifierConfig::default()
    };
    let classifier = train_classifier(&data, &arch, &config)?.model;
    let accuracy = classifier.accuracy(&data)?;
    let c = classifier.num_classes();

    let grid = grid_points(&a.bounds, a.resolution)?;
    let logits = classifier.logits(grid.view())?;
    let file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["x0".to_string(), "x1".to_string()];
    header.extend((0..c).map(|k| format!("p{k}")));
    for (tag, _) in &kernels {
        header.push(format!("mu_{tag}"));
        header.extend((0..c).map(|k| format!("p{k}_{tag}")));
    }
    w.write_record(&header)?;
    for (x, h) in grid.rows().into_iter().zip(logits.rows()) {
        let x = x.to_vec();
        let h = h.to_vec();
        let mut row: Vec<String> = x.iter().chain(&softmax(&h)).copied().map(format_real).collect();
        for (_, m) in &kernels {
            row.push(format_real(m.density(&x)?));
            row.extend(softmax(&scale_logits(&h, m, &x)?).into_iter().map(format_real));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    write_run_record(&a.out, Command::Calibrate(a.clone()))?;

    say(out, format_args!("classifier training accuracy {accuracy:.4}"));
    for p in &a.probes {
        if p.0.len() != 2 {
            return Err(usage(format!("probe {:?} is not a 2-d point", p.0)));
        }
        let h = classifier.logits(ndarray::ArrayView2::from_shape((1, 2), &p.0).expect("row").view())?;
        let h = h.row(0).to_vec();
        let raw = softmax(&h);
        let mut line = format!("probe ({}, {}): max p {:.4}", p.0[0], p.0[1], max_of(&raw));
        for (tag, m) in &kernels {
            let scaled = softmax(&scale_logits(&h, m, &p.0)?);
            line.push_str(&format!(", {tag} {:.4}", max_of(&scaled)));
        }
        say(out, format_args!("{line}"));
    }
    say(out, format_args!("wrote {}", a.out.display()));
    Ok(())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn verify_cmd(a: VerifyArgs, out: &mut dyn Write) -> CliResult {
    let tol = MorseBottTolerances {
        on_mode: a.on_mode,
        zero_relative: a.zero_relative,
        tangency: a.tangency,
        eps: a.eps,
    };
    let mut points: Vec<Vec<f64>> = a.points.iter().map(|p| p.0.clone()).collect();
    if let Some(path) = &a.points_file {
        let data = read_csv(path)?.dataset;
        points.extend(data.features.rows().into_iter().map(|r| r.to_vec()));
    }
    if points.is_empty() {
        return Err(usage("give at least one --point or a --points-file"));
    }
    let rows = match (&a.model, a.sphere) {
        (Some(path), None) => {
            let model = load_model(path)?;
            check_points(&model, &points, &tol)
        }
        (None, Some(dim)) => {
            let model = MorseModel::unsupervised(NormMap { dim }, KernelSpec::gaussian(a.lambda), vec![a.a])?;
            check_points(&model, &points, &tol)
        }
        _ => return Err(usage("give exactly one of --model or --sphere")),
    };
    say(out, format_args!("{:<28} {:>10} {:>10} {:<36} {}", "point", "residual", "tangency", "eigenvalues", "verdict"));
    let mut reports = Vec::new();
    for (p, r) in points.iter().zip(rows) {
        let point = format!("{p:?}");
        match r {
            Ok(rep) => {
                let eig: Vec<String> = rep.eigenvalues.iter().map(|v| format!("{v:.4}")).collect();
                say(
                    out,
                    format_args!(
                        "{point:<28} {:>10.2e} {:>10.2e} {:<36} {}",
                        rep.residual,
                        rep.tangency_error,
                        eig.join(" "),
                        rep.verdict
                    ),
                );
                reports.push(rep);
            }
            Err(e) => say(out, format_args!("{point:<28} error: {e}")),
        }
    }
    if let Some(path) = &a.out {
        let mut text = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        write_run_record(path, Command::VerifyMorseBott(a.clone()))?;
    }
    Ok(())
}

fn check_points<F: FeatureFn>(
    model: &MorseModel<F>,
    points: &[Vec<f64>],
    tol: &MorseBottTolerances,
) -> Vec<crate::Result<HessianReport>> {
    points.iter().map(|p| morse_bott_check(model, p, tol)).collect()
}

fn grid_cmd(a: GridArgs, out: &mut dyn Write) -> CliResult {
    let model = load_any(&a.model)?;
    let grid = grid_points(&a.bounds, a.resolution)?;
    let data = Dataset::new(grid, None, "grid")?;
    let records: Vec<ScoreRecord> = score_dataset(&model, &data)?;
    let file = std::fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(["x0", "x1", "mu", "s", "V", "T"])?;
    for (i, r) in records.iter().enumerate() {
        let x = data.row(i);
        w.write_record([x[0], x[1], r.mu, r.s, r.v, r.t].map(format_real))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    write_run_record(&a.out, Command::Grid(a.clone()))?;
    say(out, format_args!("wrote {} grid points to {}", records.len(), a.out.display()));
    Ok(())
}

fn convert_idx_cmd(a: ConvertIdxArgs, out: &mut dyn Write) -> CliResult {
    let data = read_idx(&a.images, a.labels.as_deref())?;
    write_csv(&data, &a.out)?;
    write_run_record(&a.out, Command::ConvertIdx(a.clone()))?;
    say(out, format_args!("wrote {} rows of {} features to {}", data.len(), data.dim(), a.out.display()));
    Ok(())
}

fn replay_cmd(a: ReplayArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let record: RunRecord = serde_json::from_str(&text).map_err(Error::from)?;
    if matches!(record.command, Command::Replay(_)) {
        return Err(usage("a run record cannot replay another run record"));
    }
    if record.tool != TOOL {
        say(err, format_args!("warning: recorded with {}, replaying with {TOOL}", record.tool));
    }
    run(record.command, out, err)
}
