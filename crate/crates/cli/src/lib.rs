//! Command-line front end: `facecomp <subcommand> [flags]`.
//!
//! Exit codes are 0 on success, 1 for usage errors and 2 for runtime
//! errors, which are printed to stderr as one line `error: <code>: <detail>`.

mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde_json::Value;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "facecomp", version, about = "Component-level face encoding, editing and training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a procedural sprite dataset (PNGs, params.jsonl, attributes.csv).
    GenData(GenDataArgs),
    /// Train an encoder/decoder pair; writes checkpoints and losses.csv.
    Train(TrainArgs),
    /// Encode images into code files.
    Encode(EncodeArgs),
    /// Decode a code file into a PNG.
    Decode(DecodeArgs),
    /// Edit a code along a direction, a PCA axis, or by zeroing components.
    Edit(EditArgs),
    /// Copy component embeddings from a reference code into a target code.
    Transfer(TransferArgs),
    /// Fit an attribute direction on encoded dataset images.
    Direction(DirectionArgs),
    /// Fit per-component PCA bases on encoded dataset images.
    Pca(PcaArgs),
    /// Image-quality and editing metrics over folders of matching files.
    Metrics(MetricsArgs),
    /// Chi-square test of independence between two binary labels.
    BiasReport(BiasReportArgs),
    /// Start the HTTP editing service.
    Serve(ServeArgs),
}

/// Config merging (all subcommands except `train`): a JSON object whose keys
/// are flag names, e.g. `{"checkpoint": "runs/a/ckpt-00002000", "alpha": 1.5}`.
/// Flags on the command line win.
#[derive(Debug, Args)]
pub struct ConfigArg {
    /// JSON file of default flag values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    /// Image side in pixels (32, 64, 128 or 256).
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Correlate bushy eyebrows with `male` at this rate.
    #[arg(long)]
    pub bias_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training configuration JSON (same schema as the `train_config.json` written
    /// into run directories). Flags override its fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Run directory for checkpoints and losses.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint directory.
    #[arg(long, conflicts_with_all = ["config", "out"])]
    pub resume: Option<PathBuf>,
    /// Model size: tiny (16 px), toy (32 px) or desk (64 px).
    #[arg(long)]
    pub preset: Option<String>,
    /// Decoder modulation: cam or global.
    #[arg(long)]
    pub mode: Option<String>,
    /// Folder of training PNGs.
    #[arg(long, conflicts_with = "sprites")]
    pub data: Option<PathBuf>,
    /// Train on this many procedurally rendered sprites.
    #[arg(long)]
    pub sprites: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub bias_rate: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    #[arg(long)]
    pub no_perceptual: bool,
    #[arg(long)]
    pub no_perturb: bool,
    /// Log losses to stderr every N steps (0 = never).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One PNG, or a directory of PNGs.
    #[arg(long)]
    pub image: PathBuf,
    /// Code file (single image) or directory (folder input). Prints the code
    /// JSON to stdout when omitted for a single image.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub code: PathBuf,
    /// Output PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub code: PathBuf,
    /// Attribute direction JSON.
    #[arg(long, requires = "alpha", conflicts_with_all = ["pca", "zero"])]
    pub direction: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// PCA basis JSON (with --index and --delta).
    #[arg(long, requires_all = ["index", "delta"], conflicts_with = "zero")]
    pub pca: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Step in standard deviations along the PCA axis.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    /// Comma-separated components to zero.
    #[arg(long)]
    pub zero: Option<String>,
    /// Output code file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Comma-separated: left_eye, right_eye, nose, mouth.
    #[arg(long)]
    pub components: String,
    /// coarse, fine or all; needs --checkpoint for the layer layout.
    #[arg(long, requires = "checkpoint")]
    pub level_range: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DirectionArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Folder of PNGs with attributes.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Label column to separate.
    #[arg(long)]
    pub attribute: String,
    /// meandiff, svm, rectified or debiased.
    #[arg(long, default_value = "svm")]
    pub method: String,
    /// Comma-separated components; defaults to the attribute's region, or
    /// all four components for attributes without one.
    #[arg(long)]
    pub relevant: Option<String>,
    /// SVM box constraint; hard margin when omitted.
    #[arg(long)]
    pub c: Option<f64>,
    /// Confound label column (debiased).
    #[arg(long)]
    pub confound: Option<String>,
    /// Direction to remove (rectified).
    #[arg(long)]
    pub condition: Option<PathBuf>,
    /// train, val, test or all.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long)]
    pub name: Option<String>,
    /// Direction JSON; defaults to `<name>.json` in the current directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated components, or `all`.
    #[arg(long, default_value = "all")]
    pub component: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Directory for `pca_<component>.json` files.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Originals.
    #[arg(long)]
    pub source: PathBuf,
    /// Reconstructions, same file names as --source.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    /// Edited reconstructions, same file names as --source.
    #[arg(long)]
    pub edited: Option<PathBuf>,
    /// Attribute whose region is excluded from the edit error.
    #[arg(long)]
    pub attribute: Option<String>,
    /// Checkpoint for the fidelity gap (and the accuracy sweep).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Direction for an edit-accuracy sweep over the --source sprites.
    #[arg(long, requires_all = ["checkpoint", "attribute"])]
    pub direction: Option<PathBuf>,
    /// Comma-separated alphas for the sweep.
    #[arg(long, default_value = "0.5,1,2,3", allow_hyphen_values = true)]
    pub alphas: String,
    /// Per-image CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
}

#[derive(Debug, Args)]
pub struct BiasReportArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// a,b,c,d for the table [[a, b], [c, d]].
    #[arg(long, conflicts_with = "labels")]
    pub counts: Option<String>,
    /// attributes.csv to cross-tabulate.
    #[arg(long, requires_all = ["row", "column"])]
    pub labels: Option<PathBuf>,
    /// Row attribute (with --labels).
    #[arg(long)]
    pub row: Option<String>,
    /// Column attribute (with --labels).
    #[arg(long)]
    pub column: Option<String>,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directions and PCA bases; defaults to `<checkpoint>/../directions`.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Write-through directory for sessions.
    #[arg(long)]
    pub session_dir: Option<PathBuf>,
    #[arg(long, default_value_t = facecomp_service::DEFAULT_SESSION_CAPACITY)]
    pub capacity: usize,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: std::net::SocketAddr,
}

/// A runtime failure with a short machine-readable code.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub detail: String,
}

impl CliError {
    pub fn new(code: &'static str, detail: impl fmt::Display) -> Self {
        Self {
            code,
            detail: detail.to_string(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let detail = self.detail.split('\n').map(str::trim_end).collect::<Vec<_>>().join("; ");
        write!(f, "error: {}: {detail}", self.code)
    }
}

macro_rules! error_code {
    ($($ty:ty => $code:literal),* $(,)?) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                Self::new($code, e)
            }
        })*
    };
}

error_code! {
    std::io::Error => "io",
    serde_json::Error => "json",
    csv::Error => "csv",
    facecomp_core::code::CodeError => "code",
    facecomp_core::checkpoint::CheckpointError => "checkpoint",
    facecomp_core::networks::NetworkError => "network",
    facecomp_core::imaging::ImageError => "image",
    facecomp_core::sprites::SpriteError => "dataset",
    facecomp_core::trainer::TrainError => "train",
    facecomp_core::reasoning::ReasoningError => "reasoning",
    facecomp_core::metrics::MetricsError => "metrics",
    facecomp_service::ServiceError => "service",
}

/// Parse `argv` (including the program name) and run the subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    let matches = Cli::command()
        .mut_subcommands(|s| s.args_override_self(true))
        .try_get_matches_from(argv);
    let cli = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            if e.code == "usage" {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}

/// Splice the flags stored in a `--config` file in front of the command-line
/// flags, so the latter override them. `train` reads its config itself.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(sub) = argv.iter().skip(1).position(|a| !a.to_string_lossy().starts_with('-')).map(|i| i + 1) else {
        return Ok(argv);
    };
    if argv[sub] == "train" {
        return Ok(argv);
    }
    let mut rest = Vec::new();
    let mut path = None;
    let mut it = argv[sub + 1..].iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let p = it.next().ok_or_else(|| CliError::new("usage", "--config needs a file"))?;
            path = Some(PathBuf::from(p));
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else {
            rest.push(a.clone());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
    let map = match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => return Err(CliError::new("config", format!("{}: expected a JSON object", path.display()))),
        Err(e) => return Err(CliError::new("config", format!("{}: {e}", path.display()))),
    };
    let mut out: Vec<OsString> = argv[..=sub].to_vec();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        let text = match value {
            Value::Null | Value::Bool(false) => continue,
            Value::Bool(true) => {
                out.push(flag.into());
                continue;
            }
            Value::String(s) => s,
            Value::Number(n) => n.to_string(),
            Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect::<Vec<_>>()
                .join(","),
            Value::Object(_) => return Err(CliError::new("config", format!("value of `{key}` must not be an object"))),
        };
        out.push(format!("{flag}={text}").into());
    }
    out.extend(rest);
    Ok(out)
}
