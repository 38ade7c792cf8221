//! `waterseg` command-line tool. Every subcommand is also a library function
//! so tests can drive it without a subprocess.

pub mod evaluate;
pub mod infer;
pub mod plotdata;
pub mod report;
pub mod train;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use waterseg::backbone::Segmenter;
use waterseg::params::ParamStore;
use waterseg::s2match::trainer::{load_weights, WeightSet};
use waterseg::{Error, Result};

pub use waterseg::config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "waterseg", version, about = "Semi-supervised water segmentation and assessment reports")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set s2match.tau=0.9`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::with_overrides(&self.overrides),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with labeled and unlabeled data.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write into this directory instead of a new timestamped one.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Compute metrics and the PR curve on a dataset split.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        args: evaluate::EvalArgs,
    },
    /// Predict masks and probability maps for images.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        student: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Image files or directories.
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Generate assessment reports for images.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        args: report::ReportArgs,
    },
    /// Score generated reports against reference reports.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        args: report::ScoreArgs,
    },
    /// Draft reference reports for manual review.
    Corpus {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write a synthetic dataset.
    Toygen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        labeled: usize,
        #[arg(long, default_value_t = 200)]
        unlabeled: usize,
        #[arg(long, default_value_t = 50)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Turn metric, PR and score files into plot-ready CSVs.
    Plotdata {
        #[command(flatten)]
        args: plotdata::PlotArgs,
    },
    /// Train and evaluate once per strong-consistency threshold.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.65, 0.8, 0.95])]
        tau_s: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
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
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { cfg, resume, run_dir } => {
            let out = train::cmd_train(&cfg.load()?, resume.as_deref(), run_dir)?;
            println!("run directory: {}", out.run_dir.display());
            if let Some(r) = out.val {
                println!("validation IoU {:.4} dice {:.4}", r.iou, r.dice);
            }
        }
        Command::Evaluate { cfg, args } => {
            let out = evaluate::cmd_evaluate(&cfg.load()?, &args)?;
            println!("{}", serde_json::to_string_pretty(&out.report)?);
            println!("written to {}", out.out_dir.display());
        }
        Command::Infer { cfg, checkpoint, student, out, images } => {
            let written = infer::cmd_infer(&cfg.load()?, &checkpoint, student, &images, out)?;
            println!("wrote {} masks", written.len());
        }
        Command::Report { cfg, args } => {
            let out = report::cmd_report(&cfg.load()?, &args)?;
            println!("{} reports, {} failures -> {}", out.reports, out.failures, out.path.display());
        }
        Command::Score { cfg, args } => {
            let s = report::cmd_score(&cfg.load()?, &args)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Corpus { cfg, out, images } => {
            let n = report::cmd_corpus(&cfg.load()?, &images, &out)?;
            println!("{n} draft references -> {}", out.display());
        }
        Command::Toygen { cfg, out, labeled, unlabeled, val, seed } => {
            let cfg = cfg.load()?;
            let m = waterseg::data::generate_toy_dataset(labeled, unlabeled, val, &cfg.toy, seed, &out)?;
            println!("{} labeled, {} unlabeled -> {}", m.labeled.len(), m.unlabeled.len(), out.display());
        }
        Command::Plotdata { args } => {
            for p in plotdata::cmd_plotdata(&args)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep { cfg, tau_s, out } => {
            let path = train::cmd_sweep(&cfg.load()?, &tau_s, out)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

/// `<output.dir>/<UTC timestamp>-<config hash>[-<label>]`, made unique with a
/// numeric suffix.
pub fn new_run_dir(cfg: &RunConfig, label: Option<&str>) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = match label {
        Some(l) => format!("{stamp}-{}-{l}", cfg.hash()),
        None => format!("{stamp}-{}", cfg.hash()),
    };
    let mut dir = cfg.output.dir.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = cfg.output.dir.join(format!("{base}.{k}"));
        k += 1;
    }
    create_dir(&dir)?;
    Ok(dir)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Builds the model and loads weights, rejecting checkpoints whose tensors do
/// not match the configured architecture.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path, which: WeightSet) -> Result<(Segmenter, ParamStore)> {
    let model = Segmenter::new(cfg.backbone.clone(), cfg.adaptation.clone())?;
    let (params, meta) = load_weights(checkpoint, which)?;
    model
        .init_params(0)
        .check_congruent(&params)
        .map_err(|e| Error::config(format!("checkpoint {} does not match the configured model: {e}", checkpoint.display())))?;
    if let Some(h) = meta.get("config_hash") {
        if *h != cfg.hash() {
            log::warn!("checkpoint was written under config {h}, current config is {}", cfg.hash());
        }
    }
    Ok((model, params))
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Files as given plus the images inside any directories, sorted per directory.
pub fn expand_images(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(Error::Dataset(vec![format!("{} does not exist", p.display())]));
        }
    }
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::config(format!("{}: {e}", path.display()))
}
